"""Fixed-format answer parsing and the 14-label evaluation harness.

AUROC uses the Mann-Whitney formulation (probability a random positive
outranks a random negative, ties counted one half); labels with a single
class in the split are skipped and listed rather than silently folded in.
Accuracy is per-decision over all 14 * n thresholded predictions; F1 is
macro-averaged over labels with any positive in prediction or truth.
"""

import json
from dataclasses import dataclass

import numpy as np
import torch

from . import text
from .errors import ParseError, ValidationError
from .losses import classify, gaze_logits
from .training import collate, pin_single_thread


class AnswerParseError(ParseError):
    """Deviation from the fixed answer grammar; carries the first bad clause.

    clause is 1-based over the 14 finding clauses; 0 marks a broken
    prefix (placeholders/Answer:) and 15 trailing garbage.
    """

    def __init__(self, message, clause):
        super().__init__(f"clause {clause}: {message}" if clause else message)
        self.clause = clause


def parse_fixed_answer(answer_text):
    """Parse a canonical answer string into a 14-entry 0/1 tuple.

    Grammar (single spaces, canonical finding order):
    ``<st1><st2><st3><st4> Answer: <finding>: yes|no`` * 14.
    """
    prefix = "".join(text.GAZE_PLACEHOLDERS) + " " + text.ANSWER_MARKER
    if not answer_text.startswith(prefix):
        raise AnswerParseError("missing placeholder/Answer: prefix", clause=0)
    rest = answer_text[len(prefix):]
    if rest.startswith(" "):
        rest = rest[1:]
    else:
        raise AnswerParseError("expected a space after Answer:", clause=1)
    tokens = rest.split(" ")
    labels = []
    for j in range(text.N_FINDINGS):
        name_tok = f"{text.FINDINGS[j]}:"
        if 2 * j >= len(tokens) or tokens[2 * j] != name_tok:
            raise AnswerParseError(
                f"expected {name_tok!r}", clause=j + 1
            )
        if 2 * j + 1 >= len(tokens):
            raise AnswerParseError("missing yes/no value", clause=j + 1)
        value = tokens[2 * j + 1]
        if value == text.YES:
            labels.append(1)
        elif value == text.NO:
            labels.append(0)
        else:
            raise AnswerParseError(f"value {value!r} is neither yes nor no", clause=j + 1)
    if len(tokens) > 2 * text.N_FINDINGS:
        raise AnswerParseError("trailing tokens after the last clause", clause=15)
    return tuple(labels)


def auroc(scores, labels):
    """Tie-aware AUROC; None when the labels are single-class."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # average 1-based rank
        i = j + 1
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def acc_f1(y_hat, y, threshold=0.5):
    """(accuracy, macro F1) of thresholded predictions.

    Accuracy counts every one of the 14 * n decisions. F1 is averaged
    over labels with any positive in prediction or truth; all-negative
    labels are excluded from the macro mean.
    """
    pred = (np.asarray(y_hat, dtype=np.float64) >= threshold).astype(np.int64)
    truth = np.asarray(y, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValidationError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    accuracy = float((pred == truth).mean())
    f1s = []
    for j in range(truth.shape[1]):
        tp = int(((pred[:, j] == 1) & (truth[:, j] == 1)).sum())
        fp = int(((pred[:, j] == 1) & (truth[:, j] == 0)).sum())
        fn = int(((pred[:, j] == 0) & (truth[:, j] == 1)).sum())
        if tp + fp + fn == 0:
            continue
        f1s.append(2.0 * tp / (2.0 * tp + fp + fn))
    macro_f1 = float(np.mean(f1s)) if f1s else 0.0
    return accuracy, macro_f1


def topk_logit_indices(logits, k):
    """Indices of the k largest logits, descending, ties broken by id."""
    order = sorted(range(len(logits)), key=lambda p: (-float(logits[p]), p))
    return order[:k]


def gaze_topk_accuracy(logits, supervision, k):
    """Fraction of supervised tokens whose targets intersect the top-k.

    Tokens with empty target lists are excluded; returns None when every
    token is unsupervised.
    """
    hits, total = gaze_topk_counts(logits, supervision, k)
    if total == 0:
        return None
    return hits / total


def gaze_topk_counts(logits, supervision, k):
    hits = 0
    total = 0
    for i, targets in enumerate(supervision.token_targets):
        if not targets:
            continue
        total += 1
        if set(topk_logit_indices(logits[i], k)) & set(targets):
            hits += 1
    return hits, total


@dataclass(frozen=True)
class MetricsReport:
    per_label_auroc: tuple  # 14 entries, float or None
    macro_auroc: object  # float or None
    accuracy: float
    macro_f1: float
    n_samples: int
    skipped_labels: tuple
    mode: str


def _scores_classifier_head(model, samples, batch_size):
    """Sigmoid scores from the classifier readout.

    Evaluation always force-feeds the constant all-"no" answer template,
    never the true answers, so no label information can reach the readout
    regardless of its position.
    """
    config = model.config
    readout = config.cls_readout
    scores = []
    for start in range(0, len(samples), batch_size):
        batch = [make_neutral_sample(s) for s in samples[start : start + batch_size]]
        token_ids, images, _, layout, _ = collate(batch, config)
        h, _ = model(token_ids, images)
        y_hat = classify(h[:, layout.readout_index(readout), :], model.cls_head)
        scores.append(y_hat.detach().numpy())
    return np.concatenate(scores, axis=0)


def _decode_parsed_text(model, samples, batch_size):
    """Constrained greedy decode of the 14 yes/no slots, then parse.

    The fed answer starts as the all-"no" template; each slot is decided
    from the logits at the preceding position (yes vs no only) and fed
    back before moving to the next slot, so the decode is autoregressive
    within the fixed grammar.
    """
    config = model.config
    preds = []
    for start in range(0, len(samples), batch_size):
        batch = samples[start : start + batch_size]
        neutral = [
            make_neutral_sample(s) for s in batch
        ]
        token_ids, images, _, layout, _ = collate(neutral, config)
        answer_start = layout.answer_span[0]
        for j in range(text.N_FINDINGS):
            value_pos = answer_start + 5 + 2 * j + 1
            _, lm = model(token_ids, images)
            slot = lm[:, value_pos - 1, :]
            choose_yes = slot[:, text.YES_ID] > slot[:, text.NO_ID]
            token_ids[:, value_pos] = torch.where(
                choose_yes,
                torch.tensor(text.YES_ID),
                torch.tensor(text.NO_ID),
            )
        for row in token_ids:
            answer_ids = [int(t) for t in row[answer_start:]]
            preds.append(parse_fixed_answer(text.detokenize_answer(answer_ids)))
    return np.asarray(preds, dtype=np.float64)


def make_neutral_sample(sample):
    """Copy of a sample with the constant all-"no" answer template."""
    return type(sample)(
        sample_id=sample.sample_id,
        image=sample.image,
        prompt_tokens=sample.prompt_tokens,
        answer_tokens=tuple(text.answer_token_ids([0] * text.N_FINDINGS)),
        y=sample.y,
        supervision=sample.supervision,
    )


def evaluate(model, samples, mode="classifier_head", expected_variant=None,
             manifest=None, batch_size=32, threshold=0.5):
    """Score a dataset and assemble a MetricsReport.

    classifier_head mode reports AUROC from the sigmoid scores;
    parsed_text mode decodes the constrained answer, parses it, and
    reports accuracy/F1 only (binary scores carry no ranking).
    """
    if mode not in ("classifier_head", "parsed_text"):
        raise ValidationError(f"unknown evaluation mode {mode!r}")
    if expected_variant is not None:
        found = (manifest or {}).get("supervision_variant")
        if found != expected_variant:
            raise ValidationError(
                f"checkpoint variant {found!r} does not match requested {expected_variant!r}"
            )
    pin_single_thread()
    was_training = model.training
    model.eval()
    truth = np.asarray([s.y for s in samples], dtype=np.int64)
    with torch.no_grad():
        if mode == "classifier_head":
            scores = _scores_classifier_head(model, samples, batch_size)
        else:
            scores = _decode_parsed_text(model, samples, batch_size)
    if was_training:
        model.train()
    per_label = []
    skipped = []
    if mode == "classifier_head":
        for j in range(text.N_FINDINGS):
            value = auroc(scores[:, j], truth[:, j])
            per_label.append(value)
            if value is None:
                skipped.append(j)
        defined = [v for v in per_label if v is not None]
        macro_auroc = float(np.mean(defined)) if defined else None
    else:
        per_label = [None] * text.N_FINDINGS
        skipped = [j for j in range(text.N_FINDINGS) if len(set(truth[:, j])) < 2]
        macro_auroc = None
    accuracy, macro_f1 = acc_f1(scores, truth, threshold=threshold)
    return MetricsReport(
        per_label_auroc=tuple(per_label),
        macro_auroc=macro_auroc,
        accuracy=accuracy,
        macro_f1=macro_f1,
        n_samples=len(samples),
        skipped_labels=tuple(skipped),
        mode=mode,
    )


def evaluate_gaze_accuracy(model, samples, k=1, batch_size=32):
    """Corpus-level top-k gaze accuracy over all supervised tokens."""
    pin_single_thread()
    config = model.config
    hits = 0
    total = 0
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            batch = samples[start : start + batch_size]
            token_ids, images, _, layout, sups = collate(batch, config)
            h, _ = model(token_ids, images)
            logits = gaze_logits(h, layout, model.gaze_head)
            for b, sup in enumerate(sups):
                if sup is None:
                    continue
                sample_hits, sample_total = gaze_topk_counts(logits[b].numpy(), sup, k)
                hits += sample_hits
                total += sample_total
    if was_training:
        model.train()
    if total == 0:
        return None
    return hits / total


def render_report(report):
    """Human-readable table."""
    lines = []
    lines.append(f"mode:        {report.mode}")
    lines.append(f"n_samples:   {report.n_samples}")
    lines.append(f"accuracy:    {report.accuracy:.4f}")
    lines.append(f"macro_f1:    {report.macro_f1:.4f}")
    macro = "n/a" if report.macro_auroc is None else f"{report.macro_auroc:.4f}"
    lines.append(f"macro_auroc: {macro}")
    lines.append(f"{'label':<28}{'auroc':>8}")
    for name, value in zip(text.FINDINGS, report.per_label_auroc):
        shown = "n/a" if value is None else f"{value:.4f}"
        lines.append(f"{name:<28}{shown:>8}")
    if report.skipped_labels:
        names = ", ".join(text.FINDINGS[j] for j in report.skipped_labels)
        lines.append(f"skipped (single-class): {names}")
    return "\n".join(lines)


def report_json_line(report):
    return json.dumps(
        {
            "mode": report.mode,
            "n_samples": report.n_samples,
            "accuracy": report.accuracy,
            "macro_f1": report.macro_f1,
            "macro_auroc": report.macro_auroc,
            "per_label_auroc": list(report.per_label_auroc),
            "skipped_labels": list(report.skipped_labels),
        },
        sort_keys=True,
    )
