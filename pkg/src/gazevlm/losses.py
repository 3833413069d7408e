"""Gaze head, classifier head, and the training losses.

- loss_gaze: per gaze token, cross-entropy over patch ids averaged over
  that token's target list, summed over the four tokens; tokens with an
  empty list are masked out entirely (zero loss, zero gradient) and the
  inner average keeps the magnitude independent of list size.
- loss_cls: label-averaged binary cross-entropy on the 14 findings, with
  probabilities clamped to [eps, 1-eps].
- loss_lm: teacher-forced cross-entropy over the positions that predict
  answer-span tokens (placeholders included; prompt and image excluded).
- loss_combined: (1-lambda) * lm + lambda * cls, exact at both endpoints.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError

BCE_EPS = 1e-7


@dataclass(frozen=True)
class LossBundle:
    """Per-step loss scalars as logged to the metrics file."""

    l_gaze: float = None
    l_lm: float = None
    l_cls: float = None
    l_combined: float = None
    lam: float = None


def gaze_logits(h, layout, head):
    """Patch logits at the four gaze-token positions.

    h: (T, d) or (B, T, d) final hidden states. Returns (4, P) or (B, 4, P).
    """
    positions = list(layout.gaze_positions)
    if h.dim() == 2:
        return head(h[positions, :])
    return head(h[:, positions, :])


def loss_gaze(logits, supervision):
    """Masked per-token cross-entropy over patch ids for one sample.

    logits: (4, P); supervision: a GazeSupervision or any 4-sequence of
    target-id lists. Tokens with K_i = 0 contribute exactly zero loss and
    zero gradient; the inner average makes duplicated target lists leave
    the value unchanged.
    """
    token_targets = getattr(supervision, "token_targets", supervision)
    P = logits.shape[-1]
    total = logits.sum() * 0.0  # graph-attached zero so empty samples backprop cleanly
    for i, targets in enumerate(token_targets):
        if not targets:
            continue
        idx = list(targets)
        if max(idx) >= P or min(idx) < 0:
            raise IndexError(f"gaze token {i + 1}: target id out of range [0, {P})")
        log_probs = F.log_softmax(logits[i], dim=-1)
        total = total - log_probs[idx].mean()
    return total


def loss_gaze_batch(logits, supervisions):
    """Mean of loss_gaze over a batch. logits: (B, 4, P)."""
    total = logits.sum() * 0.0
    for b, sup in enumerate(supervisions):
        total = total + loss_gaze(logits[b], sup)
    return total / len(supervisions)


def classify(h_last, head):
    """Finding probabilities: elementwise sigmoid of the affine map."""
    return torch.sigmoid(head(h_last))


def loss_cls(y_hat, y):
    """Label-averaged binary cross-entropy with probability clamping."""
    y_hat = y_hat.clamp(BCE_EPS, 1.0 - BCE_EPS)
    y = y.to(y_hat.dtype)
    return -(y * torch.log(y_hat) + (1.0 - y) * torch.log(1.0 - y_hat)).mean()


def loss_lm(lm_logits, token_ids, layout):
    """Teacher-forced LM loss over the answer span.

    Positions a-1 .. T-2 predict the answer tokens at a .. T-1 (a = start
    of the answer span). Prompt and visual positions are never targets.
    """
    a, end = layout.answer_span
    if lm_logits.dim() == 2:
        lm_logits = lm_logits.unsqueeze(0)
        token_ids = token_ids.unsqueeze(0)
    pred = lm_logits[:, a - 1 : end - 1, :]
    target = token_ids[:, a:end]
    return F.cross_entropy(pred.reshape(-1, pred.shape[-1]), target.reshape(-1))


def loss_combined(l_lm, l_cls, lam):
    """Exact affine combination (1 - lambda) * l_lm + lambda * l_cls."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    return (1.0 - lam) * l_lm + lam * l_cls
