"""Two-stage training orchestration with seeded determinism.

Stage 1 minimizes the gaze loss, updating adapters plus the gaze head.
Stage 2 starts from a stage-1 checkpoint and minimizes
(1 - lambda) * lm + lambda * cls, updating adapters, the classifier head
and the LM head; the gaze head and the backbone stay bitwise frozen.

A run is fully determined by (seed, config, dataset): model init, batch
order and ablation draws all derive from the config seed.
"""

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, ValidationError
from .ingest import load_manifest, parse_session
from .losses import (
    LossBundle,
    classify,
    gaze_logits,
    loss_cls,
    loss_combined,
    loss_gaze_batch,
    loss_lm,
)
from .model import (
    STAGE1,
    STAGE2,
    ModelConfig,
    apply_adapters,
    build_model,
    build_sequence,
    load_model,
    make_sample,
    save_checkpoint,
)
from .supervision import PatchGrid, ablate_random, ablate_shuffle, read_supervision_file

VARIANTS = ("original", "random", "shuffled", "none")

STAGE_DEFAULT_LR = {STAGE1: 1e-3, STAGE2: 3e-4}


def pin_single_thread():
    """Run torch single-threaded: faster at these sizes and keeps results
    reproducible regardless of the host's core count."""
    torch.set_num_threads(1)


@dataclass(frozen=True)
class TrainConfig:
    stage: int
    steps: int
    seed: int
    supervision_variant: str = "original"
    lam: float = 0.7
    lr: float = None  # stage default when unset
    batch_size: int = 8
    checkpoint_every: int = 0
    corpus_dir: str = None
    supervision_file: str = None
    init_from: str = None
    # model dimensions
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    G: int = 8
    patch_pixels: int = 8
    adapter_rank: int = 8
    max_T: int = 128
    cls_readout: str = "answer_marker"

    def __post_init__(self):
        if self.stage not in (STAGE1, STAGE2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.supervision_variant not in VARIANTS:
            raise ConfigError(f"unknown supervision_variant {self.supervision_variant!r}")
        if self.stage == STAGE1 and self.supervision_variant == "none":
            raise ConfigError("supervision_variant 'none' is forbidden in stage 1")
        if self.lr is None:
            object.__setattr__(self, "lr", STAGE_DEFAULT_LR[self.stage])

    def model_config(self):
        return ModelConfig(
            d=self.d,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            G=self.G,
            patch_pixels=self.patch_pixels,
            adapter_rank=self.adapter_rank,
            max_T=self.max_T,
            cls_readout=self.cls_readout,
        )


_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def parse_train_config(path, **overrides):
    """Read a flat key-value config file (``key = value`` lines, # comments)."""
    values = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in _CONFIG_FIELDS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _coerce(key, value)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def _coerce(key, value):
    if value.lower() in ("none", ""):
        return None
    ftype = _CONFIG_FIELDS[key].type
    if ftype == "int" or ftype is int:
        return int(value)
    if ftype == "float" or ftype is float:
        return float(value)
    return value


def write_train_config(path, config):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for field in dataclasses.fields(TrainConfig):
            value = getattr(config, field.name)
            f.write(f"{field.name} = {'none' if value is None else value}\n")


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------

def _sample_entropy(sample_id):
    return int.from_bytes(hashlib.sha256(sample_id.encode("utf-8")).digest()[:8], "big")


def apply_variant(record, variant, seed):
    """Per-sample supervision variant with a deterministic derived seed."""
    if variant == "original":
        return record.supervision
    if variant == "none":
        return None
    derived = np.random.SeedSequence([seed, _sample_entropy(record.sample_id)])
    if variant == "random":
        return ablate_random(record.supervision, PatchGrid(record.grid_G), derived)
    if variant == "shuffled":
        return ablate_shuffle(record.supervision, derived)
    raise ConfigError(f"unknown supervision_variant {variant!r}")


def build_dataset(corpus_dir, supervision_file=None, split="train", variant="original", seed=0):
    """Materialize model-ready Samples for one corpus split.

    With a supervision file, gaze targets come from it (after the variant
    transform) and its labels are cross-checked against the session's
    labels.csv; without one, samples carry no supervision (evaluation).
    """
    by_id = {}
    if supervision_file is not None:
        for record in read_supervision_file(supervision_file):
            by_id[record.sample_id] = record
    samples = []
    for sample_id, sample_split in load_manifest(os.path.join(corpus_dir, "manifest.jsonl")):
        if split is not None and sample_split != split:
            continue
        session = parse_session(os.path.join(corpus_dir, sample_id))
        supervision = None
        if supervision_file is not None:
            record = by_id.get(sample_id)
            if record is None:
                raise ValidationError(f"{sample_id}: missing from supervision file")
            if record.labels != session.labels:
                raise ValidationError(f"{sample_id}: supervision labels disagree with labels.csv")
            supervision = apply_variant(record, variant, seed)
        samples.append(make_sample(sample_id, session.image, session.labels, supervision))
    if not samples:
        raise ValidationError(f"no samples in split {split!r} of {corpus_dir}")
    return samples


def collate(samples, config):
    """Stack samples into batch tensors; the fixed format keeps one layout."""
    ids0, layout = build_sequence(samples[0], config)
    all_ids = [ids0]
    for s in samples[1:]:
        ids, lay = build_sequence(s, config)
        if lay != layout:
            raise ValidationError("samples in one batch must share the sequence layout")
        all_ids.append(ids)
    token_ids = torch.tensor(all_ids, dtype=torch.long)
    images = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))
    y = torch.tensor([s.y for s in samples], dtype=torch.float32)
    return token_ids, images, y, layout, [s.supervision for s in samples]


def _batch_indices(n, batch_size, steps, rng):
    """Seeded fixed-shuffle batch order, reshuffled each epoch."""
    order = []
    while len(order) < steps * batch_size:
        order.extend(int(i) for i in rng.permutation(n))
    for step in range(steps):
        yield order[step * batch_size : (step + 1) * batch_size]


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

def _metrics_writer(out_dir):
    if out_dir is None:
        return None
    os.makedirs(out_dir, exist_ok=True)
    return open(os.path.join(out_dir, "metrics.jsonl"), "w", encoding="utf-8", newline="\n")


def _log(writer, history, step, stage, bundle):
    history.append(bundle)
    if writer is not None:
        writer.write(
            json.dumps(
                {
                    "step": step,
                    "stage": stage,
                    "l_gaze": bundle.l_gaze,
                    "l_lm": bundle.l_lm,
                    "l_cls": bundle.l_cls,
                    "l_combined": bundle.l_combined,
                },
                sort_keys=True,
            )
            + "\n"
        )


def _checkpoint_path(out_dir, step=None):
    name = "checkpoint.ckpt" if step is None else f"checkpoint_step{step:06d}.ckpt"
    return os.path.join(out_dir, name)


def train_stage1(samples, config, out_dir=None):
    """Stage 1: minimize the gaze loss over adapters + gaze head.

    Samples with all-empty supervision still pass through (contributing
    zero loss); samples with *no* supervision are a configuration error.
    Returns (model, history of LossBundle).
    """
    pin_single_thread()
    if config.stage != STAGE1:
        raise ConfigError(f"train_stage1 called with stage={config.stage}")
    if any(s.supervision is None for s in samples):
        raise ConfigError("stage 1 requires gaze supervision on every sample")
    model_config = config.model_config()
    model = build_model(model_config, config.seed)
    view = apply_adapters(model, STAGE1)
    optimizer = torch.optim.Adam(view.values(), lr=config.lr)
    rng = np.random.default_rng([config.seed, 1])
    writer = _metrics_writer(out_dir)
    history = []
    try:
        for step, idx in enumerate(_batch_indices(len(samples), config.batch_size, config.steps, rng)):
            batch = [samples[i] for i in idx]
            token_ids, images, _, layout, sups = collate(batch, model_config)
            h, _ = model(token_ids, images)
            logits = gaze_logits(h, layout, model.gaze_head)
            loss = loss_gaze_batch(logits, sups)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            _log(writer, history, step, STAGE1, LossBundle(l_gaze=float(loss.detach())))
            if out_dir and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                save_checkpoint(
                    _checkpoint_path(out_dir, step + 1), model, STAGE1, config.seed,
                    config.supervision_variant, step + 1,
                )
    finally:
        if writer is not None:
            writer.close()
    if out_dir:
        save_checkpoint(
            _checkpoint_path(out_dir), model, STAGE1, config.seed,
            config.supervision_variant, config.steps,
        )
    return model, history


def train_stage2(samples, config, init_from, out_dir=None):
    """Stage 2: minimize the combined loss starting from a stage-1 checkpoint.

    Trains adapters + classifier head + LM head; the gaze head is frozen.
    The checkpoint's supervision variant must match the config's (stage
    order and variant bookkeeping are both mandatory).
    """
    pin_single_thread()
    if config.stage != STAGE2:
        raise ConfigError(f"train_stage2 called with stage={config.stage}")
    if init_from is None or not os.path.exists(init_from):
        raise ConfigError(f"stage 2 requires a stage-1 checkpoint, got {init_from!r}")
    model, manifest = load_model(init_from)
    if manifest.get("stage") != STAGE1:
        raise ConfigError(
            f"{init_from}: expected a stage-1 checkpoint, found stage={manifest.get('stage')}"
        )
    ckpt_variant = manifest.get("supervision_variant")
    if config.supervision_variant not in ("none", ckpt_variant):
        raise ConfigError(
            f"checkpoint was trained with variant {ckpt_variant!r}, "
            f"config asks for {config.supervision_variant!r}"
        )
    variant = ckpt_variant
    model_config = model.config
    # The readout position is part of the model identity (baked into the
    # stage-1 checkpoint's config) so training and evaluation agree.
    readout = model_config.cls_readout
    view = apply_adapters(model, STAGE2)
    optimizer = torch.optim.Adam(view.values(), lr=config.lr)
    rng = np.random.default_rng([config.seed, 2])
    writer = _metrics_writer(out_dir)
    history = []
    try:
        for step, idx in enumerate(_batch_indices(len(samples), config.batch_size, config.steps, rng)):
            batch = [samples[i] for i in idx]
            token_ids, images, y, layout, _ = collate(batch, model_config)
            h, lm = model(token_ids, images)
            l_lm = loss_lm(lm, token_ids, layout)
            y_hat = classify(h[:, layout.readout_index(readout), :], model.cls_head)
            l_cls = loss_cls(y_hat, y)
            loss = loss_combined(l_lm, l_cls, config.lam)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            _log(
                writer, history, step, STAGE2,
                LossBundle(
                    l_lm=float(l_lm.detach()),
                    l_cls=float(l_cls.detach()),
                    l_combined=float(loss.detach()),
                    lam=config.lam,
                ),
            )
            if out_dir and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                save_checkpoint(
                    _checkpoint_path(out_dir, step + 1), model, STAGE2, config.seed,
                    variant, step + 1, extra={"lam": config.lam},
                )
    finally:
        if writer is not None:
            writer.close()
    if out_dir:
        save_checkpoint(
            _checkpoint_path(out_dir), model, STAGE2, config.seed,
            variant, config.steps, extra={"lam": config.lam},
        )
    return model, history


# ---------------------------------------------------------------------------
# Gradient checking (central finite differences)
# ---------------------------------------------------------------------------

def _loss_for_selector(model, sample, selector, lam):
    model_config = model.config
    ids, layout = build_sequence(sample, model_config)
    token_ids = torch.tensor([ids], dtype=torch.long)
    images = torch.from_numpy(np.asarray(sample.image)[None].astype(np.float64))
    y = torch.tensor([sample.y], dtype=torch.float64)
    h, lm = model(token_ids, images)
    if selector == "gaze":
        return loss_gaze_batch(gaze_logits(h, layout, model.gaze_head), [sample.supervision])
    l_lm = loss_lm(lm, token_ids, layout)
    if selector == "lm":
        return l_lm
    y_hat = classify(h[:, layout.readout_index(model_config.cls_readout), :], model.cls_head)
    l_cls = loss_cls(y_hat, y)
    if selector == "cls":
        return l_cls
    if selector == "combined":
        return loss_combined(l_lm, l_cls, lam)
    raise ConfigError(f"unknown loss selector {selector!r}")


_SELECTOR_STAGE = {"gaze": STAGE1, "lm": STAGE2, "cls": STAGE2, "combined": STAGE2}


def grad_check(model, sample, loss_selector, lam=0.7):
    """Worst relative error between analytic and central-difference gradients.

    Checks every parameter in the selector's stage view, in float64, with
    step 1e-5 scaled by parameter magnitude. Only tractable at toy
    dimensions (d <= 16, T <= 64), which is enforced.
    """
    pin_single_thread()
    config = model.config
    if config.d > 16:
        raise ConfigError(f"grad_check needs d <= 16, got {config.d}")
    _, layout = build_sequence(sample, config)
    if layout.last_index + 1 > 64:
        raise ConfigError(f"grad_check needs T <= 64, got {layout.last_index + 1}")
    model = copy.deepcopy(model).double()
    view = apply_adapters(model, _SELECTOR_STAGE[loss_selector])
    params = list(view.values())
    loss = _loss_for_selector(model, sample, loss_selector, lam)
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    analytic = [
        torch.zeros_like(p) if g is None else g for p, g in zip(params, analytic)
    ]
    worst = 0.0
    with torch.no_grad():
        for param, grad in zip(params, analytic):
            flat = param.view(-1)
            grad_flat = grad.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                h = 1e-5 * max(1.0, abs(orig))
                flat[i] = orig + h
                f_plus = _loss_for_selector(model, sample, loss_selector, lam).item()
                flat[i] = orig - h
                f_minus = _loss_for_selector(model, sample, loss_selector, lam).item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                a = grad_flat[i].item()
                # Denominator floored at 1e-4 (mixed rtol/atol criterion):
                # below that, central differences of an O(1) loss cannot
                # resolve the slope anyway, so only absolute disagreement
                # beyond ~1e-8 counts.
                err = abs(a - numeric) / max(1e-4, abs(a), abs(numeric))
                worst = max(worst, err)
    return worst
