"""Synthetic session generation with controllable structure.

Three scenarios:

- ``separable``: 14 fixed image regions, one per finding; label j is 1
  iff a bright blob sits in region j. The scanpath visits the present
  blobs group by group across the four session quartiles, so gaze
  supervision is predictable from the image.
- ``order_sensitive``: two salient blobs, one in the left and one in the
  right half, visited one after the other; label 0 is 1 iff the left
  blob is visited first. The first-visited blob is rendered brighter, so
  the image alone carries the signal; ordered gaze supervision teaches
  where to look and in what order. Labels 1-13 stay 0.
- ``dropout_heavy``: the separable task with aggressive word-level gaze
  dropout, for exercising empty-bin masking paths.

Corpora are fully reproducible from (scenario, seed): per-session RNG
streams derive from the corpus seed and the session index, and all files
are written with canonical formatting.
"""

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .pgm import write_pgm
from .text import N_FINDINGS

SCENARIO_NAMES = ("separable", "order_sensitive", "dropout_heavy")

# Label groups visited during quartiles 1..4 of a separable session.
LABEL_GROUPS = ((0, 1, 2, 3), (4, 5, 6), (7, 8, 9), (10, 11, 12, 13))


@dataclass(frozen=True)
class Scenario:
    name: str
    n_samples: int = 400
    seed: int = 0
    G: int = 8
    patch_pixels: int = 8
    session_ms: int = 4000
    words_per_sentence: int = 8
    noise: float = 0.05
    jitter_norm: float = 0.012
    blob_sigma_frac: float = 0.45  # blob stddev as a fraction of the patch side
    dropout_rate: float = 0.0
    # order_sensitive knobs: the first-visited blob's peak amplitude, the
    # second blob's amplitude as a fraction of the first (a per-sample
    # difficulty mixture), and dimmer distractor blobs.
    amp_first: tuple = (0.90, 1.00)
    amp_second_frac: tuple = (0.62, 0.90)
    n_distractors: int = 4
    distractor_amp: tuple = (0.25, 0.45)

    def __post_init__(self):
        if self.name not in SCENARIO_NAMES:
            raise ConfigError(f"unknown scenario {self.name!r}")
        if self.G < 6:
            raise ConfigError(f"scenarios need G >= 6, got {self.G}")
        if self.n_samples < 1:
            raise ConfigError(f"n_samples must be >= 1, got {self.n_samples}")


def make_scenario(name, n_samples=400, seed=0, G=8, **overrides):
    defaults = {"separable": 0.0, "order_sensitive": 0.1, "dropout_heavy": 0.45}
    overrides.setdefault("dropout_rate", defaults[name])
    return Scenario(name=name, n_samples=n_samples, seed=seed, G=G, **overrides)


def region_patches(G):
    """14 well-separated (row, col) region anchors for the separable task."""
    coords = np.unique(np.round(np.linspace(1, G - 2, 4)).astype(int))
    cells = [(int(r), int(c)) for r in coords for c in coords]
    if len(cells) < N_FINDINGS:
        raise ConfigError(f"grid G={G} too small for 14 regions")
    return tuple(cells[:N_FINDINGS])


@dataclass(frozen=True)
class SessionFiles:
    """In-memory contents of one session directory."""

    sample_id: str
    image: object  # (H, W) uint8
    fixation_rows: tuple  # (t_start, t_end, x, y)
    transcript_records: tuple  # dicts
    labels: tuple
    visit_patches: tuple  # per-quartile tuple of visited (row, col) anchors


def _patch_center(row, col, G):
    return ((col + 0.5) / G, (row + 0.5) / G)


def _render_image(blobs, scenario, rng):
    """Accumulate Gaussian blobs, add pixel noise, quantize to uint8."""
    side = scenario.G * scenario.patch_pixels
    yy, xx = np.mgrid[0:side, 0:side]
    img = np.zeros((side, side), dtype=np.float64)
    sigma = scenario.blob_sigma_frac * scenario.patch_pixels
    for (row, col), amp in blobs:
        cx = (col + 0.5) * scenario.patch_pixels
        cy = (row + 0.5) * scenario.patch_pixels
        img += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * sigma**2))
    img += rng.normal(0.0, scenario.noise, size=img.shape)
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def _make_words_and_fixations(visits_per_quartile, scenario, rng):
    """Word-driven scanpath: each word dwells on one blob of its quartile.

    Words tile each quartile; word i of a quartile with m visits dwells
    on visit floor(i * m / n_words), in order, so the scanpath walks the
    visit list left to right. Dropped-out words get no fixation.
    """
    quartile_ms = scenario.session_ms // 4
    word_ms = quartile_ms // scenario.words_per_sentence
    transcript = []
    fixations = []
    for q, visits in enumerate(visits_per_quartile):
        q_start = q * quartile_ms
        for i in range(scenario.words_per_sentence):
            w_start = q_start + i * word_ms
            w_end = w_start + word_ms
            transcript.append(
                {
                    "sentence_id": q,
                    "word": f"w{q}{i}",
                    "t_start_ms": int(w_start),
                    "t_end_ms": int(w_end),
                }
            )
            if not visits:
                continue
            if rng.random() < scenario.dropout_rate:
                continue
            target = visits[min(i * len(visits) // scenario.words_per_sentence, len(visits) - 1)]
            cx, cy = _patch_center(target[0], target[1], scenario.G)
            x = float(np.clip(cx + rng.normal(0.0, scenario.jitter_norm), 0.0, 1.0))
            y = float(np.clip(cy + rng.normal(0.0, scenario.jitter_norm), 0.0, 1.0))
            pad = max(1, word_ms // 8)
            fixations.append((int(w_start + pad), int(w_end - pad), x, y))
    return tuple(transcript), tuple(fixations)


def _separable_session(sample_id, scenario, rng):
    regions = region_patches(scenario.G)
    labels = tuple(int(v) for v in (rng.random(N_FINDINGS) < 0.5))
    blobs = [
        (regions[j], float(rng.uniform(0.8, 1.0))) for j in range(N_FINDINGS) if labels[j]
    ]
    image = _render_image(blobs, scenario, rng)
    visits_per_quartile = tuple(
        tuple(regions[j] for j in group if labels[j]) for group in LABEL_GROUPS
    )
    transcript, fixations = _make_words_and_fixations(visits_per_quartile, scenario, rng)
    return SessionFiles(sample_id, image, fixations, transcript, labels, visits_per_quartile)


def _order_sensitive_session(sample_id, scenario, rng):
    G = scenario.G
    half = G // 2
    row_a, row_b = rng.integers(1, G - 1, size=2)
    patch_a = (int(row_a), int(rng.integers(1, half - 1)))  # left half
    patch_b = (int(row_b), int(rng.integers(half + 1, G - 1)))  # right half
    a_first = bool(rng.random() < 0.5)
    first, second = (patch_a, patch_b) if a_first else (patch_b, patch_a)
    labels = tuple([1 if a_first else 0] + [0] * (N_FINDINGS - 1))
    amp_first = float(rng.uniform(*scenario.amp_first))
    amp_second = amp_first * float(rng.uniform(*scenario.amp_second_frac))
    blobs = [(first, amp_first), (second, amp_second)]
    taken = {patch_a, patch_b}
    cells = [(r, c) for r in range(1, G - 1) for c in range(1, G - 1)]
    for _ in range(scenario.n_distractors):
        feasible = [
            cell for cell in cells
            if all(max(abs(cell[0] - r), abs(cell[1] - c)) >= 2 for r, c in taken)
        ]
        if not feasible:  # grid too crowded; fewer distractors is fine
            break
        cand = feasible[int(rng.integers(len(feasible)))]
        taken.add(cand)
        blobs.append((cand, float(rng.uniform(*scenario.distractor_amp))))
    image = _render_image(blobs, scenario, rng)
    visits_per_quartile = ((first,), (first,), (second,), (second,))
    transcript, fixations = _make_words_and_fixations(visits_per_quartile, scenario, rng)
    return SessionFiles(sample_id, image, fixations, transcript, labels, visits_per_quartile)


def generate_session(scenario, rng, sample_id="session_00000"):
    """Generate one session's files from a dedicated RNG stream."""
    if scenario.name in ("separable", "dropout_heavy"):
        return _separable_session(sample_id, scenario, rng)
    return _order_sensitive_session(sample_id, scenario, rng)


def write_session(session_dir, files):
    os.makedirs(session_dir, exist_ok=True)
    with open(os.path.join(session_dir, "fixations.csv"), "w", encoding="utf-8", newline="\n") as f:
        f.write("t_start_ms,t_end_ms,x_norm,y_norm\n")
        for t0, t1, x, y in files.fixation_rows:
            f.write(f"{t0},{t1},{x:.6f},{y:.6f}\n")
    with open(os.path.join(session_dir, "transcript.jsonl"), "w", encoding="utf-8", newline="\n") as f:
        for rec in files.transcript_records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    write_pgm(os.path.join(session_dir, "image.pgm"), files.image)
    with open(os.path.join(session_dir, "labels.csv"), "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(str(v) for v in files.labels) + "\n")


def split_assignment(sample_ids):
    """Deterministic 80/10/10 split: rank ids by hash, then cut exactly."""
    n = len(sample_ids)
    ranked = sorted(sample_ids, key=lambda s: hashlib.sha256(s.encode("utf-8")).hexdigest())
    n_train = int(n * 0.8)
    n_val = int(n * 0.1)
    split = {}
    for i, sid in enumerate(ranked):
        if i < n_train:
            split[sid] = "train"
        elif i < n_train + n_val:
            split[sid] = "val"
        else:
            split[sid] = "test"
    return split


def generate_corpus(scenario, out_dir):
    """Write scenario.n_samples sessions plus a manifest; returns the entries.

    Byte-identical across reruns with the same (scenario, seed).
    """
    os.makedirs(out_dir, exist_ok=True)
    sample_ids = [f"session_{i:05d}" for i in range(scenario.n_samples)]
    split = split_assignment(sample_ids)
    entries = []
    for i, sample_id in enumerate(sample_ids):
        rng = np.random.default_rng([scenario.seed, i])
        files = generate_session(scenario, rng, sample_id)
        write_session(os.path.join(out_dir, sample_id), files)
        entries.append((sample_id, split[sample_id]))
    with open(os.path.join(out_dir, "manifest.jsonl"), "w", encoding="utf-8", newline="\n") as f:
        for sample_id, sample_split in entries:
            f.write(json.dumps({"sample_id": sample_id, "split": sample_split}) + "\n")
    return entries
