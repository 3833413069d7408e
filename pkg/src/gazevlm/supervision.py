"""Turn sentence-level gaze into per-token patch-index supervision.

Pipeline: split the session span into four equal-duration temporal bins,
rasterize each bin's pooled fixations into a Gaussian heatmap on a fixed
G x G patch grid, and keep the top-k patch indices per bin. Bin i feeds
gaze-token list i, so the four lists preserve visitation order. Ablation
operators produce the order-destroying variants (random indices with the
same list sizes; lists permuted across token slots).

Heatmaps are plain float64 arrays of length P: all zeros, or normalized
to sum 1.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .ingest import sentence_groups, session_time_span
from .text import validate_labels

N_GAZE_TOKENS = 4


@dataclass(frozen=True)
class PatchGrid:
    """A G x G partition of the unit square, indexed row-major."""

    G: int

    def __post_init__(self):
        if self.G < 1:
            raise ValidationError(f"grid side must be positive, got {self.G}")

    @property
    def P(self):
        return self.G * self.G

    def patch_centers(self):
        """(P, 2) array of (x, y) patch centers in normalized coordinates."""
        step = 1.0 / self.G
        cols, rows = np.meshgrid(np.arange(self.G), np.arange(self.G))
        x = (cols.ravel() + 0.5) * step
        y = (rows.ravel() + 0.5) * step
        return np.stack([x, y], axis=1)

    def patch_id(self, row, col):
        return row * self.G + col


@dataclass(frozen=True)
class GazeSupervision:
    """Four temporally ordered lists of distinct patch indices (may be empty)."""

    token_targets: tuple  # 4 tuples of patch ids

    def __post_init__(self):
        if len(self.token_targets) != N_GAZE_TOKENS:
            raise ValidationError(
                f"expected {N_GAZE_TOKENS} target lists, got {len(self.token_targets)}"
            )
        for i, targets in enumerate(self.token_targets):
            if len(set(targets)) != len(targets):
                raise ValidationError(f"token {i + 1}: duplicate patch ids in {targets}")

    @property
    def k_values(self):
        return tuple(len(t) for t in self.token_targets)

    @classmethod
    def empty(cls):
        return cls(token_targets=((), (), (), ()))


def rasterize_heatmap(samples, grid, sigma_norm, duration_weighted=True):
    """Accumulate fixations into a Gaussian heatmap over the patch grid.

    Each fixation adds w * exp(-||center - (x, y)||^2 / (2 sigma^2)) to
    every patch, where w is the fixation duration in ms (or 1 when
    duration weighting is off). Nonzero results are normalized to sum 1.
    """
    if sigma_norm <= 0:
        raise ValidationError(f"sigma_norm must be positive, got {sigma_norm}")
    values = np.zeros(grid.P, dtype=np.float64)
    if not samples:
        return values
    centers = grid.patch_centers()
    points = np.array([[s.x_norm, s.y_norm] for s in samples], dtype=np.float64)
    if duration_weighted:
        weights = np.array([s.duration_ms for s in samples], dtype=np.float64)
    else:
        weights = np.ones(len(samples), dtype=np.float64)
    sq_dist = ((centers[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    values = (weights[None, :] * np.exp(-sq_dist / (2.0 * sigma_norm**2))).sum(axis=1)
    total = values.sum()
    if total > 0.0:
        values = values / total
    return values


def segment_scanpath(groups, session_span, n_bins=N_GAZE_TOKENS):
    """Split sentence groups into equal-duration temporal bins by t_mid_ms.

    Bins are half-open, so a midpoint exactly on a boundary lands in the
    later bin; midpoints outside the span clamp into the nearest bin.
    """
    t0, t1 = session_span
    if t1 <= t0:
        raise ValidationError(f"empty session span [{t0}, {t1})")
    width = (t1 - t0) / n_bins
    bins = [[] for _ in range(n_bins)]
    for g in groups:
        idx = int((g.t_mid_ms - t0) // width)
        idx = min(n_bins - 1, max(0, idx))
        bins[idx].append(g)
    return [tuple(b) for b in bins]


def topk_patches(heatmap, k):
    """Indices of the k largest heatmap values, descending, ties by id.

    Zero-mass patches are never returned, so an all-zero heatmap yields
    an empty list and empty bins propagate to K_i = 0.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    order = sorted(range(len(heatmap)), key=lambda p: (-heatmap[p], p))
    return [p for p in order if heatmap[p] > 0.0][:k]


def build_supervision(session, grid, sigma_norm, k, duration_weighted=True):
    """Full session -> GazeSupervision pipeline.

    Segments the session into four temporal bins, pools each bin's group
    fixations into one heatmap, and keeps its top-k patches. An empty bin
    produces an empty list (K_i = 0).
    """
    groups = sentence_groups(session)
    bins = segment_scanpath(groups, session_time_span(session))
    token_targets = []
    for bin_groups in bins:
        samples = [fx for g in bin_groups for fx in g.samples]
        heat = rasterize_heatmap(samples, grid, sigma_norm, duration_weighted)
        token_targets.append(tuple(topk_patches(heat, k)))
    return GazeSupervision(token_targets=tuple(token_targets))


def bin_heatmaps(session, grid, sigma_norm, duration_weighted=True):
    """Per-bin heatmaps for the four temporal bins (used by visualization)."""
    groups = sentence_groups(session)
    bins = segment_scanpath(groups, session_time_span(session))
    return [
        rasterize_heatmap([fx for g in b for fx in g.samples], grid, sigma_norm, duration_weighted)
        for b in bins
    ]


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

def ablate_random(supervision, grid, seed):
    """Replace every list with the same number of uniformly drawn patch ids.

    List sizes K_1..K_4 are preserved exactly; ids within one list are
    drawn without replacement from [0, P).
    """
    rng = np.random.default_rng(seed)
    token_targets = []
    for targets in supervision.token_targets:
        k = len(targets)
        if k == 0:
            token_targets.append(())
        else:
            drawn = rng.choice(grid.P, size=k, replace=False)
            token_targets.append(tuple(int(p) for p in drawn))
    return GazeSupervision(token_targets=tuple(token_targets))


def ablate_shuffle(supervision, seed, within_lists=False):
    """Reassign the four lists to token slots by a random permutation.

    When at least two lists are non-empty and not all identical, the
    identity permutation is rejected and redrawn so the output order
    actually changes. List contents are untouched; ``within_lists``
    additionally shuffles ids inside each list (off by default).
    """
    rng = np.random.default_rng(seed)
    lists = supervision.token_targets
    non_empty = [t for t in lists if t]
    must_change = len(non_empty) >= 2 and len(set(non_empty)) > 1
    while True:
        perm = tuple(int(i) for i in rng.permutation(N_GAZE_TOKENS))
        if not (must_change and perm == (0, 1, 2, 3)):
            break
    shuffled = [lists[i] for i in perm]
    if within_lists:
        shuffled = [tuple(int(p) for p in rng.permutation(list(t))) if t else () for t in shuffled]
    return GazeSupervision(token_targets=tuple(shuffled))


# ---------------------------------------------------------------------------
# Supervision file: the contract between preprocessing and training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SupervisionRecord:
    """One supervision-file line: labels plus the four gaze-token lists."""

    sample_id: str
    labels: tuple
    supervision: GazeSupervision
    grid_G: int
    k: int
    sigma_norm: float


def supervision_line(record):
    """Serialize one record as a canonical JSON line (stable key order)."""
    payload = {
        "sample_id": record.sample_id,
        "labels": list(record.labels),
        "gaze_tokens": [list(t) for t in record.supervision.token_targets],
        "grid_G": record.grid_G,
        "k": record.k,
        "sigma_norm": record.sigma_norm,
    }
    return json.dumps(payload, separators=(",", ":"))


def write_supervision_file(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(supervision_line(record) + "\n")


def read_supervision_file(path):
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for raw in f:
            if not raw.strip():
                continue
            rec = json.loads(raw)
            records.append(
                SupervisionRecord(
                    sample_id=str(rec["sample_id"]),
                    labels=validate_labels(rec["labels"]),
                    supervision=GazeSupervision(
                        token_targets=tuple(tuple(int(p) for p in t) for t in rec["gaze_tokens"])
                    ),
                    grid_G=int(rec["grid_G"]),
                    k=int(rec["k"]),
                    sigma_norm=float(rec["sigma_norm"]),
                )
            )
    return records
