"""Temporally ordered gaze-heatmap overlays (one image per temporal bin)."""

import os

import numpy as np
from PIL import Image

from .errors import ConfigError
from .ingest import parse_session
from .supervision import PatchGrid, bin_heatmaps

OVERLAY_STRENGTH = 0.7
STRIP_GAP_PX = 2


def heat_overlay(base, heat, G):
    """Blend a patch heatmap into a grayscale image as a red layer.

    base: (H, W) uint8; heat: (P,) nonnegative, all-zero or sum 1.
    Heat is max-normalized per image, upsampled nearest to pixel size.
    """
    h, w = base.shape
    if h % G or w % G:
        raise ConfigError(f"image {h}x{w} not divisible by grid G={G}")
    cells = np.asarray(heat, dtype=np.float64).reshape(G, G)
    peak = cells.max()
    if peak > 0:
        cells = cells / peak
    scale = (h // G, w // G)
    alpha = np.kron(cells, np.ones(scale)) * OVERLAY_STRENGTH
    gray = base.astype(np.float64)
    r = gray * (1.0 - alpha) + 255.0 * alpha
    gb = gray * (1.0 - alpha)
    rgb = np.stack([r, gb, gb], axis=-1)
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


def visualize_session(session_dir, out_dir, grid_G=16, sigma_norm=None, duration_weighted=True):
    """Write step_1.png .. step_4.png plus composite.png for one session.

    Bins with no gaze produce the plain base image (zero-intensity heat).
    Output pixels are deterministic for fixed inputs.
    """
    if sigma_norm is None:
        sigma_norm = 1.0 / grid_G
    session = parse_session(session_dir)
    grid = PatchGrid(grid_G)
    heats = bin_heatmaps(session, grid, sigma_norm, duration_weighted)
    os.makedirs(out_dir, exist_ok=True)
    panels = []
    paths = []
    for step, heat in enumerate(heats, start=1):
        overlay = heat_overlay(session.image, heat, grid_G)
        panels.append(overlay)
        path = os.path.join(out_dir, f"step_{step}.png")
        Image.fromarray(overlay, mode="RGB").save(path)
        paths.append(path)
    h = panels[0].shape[0]
    gap = np.zeros((h, STRIP_GAP_PX, 3), dtype=np.uint8)
    strip_parts = []
    for i, panel in enumerate(panels):
        if i:
            strip_parts.append(gap)
        strip_parts.append(panel)
    strip = np.concatenate(strip_parts, axis=1)
    strip_path = os.path.join(out_dir, "composite.png")
    Image.fromarray(strip, mode="RGB").save(strip_path)
    return paths + [strip_path]
