import numpy as np
import pytest

from gazevlm.model import ModelConfig, build_model, make_sample
from gazevlm.supervision import GazeSupervision


def write_fixations(path, rows, header="t_start_ms,t_end_ms,x_norm,y_norm"):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(header + "\n")
        for row in rows:
            f.write(",".join(str(v) for v in row) + "\n")


def write_transcript(path, records):
    import json

    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


@pytest.fixture
def tiny_config():
    """Toy dimensions: small enough for finite-difference checks (T = 54)."""
    return ModelConfig(d=8, n_layers=1, n_heads=2, G=4, patch_pixels=4,
                       adapter_rank=2, max_T=64)


@pytest.fixture
def tiny_model(tiny_config):
    return build_model(tiny_config, seed=0)


def tiny_sample(config, labels=None, supervision=None, seed=0, sample_id="s0"):
    rng = np.random.default_rng(seed)
    side = config.G * config.patch_pixels
    image = rng.random((side, side)).astype(np.float32)
    if labels is None:
        labels = [int(v) for v in rng.integers(0, 2, size=14)]
    if supervision is None:
        supervision = GazeSupervision(token_targets=((0,), (5,), (10,), (15,)))
    return make_sample(sample_id, image, labels, supervision)
