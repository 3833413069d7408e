import numpy as np
import pytest
import torch

from gazevlm import text
from gazevlm.errors import ConfigError, TruncationError, ValidationError
from gazevlm.model import (
    ModelConfig,
    Sample,
    apply_adapters,
    build_model,
    build_sequence,
    load_model,
    make_sample,
    read_checkpoint,
    save_checkpoint,
    state_bytes,
)

from conftest import tiny_sample


def tensors_for(sample, config):
    ids, layout = build_sequence(sample, config)
    token_ids = torch.tensor([ids], dtype=torch.long)
    images = torch.from_numpy(np.asarray(sample.image)[None].astype(np.float32))
    return token_ids, images, layout


# ---------------------------------------------------------------------------
# ModelConfig
# ---------------------------------------------------------------------------

def test_config_head_divisibility():
    with pytest.raises(ConfigError):
        ModelConfig(d=10, n_heads=4)


def test_config_visual_token_cap():
    with pytest.raises(ConfigError):
        ModelConfig(G=8, max_visual_tokens=32)  # below G^2
    with pytest.raises(ConfigError):
        ModelConfig(G=8, max_visual_tokens=256, max_T=128)  # above max_T
    cfg = ModelConfig(G=8, max_T=128)
    assert cfg.max_visual_tokens == 64
    assert cfg.P <= cfg.max_visual_tokens


def test_config_round_trip():
    cfg = ModelConfig(d=32, n_layers=1, n_heads=2, G=4, patch_pixels=4, max_T=80)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------------------
# embed_image
# ---------------------------------------------------------------------------

def test_embed_image_token_count(tiny_model, tiny_config):
    images = torch.rand(2, 16, 16)
    out = tiny_model.embed_image(images)
    assert out.shape == (2, tiny_config.P, tiny_config.d)


def test_embed_image_locality(tiny_model, tiny_config):
    s = tiny_config.patch_pixels
    a = torch.rand(1, 16, 16)
    b = a.clone()
    b[0, :s, :s] += 0.5  # patch 0 only
    ea, eb = tiny_model.embed_image(a), tiny_model.embed_image(b)
    diff = (ea - eb).abs().sum(dim=-1)[0]
    assert diff[0] > 0
    assert torch.all(diff[1:] == 0)


def test_embed_image_zero_affine_gives_positions(tiny_model):
    with torch.no_grad():
        tiny_model.patch_proj.weight.zero_()
        tiny_model.patch_proj.bias.zero_()
    out = tiny_model.embed_image(torch.zeros(1, 16, 16))
    assert torch.equal(out[0], tiny_model.vis_pos)


def test_embed_image_dimension_mismatch(tiny_model):
    with pytest.raises(ConfigError):
        tiny_model.embed_image(torch.rand(1, 15, 16))


def test_embed_image_row_major_patch_order(tiny_model, tiny_config):
    """Brightening patch (row=1, col=2) moves token row*G + col only."""
    s, G = tiny_config.patch_pixels, tiny_config.G
    a = torch.zeros(1, 16, 16)
    b = a.clone()
    b[0, 1 * s : 2 * s, 2 * s : 3 * s] = 1.0
    diff = (tiny_model.embed_image(a) - tiny_model.embed_image(b)).abs().sum(dim=-1)[0]
    assert int(diff.argmax()) == 1 * G + 2
    assert int((diff > 0).sum()) == 1


# ---------------------------------------------------------------------------
# build_sequence
# ---------------------------------------------------------------------------

def test_sequence_placeholders_contiguous(tiny_config):
    sample = tiny_sample(tiny_config)
    _, layout = build_sequence(sample, tiny_config)
    p1, p2, p3, p4 = layout.gaze_positions
    assert (p2, p3, p4) == (p1 + 1, p1 + 2, p1 + 3)
    assert layout.answer_span[0] == p1
    assert layout.answer_marker_index == p4 + 1


def test_sequence_spans_partition(tiny_config):
    sample = tiny_sample(tiny_config)
    ids, layout = build_sequence(sample, tiny_config)
    assert layout.visual_span == (0, tiny_config.P)
    assert layout.prompt_span[0] == layout.visual_span[1]
    assert layout.answer_span[0] == layout.prompt_span[1]
    assert layout.answer_span[1] == len(ids) == layout.last_index + 1


def test_sequence_empty_prompt(tiny_config):
    sample = tiny_sample(tiny_config)
    sample = Sample(
        sample_id=sample.sample_id, image=sample.image, prompt_tokens=(),
        answer_tokens=sample.answer_tokens, y=sample.y, supervision=sample.supervision,
    )
    _, layout = build_sequence(sample, tiny_config)
    assert layout.gaze_positions[0] == tiny_config.P


def test_sequence_answer_len_constant(tiny_config):
    lens = set()
    for labels in ([0] * 14, [1] * 14, [1, 0] * 7):
        sample = tiny_sample(tiny_config, labels=labels)
        ids, layout = build_sequence(sample, tiny_config)
        lens.add(layout.answer_span[1] - layout.answer_span[0])
    assert lens == {text.ANSWER_LEN}


def test_sequence_overflow_raises():
    config = ModelConfig(d=8, n_layers=1, n_heads=2, G=4, patch_pixels=4, max_T=32,
                         adapter_rank=2, max_visual_tokens=16)
    sample = tiny_sample(config)
    with pytest.raises(TruncationError):
        build_sequence(sample, config)


def test_sample_rejects_bad_answer(tiny_config):
    sample = tiny_sample(tiny_config)
    with pytest.raises(ValidationError):
        Sample(
            sample_id="x", image=sample.image, prompt_tokens=(),
            answer_tokens=sample.answer_tokens[1:], y=sample.y,
        )


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def test_forward_shapes(tiny_model, tiny_config):
    sample = tiny_sample(tiny_config)
    token_ids, images, layout = tensors_for(sample, tiny_config)
    h, logits = tiny_model(token_ids, images)
    T = layout.last_index + 1
    assert h.shape == (1, T, tiny_config.d)
    assert logits.shape == (1, T, tiny_config.vocab_size)


def test_forward_causality(tiny_model, tiny_config):
    """Perturbing the last token leaves rows 0..T-2 unchanged."""
    sample = tiny_sample(tiny_config)
    token_ids, images, _ = tensors_for(sample, tiny_config)
    h1, _ = tiny_model(token_ids, images)
    mutated = token_ids.clone()
    mutated[0, -1] = text.YES_ID if mutated[0, -1] != text.YES_ID else text.NO_ID
    h2, _ = tiny_model(mutated, images)
    assert torch.equal(h1[0, :-1], h2[0, :-1])
    assert not torch.equal(h1[0, -1], h2[0, -1])


def test_forward_causality_midsequence(tiny_model, tiny_config):
    sample = tiny_sample(tiny_config)
    token_ids, images, layout = tensors_for(sample, tiny_config)
    h1, _ = tiny_model(token_ids, images)
    pos = layout.answer_marker_index + 2
    mutated = token_ids.clone()
    mutated[0, pos] = text.PAD_ID
    h2, _ = tiny_model(mutated, images)
    assert torch.equal(h1[0, :pos], h2[0, :pos])


def test_adapter_zero_equals_base(tiny_config):
    """Zeroed second factors: forward identical to adapter-free model."""
    sample = tiny_sample(tiny_config)
    token_ids, images, _ = tensors_for(sample, tiny_config)
    with_adapters = build_model(tiny_config, seed=5)
    h1, l1 = with_adapters(token_ids, images)
    # lora_b is zero-initialized, so the adapter path contributes nothing
    for name, p in with_adapters.named_parameters():
        if "lora_b" in name:
            assert not p.abs().sum()
    with torch.no_grad():
        for name, p in with_adapters.named_parameters():
            if "lora_a" in name:
                p.mul_(3.0)  # scaling A changes nothing while B = 0
    h2, l2 = with_adapters(token_ids, images)
    assert torch.equal(h1, h2) and torch.equal(l1, l2)


def test_forward_deterministic(tiny_config):
    sample = tiny_sample(tiny_config)
    token_ids, images, _ = tensors_for(sample, tiny_config)
    m1 = build_model(tiny_config, seed=9)
    m2 = build_model(tiny_config, seed=9)
    assert state_bytes(m1) == state_bytes(m2)
    h1, _ = m1(token_ids, images)
    h2, _ = m2(token_ids, images)
    assert torch.equal(h1, h2)


def test_heads_zero_initialized(tiny_model, tiny_config):
    sample = tiny_sample(tiny_config)
    token_ids, images, layout = tensors_for(sample, tiny_config)
    h, logits = tiny_model(token_ids, images)
    assert not logits.abs().sum()  # uniform LM at init
    assert not tiny_model.gaze_head(h).abs().sum()


# ---------------------------------------------------------------------------
# apply_adapters
# ---------------------------------------------------------------------------

def test_adapter_parameter_count():
    config = ModelConfig(d=64, n_layers=1, n_heads=4, G=4, patch_pixels=4,
                         adapter_rank=4, max_T=128)
    model = build_model(config, seed=0)
    per_proj = 2 * 4 * 64
    total = sum(p.numel() for n, p in model.named_parameters() if "lora_" in n)
    assert total == per_proj * 4  # q, k, v, o


def test_stage1_view_excludes_classifier(tiny_model):
    view = apply_adapters(tiny_model, 1)
    assert any("gaze_head" in name for name in view)
    assert not any("cls_head" in name or "lm_head" in name for name in view)
    assert all("lora_" in n or n.startswith("gaze_head") for n in view)


def test_stage2_view(tiny_model):
    view = apply_adapters(tiny_model, 2)
    assert any("cls_head" in n for n in view)
    assert any("lm_head" in n for n in view)
    assert not any("gaze_head" in n for n in view)


def test_frozen_parameters_receive_no_grad(tiny_model, tiny_config):
    sample = tiny_sample(tiny_config)
    token_ids, images, layout = tensors_for(sample, tiny_config)
    apply_adapters(tiny_model, 1)
    h, _ = tiny_model(token_ids, images)
    loss = tiny_model.gaze_head(h).sum()
    loss.backward()
    for name, p in tiny_model.named_parameters():
        if "lora_" in name or name.startswith("gaze_head"):
            continue
        assert p.grad is None, name


def test_apply_adapters_rank_zero_error():
    config = ModelConfig(d=8, n_layers=1, n_heads=2, G=4, patch_pixels=4,
                         adapter_rank=0, max_T=64)
    model = build_model(config, seed=0)
    assert sum("lora" in n for n, _ in model.named_parameters()) == 0
    with pytest.raises(ConfigError):
        apply_adapters(model, 1)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, tiny_config):
    model = build_model(tiny_config, seed=4)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model, stage=1, seed=4, supervision_variant="original", steps=0)
    restored, manifest = load_model(path)
    assert manifest["stage"] == 1
    assert manifest["supervision_variant"] == "original"
    assert manifest["config"] == tiny_config.to_dict()
    assert "git_describe" in manifest
    assert state_bytes(restored) == state_bytes(model)


def test_checkpoint_bytes_deterministic(tmp_path, tiny_config):
    model = build_model(tiny_config, seed=4)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, model, stage=1, seed=4, supervision_variant="original", steps=7)
    save_checkpoint(p2, model, stage=1, seed=4, supervision_variant="original", steps=7)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValidationError):
        read_checkpoint(path)


def test_make_sample_uint8_rescaled(tiny_config):
    img = np.full((16, 16), 255, dtype=np.uint8)
    sample = make_sample("s", img, [0] * 14)
    assert sample.image.dtype == np.float32
    assert sample.image.max() == pytest.approx(1.0)
