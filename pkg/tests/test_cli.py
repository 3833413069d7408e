import json
import os

import numpy as np
import pytest
from PIL import Image

from gazevlm.cli import main
from gazevlm.training import TrainConfig, write_train_config


SMALL_MODEL = dict(d=16, n_layers=1, n_heads=2, G=8, patch_pixels=8, adapter_rank=2)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    assert main(["synth", "--scenario", "separable", "--n", "10", "--seed", "2",
                 "--out", str(corpus)]) == 0
    sup = root / "sup.jsonl"
    assert main(["preprocess", "--sessions", str(corpus), "--out", str(sup),
                 "--grid-g", "8", "--k", "5"]) == 0
    config_path = root / "train.cfg"
    write_train_config(
        config_path,
        TrainConfig(stage=1, steps=2, seed=0, corpus_dir=str(corpus),
                    supervision_file=str(sup), **SMALL_MODEL),
    )
    return root, corpus, sup, config_path


def test_preprocess_rerun_byte_identical(workspace):
    root, corpus, sup, _ = workspace
    again = root / "sup2.jsonl"
    assert main(["preprocess", "--sessions", str(corpus), "--out", str(again),
                 "--grid-g", "8", "--k", "5"]) == 0
    assert sup.read_bytes() == again.read_bytes()


def test_preprocess_line_per_session(workspace):
    _, corpus, sup, _ = workspace
    assert len(sup.read_text().splitlines()) == 10


def test_preprocess_empty_dir_fails(tmp_path):
    assert main(["preprocess", "--sessions", str(tmp_path), "--out",
                 str(tmp_path / "out.jsonl")]) == 1


def test_train_stage1_and_determinism(workspace):
    root, _, _, config_path = workspace
    assert main(["train", "--stage", "1", "--config", str(config_path),
                 "--seed", "7", "--out", str(root / "runA")]) == 0
    assert main(["train", "--stage", "1", "--config", str(config_path),
                 "--seed", "7", "--out", str(root / "runB")]) == 0
    a = (root / "runA" / "checkpoint.ckpt").read_bytes()
    b = (root / "runB" / "checkpoint.ckpt").read_bytes()
    assert a == b
    assert (root / "runA" / "metrics.jsonl").exists()
    assert (root / "runA" / "config.txt").exists()


def test_train_stage2_requires_init(workspace):
    root, _, _, config_path = workspace
    assert main(["train", "--stage", "2", "--config", str(config_path),
                 "--out", str(root / "bad")]) == 1


def test_train_stage2_runs(workspace):
    root, _, _, config_path = workspace
    assert main(["train", "--stage", "2", "--config", str(config_path), "--seed", "7",
                 "--init-from", str(root / "runA" / "checkpoint.ckpt"),
                 "--out", str(root / "runC")]) == 0
    manifest_line = json.loads(
        (root / "runC" / "metrics.jsonl").read_text().splitlines()[0]
    )
    assert manifest_line["stage"] == 2
    assert manifest_line["l_combined"] is not None


def test_eval_cli(workspace):
    root, corpus, _, _ = workspace
    report_path = root / "report.jsonl"
    rc = main(["eval", "--ckpt", str(root / "runC" / "checkpoint.ckpt"),
               "--data", str(corpus), "--split", "test",
               "--out", str(report_path)])
    assert rc == 0
    record = json.loads(report_path.read_text().splitlines()[0])
    assert record["n_samples"] == 1
    assert len(record["per_label_auroc"]) == 14


def test_eval_missing_checkpoint(workspace, tmp_path):
    _, corpus, _, _ = workspace
    rc = main(["eval", "--ckpt", str(tmp_path / "nope.ckpt"), "--data", str(corpus)])
    assert rc == 2  # unreadable file is an internal error, not validation


def test_eval_variant_mismatch(workspace):
    root, corpus, _, _ = workspace
    rc = main(["eval", "--ckpt", str(root / "runC" / "checkpoint.ckpt"),
               "--data", str(corpus), "--expect-variant", "shuffled"])
    assert rc == 1


def test_eval_threshold_violation(workspace):
    root, corpus, _, _ = workspace
    rc = main(["eval", "--ckpt", str(root / "runC" / "checkpoint.ckpt"),
               "--data", str(corpus), "--split", "test", "--min-macro-auroc", "1.1"])
    assert rc == 1


def test_visualize_outputs(workspace, tmp_path):
    _, corpus, _, _ = workspace
    session = corpus / "session_00000"
    out = tmp_path / "viz"
    assert main(["visualize", "--session", str(session), "--out", str(out),
                 "--grid-g", "8"]) == 0
    names = sorted(os.listdir(out))
    assert names == ["composite.png", "step_1.png", "step_2.png", "step_3.png", "step_4.png"]
    strip = np.asarray(Image.open(out / "composite.png"))
    step = np.asarray(Image.open(out / "step_1.png"))
    assert strip.shape[1] > 4 * step.shape[1]  # four panels plus separators


def test_visualize_deterministic(workspace, tmp_path):
    _, corpus, _, _ = workspace
    session = corpus / "session_00001"
    out1, out2 = tmp_path / "v1", tmp_path / "v2"
    assert main(["visualize", "--session", str(session), "--out", str(out1), "--grid-g", "8"]) == 0
    assert main(["visualize", "--session", str(session), "--out", str(out2), "--grid-g", "8"]) == 0
    for name in os.listdir(out1):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_visualize_empty_bin_is_plain_image(tmp_path):
    """A session with gaze only in bin 1 renders steps 2-4 as the bare image."""
    from conftest import write_fixations, write_transcript
    from gazevlm.pgm import write_pgm

    session = tmp_path / "session_x"
    session.mkdir()
    write_fixations(session / "fixations.csv", [(100, 200, 0.1, 0.1)])
    write_transcript(
        session / "transcript.jsonl",
        [{"sentence_id": q, "word": f"w{q}", "t_start_ms": q * 1000,
          "t_end_ms": (q + 1) * 1000} for q in range(4)],
    )
    rng = np.random.default_rng(0)
    base = rng.integers(0, 255, size=(32, 32), dtype=np.uint8)
    write_pgm(session / "image.pgm", base)
    (session / "labels.csv").write_text(",".join(["0"] * 14) + "\n")
    out = tmp_path / "viz"
    assert main(["visualize", "--session", str(session), "--out", str(out), "--grid-g", "8"]) == 0
    for step in (2, 3, 4):
        panel = np.asarray(Image.open(out / f"step_{step}.png"))
        assert np.array_equal(panel[:, :, 0], base)
        assert np.array_equal(panel[:, :, 1], base)
    heated = np.asarray(Image.open(out / "step_1.png"))
    assert not np.array_equal(heated[:, :, 0], base)


def test_out_root_env(workspace, tmp_path, monkeypatch):
    _, corpus, _, _ = workspace
    monkeypatch.setenv("GAZEVLM_OUT_ROOT", str(tmp_path))
    session = corpus / "session_00002"
    assert main(["visualize", "--session", str(session), "--out", "viz_rel", "--grid-g", "8"]) == 0
    assert (tmp_path / "viz_rel" / "step_1.png").exists()
