import logging
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from conftest import FIXTURES, GOLDEN, make_eye_dir
from scleraseg.cli import main
from scleraseg.dataset import ImageSample, SensorTag, read_mask, read_split, write_manifest


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def dataset(tmp_path):
    root = tmp_path / "data"
    make_eye_dir(root, 3, seed=1, subdir="ub")
    make_eye_dir(root, 3, seed=2, subdir="gs4")
    layout = tmp_path / "layout.ini"
    layout.write_text("[UBIRIS_V2]\npatterns = ub/*\n[MICHE_GS4]\npatterns = gs4/*\n")
    manifest = tmp_path / "manifest.tsv"
    assert main(["ingest", str(root), "--out", str(manifest), "--layout", str(layout)]) == 0
    return root, manifest


def big_manifest(path: Path, n: int = 1000) -> Path:
    samples = [ImageSample(f"img{i:04d}", Path(f"img{i:04d}.png"), Path(f"img{i:04d}_mask.png"),
                           SensorTag.UBIRIS_V2, (400, 300)) for i in range(n)]
    write_manifest(path, samples, path.parent)
    return path


# --------------------------------------------------------------------------
# ingest / split

def test_ingest_is_reproducible(tmp_path, capsys, dataset):
    root, manifest = dataset
    again = tmp_path / "again.tsv"
    code, out, _ = run(capsys, "ingest", root, "--out", again, "--layout", tmp_path / "layout.ini")
    assert code == 0 and "6 samples (6 with masks)" in out
    assert again.read_bytes() == manifest.read_bytes()
    assert (tmp_path / "again.tsv.cfg").exists()


def test_ingest_missing_root_leaves_no_file(tmp_path, capsys):
    out = tmp_path / "m.tsv"
    code, _, err = run(capsys, "ingest", tmp_path / "nope", "--out", out)
    assert code == 2 and "nope" in err
    assert not out.exists() and not (tmp_path / "m.tsv.tmp").exists()


def test_split_1000_is_deterministic(tmp_path, capsys):
    manifest = big_manifest(tmp_path / "m.tsv")
    a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
    assert run(capsys, "split", manifest, "--out", a, "--seed", 42)[0] == 0
    assert run(capsys, "split", manifest, "--out", b, "--seed", 42)[0] == 0
    assert a.read_bytes() == b.read_bytes()
    s = read_split(a)
    assert (len(s.train), len(s.validation), len(s.test)) == (400, 200, 400)


def test_split_seed_from_config_file(tmp_path, capsys):
    manifest = big_manifest(tmp_path / "m.tsv", 10)
    cfg = tmp_path / "run.cfg"
    cfg.write_text("seed = 42\nratios = 0.5,0.2,0.3\n")
    assert run(capsys, "split", manifest, "--out", tmp_path / "s.tsv", "--config", cfg)[0] == 0
    s = read_split(tmp_path / "s.tsv")
    assert (s.seed, len(s.train), len(s.validation), len(s.test)) == (42, 5, 2, 3)


def test_split_requires_seed(tmp_path, capsys):
    manifest = big_manifest(tmp_path / "m.tsv", 10)
    code, _, err = run(capsys, "split", manifest, "--out", tmp_path / "s.tsv")
    assert code == 1 and "seed" in err
    assert not (tmp_path / "s.tsv").exists()


def test_usage_errors_exit_1(capsys):
    assert run(capsys, "split")[0] == 1
    assert run(capsys, "frobnicate")[0] == 1


def test_bad_config_key_is_usage_error(tmp_path, capsys):
    manifest = big_manifest(tmp_path / "m.tsv", 10)
    cfg = tmp_path / "run.cfg"
    cfg.write_text("colour = red\n")
    assert run(capsys, "split", manifest, "--out", tmp_path / "s", "--config", cfg)[0] == 1


# --------------------------------------------------------------------------
# evaluate / cross-eval

def test_evaluate_gt_echo(tmp_path, capsys, dataset):
    _, manifest = dataset
    out = tmp_path / "eval"
    code, text, _ = run(capsys, "evaluate", "--manifest", manifest, "--out", out,
                        "--stub", "gt-echo", "--kind", "fcn", "--db", "UBIRIS")
    assert code == 0
    assert text.count("100.00 ± 00.00") == 3
    assert "UBIRIS.v2" in text
    assert {p.name for p in out.iterdir()} == {"metrics.csv", "report.txt", "report.csv",
                                               "run_config.cfg"}


def test_evaluate_background_stub(tmp_path, capsys, dataset):
    _, manifest = dataset
    code, text, _ = run(capsys, "evaluate", "--manifest", manifest, "--out", tmp_path / "e",
                        "--stub", "background", "--kind", "segnet", "--overlays", tmp_path / "ov")
    assert code == 0
    row = text.splitlines()[-1]
    assert row.split()[2:5] == ["00.00", "±", "00.00"]  # recall column
    assert len(list((tmp_path / "ov").rglob("*_overlay.png"))) == 6


def test_evaluate_without_segmenter_is_usage_error(tmp_path, capsys, dataset):
    _, manifest = dataset
    assert run(capsys, "evaluate", "--manifest", manifest, "--out", tmp_path / "e")[0] == 1
    assert run(capsys, "evaluate", "--manifest", manifest, "--out", tmp_path / "e",
               "--stub", "gt-echo")[0] == 1


def test_cross_eval(tmp_path, capsys, dataset):
    _, manifest = dataset
    code, text, _ = run(capsys, "cross-eval", "--manifest", manifest, "--out", tmp_path / "x",
                        "--train-db", "MICHE", "--test-db", "UBIRIS", "--stub", "gt-echo",
                        "--kind", "gan")
    assert code == 0 and "MICHE -> UBIRIS.v2" in text


def test_cross_eval_refuses_overlap(tmp_path, capsys, dataset):
    _, manifest = dataset
    code, _, err = run(capsys, "cross-eval", "--manifest", manifest, "--out", tmp_path / "x",
                       "--train-db", "MICHE", "--test-db", "GS4", "--stub", "gt-echo",
                       "--kind", "gan")
    assert code == 2 and "overlaps" in err
    assert not (tmp_path / "x").exists()


@pytest.fixture
def fcn_checkpoint(tmp_path):
    from scleraseg.checkpoint import save_checkpoint
    from scleraseg.segmenters import build_segmenter

    net = build_segmenter("fcn", width_divisor=16, seed=0)
    return save_checkpoint(tmp_path / "fcn.pt", "fcn", net,
                           {"width_divisor": 16, "input_size": [320, 240]}, {"train_db": "GS4"})


def test_cross_eval_checks_training_database(tmp_path, capsys, dataset, fcn_checkpoint):
    _, manifest = dataset
    code, _, err = run(capsys, "cross-eval", "--manifest", manifest, "--out", tmp_path / "x",
                       "--train-db", "MICHE", "--test-db", "UBIRIS", "--segmenter", fcn_checkpoint)
    assert code == 1 and "trained on GS4" in err


def test_kind_mismatch_is_usage_error(tmp_path, capsys, dataset, fcn_checkpoint):
    _, manifest = dataset
    assert run(capsys, "evaluate", "--manifest", manifest, "--out", tmp_path / "e",
               "--segmenter", fcn_checkpoint, "--kind", "segnet")[0] == 1


# --------------------------------------------------------------------------
# segment

def test_segment_partial_failure(tmp_path, capsys, dataset, fcn_checkpoint):
    root, _ = dataset
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"not an image")
    images = [root / "ub" / "eye000.png", bad, root / "ub" / "eye001.png"]
    out = tmp_path / "masks"
    code, text, _ = run(capsys, "segment", *images, "--out", out, "--segmenter", fcn_checkpoint)
    assert code == 2 and "2 of 3" in text
    assert sorted(p.name for p in out.glob("*.png")) == ["eye000_mask.png", "eye001_mask.png"]
    assert read_mask(out / "eye000_mask.png").shape == (240, 320)


def test_segment_background_stub(tmp_path, capsys, dataset):
    root, _ = dataset
    out = tmp_path / "masks"
    assert run(capsys, "segment", root / "gs4" / "eye002.png", "--out", out,
               "--stub", "background", "--kind", "gan")[0] == 0
    assert not read_mask(out / "eye002_mask.png").any()


def test_segment_gt_echo_is_refused(tmp_path, capsys, dataset):
    root, _ = dataset
    assert run(capsys, "segment", root / "ub" / "eye000.png", "--out", tmp_path / "m",
               "--stub", "gt-echo", "--kind", "fcn")[0] == 1


def test_fallback_to_full_image_is_logged(tmp_path, capsys, caplog, dataset):
    from scleraseg.checkpoint import save_checkpoint
    from scleraseg.detector import DetectorConfig, FastYolo

    root, _ = dataset
    cfg = DetectorConfig(width_divisor=16)
    ckpt = save_checkpoint(tmp_path / "det.pt", "detector", FastYolo(cfg), cfg.to_dict())
    with caplog.at_level(logging.INFO, logger="scleraseg"):
        code, _, _ = run(capsys, "segment", root / "ub" / "eye000.png", "--out", tmp_path / "m",
                         "--stub", "background", "--kind", "fcn", "--detector", ckpt,
                         "--confidence-threshold", "1.0")
    assert code == 0
    assert "no periocular region detected" in caplog.text


# --------------------------------------------------------------------------
# report / overlay / describe

def test_report_golden(tmp_path, capsys):
    files = [FIXTURES / n for n in ("metrics_ubiris_fcn.csv", "metrics_miche_segnet.csv",
                                    "metrics_cross_gan.csv")]
    code, text, _ = run(capsys, "report", *files)
    assert code == 0 and text == (GOLDEN / "report_three_rows.txt").read_text()
    assert run(capsys, "report", *files, "--format", "csv", "--out", tmp_path / "r.csv")[0] == 0
    assert (tmp_path / "r.csv").read_text() == (GOLDEN / "report_three_rows.csv").read_text()


def test_report_missing_file(capsys):
    assert run(capsys, "report", "/nonexistent.csv")[0] == 2


def test_overlay_command(tmp_path, capsys):
    from scleraseg.dataset import read_image, write_image, write_mask

    rng = np.random.default_rng(0)
    pred, gt = rng.random((20, 30)) < 0.5, rng.random((20, 30)) < 0.5
    write_mask(tmp_path / "p.png", pred)
    write_mask(tmp_path / "g.png", gt)
    write_image(tmp_path / "i.png", np.full((20, 30, 3), 128, np.uint8))
    code, text, _ = run(capsys, "overlay", "--pred", tmp_path / "p.png", "--gt", tmp_path / "g.png",
                        "--image", tmp_path / "i.png", "--out", tmp_path / "o.png")
    assert code == 0
    out = read_image(tmp_path / "o.png")
    fp, fn = int((pred & ~gt).sum()), int((~pred & gt).sum())
    assert f"fp {fp}" in text and f"fn {fn}" in text
    assert (out == (0, 255, 0)).all(axis=-1).sum() == fp
    assert (out == (255, 0, 0)).all(axis=-1).sum() == fn


@pytest.mark.parametrize("model, golden", [("detector", "fast_yolo.txt"), ("segnet", "segnet.txt")])
def test_describe_model_golden(capsys, model, golden):
    code, text, _ = run(capsys, "describe-model", model)
    assert code == 0 and text == (GOLDEN / golden).read_text()


@pytest.mark.parametrize("model", ["fcn", "gan", "discriminator"])
def test_describe_model_others(capsys, model):
    code, text, _ = run(capsys, "describe-model", model, "--width-divisor", "16")
    assert code == 0 and len(text.splitlines()) > 5


def test_console_script_version():
    out = subprocess.run([sys.executable, "-m", "scleraseg.cli", "--version"],
                         capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("scleraseg ")
