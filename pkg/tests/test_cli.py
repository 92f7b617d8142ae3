import hashlib

import pytest

from maskguard.cli import main
from maskguard.io import read_csv, read_ppm

TINY = """\
data.n_scenes = 120
data.n_pairs = 8
model.T = 20
train.steps = 20
detection.epochs = 5
detection.shots = 3
dpo.epochs = 1
eval.n_safety_prompts = 4
eval.n_ablation_seeds = 4
eval.n_eval_scenes = 6
eval.sweep_timesteps = 1, 5, 10, 15, 20
"""


def write_cfg(root, extra=""):
    text = (f"paths.data_dir = {root}/data\npaths.checkpoint_dir = {root}/ckpt\n"
            f"paths.report_dir = {root}/reports\n" + TINY + extra)
    path = root / "run.cfg"
    path.write_text(text)
    return path


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    cfg = write_cfg(root)
    for cmd in ("gen-data", "train-base", "train-detector", "train-guidance"):
        assert main([cmd, "--config", str(cfg)]) == 0, cmd
    return root, cfg


def test_stage_outputs_and_sidecars(run):
    root, _ = run
    for name in ("base.sckt", "detector.sckt", "guidance.sckt", "base_loss.csv"):
        assert (root / "ckpt" / name).is_file()
        assert (root / "ckpt" / (name + ".fingerprint")).is_file()
    rows = read_csv(root / "data" / "dataset.csv")
    assert len(rows) == 120 and {"scene_id", "seed", "hazard", "split", "image_path"} <= set(rows[0])
    assert (root / "data" / rows[0]["image_path"]).is_file()
    assert len(read_csv(root / "data" / "pairs.csv")) == 8


def test_eval_writes_reports_and_leaves_checkpoints_alone(run):
    root, cfg = run
    before = {p.name: digest(p) for p in (root / "ckpt").glob("*.sckt")}
    assert main(["eval", "--config", str(cfg)]) == 0
    after = {p.name: digest(p) for p in (root / "ckpt").glob("*.sckt")}
    assert before == after
    reports = root / "reports"
    for exp in ("localization", "sweep", "safety", "ablation"):
        assert len(list(reports.glob(f"report_{exp}_*.csv"))) == 1
        png = next(reports.glob(f"report_{exp}_*.png"))
        assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert len(list(reports.glob("report_safety_*_samples.png"))) == 1


def test_eval_is_deterministic(run, tmp_path):
    _, cfg = run
    assert main(["eval", "--config", str(cfg), "--experiment", "ablation", "--out", str(tmp_path / "a")]) == 0
    assert main(["eval", "--config", str(cfg), "--experiment", "ablation", "--out", str(tmp_path / "b")]) == 0
    a, b = next((tmp_path / "a").glob("*.csv")), next((tmp_path / "b").glob("*.csv"))
    assert a.name == b.name and a.read_bytes() == b.read_bytes()


def test_sample_twice_is_bit_identical(run, tmp_path):
    _, cfg = run
    for d in ("x", "y"):
        assert main(["sample", "--config", str(cfg), "--mode", "off", "--prompt", "navy blaze",
                     "--out", str(tmp_path / d)]) == 0
    a, b = tmp_path / "x" / "sample_off_0.ppm", tmp_path / "y" / "sample_off_0.ppm"
    assert a.read_bytes() == b.read_bytes() and read_ppm(a).shape == (32, 32, 3)


def test_sample_region_guided_writes_mask_and_overlay(run, tmp_path):
    _, cfg = run
    assert main(["sample", "--config", str(cfg), "--prompt", "slate toxin", "--seed", "3",
                 "--out", str(tmp_path)]) == 0
    for suffix in (".ppm", "_mask.pgm", "_overlay.ppm"):
        assert (tmp_path / f"sample_region_guided_3{suffix}").is_file()


def test_missing_checkpoint_exit_code(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["eval", "--config", str(cfg), "--experiment", "ablation"]) == 2
    err = capsys.readouterr().err
    assert "kind=missing-checkpoint" in err and "stage=base" in err


def test_missing_guidance_reports_its_stage(run, tmp_path, capsys):
    root, _ = run
    cfg = tmp_path / "partial.cfg"
    ckpt = tmp_path / "ckpt"
    ckpt.mkdir()
    for name in ("base.sckt", "detector.sckt"):
        (ckpt / name).write_bytes((root / "ckpt" / name).read_bytes())
    cfg.write_text(f"paths.data_dir = {root}/data\npaths.checkpoint_dir = {ckpt}\n" + TINY)
    assert main(["eval", "--config", str(cfg), "--experiment", "ablation", "--out", str(tmp_path)]) == 2
    assert "stage=guidance" in capsys.readouterr().err


@pytest.mark.parametrize("extra, key", [("train.speed = 1\n", "train.speed"),
                                        ("suppression.window = 2\n", "suppression.window")])
def test_bad_config_exit_code(tmp_path, capsys, extra, key):
    cfg = write_cfg(tmp_path, extra)
    assert main(["show-config", "--config", str(cfg)]) == 3
    assert f"key={key}" in capsys.readouterr().err


def test_show_config_prints_fingerprint(tmp_path, capsys):
    assert main(["show-config"]) == 0
    out = capsys.readouterr().out
    assert "detection.alpha = 0.3" in out and "# fingerprint " in out


def test_unknown_prompt_word_is_an_input_error(run, capsys):
    _, cfg = run
    assert main(["sample", "--config", str(cfg), "--mode", "off", "--prompt", "navy dragon"]) == 1
