import csv

import numpy as np
import pytest

from npg.cli import main
from npg.coarse_model import load_checkpoint
from npg.config import ConfigError, config_text, default_config, read_config, stage1_config, stage2_config
from npg.training import Stage1Config, Stage2Config


def test_paper_preset_matches_dataclass_defaults():
    cp = default_config("paper")
    s1, s2 = stage1_config(cp), stage2_config(cp)
    assert s1 == Stage1Config() and s2 == Stage2Config()


def test_desk_preset_overrides():
    s1 = stage1_config(default_config("desk"))
    assert s1.M == 500 and s1.flow_pairs == 3


def test_file_then_flags(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[stage1]\nK = 5\niterations = 7\n[loss]\nflow = 0.5\n")
    cp = read_config(path, "desk", {("stage1", "K"): 2})
    s1 = stage1_config(cp)
    assert (s1.K, s1.iterations, s1.weights.flow) == (2, 7, 0.5)


@pytest.mark.parametrize("text", ["[stage1]\nbogus = 1\n", "[nope]\nK = 1\n", "[stage1]\nK = three\n"])
def test_bad_config_rejected(tmp_path, text):
    path = tmp_path / "c.ini"
    path.write_text(text)
    with pytest.raises(ConfigError):
        stage1_config(read_config(path))


def test_config_text_round_trips(tmp_path):
    cp = read_config(None, "desk", {("stage2", "finetune"): True, ("stage1", "init_center"): (0.0, 1.0, 2.5)})
    path = tmp_path / "c.ini"
    path.write_text(config_text(cp))
    back = read_config(path, "paper")
    assert stage1_config(back) == stage1_config(cp) and stage2_config(back) == stage2_config(cp)
    assert stage1_config(back).init_center == (0.0, 1.0, 2.5)


def test_unknown_flag_and_missing_input_exit_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["fit-coarse", str(tmp_path), "--out", str(tmp_path / "o"), "--frobnicate"])
    assert exc.value.code == 2
    assert main(["fit-coarse", str(tmp_path / "absent"), "--out", str(tmp_path / "o")]) == 2
    assert "usage:" in capsys.readouterr().err
    assert main(["fit-coarse", str(tmp_path), "--out", str(tmp_path / "o"), "--set", "stage1.nope=1"]) == 2


def test_invalid_config_value_exit_2_and_bad_data_exit_1(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "s"), "--frames", "4", "--resolution", "16"]) == 0
    assert main(["fit-coarse", str(tmp_path / "s"), "--out", str(tmp_path / "o"), "--k", "0"]) == 2
    (tmp_path / "s" / "transforms_train.json").write_text("{not json")
    assert main(["fit-coarse", str(tmp_path / "s"), "--out", str(tmp_path / "o")]) == 1


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "scene"
    assert main(["synth", "--out", str(data), "--frames", "4", "--resolution", "24"]) == 0
    fast = ["--set", "stage1.M=60", "--set", "stage1.n_mask_samples=100", "--set", "stage1.hidden=16"]
    for run in ("a", "b"):
        assert main(["fit-coarse", str(data), "--out", str(root / run), "--iters", "20", "--seed", "1",
                     "--color-iters", "2", *fast]) == 0
    assert main(["fit-gaussians", str(data), "--coarse", str(root / "a" / "coarse.ckpt"), "--out",
                 str(root / "g"), "--iters", "6", "--set", "stage2.volume_size=6"]) == 0
    return root, data


def test_fit_coarse_deterministic(pipeline):
    root, _ = pipeline
    assert (root / "a" / "coarse.ckpt").read_bytes() == (root / "b" / "coarse.ckpt").read_bytes()
    assert (root / "a" / "stage1_history.csv").read_text() == (root / "b" / "stage1_history.csv").read_text()


def test_config_echo_reproduces_run(pipeline):
    root, _ = pipeline
    cp = read_config(root / "a" / "config.ini", "paper")
    s1 = stage1_config(cp)
    assert (s1.iterations, s1.seed, s1.M, s1.hidden) == (20, 1, 60, 16)


def test_render_eval_export_trajectories(pipeline):
    root, data = pipeline
    assert main(["render", str(root / "g" / "gaussians.ckpt"), "--data", str(data), "--out",
                 str(root / "r")]) == 0
    assert main(["eval", str(root / "r"), "--data", str(data), "--out", str(root / "e")]) == 0
    rows = list(csv.DictReader(open(root / "e" / "eval.csv")))
    assert rows[-1]["frame"] == "mean" and np.isfinite(float(rows[-1]["psnr"]))
    assert main(["export-ply", str(root / "g" / "gaussians.ckpt"), "--frame", "3", "--out",
                 str(root / "g.ply")]) == 0
    assert (root / "g.ply").read_bytes().startswith(b"ply\nformat binary_little_endian 1.0\n")
    assert main(["export-ply", str(root / "g" / "gaussians.ckpt"), "--frame", "9", "--out",
                 str(root / "x.ply")]) == 2
    assert main(["trajectories", str(root / "a" / "coarse.ckpt"), "--out", str(root / "t")]) == 0
    traj = np.load(root / "t" / "trajectories.npy")
    assert traj.shape == (load_checkpoint(root / "a" / "coarse.ckpt").M, 4, 3)


def test_eval_identical_images_is_infinite(pipeline, tmp_path, capsys):
    _, data = pipeline
    from pathlib import Path
    from npg.dataset import load_dataset, write_png
    ds = load_dataset(data, "test")
    for img, name in zip(ds.images, ds.names):
        write_png(tmp_path / (Path(name).name + ".png"), img)
    capsys.readouterr()
    assert main(["eval", str(tmp_path), "--data", str(data), "--out", str(tmp_path / "e")]) == 0
    assert "PSNR inf dB" in capsys.readouterr().out
