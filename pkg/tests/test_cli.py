import os

import numpy as np
import pytest

from niff.cli import main
from niff.config import DEFAULTS, ConfigError, RunConfig, describe_defaults
from niff.data import write_idx


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    """Tiny 8x8 digits: class k lights up quadrant k."""
    root = tmp_path_factory.mktemp("idx")
    rng = np.random.default_rng(0)
    for split, n, prefix in (("train", 96, "train"), ("test", 48, "t10k")):
        labels = rng.integers(0, 4, n).astype(np.uint8)
        img = rng.integers(0, 60, (n, 8, 8))
        for i, k in enumerate(labels):
            r, c = divmod(int(k), 2)
            img[i, r * 4:(r + 1) * 4, c * 4:(c + 1) * 4] += 150
        write_idx(root / f"{prefix}-images-idx3-ubyte", img.astype(np.uint8))
        write_idx(root / f"{prefix}-labels-idx1-ubyte", labels)
    return root


def write_config(path, data_root, **extra):
    lines = [f"data.root = {data_root}", "train.epochs = 2", "train.log_timing = false",
             "model.channels = 4,8,8", "# comment line", ""]
    lines += [f"{k} = {v}" for k, v in extra.items()]
    path.write_text("\n".join(lines) + "\n")
    return str(path)


@pytest.fixture(scope="module")
def trained(data_root, tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = write_config(d / "run.cfg", data_root)
    assert main(["train", "--config", cfg, "--out", str(d / "out")]) == 0
    return d


def test_train_outputs(trained):
    files = set(os.listdir(trained / "out"))
    assert {"metrics.csv", "checkpoint.niff", "config.txt", "training.png"} <= files
    text = (trained / "out" / "config.txt").read_text()
    assert "train.epochs = 2" in text and "model.channels = 4,8,8" in text


def test_train_twice_is_identical(trained, data_root, tmp_path):
    cfg = write_config(tmp_path / "run.cfg", data_root)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "again"), "--no-figures"]) == 0
    for f in ("metrics.csv", "checkpoint.niff"):
        assert (tmp_path / "again" / f).read_bytes() == (trained / "out" / f).read_bytes(), f


def test_eval_matches_training_log(trained, data_root, capsys):
    assert main(["eval", "--checkpoint", str(trained / "out" / "checkpoint.niff"), "--data", str(data_root)]) == 0
    out = dict(kv.split("=") for kv in capsys.readouterr().out.split())
    assert abs(float(out["test_acc"]) - float(out["logged_test_acc"])) <= 1e-6
    assert out["samples"] == "48"


def test_analyze_and_export(trained, tmp_path, capsys):
    ckpt = str(trained / "out" / "checkpoint.niff")
    assert main(["analyze", "--checkpoint", ckpt, "--out", str(tmp_path / "a"), "--no-figures"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "layer,name,kind,size,mean_effective_size,fraction_below_side"
    names = os.listdir(tmp_path / "a")
    assert {"mass_ratio.csv", "pca.csv", "effective_size.csv", "layer0_spatial.pgm"} <= set(names)
    assert not any(n.endswith(".png") for n in names)
    assert main(["export-kernels", "--checkpoint", ckpt, "--layer", "0", "--out", str(tmp_path / "k")]) == 0
    assert sorted(os.listdir(tmp_path / "k")) == ["layer0_freq.npy", "layer0_spatial.npy", "layer0_spatial.pgm"]
    assert main(["export-kernels", "--checkpoint", ckpt, "--layer", "99", "--out", str(tmp_path / "k")]) == 1


def test_resume_through_cli(trained, data_root, tmp_path, capsys):
    cfg = write_config(tmp_path / "run.cfg", data_root, **{"train.epochs": 3})
    out = tmp_path / "r"
    assert main(["train", "--config", cfg, "--out", str(out), "--no-figures",
                 "--resume", str(trained / "out" / "checkpoint.niff")]) == 1
    assert "different train settings: epochs" in capsys.readouterr().err
    cfg2 = write_config(tmp_path / "run2.cfg", data_root)
    assert main(["train", "--config", cfg2, "--out", str(out), "--no-figures",
                 "--resume", str(trained / "out" / "checkpoint.niff")]) == 0


def test_spatial_checkpoint_cannot_be_analyzed(data_root, tmp_path, capsys):
    cfg = write_config(tmp_path / "s.cfg", data_root, **{"model.variant": "spatial", "train.epochs": 1})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "s"), "--no-figures"]) == 0
    capsys.readouterr()
    assert main(["analyze", "--checkpoint", str(tmp_path / "s" / "checkpoint.niff"), "--out", str(tmp_path / "a")]) == 1
    assert "no NIFF layers" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["fly"], ["train"], ["analyze", "--checkpoint", "x"],
                                  ["bench", "--suite", "gpu", "--out", "x"]])
def test_usage_errors(argv, capsys):
    assert main(argv) == 1


def test_unknown_config_key(data_root, tmp_path, capsys):
    cfg = write_config(tmp_path / "c.cfg", data_root, **{"train.learning_rate": 0.1})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "unknown key 'train.learning_rate'" in err and "c.cfg:7" in err
    assert main(["train", "--out", str(tmp_path / "o"), "--set", "model.widht=3"]) == 1
    assert main(["train", "--out", str(tmp_path / "o"), "--set", "nokey"]) == 1
    assert main(["train", "--out", str(tmp_path / "o"), "--set", "model.variant=hybrid",
                 "--set", f"data.root={data_root}"]) == 1


def test_io_errors(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path / "o"), "--set", f"data.root={tmp_path / 'nothing'}"]) == 2
    assert "does not exist" in capsys.readouterr().err
    assert main(["eval", "--checkpoint", str(tmp_path / "none.niff"), "--data", str(tmp_path)]) == 2
    (tmp_path / "bad.niff").write_bytes(b"NIFF\x01\x00")
    assert main(["analyze", "--checkpoint", str(tmp_path / "bad.niff"), "--out", str(tmp_path / "a")]) == 2


def test_nan_loss_exit_code(data_root, tmp_path, capsys):
    cfg = write_config(tmp_path / "n.cfg", data_root, **{"train.lr": 1e30})
    with np.errstate(all="ignore"):
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "n")]) == 3
    assert "lower train.lr" in capsys.readouterr().err


def test_bad_thread_env(monkeypatch, capsys):
    monkeypatch.setenv("NIFF_THREADS", "many")
    assert main(["defaults"]) == 1
    monkeypatch.setenv("NIFF_THREADS", "1")
    assert main(["defaults"]) == 0


def test_bench_conv_quick(tmp_path, capsys):
    out = tmp_path / "b" / "bench.csv"
    assert main(["bench", "--suite", "conv", "--quick", "--out", str(out),
                 "--set", "bench.iterations=3", "--set", "bench.warmup=1"]) == 0
    assert out.read_text().startswith("op,N,M,C,B,median_ns,iterations\n")
    assert (tmp_path / "b" / "bench_summary.csv").exists() and (tmp_path / "b" / "bench.png").exists()
    printed = capsys.readouterr().out
    assert "spatial_slope_in_N_M3=" in printed and "full_kernel_N_star=" in printed


def test_bench_epoch_suite(data_root, tmp_path, capsys):
    out = tmp_path / "epoch.csv"
    assert main(["bench", "--suite", "epoch", "--out", str(out), "--data", str(data_root),
                 "--set", "bench.epochs=1", "--set", "model.channels=4,8,8"]) == 0
    summary = (tmp_path / "epoch_summary.csv").read_text()
    for key in ("niff_over_spatial_epoch_ratio", "niff_half_over_spatial_epoch_ratio", "spatial_self_ratio",
                "cached_over_uncached_inference"):
        assert key in summary


# ------------------------------------------------------------------ config

def test_defaults_listing_round_trips(capsys):
    assert main(["defaults"]) == 0
    text = capsys.readouterr().out
    cfg = RunConfig.from_text(text)
    assert cfg.values == RunConfig.defaults().values
    assert text == describe_defaults() + "\n"
    assert all(k in text for k in DEFAULTS)


def test_config_values_are_typed():
    cfg = RunConfig.from_text("train.lr = 0.1  # faster\ntrain.log_timing = no\nmodel.channels = 8, 16, 32\n")
    assert cfg["train.lr"] == 0.1 and cfg["train.log_timing"] is False and cfg["model.channels"] == (8, 16, 32)
    assert RunConfig.from_text(cfg.to_text()).values == cfg.values
    assert RunConfig.from_dict(cfg.to_dict()).values == cfg.values
    assert cfg.train_config().lr == 0.1


@pytest.mark.parametrize("text,match", [
    ("train.epochs = ten", "train.epochs"),
    ("train.log_timing = maybe", "true or false"),
    ("model.channels = 1,2", "3 comma-separated"),
    ("just words", "expected 'section.key = value'"),
    ("optim.lr = 1", "sections"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        RunConfig.from_text(text)


def test_config_builds_model_spec():
    cfg = RunConfig.from_text("model.desk = resnet\nmodel.full = full\nmodel.spectral_path = half\n")
    spec = cfg.model_spec(3, (32, 32), 10)
    assert spec.in_channels == 3 and spec.spectral_path == "half"
    assert any(b.kind == "niff_full" for b in spec.blocks)
    with pytest.raises(ConfigError, match="model.desk"):
        RunConfig.from_text("model.desk = vgg").model_spec()


@pytest.mark.parametrize("name", ["mnist5k_plain", "mnist5k_plain_spatial", "mnist5k_resnet", "cifar10_recipe"])
def test_shipped_configs_parse(name):
    root = os.path.join(os.path.dirname(__file__), os.pardir, "configs")
    cfg = RunConfig.from_file(os.path.join(root, name + ".cfg"))
    c = 3 if name.startswith("cifar") else 1
    cfg.model_spec(c, (32, 32) if c == 3 else (28, 28))
    cfg.train_config()
