import json
import math
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from fedpeft import cli
from fedpeft import experiment as ex
from fedpeft import federation
from fedpeft.checkpoint import file_hash, load_checkpoint, save_checkpoint
from fedpeft.data import Dataset
from fedpeft.errors import ConfigError
from fedpeft.models import ModelSpec, build_model, count_params
from fedpeft.tensor import SgdConfig

ROOT = Path(__file__).resolve().parents[1]

TINY_TOML = """
schema_version = 1
seed = 0
output_dir = "{out}"
reset_head = {reset}

[model]
family = "vit"
image_size = 8
patch_size = 4
embed_dim = 8
mlp_hidden_dim = 16
depth = 1
num_heads = 2
num_classes = 3

[mode]
kind = "{mode}"
adapter_bottleneck = 2
prompt_length = 2

[federation]
num_clients = 4
clients_per_round = 2
rounds = {rounds}
local_epochs = 1
alpha = 1.0

[sgd.{mode}]
learning_rate = {lr}
weight_decay = 0.0
batch_size = 16

[data.synthetic]
family = "vit"
class_count = 3
samples_per_class = 20
image_size = 8

[pretrain]
epochs = {epochs}
learning_rate = {lr}
batch_size = 16
samples_per_class = 20
"""


def write_config(tmp_path, name="cfg.toml", mode="bias", rounds=2, lr=0.1, epochs=1, reset="true"):
    path = tmp_path / name
    path.write_text(TINY_TOML.format(out=(tmp_path / "run").as_posix(), mode=mode, rounds=rounds,
                                     lr=lr, epochs=epochs, reset=reset))
    return path


@pytest.fixture
def tiny_cfg(tmp_path):
    return ex.load_config(write_config(tmp_path))


@pytest.fixture
def pretrained(tmp_path, tiny_cfg):
    path = tmp_path / "pre.ckpt"
    ex.pretrain(tiny_cfg, path)
    return path


# --- configuration ----------------------------------------------------------

def test_desk_config_parses():
    cfg = ex.load_config(ROOT / "configs" / "desk_vit.toml")
    assert cfg.model.embed_dim == 64 and cfg.num_clients == 16 and cfg.mode.kind == "bias"
    assert cfg.sgd_for("full").learning_rate == 0.05
    assert not cfg.dp.enabled


def test_default_hyperparameters_per_mode():
    cfg = ex.config_from_dict({})
    assert (cfg.num_clients, cfg.clients_per_round, cfg.alpha) == (64, 8, 0.1)
    lrs = {k: cfg.sgd_for(k).learning_rate for k in ex.DEFAULT_LR}
    assert lrs == {"full": 1e-3, "head": 5e-3, "bias": 1e-2, "adapter": 5e-3, "prompt": 1e-2}
    assert cfg.sgd_for("bias") == SgdConfig(1e-2, 1e-4, 64)
    dp_cfg = ex.config_from_dict({"dp": {"enabled": True}})
    assert dp_cfg.sgd_for("prompt").learning_rate == 3e-4


@pytest.mark.parametrize("raw,match", [
    ({"schema_version": 2}, "schema_version"),
    ({"colour": 1}, "unknown top-level"),
    ({"model": {"width": 3}}, "model"),
    ({"federation": {"num_clients": 4, "clients_per_round": 9}}, "clients_per_round"),
    ({"sgd": {"lora": {"learning_rate": 0.1}}}, "lora"),
    ({"model": {"family": "mlp", "input_dim": 4, "num_classes": 10}, "mode": {"kind": "prompt"}},
     "prompt"),
    ({"model": {"num_classes": 5}}, "class_count"),
    ({"data": {"source": "idx"}}, "train_images"),
    ({"federation": {"alpha": 0}}, "alpha"),
])
def test_config_errors(raw, match):
    with pytest.raises(ConfigError, match=match):
        ex.config_from_dict(raw)


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        ex.load_config(tmp_path / "missing.toml")
    (tmp_path / "bad.toml").write_text("[model\n")
    with pytest.raises(ConfigError):
        ex.load_config(tmp_path / "bad.toml")


def test_config_hash_ignores_output_dir(tiny_cfg):
    assert tiny_cfg.config_hash() == replace(tiny_cfg, output_dir="elsewhere").config_hash()
    assert tiny_cfg.config_hash() != replace(tiny_cfg, seed=1).config_hash()


def test_total_sample_cap(tiny_cfg):
    cfg = replace(tiny_cfg, data=replace(tiny_cfg.data, total_samples=25))
    train, _ = ex.load_datasets(cfg)
    assert len(train) == 25


# --- pretraining ------------------------------------------------------------

def test_zero_lr_pretraining_equals_initialisation(tmp_path):
    cfg = ex.load_config(write_config(tmp_path, lr=0.0))
    ex.pretrain(cfg, tmp_path / "a.ckpt")
    loaded, meta = load_checkpoint(tmp_path / "a.ckpt")
    init = build_model(cfg.model, seed=cfg.seed)
    assert meta["pretrained"] is True
    for n in init.params:
        assert loaded.params[n].data.tobytes() == init.params[n].data.tobytes()


def test_pretraining_is_reproducible(tmp_path, tiny_cfg):
    ex.pretrain(tiny_cfg, tmp_path / "a.ckpt")
    ex.pretrain(tiny_cfg, tmp_path / "b.ckpt")
    assert file_hash(tmp_path / "a.ckpt") == file_hash(tmp_path / "b.ckpt")


def test_pretraining_fits_separable_blobs():
    cfg = ex.config_from_dict({
        "model": {"family": "mlp", "input_dim": 16, "mlp_hidden_dim": 32, "num_classes": 2},
        "data": {"synthetic": {"family": "mlp", "class_count": 2, "feature_dim": 16,
                               "separation": 3.0}},
        "pretrain": {"epochs": 20, "learning_rate": 0.1, "samples_per_class": 100},
    })
    _, history = ex.pretrain(cfg)
    assert history[-1][1] > 0.95


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_pretraining_divergence_is_reported(tmp_path):
    cfg = ex.load_config(write_config(tmp_path, lr=1e30, epochs=3))
    with pytest.raises(ex.DivergenceError):
        ex.pretrain(cfg)


# --- federation pipeline ----------------------------------------------------

def test_zero_lr_single_round_keeps_checkpoint_accuracy(tmp_path, pretrained):
    cfg = ex.load_config(write_config(tmp_path, rounds=1, lr=0.0, reset="false"))
    _, ev = ex.load_datasets(cfg)
    history = ex.federate(cfg, pretrained, tmp_path / "out")
    assert history[-1].server_accuracy == ex.evaluate_checkpoint(pretrained, ev)[0]


def test_param_count_per_mode_in_the_log(tmp_path, pretrained):
    counts = {}
    for mode in ("head", "full"):
        cfg = ex.load_config(write_config(tmp_path, name=f"{mode}.toml", mode=mode, rounds=1))
        ex.federate(cfg, pretrained, tmp_path / mode)
        header, rounds = ex.read_metrics(tmp_path / mode / "metrics.jsonl")
        counts[mode] = (header["param_count"], rounds[0]["param_count"])
    spec = ex.load_config(write_config(tmp_path)).model
    head = count_params(spec, "head").tuned
    assert counts["head"] == (head, head)
    assert counts["full"] == (count_params(spec).total,) * 2


def test_rerun_gives_byte_identical_metrics(tmp_path, tiny_cfg, pretrained):
    ex.federate(tiny_cfg, pretrained, tmp_path / "a")
    ex.federate(tiny_cfg, pretrained, tmp_path / "b", threads=2)
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert (tmp_path / "a" / "ledger.csv").read_bytes() == (tmp_path / "b" / "ledger.csv").read_bytes()
    assert file_hash(tmp_path / "a" / "final.ckpt") == file_hash(tmp_path / "b" / "final.ckpt")
    lines = a.decode().splitlines()
    assert len(lines) == 1 + tiny_cfg.rounds
    assert json.loads(lines[0])["config_hash"] == tiny_cfg.config_hash()
    meta = json.loads((tmp_path / "a" / "run_meta.json").read_text())
    assert "started" in meta and "started" not in lines[0]


def test_failed_run_keeps_partial_log(tmp_path, tiny_cfg, pretrained, monkeypatch):
    real, calls = federation.evaluate, []

    def flaky(model, data, *args):
        calls.append(1)
        if len(calls) == 2:
            raise RuntimeError("evaluation host went away")
        return real(model, data, *args)

    monkeypatch.setattr(federation, "evaluate", flaky)
    with pytest.raises(federation.TrainingAborted) as info:
        ex.federate(tiny_cfg, pretrained, tmp_path / "out")
    assert len(info.value.history) == 1
    _, rounds = ex.read_metrics(tmp_path / "out" / "metrics.jsonl")
    assert len(rounds) == 1


def test_checkpoint_spec_mismatch(tmp_path, tiny_cfg, pretrained):
    cfg = replace(tiny_cfg, model=replace(tiny_cfg.model, depth=2))
    with pytest.raises(ConfigError):
        ex.federate(cfg, pretrained, tmp_path / "out")


def test_output_directory_is_locked(tmp_path, tiny_cfg, pretrained):
    out = tmp_path / "out"
    out.mkdir()
    with ex._Lock(out):
        with pytest.raises(ConfigError, match="another experiment"):
            ex.federate(tiny_cfg, pretrained, out)


# --- evaluation -------------------------------------------------------------

def test_memorised_sample_is_classified(tmp_path):
    from fedpeft import tensor as T
    model = build_model(ModelSpec.mlp(4, 8, 3), seed=0)
    x, y = np.ones((1, 4), dtype=np.float32), np.array([2])
    for _ in range(50):
        T.backward(T.cross_entropy_loss(model(x), y))
        T.sgd_step(model.trainable_params(), SgdConfig(0.5))
    save_checkpoint(model, tmp_path / "m.ckpt")
    data = Dataset(x, y, 3)
    assert ex.evaluate_checkpoint(tmp_path / "m.ckpt", data) == ex.evaluate_checkpoint(tmp_path / "m.ckpt", data)
    assert ex.evaluate_checkpoint(tmp_path / "m.ckpt", data)[0] == 1.0


def test_random_model_is_at_chance(tmp_path):
    spec = ModelSpec("vit", 8, 4, 8, 16, 1, 2, 10)
    save_checkpoint(build_model(spec, seed=1), tmp_path / "r.ckpt")
    cfg = ex.config_from_dict({"model": spec.to_dict(),
                               "data": {"eval_samples_per_class": 100,
                                        "synthetic": {"image_size": 8, "class_count": 10}}})
    _, ev = ex.load_datasets(cfg)
    acc, _ = ex.evaluate_checkpoint(tmp_path / "r.ckpt", ev, spec)
    sd = math.sqrt(0.1 * 0.9 / len(ev))
    assert abs(acc - 0.1) <= 3 * sd


# --- command line -----------------------------------------------------------

def test_report_table1_exit_codes(monkeypatch, capsys):
    assert cli.main(["report-table1"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "85.88M x 8, 2.56GB" in out and "0.17M x 8, 5.19MB" in out and "0.18M x 8, 5.49MB" in out
    monkeypatch.setitem(ex.TABLE1_EXPECTED, "full", ("85.88M", 8, "2.57GB"))
    assert cli.main(["report-table1"]) == cli.EXIT_MISMATCH
    assert "MISMATCH" in capsys.readouterr().out


def test_cli_pipeline(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "cli"
    assert cli.main(["pretrain", "--config", str(cfg), "--out", str(out)]) == 0
    ckpt = out / "pretrained.ckpt"
    assert ckpt.exists()
    capsys.readouterr()
    assert cli.main(["federate", "--config", str(cfg), "--checkpoint", str(ckpt), "--out", str(out),
                     "--seeds", "0,1", "--mode", "head", "--threads", "2"]) == 0
    runs = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert [r["seed"] for r in runs] == [0, 1]
    assert (out / "seed_1" / "metrics.jsonl").exists()
    assert cli.main(["eval", "--config", str(cfg), "--checkpoint", str(out / "seed_0" / "final.ckpt")]) == 0
    assert 0 <= json.loads(capsys.readouterr().out)["accuracy"] <= 1
    assert cli.main(["partition-stats", "--config", str(cfg)]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert sum(stats["shard_sizes"]) == 60 and len(stats["label_entropy"]) == 4


def test_cli_seed_environment_override(tmp_path, capsys, monkeypatch):
    cfg = write_config(tmp_path)
    monkeypatch.setenv(cli.SEED_ENV, "5")
    assert cli.main(["partition-stats", "--config", str(cfg)]) == 0
    assert json.loads(capsys.readouterr().out)["seed"] == 5
    assert cli.main(["partition-stats", "--config", str(cfg), "--seed", "2"]) == 0
    assert json.loads(capsys.readouterr().out)["seed"] == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_error_exit_codes(tmp_path, capsys):
    assert cli.main(["pretrain", "--config", str(tmp_path / "none.toml")]) == cli.EXIT_CONFIG
    assert cli.main(["pretrain", "--config", str(write_config(tmp_path, lr=1e30, epochs=3)),
                     "--out", str(tmp_path / "d")]) == cli.EXIT_DIVERGED
    bad = tmp_path / "idx.toml"
    bad.write_text('[data]\nsource = "idx"\n[data.idx]\ntrain_images = "a"\ntrain_labels = "b"\n'
                   'eval_images = "c"\neval_labels = "d"\n')
    assert cli.main(["partition-stats", "--config", str(bad)]) == cli.EXIT_DATA
    assert cli.main(["partition-stats", "--config", str(write_config(tmp_path)),
                     "--threads", "0"]) == cli.EXIT_CONFIG


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "fedpeft", "report-table1"], capture_output=True,
                          text=True, timeout=60)
    assert proc.returncode == 0 and proc.stdout.count(" ok") == 5
