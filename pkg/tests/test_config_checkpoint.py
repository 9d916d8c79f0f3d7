import numpy as np
import pytest

from stfer.checkpoint import MAGIC, Checkpoint, CheckpointFormatError, dumps, load_checkpoint, loads, save_checkpoint
from stfer.config import ConfigError, TrainConfig


def test_config_round_trip():
    cfg = TrainConfig(epochs=7, base_lr=0.125, use_ser=False, vocab=("a", "tall"), lambdas=(0.5, 0.1, 0.1, 0.1, 0.1, 0.1))
    back = TrainConfig.from_text(cfg.to_text())
    assert back == cfg


def test_config_comments_and_errors():
    cfg = TrainConfig.from_text("# desk\nepochs = 5   # short\n\nuse_text = false\n")
    assert cfg.epochs == 5 and cfg.use_text is False
    with pytest.raises(ConfigError, match=":2: unknown key 'epoch'"):
        TrainConfig.from_text("epochs = 5\nepoch = 3\n", source="x.cfg")
    with pytest.raises(ConfigError, match="bad value"):
        TrainConfig.from_text("epochs = many\n")
    with pytest.raises(ConfigError, match="key = value"):
        TrainConfig.from_text("epochs 5\n")
    with pytest.raises(ConfigError, match="warmup"):
        TrainConfig(epochs=4, warmup_epochs=4)
    with pytest.raises(ConfigError):
        TrainConfig.from_text("base_lr = nan\n")


def test_vitb_preset():
    p = TrainConfig.vitb_preset()
    assert (p.base_lr, p.momentum, p.weight_decay, p.epochs) == (8e-3, 0.9, 5e-4, 120)
    assert p.warmup < p.epochs


def make_ckpt(seed=0):
    rng = np.random.default_rng(seed)
    params = {"a.W": rng.normal(size=(3, 4)), "b": rng.normal(size=5), "s": np.array(2.5)}
    mom = {k: rng.normal(size=v.shape) for k, v in params.items()}
    return Checkpoint(TrainConfig(epochs=3), params, mom, 3,
                      {"init": np.array([1.0, 2.0, 3.0]), "masking": np.arange(6.0)}, [3.1, 2.2, 1.3])


def test_checkpoint_round_trip_bytes(tmp_path):
    ck = make_ckpt()
    path = tmp_path / "a.ckpt"
    save_checkpoint(ck, path)
    back = load_checkpoint(path)
    for k, v in ck.params.items():
        assert np.array_equal(back.params[k], v) and back.params[k].shape == v.shape
    for k, v in ck.momentum.items():
        assert np.array_equal(back.momentum[k], v)
    assert back.epoch == 3 and back.loss_trace == ck.loss_trace and back.config == ck.config
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert path.read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_layout():
    data = dumps(make_ckpt())
    assert data[:4] == MAGIC
    assert int.from_bytes(data[4:8], "little") == 1
    n = int.from_bytes(data[8:16], "little")
    assert data[16:16 + n].decode().startswith("embed_dim = ")
    assert int.from_bytes(data[-8:], "little") == len(data) - 8


def test_checkpoint_errors():
    data = dumps(make_ckpt())
    with pytest.raises(CheckpointFormatError, match="STFR"):
        loads(b"XXXX" + data[4:])
    with pytest.raises(CheckpointFormatError):
        loads(data[:-20])
    with pytest.raises(CheckpointFormatError):
        loads(data[:10])
    bad = bytearray(data)
    bad[4] = 9
    with pytest.raises(CheckpointFormatError, match="version"):
        loads(bytes(bad))


def test_shipped_configs():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "configs"
    assert TrainConfig.load(root / "desk.cfg") == TrainConfig()
    assert TrainConfig.load(root / "smoke.cfg").epochs == 3
