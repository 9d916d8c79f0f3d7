import json
import subprocess
import sys

import numpy as np
import pytest

from stfer.cli import main
from stfer.training import read_pgm

TINY = """\
embed_dim = 16
depth = 2
heads = 2
patch = 4
image_h = 16
image_w = 8
epochs = 2
batch_ids = 4
batch_instances = 2
data_dir = {data}
descriptions = {text}
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    data, text = d / "data", d / "desc.jsonl"
    assert main(["gen-data", "--out", str(data), "--ids", "6", "--train", "4", "--shots", "1",
                 "--height", "16", "--width", "8", "--seed", "2"]) == 0
    assert main(["gen-text", "--data", str(data), "--out", str(text)]) == 0
    cfg = d / "tiny.cfg"
    cfg.write_text(TINY.format(data=data, text=text))
    ckpt = d / "m.ckpt"
    assert main(["train", "--config", str(cfg), "--out", str(ckpt)]) == 0
    return d, data, text, cfg, ckpt


def test_gen_outputs(workspace):
    d, data, text, _, _ = workspace
    lines = text.read_text().splitlines()
    assert len(lines) == 6 and all("id" in json.loads(l) for l in lines)
    assert any(data.iterdir())


def test_eval_json(workspace, capsys):
    d, data, _, _, ckpt = workspace
    out = d / "r.json"
    for mode in ("textfree", "text"):
        assert main(["eval", "--ckpt", str(ckpt), "--data", str(data), "--mode", mode, "--json", str(out)]) == 0
        rep = json.loads(out.read_text())
        assert 0 <= rep["any_time"]["r1"] <= 1
    assert "Any-Time" in capsys.readouterr().out


def test_heatmap_repeatable(workspace):
    d, data, _, _, ckpt = workspace
    a, b = d / "a.pgm", d / "b.pgm"
    for out in (a, b):
        assert main(["heatmap", "--ckpt", str(ckpt), "--sample", "0", "--scenario", "AD-LT",
                     "--out", str(out), "--data", str(data)]) == 0
    assert a.read_bytes() == b.read_bytes() and read_pgm(a).shape == (16, 8)


def test_ablation_flags_train(workspace, tmp_path):
    _, _, _, cfg, _ = workspace
    out = tmp_path / "abl.ckpt"
    assert main(["train", "--config", str(cfg), "--out", str(out), "--no-text", "--no-svtf", "--no-ser"]) == 0
    from stfer.checkpoint import load_checkpoint
    c = load_checkpoint(out).config
    assert (c.use_text, c.use_svtf, c.use_ser) == (False, False, False)


def test_errors_exit_2(workspace, tmp_path, capsys):
    d, data, _, cfg, ckpt = workspace
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochz = 3\n")
    assert main(["train", "--config", str(bad)]) == 2
    assert "unknown key 'epochz'" in capsys.readouterr().err
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"nope")
    assert main(["eval", "--ckpt", str(junk), "--data", str(data)]) == 2
    assert main(["heatmap", "--ckpt", str(ckpt), "--sample", "0", "--scenario", "NOON",
                 "--out", str(tmp_path / "x.pgm"), "--data", str(data)]) == 2
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(tmp_path / "none")]) == 2


def test_console_entry_selftest_quick():
    r = subprocess.run([sys.executable, "-m", "stfer.cli", "selftest", "--quick"], capture_output=True, text=True,
                       timeout=600)
    assert r.returncode == 0, r.stdout + r.stderr
    assert "checks passed" in r.stdout
