import json

import numpy as np
import pytest

from prnface.cli import main
from prnface.geometry import LandmarkSet, read_landmarks, write_landmarks

from conftest import random_face

TINY = """
[backbone]
input_size = 16
stem_filters = 4
stages = ((1, 4), (1, 8))
num_classes = 4
stem_kernel = 3
[prn]
g_layers = (8,)
f_layers = (6,)
lstm_hidden = 6
sid_width = 4
embed_dim = 5
variant = B
[train]
epochs = 1
batch_size = 8
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY)
    assert main(["gen-data", "--ids", "4", "--per-id", "8", "--size", "16", "--out", str(root / "data")]) == 0
    return root


def test_pairs(capsys):
    assert main(["pairs", "--n", "5"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "0 1" and lines[-2] == "3 4" and lines[-1] == "count 10"
    assert main(["pairs"]) == 0
    assert capsys.readouterr().out.splitlines()[-1] == "count 2278"
    assert main(["pairs", "--n", "1"]) == 2


def test_align(tmp_path, rng):
    src = tmp_path / "face.txt"
    write_landmarks(src, LandmarkSet(random_face(rng)))
    assert main(["align", str(src), "--out", str(tmp_path / "out")]) == 0
    aligned = read_landmarks(tmp_path / "out" / "face.txt")
    assert aligned.centroid("left_eye", "right_eye")[1] == pytest.approx(42.0, abs=1e-6)
    assert (tmp_path / "out" / "face.transform").read_text().strip()
    assert main(["align", str(tmp_path / "missing.txt"), "--out", str(tmp_path / "o")]) == 2


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck", "--target", "affine", "--seeds", "1"]) == 0
    assert capsys.readouterr().out.startswith("affine, max_rel_err, ")
    assert main(["gradcheck", "--target", "affine", "--seeds", "1", "--tol", "0"]) == 3
    assert main(["gradcheck", "--target", "nope"]) == 2


def test_train_and_eval_flow(workspace, capsys):
    cfg, data = str(workspace / "tiny.cfg"), str(workspace / "data")
    bb = workspace / "bb.ckpt"
    assert main(["train", "--stage", "backbone", "--config", cfg, "--data", data, "--out", str(bb)]) == 0
    log = [json.loads(line) for line in (workspace / "bb.ckpt.log.jsonl").read_text().splitlines()]
    assert log and {"step", "l_t", "l_p", "l_s", "joint", "active_triplets"} == set(log[0])
    # later stages need the earlier checkpoint
    assert main(["train", "--stage", "prn", "--config", cfg, "--data", data, "--out", str(workspace / "x")]) == 2
    assert main(["train", "--stage", "fusion", "--config", cfg, "--data", data, "--out", str(workspace / "x"),
                 "--from", str(bb)]) == 2
    prn = workspace / "prn.ckpt"
    assert main(["train", "--stage", "prn", "--config", cfg, "--data", data, "--out", str(prn), "--from", str(bb)]) == 0
    full = workspace / "full.ckpt"
    assert main(["train", "--stage", "fusion", "--config", cfg, "--data", data, "--out", str(full),
                 "--from", str(prn)]) == 0
    capsys.readouterr()
    report = workspace / "verify.txt"
    assert main(["eval", "--mode", "identify", "--ckpt", str(full), "--data", data, "--report", str(report)]) == 0
    lines = report.read_text().splitlines()
    assert lines == capsys.readouterr().out.splitlines()
    metrics = {tuple(line.split(", ")[:2]) for line in lines}
    assert {("rank_n", "1"), ("rank_n", "10"), ("tpir_at_fpir", "0.01"), ("tpir_at_fpir", "0.1")} <= metrics
    # the validation split has one sample per identity, so it has no mated pairs to verify
    assert main(["eval", "--mode", "verify", "--ckpt", str(full), "--data", data]) == 2


def test_verify_on_a_split_with_pairs(tmp_path, capsys):
    data = tmp_path / "d"
    assert main(["gen-data", "--ids", "3", "--per-id", "20", "--size", "16", "--out", str(data)]) == 0
    cfg = tmp_path / "a.cfg"
    cfg.write_text(TINY.replace("variant = B", "variant = A").replace("num_classes = 4", "num_classes = 3"))
    ckpt = tmp_path / "a.ckpt"
    assert main(["train", "--stage", "backbone", "--config", str(cfg), "--data", str(data), "--out", str(ckpt)]) == 0
    capsys.readouterr()
    assert main(["eval", "--mode", "verify", "--ckpt", str(ckpt), "--data", str(data)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [line.split(", ")[1] for line in lines[:4]] == ["1e-05", "0.0001", "0.001", "0.01"]
    assert all(0.0 <= float(line.split(", ")[2]) <= 1.0 for line in lines[:4])


def test_bad_config_and_missing_data(workspace, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[train]\nwarp = 9\n")
    args = ["train", "--stage", "backbone", "--data", str(workspace / "data"), "--out", str(tmp_path / "o")]
    assert main(args + ["--config", str(bad)]) == 2
    assert main(args + ["--config", str(tmp_path / "none.cfg")]) == 2
    assert main(["train", "--stage", "backbone", "--config", str(workspace / "tiny.cfg"),
                 "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 2
