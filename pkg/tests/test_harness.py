import io
import json
import math

import numpy as np
import pytest

from prnface.backbone import BackboneConfig
from prnface.errors import (DegenerateLabelSet, EmptyGallery, InvalidConfig, MissingPrerequisite)
from prnface.harness import (Dataset, NuisanceRanges, RunConfig, TrainConfig, gen_dataset, parse_config)
from prnface.harness.config import MiningConfig
from prnface.harness.evaluate import (EvalReport, FAR_POINTS, all_pairs, identification_rates, identify,
                                      mean_templates, verification_rates, verify_pairs)
from prnface.harness.pipeline import build_model, embeddings_and_logits, load_model, save_model
from prnface.harness.train import pk_batches, prerequisites, train_all, train_stage
from prnface.harness.trend import REFERENCE, TrendReport
from prnface.model import ModelConfig
from prnface.numerics import checkpoint
from prnface.prn import RelationConfig

from oracles import oracle_identification, oracle_verification


def tiny_config(variant="C", **train):
    backbone = BackboneConfig(input_size=16, stem_filters=4, stages=((1, 4), (1, 8)), num_classes=4, stem_kernel=3)
    relation = RelationConfig(g_layers=(8,), f_layers=(6,), lstm_hidden=6, sid_width=4, embed_dim=5,
                              variant=variant)
    defaults = {"epochs": 2, "batch_size": 8, "dtype": "float64"}
    return RunConfig(ModelConfig(backbone, relation), TrainConfig(**{**defaults, **train}))


@pytest.fixture(scope="module")
def tiny_data():
    return gen_dataset(num_ids=4, samples_per_id=8, seed=3, image_size=16)


# dataset -----------------------------------------------------------------------

def test_dataset_is_deterministic_and_split_per_identity(tiny_data):
    again = gen_dataset(num_ids=4, samples_per_id=8, seed=3, image_size=16)
    for name in ("train", "val"):
        a, b = getattr(tiny_data, name), getattr(again, name)
        assert a.pixels.tobytes() == b.pixels.tobytes() and a.landmarks.tobytes() == b.landmarks.tobytes()
    assert not np.array_equal(gen_dataset(num_ids=4, samples_per_id=8, seed=4, image_size=16).train.pixels,
                              tiny_data.train.pixels)
    counts = np.bincount(tiny_data.val.labels)
    assert np.all(counts == 1) and np.all(np.bincount(tiny_data.train.labels) == 7)


def test_desk_split_sizes():
    data = gen_dataset(num_ids=16, samples_per_id=40, image_size=16)
    assert (len(data.train), len(data.val)) == (576, 64)
    per_id = np.bincount(data.val.labels) / 40
    assert np.all((per_id >= 0.1) & (per_id <= 0.1 + 1 / 40))


def test_pixels_are_normalised(tiny_data):
    images = tiny_data.train.images()
    assert images.dtype == np.float32 and images.min() >= 0.0 and images.max() <= 1.0
    assert np.all(tiny_data.train.landmarks >= 0) and np.all(tiny_data.train.landmarks <= 16)


def test_zero_nuisance_samples_of_an_identity_are_identical():
    data = gen_dataset(num_ids=3, samples_per_id=4, nuisance=NuisanceRanges.none(), image_size=16)
    for k in range(3):
        pix = data.train.pixels[data.train.labels == k]
        assert all(np.array_equal(pix[0], p) for p in pix[1:])


def test_dataset_round_trip(tmp_path, tiny_data):
    tiny_data.save(tmp_path / "d")
    back = Dataset.load(tmp_path / "d")
    assert back.train.pixels.tobytes() == tiny_data.train.pixels.tobytes()
    assert back.nuisance == tiny_data.nuisance and back.num_ids == 4
    with pytest.raises(InvalidConfig):
        Dataset.load(tmp_path / "missing")


def test_dataset_validation():
    with pytest.raises(InvalidConfig):
        gen_dataset(num_ids=1)
    with pytest.raises(InvalidConfig):
        gen_dataset(samples_per_id=1)


# config -------------------------------------------------------------------------

def test_config_parse_and_round_trip():
    cfg = parse_config("""
[backbone]
preset = desk-small
num_classes = 8
[prn]
g_layers = (16, 16)
variant = B
margin = 0.2
loss_weights = (1.0, 0.5, 1.0)
[train]
learning_rate = 0.05
stage_epochs = {"prn": 3}
[mining]
strategy = semi-hard
seed = 4
""")
    assert cfg.model.backbone.num_classes == 8 and cfg.model.backbone.input_size == 56
    assert cfg.model.relation.g_layers == (16, 16) and cfg.model.variant == "B"
    assert cfg.train.epochs_for("prn") == 3 and cfg.train.epochs_for("fusion") == 30
    assert cfg.mining == MiningConfig("semi-hard", 4, 1)
    assert parse_config(cfg.to_text()) == cfg


@pytest.mark.parametrize("text", [
    "[backbone]\nbogus = 1\n", "[nope]\nx = 1\n", "[backbone]\npreset = huge\n", "[prn]\nmargin = -1\n",
    "[train]\nreduction = median\n", "[mining]\nstrategy = hardest\n", "[train]\nstage_epochs = {'warmup': 1}\n",
    "no header line\n",
])
def test_config_errors(text):
    with pytest.raises(InvalidConfig):
        parse_config(text)


# metrics: brute-force oracles -------------------------------------------------------

def _instance(rng):
    n = int(rng.integers(4, 60))
    dim = int(rng.integers(1, 5))
    labels = rng.integers(0, int(rng.integers(2, 8)), size=n)
    # coarse integer grid so exact distance ties occur
    emb = rng.integers(-3, 4, size=(n, dim)).astype(np.float64) if rng.random() < 0.5 else rng.normal(size=(n, dim))
    return emb, labels


def test_verify_pairs_matches_oracle_on_random_instances():
    rng = np.random.default_rng(0)
    done = 0
    while done < 50:
        emb, labels = _instance(rng)
        i, j, same = all_pairs(labels)
        if same.all() or not same.any() or len(i) > 200:
            continue
        report = verify_pairs(emb[i], emb[j], same)
        d = ((emb[i] - emb[j]) ** 2).sum(axis=1)
        assert report.tar_at_far == oracle_verification(d, same)
        assert report.check_invariants()
        done += 1


def test_identify_matches_oracle_on_random_instances():
    rng = np.random.default_rng(1)
    for _ in range(50):
        emb, labels = _instance(rng)
        n_gallery = int(rng.integers(1, len(labels)))
        g, p = emb[:n_gallery], emb[n_gallery:]
        g_labels, p_labels = labels[:n_gallery], labels[n_gallery:]
        if not np.isin(p_labels, g_labels).any():
            with pytest.raises(DegenerateLabelSet):
                identify(g, g_labels, p, p_labels)
            continue
        report = identify(g, g_labels, p, p_labels)
        rank, tpir = oracle_identification(p.tolist(), p_labels.tolist(), g.tolist(), g_labels.tolist())
        assert report.rank_n == rank and report.tpir_at_fpir == tpir
        assert report.check_invariants()


def test_verification_hand_cases():
    same = np.array([True, True, False, False])
    r = verification_rates([1.0, 2.0, 3.0, 4.0], same)
    assert all(v == 1.0 for v in r.tar_at_far.values())
    assert verification_rates([1.0, 2.0, 3.0, 4.0], same, far_points=(0.0,)).tar_at_far[0.0] == 1.0
    assert 2.0 < r.thresholds[("tar_at_far", 1e-5)] <= 3.0
    flat = verification_rates([5.0] * 4, same)
    assert all(v == 0.0 for v in flat.tar_at_far.values())
    with pytest.raises(DegenerateLabelSet):
        verification_rates([1.0, 2.0], [True, True])


def test_identification_hand_cases():
    gallery = np.array([[0.0], [10.0], [20.0]])
    g_labels = np.array([0, 1, 2])
    probes = np.array([[0.0], [9.0], [16.0]])
    report = identify(gallery, g_labels, probes, np.array([0, 1, 1]))
    assert report.rank_n[1] == pytest.approx(2 / 3)
    assert report.rank_n[5] == report.rank_n[10] == 1.0
    # tie: equal distance to gallery entries 0 and 1 goes to index 0
    tie = identification_rates(np.array([[1.0, 1.0]]), np.array([0, 1]), np.array([1]), ranks=(1,))
    assert tie.rank_n[1] == 0.0
    with pytest.raises(EmptyGallery):
        identify(np.zeros((0, 2)), np.zeros(0, int), np.zeros((1, 2)), np.zeros(1, int))


def test_report_lines_and_templates():
    report = verification_rates([1.0, 2.0, 3.0], [True, False, True])
    lines = report.lines()
    assert lines[0].startswith("tar_at_far, 1e-05, ") and all(line.count(",") == 2 for line in lines)
    templates, labels = mean_templates(np.array([[0.0], [2.0], [5.0]]), np.array([1, 1, 0]))
    assert labels.tolist() == [0, 1] and templates[:, 0].tolist() == [5.0, 1.0]
    assert not EvalReport(rank_n={1: 0.5, 5: 0.4}).check_invariants()


# training and persistence ----------------------------------------------------------------

def test_prerequisites():
    assert prerequisites("fusion", "C") == ("backbone", "encoder", "prn")
    assert prerequisites("prn", "B") == ("backbone",)
    with pytest.raises(ValueError):
        prerequisites("warmup", "C")


def test_stage_without_prerequisite_is_rejected(tiny_data):
    model = build_model(tiny_config())
    with pytest.raises(MissingPrerequisite):
        train_stage(model, "prn", tiny_data, tiny_config())
    with pytest.raises(MissingPrerequisite):
        train_stage(build_model(tiny_config("A")), "encoder", tiny_data, tiny_config("A"))


def test_zero_learning_rate_keeps_parameters(tiny_data):
    cfg = tiny_config(learning_rate=0.0)
    model = build_model(cfg)
    before = {k: v.copy() for k, v in model.state_dict().items() if not k.endswith(("running_mean", "running_var"))}
    train_all(model, tiny_data, cfg)
    after = model.state_dict()
    assert all(np.array_equal(v, after[k]) for k, v in before.items())


def test_prn_stage_freezes_backbone_and_logs_each_step(tiny_data):
    cfg = tiny_config()
    model = build_model(cfg)
    train_stage(model, "backbone", tiny_data, cfg)
    train_stage(model, "encoder", tiny_data, cfg)
    backbone, encoder = model.backbone.checksum(), model.encoder.checksum()
    prn = model.prn.checksum()
    log = io.StringIO()
    result = train_stage(model, "prn", tiny_data, cfg, log)
    assert model.backbone.checksum() == backbone and model.encoder.checksum() == encoder
    assert model.prn.checksum() != prn
    records = [json.loads(line) for line in log.getvalue().splitlines()]
    assert [r["step"] for r in records] == list(range(len(result.steps)))
    assert all(math.isfinite(r["joint"]) and r["active_triplets"] >= 0 for r in records)


def test_pk_batches_have_k_per_identity():
    labels = np.repeat(np.arange(6), 5)
    for idx in pk_batches(labels, 16, 4, np.random.default_rng(0)):
        counts = np.bincount(labels[idx])
        assert set(counts[counts > 0].tolist()) == {4} and len(idx) == 16


def test_pipeline_is_deterministic_and_checkpoints_round_trip(tmp_path, tiny_data):
    reports, blobs = [], []
    for run in range(2):
        cfg = tiny_config()
        model = build_model(cfg)
        train_all(model, tiny_data, cfg)
        path = tmp_path / f"run{run}.ckpt"
        save_model(model, cfg, path)
        blobs.append(path.read_bytes())
        emb, _ = embeddings_and_logits(model, tiny_data.train.images(np.float64), tiny_data.train.landmarks)
        i, j, same = all_pairs(tiny_data.train.labels)
        reports.append(verify_pairs(emb[i], emb[j], same).lines())
    assert blobs[0] == blobs[1] and reports[0] == reports[1]
    loaded, loaded_cfg = load_model(tmp_path / "run0.ckpt")
    assert loaded_cfg == cfg and loaded.stages_done == {"backbone", "encoder", "prn", "fusion"}
    again, _ = embeddings_and_logits(loaded, tiny_data.train.images(np.float64), tiny_data.train.landmarks)
    assert again.tobytes() == emb.tobytes()
    with pytest.raises(MissingPrerequisite):
        load_model(tmp_path / "absent.ckpt")


def test_checkpoint_mismatch_is_a_config_error(tmp_path):
    cfg = tiny_config()
    save_model(build_model(cfg), cfg, tmp_path / "c.ckpt")
    with pytest.raises(InvalidConfig):
        load_model(tmp_path / "c.ckpt", tiny_config("B"))
    raw = checkpoint.load(tmp_path / "c.ckpt")
    assert "meta.stages_done" in raw


# trend report --------------------------------------------------------------------------

def test_trend_report_logic():
    acc = {"A": [0.9] * 5, "B": [0.92] * 5, "C": [0.93, 0.9, 0.93, 0.95, 0.91],
           "PRN": [0.8, 0.85, 0.8, 0.9, 0.7], "PRN+": [0.85, 0.8, 0.85, 0.9, 0.6]}
    report = TrendReport([0, 1, 2, 3, 4], acc)
    assert report.checks == {"PRN+ >= PRN": True, "median(C) >= median(A) - 1pp": True, "C >= B": True}
    assert report.wins("C", "B") == 3
    assert any("99.76" in line for line in report.lines())
    assert REFERENCE["relational only"] == {"PRN": 94.2, "PRN+": 96.7}
    same = TrendReport([0], {v: [0.5] for v in acc}, min_wins=1)
    assert same.passed
    with pytest.raises(MissingPrerequisite):
        TrendReport([0], {"A": [1.0]})
