import math

import numpy as np
import pytest

from cawcl.config import ConfigError, TrainConfig
from cawcl.datagen import GenConfig, generate
from cawcl.diffcore import ShapeMismatch, Tensor
from cawcl.evaluation import retrieval_report
from cawcl.trainer import (AblationSuite, AdamState, Trainer, ablation_csv, adam_step, build_samples,
                           lr_at, run_ablation, summarize, tracklet_reps)

TINY_GEN = GenConfig(source_ids=6, source_cams=2, target_ids=5, target_cams=2, frames=8, d_in=6)
TINY = TrainConfig(epochs=2, warmup_epochs=2, batch_size=8, lr_decay_epochs=(1,), cluster_k=6,
                   min_pts=3, d_hidden=8, feat_dim=6)


@pytest.fixture(scope="module")
def tiny_data():
    return generate(TINY_GEN)


# ------------------------------------------------------------------- Adam


def test_adam_matches_hand_recurrence():
    p = Tensor(1.0, requires_grad=True)
    state = AdamState()
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    x, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate((0.5, 0.5, 0.5), 1):
        adam_step([p], [np.array([[g]])], state, lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        assert p.data[0, 0] == pytest.approx(x, rel=1e-15, abs=1e-15)
    # a constant gradient moves by about lr per step
    assert p.data[0, 0] == pytest.approx(1.0 - 3 * lr, abs=1e-6)


def test_adam_no_op_cases():
    p = Tensor([[1.0, -2.0]], requires_grad=True)
    adam_step([p], [np.zeros((1, 2))], AdamState(), lr=0.1)
    np.testing.assert_array_equal(p.data, [[1.0, -2.0]])
    adam_step([p], [np.ones((1, 2))], AdamState(), lr=0.0)
    np.testing.assert_array_equal(p.data, [[1.0, -2.0]])
    with pytest.raises(ShapeMismatch):
        adam_step([p], [np.ones((2, 1))], AdamState(), lr=0.1)


def test_adam_decoupled_weight_decay():
    p = Tensor([[2.0]], requires_grad=True)
    adam_step([p], [np.zeros((1, 1))], AdamState(), lr=0.1, weight_decay=0.5)
    assert p.data[0, 0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_adam_step_counts_are_per_parameter():
    a, b = Tensor(0.0, requires_grad=True), Tensor(0.0, requires_grad=True)
    state = AdamState()
    adam_step([a], [np.ones((1, 1))], state, 0.1)
    adam_step([a, b], [np.ones((1, 1)), np.ones((1, 1))], state, 0.1)
    assert state.t[id(a)] == 2 and state.t[id(b)] == 1


# -------------------------------------------------------------- schedule


def test_lr_schedule():
    cfg = TrainConfig(lr=3e-4, lr_decay_epochs=(10, 20, 30), lr_decay=0.1)
    assert lr_at(cfg, 1) == 3e-4 and lr_at(cfg, 10) == 3e-4
    assert lr_at(cfg, 11) == pytest.approx(3e-5)
    assert lr_at(cfg, 21) == pytest.approx(lr_at(cfg, 20) * 0.1)
    assert lr_at(cfg, 40) == pytest.approx(3e-7)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr_decay=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(camera_loss="adversarial")
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"learning_rate": "1"})
    cfg = TrainConfig.from_mapping({"lr_decay_epochs": "5,7", "source_keys": "false", "lr": "0.01"})
    assert cfg.lr_decay_epochs == (5, 7) and cfg.source_keys is False and cfg.lr == 0.01
    assert TrainConfig.from_mapping(dict(
        line.split(" = ") for line in cfg.to_text().splitlines())) == cfg


# --------------------------------------------------------------- samples


def test_clips_double_sample_count(tiny_data):
    one = build_samples(tiny_data.target, 1)
    two = build_samples(tiny_data.target, 2)
    assert len(two) == 2 * len(one) == 2 * len(tiny_data.target)
    np.testing.assert_array_equal(two.owner, np.repeat(np.arange(len(tiny_data.target)), 2))


def test_tracklet_reps_average_clips(tiny_data):
    tr = Trainer(TINY, tiny_data)
    reps = tracklet_reps(tr.model, tr.tgt, len(tiny_data.target))
    clip = tr.model.embed(tr.tgt.frames)
    np.testing.assert_allclose(reps[0], (clip[0] + clip[1]) / 2, atol=1e-15)
    assert len(reps) == len(tiny_data.target)


# --------------------------------------------------------------- training


def params_of(model):
    return {k: p.data.copy() for k, p in model.named_params().items()}


def test_zero_warmup_leaves_params(tiny_data):
    tr = Trainer(TrainConfig.from_mapping({"warmup_epochs": "0"}, TINY), tiny_data)
    before = params_of(tr.model)
    tr.pretrain_source()
    for k, v in params_of(tr.model).items():
        np.testing.assert_array_equal(v, before[k])


def test_warmup_separates_source():
    data = generate(GenConfig(source_ids=6, source_cams=2, target_ids=3, target_cams=2, frames=8,
                              d_in=6, camera_shift=0.0, id_spread=2.0, noise=0.2, drift=0.1))
    cfg = TrainConfig.from_mapping({"warmup_epochs": "30"}, TINY)
    tr = Trainer(cfg, data)
    tr.pretrain_source()
    reps = tracklet_reps(tr.model, tr.src, len(data.source))
    ids = np.array([t.person_id for t in data.source])
    cams = np.array([t.camera for t in data.source])
    assert retrieval_report(reps, ids, cams).rank1 > 0.95


def test_training_is_deterministic(tiny_data):
    a, b = Trainer(TINY, tiny_data), Trainer(TINY, tiny_data)
    a.fit()
    b.fit()
    assert [r.csv_row() for r in a.reports] == [r.csv_row() for r in b.reports]
    for k, v in params_of(a.model).items():
        np.testing.assert_array_equal(v, params_of(b.model)[k])


def test_one_refresh_per_epoch(tiny_data):
    tr = Trainer(TINY, tiny_data)
    reports = tr.fit()
    assert len(reports) == TINY.epochs + 1
    assert [r.epoch for r in reports] == list(range(TINY.epochs + 1))
    assert tr.refreshes == TINY.epochs == tr.state.bank_version


def test_camera_only_step_leaves_identity_classifier(tiny_data):
    cfg = TrainConfig.from_mapping({"warmup_epochs": "0", "delta1": "0", "contrastive": "none",
                                    "camera_loss": "ce"}, TINY)
    tr = Trainer(cfg, tiny_data)
    enc0, id0 = params_of(tr.model), [p.data.copy() for p in tr.model.id_cls.params()]
    tr.train_epoch()
    for before, p in zip(id0, tr.model.id_cls.params()):
        np.testing.assert_array_equal(p.data, before)
    assert not np.array_equal(enc0["enc.w0"], tr.model.encoder.weights[0].data)


def test_identity_only_step_leaves_camera_classifier(tiny_data):
    cfg = TrainConfig.from_mapping({"warmup_epochs": "0", "camera_loss": "none",
                                    "contrastive": "none"}, TINY)
    tr = Trainer(cfg, tiny_data)
    cam0 = [p.data.copy() for p in tr.model.cam_cls.params()]
    tr.train_epoch()
    for before, p in zip(cam0, tr.model.cam_cls.params()):
        np.testing.assert_array_equal(p.data, before)
    assert tr.state.losses["cam"] == 0.0 and tr.state.losses["contr"] == 0.0


@pytest.mark.parametrize("variant", [("confusion", "knn_weighted"), ("ce", "plain"),
                                     ("confusion", "knn_weighted", "growth")])
def test_variants_run_and_stay_finite(tiny_data, variant):
    values = {"camera_loss": variant[0], "contrastive": variant[1], "epochs": "1"}
    if len(variant) > 2:
        values["pace"] = variant[2]
    tr = Trainer(TrainConfig.from_mapping(values, TINY), tiny_data)
    tr.fit()
    assert all(np.isfinite(v) for v in tr.state.losses.values())
    assert tr.state.gamma > 0


def test_growth_pace_multiplies_gamma(tiny_data):
    cfg = TrainConfig.from_mapping({"pace": "growth", "gamma0": "0.5", "alpha": "0.2",
                                    "warmup_epochs": "0"}, TINY)
    tr = Trainer(cfg, tiny_data)
    tr.train_epoch()
    tr.train_epoch()
    assert tr.state.gamma == pytest.approx(0.5 * 1.2 ** 2)


def test_bank_keys_stay_unit_norm_during_training(tiny_data):
    tr = Trainer(TrainConfig.from_mapping({"warmup_epochs": "0", "epochs": "1"}, TINY), tiny_data)
    tr.train_epoch()
    np.testing.assert_allclose(np.linalg.norm(tr.state.bank.keys, axis=1), 1.0, atol=1e-12)


# --------------------------------------------------------------- ablation


def tiny_suite(grid, seeds=(0,)):
    base = TrainConfig.from_mapping({"epochs": "1", "warmup_epochs": "1", "n_chunks": "2"}, TINY)
    return AblationSuite(base, grid, seeds, TINY_GEN)


def test_ablation_counts_and_repeatability():
    suite = tiny_suite((("camera_loss", ("ce", "confusion")), ("contrastive", ("plain", "knn_weighted"))))
    rows = run_ablation(suite)
    assert len(rows) == 4
    again = run_ablation(suite)
    assert rows == again


def test_ablation_clip_sweep_and_summary():
    suite = tiny_suite((("n_clips", (1, 2, 4)),), seeds=(0, 1))
    rows = run_ablation(suite)
    assert len(rows) == 6
    samples = {r["n_clips"]: r["samples"] for r in rows}
    assert samples[2] == 2 * samples[1] and samples[4] == 4 * samples[1]
    summary = summarize(rows, ["n_clips"])
    assert len(summary) == 3 and all(r["seed"] == "summary" for r in summary)
    r1 = [r["rank1"] for r in rows if r["n_clips"] == 2]
    assert summary[1]["rank1"] == pytest.approx(np.mean(r1))
    assert summary[1]["rank1_std"] == pytest.approx(np.std(r1))
    text = ablation_csv(rows + summary, ["n_clips"]).splitlines()
    assert len(text) == 1 + 6 + 3
    assert text[0].startswith("n_clips,seed,rank1")


def test_ablation_skip_uses_cached_rows():
    suite = tiny_suite((("camera_loss", ("ce",)),))
    cached = {"camera_loss": "ce", "seed": 0, "rank1": 0.5}
    assert run_ablation(suite, skip=lambda cell, seed: cached) == [cached]


def test_empty_grid_rejected():
    with pytest.raises(ConfigError):
        run_ablation(tiny_suite(()))


def test_confusion_alone_lowers_camera_probe():
    cfg = TrainConfig(delta3=0.0, camera_loss="confusion", seed=0)
    reports = Trainer(cfg, generate(GenConfig(seed=0))).fit()
    probe = [r.camera_probe_accuracy for r in reports[:11]]
    assert all(b <= a for a, b in zip(probe, probe[1:]))
    assert probe[-1] < probe[0]
