import json
import math

import numpy as np
import pytest

from pslab.checkpoint import CheckpointError, StubScorer, load_checkpoint, read_manifest, save_checkpoint
from pslab.core import Tensor, TensorError
from pslab.networks import DepthNet, DepthNetConfig, MaskNet, MaskNetConfig, SppNet
from pslab.optim import FULL_DEPTH, FULL_MASK, OptimConfig, OptimState, adam_step, sgd_step
from pslab.synth import SynthConfig, build_protocol
from pslab.train import (
    TrainError,
    aggregate_folds,
    epoch_order,
    evaluate,
    score_split,
    train_depth_model,
    train_mask_model,
    train_model,
)

SMALL_SYNTH = SynthConfig(seed=4, image_side=32, counts={"train": 32, "dev": 16, "test": 24})
SMALL_MASK = MaskNetConfig(input_side=32, feature_channels=8, scales=(4, 2, 1), stage_channels=(4, 8))
SMALL_DEPTH = DepthNetConfig(input_side=32, scales=(16, 8), channels=(4, 4, 4), head_channels=4)


def quick(epochs=1, seed=0, **kw):
    return OptimConfig(kind="adam", lr=1e-3, momentum=0.0, epochs=epochs, batch_size=8, seed=seed, **kw)


@pytest.fixture(scope="module")
def intra():
    return build_protocol(SMALL_SYNTH, "intra")


# -- optimizers ---------------------------------------------------------------

def test_full_scale_presets():
    assert (FULL_MASK.kind, FULL_MASK.lr, FULL_MASK.momentum, FULL_MASK.weight_decay) == ("sgd", 1e-3, 0.9, 5e-5)
    assert (FULL_DEPTH.kind, FULL_DEPTH.lr, FULL_DEPTH.weight_decay) == ("adam", 1e-4, 5e-5)
    assert FULL_DEPTH.lr_halve_epoch == 500
    assert FULL_DEPTH.lr_at(499) == 1e-4 and FULL_DEPTH.lr_at(500) == 5e-5


def test_optim_config_validation():
    with pytest.raises(ValueError):
        OptimConfig(lr=0)
    with pytest.raises(ValueError):
        OptimConfig(kind="rmsprop")


@pytest.mark.parametrize("step", [sgd_step, adam_step])
def test_zero_gradient_fixed_point(step):
    p = {"w": Tensor(np.array([1.5, -2.0]))}
    before = p["w"].data.copy()
    cfg = OptimConfig(kind="sgd", lr=0.1, weight_decay=0.0)
    for _ in range(3):
        step(p, {"w": np.zeros(2)}, OptimState(), cfg)
    assert np.array_equal(p["w"].data, before)


def test_sgd_single_step():
    p = {"w": Tensor(np.array(3.0))}
    sgd_step(p, {"w": np.array(1.0)}, OptimState(), OptimConfig(kind="sgd", lr=0.1, momentum=0.0, weight_decay=0.0))
    assert p["w"].item() == 3.0 - 0.1


def test_sgd_momentum_and_decay_reference():
    cfg = OptimConfig(kind="sgd", lr=0.05, momentum=0.9, weight_decay=0.01)
    p = {"w": Tensor(np.array(2.0))}
    state = OptimState()
    w, v = 2.0, 0.0
    for _ in range(10):
        g = 2 * p["w"].item()
        sgd_step(p, {"w": np.array(g)}, state, cfg)
        v = 0.9 * v + (2 * w + 0.01 * w)
        w = w - 0.05 * v
    assert abs(p["w"].item() - w) <= 1e-12


def test_adam_quadratic_reference():
    # f(w) = (w - 3)^2, hand-rolled bias-corrected Adam with coupled L2 decay
    cfg = OptimConfig(kind="adam", lr=0.1, weight_decay=0.02)
    p = {"w": Tensor(np.array([0.5]))}
    state = OptimState()
    w, m, v = 0.5, 0.0, 0.0
    for t in range(1, 11):
        sg = 2 * (p["w"].data[0] - 3.0)
        adam_step(p, {"w": np.array([sg])}, state, cfg)
        g = 2 * (w - 3.0) + 0.02 * w
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert abs(p["w"].data[0] - w) <= 1e-12


def test_optimizer_shape_mismatch():
    with pytest.raises(TensorError):
        sgd_step({"w": Tensor(np.zeros(3))}, {"w": np.zeros(2)}, OptimState(), OptimConfig())


def test_epoch_order_is_seeded_permutation():
    a = epoch_order(50, 1, 0)
    assert sorted(a.tolist()) == list(range(50))
    assert np.array_equal(a, epoch_order(50, 1, 0))
    assert not np.array_equal(a, epoch_order(50, 1, 1))


# -- training -----------------------------------------------------------------

def test_mask_smoke(intra):
    model = MaskNet(SMALL_MASK, 0, np.float32)
    log = train_mask_model(model, SMALL_SYNTH, intra, quick())
    assert len(log.entries) == 1
    assert math.isfinite(log.losses()[0])
    assert set(log.entries[0]["loss"]["components"]) == {"pyramid", "binary"}
    line = json.loads(log.to_jsonl().splitlines()[0])
    assert {"seed", "config_hash", "epoch", "loss", "seconds"} <= set(line)


def test_depth_smoke(intra):
    model = DepthNet(SMALL_DEPTH, 0, np.float32)
    log = train_depth_model(model, SMALL_SYNTH, intra, quick())
    assert len(log.entries) == 1 and math.isfinite(log.losses()[0])
    assert set(log.entries[0]["loss"]["components"]) == {"mse", "cdl"}


def test_spp_smoke(intra):
    model = SppNet(SMALL_MASK, 0, np.float32)
    log = train_model(model, SMALL_SYNTH, intra, quick())
    assert math.isfinite(log.losses()[0])


def test_training_is_deterministic(intra):
    runs = []
    for _ in range(2):
        model = MaskNet(SMALL_MASK, 3, np.float32)
        log = train_mask_model(model, SMALL_SYNTH, intra, quick(epochs=2, seed=3))
        report, scores = evaluate(model, SMALL_SYNTH, intra)
        runs.append((log.to_jsonl(timing=False), report.to_json(), scores.to_csv()))
    assert runs[0] == runs[1]


def test_training_errors(intra):
    empty = build_protocol(SynthConfig(image_side=32, counts={"train": 0, "dev": 0, "test": 4}), "intra")
    with pytest.raises(TrainError):
        train_mask_model(MaskNet(SMALL_MASK), SMALL_SYNTH, empty, quick())
    with pytest.raises(TrainError):
        train_depth_model(MaskNet(SMALL_MASK), SMALL_SYNTH, intra, quick())
    with pytest.raises(TensorError):
        train_mask_model(MaskNet(MaskNetConfig()), SMALL_SYNTH, intra, quick())


@pytest.mark.slow
@pytest.mark.parametrize("kind", ["mask", "depth"])
def test_loss_descends(intra, kind):
    # loss after later epochs < loss at epoch 1, majority over three seeds
    wins = 0
    for seed in range(3):
        model = MaskNet(SMALL_MASK, seed, np.float32) if kind == "mask" else DepthNet(SMALL_DEPTH, seed, np.float32)
        losses = train_model(model, SMALL_SYNTH, intra, quick(epochs=8, seed=seed)).losses()
        wins += losses[-1] < losses[0]
    assert wins >= 2


# -- evaluation -----------------------------------------------------------------

def test_perfect_stub(intra):
    report, scores = evaluate(StubScorer("perfect"), SMALL_SYNTH, intra)
    assert report.acer == 0.0 and report.auc == 1.0
    assert len(scores) == 24


def test_constant_stub(intra):
    report, _ = evaluate(StubScorer("constant", 0.5), SMALL_SYNTH, intra)
    assert report.auc == 0.5


def test_trained_report_consistent(intra):
    model = MaskNet(SMALL_MASK, 1, np.float32)
    train_mask_model(model, SMALL_SYNTH, intra, quick(epochs=2, seed=1))
    report, _ = evaluate(model, SMALL_SYNTH, intra)
    assert report.acer == (report.apcer + report.bpcer) / 2
    assert 0 <= report.auc <= 1
    assert set(report.per_attack_apcer) == {"print", "replay", "partial_print", "partial_mask"}
    assert report.protocol == "intra"


def test_cross_type_fold_aggregation():
    synth = SynthConfig(seed=1, image_side=32, counts={"train": 8, "dev": 8, "test": 8})
    reports = []
    for held in ("print", "replay"):
        r, _ = evaluate(StubScorer("perfect"), synth, build_protocol(synth, "cross_type_loo", held))
        reports.append(r)
    agg = aggregate_folds(reports)
    assert set(agg["folds"]) == {"print", "replay"}
    assert agg["mean"]["acer"] == 0.0 and agg["std"]["acer"] == 0.0


def test_shape_mismatch_on_evaluate(intra):
    with pytest.raises(TensorError):
        evaluate(MaskNet(MaskNetConfig()), SMALL_SYNTH, intra)


# -- checkpoints ----------------------------------------------------------------

@pytest.mark.parametrize("factory", [
    lambda: MaskNet(SMALL_MASK, 2, np.float32),
    lambda: SppNet(SMALL_MASK, 2, np.float64),
    lambda: DepthNet(SMALL_DEPTH, 2, np.float32),
])
def test_checkpoint_round_trip(tmp_path, intra, factory):
    model = factory()
    save_checkpoint(model, tmp_path / "ck", seed=2, epoch=5)
    back = load_checkpoint(tmp_path / "ck")
    assert back.kind == model.kind and back.config == model.config
    assert list(back.params) == list(model.params)
    a = score_split(model, SMALL_SYNTH, intra.test).to_csv()
    b = score_split(back, SMALL_SYNTH, intra.test).to_csv()
    assert a == b
    m = read_manifest(tmp_path / "ck")
    assert (m["seed"], m["epoch"]) == (2, 5)
    assert {p["name"] for p in m["parameters"]} == set(model.params)


def test_stub_checkpoint(tmp_path):
    save_checkpoint(StubScorer("constant", 0.25), tmp_path)
    stub = load_checkpoint(tmp_path)
    assert stub.kind == "stub" and stub.value == 0.25


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)
    save_checkpoint(MaskNet(SMALL_MASK, 0), tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["config"]["feature_channels"] = 16
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


def test_binary_weight_zero_drops_score_term(intra):
    model = MaskNet(SMALL_MASK, 0, np.float32)
    log = train_mask_model(model, SMALL_SYNTH, intra, quick(binary_weight=0.0))
    comps = log.entries[0]["loss"]["components"]
    assert log.losses()[0] == pytest.approx(comps["pyramid"], rel=1e-6)
    with pytest.raises(ValueError):
        quick(binary_weight=-1.0)
