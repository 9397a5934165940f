"""Training loops and protocol-driven evaluation."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .checkpoint import StubScorer
from .core.tensor import Tensor, TensorError
from .labels import decompose_depth_pyramid, decompose_mask_pyramid
from .losses import LossValue, bce, overall_mask_loss, pyramid_depth_loss, pyramid_mask_loss
from .metrics import EvalReport, ScoreSet, aggregate_reports, evaluate_scores
from .networks import DepthNet, MaskNet, SppNet, depth_pyramid_tensors, depth_score
from .optim import OptimConfig, OptimState, optimizer_step
from .synth import Batch, ProtocolSplit, SynthConfig, materialize

log = logging.getLogger(__name__)

# fixed input standardisation applied to [0, 1] images before any network
INPUT_MEAN = 0.5
INPUT_STD = 0.25


def preprocess(images: np.ndarray, dtype) -> Tensor:
    return Tensor(((images - INPUT_MEAN) / INPUT_STD).astype(dtype, copy=False))


class TrainError(ValueError):
    pass


@dataclass
class TrainLog:
    seed: int
    config_hash: str
    entries: list[dict] = field(default_factory=list)

    def append(self, epoch: int, loss: dict, seconds: float) -> None:
        self.entries.append({"epoch": epoch, "loss": loss, "seconds": seconds})

    def losses(self) -> list[float]:
        return [e["loss"]["total"] for e in self.entries]

    def to_jsonl(self, timing: bool = True) -> str:
        lines = []
        for e in self.entries:
            rec = {"seed": self.seed, "config_hash": self.config_hash, **e}
            if not timing:
                rec.pop("seconds")
            lines.append(json.dumps(rec, sort_keys=True))
        return "\n".join(lines) + "\n"


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Seeded per-epoch shuffle (numpy's Fisher-Yates permutation)."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, epoch])))
    return rng.permutation(n)


def _mean_loss(records: list[tuple[int, dict]]) -> dict:
    """Sample-weighted mean of per-batch ``LossValue.to_dict()`` records."""
    n = sum(w for w, _ in records)
    total = sum(w * d["total"] for w, d in records) / n
    per_scale: dict[str, float] = {}
    comps: dict[str, float] = {}
    for w, d in records:
        for k, v in d["per_scale"].items():
            per_scale[str(k)] = per_scale.get(str(k), 0.0) + w * v / n
        for k, v in d["components"].items():
            comps[k] = comps.get(k, 0.0) + w * v / n
    return {"total": total, "per_scale": per_scale, "components": comps}


def _zero_grads(params: dict) -> None:
    for p in params.values():
        p.grad = None


def _step(params: dict, loss: Tensor, state: OptimState, cfg: OptimConfig, lr: float) -> None:
    _zero_grads(params)
    loss.backward()
    grads = {k: (np.zeros_like(p.data) if p.grad is None else p.grad) for k, p in params.items()}
    optimizer_step(params, grads, state, cfg, lr)
    _zero_grads(params)


def _batch_loss(model, batch: Batch, label_pyramids, dtype, binary_weight: float = 1.0) -> LossValue:
    x = preprocess(batch.images, dtype)
    if model.kind == "mask":
        masks, score = model.forward(x)
        pyr = pyramid_mask_loss(masks, label_pyramids)
        return overall_mask_loss(pyr, score, batch.labels.astype(dtype), binary_weight)
    if model.kind == "spp":
        score = model.forward(x)
        b = bce(score, batch.labels.astype(dtype))
        return LossValue(b, {}, {"binary": b.item()})
    if model.kind == "depth":
        pred = depth_pyramid_tensors(model.forward(x), model.config.scales)
        return pyramid_depth_loss(pred, label_pyramids)
    raise TrainError(f"cannot train a {model.kind!r} model")


def _label_pyramids(model, batch: Batch):
    if model.kind == "mask":
        pyr = decompose_mask_pyramid(batch.masks, model.config.scales)
        return {s: m.astype(np.float64) for s, m in pyr.items()}
    if model.kind == "depth":
        return dict(decompose_depth_pyramid(batch.depths, model.config.scales).items())
    return None


def train_model(model, synth: SynthConfig, protocol: ProtocolSplit, cfg: OptimConfig,
                data: Batch | None = None, quiet: bool = True) -> TrainLog:
    """Minimise the model's supervision loss on the protocol's train split.

    Mask models use pyramid BCE + final-score BCE, SPP models the score BCE
    alone, depth models the pyramid depth loss.  Parameters are updated in
    place.
    """
    if not protocol.train:
        raise TrainError("protocol train split is empty")
    _check_shape(model, synth)
    if data is None:
        data = materialize(synth, protocol.train)
    dtype = model.dtype
    state = OptimState()
    tlog = TrainLog(cfg.seed, cfg.digest())
    n = len(data)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = epoch_order(n, cfg.seed, epoch)
        lr = cfg.lr_at(epoch)
        records = []
        for start in range(0, n, cfg.batch_size):
            batch = data.take(order[start:start + cfg.batch_size])
            lv = _batch_loss(model, batch, _label_pyramids(model, batch), dtype, cfg.binary_weight)
            if not np.isfinite(lv.value):
                raise TrainError(f"non-finite loss at epoch {epoch}")
            _step(model.params, lv.total, state, cfg, lr)
            # plain numbers only: holding lv would keep the whole graph alive
            records.append((len(batch), lv.to_dict()))
        summary = _mean_loss(records)
        tlog.append(epoch + 1, summary, time.perf_counter() - t0)
        if not quiet:
            log.info("epoch %d loss %.5f (%.1fs)", epoch + 1, summary["total"], time.perf_counter() - t0)
    return tlog


def train_mask_model(model: MaskNet, synth, protocol, cfg, **kw) -> TrainLog:
    if model.kind != "mask":
        raise TrainError("train_mask_model needs a mask model")
    return train_model(model, synth, protocol, cfg, **kw)


def train_depth_model(model: DepthNet, synth, protocol, cfg, **kw) -> TrainLog:
    if model.kind != "depth":
        raise TrainError("train_depth_model needs a depth model")
    return train_model(model, synth, protocol, cfg, **kw)


# -- scoring and evaluation ---------------------------------------------------

def _check_shape(model, synth: SynthConfig) -> None:
    side = getattr(getattr(model, "config", None), "input_side", None)
    if model.kind == "stub":
        side = model.input_side
    if side is not None and side != synth.image_side:
        raise TensorError(f"model expects {side}x{side} inputs, protocol samples are "
                          f"{synth.image_side}x{synth.image_side}")


def score_batch(model, batch: Batch, batch_size: int = 64) -> np.ndarray:
    """Liveness scores (higher = more live) for every sample in ``batch``."""
    if model.kind == "stub":
        if model.mode == "perfect":
            return batch.labels.astype(np.float64)
        return np.full(len(batch), float(model.value))
    out = []
    for start in range(0, len(batch), batch_size):
        x = preprocess(batch.images[start:start + batch_size], model.dtype)
        if model.kind == "depth":
            out.append(np.atleast_1d(depth_score(model.forward(x).data, model.config.scales)))
        else:
            out.append(np.atleast_1d(model.score(x).data.astype(np.float64)))
    return np.concatenate(out)


def score_split(model, synth: SynthConfig, ids: Sequence[str], fold: str = "") -> ScoreSet:
    _check_shape(model, synth)
    batch = materialize(synth, ids, dtype=np.float64)
    scores = score_batch(model, batch)
    return ScoreSet(scores, batch.labels, batch.attack_types, [fold] * len(batch))


def evaluate(model, synth: SynthConfig, protocol: ProtocolSplit) -> tuple[EvalReport, ScoreSet]:
    """Score dev and test; report every metric at the dev-set EER threshold.

    Without a dev split the operating threshold is 0.5.
    """
    _check_shape(model, synth)
    if not protocol.test:
        raise TrainError("protocol test split is empty")
    test = score_split(model, synth, protocol.test, "test")
    dev = score_split(model, synth, protocol.dev, "dev") if protocol.dev else None
    if dev is not None and (dev.bonafide.size == 0 or dev.attacks.size == 0):
        dev = None
    report = evaluate_scores(test, dev)
    report.protocol = protocol.kind
    report.held_out = protocol.held_out
    return report, test


def aggregate_folds(reports: Sequence[EvalReport]) -> dict:
    """Per-fold ACER/EER plus mean and std across folds, in percent."""
    agg = aggregate_reports(reports)
    return {
        "folds": {str(r.held_out): {"acer": 100 * r.acer, "eer": 100 * r.eer} for r in reports},
        "mean": {k: 100 * m for k, (m, _) in agg.items()},
        "std": {k: 100 * s for k, (_, s) in agg.items()},
    }


def build_model(kind: str, config, seed: int, dtype=np.float32):
    if kind == "mask":
        return MaskNet(config, seed, dtype)
    if kind == "spp":
        return SppNet(config, seed, dtype)
    if kind == "depth":
        return DepthNet(config, seed, dtype)
    if kind == "stub":
        return StubScorer()
    raise TrainError(f"unknown model kind {kind!r}")
