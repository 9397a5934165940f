"""Presentation attack detection metrics.

Scores follow one polarity: higher means more bonafide.  A sample is
classified bonafide when ``score >= threshold``.  Rates are fractions;
reports convert them to percentages.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

BONAFIDE = "bonafide"
ATTACK = "attack"
CSV_HEADER = ("score", "label", "attack_type", "fold")


class MetricError(ValueError):
    pass


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray  # 1 = bonafide, 0 = attack
    attack_types: list[str] = field(default_factory=list)
    folds: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        n = self.scores.size
        if self.labels.size != n:
            raise MetricError("scores and labels differ in length")
        if not np.all(np.isfinite(self.scores)):
            raise MetricError("scores must be finite")
        if not np.isin(self.labels, (0, 1)).all():
            raise MetricError("labels must be 1 (bonafide) or 0 (attack)")
        if not self.attack_types:
            self.attack_types = ["none" if y else "attack" for y in self.labels]
        if not self.folds:
            self.folds = [""] * n
        if len(self.attack_types) != n or len(self.folds) != n:
            raise MetricError("attack_types / folds must match the number of scores")
        self.attack_types = [str(t) for t in self.attack_types]
        self.folds = [str(f) for f in self.folds]

    def __len__(self) -> int:
        return self.scores.size

    @property
    def bonafide(self) -> np.ndarray:
        return self.scores[self.labels == 1]

    @property
    def attacks(self) -> np.ndarray:
        return self.scores[self.labels == 0]

    def subset(self, mask) -> "ScoreSet":
        mask = np.asarray(mask, dtype=bool)
        idx = np.flatnonzero(mask)
        return ScoreSet(self.scores[idx], self.labels[idx],
                        [self.attack_types[i] for i in idx], [self.folds[i] for i in idx])

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for s, y, t, f in zip(self.scores, self.labels, self.attack_types, self.folds):
            writer.writerow((repr(float(s)), BONAFIDE if y else ATTACK, t, f))
        return out.getvalue()

    def save_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "ScoreSet":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if tuple(header or ()) != CSV_HEADER:
            raise MetricError(f"bad ScoreSet header {header!r}, expected {','.join(CSV_HEADER)}")
        scores, labels, types, folds = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise MetricError(f"line {lineno}: expected 4 fields, got {len(row)}")
            try:
                scores.append(float(row[0]))
            except ValueError as exc:
                raise MetricError(f"line {lineno}: bad score {row[0]!r}") from exc
            if row[1] not in (BONAFIDE, ATTACK):
                raise MetricError(f"line {lineno}: bad label {row[1]!r}")
            labels.append(1 if row[1] == BONAFIDE else 0)
            types.append(row[2])
            folds.append(row[3])
        return cls(np.array(scores), np.array(labels, dtype=np.int64), types, folds)

    @classmethod
    def load_csv(cls, path: str | os.PathLike) -> "ScoreSet":
        with open(path, encoding="utf-8") as fh:
            return cls.from_csv(fh.read())


def _need_two_classes(scores: ScoreSet) -> None:
    if scores.bonafide.size == 0 or scores.attacks.size == 0:
        raise MetricError("both bonafide and attack samples are required")


def per_attack_apcer(scores: ScoreSet, threshold: float) -> dict[str, float]:
    attack = scores.labels == 0
    if not attack.any():
        raise MetricError("APCER needs at least one attack sample")
    types = np.array(scores.attack_types, dtype=object)
    out = {}
    for t in sorted(set(types[attack])):
        sel = attack & (types == t)
        out[t] = float(np.mean(scores.scores[sel] >= threshold))
    return out


def apcer(scores: ScoreSet, threshold: float) -> float:
    """Worst-case attack acceptance rate over attack types."""
    return max(per_attack_apcer(scores, threshold).values())


def bpcer(scores: ScoreSet, threshold: float) -> float:
    b = scores.bonafide
    if b.size == 0:
        raise MetricError("BPCER needs at least one bonafide sample")
    return float(np.mean(b < threshold))


def acer(apcer_value: float, bpcer_value: float) -> float:
    return (apcer_value + bpcer_value) / 2.0


def far_frr(scores: ScoreSet, threshold: float) -> tuple[float, float]:
    _need_two_classes(scores)
    return float(np.mean(scores.attacks >= threshold)), float(np.mean(scores.bonafide < threshold))


def roc_auc(scores: ScoreSet) -> float:
    """Probability that a bonafide sample outscores an attack; ties count half."""
    _need_two_classes(scores)
    ranks = rankdata(scores.scores)  # average ranks for ties
    n_pos = int(scores.labels.sum())
    n_neg = scores.labels.size - n_pos
    u = ranks[scores.labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def candidate_thresholds(scores: ScoreSet) -> np.ndarray:
    u = np.unique(scores.scores)
    return np.concatenate(([-np.inf], (u[:-1] + u[1:]) / 2.0, [np.inf]))


def eer(scores: ScoreSet) -> tuple[float, float]:
    """Equal error rate and its threshold.

    Sweeps -inf, the midpoints between consecutive unique scores, and +inf;
    picks the threshold minimising |FAR - FRR| (lowest threshold on ties) and
    reports (FAR + FRR) / 2 there.
    """
    _need_two_classes(scores)
    t = candidate_thresholds(scores)
    bona = np.sort(scores.bonafide)
    att = np.sort(scores.attacks)
    frr = np.searchsorted(bona, t, side="left") / bona.size
    far = 1.0 - np.searchsorted(att, t, side="left") / att.size
    gap = np.abs(far - frr)
    i = int(np.argmin(gap))  # first occurrence = lowest threshold
    return float((far[i] + frr[i]) / 2.0), float(t[i])


def hter(dev: ScoreSet, test: ScoreSet) -> float:
    _, threshold = eer(dev)
    far, frr = far_frr(test, threshold)
    return (far + frr) / 2.0


def round_percent(value: float, digits: int = 1) -> float:
    """Round half-up in decimal, after discarding binary float noise."""
    d = Decimal(f"{value:.12g}")
    return float(d.quantize(Decimal(1).scaleb(-digits), rounding=ROUND_HALF_UP))


@dataclass
class EvalReport:
    threshold: float
    apcer: float
    bpcer: float
    acer: float
    eer: float
    eer_threshold: float
    hter: float
    auc: float
    per_attack_apcer: dict[str, float] = field(default_factory=dict)
    protocol: str = ""
    held_out: str | None = None
    n_test: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        pct = lambda v: 100.0 * v  # noqa: E731
        d = {
            "protocol": self.protocol,
            "held_out": self.held_out,
            "n_test": self.n_test,
            "threshold": self.threshold,
            "eer_threshold": self.eer_threshold,
            "units": "percent",
            "apcer": pct(self.apcer),
            "bpcer": pct(self.bpcer),
            "acer": pct(self.acer),
            "eer": pct(self.eer),
            "hter": pct(self.hter),
            "auc": pct(self.auc),
            "per_attack_apcer": {k: pct(v) for k, v in sorted(self.per_attack_apcer.items())},
        }
        if self.extra:
            d["extra"] = self.extra
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        frac = lambda v: v / 100.0  # noqa: E731
        return cls(
            threshold=_num(d["threshold"]), apcer=frac(d["apcer"]), bpcer=frac(d["bpcer"]),
            acer=frac(d["acer"]), eer=frac(d["eer"]), eer_threshold=_num(d["eer_threshold"]),
            hter=frac(d["hter"]), auc=frac(d["auc"]),
            per_attack_apcer={k: frac(v) for k, v in d.get("per_attack_apcer", {}).items()},
            protocol=d.get("protocol", ""), held_out=d.get("held_out"), n_test=d.get("n_test", 0),
            extra=d.get("extra", {}),
        )


def _num(v):
    # thresholds may be +-inf, which JSON cannot carry
    if isinstance(v, str):
        return float(v)
    return v


def evaluate_scores(test: ScoreSet, dev: ScoreSet | None = None, threshold: float | None = None) -> EvalReport:
    """Full metric set on ``test`` at the operating threshold.

    The threshold is ``threshold`` when given, else the dev-set EER threshold
    when ``dev`` is given, else 0.5.
    """
    if threshold is None:
        threshold = eer(dev)[1] if dev is not None else 0.5
    a = apcer(test, threshold)
    b = bpcer(test, threshold)
    e, et = eer(test)
    far, frr = far_frr(test, threshold)
    return EvalReport(
        threshold=_finite(threshold), apcer=a, bpcer=b, acer=acer(a, b), eer=e,
        eer_threshold=_finite(et), hter=(far + frr) / 2.0, auc=roc_auc(test),
        per_attack_apcer=per_attack_apcer(test, threshold), n_test=len(test),
    )


def _finite(t: float) -> float:
    # JSON has no infinity; clamp the sweep ends to the float range
    if math.isinf(t):
        return math.copysign(np.finfo(np.float64).max, t)
    return float(t)


def mean_std(values: Iterable[float]) -> tuple[float, float]:
    """Mean and population standard deviation (0 for a single value)."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise MetricError("no values to aggregate")
    return float(v.mean()), float(v.std())


def aggregate_reports(reports: Sequence[EvalReport], keys: Sequence[str] = ("apcer", "bpcer", "acer", "eer", "hter", "auc")) -> dict[str, tuple[float, float]]:
    """Mean and std across folds (e.g. one report per held-out attack type)."""
    return {k: mean_std(getattr(r, k) for r in reports) for k in keys}
