"""Model checkpoints: ``manifest.json`` plus one tensor file per parameter."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .core.serialize import FormatError, load_tensor, save_tensor
from .core.tensor import Tensor
from .networks import DepthNet, DepthNetConfig, MaskNet, MaskNetConfig, SppNet

MANIFEST = "manifest.json"
MODEL_KINDS = ("mask", "spp", "depth")
STUB_MODES = ("perfect", "constant")


class CheckpointError(ValueError):
    pass


@dataclass
class StubScorer:
    """Test scorer: ``perfect`` returns the true label, ``constant`` a fixed value."""

    mode: str = "perfect"
    value: float = 0.5
    input_side: int | None = None
    kind = "stub"

    def __post_init__(self):
        if self.mode not in STUB_MODES:
            raise CheckpointError(f"unknown stub mode {self.mode!r}")


def save_checkpoint(model, path: str | os.PathLike, seed: int = 0, epoch: int = 0, extra: dict | None = None) -> None:
    os.makedirs(path, exist_ok=True)
    manifest = {"kind": model.kind, "seed": int(seed), "epoch": int(epoch)}
    if model.kind == "stub":
        manifest.update(mode=model.mode, value=model.value, input_side=model.input_side)
    else:
        manifest["config"] = asdict(model.config)
        manifest["dtype"] = np.dtype(model.dtype).name
        entries = []
        for name, p in model.params.items():
            fname = name + ".pslt"
            save_tensor(os.path.join(path, fname), p.data)
            entries.append({"name": name, "shape": list(p.shape), "file": fname})
        manifest["parameters"] = entries
    if extra:
        manifest["extra"] = extra
    with open(os.path.join(path, MANIFEST), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path: str | os.PathLike) -> dict:
    mpath = os.path.join(path, MANIFEST)
    if not os.path.isfile(mpath):
        raise CheckpointError(f"{path}: no {MANIFEST}")
    with open(mpath, encoding="utf-8") as fh:
        return json.load(fh)


def load_checkpoint(path: str | os.PathLike):
    m = read_manifest(path)
    kind = m.get("kind")
    if kind == "stub":
        return StubScorer(m.get("mode", "perfect"), m.get("value", 0.5), m.get("input_side"))
    if kind not in MODEL_KINDS:
        raise CheckpointError(f"unknown model kind {kind!r}")
    cfg_d = m["config"]
    dtype = np.dtype(m.get("dtype", "float64")).type
    params = {}
    for e in m["parameters"]:
        try:
            arr = load_tensor(os.path.join(path, e["file"]))
        except (FormatError, FileNotFoundError) as exc:
            raise CheckpointError(f"{path}: parameter {e['name']}: {exc}") from exc
        if list(arr.shape) != list(e["shape"]):
            raise CheckpointError(f"{e['name']}: stored shape {arr.shape} != manifest {e['shape']}")
        params[e["name"]] = Tensor(arr.astype(dtype, copy=False), requires_grad=True, name=e["name"])
    if kind == "depth":
        model = DepthNet(DepthNetConfig(**cfg_d), m.get("seed", 0), dtype, params)
    else:
        cls = MaskNet if kind == "mask" else SppNet
        model = cls(MaskNetConfig(**cfg_d), m.get("seed", 0), dtype, params)
    expected = _expected_shapes(model)
    got = {k: v.shape for k, v in params.items()}
    if expected != got:
        raise CheckpointError(f"{path}: parameters do not match the {kind} config")
    return model


def _expected_shapes(model) -> dict:
    fresh = type(model)(model.config, 0, np.float64)
    return {k: v.shape for k, v in fresh.params.items()}
