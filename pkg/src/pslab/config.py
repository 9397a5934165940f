"""Run configuration: one JSON document driving every CLI command."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

from .networks import ConfigError, DepthNetConfig, MaskNetConfig
from .optim import PRESETS, OptimConfig
from .synth import PROTOCOL_KINDS, SynthConfig, SynthError, config_from_dict

SECTIONS = ("synth", "model", "optim", "protocol", "metrics", "output_dir")
MODEL_KINDS = ("mask", "spp", "depth")
RESOLVED_NAME = "resolved_config.json"


class RunConfigError(ValueError):
    """Invalid run configuration; the message names the offending key."""


@dataclass
class ProtocolConfig:
    kind: str = "intra"
    # one tag, or a list of tags to run every fold (ablation only)
    held_out: str | list[str] | None = None

    def __post_init__(self):
        if self.kind not in PROTOCOL_KINDS:
            raise RunConfigError(f"protocol.kind: unknown protocol {self.kind!r}; expected one of {PROTOCOL_KINDS}")
        if self.kind == "intra" and self.held_out is not None:
            raise RunConfigError("protocol.held_out: intra protocol takes no held_out")
        if self.kind != "intra" and not self.held_out:
            raise RunConfigError(f"protocol.held_out: required for {self.kind}")
        if isinstance(self.held_out, tuple):
            self.held_out = list(self.held_out)

    def folds(self) -> list[str | None]:
        if isinstance(self.held_out, list):
            return list(self.held_out)
        return [self.held_out]


@dataclass
class MetricsConfig:
    # fixed operating threshold; None means dev-set EER (0.5 without dev)
    threshold: float | None = None
    digits: int = 1


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model_kind: str = "mask"
    model: MaskNetConfig | DepthNetConfig = field(default_factory=MaskNetConfig)
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(**PRESETS["desk_mask"].to_dict()))
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    output_dir: str = "pslab_out"

    def to_dict(self) -> dict:
        return {
            "synth": self.synth.to_dict(),
            "model": {"kind": self.model_kind, **_plain(asdict(self.model))},
            "optim": self.optim.to_dict(),
            "protocol": _plain(asdict(self.protocol)),
            "metrics": asdict(self.metrics),
            "output_dir": self.output_dir,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write_resolved(self, directory: str | os.PathLike) -> str:
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, RESOLVED_NAME)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
        return path

    def with_seed(self, seed: int) -> "RunConfig":
        """Override the training seed (initialisation and shuffling).

        The data seed stays put, so every seed sees the same protocol.
        """
        d = self.to_dict()
        d["optim"]["seed"] = int(seed)
        return parse_run_config(d)

    def with_scales(self, scales) -> "RunConfig":
        d = self.to_dict()
        d["model"]["scales"] = [int(s) for s in scales]
        return parse_run_config(d)


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _check_keys(section: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise RunConfigError(f"{section}: expected a JSON object")
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise RunConfigError(f"{section}.{unknown[0]}: unknown key (allowed: {', '.join(sorted(allowed))})")


def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def parse_run_config(doc: dict) -> RunConfig:
    """Validate a JSON document and build a :class:`RunConfig`.

    Missing sections take defaults; the optimizer defaults to the desk preset
    matching the model kind.  Unknown keys anywhere raise RunConfigError.
    """
    _check_keys("config", doc, SECTIONS)

    try:
        synth = config_from_dict(doc.get("synth", {}))
    except SynthError as exc:
        raise RunConfigError(f"synth.{exc}") from exc
    except TypeError as exc:
        raise RunConfigError(f"synth: {exc}") from exc

    model_d = dict(doc.get("model", {}))
    kind = model_d.pop("kind", "mask")
    if kind not in MODEL_KINDS:
        raise RunConfigError(f"model.kind: unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    model_cls = DepthNetConfig if kind == "depth" else MaskNetConfig
    _check_keys("model", model_d, _field_names(model_cls))
    if "input_side" not in model_d:
        model_d["input_side"] = synth.image_side
    try:
        model = model_cls(**model_d)
    except (ConfigError, TypeError, ValueError) as exc:
        raise RunConfigError(f"model: {exc}") from exc

    optim_d = dict(doc.get("optim", {}))
    preset = optim_d.pop("preset", "desk_depth" if kind == "depth" else "desk_mask")
    if preset not in PRESETS:
        raise RunConfigError(f"optim.preset: unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    _check_keys("optim", optim_d, _field_names(OptimConfig))
    try:
        optim = OptimConfig(**{**PRESETS[preset].to_dict(), **optim_d})
    except (TypeError, ValueError) as exc:
        raise RunConfigError(f"optim: {exc}") from exc

    prot_d = doc.get("protocol", {})
    _check_keys("protocol", prot_d, _field_names(ProtocolConfig))
    protocol = ProtocolConfig(**prot_d)
    valid = [d.name for d in synth.domains] if protocol.kind == "cross_domain" else list(synth.attack_types)
    for h in protocol.folds():
        if h is not None and h not in valid:
            raise RunConfigError(f"protocol.held_out: {h!r} is not one of {valid}")

    met_d = doc.get("metrics", {})
    _check_keys("metrics", met_d, _field_names(MetricsConfig))
    metrics = MetricsConfig(**met_d)
    if metrics.threshold is not None and not isinstance(metrics.threshold, (int, float)):
        raise RunConfigError("metrics.threshold: must be a number or null")

    out = doc.get("output_dir", "pslab_out")
    if not isinstance(out, str) or not out:
        raise RunConfigError("output_dir: must be a non-empty string")
    return RunConfig(synth, kind, model, optim, protocol, metrics, out)


def load_run_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return parse_run_config({})
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise RunConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_run_config(doc)
