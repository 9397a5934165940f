"""Procedural live/spoof face-like samples and protocol splits.

Every sample is a pure function of ``(seed, domain, attack_type, index)``.
Random streams come from numpy's Philox-4x64 counter-based generator keyed
by ``SeedSequence([seed, crc32(domain), TYPE_CODES[attack_type], index])``,
so a sample never depends on which other samples were generated.

Renderings (all values in [0, 1], channels-first):

* live: an elliptical height field (peak 1) shaded by a random light,
  skin albedo, smooth correlated texture and fine grain.
* print: the same face drawn flat (no depth shading), washed out and
  multiplied by a rotated halftone dot screen.
* replay: a weakly shaded face with a moire stripe field and a blue cast.
* partial_print / partial_mask: a live face with an axis-aligned rectangle
  replaced by a print rendering or by a smooth, untextured mask material.
"""
from __future__ import annotations

import csv
import json
import os
import zlib
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .core.serialize import save_tensor
from .imageio import chw_to_ppm_array, to_uint8, write_pgm, write_ppm
from .labels import LIVE, SPOOF

DEPTH_SIDE = 32
LIVE_TYPE = "none"
FULL_ATTACKS = ("print", "replay")
PARTIAL_ATTACKS = ("partial_print", "partial_mask")
ATTACK_TYPES = FULL_ATTACKS + PARTIAL_ATTACKS
TYPE_CODES = {LIVE_TYPE: 0, "print": 1, "replay": 2, "partial_print": 3, "partial_mask": 4}
PROTOCOL_KINDS = ("intra", "cross_type_loo", "cross_domain")
SPLITS = ("train", "dev", "test")


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class DomainPreset:
    name: str
    gain: float = 1.0
    cast: tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise: float = 0.01


DEFAULT_DOMAINS = (
    DomainPreset("studio", 1.00, (0.00, 0.00, 0.00), 0.010),
    DomainPreset("dim", 0.70, (0.02, 0.00, -0.02), 0.030),
    DomainPreset("cool", 1.15, (-0.06, 0.00, 0.09), 0.020),
    DomainPreset("warm", 0.95, (0.12, 0.05, -0.07), 0.045),
)


@dataclass
class SynthConfig:
    seed: int = 0
    image_side: int = 64
    domains: tuple[DomainPreset, ...] = DEFAULT_DOMAINS
    attack_types: tuple[str, ...] = ATTACK_TYPES
    counts: dict[str, int] = field(default_factory=lambda: {"train": 2000, "dev": 400, "test": 500})
    live_fraction: float = 0.5

    def __post_init__(self):
        self.domains = tuple(d if isinstance(d, DomainPreset) else DomainPreset(**_domain_kwargs(d))
                             for d in self.domains)
        self.attack_types = tuple(self.attack_types)
        for t in self.attack_types:
            if t not in ATTACK_TYPES:
                raise SynthError(f"attack_types: unknown attack type {t!r}; expected one of {ATTACK_TYPES}")
        if not self.attack_types:
            raise SynthError("attack_types: at least one attack type must be enabled")
        if not self.domains:
            raise SynthError("domains: at least one domain is required")
        names = [d.name for d in self.domains]
        if len(set(names)) != len(names):
            raise SynthError(f"domains: duplicate domain names {names}")
        if self.image_side < 32 or self.image_side % DEPTH_SIDE:
            raise SynthError(f"image_side: must be a positive multiple of {DEPTH_SIDE}, got {self.image_side}")
        if not 0.0 < self.live_fraction < 1.0:
            raise SynthError("live_fraction: must lie in (0, 1)")
        unknown = set(self.counts) - set(SPLITS)
        if unknown:
            raise SynthError(f"counts: unknown split names {sorted(unknown)}")
        self.counts = {k: int(self.counts.get(k, 0)) for k in SPLITS}
        if any(v < 0 for v in self.counts.values()):
            raise SynthError("counts: split counts must be non-negative")
        if not 0 <= self.seed < 2 ** 64:
            raise SynthError("seed: must be an unsigned 64-bit integer")

    def domain(self, name: str) -> DomainPreset:
        for d in self.domains:
            if d.name == name:
                return d
        raise SynthError(f"domain {name!r} not in config ({[d.name for d in self.domains]})")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["domains"] = [asdict(x) for x in self.domains]
        d["attack_types"] = list(self.attack_types)
        return d

    def key(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _domain_kwargs(d: dict) -> dict:
    d = dict(d)
    if "cast" in d:
        d["cast"] = tuple(float(c) for c in d["cast"])
    return d


@dataclass
class LabeledSample:
    id: str
    image: np.ndarray          # 3 x S x S, float64 in [0, 1]
    scalar_label: int          # 1 live, 0 spoof
    mask: np.ndarray           # S x S uint8, 1 live, 0 attack
    depth: np.ndarray          # 32 x 32 float64
    attack_type: str
    domain: str
    patch: tuple[int, int, int, int] | None = None  # (top, left, height, width)


def sample_id(domain: str, attack_type: str, index: int) -> str:
    return f"{domain}/{attack_type}/{index}"


def parse_sample_id(sid: str) -> tuple[str, str, int]:
    try:
        domain, attack_type, index = sid.rsplit("/", 2)
        return domain, attack_type, int(index)
    except ValueError as exc:
        raise SynthError(f"malformed sample id {sid!r}") from exc


def sample_rng(seed: int, domain: str, attack_type: str, index: int) -> np.random.Generator:
    ss = np.random.SeedSequence([seed, zlib.crc32(domain.encode("utf-8")), TYPE_CODES[attack_type], index])
    return np.random.Generator(np.random.Philox(ss))


# -- rendering ---------------------------------------------------------------

def _grid(side: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(side) + 0.5) / side * 2.0 - 1.0
    return np.meshgrid(c, c, indexing="ij")  # (y, x)


@dataclass
class _Face:
    cy: float
    cx: float
    ry: float
    rx: float
    light: np.ndarray
    skin: np.ndarray
    background: np.ndarray


def _draw_face(rng: np.random.Generator) -> _Face:
    light = np.array([rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), 1.0])
    return _Face(
        cy=rng.uniform(-0.1, 0.1), cx=rng.uniform(-0.1, 0.1),
        ry=rng.uniform(0.70, 0.85), rx=rng.uniform(0.55, 0.70),
        light=light / np.linalg.norm(light),
        skin=np.array([0.86, 0.66, 0.55]) * rng.uniform(0.8, 1.1) + rng.uniform(-0.04, 0.04, 3),
        background=rng.uniform(0.15, 0.45, 3),
    )


def _height(face: _Face, side: int) -> np.ndarray:
    y, x = _grid(side)
    r2 = ((y - face.cy) / face.ry) ** 2 + ((x - face.cx) / face.rx) ** 2
    h = np.clip(1.0 - r2, 0.0, None) ** 0.75
    return h / h.max()


def _shading(height: np.ndarray, light: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(height * 4.0)
    n = np.stack([-gx, -gy, np.ones_like(height)])
    n /= np.linalg.norm(n, axis=0, keepdims=True)
    lam = np.clip(np.tensordot(light, n, axes=1), 0.0, 1.0)
    return 0.45 + 0.55 * lam


def _smooth_noise(rng: np.random.Generator, side: int, sigma: float, amp: float) -> np.ndarray:
    n = gaussian_filter(rng.standard_normal((side, side)), sigma, mode="wrap")
    return amp * n / (n.std() + 1e-12)


def _render_live(rng, face: _Face, side: int) -> np.ndarray:
    h = _height(face, side)
    alpha = np.clip(h * 6.0, 0.0, 1.0)
    albedo = face.skin[:, None, None] * (1.0 + _smooth_noise(rng, side, 3.0, 0.06))
    albedo = albedo + _smooth_noise(rng, side, 0.7, 0.025)  # skin grain
    shade = _shading(h, face.light)
    fg = albedo * shade
    bg = face.background[:, None, None] * (1.0 + _smooth_noise(rng, side, 6.0, 0.05))
    return alpha * fg + (1.0 - alpha) * bg


def _render_flat(rng, face: _Face, side: int) -> np.ndarray:
    """Face drawn on a flat medium: silhouette and albedo, no relief shading."""
    h = _height(face, side)
    alpha = np.clip(h * 6.0, 0.0, 1.0)
    y, x = _grid(side)
    tilt = 0.85 + 0.08 * (face.light[0] * y + face.light[1] * x)
    albedo = face.skin[:, None, None] * (1.0 + _smooth_noise(rng, side, 3.0, 0.04))
    bg = face.background[:, None, None] * (1.0 + _smooth_noise(rng, side, 6.0, 0.05))
    return (alpha * albedo + (1.0 - alpha) * bg) * tilt


def _halftone(rng, side: int) -> np.ndarray:
    period = rng.uniform(3.0, 4.5)
    ang = rng.uniform(0.0, np.pi / 2)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    u = xx * np.cos(ang) + yy * np.sin(ang)
    v = -xx * np.sin(ang) + yy * np.cos(ang)
    dots = np.cos(2 * np.pi * u / period) * np.cos(2 * np.pi * v / period)
    return 0.86 + 0.14 * dots


def _render_print(rng, face: _Face, side: int) -> np.ndarray:
    flat = _render_flat(rng, face, side)
    washed = 0.25 + 0.7 * flat  # paper reflectance compresses contrast
    return washed * _halftone(rng, side)[None]


def _render_replay(rng, face: _Face, side: int) -> np.ndarray:
    h = _height(face, side)
    base = 0.6 * _render_flat(rng, face, side) + 0.4 * _render_live(rng, face, side) * (0.5 + 0.5 * h.mean())
    freq = rng.uniform(0.15, 0.3)
    ang = rng.uniform(0.0, np.pi)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    stripes = 1.0 + 0.12 * np.sin(2 * np.pi * freq * (xx * np.cos(ang) + yy * np.sin(ang)) + rng.uniform(0, 2 * np.pi))
    cast = np.array([-0.03, 0.0, 0.07])[:, None, None]
    return base * stripes[None] + cast


def _render_mask_material(rng, face: _Face, side: int) -> np.ndarray:
    h = _height(face, side)
    material = np.array([0.78, 0.74, 0.70]) * rng.uniform(0.85, 1.05)
    shade = _shading(h, face.light)
    spec = np.clip(shade - 0.9, 0.0, None) * 3.0  # glossy highlight
    return material[:, None, None] * shade + spec


def _apply_domain(rng, img: np.ndarray, domain: DomainPreset) -> np.ndarray:
    out = domain.gain * img + np.asarray(domain.cast)[:, None, None]
    out = out + domain.noise * rng.standard_normal(img.shape)
    return np.clip(out, 0.0, 1.0)


def _draw_patch(rng, side: int) -> tuple[int, int, int, int]:
    # rectangle sides in [S/4, S/2], snapped to the depth-grid block so the
    # 32x32 depth label can be zeroed exactly on the same region
    block = side // DEPTH_SIDE
    lo, hi = side // 4 // block, side // 2 // block
    ph = int(rng.integers(lo, hi + 1)) * block
    pw = int(rng.integers(lo, hi + 1)) * block
    top = int(rng.integers(0, (side - ph) // block + 1)) * block
    left = int(rng.integers(0, (side - pw) // block + 1)) * block
    return top, left, ph, pw


def generate_sample(config: SynthConfig, domain: str, attack_type: str, index: int) -> LabeledSample:
    preset = config.domain(domain)
    if attack_type != LIVE_TYPE and attack_type not in config.attack_types:
        raise SynthError(f"attack type {attack_type!r} is not enabled in this config")
    if index < 0:
        raise SynthError("sample index must be non-negative")
    side = config.image_side
    rng = sample_rng(config.seed, domain, attack_type, index)
    face = _draw_face(rng)
    patch = None

    if attack_type == LIVE_TYPE:
        img = _render_live(rng, face, side)
        mask = np.ones((side, side), dtype=np.uint8)
        depth = _height(face, DEPTH_SIDE)
        label = LIVE
    elif attack_type in FULL_ATTACKS:
        render = _render_print if attack_type == "print" else _render_replay
        img = render(rng, face, side)
        mask = np.zeros((side, side), dtype=np.uint8)
        depth = np.zeros((DEPTH_SIDE, DEPTH_SIDE))
        label = SPOOF
    else:
        img = _render_live(rng, face, side)
        patch = _draw_patch(rng, side)
        top, left, ph, pw = patch
        if attack_type == "partial_print":
            spoof = _render_print(rng, face, side)
        else:
            spoof = _render_mask_material(rng, face, side)
        img[:, top:top + ph, left:left + pw] = spoof[:, top:top + ph, left:left + pw]
        mask = np.ones((side, side), dtype=np.uint8)
        mask[top:top + ph, left:left + pw] = 0
        depth = _height(face, DEPTH_SIDE)
        b = side // DEPTH_SIDE
        depth[top // b:(top + ph) // b, left // b:(left + pw) // b] = 0.0
        label = SPOOF

    img = _apply_domain(rng, img, preset)
    return LabeledSample(sample_id(domain, attack_type, index), img, label, mask, depth,
                         attack_type, domain, patch)


def sample_from_id(config: SynthConfig, sid: str) -> LabeledSample:
    domain, attack_type, index = parse_sample_id(sid)
    return generate_sample(config, domain, attack_type, index)


# -- protocols ---------------------------------------------------------------

@dataclass
class ProtocolSplit:
    kind: str
    held_out: str | None
    train: list[str]
    dev: list[str]
    test: list[str]

    def split(self, name: str) -> list[str]:
        if name not in SPLITS:
            raise SynthError(f"unknown split {name!r}")
        return getattr(self, name)

    def to_dict(self) -> dict:
        return asdict(self)


def build_protocol(config: SynthConfig, kind: str, held_out: str | None = None) -> ProtocolSplit:
    """Disjoint train/dev/test id lists.

    intra: every domain and attack type in every split.
    cross_type_loo: the held-out attack type appears only in test.
    cross_domain: the held-out domain is the only domain in test.
    """
    domains = [d.name for d in config.domains]
    types = list(config.attack_types)
    if kind not in PROTOCOL_KINDS:
        raise SynthError(f"unknown protocol kind {kind!r}; expected one of {PROTOCOL_KINDS}")
    if kind == "intra":
        if held_out is not None:
            raise SynthError("intra protocol takes no held_out")
        allowed = {s: (domains, types) for s in SPLITS}
    elif kind == "cross_type_loo":
        if held_out not in types:
            raise SynthError(f"held_out attack type {held_out!r} not enabled in config ({types})")
        if len(types) < 2:
            raise SynthError("leave-one-type-out needs at least two attack types")
        rest = [t for t in types if t != held_out]
        allowed = {"train": (domains, rest), "dev": (domains, rest), "test": (domains, [held_out])}
    else:
        if held_out not in domains:
            raise SynthError(f"held_out domain {held_out!r} not in config ({domains})")
        if len(domains) < 2:
            raise SynthError("cross-domain protocol needs at least two domains")
        rest = [d for d in domains if d != held_out]
        allowed = {"train": (rest, types), "dev": (rest, types), "test": ([held_out], types)}

    counters: dict[tuple[str, str], int] = {}

    def take(domain: str, attack_type: str) -> str:
        k = (domain, attack_type)
        i = counters.get(k, 0)
        counters[k] = i + 1
        return sample_id(domain, attack_type, i)

    out = {}
    for split in SPLITS:
        n = config.counts[split]
        doms, typs = allowed[split]
        n_live = int(round(n * config.live_fraction))
        ids = [take(doms[i % len(doms)], LIVE_TYPE) for i in range(n_live)]
        for j in range(n - n_live):
            ids.append(take(doms[(j // len(typs)) % len(doms)], typs[j % len(typs)]))
        out[split] = ids
    return ProtocolSplit(kind, held_out, out["train"], out["dev"], out["test"])


# -- materialisation and export ---------------------------------------------

@dataclass
class Batch:
    ids: list[str]
    images: np.ndarray   # N x 3 x S x S
    labels: np.ndarray   # N
    masks: np.ndarray    # N x S x S
    depths: np.ndarray   # N x 32 x 32
    attack_types: list[str]
    domains: list[str]

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, idx) -> "Batch":
        idx = np.asarray(idx)
        return Batch([self.ids[i] for i in idx], self.images[idx], self.labels[idx], self.masks[idx],
                     self.depths[idx], [self.attack_types[i] for i in idx], [self.domains[i] for i in idx])


def materialize(config: SynthConfig, ids: Sequence[str], dtype=np.float64) -> Batch:
    arrays = _materialize_cached(config.key(), tuple(ids))
    images, labels, masks, depths = arrays
    types = [parse_sample_id(i)[1] for i in ids]
    doms = [parse_sample_id(i)[0] for i in ids]
    return Batch(list(ids), images.astype(dtype, copy=True), labels.copy(), masks.copy(), depths.astype(dtype),
                 types, doms)


@lru_cache(maxsize=4)
def _materialize_cached(config_key: str, ids: tuple[str, ...]):
    cfg = config_from_dict(json.loads(config_key))
    samples = [sample_from_id(cfg, i) for i in ids]
    if not samples:
        raise SynthError("cannot materialize an empty split")
    return (np.stack([s.image for s in samples]), np.array([s.scalar_label for s in samples]),
            np.stack([s.mask for s in samples]), np.stack([s.depth for s in samples]))


def config_from_dict(d: dict) -> SynthConfig:
    d = dict(d)
    known = {"seed", "image_side", "domains", "attack_types", "counts", "live_fraction"}
    unknown = set(d) - known
    if unknown:
        raise SynthError(f"{sorted(unknown)[0]}: unknown synth config key")
    if "domains" in d:
        doms = []
        for x in d["domains"]:
            if not isinstance(x, dict):
                raise SynthError("each domain must be an object")
            bad = set(x) - {"name", "gain", "cast", "noise"}
            if bad:
                raise SynthError(f"domains.{sorted(bad)[0]}: unknown domain key")
            doms.append(DomainPreset(**_domain_kwargs(x)))
        d["domains"] = tuple(doms)
    if "attack_types" in d:
        d["attack_types"] = tuple(d["attack_types"])
    return SynthConfig(**d)


def export_dataset(config: SynthConfig, protocol: ProtocolSplit, out_dir: str | os.PathLike) -> str:
    """Write one directory per split plus ``index.csv``; returns the index path."""
    os.makedirs(out_dir, exist_ok=True)
    index_path = os.path.join(out_dir, "index.csv")
    rows = []
    for split in SPLITS:
        ids = protocol.split(split)
        if not ids:
            continue
        split_dir = os.path.join(out_dir, split)
        os.makedirs(split_dir, exist_ok=True)
        for sid in ids:
            s = sample_from_id(config, sid)
            stem = sid.replace("/", "_")
            write_ppm(os.path.join(split_dir, stem + ".ppm"), chw_to_ppm_array(s.image))
            write_pgm(os.path.join(split_dir, stem + "_mask.pgm"), to_uint8(s.mask.astype(np.float64)))
            save_tensor(os.path.join(split_dir, stem + "_depth.pslt"), s.depth)
            rows.append((sid, "live" if s.scalar_label == LIVE else "spoof", s.attack_type, s.domain, split))
    with open(index_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("id", "label", "attack_type", "domain", "fold"))
        w.writerows(rows)
    return index_path
