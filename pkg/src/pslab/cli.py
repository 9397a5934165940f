"""Command-line entry point: ``pslab synth|train|eval|ablate|visualize``.

Exit codes: 0 success, 2 invalid configuration, 3 shape or checkpoint
incompatibility, 4 command used with the wrong kind of model, 1 anything else.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, RunConfigError, load_run_config, parse_run_config
from .core.tensor import TensorError
from .imageio import chw_to_ppm_array, to_uint8, write_pgm, write_ppm
from .labels import LabelError, decompose_mask_pyramid
from .metrics import MetricError, evaluate_scores, mean_std
from .networks import ConfigError
from .synth import SynthError, build_protocol, export_dataset, materialize
from .train import TrainError, build_model, evaluate, preprocess, score_split, train_model

log = logging.getLogger("pslab")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_SHAPE, EXIT_MODE = 0, 1, 2, 3, 4
LABEL_KIND = {"mask": "binary_mask", "depth": "depth", "spp": "none"}


class ModeError(RuntimeError):
    """A command was pointed at a model kind it cannot handle."""


# -- helpers --------------------------------------------------------------------

def parse_scales(text: str) -> tuple[int, ...]:
    try:
        scales = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError as exc:
        raise RunConfigError(f"--scales: expected comma-separated integers, got {text!r}") from exc
    if not scales:
        raise RunConfigError("--scales: empty scale list")
    return scales


def _resolve(args) -> RunConfig:
    cfg = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    scales = getattr(args, "scales", None)
    if isinstance(scales, str):
        cfg = cfg.with_scales(parse_scales(scales))
    return cfg


def _out_dir(args, cfg: RunConfig) -> str:
    out = args.out or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    return out


def _single_fold(cfg: RunConfig, command: str):
    folds = cfg.protocol.folds()
    if len(folds) != 1:
        raise RunConfigError(f"protocol.held_out: {command} takes a single held-out tag; "
                             f"use 'ablate' to run several folds")
    return folds[0]


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- commands -------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args, cfg)
    protocol = build_protocol(cfg.synth, cfg.protocol.kind, _single_fold(cfg, "synth"))
    index = export_dataset(cfg.synth, protocol, out)
    cfg.write_resolved(out)
    log.info("wrote %s", index)
    return EXIT_OK


def train_run(cfg: RunConfig, held_out, quiet: bool = True):
    protocol = build_protocol(cfg.synth, cfg.protocol.kind, held_out)
    model = build_model(cfg.model_kind, cfg.model, cfg.optim.seed, np.float32)
    tlog = train_model(model, cfg.synth, protocol, cfg.optim, quiet=quiet)
    return model, protocol, tlog


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args, cfg)
    cfg.write_resolved(out)
    model, _, tlog = train_run(cfg, _single_fold(cfg, "train"), quiet=args.quiet)
    ckpt = args.checkpoint or os.path.join(out, "checkpoint")
    save_checkpoint(model, ckpt, seed=cfg.optim.seed, epoch=cfg.optim.epochs)
    with open(os.path.join(out, "train_log.jsonl"), "w", encoding="utf-8") as fh:
        fh.write(tlog.to_jsonl(timing=False))
    _write_json(os.path.join(out, "timing.json"), [e["seconds"] for e in tlog.entries])
    log.info("checkpoint written to %s", ckpt)
    return EXIT_OK


def _dump_depth(model, cfg: RunConfig, ids, out: str) -> None:
    os.makedirs(out, exist_ok=True)
    batch = materialize(cfg.synth, ids)
    for i, sid in enumerate(batch.ids):
        d = model.forward(preprocess(batch.images[i], model.dtype)).data
        write_pgm(os.path.join(out, sid.replace("/", "_") + "_depth.pgm"), to_uint8(d))


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    if not args.checkpoint:
        raise RunConfigError("--checkpoint: required for eval")
    out = _out_dir(args, cfg)
    cfg.write_resolved(out)
    model = load_checkpoint(args.checkpoint)
    protocol = build_protocol(cfg.synth, cfg.protocol.kind, _single_fold(cfg, "eval"))
    if cfg.metrics.threshold is not None:
        test = score_split(model, cfg.synth, protocol.test, "test")
        report = evaluate_scores(test, threshold=float(cfg.metrics.threshold))
        report.protocol, report.held_out = protocol.kind, protocol.held_out
    else:
        report, test = evaluate(model, cfg.synth, protocol)
    test.save_csv(os.path.join(out, "scores.csv"))
    with open(os.path.join(out, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    if args.dump_depth:
        if model.kind != "depth":
            raise ModeError("--dump-depth needs a depth checkpoint")
        _dump_depth(model, cfg, protocol.test, args.dump_depth)
    if not args.quiet:
        print(f"ACER {100 * report.acer:.2f}%  APCER {100 * report.apcer:.2f}%  "
              f"BPCER {100 * report.bpcer:.2f}%  EER {100 * report.eer:.2f}%  AUC {report.auc:.4f}")
    return EXIT_OK


# -- ablation -------------------------------------------------------------------

def parse_scale_set(text: str, default_kind: str) -> tuple[str, tuple[int, ...]]:
    """``"8,4,2,1"`` or ``"depth:32,16"`` -> (model kind, scales)."""
    kind, _, rest = text.rpartition(":")
    kind = kind or default_kind
    if kind not in LABEL_KIND:
        raise RunConfigError(f"--scales: unknown model kind {kind!r} in {text!r}")
    return kind, parse_scales(rest)


def _variant(cfg: RunConfig, kind: str, scales, seed: int) -> RunConfig:
    d = cfg.to_dict()
    if kind != cfg.model_kind:
        d["model"] = {"kind": kind}
    d["model"]["kind"] = kind
    d["model"]["scales"] = list(scales)
    d["optim"]["seed"] = int(seed)
    return parse_run_config(d)


def _ablation_job(cfg_doc: dict, held_out) -> dict:
    cfg = parse_run_config(cfg_doc)
    model, protocol, tlog = train_run(cfg, held_out)
    report, _ = evaluate(model, cfg.synth, protocol)
    return {"held_out": held_out, "acer": report.acer, "eer": report.eer, "auc": report.auc,
            "hter": report.hter, "final_loss": tlog.losses()[-1]}


def _worker_count(requested: int) -> int:
    cap = os.environ.get("PSLAB_THREADS")
    n = max(1, requested)
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError as exc:
            raise RunConfigError(f"PSLAB_THREADS: expected an integer, got {cap!r}") from exc
    return n


def run_ablation(cfg: RunConfig, scale_sets, seeds, jobs: int = 1) -> list[dict]:
    """Train and evaluate one model per (scale set, seed, fold); aggregate per scale set.

    The per-seed value is the mean over folds; rows report mean and
    population std of those per-seed values.
    """
    if len(scale_sets) < 2:
        raise RunConfigError("--scales: ablation needs at least two scale sets")
    if not seeds:
        raise RunConfigError("--seeds: at least one seed required")
    folds = cfg.protocol.folds()
    tasks = []
    for kind, scales in scale_sets:
        for seed in seeds:
            doc = _variant(cfg, kind, scales, seed).to_dict()
            for fold in folds:
                tasks.append(((kind, tuple(scales), seed), doc, fold))
    workers = _worker_count(jobs)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablation_job, [t[1] for t in tasks], [t[2] for t in tasks]))
    else:
        results = [_ablation_job(doc, fold) for _, doc, fold in tasks]

    grouped: dict = {}
    for (key, _, _), res in zip(tasks, results):
        grouped.setdefault(key, []).append(res)
    rows = []
    for kind, scales in scale_sets:
        per_seed = []
        for seed in seeds:
            fold_results = grouped[(kind, tuple(scales), seed)]
            per_seed.append({
                "seed": seed,
                "acer": float(np.mean([r["acer"] for r in fold_results])),
                "eer": float(np.mean([r["eer"] for r in fold_results])),
                "folds": fold_results,
            })
        acer_m, acer_s = mean_std(100 * p["acer"] for p in per_seed)
        eer_m, eer_s = mean_std(100 * p["eer"] for p in per_seed)
        rows.append({
            "model": kind, "label_kind": LABEL_KIND[kind], "scales": list(scales), "seeds": list(seeds),
            "protocol": cfg.protocol.kind, "held_out": folds,
            "acer_mean": acer_m, "acer_std": acer_s, "eer_mean": eer_m, "eer_std": eer_s,
            "per_seed": per_seed,
        })
    return rows


def write_ablation(rows: list[dict], out: str) -> None:
    _write_json(os.path.join(out, "ablation.json"), rows)
    with open(os.path.join(out, "ablation.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("model", "label_kind", "scales", "seeds", "acer_mean", "acer_std", "eer_mean", "eer_std"))
        for r in rows:
            w.writerow((r["model"], r["label_kind"], "x".join(map(str, r["scales"])),
                        " ".join(map(str, r["seeds"])), f"{r['acer_mean']:.4f}", f"{r['acer_std']:.4f}",
                        f"{r['eer_mean']:.4f}", f"{r['eer_std']:.4f}"))


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    out = _out_dir(args, cfg)
    cfg.write_resolved(out)
    sets = [parse_scale_set(s, cfg.model_kind) for s in (args.scales or [])]
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
    else:
        seeds = [cfg.optim.seed if args.seed is None else args.seed]
    rows = run_ablation(cfg, sets, seeds, args.jobs)
    write_ablation(rows, out)
    if not args.quiet:
        for r in rows:
            print(f"{r['model']:<6} {r['label_kind']:<12} {'x'.join(map(str, r['scales'])):<10} "
                  f"ACER {r['acer_mean']:.2f} ± {r['acer_std']:.2f}")
    return EXIT_OK


# -- visualisation --------------------------------------------------------------

def upsample_nearest(m: np.ndarray, side: int) -> np.ndarray:
    f = side // m.shape[-1]
    return np.repeat(np.repeat(m, f, axis=-2), f, axis=-1)


def _predicted_maps(model, image: np.ndarray, mask: np.ndarray, scales) -> tuple[dict, float]:
    if model.kind == "stub":
        if model.mode == "perfect":
            pyr = decompose_mask_pyramid(mask, scales)
            maps = {s: m.astype(np.float64) for s, m in pyr.items()}
            return maps, float(pyr[scales[-1]].min())
        return {s: np.full((s, s), float(model.value)) for s in scales}, float(model.value)
    masks, score = model.forward(preprocess(image, model.dtype))
    return {s: m.data.astype(np.float64) for s, m in masks.items()}, float(score.item())


def cmd_visualize(args) -> int:
    cfg = _resolve(args)
    if not args.checkpoint:
        raise RunConfigError("--checkpoint: required for visualize")
    model = load_checkpoint(args.checkpoint)
    if model.kind == "depth":
        raise ModeError("visualize shows mask pyramids; this is a depth checkpoint. "
                        "Dump predicted depth maps with 'pslab eval --dump-depth DIR' instead")
    if model.kind == "spp":
        raise ModeError("visualize needs a mask checkpoint; SPP models predict no maps")
    side = cfg.synth.image_side
    if model.kind == "mask" and model.config.input_side != side:
        raise TensorError(f"checkpoint expects {model.config.input_side}px inputs, config renders {side}px")
    scales = model.config.scales if model.kind == "mask" else cfg.model.scales
    out = _out_dir(args, cfg)
    if args.samples:
        ids = [s.strip() for s in args.samples.split(",") if s.strip()]
    else:
        protocol = build_protocol(cfg.synth, cfg.protocol.kind, _single_fold(cfg, "visualize"))
        # interleave classes so a handful of samples shows both
        ids = _mixed_sample(protocol.test, args.count)
    batch = materialize(cfg.synth, ids)
    entries = []
    for i, sid in enumerate(batch.ids):
        stem = sid.replace("/", "_")
        maps, score = _predicted_maps(model, batch.images[i], batch.masks[i], scales)
        write_ppm(os.path.join(out, stem + "_input.ppm"), chw_to_ppm_array(batch.images[i]))
        files = {}
        for s in scales:
            name = f"{stem}_M{s}.pgm"
            write_pgm(os.path.join(out, name), to_uint8(upsample_nearest(maps[s], side)))
            files[str(s)] = name
        entries.append({"id": sid, "label": int(batch.labels[i]), "attack_type": batch.attack_types[i],
                        "input": stem + "_input.ppm", "maps": files, "score": score})
    _write_json(os.path.join(out, "manifest.json"),
                {"checkpoint": os.path.abspath(args.checkpoint), "scales": list(scales),
                 "base_side": side, "samples": entries})
    return EXIT_OK


def _mixed_sample(ids, count: int) -> list[str]:
    live = [i for i in ids if "/none/" in i]
    spoof = [i for i in ids if "/none/" not in i]
    out = []
    for a, b in zip(live, spoof):
        out.extend((a, b))
    out.extend(live[len(spoof):] + spoof[len(live):])
    return out[:count]


# -- argument parsing -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pslab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"pslab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scales="one"):
        sp.add_argument("--config", help="run configuration JSON (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, help="training seed, overrides optim.seed")
        sp.add_argument("--out", help="output directory (default: config output_dir)")
        sp.add_argument("--quiet", action="store_true", help="only warnings and errors")
        if scales == "one":
            sp.add_argument("--scales", help="comma-separated pyramid scales, e.g. 8,4,2,1")
        return sp

    common(sub.add_parser("synth", help="export a synthetic dataset"))
    t = common(sub.add_parser("train", help="train a model and write a checkpoint"))
    t.add_argument("--checkpoint", help="checkpoint directory (default: OUT/checkpoint)")
    e = common(sub.add_parser("eval", help="score a checkpoint on the protocol test split"))
    e.add_argument("--checkpoint", help="checkpoint directory")
    e.add_argument("--dump-depth", metavar="DIR", help="also write predicted depth maps (depth models)")
    a = common(sub.add_parser("ablate", help="compare pyramid scale sets across seeds"), scales="many")
    a.add_argument("--scales", action="append", metavar="[KIND:]S,S,..",
                   help="one scale set; repeat for each (KIND is mask, spp or depth)")
    a.add_argument("--seeds", help="comma-separated training seeds")
    a.add_argument("--jobs", type=int, default=1, help="parallel worker processes (capped by PSLAB_THREADS)")
    v = common(sub.add_parser("visualize", help="write predicted mask pyramids as PGM images"))
    v.add_argument("--checkpoint", help="mask-model checkpoint directory")
    v.add_argument("--samples", help="comma-separated sample ids (default: from the test split)")
    v.add_argument("--count", type=int, default=4, help="number of test samples when --samples is absent")
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "visualize": cmd_visualize}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (RunConfigError, SynthError, ConfigError, LabelError) as exc:
        print(f"pslab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TensorError, CheckpointError) as exc:
        print(f"pslab: incompatible input: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except ModeError as exc:
        print(f"pslab: {exc}", file=sys.stderr)
        return EXIT_MODE
    except (OSError, TrainError, MetricError, ValueError) as exc:
        print(f"pslab: error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
