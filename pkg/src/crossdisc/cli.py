"""``crossdisc`` command line: gen | train | infer | fuse | eval.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
Log verbosity comes from the CROSSDISC_LOG environment variable.
"""
from __future__ import annotations

import argparse
import dataclasses
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as datamod
from . import synthgen
from .config import Config, ConfigError, dump_config, load_config
from .evalfuse import Evaluator, MetricsReport, Prediction, extract_prediction, late_fuse, prediction_to_labels
from .pcproj import read_front_view
from .pseudolabel import read_label_pgm, write_label_pgm
from .slotcore import NonFiniteError

logger = logging.getLogger("crossdisc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------------ commands

def scene_specs(cfg: Config) -> list[tuple[str, str, synthgen.SceneSpec, bool]]:
    """(name, split, spec, night) for every scene the config asks for.

    Night scenes are a seeded subset of the training split.  Every test scene
    is also emitted a second time, darkened, under the ``test_night`` split.
    """
    out = []
    n_night = int(round(cfg.night_scenes * cfg.n_train))
    night_idx = set(np.random.default_rng([cfg.seed, 101]).permutation(cfg.n_train)[:n_night].tolist())
    for split, count, base in (("train", cfg.n_train, 0), ("test", cfg.n_test, 100000)):
        for i in range(count):
            rng = np.random.default_rng([cfg.seed, base + i])
            n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
            spec = synthgen.SceneSpec(
                seed=int(rng.integers(2**31)), n_objects=n_obj, n_moving=int(rng.integers(1, n_obj + 1)),
                T=cfg.T, height=cfg.height, width=cfg.width, depth_range=(cfg.depth_min, cfg.depth_max),
                lidar_top_row=cfg.lidar_top_row, row_step=cfg.row_step, point_dropout=cfg.point_dropout)
            out.append((f"{split}_{i:04d}", split, spec, split == "train" and i in night_idx))
            if split == "test":
                out.append((f"night_{i:04d}", "test_night", spec, True))
    return out


def generate_with_retry(spec: synthgen.SceneSpec, attempts: int = 20) -> synthgen.SceneBundle:
    """Crowded layouts can fail placement; reseed deterministically and try again."""
    seed = spec.seed
    for _ in range(attempts):
        try:
            return synthgen.generate(dataclasses.replace(spec, seed=seed))
        except RuntimeError:
            seed = int(np.random.default_rng(seed).integers(2**31))
    raise RuntimeError(f"scene placement failed {attempts} times starting from seed {spec.seed}")


def cmd_gen(cfg: Config) -> Path:
    root = Path(cfg.data_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {root}: {e}") from None
    entries = []
    for name, split, spec, night in scene_specs(cfg):
        bundle = generate_with_retry(spec)
        if night:
            bundle = synthgen.degrade(bundle, "night", cfg.night_strength)
            if split == "train" and not cfg.night_motion:
                bundle.motion = [np.zeros_like(m) for m in bundle.motion]
        synthgen.write_scene(root, name, bundle)
        entries.append((name, split, spec.T))
    synthgen.write_manifest(root, entries)
    (root / "gen_config.txt").write_text(dump_config(cfg))
    logger.info("wrote %d scenes to %s", len(entries), root)
    return root


def cmd_train(cfg: Config, resume: bool = False):
    from .distill import train
    manifest = Path(cfg.data_dir) / "manifest.txt"
    if not manifest.exists():
        raise ConfigError(f"dataset manifest not found: {manifest}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    return train(cfg, out_dir=out, resume=resume)


def cmd_infer(cfg: Config, checkpoint=None, modality: str | None = None, pred_dir=None) -> dict[str, Path]:
    from .distill import MODEL_FILES, load_student, predict_labels, scene_input
    modality = modality or cfg.modality
    branches = {"2D": ["2D"], "3D": ["3D"], "both": ["2D", "3D"]}.get(modality)
    if branches is None:
        raise ConfigError(f"unknown modality {modality!r}")
    ckpt = Path(checkpoint or Path(cfg.out_dir) / "final")
    for b in branches:
        if not (ckpt / MODEL_FILES[(b, "student")]).exists():
            raise FileNotFoundError(f"no {b} checkpoint in {ckpt}")
    stats_path = Path(cfg.out_dir) / "fv_stats.txt"
    if not stats_path.exists():
        stats_path = ckpt.parent / "fv_stats.txt"
    stats = datamod.read_stats(stats_path) if "3D" in branches else None
    scenes = datamod.load_split(cfg.data_dir, cfg.split)
    pred_root = Path(pred_dir or Path(cfg.out_dir) / "pred" / cfg.split)
    written = {}
    for b in branches:
        model = load_student(ckpt, cfg, b)
        d = pred_root / b.lower()
        for scene in scenes:
            labels = predict_labels(model, scene_input(scene, b, stats), cfg.slot_iters)
            (d / scene.name).mkdir(parents=True, exist_ok=True)
            for t, stem in enumerate(scene.frames):
                pred = extract_prediction(labels[t], b, t, cfg.min_pred_area)
                write_label_pgm(d / scene.name / f"{stem}.pgm", prediction_to_labels(pred))
        written[b] = d
    return written


def _frames(pred_dir: Path):
    for scene in sorted(p for p in pred_dir.iterdir() if p.is_dir()):
        for f in sorted(scene.glob("*.pgm")):
            yield scene.name, f.name


def _read_pred(path, modality: str, frame_id: int = 0) -> Prediction:
    return extract_prediction(read_label_pgm(path), modality, frame_id)


def cmd_fuse(pred2d, pred3d, out_dir, tau: float = 0.3) -> Path:
    pred2d, pred3d, out = Path(pred2d), Path(pred3d), Path(out_dir)
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau must lie in [0, 1], got {tau}")
    for d in (pred2d, pred3d):
        if not d.is_dir():
            raise FileNotFoundError(f"prediction directory not found: {d}")
    n = 0
    for scene, fname in _frames(pred2d):
        other = pred3d / scene / fname
        if not other.exists():
            raise FileNotFoundError(f"missing 3D prediction {other}")
        fused = late_fuse(_read_pred(pred2d / scene / fname, "2D"), _read_pred(other, "3D"), tau)
        (out / scene).mkdir(parents=True, exist_ok=True)
        write_label_pgm(out / scene / fname, prediction_to_labels(fused))
        n += 1
    logger.info("fused %d frames into %s", n, out)
    return out


def cmd_eval(pred_dir, gt_dir, use_fv: bool = False, bands=None, out_csv=None):
    """Score label-PGM predictions against ``gt_dir/<scene>/gt``; optional distance bands."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    if not pred_dir.is_dir():
        raise FileNotFoundError(f"prediction directory not found: {pred_dir}")
    if bands and not use_fv:
        use_fv = True
    ev = Evaluator(bands=bands)
    for scene, fname in _frames(pred_dir):
        gt_path = gt_dir / scene / "gt" / fname
        if not gt_path.exists():
            raise FileNotFoundError(f"missing ground truth {gt_path}")
        fv = read_front_view(gt_dir / scene / "fv" / fname.replace(".pgm", ".fvim")) if use_fv else None
        ev.add(read_label_pgm(pred_dir / scene / fname), read_label_pgm(gt_path), fv)
    report = ev.report()
    if out_csv is not None:
        rows = report.rows()
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return report


def evaluate_checkpoint(cfg: Config, checkpoint, split: str, pred_root) -> dict[str, MetricsReport]:
    """Infer both modalities on ``split``, fuse them, and score all three prediction sets."""
    cfg = dataclasses.replace(cfg, split=split)
    pred_root = Path(pred_root)
    dirs = cmd_infer(cfg, checkpoint, "both", pred_root)
    dirs["fused"] = cmd_fuse(dirs["2D"], dirs["3D"], pred_root / "fused", cfg.tau)
    return {k: cmd_eval(d, cfg.data_dir) for k, d in dirs.items()}


# ------------------------------------------------------------------ entry point

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crossdisc", description="cross-modal multi-object discovery")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
        return sp

    common(sub.add_parser("gen", help="generate a toy dataset"))
    tr = common(sub.add_parser("train", help="burn-in then distillation"))
    tr.add_argument("--resume", action="store_true", help="continue from <out_dir>/last")
    inf = common(sub.add_parser("infer", help="write per-frame label predictions"))
    inf.add_argument("--checkpoint", help="checkpoint directory (default <out_dir>/final)")
    inf.add_argument("--modality", choices=["2D", "3D", "both"])
    inf.add_argument("--pred-dir", help="output root (default <out_dir>/pred/<split>)")
    fu = common(sub.add_parser("fuse", help="late fusion of 2D and 3D predictions"))
    fu.add_argument("--pred2d", required=True)
    fu.add_argument("--pred3d", required=True)
    fu.add_argument("--out", required=True)
    fu.add_argument("--tau", type=float)
    ev = common(sub.add_parser("eval", help="score predictions against ground truth"))
    ev.add_argument("--pred", required=True)
    ev.add_argument("--data", help="dataset root (default data_dir)")
    ev.add_argument("--fv", action="store_true", help="load front views for distance bands")
    ev.add_argument("--bands", help="e.g. 0-10,10-30,30-70")
    ev.add_argument("--out", help="CSV report path")
    return p


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config, args.set)
    if args.command == "gen":
        cmd_gen(cfg)
    elif args.command == "train":
        cmd_train(cfg, resume=args.resume)
    elif args.command == "infer":
        for b, d in cmd_infer(cfg, args.checkpoint, args.modality, args.pred_dir).items():
            print(f"{b}\t{d}")
    elif args.command == "fuse":
        print(cmd_fuse(args.pred2d, args.pred3d, args.out, cfg.tau if args.tau is None else args.tau))
    elif args.command == "eval":
        from .config import parse_bands
        bands = parse_bands(args.bands) if args.bands else None
        rep = cmd_eval(args.pred, args.data or cfg.data_dir, args.fv, bands, args.out)
        for row in rep.rows():
            print("\t".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("CROSSDISC_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(argv)
    except UsageError as e:
        print(f"crossdisc: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, FloatingPointError) as e:
        print(f"crossdisc: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, OSError, ValueError, KeyError, RuntimeError) as e:
        print(f"crossdisc: error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
