"""Command-line surface: gen-data, train, eval, analyze, render, grad-check.

Configs are JSON documents; any flag given on the command line wins over the
file. Exit codes: 0 success, 1 bad config or runtime failure (with the
offending path/field in the message), 2 usage errors.

``STMG_LAB_THREADS`` caps the worker pool used for scene generation and
per-scene evaluation fan-out; training itself stays on one thread.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import trainer as tr
from .errors import ConfigError, StmgError
from .gatnet import init_stmg_params
from .numerics import check_gradients
from .render import write_maps, write_pgm
from .synthdata import GeneratorConfig, generate_scene, read_scene, write_scene

USAGE_EXIT = 2
ERROR_EXIT = 1


def _worker_count():
    raw = os.environ.get("STMG_LAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"STMG_LAB_THREADS must be an integer, got {raw!r}") from exc
    return max(1, n)


def _load_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"bad config {path}: line {exc.lineno}: {exc.msg}") from exc


def _scene_paths(data_dir):
    paths = sorted(Path(data_dir).glob("*.mvs"))
    if not paths:
        raise ConfigError(f"no .mvs scenes under {data_dir}")
    return paths


def _load_scenes(data_dir):
    return [read_scene(p) for p in _scene_paths(data_dir)]


def _fanout(fn, items):
    workers = _worker_count()
    if workers == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# -- subcommands -------------------------------------------------------------


def cmd_gen_data(args):
    doc = _load_json(args.config) if args.config else {}
    count = int(doc.pop("count", 8))
    if args.count is not None:
        count = args.count
    try:
        cfg = GeneratorConfig(**doc)
    except TypeError as exc:
        raise ConfigError(f"bad generator config {args.config}: {exc}") from exc
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def make(i):
        scene_cfg = GeneratorConfig(**{**cfg.__dict__, "seed": cfg.seed + i})
        scene = generate_scene(scene_cfg, scene_id=f"scene-{i:04d}")
        write_scene(scene, out / f"scene_{i:04d}.mvs")
        return scene.scene_id

    made = _fanout(make, range(count))
    print(f"wrote {len(made)} scenes to {out}")
    return 0


def _train_config(args):
    doc = _load_json(args.config) if args.config else {}
    try:
        cfg = tr.TrainConfig.from_dict(doc)
    except TypeError as exc:
        raise ConfigError(f"bad train config {args.config}: {exc}") from exc
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg.validate()


def cmd_train(args):
    cfg = _train_config(args)
    paths = _scene_paths(args.data)
    scenes = _load_scenes(args.data)
    bundle, manifest = tr.train(scenes, cfg, inputs_hash=tr.hash_inputs(paths))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tr.save_bundle(out / "checkpoint.stmgc", bundle)
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        fh.write(tr.manifest_text(manifest))
    last = manifest["epochs"][-1] if manifest["epochs"] else {}
    print(f"trained {len(scenes)} scenes; final total loss {last.get('total', 'n/a')}")
    return 0


def cmd_eval(args):
    cfg = _train_config(args)
    scenes = _load_scenes(args.data)
    bundle, _ = tr.load_bundle(args.checkpoint)
    results = _fanout(lambda s: (s, tr.evaluate_scene(s, bundle, cfg)), scenes)
    report = tr.me.EvalReport()
    per_video = []
    for scene, (values, pred) in results:
        report.add_scene(scene.scene_id, values)
        labels = scene.labels().T
        per_video.append(
            (pred["yhat"].reshape(-1), pred["conf"].reshape(-1), labels.reshape(-1))
        )
    acc, mean_ap, skipped = tr.me.detection_scores(per_video)
    report.finalize(extra={"acc": acc, "map": mean_ap, "map_skipped_videos": skipped})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.txt", "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    print(report.to_text(), end="")
    return 0


def cmd_analyze(args):
    scenes = _load_scenes(args.data)
    stats = tr.analyze(scenes, seed=args.seed if args.seed is not None else 0)
    text = tr.analysis_text(stats)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "analysis.txt", "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text, end="")
    return 0


def cmd_render(args):
    cfg = _train_config(args)
    scenes = _load_scenes(args.data)
    bundle, _ = tr.load_bundle(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for scene in scenes:
        pred = tr.predict_scene(scene, bundle, cfg)
        stem = scene.scene_id.replace("/", "_")
        write_maps(
            out / f"{stem}.maps",
            {"saliency": pred["saliency"], "source": pred["source_maps"]},
            meta={"scene_id": scene.scene_id},
        )
        for t in range(scene.frame_count):
            write_pgm(out / f"{stem}_saliency_{t:03d}.pgm", pred["saliency"][t])
            write_pgm(out / f"{stem}_source_{t:03d}.pgm", pred["source_maps"][t])
    print(f"rendered {len(scenes)} scenes to {out}")
    return 0


def cmd_grad_check(args):
    from .gradcheck import full_pipeline_gradcheck

    ok, worst, checked = full_pipeline_gradcheck(
        seed=args.seed,
        instances=args.instances,
        coords_per_tensor=args.coords,
        verbose=True,
    )
    print(
        f"grad-check: {'PASS' if ok else 'FAIL'} "
        f"({checked} coordinates, worst rel err {worst:.3e})"
    )
    return 0 if ok else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="stmg-lab",
        description="Audio-visual saliency and sound-source localization lab",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="generate synthetic scenes")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train on a scene directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("analyze", help="gaze-statistics suite over scenes")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("render", help="write saliency and source maps")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--coords", type=int, default=3)
    p.set_defaults(fn=cmd_grad_check)

    return parser


def run_command(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors already; normalize everything else
        return USAGE_EXIT if exc.code not in (0,) else 0
    if not getattr(args, "fn", None):
        parser.print_usage(sys.stderr)
        return USAGE_EXIT
    try:
        return args.fn(args)
    except StmgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ERROR_EXIT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ERROR_EXIT


def main():
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
