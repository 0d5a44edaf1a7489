"""Command-line entry point: ``artikin <subcommand> ...``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .coarse import ProviderError
from .config import ConfigError, RunConfig, describe_defaults, load_config
from .deform import DeformError, FitConfig, fit, interpolate, load_checkpoint, save_checkpoint
from .field import FieldError, load_scene, load_snapshot, save_field, save_snapshot
from .imageio import write_depth, write_mask, write_ppm, write_weight
from .kinematics import KinematicsError, read_joint_report, write_joint_report
from .metrics import MetricsError, evaluate
from .pipeline import (LABELS_FORMAT, estimate_joints, run_pipeline, segment, sha256_file,
                       write_json)
from .refine import RefineError
from .splat import render_view
from .synth import PRESETS, generate_scene, preset

log = logging.getLogger("artikin")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


VALIDATION_ERRORS = (UsageError, ConfigError, FieldError, MetricsError, RefineError, FileNotFoundError)
RUNTIME_ERRORS = (DeformError, ProviderError, KinematicsError, OSError, RuntimeError)


# --- helpers ---------------------------------------------------------------------------

def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"threads={args.threads}")
    return cfg.with_overrides(overrides) if overrides else cfg.validate()


def _out(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_labels(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "labels.json"
    if not path.exists():
        raise FieldError(f"labels file not found: {path}")
    doc = json.loads(path.read_text())
    if doc.get("format") != LABELS_FORMAT:
        raise FieldError(f"{path}: not an {LABELS_FORMAT} file")
    doc["_dir"] = path.parent
    return doc


def _write_manifest(out: Path, cfg: RunConfig, command: str, inputs: dict, outputs: List[str]):
    doc = {"command": command, "version": __version__, "config": cfg.to_dict(),
           "inputs": {k: {"path": str(v), "sha256": sha256_file(v)} for k, v in inputs.items()},
           "outputs": {name: sha256_file(out / name) for name in sorted(outputs)}}
    write_json(out / "manifest.json", doc)


def _scene_file(path) -> Path:
    p = Path(path)
    return p / "scene.json" if p.is_dir() else p


# --- subcommands -----------------------------------------------------------------------

def cmd_synth(args, cfg):
    spec = preset(args.preset, seed=cfg.seed)
    if args.gaussians:
        from dataclasses import replace
        spec = replace(spec, total_gaussians=args.gaussians)
    bundle = generate_scene(spec)
    out = _out(args.out)
    save_field(bundle, out / "scene.json")
    print(f"wrote {out / 'scene.json'}: {bundle.N} primitives, {bundle.K} states")


def cmd_fit_deform(args, cfg):
    bundle = load_scene(args.scene)
    fc = FitConfig(epochs=cfg.deform.epochs, learning_rate=cfg.deform.lr,
                   latent_dim=cfg.deform.latent_dim, optimizer=cfg.deform.optimizer, seed=cfg.seed)
    result = fit(bundle, fc)
    out = _out(args.out)
    save_checkpoint(result, out / "checkpoint.json")
    _write_manifest(out, cfg, "fit-deform", {"scene": _scene_file(args.scene)}, ["checkpoint.json"])
    print(f"final loss {result.final_loss:.3e}; wrote {out / 'checkpoint.json'}")


def _save_segmentation(out: Path, bundle, seg) -> List[str]:
    write_json(out / "labels.json", seg.to_dict())
    save_snapshot(seg.refined_field(bundle), out / "refined_field.json")
    return ["labels.json", "refined_field.json"]


def _save_masks(out: Path, seg) -> List[str]:
    if not seg.refined or not seg.refined.context:
        return []
    (out / "images" / "masks").mkdir(parents=True, exist_ok=True)
    names = []
    for (v, lab), m in sorted(seg.refined.context.masks.items()):
        name = f"images/masks/view{v:02d}_part{lab}.pgm"
        write_mask(out / name, m.mask)
        names.append(name)
    return names


def cmd_segment(args, cfg):
    bundle = load_scene(args.scene)
    seg = segment(bundle, cfg)
    out = _out(args.out)
    names = _save_segmentation(out, bundle, seg) + _save_masks(out, seg)
    _write_manifest(out, cfg, "segment", {"scene": _scene_file(args.scene)}, names)
    n = seg.refined.n_splits if seg.refined else 0
    print(f"{seg.coarse.n_parts} moving part(s), {n} split(s); wrote {out / 'labels.json'}")


def cmd_kinematics(args, cfg):
    bundle = load_scene(args.scene)
    labels = np.array(_read_labels(args.labels)["kinematic"], dtype=np.int64)
    if len(labels) != bundle.N:
        raise FieldError(f"labels cover {len(labels)} primitives, scene has {bundle.N}")
    est, pair = estimate_joints(bundle, labels, cfg)
    out = _out(args.out)
    write_joint_report(est, out / "joints.json", pair)
    _write_manifest(out, cfg, "kinematics", {"scene": _scene_file(args.scene)}, ["joints.json"])
    for k, e in sorted(est.items()):
        print(f"part {k}: {e.joint.kind if e.joint else 'error: ' + e.error}")


def _evaluate_files(bundle, labels_doc, joints_path, cfg):
    if bundle.ground_truth is None:
        raise MetricsError("scene has no ground_truth block; eval needs ground truth")
    refined_path = labels_doc["_dir"] / "refined_field.json"
    if "refined" in labels_doc and refined_path.exists():
        field = load_snapshot(refined_path)
        source = np.array(labels_doc["source"], dtype=np.int64)
    else:
        field = bundle.canonical.with_labels(labels_doc["coarse"])
        source = None
    doc = json.loads(Path(joints_path).read_text())
    pair = tuple(doc["state_pair"]) if doc.get("state_pair") else cfg.state_pair(bundle.K)
    return evaluate(bundle, field, read_joint_report(joints_path), pair, source)


def cmd_eval(args, cfg):
    bundle = load_scene(args.scene)
    if bundle.ground_truth is None:
        raise MetricsError("scene has no ground_truth block; eval needs ground truth")
    joints = Path(args.joints)
    if joints.is_dir():
        joints = joints / "joints.json"
    if not joints.exists():
        raise FieldError(f"joints file not found: {joints}")
    report = _evaluate_files(bundle, _read_labels(args.labels), joints, cfg)
    out = _out(args.out)
    report.write(out / "report.json", out / "report.csv")
    _write_manifest(out, cfg, "eval", {"scene": _scene_file(args.scene)}, ["report.json", "report.csv"])
    print(json.dumps(report.to_dict()["summary"], sort_keys=True))


def cmd_interp(args, cfg):
    bundle = load_scene(args.scene)
    ckpt = Path(args.checkpoint)
    if ckpt.is_dir():
        ckpt = ckpt / "checkpoint.json"
    if not ckpt.exists():
        raise FieldError(f"checkpoint not found: {ckpt}")
    result = load_checkpoint(ckpt)
    try:
        ts = [float(t) for t in args.t.split(",")]
    except ValueError:
        raise UsageError(f"--t must be comma-separated numbers, got {args.t!r}")
    a, b = cfg.state_pair(bundle.K)
    canonical = bundle.canonical
    parts = None
    if args.part is not None:
        labels = np.array(_read_labels(args.labels)["kinematic"]) if args.labels else \
            (bundle.ground_truth.labels if bundle.ground_truth is not None else None)
        if labels is None:
            raise FieldError("--part needs --labels or a scene with ground truth")
        canonical = canonical.with_labels(np.maximum(labels, 0))
        parts = [args.part]
    out = _out(args.out)
    (out / "images").mkdir(exist_ok=True)
    cam = bundle.cameras[a][args.view]
    names = []
    for t in ts:
        st = interpolate(result.net, result.latents[a], result.latents[b], t, canonical, parts)
        tag = f"{t:.4f}".rstrip("0").rstrip(".") if t else "0"
        save_snapshot(st, out / f"state_t{tag}.json", {"t": t})
        write_ppm(out / "images" / f"interp_t{tag}.ppm", render_view(st, cam).color)
        names += [f"state_t{tag}.json", f"images/interp_t{tag}.ppm"]
    _write_manifest(out, cfg, "interp", {"scene": _scene_file(args.scene), "checkpoint": ckpt}, names)
    print(f"wrote {len(ts)} state(s) to {out}")


def cmd_render(args, cfg):
    bundle = load_scene(args.scene)
    if not 0 <= args.state < bundle.K:
        raise UsageError(f"--state must lie in [0, {bundle.K - 1}]")
    cams = bundle.cameras[args.state]
    views = range(len(cams)) if args.view is None else [args.view]
    labels = bundle.ground_truth.labels if bundle.ground_truth is not None else None
    out = _out(args.out)
    (out / "images").mkdir(exist_ok=True)
    names = []
    for v in views:
        if not 0 <= v < len(cams):
            raise UsageError(f"--view must lie in [0, {len(cams) - 1}]")
        r = render_view(bundle.states[args.state], cams[v], labels=labels)
        stem = f"images/state{args.state}_view{v:02d}"
        write_ppm(out / f"{stem}.ppm", r.color)
        write_depth(out / f"{stem}_depth.pgm", r.depth)
        names += [f"{stem}.ppm", f"{stem}_depth.pgm"]
        for lab, w in sorted(r.weight_maps.items()):
            write_weight(out / f"{stem}_weight{lab}.pgm", w)
            names.append(f"{stem}_weight{lab}.pgm")
    _write_manifest(out, cfg, "render", {"scene": _scene_file(args.scene)}, names)
    print(f"rendered {len(names)} image(s) to {out / 'images'}")


def cmd_pipeline(args, cfg):
    bundle = load_scene(args.scene)
    res = run_pipeline(bundle, cfg)
    out = _out(args.out)
    names = _save_segmentation(out, bundle, res.segmentation)
    write_joint_report(res.joints, out / "joints.json", res.state_pair)
    names.append("joints.json")
    if res.report is not None:
        res.report.write(out / "report.json", out / "report.csv")
        names += ["report.json", "report.csv"]
    names += _save_masks(out, res.segmentation)
    _write_manifest(out, cfg, "pipeline", {"scene": _scene_file(args.scene)}, names)
    if res.report is not None:
        print(json.dumps(res.report.to_dict()["summary"], sort_keys=True))
    else:
        print(f"wrote {out}; no ground truth, evaluation skipped")


# --- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    epilog = "config keys (override with --set key=value or --config FILE):\n" + describe_defaults()
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="random seed (config key 'seed')")
    common.add_argument("--threads", type=int, help="worker threads (config key 'threads')")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")
    fmt = argparse.RawDescriptionHelpFormatter
    p = _Parser(prog="artikin", description="Articulated Gaussian-field part and joint analysis.",
                epilog=epilog, formatter_class=fmt)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_, description=help_,
                            epilog=epilog, formatter_class=fmt)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("synth", cmd_synth, "generate a synthetic scene with exact ground truth")
    sp.add_argument("--preset", required=True, choices=PRESETS)
    sp.add_argument("--gaussians", type=int, help="override the preset's primitive count")
    sp.add_argument("--out", required=True)

    sp = add("fit-deform", cmd_fit_deform, "fit the latent-conditioned deformation network")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True)

    sp = add("segment", cmd_segment, "coarse motion labels followed by mask-guided refinement")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True)

    sp = add("kinematics", cmd_kinematics, "classify and fit one joint per moving part")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--labels", required=True, help="labels.json or the directory holding it")
    sp.add_argument("--out", required=True)

    sp = add("interp", cmd_interp, "deform the canonical field with blended latents")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--t", required=True, help="comma-separated blend weights, e.g. 0,0.5,1")
    sp.add_argument("--part", type=int, help="only this part follows the blend")
    sp.add_argument("--labels", help="labels.json used with --part (default: ground truth)")
    sp.add_argument("--view", type=int, default=0, help="camera used for the preview images")
    sp.add_argument("--out", required=True)

    sp = add("render", cmd_render, "render color, depth and per-part weight maps")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--state", type=int, default=0)
    sp.add_argument("--view", type=int, help="single view (default: all)")
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "score labels and joints against ground truth")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--labels", required=True)
    sp.add_argument("--joints", required=True)
    sp.add_argument("--out", required=True)

    sp = add("pipeline", cmd_pipeline, "segment, fit joints and evaluate in one run")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _config(args)
        args.fn(args, cfg)
        return 0
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except VALIDATION_ERRORS as exc:
        print(f"artikin: error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"artikin: runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
