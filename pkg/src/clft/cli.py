"""Command-line entry points: ``clft <subcommand> ...``.

Diagnostics go to stderr; the exit code is 0 only when no error path was taken.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from fractions import Fraction
from pathlib import Path
from typing import Literal

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import tensor as T
from .data import Dataset, load_checkpoint, rgb_input, save_checkpoint
from .encoder import VARIANTS
from .evaluation import (SUBSET_TAGS, ConfusionState, accumulate, metrics, stratified_report,
                         time_inference)
from .fusion import CLFT, MODALITIES, ModelConfig
from .geometry import (SensorRig, boxes_to_mask, densify, filter_and_populate, load_boxes,
                       load_cloud)
from .gradcheck import directional_check, finite_difference_check
from .synthetic import SEPARABILITY, default_rig, generate_synthetic
from .tensor import ConfigError, save_tensor
from .training import TrainConfig, TrainingDiverged, confusion, fit, predict, weighted_cross_entropy

log = logging.getLogger("clft")

GRADCHECK_TOL = 1e-4
OVERLAY_COLORS = np.array([[0, 0, 0], [0, 120, 255], [255, 40, 40]], np.uint8)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- run config

class EncoderSection(BaseModel):
    model_config = ConfigDict(extra="forbid")
    variant: Literal["base", "large", "huge", "hybrid", "toy"] = "toy"
    patch: int | None = None
    depth: int | None = None
    dim: int | None = None
    heads: int | None = None
    taps: list[int] | None = None
    input: list[int] | None = None
    features: int | None = None


class TrainSection(BaseModel):
    model_config = ConfigDict(extra="forbid")
    lr0: float = Field(1e-4, gt=0)
    alpha: float = Field(0.99, gt=0, le=1)
    batch: int = Field(32, ge=1)
    class_weights: list[float] | None = None
    max_epochs: int = Field(100, ge=0)
    max_steps: int | None = Field(None, ge=0)
    patience: int = Field(10, ge=0)
    seed: int = 0
    split: list[float] = [0.6, 0.2, 0.2]
    augment: bool = True


class RunConfig(BaseModel):
    """Everything one training run needs; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid")
    encoder: EncoderSection = EncoderSection()
    train: TrainSection = TrainSection()
    rig: dict | None = None
    dataset: str | None = None
    out: str | None = None
    modality: Literal["C", "L", "C+L"] = "C+L"
    subsets: list[Literal["light-dry", "light-wet", "dark-dry", "dark-wet"]] | None = None

    def model_config_obj(self) -> ModelConfig:
        enc = self.encoder.model_dump(exclude_none=True)
        variant = enc.pop("variant")
        if "taps" in enc:
            enc["taps"] = tuple(enc["taps"])
        if "input" in enc:
            enc["input"] = tuple(enc["input"])
        return ModelConfig.preset(variant, **enc)

    def train_config(self) -> TrainConfig:
        t = self.train.model_dump()
        t["split"] = tuple(t["split"])
        if t["class_weights"] is not None:
            t["class_weights"] = tuple(t["class_weights"])
        return TrainConfig(modality=self.modality, **t)


# ---------------------------------------------------------------- helpers

def _threads_from_env():
    """Honour CLFT_THREADS by capping BLAS/OpenMP pools; returns a context manager."""
    value = os.environ.get("CLFT_THREADS")
    if not value:
        return None
    from threadpoolctl import threadpool_limits
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"CLFT_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise UsageError("CLFT_THREADS must be >= 1")
    return threadpool_limits(limits=n)


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def plane_preview(grid: np.ndarray, occupancy: np.ndarray) -> np.ndarray:
    """8-bit grayscale with intensity proportional to |value|; empty pixels are black."""
    mag = np.abs(np.where(occupancy, grid, 0.0))
    peak = mag.max()
    if peak == 0:
        return np.zeros(grid.shape, np.uint8)
    return np.round(mag / peak * 255.0).astype(np.uint8)


def overlay(rgb: np.ndarray, pred: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend class colours onto an RGB frame; background pixels keep the image."""
    base = _to_u8(np.transpose(rgb, (1, 2, 0))).astype(float)
    color = OVERLAY_COLORS[pred].astype(float)
    fg = (pred > 0)[..., None]
    out = np.where(fg, (1 - alpha) * base + alpha * color, base)
    return np.round(out).astype(np.uint8)


def _read(fn, path, what):
    try:
        return fn(path)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read {what} {path}: {exc}") from exc


# ---------------------------------------------------------------- commands

def cmd_project(args) -> int:
    cloud = _read(load_cloud, args.cloud, "point cloud")
    rig = _read(SensorRig.load, args.rig, "rig")
    planes = filter_and_populate(cloud, rig)
    if args.dilate:
        planes = densify(planes, args.dilate)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("xy", "yz", "xz"):
        grid = getattr(planes, name)
        save_tensor(out / f"{name}.bin", grid)
        Image.fromarray(plane_preview(grid, planes.occupancy), mode="L").save(out / f"{name}.png")
    save_tensor(out / "occupancy.bin", planes.occupancy.astype(float))
    print(f"projected {int(planes.occupancy.sum())} occupied pixels to {out}")
    return 0


def cmd_make_masks(args) -> int:
    if args.dataset:
        root = Path(args.dataset)
        for p in root.glob("frame_*.mask"):
            p.unlink()
        ds = _read(Dataset.load, root, "dataset")
        print(f"wrote {len(ds)} masks under {root}")
        return 0
    if not (args.cloud and args.boxes and args.rig and args.out):
        raise UsageError("give a dataset directory or all of --cloud, --boxes, --rig, --out")
    cloud = _read(load_cloud, args.cloud, "point cloud")
    boxes = _read(load_boxes, args.boxes, "boxes")
    rig = _read(SensorRig.load, args.rig, "rig")
    mask = boxes_to_mask(cloud, boxes, rig)
    save_tensor(args.out, mask.astype(float))
    if args.preview:
        Image.fromarray(mask, mode="L").save(args.preview)
    return 0


def cmd_gen_synthetic(args) -> int:
    rig = _read(SensorRig.load, args.rig, "rig") if args.rig else default_rig(args.size)
    scenes = generate_synthetic(args.n, args.seed, args.separability, rig, args.dilate)
    Dataset.from_scenes(scenes, rig, {"separability": args.separability, "seed": args.seed}).save(args.out)
    print(f"wrote {args.n} frames to {args.out}")
    return 0


def _load_run_config(args) -> RunConfig:
    raw = {}
    if args.config:
        raw = _read(lambda p: json.loads(Path(p).read_text()), args.config, "run config")
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise UsageError(f"invalid run config:\n{exc}") from exc
    updates = {k: v for k, v in {
        "lr0": args.lr0, "alpha": args.alpha, "batch": args.batch, "max_epochs": args.max_epochs,
        "max_steps": args.max_steps, "patience": args.patience, "seed": args.seed}.items() if v is not None}
    if args.no_augment:
        updates["augment"] = False
    top = {k: v for k, v in {"dataset": args.dataset, "out": args.out,
                             "modality": args.modality}.items() if v is not None}
    merged = cfg.model_dump()
    merged["train"].update(updates)
    merged.update(top)
    if args.variant:
        merged["encoder"] = {"variant": args.variant}
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as exc:
        raise UsageError(f"invalid run config:\n{exc}") from exc


def cmd_train(args) -> int:
    run = _load_run_config(args)
    if not run.dataset or not run.out:
        raise UsageError("dataset and out must be given in the config or on the command line")
    try:
        mcfg = run.model_config_obj()
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    ds = _read(Dataset.load, run.dataset, "dataset")
    if run.subsets:
        ds = ds.subset([i for i, f in enumerate(ds.frames) if f.tag in run.subsets])
    if len(ds) == 0:
        raise UsageError("no frames to train on")
    if (ds.rig.height, ds.rig.width) != tuple(mcfg.encoder.input):
        raise UsageError(f"dataset frames are {ds.rig.height}x{ds.rig.width} but the encoder "
                         f"expects {mcfg.encoder.input}")
    tcfg = run.train_config()
    model = CLFT(mcfg, seed=tcfg.seed)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    log_path.write_text("")

    def on_epoch(rec):
        with log_path.open("a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    result = fit(model, ds, tcfg, on_epoch=on_epoch)
    splits = {name: [int(i) for i in idx] for name, idx in zip(("train", "val", "test"), result.splits)}
    train_state = confusion(model, ds, result.splits[0], result.normalizer, run.modality)
    train_iou = {k: v["iou"] for k, v in metrics(train_state).items()}
    save_checkpoint(out / "checkpoint", model, result.normalizer,
                    {"best_epoch": result.best_epoch, "class_weights": [float(w) for w in result.weights],
                     "modality": run.modality, "run_config": run.model_dump(exclude={"out"}),
                     "splits": splits, "train_iou": train_iou})
    print(f"trained {result.steps} steps over {len(result.log)} epochs; checkpoint in {out / 'checkpoint'}")
    return 0


def cmd_eval(args) -> int:
    model, norm, manifest = _read(load_checkpoint, args.checkpoint, "checkpoint")
    ds = _read(Dataset.load, args.dataset, "dataset")
    if (ds.rig.height, ds.rig.width) != tuple(model.cfg.encoder.input):
        raise UsageError("checkpoint input size does not match the dataset frames")
    if args.split == "all":
        idx = list(range(len(ds)))
    else:
        splits = manifest.get("splits")
        if not splits:
            raise UsageError(f"checkpoint records no {args.split} split")
        idx = splits[args.split]
    out = Path(args.out)
    (out / "overlays").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    states = {t: ConfusionState() for t in SUBSET_TAGS}
    seen = set()
    for i in idx:
        frame = ds.frames[i]
        rgb = rgb_input(frame.rgb)[None] if "C" in args.modality else None
        lid = norm.apply(frame.planes)[None] if args.modality in ("L", "C+L") else None
        pred = predict(model, rgb, lid, args.modality)[0]
        states[frame.tag] = accumulate(states[frame.tag], pred, frame.mask)
        seen.add(frame.tag)
        Image.fromarray(overlay(frame.rgb, pred)).save(out / "overlays" / f"frame_{i:06d}.png")
        Image.fromarray(OVERLAY_COLORS[pred]).save(out / "masks" / f"frame_{i:06d}.png")
    report = stratified_report({t: states[t] for t in SUBSET_TAGS if t in seen}, args.modality)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_text())
    sys.stdout.write(report.to_text())
    return 0


def _gradcheck_cases(scope: str):
    rng = np.random.default_rng(0)
    r = lambda *s: T.Tensor(rng.normal(size=s), requires_grad=True)
    from . import conv as C
    from .assemble import readout_project
    from .fusion import rcu
    mask = rng.choice([0, 1, 2, 255], size=(2, 4, 4))
    cases = [
        ("add", lambda a, b: a + b, [r(3, 4), r(4)]),
        ("sub", lambda a, b: a - b, [r(3, 1), r(1, 4)]),
        ("neg", lambda a: -a, [r(5)]),
        ("mul", lambda a, b: a * b, [r(3, 4), r(3, 1)]),
        ("div", lambda a, b: a / b, [r(3, 4), T.Tensor(rng.uniform(1, 2, (3, 4)), requires_grad=True)]),
        ("matmul", lambda a, b: a @ b, [r(2, 3, 4), r(4, 5)]),
        ("exp", T.exp, [r(5)]),
        ("log", T.log, [T.Tensor(rng.uniform(0.5, 2, 5), requires_grad=True)]),
        ("relu", T.relu, [T.Tensor(rng.choice([-1, 1], 6) * rng.uniform(0.1, 1, 6), requires_grad=True)]),
        ("gelu", T.gelu, [r(6)]),
        ("softmax", lambda a: T.softmax(a, -1), [r(3, 5)]),
        ("log_softmax", lambda a: T.log_softmax(a, -1), [r(3, 5)]),
        ("layer_norm", T.layer_norm, [r(3, 6), r(6), r(6)]),
        ("transpose", lambda a: a.transpose(0, 2, 1), [r(2, 3, 4)]),
        ("getitem", lambda a: a[:, 1:], [r(3, 4)]),
        ("concat", lambda a, b: T.concat([a, b], 1), [r(2, 3), r(2, 2)]),
        ("reshape", lambda a: a.reshape(4, 3), [r(3, 4)]),
        ("sum", lambda a: a.sum(axis=1, keepdims=True), [r(3, 4)]),
        ("mean", lambda a: a.mean(axis=0), [r(3, 4)]),
        ("broadcast_to", lambda a: T.broadcast_to(a, (2, 3, 4)), [r(3, 1)]),
        ("conv2d", lambda x, w, b: C.conv2d(x, w, b, 2, 1), [r(2, 3, 8, 8), r(4, 3, 4, 4), r(4)]),
        ("transpose_conv2d", lambda x, w, b: C.transpose_conv2d(x, w, b, 2), [r(2, 3, 4, 4), r(3, 2, 3, 3), r(2)]),
        ("resample x2", lambda x, w: C.resample(x, 2, w), [r(1, 2, 3, 3), r(2, 2, 2, 2)]),
        ("resample x1/2", lambda x, w: C.resample(x, Fraction(1, 2), w), [r(1, 2, 6, 6), r(2, 2, 4, 4)]),
        ("readout_project", readout_project, [r(2, 5, 4), r(8, 4), r(4)]),
        ("rcu", rcu, [r(1, 3, 5, 5), r(3, 3, 3, 3), r(3, 3, 3, 3)]),
        ("cross_entropy", lambda z: weighted_cross_entropy(z, mask, [1.0, 2.0, 0.5]), [r(2, 3, 4, 4)]),
    ]
    if scope in ("encoder", "full"):
        from .encoder import EncoderConfig, ViTEncoder
        enc = ViTEncoder(EncoderConfig.preset("toy"), 0)
        img = r(1, 3, 96, 96)
        params = [p for _, p in enc.named_parameters()]

        def enc_op(image, *ps):
            return T.concat([t for t in enc.encode(image)], 1)
        cases.append(("encoder", enc_op, [img] + params, "directional"))
    if scope == "full":
        model = CLFT(ModelConfig.preset("toy"), 0)
        rgb, lid = r(1, 3, 96, 96), r(1, 3, 96, 96)
        params = [p for _, p in model.named_parameters()]
        cases.append(("clft C+L", lambda a, b, *ps: model(a, b, "C+L"), [rgb, lid] + params, "directional"))
    return cases


def run_gradcheck(scope: str, fault: bool = False, max_entries: int = 40, out=None) -> bool:
    out = out or sys.stdout
    old = T.GELU_GRAD_FAULT
    T.GELU_GRAD_FAULT = 1.5 if fault else 1.0
    ok = True
    try:
        for name, op, inputs, *kind in _gradcheck_cases(scope):
            t0 = time.perf_counter()
            if kind == ["directional"]:
                # one random direction per tensor covers every parameter
                err = directional_check(op, inputs)
            else:
                big = sum(t.size for t in inputs) > 5000
                err = finite_difference_check(op, inputs, max_entries=max_entries if big else None)
            passed = err < GRADCHECK_TOL
            ok &= passed
            print(f"{'PASS' if passed else 'FAIL'} {name:18s} max rel err {err:.3e} "
                  f"({time.perf_counter() - t0:.1f}s)", file=out)
    finally:
        T.GELU_GRAD_FAULT = old
    return ok


def cmd_gradcheck(args) -> int:
    ok = run_gradcheck(args.scope, args.inject_fault, args.max_entries)
    print("gradcheck " + ("passed" if ok else "FAILED"))
    return 0 if ok else 1


def cmd_bench(args) -> int:
    if args.checkpoint:
        model, _, _ = _read(load_checkpoint, args.checkpoint, "checkpoint")
    else:
        model = CLFT(ModelConfig.preset(args.variant), seed=0)
    h, w = model.cfg.encoder.input
    rng = np.random.default_rng(0)
    rgb = rng.normal(size=(1, 3, h, w))
    lid = rng.normal(size=(1, 3, h, w))
    with T.no_grad():
        timing = time_inference(lambda: model(rgb, lid, args.modality), args.warmup, args.iters)
    timing.update(modality=args.modality, variant=model.cfg.encoder.variant)
    text = json.dumps(timing, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clft", description="Camera-LiDAR fusion transformer toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("project", help="project a point cloud onto the camera planes")
    s.add_argument("cloud")
    s.add_argument("rig")
    s.add_argument("out")
    s.add_argument("--dilate", type=int, default=0, help="densification radius (0 = none)")
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("make-masks", help="derive ground-truth masks from boxes and points")
    s.add_argument("dataset", nargs="?")
    s.add_argument("--cloud")
    s.add_argument("--boxes")
    s.add_argument("--rig")
    s.add_argument("--out")
    s.add_argument("--preview")
    s.set_defaults(func=cmd_make_masks)

    s = sub.add_parser("gen-synthetic", help="write a synthetic dataset directory")
    s.add_argument("out")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--separability", choices=SEPARABILITY, default="color")
    s.add_argument("--rig")
    s.add_argument("--size", type=int, default=96)
    s.add_argument("--dilate", type=int, default=2)
    s.set_defaults(func=cmd_gen_synthetic)

    s = sub.add_parser("train", help="train a model; flags override config keys")
    s.add_argument("--config")
    s.add_argument("--dataset")
    s.add_argument("--out")
    s.add_argument("--variant", choices=VARIANTS)
    s.add_argument("--modality", choices=MODALITIES)
    s.add_argument("--lr0", type=float)
    s.add_argument("--alpha", type=float)
    s.add_argument("--batch", type=int)
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--max-steps", type=int)
    s.add_argument("--patience", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--no-augment", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="stratified IoU report and overlays")
    s.add_argument("checkpoint")
    s.add_argument("dataset")
    s.add_argument("--modality", choices=MODALITIES, default="C+L")
    s.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    s.add_argument("--out", default="eval_out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    s.add_argument("--scope", choices=("ops", "encoder", "full"), default="ops")
    s.add_argument("--max-entries", type=int, default=40,
                   help="sampled elements per input for large cases")
    s.add_argument("--inject-fault", action="store_true",
                   help="corrupt the GELU gradient to confirm the suite fails")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("bench", help="time inference")
    s.add_argument("checkpoint", nargs="?")
    s.add_argument("--variant", choices=VARIANTS, default="toy")
    s.add_argument("--modality", choices=MODALITIES, default="C+L")
    s.add_argument("--warmup", type=int, default=50)
    s.add_argument("--iters", type=int, default=200)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        limiter = _threads_from_env()
        if limiter is None:
            return args.func(args)
        with limiter:
            return args.func(args)
    except UsageError as exc:
        print(f"clft {args.command}: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, ConfigError) as exc:
        print(f"clft {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
