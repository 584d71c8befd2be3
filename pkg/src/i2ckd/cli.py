"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 verification
failure (gradient check or reference disagreement).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import gradcheck, reference
from .data import DatasetSpec, load_spec, load_split, write_dataset
from .losses import (
    LossError,
    LossWeights,
    channel_kld_loss,
    compute_prototypes,
    downsample_mask_nearest,
    task_cross_entropy,
    total_loss,
    triplet_prototype_loss,
)
from .metrics import iou_per_class
from .nn import ConfigError, NetConfig, SegNetwork, strict_from_dict
from .tensor import STFError, TensorError, load_stf
from .trainer import (
    OptimConfig,
    check_pair,
    evaluate_network,
    load_checkpoint,
    save_checkpoint,
    train_networks,
    write_log,
)

log = logging.getLogger("i2ckd")

EXIT_OK, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2
REFERENCE_TOL = 1e-10

ABLATION_ROWS = [
    ("task", "L_task"),
    ("task+sm", "L_task + L_SM"),
    ("task+sm+i2ckd", "L_task + L_SM + L_I2CKD"),
]


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    data: DatasetSpec = field(default_factory=DatasetSpec)
    teacher: NetConfig = field(default_factory=lambda: NetConfig(widths=[32, 64, 64]))
    student: NetConfig = field(default_factory=lambda: NetConfig(widths=[16, 32], projection=64))
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    eval_every: int = 100
    augment: bool = True
    ablation_seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    data_dir: Optional[str] = None
    teacher_checkpoint: Optional[str] = None

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        raw.pop("command", None)
        nested = {
            "data": DatasetSpec,
            "teacher": NetConfig,
            "student": NetConfig,
            "optim": OptimConfig,
            "loss": LossWeights,
        }
        kwargs = {}
        for key, sub in nested.items():
            if key in raw:
                kwargs[key] = strict_from_dict(sub, raw.pop(key), key)
        cfg = strict_from_dict(cls, raw, "config")
        return dataclasses.replace(cfg, **kwargs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="i2ckd", description="Class-prototype knowledge distillation toolkit")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON run config (unknown keys are errors)")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int, help="override the run seed")
        sp.add_argument("--force", action="store_true", help="allow a non-empty --out")

    g = sub.add_parser("gen-data", help="write the synthetic dataset")
    common(g)
    g.add_argument("--classes", type=int, help="number of classes incl. background")

    t = sub.add_parser("train-teacher", help="train a network on the task loss only")
    common(t)
    t.add_argument("--data", help="dataset directory from gen-data")
    t.add_argument("--net", choices=["teacher", "student"], default="teacher",
                   help="which config section defines the architecture")

    d = sub.add_parser("distill", help="distill a student from a frozen teacher")
    common(d)
    d.add_argument("--data", help="dataset directory from gen-data")
    d.add_argument("--teacher", help="teacher checkpoint directory")
    d.add_argument("--lambda-sm", type=float)
    d.add_argument("--lambda-i2ckd", type=float)
    d.add_argument("--margin", type=float)
    d.add_argument("--temperature", type=float)
    d.add_argument("--ablation", action="store_true",
                   help="run task / task+SM / task+SM+I2CKD for every ablation seed")
    d.add_argument("--seeds", type=int, nargs="+", help="override the ablation seeds")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val", choices=["train", "val", "test"])
    e.add_argument("--out", help="write the JSON report here as well as stdout")

    gc = sub.add_parser("grad-check", help="finite-difference gradient checks")
    gc.add_argument("--out", help="directory for per-check JSON")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--perturb", type=float, default=1e-5)

    le = sub.add_parser("loss-eval", help="evaluate all loss parts on dumped STF1 tensors")
    le.add_argument("--dumps", required=True,
                    help="directory with features_t/features_s/scores_t/scores_s/mask .stf files")
    le.add_argument("--lambda-sm", type=float, default=3.0)
    le.add_argument("--lambda-i2ckd", type=float, default=0.6)
    le.add_argument("--margin", type=float, default=0.1)
    le.add_argument("--temperature", type=float, default=2.0)
    le.add_argument("--reference", action="store_true",
                    help="recompute with the scalar-loop oracles and require agreement")
    le.add_argument("--out", help="write the JSON report here as well as stdout")
    return p


# ---------------------------------------------------------------- helpers


def _load_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
        cfg = RunConfig.from_dict(raw)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _prepare_out(out: str, force: bool) -> Path:
    path = Path(out)
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"output directory {path} is not empty (use --force)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _snapshot(out: Path, command: str, cfg: RunConfig) -> None:
    snap = {"command": command, **cfg.to_dict()}
    (out / "config.json").write_text(json.dumps(snap, indent=2, sort_keys=True) + "\n")


def _load_data(cfg: RunConfig):
    if cfg.data_dir is None:
        raise UsageError("no dataset given (--data or data_dir in the config)")
    data_dir = Path(cfg.data_dir)
    if not data_dir.exists():
        raise UsageError(f"dataset directory not found: {data_dir}")
    spec = load_spec(data_dir)
    train = load_split(data_dir, "train")
    val = load_split(data_dir, "val")
    return spec, train[:2], val[:2]


def _write_json(path: Optional[str], report: dict) -> None:
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n")


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    spec = cfg.data
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    if args.classes is not None:
        spec = dataclasses.replace(spec, num_classes=args.classes)
    cfg.data = spec
    out = _prepare_out(args.out, args.force)
    summary = write_dataset(spec, out)
    _snapshot(out, "gen-data", cfg)
    print("fraction of images containing each class:")
    for split, freqs in summary.items():
        print(f"  {split:5s} " + " ".join(f"c{c}={f:.2f}" for c, f in enumerate(freqs)))
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    cfg = _load_config(args)
    if args.data:
        cfg.data_dir = str(Path(args.data).resolve())
    spec, train, val = _load_data(cfg)
    cfg.data = spec
    net_cfg = cfg.teacher if args.net == "teacher" else cfg.student
    if net_cfg.num_classes != spec.num_classes:
        raise ConfigError(
            f"network predicts {net_cfg.num_classes} classes, dataset has {spec.num_classes}"
        )
    out = _prepare_out(args.out, args.force)
    _snapshot(out, "train-teacher", cfg)
    net = SegNetwork(net_cfg, seed=cfg.seed)
    res = train_networks([net], [LossWeights(0.0, 0.0)], train, val, cfg.optim, cfg.seed,
                         eval_every=cfg.eval_every, use_augment=cfg.augment)[0]
    save_checkpoint(out / "checkpoint", res.net, res.optimizer,
                    {"iter": cfg.optim.total_iter, "val_miou": res.final_miou})
    write_log(out / "metrics.jsonl", res.log)
    print(json.dumps({"val_miou": res.final_miou}))
    return EXIT_OK


def _resolve_distill(args) -> RunConfig:
    cfg = _load_config(args)
    if args.data:
        cfg.data_dir = str(Path(args.data).resolve())
    if args.teacher:
        cfg.teacher_checkpoint = str(Path(args.teacher).resolve())
    overrides = {
        "lambda_sm": args.lambda_sm,
        "lambda_i2ckd": args.lambda_i2ckd,
        "margin": args.margin,
        "temperature": args.temperature,
    }
    cfg.loss = dataclasses.replace(cfg.loss, **{k: v for k, v in overrides.items() if v is not None})
    if args.seeds:
        cfg.ablation_seeds = list(args.seeds)
    if cfg.teacher_checkpoint is None:
        raise UsageError("no teacher checkpoint given (--teacher or teacher_checkpoint in the config)")
    return cfg


def _load_teacher(cfg: RunConfig) -> SegNetwork:
    path = Path(cfg.teacher_checkpoint)
    if not (path / "manifest.json").exists():
        raise UsageError(f"teacher checkpoint not found: {path}")
    teacher, _ = load_checkpoint(path)
    teacher.freeze()
    return teacher


def ablation_weights(w: LossWeights) -> list[LossWeights]:
    return [
        dataclasses.replace(w, lambda_sm=0.0, lambda_i2ckd=0.0),
        dataclasses.replace(w, lambda_i2ckd=0.0),
        w,
    ]


def run_ablation(train, val, teacher, student_cfg, optim, weights, seeds, eval_every=100,
                 use_augment=True, out: Optional[Path] = None) -> dict:
    """Train the three loss configurations for every seed and summarise val mIoU."""
    rows = ablation_weights(weights)
    per_seed = []
    for seed in seeds:
        nets = [SegNetwork(student_cfg, seed=seed) for _ in rows]
        start = time.perf_counter()
        results = train_networks(nets, rows, train, val, optim, seed, teacher=teacher,
                                 eval_every=eval_every, use_augment=use_augment)
        entry = {"seed": seed}
        for (key, _), res in zip(ABLATION_ROWS, results):
            entry[key] = res.final_miou
            if out is not None:
                run_dir = out / key / f"seed{seed}"
                save_checkpoint(run_dir / "checkpoint", res.net, res.optimizer,
                                {"iter": optim.total_iter, "val_miou": res.final_miou})
                write_log(run_dir / "metrics.jsonl", res.log)
        log.info("ablation seed %d (%.0fs): %s", seed, time.perf_counter() - start, entry)
        per_seed.append(entry)
    return summarise_ablation(per_seed, weights)


def summarise_ablation(per_seed: list[dict], weights: LossWeights) -> dict:
    means = {key: float(np.mean([e[key] for e in per_seed])) for key, _ in ABLATION_ROWS}
    gains = [100.0 * (e["task+sm+i2ckd"] - e["task"]) for e in per_seed]
    return {
        "weights": dataclasses.asdict(weights),
        "per_seed": per_seed,
        "mean_miou": means,
        "full_minus_task_points": 100.0 * (means["task+sm+i2ckd"] - means["task"]),
        "seeds_full_beats_task_by_half_point": int(sum(g >= 0.5 for g in gains)),
        "strict_ordering": means["task+sm+i2ckd"] > means["task+sm"] > means["task"],
    }


def ablation_markdown(summary: dict) -> str:
    lines = [
        "| L_task | L_SM | L_I2CKD | mean val mIoU (%) |",
        "|:-:|:-:|:-:|:-:|",
    ]
    marks = {"task": ("x", "", ""), "task+sm": ("x", "x", ""), "task+sm+i2ckd": ("x", "x", "x")}
    for key, _ in ABLATION_ROWS:
        a, b, c = marks[key]
        lines.append(f"| {a} | {b} | {c} | {100 * summary['mean_miou'][key]:.2f} |")
    return "\n".join(lines) + "\n"


def cmd_distill(args) -> int:
    cfg = _resolve_distill(args)
    spec, train, val = _load_data(cfg)
    cfg.data = spec
    teacher = _load_teacher(cfg)
    check_pair(cfg.student, teacher.config)
    out = _prepare_out(args.out, args.force)
    _snapshot(out, "distill", cfg)
    if args.ablation:
        summary = run_ablation(train, val, teacher, cfg.student, cfg.optim, cfg.loss,
                               cfg.ablation_seeds, cfg.eval_every, cfg.augment, out)
        (out / "ablation.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        table = ablation_markdown(summary)
        (out / "ablation.md").write_text(table)
        print(table)
        return EXIT_OK
    student = SegNetwork(cfg.student, seed=cfg.seed)
    res = train_networks([student], [cfg.loss], train, val, cfg.optim, cfg.seed, teacher=teacher,
                         eval_every=cfg.eval_every, use_augment=cfg.augment)[0]
    save_checkpoint(out / "checkpoint", res.net, res.optimizer,
                    {"iter": cfg.optim.total_iter, "val_miou": res.final_miou})
    write_log(out / "metrics.jsonl", res.log)
    print(json.dumps({"val_miou": res.final_miou}))
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not (ckpt / "manifest.json").exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    data_dir = Path(args.data)
    if not (data_dir / args.split / "manifest.json").exists():
        raise UsageError(f"split manifest not found: {data_dir / args.split / 'manifest.json'}")
    net, _ = load_checkpoint(ckpt)
    images, masks, _ = load_split(data_dir, args.split)
    value, cm = evaluate_network(net, images, masks)
    _write_json(args.out, {
        "per_class_iou": iou_per_class(cm),
        "miou": value,
        "pixels_scored": cm.pixels_scored,
    })
    return EXIT_OK


def cmd_grad_check(args) -> int:
    results = gradcheck.run_checks(seed=args.seed, eps=args.perturb)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for r in results:
            (out / f"{r['check']}.json").write_text(json.dumps(r, indent=2) + "\n")
    for r in results:
        status = "PASS" if r["passed"] else "FAIL"
        print(f"{status} {r['check']:28s} max rel err {r['max_rel_err']:.3e}")
    return EXIT_OK if all(r["passed"] for r in results) else EXIT_VERIFY


_DUMP_FILES = ("features_t", "features_s", "scores_t", "scores_s", "mask")


def _load_dumps(directory: Path) -> dict:
    arrays = {}
    for name in _DUMP_FILES:
        path = directory / f"{name}.stf"
        if not path.exists():
            raise UsageError(f"missing dump file: {path}")
        arrays[name] = load_stf(path)
    if arrays["mask"].dtype != np.uint8:
        raise STFError(f"{directory / 'mask.stf'}: field 'dtype' must be u8 for masks")
    for name in _DUMP_FILES[:4]:
        if arrays[name].ndim != 3:
            raise STFError(f"{directory / (name + '.stf')}: field 'shape' must have rank 3 [C,H,W]")
    if arrays["mask"].ndim != 2:
        raise STFError(f"{directory / 'mask.stf'}: field 'shape' must have rank 2 [H,W]")
    return arrays


def loss_report(arrays: dict, weights: LossWeights, with_reference: bool = False) -> dict:
    ft, fs = arrays["features_t"], arrays["features_s"]
    st, ss = arrays["scores_t"], arrays["scores_s"]
    mask = arrays["mask"]
    C = ss.shape[0]
    if ft.shape != fs.shape:
        raise LossError(f"features_t {ft.shape} and features_s {fs.shape} differ")
    fmask = mask if mask.shape == fs.shape[1:] else downsample_mask_nearest(mask, fs.shape[1:])
    pt = compute_prototypes(ft, fmask, C)
    ps = compute_prototypes(fs, fmask, C)
    l_i2, _, active = triplet_prototype_loss(ps, pt, weights.margin)
    l_sm, _ = channel_kld_loss(st, ss, weights.temperature)
    l_task, _ = task_cross_entropy(ss, mask)
    parts = {"l_task": l_task, "l_sm": l_sm, "l_i2ckd": l_i2}
    report = {
        **parts,
        "l_total": total_loss(parts, weights),
        "active_pairs": active,
        "present_classes": [int(c) for c in np.flatnonzero(ps.present)],
        "prototypes_t": pt.values.tolist(),
        "prototypes_s": ps.values.tolist(),
        "weights": dataclasses.asdict(weights),
    }
    if with_reference:
        ref_pt, _ = reference.prototypes_bruteforce(ft.tolist(), fmask.tolist(), C)
        ref_ps, present = reference.prototypes_bruteforce(fs.tolist(), fmask.tolist(), C)
        ref = {
            "l_task": reference.task_ce_reference(ss.tolist(), mask.tolist()),
            "l_sm": reference.channel_kld_reference(st.tolist(), ss.tolist(), weights.temperature),
            "l_i2ckd": reference.triplet_reference(ref_ps, ref_pt, present, weights.margin),
        }
        diffs = {k: abs(ref[k] - parts[k]) for k in ref}
        diffs["prototypes"] = float(max(
            np.max(np.abs(np.array(ref_pt) - pt.values)),
            np.max(np.abs(np.array(ref_ps) - ps.values)),
        ))
        report["reference"] = ref
        report["max_abs_diff"] = diffs
        report["agreement"] = all(d <= REFERENCE_TOL for d in diffs.values())
    return report


def cmd_loss_eval(args) -> int:
    directory = Path(args.dumps)
    if not directory.is_dir():
        raise UsageError(f"dump directory not found: {directory}")
    weights = LossWeights(args.lambda_i2ckd, args.lambda_sm, args.temperature, args.margin)
    report = loss_report(_load_dumps(directory), weights, args.reference)
    _write_json(args.out, report)
    if args.reference and not report["agreement"]:
        return EXIT_VERIFY
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
    "loss-eval": cmd_loss_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, LossError, FileNotFoundError, STFError, TensorError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
