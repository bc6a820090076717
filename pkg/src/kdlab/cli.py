"""Experiment driver: train / distill / evaluate / compare subcommands.

Configuration precedence is CLI flags over config-file keys over built-in
defaults. Every run directory receives a ``config.resolved`` dump of the
fully merged configuration; re-running a command from that file reproduces
its outputs byte for byte.
"""

from __future__ import annotations

import argparse
import json
import struct
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import metrics as metrics_mod
from .distill import DistillConfig, MetricsReport, distill_train, train_regular
from .errors import ConfigError, FormatError, KdlabError
from .models import ModelSpec, build_model, count_params
from .tensor import Tensor, no_grad, tune_allocator

CKPT_MAGIC = b"KDCK"
CKPT_VERSION = 1

METRICS_HEADER = "epoch,split,loss_total,loss_kd,loss_task,acc,map"

# keys accepted in config files and dumped into config.resolved
_BOOL_KEYS = {"augment"}
_INT_KEYS = {"seed", "epochs", "batch_size", "sched_step", "image_size"}
_FLOAT_KEYS = {"lr", "momentum", "weight_decay", "sched_gamma", "alpha",
               "temperature", "crop_lo", "crop_hi", "hflip_prob",
               "norm_mean", "norm_std"}
_STR_KEYS = {"model", "student", "data", "out", "teacher_ckpt",
             "student_ckpt", "ckpt"}
CONFIG_KEYS = _BOOL_KEYS | _INT_KEYS | _FLOAT_KEYS | _STR_KEYS


@dataclass
class RunConfig:
    model: str = ""
    student: str = ""
    data: str = ""
    out: str = ""
    teacher_ckpt: str = ""
    student_ckpt: str = ""
    ckpt: str = ""
    seed: int = 0
    epochs: int = 15
    batch_size: int = 64
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-5
    sched_step: int = 5
    sched_gamma: float = 0.3
    alpha: float = 0.45
    temperature: float = 11.0
    augment: bool = True
    crop_lo: float = 0.7
    crop_hi: float = 1.0
    hflip_prob: float = 0.5
    norm_mean: float = 0.5
    norm_std: float = 0.5
    image_size: int = 32
    force: bool = False

    def distill_config(self) -> DistillConfig:
        return DistillConfig(alpha=self.alpha, temperature=self.temperature,
                             lr=self.lr, momentum=self.momentum,
                             weight_decay=self.weight_decay, epochs=self.epochs,
                             sched_step=self.sched_step, sched_gamma=self.sched_gamma,
                             batch_size=self.batch_size, seed=self.seed)

    def augment_config(self, enabled: bool | None = None) -> data_mod.AugmentConfig:
        return data_mod.AugmentConfig(
            crop_scale_range=(self.crop_lo, self.crop_hi),
            target_size=(self.image_size, self.image_size),
            hflip_prob=self.hflip_prob,
            normalize_mean=(self.norm_mean,),
            normalize_std=(self.norm_std,),
            enabled=self.augment if enabled is None else enabled)


def parse_config(path) -> dict:
    """Parse a line-oriented ``key = value`` file with ``#`` comments."""
    values: dict = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            if key in _BOOL_KEYS:
                if value not in ("true", "false"):
                    raise ValueError("expected true/false")
                values[key] = value == "true"
            elif key in _INT_KEYS:
                values[key] = int(value)
            elif key in _FLOAT_KEYS:
                values[key] = float(value)
            else:
                values[key] = value
        except ValueError as exc:
            kind = ("boolean" if key in _BOOL_KEYS
                    else "integer" if key in _INT_KEYS else "number")
            raise ConfigError(
                f"{path}:{lineno}: value {value!r} for {key!r} is not a {kind}") from exc
    return values


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_resolved(cfg: RunConfig, path: Path) -> None:
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}"
             for f in sorted(fields(RunConfig), key=lambda f: f.name)
             if f.name != "force"]
    path.write_text("\n".join(lines) + "\n")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults <- config file <- CLI flags, preset-aware."""
    cli = {k: v for k, v in vars(args).items()
           if k in CONFIG_KEYS and v is not None}
    file_vals = parse_config(args.config) if getattr(args, "config", None) else {}
    cfg = RunConfig()
    # teacher runs default to the long schedule; students (including every
    # distillation run) to the short one
    trained_preset = cli.get("student") or file_vals.get("student") \
        or cli.get("model") or file_vals.get("model", "")
    if trained_preset == "teacher" and getattr(args, "command", "") == "train":
        cfg.epochs, cfg.sched_step, cfg.sched_gamma = 50, 10, 0.1
    for key, value in file_vals.items():
        setattr(cfg, key, value)
    for key, value in cli.items():
        setattr(cfg, key, value)
    cfg.force = bool(getattr(args, "force", False))
    return cfg


def _prepare_out(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise ConfigError("--out is required")
    out = Path(cfg.out)
    if out.exists() and any(out.iterdir()) and not cfg.force:
        raise ConfigError(f"output directory {out} is not empty; use --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fmt_float(v: float) -> str:
    return repr(float(v))


def write_metrics_csv(reports: list[MetricsReport], path: Path) -> None:
    lines = [METRICS_HEADER]
    for r in reports:
        lines.append(",".join([
            str(r.epoch), r.split, _fmt_float(r.loss_total), _fmt_float(r.loss_kd),
            _fmt_float(r.loss_task), _fmt_float(r.acc), _fmt_float(r.mean_ap)]))
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model) -> None:
    """Binary KDCK dump: preset name plus all named tensors as f32."""
    entries = sorted(list(model.params.items()) + list(model.buffers.items()))
    name_bytes = model.spec.preset.encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(name_bytes)))
        fh.write(name_bytes)
        fh.write(struct.pack("<I", len(entries)))
        for name, tensor in entries:
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(tensor.data.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if len(buf) < off + size:
            raise FormatError(f"{path}: truncated checkpoint at byte offset {len(buf)}")
        vals = struct.unpack_from(fmt, buf, off)
        off += size
        return vals

    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {buf[:4]!r} at byte offset 0")
    off = 4
    (version,) = take("<I")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (plen,) = take("<I")
    preset = buf[off:off + plen].decode()
    off += plen
    (count,) = take("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = buf[off:off + nlen].decode()
        off += nlen
        (rank,) = take("<I")
        shape = take(f"<{rank}I") if rank else ()
        n_items = int(np.prod(shape, dtype=np.int64)) if shape else 1
        size = 4 * n_items
        if len(buf) < off + size:
            raise FormatError(f"{path}: truncated tensor {name!r} at byte offset {len(buf)}")
        arr = np.frombuffer(buf, dtype="<f4", count=n_items, offset=off)
        off += size
        tensors[name] = arr.astype(np.float64).reshape(shape)
    return preset, tensors


def apply_checkpoint(model, preset: str, tensors: dict[str, np.ndarray],
                     requested: str) -> None:
    if preset != requested:
        raise ConfigError(
            f"checkpoint holds preset {preset!r} but {requested!r} was requested")
    stores = dict(list(model.params.items()) + list(model.buffers.items()))
    missing = sorted(set(stores) - set(tensors))
    extra = sorted(set(tensors) - set(stores))
    if missing or extra:
        raise ConfigError(
            f"checkpoint tensor table mismatch (missing {missing[:3]}, extra {extra[:3]})")
    head = stores.get("head.bias")
    if head is not None and tensors["head.bias"].shape != head.shape:
        raise ConfigError(
            f"checkpoint was trained for {tensors['head.bias'].shape[0]} classes, "
            f"dataset has {head.shape[0]}")
    for name, arr in tensors.items():
        if arr.shape != stores[name].shape:
            raise ConfigError(
                f"checkpoint tensor {name!r} has shape {arr.shape}, "
                f"model expects {stores[name].shape}")
        stores[name].data[...] = arr


def _load_model_from_ckpt(path, dataset, image_size: int, seed: int = 0,
                          requested: str = ""):
    preset, tensors = load_checkpoint(path)
    spec = ModelSpec(preset=preset, in_channels=dataset.images.shape[1],
                     num_classes=len(dataset.class_names), image_size=image_size)
    model = build_model(spec, seed)
    apply_checkpoint(model, preset, tensors, requested or preset)
    return model


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(cfg: RunConfig) -> int:
    if not cfg.model:
        raise ConfigError("--model is required for train")
    train_ds, test_ds = data_mod.load_dir(cfg.data, cfg.image_size)
    spec = ModelSpec(preset=cfg.model, in_channels=train_ds.images.shape[1],
                     num_classes=len(train_ds.class_names),
                     image_size=cfg.image_size)
    model = build_model(spec, cfg.seed)
    out = _prepare_out(cfg)
    write_resolved(cfg, out / "config.resolved")
    reports = train_regular(model, train_ds, test_ds, cfg.distill_config(),
                            cfg.augment_config())
    write_metrics_csv(reports, out / "metrics.csv")
    save_checkpoint(out / "final.kdck", model)
    last = reports[-1]
    print(f"train[{cfg.model}] done: test acc {last.acc:.4f}, mAP {last.mean_ap:.4f}")
    return 0


def cmd_distill(cfg: RunConfig) -> int:
    if not cfg.student:
        raise ConfigError("--student is required for distill")
    if not cfg.teacher_ckpt:
        raise ConfigError("--teacher-ckpt is required for distill")
    train_ds, test_ds = data_mod.load_dir(cfg.data, cfg.image_size)
    teacher = _load_model_from_ckpt(cfg.teacher_ckpt, train_ds, cfg.image_size)
    spec = ModelSpec(preset=cfg.student, in_channels=train_ds.images.shape[1],
                     num_classes=len(train_ds.class_names),
                     image_size=cfg.image_size)
    student = build_model(spec, cfg.seed)
    out = _prepare_out(cfg)
    write_resolved(cfg, out / "config.resolved")
    reports = distill_train(teacher, student, train_ds, test_ds,
                            cfg.distill_config(), cfg.augment_config())
    write_metrics_csv(reports, out / "metrics.csv")
    save_checkpoint(out / "final.kdck", student)
    last = reports[-1]
    print(f"distill[{cfg.student}] done: test acc {last.acc:.4f}, mAP {last.mean_ap:.4f}")
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    if not cfg.ckpt:
        raise ConfigError("--ckpt is required for evaluate")
    _, test_ds = data_mod.load_dir(cfg.data, cfg.image_size)
    model = _load_model_from_ckpt(cfg.ckpt, test_ds, cfg.image_size,
                                  requested=cfg.model)
    out = _prepare_out(cfg)
    write_resolved(cfg, out / "config.resolved")
    aug = cfg.augment_config(enabled=False)
    logits = _collect_scores(model, test_ds, aug, cfg.batch_size)
    pred = metrics_mod.ScoredPredictions(logits, test_ds.labels)
    acc = metrics_mod.top1_accuracy(pred)
    mean_ap = metrics_mod.mean_ap(pred)
    per_class = metrics_mod.ap_by_class(pred)
    record = {
        "acc": acc,
        "map": mean_ap,
        "params": count_params(model),
        "per_class_ap": per_class,
    }
    with open(out / "evaluation.jsonl", "w") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
    print(f"evaluate[{model.spec.preset}]: acc {acc:.4f}, mAP {mean_ap:.4f}, "
          f"params {record['params']}")
    for c, ap in enumerate(per_class):
        shown = "undefined" if ap is None else f"{ap:.4f}"
        print(f"  class {test_ds.class_names[c]}: AP {shown}")
    return 0


def _collect_scores(model, ds, aug, batch_size: int) -> np.ndarray:
    images = data_mod.preprocess(ds.images.data, aug)
    rows = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            rows.append(model.forward(Tensor(images[start:start + batch_size]),
                                      mode="eval").data)
    return np.vstack(rows)


def cmd_compare(cfg: RunConfig) -> int:
    if not cfg.teacher_ckpt or not cfg.student_ckpt:
        raise ConfigError("compare needs --teacher-ckpt and --student-ckpt")
    _, test_ds = data_mod.load_dir(cfg.data, cfg.image_size)
    model_a = _load_model_from_ckpt(cfg.teacher_ckpt, test_ds, cfg.image_size)
    model_b = _load_model_from_ckpt(cfg.student_ckpt, test_ds, cfg.image_size)
    out = _prepare_out(cfg)
    write_resolved(cfg, out / "config.resolved")
    report = metrics_mod.compare_representations(
        model_a, model_b, test_ds, augment_cfg=cfg.augment_config(enabled=False))
    lines = ["sample_index,cosine,euclidean"]
    for i, (c, e) in enumerate(report.per_pair):
        lines.append(f"{i},{_fmt_float(c)},{_fmt_float(e)}")
    (out / "similarity.csv").write_text("\n".join(lines) + "\n")
    summary = {"cosine_mean": report.cosine_mean,
               "euclidean_mean": report.euclidean_mean,
               "samples": len(report.per_pair)}
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True) + "\n")
    print(f"compare: cosine_mean {report.cosine_mean:.6f}, "
          f"euclidean_mean {report.euclidean_mean:.6f}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="data directory (IDX pair or image folder)")
    p.add_argument("--out", help="output directory for run artifacts")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--force", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kdlab",
                                     description="Desk-scale knowledge-distillation lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model with hard labels")
    p.add_argument("--model", help="preset: teacher | vit | pvt | hybrid")
    _add_shared(p)

    p = sub.add_parser("distill", help="train a student against a frozen teacher")
    p.add_argument("--student", help="student preset: vit | pvt | hybrid")
    p.add_argument("--teacher-ckpt", dest="teacher_ckpt")
    _add_shared(p)

    p = sub.add_parser("evaluate", help="report accuracy / mAP for a checkpoint")
    p.add_argument("--ckpt")
    p.add_argument("--model", help="refuse the checkpoint unless it holds this preset")
    _add_shared(p)

    p = sub.add_parser("compare", help="feature similarity between two checkpoints")
    p.add_argument("--teacher-ckpt", dest="teacher_ckpt")
    p.add_argument("--student-ckpt", dest="student_ckpt")
    _add_shared(p)
    return parser


_COMMANDS = {
    "train": cmd_train,
    "distill": cmd_distill,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    tune_allocator()
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return _COMMANDS[args.command](cfg)
    except KdlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
