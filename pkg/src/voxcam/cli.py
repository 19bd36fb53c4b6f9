"""Command-line pipeline driver.

Exit codes: 0 success, 1 usage error (bad flags, bad config values),
2 data or file-format error, 3 numerical degeneracy. Progress goes to
stderr; machine-readable results go to stdout or files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DataError, DegeneracyError, InvalidSpec
from .explain import grad_cam, heat_score, heat_score_aggregate, write_pgm_slice
from .manifest import read_manifest
from .nifti import read_nifti, write_nifti
from .phantom import PhantomSpec, generate_cohort
from .resnet import STAGE_NAMES, build_model, spec_from_state
from .stats import (
    FoldMetrics,
    accuracy,
    format_mean_std,
    paired_t_test,
    roc_auc,
    summarize_runs,
    write_report,
)
from .train import CohortData, TrainConfig, make_folds, predict_logits, train_fold, zscore_normalize

__all__ = ["main"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# -- config handling ----------------------------------------------------------

_PATH_KEYS = ("manifest", "out", "tl")
_CONFIG_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _coerce(key: str, value: str):
    if key in _PATH_KEYS:
        return value
    f = _CONFIG_FIELDS[key]
    if key == "init":
        return value or None
    if f.type == "bool":
        low = value.strip().lower()
        if low in ("1", "true", "yes"):
            return True
        if low in ("0", "false", "no"):
            return False
        raise _UsageError(f"config key {key}: boolean expected, got {value!r}")
    try:
        if f.type == "int":
            return int(value)
        if f.type == "float":
            return float(value)
    except ValueError:
        raise _UsageError(f"config key {key}: {f.type} expected, got {value!r}") from None
    return value


def _read_config_file(path: str) -> dict:
    out: dict = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise _UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _CONFIG_FIELDS and key not in _PATH_KEYS:
            raise _UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def _resolve_train_config(args) -> tuple[TrainConfig, dict]:
    merged: dict = {}
    if args.config:
        merged.update(_read_config_file(args.config))
    for key in _CONFIG_FIELDS:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    for key in ("manifest", "out"):
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    file_tl = merged.pop("tl", None)
    tl = getattr(args, "tl", None) or file_tl or "none"
    if tl not in ("none", "finetune"):
        raise _UsageError(f"--tl must be none or finetune, got {tl!r}")
    if tl == "none" and merged.get("init"):
        raise _UsageError("--tl none does not take an init checkpoint")
    if tl == "finetune" and not merged.get("init"):
        raise _UsageError("--tl finetune requires --init")
    manifest = merged.pop("manifest", None)
    out = merged.pop("out", None)
    if not manifest or not out:
        raise _UsageError("--manifest and --out are required (flag or config file)")
    cfg = TrainConfig(**merged)
    return cfg, {"tl": tl, "manifest": manifest, "out": out}


def _write_resolved_config(cfg: TrainConfig, extra: dict, path: Path) -> None:
    lines = [f"{k}={extra[k]}" for k in ("tl", "manifest", "out")]
    for f in fields(TrainConfig):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name}={'' if v is None else v}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_cohort(manifest_path: str) -> CohortData:
    rows = read_manifest(manifest_path)
    return CohortData(rows, Path(manifest_path).parent)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _model_from_checkpoint(path: str):
    state = load_checkpoint(path)
    model = build_model(spec_from_state(state), seed=0)
    for name in model.load_state_dict(state):
        _progress(f"[load] ignoring extra tensor {name!r} in {path}")
    model.eval()
    return model


# -- subcommands ---------------------------------------------------------------

def _cmd_phantom_gen(args) -> int:
    radius = None
    if (args.radius_lo is None) != (args.radius_hi is None):
        raise _UsageError("--radius-lo and --radius-hi must be given together")
    if args.radius_lo is not None:
        radius = (args.radius_lo, args.radius_hi)
    spec = PhantomSpec(args.extent, radius, args.contrast, args.noise_sigma, args.seed)
    _progress(f"[phantom-gen] writing {2 * args.n} subjects to {args.out}")
    rows = generate_cohort(spec, args.n, args.out)
    _progress(f"[phantom-gen] wrote {len(rows)} subjects")
    print(str(Path(args.out) / "manifest.csv"))
    return 0


def _cmd_split(args) -> int:
    rows = read_manifest(args.manifest)
    splits = make_folds(
        [r.subject_id for r in rows],
        [r.label for r in rows],
        n_folds=args.folds,
        val_fraction=args.val_fraction,
        seed=args.seed,
    )
    doc = {
        "seed": args.seed,
        "folds": [
            {"fold": s.fold, "train": s.train, "val": s.val, "test": s.test}
            for s in splits
        ],
    }
    text = json.dumps(doc, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        _progress(f"[split] wrote {args.out}")
    else:
        print(text)
    return 0


def _cmd_train(args) -> int:
    cfg, extra = _resolve_train_config(args)
    out = Path(extra["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved_config(cfg, extra, out / "config.txt")
    data = _load_cohort(extra["manifest"])
    labels = [data.label(s) for s in data.ids]
    splits = make_folds(data.ids, labels, cfg.folds, cfg.val_fraction, cfg.seed)
    if args.fold == "all":
        selected = splits
    else:
        try:
            k = int(args.fold)
        except ValueError:
            raise _UsageError(f"--fold must be an integer or 'all', got {args.fold!r}") from None
        if not 0 <= k < len(splits):
            raise _UsageError(f"--fold {k} out of range for {len(splits)} folds")
        selected = [splits[k]]
    for split in selected:
        _progress(f"[train] fold {split.fold}: {len(split.train)} train / "
                  f"{len(split.val)} val / {len(split.test)} test")
        result = train_fold(
            cfg, data, split,
            progress=lambda line, f=split.fold: _progress(f"[train] fold {f} {line}"),
        )
        save_checkpoint(result.model, out / f"fold{split.fold}.ckpt")
        log_path = out / f"fold{split.fold}_log.csv"
        log_path.write_text(
            "epoch,train_loss,val_loss,lr\n" + "\n".join(result.log_lines) + "\n",
            encoding="utf-8",
        )
        _progress(f"[train] fold {split.fold} done: best epoch {result.best_epoch} "
                  f"of {result.epochs_run}")
    return 0


def _cmd_evaluate(args) -> int:
    data = _load_cohort(args.manifest)
    labels = [data.label(s) for s in data.ids]
    splits = make_folds(data.ids, labels, args.folds, args.val_fraction, args.seed)
    if not 0 <= args.fold < len(splits):
        raise _UsageError(f"--fold {args.fold} out of range for {len(splits)} folds")
    split = splits[args.fold]
    model = _model_from_checkpoint(args.ckpt)
    test_labels = data.labels(split.test)
    logits = predict_logits(model, data, split.test, args.batch_size)
    scores = _softmax(logits)[:, 1]
    preds = logits.argmax(axis=1)
    acc = accuracy(test_labels, preds)
    roc = roc_auc(test_labels, scores)

    heat: dict[str, float] = {}
    errors: list[str] = []
    for sid in split.test:
        if data.label(sid) != 1 or data.mask(sid) is None:
            continue
        h = grad_cam(model, data.normalized(sid), target_class=1, layer=args.layer)
        try:
            heat[sid] = heat_score(h, data.mask(sid)).hs
        except DegeneracyError as exc:
            errors.append(sid)
            _progress(f"[evaluate] {sid}: heat score skipped ({exc})")
    doc = {
        "fold": split.fold,
        "n_test": len(split.test),
        "accuracy": acc,
        "roc_auc": roc,
        "heat_scores": heat,
        "heat_errors": errors,
        "heat_aggregate": heat_score_aggregate(list(heat.values())) if heat else None,
    }
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"metrics_fold{split.fold}.json").write_text(
            json.dumps(doc, indent=2) + "\n", encoding="utf-8"
        )
        lines = ["subject_id,heat_score"]
        lines += [f"{sid},{hs:.6f}" for sid, hs in heat.items()]
        lines += [f"{sid},error" for sid in errors]
        (out / f"heatscores_fold{split.fold}.csv").write_text(
            "\n".join(lines) + "\n", encoding="utf-8"
        )
        _progress(f"[evaluate] wrote metrics to {out}")
    print(json.dumps(doc))
    return 0


def _cmd_gradcam(args) -> int:
    model = _model_from_checkpoint(args.ckpt)
    vol = zscore_normalize(read_nifti(args.image))
    h = grad_cam(model, vol, target_class=args.target_class, layer=args.layer)
    if h.degenerate_constant:
        _progress("[gradcam] map is constant; writing all zeros")
    write_nifti(h.values, args.out)
    if args.pgm:
        mask = read_nifti(args.mask) if args.mask else None
        write_pgm_slice(h, mask, args.pgm)
    print(args.out)
    return 0


def _cmd_heatscore(args) -> int:
    heat = read_nifti(args.heatmap)
    mask = read_nifti(args.mask)
    domain = read_nifti(args.domain) if args.domain else None
    result = heat_score(heat, mask, domain)
    print(f"{result.hs:.6f}")
    return 0


def _cmd_report(args) -> int:
    folds = []
    for path in args.metrics:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        folds.append(FoldMetrics(
            fold=doc["fold"],
            accuracy=doc["accuracy"],
            roc_auc=doc["roc_auc"],
            heat=list(doc.get("heat_scores", {}).values()),
        ))
    report = summarize_runs(folds, model=args.model, tl=args.tl, modality=args.modality)
    print(f"accuracy: {format_mean_std(report.acc_mean, report.acc_std)}")
    print(f"roc_auc: {format_mean_std(report.roc_mean, report.roc_std)}")
    print(f"Heat-Score: {report.heat_score:.3f}")
    if args.out:
        write_report([report], args.out)
        _progress(f"[report] wrote {args.out}")
    return 0


def _parse_numbers(path: str) -> list[float]:
    text = Path(path).read_text(encoding="utf-8")
    out = []
    for token in text.replace(",", " ").split():
        try:
            out.append(float(token))
        except ValueError:
            raise DataError(f"{path}: not a number: {token!r}") from None
    return out


def _cmd_ttest(args) -> int:
    result = paired_t_test(_parse_numbers(args.a), _parse_numbers(args.b))
    print(f"t={result.t:.6f} df={result.df} p={result.p:.6f}")
    return 0


def _cmd_inspect_ckpt(args) -> int:
    state = load_checkpoint(args.ckpt)
    total = 0
    for name, arr in state.items():
        print(f"{name} {'x'.join(map(str, arr.shape)) or 'scalar'}")
        total += arr.size
    print(f"tensors {len(state)} values {total}")
    return 0


# -- parser --------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="voxcam", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("phantom-gen", help="generate a synthetic cohort")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, required=True, help="subjects per class")
    g.add_argument("--extent", type=int, default=64)
    g.add_argument("--contrast", type=float, default=0.5)
    g.add_argument("--noise-sigma", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--radius-lo", type=float, default=None)
    g.add_argument("--radius-hi", type=float, default=None)
    g.set_defaults(func=_cmd_phantom_gen)

    s = sub.add_parser("split", help="print or write the fold assignment")
    s.add_argument("--manifest", required=True)
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--val-fraction", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None)
    s.set_defaults(func=_cmd_split)

    t = sub.add_parser("train", help="train one fold or all folds")
    t.add_argument("--manifest", default=None)
    t.add_argument("--out", default=None)
    t.add_argument("--config", default=None, help="key=value file; flags override")
    t.add_argument("--fold", default="all")
    t.add_argument("--tl", choices=("none", "finetune"), default=None)
    t.add_argument("--init", default=None, help="checkpoint for --tl finetune")
    for name, kind in (
        ("--depth", int), ("--base-width", int), ("--batch-size", int),
        ("--max-epochs", int), ("--folds", int), ("--seed", int),
        ("--lr", float), ("--val-fraction", float), ("--rotate-deg", float),
    ):
        t.add_argument(name, type=kind, default=None)
    t.add_argument("--freeze", choices=("none", "final_stage_and_head"), default=None)
    t.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("evaluate", help="test-set metrics for a trained fold")
    e.add_argument("--manifest", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--fold", type=int, required=True)
    e.add_argument("--folds", type=int, default=5)
    e.add_argument("--val-fraction", type=float, default=0.2)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--batch-size", type=int, default=2)
    e.add_argument("--layer", choices=STAGE_NAMES, default="stage4")
    e.add_argument("--out", default=None)
    e.set_defaults(func=_cmd_evaluate)

    c = sub.add_parser("gradcam", help="write an attribution heatmap volume")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--image", required=True)
    c.add_argument("--class", dest="target_class", type=int, default=1)
    c.add_argument("--layer", choices=STAGE_NAMES, default="stage4")
    c.add_argument("--out", required=True)
    c.add_argument("--pgm", default=None, help="also export the mid-axial slice")
    c.add_argument("--mask", default=None, help="lesion mask for the slice contour")
    c.set_defaults(func=_cmd_gradcam)

    h = sub.add_parser("heatscore", help="lesion attention score of a heatmap")
    h.add_argument("--heatmap", required=True)
    h.add_argument("--mask", required=True)
    h.add_argument("--domain", default=None)
    h.set_defaults(func=_cmd_heatscore)

    r = sub.add_parser("report", help="aggregate per-fold metrics files")
    r.add_argument("--metrics", nargs="+", required=True)
    r.add_argument("--model", default="resnet18")
    r.add_argument("--tl", default="none")
    r.add_argument("--modality", default="phantom")
    r.add_argument("--out", default=None)
    r.set_defaults(func=_cmd_report)

    tt = sub.add_parser("ttest", help="paired two-sided t-test of two series")
    tt.add_argument("--a", required=True)
    tt.add_argument("--b", required=True)
    tt.set_defaults(func=_cmd_ttest)

    i = sub.add_parser("inspect-ckpt", help="list checkpoint tensors")
    i.add_argument("--ckpt", required=True)
    i.set_defaults(func=_cmd_inspect_ckpt)
    return p


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except InvalidSpec as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DegeneracyError as exc:
        print(f"degenerate input: {exc}", file=sys.stderr)
        return 3
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
