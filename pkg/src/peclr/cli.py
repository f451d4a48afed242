"""Command-line entry point: ``peclr <command> ...``.

Exit codes: 0 ok, 2 usage, 3 I/O, 4 numeric failure.
"""
from __future__ import annotations

import os

# thread count must be fixed before numpy loads its BLAS
if os.environ.get("PECLR_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = os.environ["PECLR_THREADS"]

import argparse
import configparser
import csv
import io
import json
import shutil
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import augment as aug
from .encoder import Checkpoint, CheckpointError, EncoderConfig, load, save
from .ndiff import NonFiniteError
from .pose import equivariance_improvement, metrics, rotation_grid, translation_grid
from .seeding import STREAMS
from .synthhand import load_dataset, make_dataset
from .trainer import (FinetuneConfig, PretrainConfig, ProbeConfig, TrainingError, bone_length,
                      composition_search, finetune, lift_predictions, pretrain)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
ENV_OUT = "PECLR_OUTPUT_DIR"

# every accepted key with its default; anything else in a config file is an error
DEFAULTS = {
    "dataset": {"unlabeled": "", "weights": "", "labeled": ""},
    "model": {"input_side": "64", "widths": "8,16,32,64", "feature_dim": "128", "m": "64", "proj_hidden": "128"},
    "augment": {"pretrain": "scale,rotation,translation,color_jitter", "finetune": "scale,rotation,translation",
                "pretrain_translation": "15", "finetune_translation": "20"},
    "objective": {"name": "peclr", "translation_mode": "normalized", "tau": "0.5"},
    "optimizer": {"batch_size": "64", "lr": "auto", "lars": "true", "weight_decay": "1e-6", "prefetch": "0"},
    "schedule": {"epochs": "100", "warmup_epochs": "10"},
    "finetune": {"epochs": "50", "batch_size": "128", "lr": "5e-4", "warmup_epochs": "0", "label_fraction": "1.0",
                 "heldout_fraction": "0.1", "d_weight": "1.0", "eval_every": "1"},
    "probe": {"hidden": "256", "epochs": "50", "batch_size": "128", "lr": "1e-3", "heldout_fraction": "0.25"},
    "seeds": {"seed": "0"},
    "output": {"dir": "runs"},
}


class CliError(Exception):
    def __init__(self, msg, code):
        super().__init__(msg)
        self.code = code


# -- config --------------------------------------------------------------------------

def load_config(path=None) -> configparser.ConfigParser:
    """Defaults overlaid with ``path``; unknown sections or keys raise."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_dict(DEFAULTS)
    if path is None:
        return cp
    path = Path(path)
    if not path.is_file():
        raise CliError(f"config file not found: {path}", EXIT_IO)
    user = configparser.ConfigParser(interpolation=None)
    try:
        user.read(path)
    except configparser.Error as e:
        raise CliError(f"cannot parse {path}: {e}", EXIT_USAGE)
    for sec in user.sections():
        if sec not in DEFAULTS:
            raise CliError(f"{path}: unknown section [{sec}]", EXIT_USAGE)
        for key, val in user[sec].items():
            if key not in DEFAULTS[sec]:
                raise CliError(f"{path}: unknown key {key!r} in [{sec}]", EXIT_USAGE)
            cp[sec][key] = val
    return cp


def config_text(cp) -> str:
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _get(cp, sec, key, conv):
    raw = cp[sec][key]
    try:
        return conv(raw)
    except ValueError as e:
        raise CliError(f"[{sec}] {key} = {raw!r}: {e}", EXIT_USAGE)


def _bool(s):
    s = s.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _names(s):
    return [x.strip() for x in s.split(",") if x.strip()]


def model_config(cp, head="projection") -> EncoderConfig:
    try:
        return EncoderConfig(
            input_side=_get(cp, "model", "input_side", int),
            widths=tuple(_get(cp, "model", "widths", lambda s: [int(x) for x in _names(s)])),
            feature_dim=_get(cp, "model", "feature_dim", int), m=_get(cp, "model", "m", int),
            proj_hidden=_get(cp, "model", "proj_hidden", int), head=head)
    except ValueError as e:
        raise CliError(f"[model] {e}", EXIT_USAGE)


def augment_config(cp, which) -> aug.AugmentConfig:
    base = aug.pretrain_config() if which == "pretrain" else aug.finetune_config()
    # half-width of the translation range in px, applied to both axes
    shift = _get(cp, "augment", f"{which}_translation", float)
    try:
        return replace(base, translation_range=(-shift, shift)).only(_names(cp["augment"][which]))
    except ValueError as e:
        raise CliError(f"[augment] {which}: {e}", EXIT_USAGE)


def pretrain_config(cp, objective=None) -> PretrainConfig:
    lr = cp["optimizer"]["lr"].strip()
    try:
        return PretrainConfig(
            objective=objective or cp["objective"]["name"],
            translation_mode=cp["objective"]["translation_mode"],
            model=model_config(cp), augment=augment_config(cp, "pretrain"),
            batch_size=_get(cp, "optimizer", "batch_size", int),
            epochs=_get(cp, "schedule", "epochs", float),
            warmup_epochs=_get(cp, "schedule", "warmup_epochs", float),
            lr=None if lr == "auto" else _get(cp, "optimizer", "lr", float),
            lars=_get(cp, "optimizer", "lars", _bool),
            weight_decay=_get(cp, "optimizer", "weight_decay", float),
            tau=_get(cp, "objective", "tau", float),
            seed=_get(cp, "seeds", "seed", int),
            dataset_weights=_get(cp, "dataset", "weights", lambda s: [float(x) for x in _names(s)]) or None,
            prefetch=_get(cp, "optimizer", "prefetch", int))
    except ValueError as e:
        raise CliError(str(e), EXIT_USAGE)


def finetune_config(cp, label_fraction=None) -> FinetuneConfig:
    f = lambda key, conv=float: _get(cp, "finetune", key, conv)
    try:
        return FinetuneConfig(
            label_fraction=f("label_fraction") if label_fraction is None else label_fraction,
            epochs=f("epochs"), batch_size=f("batch_size", int), lr=f("lr"), warmup_epochs=f("warmup_epochs"),
            heldout_fraction=f("heldout_fraction"), augment=augment_config(cp, "finetune"),
            model=model_config(cp, "pose"), seed=_get(cp, "seeds", "seed", int), d_weight=f("d_weight"),
            eval_every=f("eval_every", int), prefetch=_get(cp, "optimizer", "prefetch", int))
    except ValueError as e:
        raise CliError(str(e), EXIT_USAGE)


def probe_config(cp) -> ProbeConfig:
    f = lambda key, conv=float: _get(cp, "probe", key, conv)
    return ProbeConfig(hidden=f("hidden", int), epochs=f("epochs", int), batch_size=f("batch_size", int),
                       lr=f("lr"), heldout_fraction=f("heldout_fraction"), seed=_get(cp, "seeds", "seed", int))


# -- output plumbing ----------------------------------------------------------------------

def output_dir(args, cp) -> Path:
    """``--out`` beats the environment, which beats ``[output] dir``."""
    if getattr(args, "out", None):
        return Path(args.out)
    base = os.environ.get(ENV_OUT) or cp["output"]["dir"]
    return Path(base) / args.command


def prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        if not force:
            raise CliError(f"{path} already exists; pass --force to overwrite", EXIT_USAGE)
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError(f"cannot create {path}: {e}", EXIT_IO)
    return path


def write_manifest(out: Path, command: str, cp, extra: dict):
    """Resolved config and seeds, written before any work starts."""
    seed = int(cp["seeds"]["seed"]) if cp is not None else None
    doc = {"command": command, "version": __version__,
           "config": {s: dict(cp[s]) for s in cp.sections()} if cp is not None else {},
           "seeds": {"root": seed, "streams": list(STREAMS)}}
    doc.update(extra)
    (out / "manifest.json").write_text(json.dumps(doc, indent=2) + "\n")
    if cp is not None:
        (out / "config.ini").write_text(config_text(cp))


def write_csv(path: Path, fields, rows):
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})


def read_dataset(path):
    if not path:
        raise CliError("no dataset given", EXIT_USAGE)
    try:
        return load_dataset(path)
    except (FileNotFoundError, OSError, ValueError, KeyError) as e:
        raise CliError(f"cannot read dataset {path}: {e}", EXIT_IO)


def read_checkpoint(path):
    try:
        return load(path)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {path}", EXIT_IO)
    except (CheckpointError, OSError) as e:
        raise CliError(f"cannot read checkpoint {path}: {e}", EXIT_IO)


def pose_predictor(path: str):
    ck = read_checkpoint(path)
    if ck.config.head != "pose":
        raise CliError(f"{path} has no pose head; fine-tune it first", EXIT_USAGE)
    model = ck.model()
    return lambda images: model.predict_pose(np.asarray(images, dtype=np.float64))[0]


# -- commands ------------------------------------------------------------------------------

def cmd_gen_data(args):
    out = prepare_out(Path(args.out), args.force)
    try:
        manifest = make_dataset(args.n, args.seed, args.labeled_fraction, out, size=args.size)
    except ValueError as e:
        raise CliError(str(e), EXIT_USAGE)
    except OSError as e:
        raise CliError(f"cannot write dataset to {out}: {e}", EXIT_IO)
    print(manifest)


def cmd_pretrain(args):
    cp = load_config(args.config)
    if args.dataset:
        cp["dataset"]["unlabeled"] = ",".join(args.dataset)
    cfg = pretrain_config(cp, args.objective)
    cp["objective"]["name"] = cfg.objective
    paths = _names(cp["dataset"]["unlabeled"])
    if not paths:
        raise CliError("no unlabeled dataset: set [dataset] unlabeled or pass --dataset", EXIT_USAGE)
    datasets = [read_dataset(p) for p in paths]
    out = prepare_out(output_dir(args, cp), args.force)
    write_manifest(out, "pretrain", cp, {"objective": cfg.objective, "datasets": paths,
                                         "resolved_lr": cfg.base_lr})
    try:
        res = pretrain(cfg, datasets, trace_path=out / "trace.csv")
    except ValueError as e:
        raise CliError(str(e), EXIT_USAGE)
    save(res.checkpoint, out / "checkpoint.ckpt")
    print(out / "checkpoint.ckpt")


REPORT_FIELDS = ("epoch", "space", "n", "epe", "pa_epe", "auc", "pa_auc", "epe_2d")


def cmd_finetune(args):
    cp = load_config(args.config)
    if args.dataset:
        cp["dataset"]["labeled"] = args.dataset
    if args.label_fraction is not None:
        if not 0 < args.label_fraction <= 1:
            raise CliError(f"--label-fraction must lie in (0, 1], got {args.label_fraction}", EXIT_USAGE)
        cp["finetune"]["label_fraction"] = repr(args.label_fraction)
    if args.init == "checkpoint" and not args.checkpoint:
        raise CliError("--init checkpoint needs --checkpoint PATH", EXIT_USAGE)
    cfg = finetune_config(cp)
    ds = read_dataset(cp["dataset"]["labeled"])
    ck = read_checkpoint(args.checkpoint) if args.init == "checkpoint" else None
    if ck is not None:
        # the checkpoint's architecture wins; echo it so the manifest is truthful
        for k, v in ck.config.to_dict().items():
            if k in cp["model"]:
                cp["model"][k] = ",".join(map(str, v)) if isinstance(v, list) else str(v)
    out = prepare_out(output_dir(args, cp), args.force)
    write_manifest(out, "finetune", cp, {"init": args.init, "checkpoint": args.checkpoint,
                                         "dataset": cp["dataset"]["labeled"]})
    try:
        res = finetune(cfg, ds, checkpoint=ck, trace_path=out / "trace.csv")
    except ValueError as e:
        raise CliError(str(e), EXIT_USAGE)
    epochs = [int(r["epoch"]) + 1 for r in res.trace if r["epe"] != ""]
    write_csv(out / "metrics.csv", REPORT_FIELDS,
              [dict(epoch=e, **rep.csv_row()) for e, rep in zip(epochs, res.reports)])
    (out / "final.json").write_text(res.final.to_json() + "\n")
    save(Checkpoint(res.model.cfg, res.model.params, {}, 0, None, {"init": args.init}), out / "model.ckpt")
    print(out / "model.ckpt")


def cmd_eval(args):
    ds = read_dataset(args.dataset)
    if len(ds) == 0:
        raise CliError(f"dataset {args.dataset} is empty", EXIT_USAGE)
    if args.model == "oracle":
        j2d, d_r = ds.J2D, ds.d_r
    else:
        ck = read_checkpoint(args.model)
        if ck.config.head != "pose":
            raise CliError(f"{args.model} has no pose head; fine-tune it first", EXIT_USAGE)
        j2d, d_r = ck.model().predict_pose(ds.images.astype(np.float64))
    J3D = lift_predictions(j2d, d_r, ds.K, bone_length(ds.J3D))
    rep = metrics(J3D, ds.J3D, "3d", args.aligned, pred_2d=j2d, gt_2d=ds.J2D)
    out = prepare_out(Path(args.out) if args.out else output_dir(args, load_config()), args.force)
    (out / "report.json").write_text(rep.to_json() + "\n")
    (out / "pck.csv").write_text(rep.pck_csv())
    print(rep.to_json())


def cmd_equiv_report(args):
    ds = read_dataset(args.dataset)
    if len(ds) == 0:
        raise CliError(f"dataset {args.dataset} is empty", EXIT_USAGE)
    if args.limit:
        ds = ds.subset(np.arange(min(args.limit, len(ds))))
    a = pose_predictor(args.model_a)
    b = a if args.model_b == args.model_a else pose_predictor(args.model_b)
    grid = rotation_grid(args.points or 17) if args.grid == "rotation" else translation_grid(args.points or 5)
    rows = equivariance_improvement(a, b, ds.images.astype(np.float64), grid)
    out = prepare_out(Path(args.out) if args.out else output_dir(args, load_config()), args.force)
    fields = ("rotation_deg", "tx", "ty", "l_equiv_a", "l_equiv_b", "l_improv", "n_used", "n_skipped")
    write_csv(out / "equiv.csv", fields, [asdict(r) for r in rows])
    vals = [r.l_improv for r in rows if np.isfinite(r.l_improv)]
    summary = {"grid": args.grid, "points": len(rows), "mean_l_improv": float(np.mean(vals)) if vals else None,
               "skipped_points": sum(1 for r in rows if not np.isfinite(r.l_improv))}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))


def cmd_ablate(args):
    cands = _names(args.candidates)
    if not 1 <= len(cands) <= 5:
        raise CliError(f"--candidates takes 1 to 5 transforms, got {len(cands)}", EXIT_USAGE)
    cp = load_config(args.config)
    cfg = pretrain_config(cp)
    unlabeled = read_dataset(args.unlabeled or cp["dataset"]["unlabeled"])
    labeled = read_dataset(args.labeled or cp["dataset"]["labeled"])
    out = prepare_out(output_dir(args, cp), args.force)
    write_manifest(out, "ablate-compositions", cp, {"candidates": cands})
    try:
        rows = composition_search(cands, cfg, unlabeled, labeled, probe_config(cp))
    except ValueError as e:
        raise CliError(str(e), EXIT_USAGE)
    write_csv(out / "ranking.csv", ("rank", "composition", "epe_3d", "epe_2d", "final_loss"), rows)
    print(out / "ranking.csv")


# -- parser --------------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="peclr", description="Equivariant contrastive pretraining for 2.5D hand pose.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        sp.add_argument("--out", help="output directory (else $%s or [output] dir)" % ENV_OUT)
        sp.add_argument("--force", action="store_true", help="overwrite an existing output directory")
        if config:
            sp.add_argument("--config", help="sectioned key = value config file")

    g = sub.add_parser("gen-data", help="write a synthetic hand dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--labeled-fraction", type=float, default=1.0)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("pretrain", help="contrastive pretraining")
    common(s)
    s.add_argument("--objective", choices=("simclr", "peclr"))
    s.add_argument("--dataset", action="append", help="unlabeled dataset dir (repeatable)")
    s.set_defaults(func=cmd_pretrain)

    f = sub.add_parser("finetune", help="supervised 2.5D fine-tuning")
    common(f)
    f.add_argument("--init", choices=("none", "checkpoint"), default="none")
    f.add_argument("--checkpoint")
    f.add_argument("--label-fraction", type=float)
    f.add_argument("--dataset", help="labeled dataset dir")
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("eval", help="metrics of a pose model on a dataset")
    common(e, config=False)
    e.add_argument("--model", required=True, help="pose checkpoint or 'oracle'")
    e.add_argument("--dataset", required=True)
    e.add_argument("--aligned", action="store_true", help="report Procrustes-aligned PCK/AUC")
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("equiv-report", help="equivariance deviation of two pose models")
    common(q, config=False)
    q.add_argument("--model-a", required=True, help="baseline pose checkpoint")
    q.add_argument("--model-b", required=True, help="compared pose checkpoint")
    q.add_argument("--dataset", required=True)
    q.add_argument("--grid", choices=("rotation", "translation"), default="rotation")
    q.add_argument("--points", type=int, help="grid points (per axis for translation)")
    q.add_argument("--limit", type=int, help="use only the first N images")
    q.set_defaults(func=cmd_equiv_report)

    a = sub.add_parser("ablate-compositions", help="rank augmentation compositions by probe error")
    common(a)
    a.add_argument("--candidates", required=True, help="comma-separated transform names (1 to 5)")
    a.add_argument("--unlabeled")
    a.add_argument("--labeled")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # argparse usage errors, --help, --version
        return int(e.code or 0)
    try:
        args.func(args)
    except CliError as e:
        print(f"peclr: {e}", file=sys.stderr)
        return e.code
    except (TrainingError, NonFiniteError) as e:
        print(f"peclr: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"peclr: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
