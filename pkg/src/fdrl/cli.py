"""Command-line entry point: ``fdrl {gradcheck,synth,train,eval,export-embeddings}``.

Exit codes: 0 success, 1 validation/configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import diffcore, objectives  # noqa: F401  (objectives registers loss gradchecks)
from .config import ABLATIONS, QUICKSTART, TrainConfig, apply_overrides, load_config, save_config
from .datasets import SynthSpec, generate_synthetic, kfold_split, load_features, write_features
from .errors import FDRLError, NumericalError
from .model import load_model
from .trainer import evaluate, latents, mean_metrics, train

log = logging.getLogger("fdrl")

OUTPUT_ROOT_ENV = "FDRL_OUTPUT_ROOT"
GRADCHECK_TOL = 1e-4


def _out_dir(arg, default_name):
    if arg:
        return Path(arg)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / default_name


def cmd_gradcheck(args):
    if args.op:
        unknown = [o for o in args.op if o not in diffcore.GRADCHECKS]
        if unknown:
            raise UsageError(f"unknown op {', '.join(unknown)}; known: {', '.join(diffcore.GRADCHECKS)}")
        names = args.op
    else:
        names = None
    results = diffcore.run_gradchecks(names, seed=args.seed)
    failed = []
    for name, err in results.items():
        ok = err < GRADCHECK_TOL
        print(f"{name:<20s} max_rel_err={err:.3e} {'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_synth(args):
    spec = SynthSpec(samples=args.samples, classes=args.classes, d_in=args.d_in,
                     shared_dim=args.shared_dim, private_dim_a=args.private_dim,
                     private_dim_t=args.private_dim, separation=args.separation, noise=args.noise,
                     modality_shift=args.modality_shift, private_scale=args.private_scale, map_seed=args.map_seed, folds=args.folds)
    ds = generate_synthetic(spec, seed=args.seed)
    out = Path(args.out)
    if out.suffix not in (".feat", ".csv"):
        out = out.with_suffix(".feat")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_features(out, ds)
    print(f"wrote {len(ds)} records to {out}")
    return 0


def _load_train_config(args):
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.quickstart:
        cfg = dataclasses.replace(cfg, **QUICKSTART)
    cfg = apply_overrides(cfg, args.set or [])
    if args.seed is not None:
        cfg = apply_overrides(cfg, [f"seed={args.seed}"])
    if args.ablation:
        cfg = cfg.with_ablation(args.ablation)
    return cfg


def cmd_train(args):
    from .trainer import resolve_config

    cfg = _load_train_config(args)
    ds = load_features(args.data, folds=cfg.folds)
    cfg = resolve_config(cfg, ds)  # dimension conflicts surface before any step
    out = _out_dir(args.out, "train")
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.ini")
    folds = range(1, ds.manifest.folds + 1) if args.all_folds else [args.fold]
    reports = []
    for fold in folds:
        kfold_split(ds, fold)
        result = train(cfg, ds, fold)
        fold_dir = out / f"fold{fold}"
        result.save(fold_dir, ds.manifest.class_names)
        save_config(cfg, fold_dir / "config.ini")
        reports.append(result.metrics)
        print(f"fold {fold}: WAR={result.metrics.war:.4f} UAR={result.metrics.uar:.4f} "
              f"({result.seconds:.1f}s)")
    if len(reports) > 1:
        summary = mean_metrics(reports)
        summary["folds"] = list(folds)
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")
        print(f"mean over {len(reports)} folds: WAR={summary['WAR']:.4f} UAR={summary['UAR']:.4f}")
    return 0


def _eval_data(args, model):
    ds = load_features(args.data)
    if args.fold:
        _, test = kfold_split(ds, args.fold)
        ds = ds.subset(test)
    return ds


def cmd_eval(args):
    model, echo = load_model(args.checkpoint)
    ds = _eval_data(args, model)
    report = evaluate(model, ds)
    print(report.to_text(ds.manifest.class_names), end="")
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                                  encoding="utf-8")
    return 0


EMBED_KINDS = ("S_a", "S_t", "P_a", "P_t")


def write_embeddings(path, codes, y):
    """CSV: kind, sample, emotion, modality, e0..e{d-1}; four rows per sample."""
    d = codes[0].shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "sample", "emotion", "modality"] + [f"e{j}" for j in range(d)])
        for kind, arr in zip(EMBED_KINDS, codes):
            modality = 0 if kind.endswith("_a") else 1
            for i, row in enumerate(arr):
                w.writerow([kind, i, int(y[i]), modality] + [repr(float(v)) for v in row])


def read_embeddings(path):
    """Returns {kind: (n x d array)} and the per-sample emotion labels."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out, labels = {}, {}
    for kind in EMBED_KINDS:
        sel = [r for r in rows if r["kind"] == kind]
        cols = [k for k in sel[0] if k[:1] == "e" and k[1:].isdigit()] if sel else []
        out[kind] = np.array([[float(r[c]) for c in cols] for r in sel])
        for r in sel:
            labels[int(r["sample"])] = int(r["emotion"])
    return out, np.array([labels[i] for i in sorted(labels)])


def cmd_export(args):
    model, _ = load_model(args.checkpoint)
    ds = _eval_data(args, model)
    if ds.h_a.shape[1] != model.d_in:
        from .errors import DimensionError
        raise DimensionError(f"data d_in={ds.h_a.shape[1]} but checkpoint expects {model.d_in}")
    codes = latents(model, ds)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_embeddings(args.out, codes, ds.y)
    print(f"wrote {4 * len(ds)} embedding rows to {args.out}")
    return 0


class UsageError(FDRLError):
    pass


def build_parser():
    p = argparse.ArgumentParser(prog="fdrl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference checks of every op and loss term")
    scope = g.add_mutually_exclusive_group()
    scope.add_argument("--all", action="store_true", help="run every registered check (default)")
    scope.add_argument("--op", action="append", help="run only this check (repeatable)")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a synthetic two-modality dataset")
    s.add_argument("--out", required=True, help="output path (.feat or .csv); sidecars share the stem")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--samples", type=int, default=2000)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--d-in", type=int, default=64)
    s.add_argument("--shared-dim", type=int, default=8)
    s.add_argument("--private-dim", type=int, default=8)
    s.add_argument("--separation", type=float, default=SynthSpec.separation)
    s.add_argument("--noise", type=float, default=SynthSpec.noise)
    s.add_argument("--modality-shift", type=float, default=SynthSpec.modality_shift)
    s.add_argument("--private-scale", type=float, default=SynthSpec.private_scale,
                   help="std of the modality-private factors")
    s.add_argument("--map-seed", type=int, default=0)
    s.add_argument("--folds", type=int, default=5)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one fold or all folds")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--quickstart", action="store_true",
                   help="desk-scale preset: d=32, 50 epochs, batch 32, lr 1e-3 (applied before --set)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    t.add_argument("--ablation", choices=sorted(ABLATIONS), help="loss-toggle preset (none = full model)")
    t.add_argument("--seed", type=int)
    folds = t.add_mutually_exclusive_group()
    folds.add_argument("--fold", type=int, default=1)
    folds.add_argument("--all-folds", action="store_true")
    t.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/train)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="WAR/UAR and confusion matrix of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--fold", type=int, help="evaluate only this fold's test split")
    e.add_argument("--out", help="also write the metrics as JSON here")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-embeddings", help="write S_a, S_t, P_a, P_t rows for plotting")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--fold", type=int)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FDRLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
