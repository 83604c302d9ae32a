"""Command-line surface: one subcommand per pipeline stage.

Every subcommand accepts ``--config FILE`` (JSON of option defaults, keyed
by option name with underscores); explicitly passed flags win over the
config file.  Exit code 0 on success, nonzero with a one-line stderr
diagnostic on any rejection.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import blobs, evaluation, model, training

_GEN_DEFAULTS = {"n_objects": 20, "views": 5, "image_size": 32, "seed": 0}
_TRAIN_DEFAULTS = {
    "mode": "2d", "views": 2, "pooling": "max", "epochs": 40, "batch_size": 16,
    "optimizer": "sgd", "lr": 0.01, "momentum": 0.9, "weight_decay": 1e-3,
    "jitter": 2, "seed": 0, "eval_seed": 1234, "feature_dim": 128,
    "voxel_size": 25, "freeze_encoder": False, "init_from": "", "quiet": False,
}
_EVAL_DEFAULTS = {"k": 2, "split": "test", "mode": "", "seed": 1234}
_MATRIX_DEFAULTS = {"ks": "1,2,3", "epochs": 40, "seed": 0, "eval_seed": 1234}
_CARVE_DEFAULTS = {"split": "train", "n_objects": 20, "seed": 0}
_RENDER_DEFAULTS = {"object": "", "split": "test", "view_indices": "0,1",
                    "thetas": "0,15,30,45,60,75,90,105,120", "mode": ""}


def _merged(args: argparse.Namespace, defaults: dict) -> dict:
    """Layer hard defaults < --config file < explicit flags."""
    opts = dict(defaults)
    if getattr(args, "config", None):
        with open(args.config) as fh:
            loaded = json.load(fh)
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise ValueError(f"config: unknown keys {sorted(unknown)}")
        opts.update(loaded)
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None:
            opts[key] = flag
    return opts


def _int_list(text) -> list:
    return [int(tok) for tok in str(text).split(",") if tok.strip() != ""]


def _float_list(text) -> list:
    return [float(tok) for tok in str(text).split(",") if tok.strip() != ""]


def _add_common(sub, out_required=True, out_help="output directory"):
    sub.add_argument("--seed", type=int, help="master seed")
    sub.add_argument("--out", required=out_required, help=out_help)
    sub.add_argument("--config", help="JSON file of option defaults")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="silcarve",
                                description="silhouette prediction pipeline")
    subs = p.add_subparsers(dest="command", required=True)

    g = subs.add_parser("gen-data", help="generate a blobby-object dataset")
    g.add_argument("--n-objects", type=int, dest="n_objects")
    g.add_argument("--views", type=int, help="views per object")
    g.add_argument("--image-size", type=int, dest="image_size")
    _add_common(g, out_help="dataset directory to create")

    t = subs.add_parser("train", help="train a silhouette predictor")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--mode", choices=["2d", "3d", "2D", "3D"])
    t.add_argument("--views", type=int, help="input views per sample")
    t.add_argument("--pooling", choices=["max", "avg"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--optimizer", choices=["sgd", "adam"])
    t.add_argument("--lr", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--weight-decay", type=float, dest="weight_decay")
    t.add_argument("--jitter", type=int)
    t.add_argument("--eval-seed", type=int, dest="eval_seed")
    t.add_argument("--feature-dim", type=int, dest="feature_dim")
    t.add_argument("--voxel-size", type=int, dest="voxel_size")
    t.add_argument("--freeze-encoder", action="store_const", const=True,
                   dest="freeze_encoder")
    t.add_argument("--init-from", dest="init_from", help="warm-start checkpoint")
    t.add_argument("--quiet", action="store_const", const=True)
    _add_common(t, out_help="run directory for best.ckpt + train_log.jsonl")

    e = subs.add_parser("eval", help="mean IoU of a checkpoint on a split")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--k", type=int, help="input views at test time")
    e.add_argument("--split", choices=["train", "val", "test"])
    e.add_argument("--mode", choices=["2d", "3d", "2D", "3D", ""])
    _add_common(e, out_required=False, out_help="optional JSON report path")

    m = subs.add_parser("matrix", help="train variants and tabulate IoU vs k")
    m.add_argument("--data", required=True)
    m.add_argument("--ks", help="comma-separated tower counts, e.g. 1,2,3")
    m.add_argument("--epochs", type=int)
    m.add_argument("--eval-seed", type=int, dest="eval_seed")
    m.add_argument("--variants", help="JSON file: {name: train options}")
    _add_common(m, out_help="matrix output directory")

    c = subs.add_parser("carve-check", help="visual-hull consistency oracle")
    c.add_argument("--data", required=True)
    c.add_argument("--split", choices=["train", "val", "test"])
    c.add_argument("--n-objects", type=int, dest="n_objects")
    c.add_argument("--seed", type=int, help="object sampling seed")
    c.add_argument("--out", help="optional JSON report path")
    c.add_argument("--config", help="JSON file of option defaults")

    r = subs.add_parser("render", help="dump predicted silhouettes as PGM")
    r.add_argument("--data", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--object", help="object id (default: first in split)")
    r.add_argument("--split", choices=["train", "val", "test"])
    r.add_argument("--view-indices", dest="view_indices",
                   help="comma-separated input view indices")
    r.add_argument("--thetas", help="comma-separated query azimuths in degrees")
    r.add_argument("--mode", choices=["2d", "3d", "2D", "3D", ""])
    _add_common(r, out_help="directory for PGM/VOX dumps")

    return p


def _cmd_gen_data(args) -> int:
    opts = _merged(args, _GEN_DEFAULTS)
    ds = blobs.build_dataset(opts["n_objects"], n_views=opts["views"],
                             h=opts["image_size"], seed=opts["seed"],
                             out_dir=args.out)
    counts = {name: len(ds.split(name)) for name in ("train", "val", "test")}
    print(f"wrote {len(ds)} objects to {args.out} "
          f"(train/val/test = {counts['train']}/{counts['val']}/{counts['test']})")
    return 0


def _train_config(opts: dict, out_dir: str) -> training.TrainConfig:
    return training.TrainConfig(
        mode=opts["mode"].lower(), n_views=opts["views"], pooling=opts["pooling"],
        epochs=opts["epochs"], batch_size=opts["batch_size"],
        optimizer=opts["optimizer"], lr=opts["lr"], momentum=opts["momentum"],
        weight_decay=opts["weight_decay"], jitter=opts["jitter"],
        seed=opts["seed"], eval_seed=opts["eval_seed"],
        feature_dim=opts["feature_dim"], voxel_size=opts["voxel_size"],
        freeze_encoder=opts["freeze_encoder"], init_from=opts["init_from"],
        out_dir=out_dir,
    )


def _cmd_train(args) -> int:
    opts = _merged(args, _TRAIN_DEFAULTS)
    ds = blobs.load_dataset(args.data)
    cfg = _train_config(opts, args.out)
    log = None if opts["quiet"] else print
    result = training.train(ds, cfg, log=log)
    print(f"best val IoU {result.best_val_iou:.4f}  checkpoint {result.best_path}")
    return 0


def _cmd_eval(args) -> int:
    opts = _merged(args, _EVAL_DEFAULTS)
    ds = blobs.load_dataset(args.data)
    report = evaluation.evaluate(args.checkpoint, ds, k=opts["k"],
                                 mode=opts["mode"] or "2d", split=opts["split"],
                                 eval_seed=opts["seed"])
    print(f"split={report.split} k={report.n_towers_test} mode={report.mode} "
          f"pooling={report.pooling} n={report.count} mean IoU {report.mean_iou:.4f}")
    if args.out:
        payload = {
            "mean_iou": report.mean_iou, "count": report.count,
            "split": report.split, "k": report.n_towers_test,
            "mode": report.mode, "pooling": report.pooling,
            "per_object": report.per_object,
        }
        with open(args.out, "w") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
            fh.write("\n")
    return 0


def _cmd_matrix(args) -> int:
    opts = _merged(args, _MATRIX_DEFAULTS)
    ds = blobs.load_dataset(args.data)
    ks = _int_list(opts["ks"])
    if getattr(args, "variants", None):
        with open(args.variants) as fh:
            raw = json.load(fh)
        variants = {}
        for name, overrides in raw.items():
            merged = dict(_TRAIN_DEFAULTS)
            merged.update({"epochs": opts["epochs"], "seed": opts["seed"],
                           "eval_seed": opts["eval_seed"]})
            unknown = set(overrides) - set(merged)
            if unknown:
                raise ValueError(f"variants[{name}]: unknown keys {sorted(unknown)}")
            merged.update(overrides)
            variants[name] = _train_config(merged, out_dir="")
    else:
        base = dict(_TRAIN_DEFAULTS)
        base.update({"epochs": opts["epochs"], "seed": opts["seed"],
                     "eval_seed": opts["eval_seed"]})
        variants = {
            "max-1t": _train_config({**base, "views": 1}, ""),
            "max-2t": _train_config({**base, "views": 2}, ""),
            "avg-2t": _train_config({**base, "views": 2, "pooling": "avg"}, ""),
        }
    matrix = evaluation.run_matrix(variants, ds, ks, args.out,
                                   eval_seed=opts["eval_seed"])
    print(matrix.text_table(), end="")
    return 0


def _cmd_carve_check(args) -> int:
    opts = _merged(args, _CARVE_DEFAULTS)
    ds = blobs.load_dataset(args.data)
    report = evaluation.carve_check(ds, split=opts["split"],
                                    n_objects=opts["n_objects"],
                                    seed=opts["seed"])
    print(f"objects={report.n_objects} views={len(report.per_view)} "
          f"mean IoU {report.mean_iou:.4f} min {report.min_iou:.4f} "
          f"commission violations {report.commission_violations}")
    if args.out:
        payload = {
            "mean_iou": report.mean_iou, "min_iou": report.min_iou,
            "commission_violations": report.commission_violations,
            "n_objects": report.n_objects,
            "per_view": [[oid, m, v] for oid, m, v in report.per_view],
        }
        with open(args.out, "w") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
            fh.write("\n")
    return 0


def _cmd_render(args) -> int:
    opts = _merged(args, _RENDER_DEFAULTS)
    ds = blobs.load_dataset(args.data)
    split = opts["split"]
    objs = sorted(ds.split(split), key=lambda o: o.obj_id)
    if not objs:
        raise ValueError(f"render: split {split!r} is empty")
    if opts["object"]:
        matches = [o for o in objs if o.obj_id == opts["object"]]
        if not matches:
            raise ValueError(f"render: object {opts['object']!r} not in {split}")
        obj = matches[0]
    else:
        obj = objs[0]
    indices = _int_list(opts["view_indices"])
    bad = [i for i in indices if not 0 <= i < len(obj.views)]
    if bad:
        raise ValueError(f"render: view indices {bad} out of range")
    views = [obj.views[i] for i in indices]
    thetas = _float_list(opts["thetas"])
    written = evaluation.render_outputs(args.checkpoint, views, thetas,
                                        args.out, mode=opts["mode"])
    print(f"wrote {len(written)} files to {args.out} "
          f"(object {obj.obj_id}, {len(thetas)} azimuths)")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "matrix": _cmd_matrix,
    "carve-check": _cmd_carve_check,
    "render": _cmd_render,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
