"""Command line entry point: ``misure <verb> ...``.

Settings resolve in three layers: built-in defaults, then a JSON file given
with ``--config``, then explicit flags. Exit codes: 0 success, 1 when every
image failed, 2 for bad configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from .config import MisureConfig, RiseConfig, SgcConfig
from .exceptions import ConfigError, FormatError, MisureError

logger = logging.getLogger("misure")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2

# flag -> MisureConfig field
MISURE_FLAGS = {
    "tau": "tau", "lr": "lr", "lambda_": "lam", "gamma": "gamma", "beta": "beta",
    "iters": "iterations", "clamp_low": "clamp_low", "mask_size": "mask_size",
    "alpha_fg": "alpha_fg", "alpha_bg": "alpha_bg", "seed": "seed",
}


def _default_out(name):
    return str(Path(os.environ.get("MISURE_OUT", "misure_out")) / name)


def _mask_size(text):
    if text.lower() in ("image", "none"):
        return None
    parts = text.lower().replace("x", ",").split(",")
    if len(parts) == 1:
        return (int(parts[0]), int(parts[0]))
    return tuple(int(p) for p in parts)


def _add_misure_flags(p):
    g = p.add_argument_group("MiSuRe settings")
    g.add_argument("--tau", type=float)
    g.add_argument("--lr", type=float)
    g.add_argument("--lambda", dest="lambda_", type=float)
    g.add_argument("--gamma", type=float)
    g.add_argument("--beta", type=float)
    g.add_argument("--iters", type=int)
    g.add_argument("--clamp-low", type=float)
    g.add_argument("--mask-size", type=_mask_size, help="N, HxW, or 'image'")
    g.add_argument("--alpha-fg", type=float)
    g.add_argument("--alpha-bg", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--rise-masks", type=int)
    g.add_argument("--threshold", type=float, action="append",
                   help="binarization threshold for baselines (repeatable)")
    g.add_argument("--layer", help="Seg-Grad-CAM layer name")
    g.add_argument("--config", help="JSON file with settings")


def _add_data_flags(p):
    p.add_argument("--data", required=True, help="dataset directory with manifest.json")
    p.add_argument("--split", default="val", choices=("train", "val", "all"))
    p.add_argument("--limit", type=int)
    p.add_argument("--model", required=True, help="toy model file (MISU-M)")
    p.add_argument("--adapter", default="toy")
    p.add_argument("--parallelism", type=int, default=1)


def build_parser():
    parser = argparse.ArgumentParser(prog="misure", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("dataset", help="generate a Triangle dataset")
    p.add_argument("--kind", choices=("triangle", "triangle-tiny"), default="triangle-tiny")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int)
    p.add_argument("--fashion-mnist", help="directory with Fashion-MNIST IDX files")
    p.add_argument("--out")

    p = sub.add_parser("train-toy", help="train the reference segmentation model")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("explain", help="compute saliency maps and metrics")
    _add_data_flags(p)
    _add_misure_flags(p)
    p.add_argument("--method", choices=("misure", "rise", "occlusion", "seggradcam"), default="misure")
    p.add_argument("--out")
    p.add_argument("--no-artifacts", action="store_true")
    p.add_argument("--corrupt", type=float, metavar="FRACTION",
                   help="explain this fraction of images with a model that predicts a spurious "
                        "class-1 patch (reliability protocol)")

    p = sub.add_parser("sweep", help="hyperparameter sweeps (learning rate x lambda, or mask size)")
    _add_data_flags(p)
    _add_misure_flags(p)
    p.add_argument("--grid", choices=("lr-lambda", "mask-size"), default="lr-lambda")
    p.add_argument("--values", help="JSON object overriding the grid values")
    p.add_argument("--out")

    p = sub.add_parser("insights", help="dilations / perturbation ratio vs prediction size")
    p.add_argument("--records", required=True)
    p.add_argument("--out")
    p.add_argument("--plot", action="store_true")

    p = sub.add_parser("reliability", help="post-hoc reliability classifier")
    p.add_argument("--mode", choices=("train", "eval", "predict"), required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--gt", help="directory with {image_id}_mask.png ground truth")
    p.add_argument("--models", help="directory holding per-class model JSON files")
    p.add_argument("--threshold", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    return parser


def load_json_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def resolve_settings(args):
    """Merge defaults, the JSON config file and flags into a RunSettings."""
    from .harness import RunSettings

    data = load_json_config(getattr(args, "config", None))
    misure = dict(data.get("misure", {}))
    rise = dict(data.get("rise", {}))
    sgc = dict(data.get("seggradcam", {}))
    for flag, name in MISURE_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            misure[name] = value
    if getattr(args, "seed", None) is not None:
        rise["seed"] = args.seed
    if getattr(args, "rise_masks", None) is not None:
        rise["n_masks"] = args.rise_masks
    if getattr(args, "layer", None):
        sgc["layer"] = args.layer
    thresholds = getattr(args, "threshold", None) or data.get("thresholds")
    for cls, section in ((MisureConfig, misure), (RiseConfig, rise), (SgcConfig, sgc)):
        unknown = set(section) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown {cls.__name__} settings: {sorted(unknown)}")
    try:
        return RunSettings(
            misure=MisureConfig(**misure),
            rise=RiseConfig(**rise),
            sgc=SgcConfig(**sgc),
            thresholds=tuple(thresholds) if thresholds else None,
            parallelism=getattr(args, "parallelism", 1) or 1,
            write_artifacts=not getattr(args, "no_artifacts", False),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _load_samples(args):
    from .harness import samples_from_split
    from .triangle import load_dataset

    if not Path(args.data).is_dir():
        raise ConfigError(f"dataset directory {args.data} does not exist")
    split = load_dataset(args.data)
    chosen = {"train": split.train, "val": split.val, "all": split.train + split.val}[args.split]
    samples = samples_from_split(chosen)
    return samples[: args.limit] if args.limit else samples


def _load_adapter(args, image_size):
    from .adapters import get_adapter

    if not Path(args.model).exists():
        raise ConfigError(f"model file {args.model} does not exist")
    try:
        return get_adapter(args.adapter, path=args.model, image_size=image_size)
    except KeyError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_dataset(args):
    from .triangle import generate_triangle, generate_triangle_tiny, save_dataset

    out = args.out or _default_out(args.kind)
    if args.kind == "triangle-tiny":
        split = generate_triangle_tiny(args.n, image_size=args.image_size or 64, seed=args.seed)
    else:
        source = args.fashion_mnist or "geometric"
        split = generate_triangle(args.n, image_size=args.image_size or 128, object_source=source,
                                  seed=args.seed)
    manifest = save_dataset(split, out, seed=args.seed, kind=args.kind)
    print(f"wrote {manifest['counts']['train']} train / {manifest['counts']['val']} val samples to {out}")
    return EXIT_OK


def cmd_train_toy(args):
    from .toy_model import ToyModelSpec, save_model, train_toy_model
    from .triangle import load_dataset

    split = load_dataset(args.data)
    adapter = train_toy_model(ToyModelSpec(seed=args.seed), split.train, epochs=args.epochs, lr=args.lr)
    out = args.out or _default_out("toy.misu")
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    size = split.train[0].image.shape[-1]
    save_model(out, adapter.module, adapter.spec,
               {"image_size": int(size), "epochs": args.epochs, "lr": args.lr,
                "loss_first": adapter.history.losses[0], "loss_last": adapter.history.losses[-1]})
    print(f"saved model to {out}; loss {adapter.history.losses[0]:.4f} -> {adapter.history.losses[-1]:.4f}")
    return EXIT_OK


def cmd_explain(args):
    from .harness import corrupted_adapters, run_explain, summarize, write_errors, write_records
    from .io import write_csv

    settings = resolve_settings(args)
    samples = _load_samples(args)
    if not samples:
        raise ConfigError("no samples selected")
    adapter = _load_adapter(args, samples[0].image.shape[-1])
    out = Path(args.out or _default_out(f"explain_{args.method}"))
    out.mkdir(parents=True, exist_ok=True)
    adapter_for = None
    if args.corrupt:
        if not 0.0 < args.corrupt <= 1.0:
            raise ConfigError("--corrupt must lie in (0, 1]")
        seed = settings.misure.seed
        table, chosen = corrupted_adapters(adapter, samples, fraction=args.corrupt, seed=seed)
        adapter_for = lambda s: table[s.image_id]  # noqa: E731
        write_csv(out / "corrupted.csv", ["image_id"], [[samples[i].image_id] for i in sorted(chosen)])
    records, errors = run_explain(adapter, samples, args.method, settings, out_dir=out,
                                  adapter_for=adapter_for)
    write_records(out / "records.csv", records)
    write_errors(out / "errors.csv", errors)
    with open(out / "run_config.json", "w") as fh:
        json.dump({"method": args.method, "fingerprint": settings.fingerprint(args.method),
                   **settings.describe(args.method)}, fh, indent=1, sort_keys=True, default=list)
    for row in summarize(records):
        print("{method:>10} thr={threshold!s:>5} n={n:3d} dice_explained={dice_explained:.3f} "
              "perturbation_ratio={perturbation_ratio:.3f} time={wall_time_s:.2f}s".format(**row))
    failed = {e[0] for e in errors}
    if samples and len(failed) == len(samples):
        logger.error("all %d images failed", len(samples))
        return EXIT_FAILED
    return EXIT_OK


def cmd_sweep(args):
    from .harness import run_sweep, write_sweep

    settings = resolve_settings(args)
    samples = _load_samples(args)
    adapter = _load_adapter(args, samples[0].image.shape[-1])
    values = json.loads(args.values) if args.values else None
    rows = run_sweep(adapter, samples, settings.misure, grid=args.grid, values=values)
    out = Path(args.out or _default_out(f"sweep_{args.grid}"))
    out.mkdir(parents=True, exist_ok=True)
    write_sweep(out / "sweep.csv", rows)
    for r in rows:
        print(f"lr={r['lr']:<6g} lambda={r['lam']:<6g} mask={r['mask_size']:<8} "
              f"dice_explained={r['mean_dice_explained']:.3f} perturbation_ratio={r['mean_perturbation_ratio']:.3f}")
    return EXIT_OK if rows and all(r["n"] for r in rows) else EXIT_FAILED


def cmd_insights(args):
    from .harness import read_records, run_insights

    rows = read_records(args.records)
    out = args.out or str(Path(args.records).parent / "insights")
    paths = run_insights(rows, out, plot=args.plot)
    for p in paths.values():
        print(p)
    return EXIT_OK


def cmd_reliability(args):
    from .harness import evaluate_reliability, predict_reliability, read_records, train_reliability
    from .io import write_csv
    from .reliability import ReliabilityClassifier

    rows = read_records(args.records)
    artifacts = Path(args.records).parent / "artifacts"
    out = Path(args.out or _default_out("reliability"))
    out.mkdir(parents=True, exist_ok=True)
    models_dir = Path(args.models) if args.models else out
    errors = []
    if args.mode == "train":
        results = train_reliability(rows, args.gt, artifacts, threshold=args.threshold, seed=args.seed)
        metrics = []
        for cls, res in results.items():
            errors.extend(res.get("errors", []))
            if "error" in res:
                logger.warning("class %d: %s", cls, res["error"])
                metrics.append([cls, "", "", "", "", res["error"]])
                continue
            models_dir.mkdir(parents=True, exist_ok=True)
            res["model"].save(models_dir / f"reliability_class{cls}.json")
            write_csv(out / f"roc_class{cls}.csv", ["fpr", "tpr"], res["curve"])
            metrics.append([cls, res["n_train"], res["n_test"], repr(res["accuracy"]), repr(res["auc"]),
                            res["protocol"]])
            print(f"class {cls}: accuracy={res['accuracy']:.3f} auc={res['auc']:.3f}")
        write_csv(out / "metrics.csv", ["class_id", "n_train", "n_test", "accuracy", "auc", "protocol"], metrics)
        ok = any("error" not in r for r in results.values())
    else:
        by_class = {}
        for r in rows:
            if r.get("method", "misure") == "misure":
                by_class.setdefault(int(r["class_id"]), []).append(r)
        metrics, scored = [], []
        for cls, crow in sorted(by_class.items()):
            path = models_dir / f"reliability_class{cls}.json"
            if not path.exists():
                errors.append(("", f"no model for class {cls} at {path}"))
                continue
            model = ReliabilityClassifier.load(path)
            if args.mode == "eval":
                res = evaluate_reliability(model, crow, args.gt, artifacts)
                errors.extend(res["errors"])
                write_csv(out / f"roc_class{cls}.csv", ["fpr", "tpr"], res["curve"])
                metrics.append([cls, res["n"], repr(res["accuracy"]), repr(res["auc"])])
                print(f"class {cls}: accuracy={res['accuracy']:.3f} auc={res['auc']:.3f}")
            else:
                preds, errs = predict_reliability(model, crow)
                scored.extend(preds)
                errors.extend(errs)
        if args.mode == "eval":
            write_csv(out / "metrics.csv", ["class_id", "n", "accuracy", "auc"], metrics)
            ok = bool(metrics)
        else:
            write_csv(out / "predictions.csv", ["image_id", "class_id", "p_reliable"],
                      [[i, c, repr(p)] for i, c, p in scored])
            ok = bool(scored)
    write_csv(out / "errors.csv", ["image_id", "error"], errors)
    return EXIT_OK if ok else EXIT_FAILED


COMMANDS = {
    "dataset": cmd_dataset,
    "train-toy": cmd_train_toy,
    "explain": cmd_explain,
    "sweep": cmd_sweep,
    "insights": cmd_insights,
    "reliability": cmd_reliability,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MisureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
