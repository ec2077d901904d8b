"""Batch running, record tables, sweeps, global insights and the reliability pipeline."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .adapters import SerializedAdapter, SpuriousPatchAdapter
from .baselines import occlusion_saliency, rise_saliency, seg_grad_cam, threshold_saliency
from .config import MisureConfig, RiseConfig, SgcConfig, fingerprint
from .exceptions import (
    ClassAbsentError,
    DegenerateFeatureError,
    DegenerateLabelsError,
    EmptyInputError,
    FormatError,
    RecordError,
)
from .io import read_csv, read_label_png, write_binary_png, write_csv, write_float_map, write_png_preview
from .masks import binarize_prediction, dice_explained, dice_hard, dilate, perturbation_ratio, StructuringElement
from .minimal import find_msr
from .reliability import FEATURE_NAMES, ReliabilityClassifier, extract_features, roc_auc
from .sufficient import find_sr
from .triangle import sample_id

logger = logging.getLogger(__name__)

RECORD_SCHEMA = "1.0"
METHODS = ("misure", "rise", "occlusion", "seggradcam")
TIMING_COLUMNS = ("wall_time_s",)


@dataclass
class SaliencyRecord:
    image_id: str
    class_id: int
    method: str
    config_fingerprint: str
    threshold: float | None = None
    n_dilations: int = 0
    dice_explained: float = float("nan")
    perturbation_ratio: float = float("nan")
    sr_dice: float | None = None
    sr_perturbation_ratio: float | None = None
    wall_time_s: float = 0.0
    prediction_size_px: int = 0
    gt_dice: float | None = None
    saliency_path: str = ""
    prediction_path: str = ""
    schema_version: str = RECORD_SCHEMA

    def sort_key(self):
        return (self.image_id, self.class_id, self.method, self.threshold if self.threshold is not None else -1.0)


RECORD_COLUMNS = [f.name for f in fields(SaliencyRecord)]


@dataclass
class Sample:
    image_id: str
    image: np.ndarray
    gt: np.ndarray | None = None  # label map (H, W) of ints, or bool for one foreground class

    def gt_for(self, label):
        if self.gt is None:
            return None
        if self.gt.dtype == bool:
            return self.gt if label == 1 else ~self.gt
        return self.gt == label


@dataclass
class RunSettings:
    misure: MisureConfig = field(default_factory=MisureConfig)
    rise: RiseConfig = field(default_factory=RiseConfig)
    sgc: SgcConfig = field(default_factory=SgcConfig)
    occlusion_patch: int = 8
    occlusion_stride: int = 8
    thresholds: tuple | None = None
    parallelism: int = 1
    write_artifacts: bool = True

    def thresholds_for(self, method):
        if self.thresholds is not None:
            return tuple(self.thresholds)
        if method == "seggradcam":
            return self.sgc.thresholds
        return self.rise.thresholds

    def fingerprint(self, method):
        if method == "misure":
            return fingerprint(self.misure, extra={"method": method})
        if method == "rise":
            return fingerprint(self.rise, extra={"method": method, "thresholds": self.thresholds_for(method)})
        if method == "seggradcam":
            return fingerprint(self.sgc, extra={"method": method, "thresholds": self.thresholds_for(method)})
        return fingerprint({"patch": self.occlusion_patch, "stride": self.occlusion_stride},
                           extra={"method": method, "thresholds": self.thresholds_for(method)})

    def describe(self, method):
        if method == "misure":
            return {"misure": asdict(self.misure)}
        if method == "rise":
            return {"rise": asdict(self.rise), "thresholds": list(self.thresholds_for(method))}
        if method == "seggradcam":
            return {"seggradcam": asdict(self.sgc), "thresholds": list(self.thresholds_for(method))}
        return {"occlusion": {"patch": self.occlusion_patch, "stride": self.occlusion_stride},
                "thresholds": list(self.thresholds_for(method))}


def samples_from_split(samples):
    """Convert :class:`~misure.triangle.TriangleSample` objects to :class:`Sample`."""
    return [Sample(image_id=sample_id(s.meta["index"]), image=s.image, gt=s.gt_mask) for s in samples]


def _classes_present(probs):
    labels = np.unique(np.argmax(probs, axis=0))
    return [int(l) for l in labels if l != 0]


def _artifact_stem(out_dir, sample, label, method, threshold=None):
    name = f"{sample.image_id}_c{label}_{method}"
    if threshold is not None:
        name += f"_t{threshold:g}"
    return Path(out_dir) / "artifacts" / name


def _write_sidecar(stem, payload):
    with open(f"{stem}.json", "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True, default=list)


def _explain_misure(adapter, sample, label, probs, ref, settings, out_dir, fp):
    cfg = settings.misure
    t0 = time.perf_counter()
    sr = find_sr(adapter, sample.image, label, cfg, probs=probs)
    msr = find_msr(adapter, sr, sample.image, label, cfg, probs=probs)
    elapsed = time.perf_counter() - t0
    rec = SaliencyRecord(
        image_id=sample.image_id, class_id=label, method="misure", config_fingerprint=fp,
        n_dilations=sr.n_dilations,
        dice_explained=msr.metrics.dice_explained,
        perturbation_ratio=msr.metrics.perturbation_ratio,
        sr_dice=sr.dice_at_stop,
        sr_perturbation_ratio=perturbation_ratio(sr.m_sr, ref),
        wall_time_s=elapsed,
        prediction_size_px=int(ref.sum()),
    )
    if out_dir is not None and settings.write_artifacts:
        stem = _artifact_stem(out_dir, sample, label, "misure")
        write_float_map(f"{stem}.misuf", msr.saliency)
        write_png_preview(f"{stem}.png", msr.saliency)
        write_float_map(f"{stem}_mask.misuf", msr.m_msr)
        write_binary_png(f"{stem}_sr.png", sr.m_sr)
        write_csv(f"{stem}_sr_trace.csv", ["iteration", "dice", "nonzero_count"], sr.trace)
        write_csv(f"{stem}_objective.csv", ["iter", "total", "l1_term", "tv_term", "dice_term"],
                  msr.objective_trace)
        _write_sidecar(stem, {"fingerprint": fp, "method": "misure", "image_id": sample.image_id,
                              "class_id": label, **settings.describe("misure")})
        rec.saliency_path = f"{stem.name}.misuf"
    return [rec]


def _explain_baseline(adapter, sample, label, probs, ref, settings, out_dir, fp, method):
    t0 = time.perf_counter()
    if method == "rise":
        sal = rise_saliency(adapter, sample.image, label, settings.rise)
    elif method == "occlusion":
        sal = occlusion_saliency(adapter, sample.image, label, settings.occlusion_patch,
                                 settings.occlusion_stride)
    elif method == "seggradcam":
        sal = seg_grad_cam(adapter, sample.image, label, settings.sgc)
    else:
        raise ValueError(f"unknown method {method!r}")
    elapsed = time.perf_counter() - t0
    stem = None
    if out_dir is not None and settings.write_artifacts:
        stem = _artifact_stem(out_dir, sample, label, method)
        write_float_map(f"{stem}.misuf", sal)
        write_png_preview(f"{stem}.png", sal)
        _write_sidecar(stem, {"fingerprint": fp, "method": method, "image_id": sample.image_id,
                              "class_id": label, "seed": settings.rise.seed,
                              **settings.describe(method)})
    records = []
    for t in settings.thresholds_for(method):
        binary = threshold_saliency(sal, t)
        x = sample.image * binary[None]
        records.append(SaliencyRecord(
            image_id=sample.image_id, class_id=label, method=method, config_fingerprint=fp,
            threshold=float(t),
            dice_explained=dice_explained(adapter, sample.image, x, label, reference=ref),
            perturbation_ratio=perturbation_ratio(binary, ref),
            wall_time_s=elapsed,
            prediction_size_px=int(ref.sum()),
            saliency_path=f"{stem.name}.misuf" if stem is not None else "",
        ))
    return records


def explain_sample(adapter, sample, method, settings, out_dir=None, labels=None):
    """All records for one image: one per predicted foreground class (and per
    threshold for the thresholded baselines)."""
    probs = adapter.forward(sample.image)
    fp = settings.fingerprint(method)
    records = []
    for label in (labels if labels is not None else _classes_present(probs)):
        ref = binarize_prediction(probs, label)
        if not ref.any():
            raise ClassAbsentError(f"class {label} absent from prediction on {sample.image_id}")
        if method == "misure":
            recs = _explain_misure(adapter, sample, label, probs, ref, settings, out_dir, fp)
        else:
            recs = _explain_baseline(adapter, sample, label, probs, ref, settings, out_dir, fp, method)
        pred_name = ""
        if out_dir is not None and settings.write_artifacts:
            pred_path = Path(out_dir) / "artifacts" / f"{sample.image_id}_c{label}_pred.png"
            write_binary_png(pred_path, ref)
            pred_name = pred_path.name
        gt = sample.gt_for(label)
        for r in recs:
            r.prediction_path = pred_name
            if gt is not None:
                r.gt_dice = dice_hard(ref, gt)
        records.extend(recs)
    return records


def run_explain(adapter, samples, method, settings=None, out_dir=None, adapter_for=None):
    """Explain every sample; per-image failures are logged and skipped.

    ``adapter_for(sample)`` may return a per-sample adapter (used by the
    corruption protocol). Returns ``(records, errors)`` with records sorted
    by image id, class id, method and threshold.
    """
    settings = settings or RunSettings()
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if out_dir is not None:
        (Path(out_dir) / "artifacts").mkdir(parents=True, exist_ok=True)
    shared = adapter
    if settings.parallelism > 1 and not adapter.thread_safe:
        shared = SerializedAdapter(adapter)

    def work(sample):
        a = adapter_for(sample) if adapter_for is not None else shared
        try:
            return explain_sample(a, sample, method, settings, out_dir), None
        except Exception as exc:  # isolate per-image failures
            logger.warning("skipping %s: %s", sample.image_id, exc)
            return [], (sample.image_id, f"{type(exc).__name__}: {exc}")

    if settings.parallelism > 1:
        with ThreadPoolExecutor(max_workers=settings.parallelism) as pool:
            results = list(pool.map(work, samples))
    else:
        results = [work(s) for s in samples]
    records = sorted((r for recs, _ in results for r in recs), key=SaliencyRecord.sort_key)
    errors = sorted(e for _, e in results if e is not None)
    return records, errors


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_records(path, records, include_timing=True):
    cols = [c for c in RECORD_COLUMNS if include_timing or c not in TIMING_COLUMNS]
    rows = [[_fmt(getattr(r, c)) for c in cols] for r in sorted(records, key=SaliencyRecord.sort_key)]
    write_csv(path, cols, rows)


def write_errors(path, errors):
    write_csv(path, ["image_id", "error"], errors)


def read_records(path):
    """Read a records CSV written by :func:`write_records` as a list of dicts,
    rejecting unknown major schema versions."""
    rows = read_csv(path)
    for row in rows:
        version = row.get("schema_version", "")
        if version.split(".")[0] != RECORD_SCHEMA.split(".")[0]:
            raise FormatError(f"{path}: unsupported records schema {version!r}")
    return rows


def summarize(records):
    """Mean metrics per (method, threshold)."""
    groups = {}
    for r in records:
        groups.setdefault((r.method, r.threshold), []).append(r)
    out = []
    for (method, thr), rs in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1] or -1.0)):
        out.append({
            "method": method,
            "threshold": thr,
            "n": len(rs),
            "dice_explained": float(np.mean([r.dice_explained for r in rs])),
            "perturbation_ratio": float(np.mean([r.perturbation_ratio for r in rs])),
            "wall_time_s": float(np.mean([r.wall_time_s for r in rs])),
        })
    return out


# --- sweeps ---------------------------------------------------------------


def run_sweep(adapter, samples, base_config, grid="lr-lambda", values=None):
    """Mean Dice explained and perturbation ratio per grid cell.

    ``grid="lr-lambda"`` crosses ``values["lr"]`` with ``values["lam"]``;
    ``grid="mask-size"`` runs each entry of ``values["mask_size"]``.
    The sufficient regions do not depend on the swept settings and are
    computed once per (image, class).
    """
    values = values or {}
    if grid == "lr-lambda":
        cells = [base_config.replace(lr=lr, lam=lam)
                 for lr in values.get("lr", (0.001, 0.01, 0.1))
                 for lam in values.get("lam", (0.001, 0.01, 0.1))]
    elif grid == "mask-size":
        cells = [base_config.replace(mask_size=None if ms is None else (ms, ms) if np.isscalar(ms) else ms)
                 for ms in values.get("mask_size", (16, 32, 64))]
    else:
        raise ValueError(f"unknown grid {grid!r}")
    if not cells:
        raise EmptyInputError("sweep grid is empty")

    jobs = []
    for sample in samples:
        try:
            probs = adapter.forward(sample.image)
            for label in _classes_present(probs):
                sr = find_sr(adapter, sample.image, label, base_config, probs=probs)
                jobs.append((sample, label, probs, sr))
        except Exception as exc:
            logger.warning("skipping %s: %s", sample.image_id, exc)

    rows = []
    for cfg in cells:
        de, pr = [], []
        for sample, label, probs, sr in jobs:
            res = find_msr(adapter, sr, sample.image, label, cfg, probs=probs)
            de.append(res.metrics.dice_explained)
            pr.append(res.metrics.perturbation_ratio)
        rows.append({
            "lr": cfg.lr,
            "lam": cfg.lam,
            "mask_size": "image" if cfg.mask_size is None else f"{cfg.mask_size[0]}x{cfg.mask_size[1]}",
            "n": len(de),
            "mean_dice_explained": float(np.mean(de)) if de else float("nan"),
            "mean_perturbation_ratio": float(np.mean(pr)) if pr else float("nan"),
            "config_fingerprint": fingerprint(cfg),
        })
    return rows


SWEEP_COLUMNS = ["lr", "lam", "mask_size", "n", "mean_dice_explained", "mean_perturbation_ratio",
                 "config_fingerprint"]


def write_sweep(path, rows):
    write_csv(path, SWEEP_COLUMNS, [[_fmt(r[c]) for c in SWEEP_COLUMNS] for r in rows])


# --- global insights -------------------------------------------------------

INSIGHT_FILES = {
    "dilations": ("dilations_vs_size.csv", ["image_id", "class_id", "prediction_size_px", "n_dilations"]),
    "ratio": ("ratio_vs_size.csv", ["image_id", "class_id", "prediction_size_px", "perturbation_ratio"]),
}


def run_insights(rows, out_dir, plot=False):
    """Scatter data of dilation count and perturbation ratio against prediction size."""
    rows = [r for r in rows if r.get("method", "misure") == "misure"]
    if not rows:
        raise EmptyInputError("no MiSuRe records to summarize")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for key, (fname, cols) in INSIGHT_FILES.items():
        write_csv(out_dir / fname, cols, [[r[c] for c in cols] for r in rows])
        paths[key] = out_dir / fname
    if plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        size = [float(r["prediction_size_px"]) for r in rows]
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
        axes[0].scatter(size, [float(r["n_dilations"]) for r in rows], s=10)
        axes[0].set_xlabel("prediction size (px)")
        axes[0].set_ylabel("no. of dilations")
        axes[1].scatter(size, [float(r["perturbation_ratio"]) for r in rows], s=10)
        axes[1].set_xlabel("prediction size (px)")
        axes[1].set_ylabel("perturbation ratio")
        fig.tight_layout()
        fig.savefig(out_dir / "insights.png", dpi=100, metadata={"Software": None})
        plt.close(fig)
        paths["plot"] = out_dir / "insights.png"
    return paths


# --- reliability -------------------------------------------------------------


def gt_dice_for_row(row, gt_dir, artifacts_dir):
    """Ground-truth Dice of the prediction stored with a record.

    Ground truth is read from ``{gt_dir}/{image_id}_mask.png``: a 0/255 mask
    marks class 1, anything else is read as a class-index map. Without a
    ``gt_dir`` the record's own ``gt_dice`` column is used.
    """
    if gt_dir is None:
        if not row.get("gt_dice"):
            raise RecordError(f"record {row.get('image_id')} has no gt_dice and no gt directory was given")
        return float(row["gt_dice"])
    if not row.get("prediction_path"):
        raise RecordError(f"record {row.get('image_id')} has no stored prediction")
    pred = read_label_png(Path(artifacts_dir) / row["prediction_path"]) > 127
    gt = read_label_png(Path(gt_dir) / f"{row['image_id']}_mask.png")
    label = int(row["class_id"])
    gt = (gt > 127) if set(np.unique(gt)) <= {0, 255} and label == 1 else (gt == label)
    return dice_hard(pred, gt)


def _features_and_labels(rows, gt_dir, artifacts_dir):
    X, dice, kept, errors = [], [], [], []
    for row in rows:
        try:
            X.append(extract_features(row).as_array())
            dice.append(gt_dice_for_row(row, gt_dir, artifacts_dir))
            kept.append(row)
        except (RecordError, FormatError) as exc:
            if len(X) > len(dice):
                X.pop()
            errors.append((row.get("image_id", ""), f"{type(exc).__name__}: {exc}"))
    return np.array(X).reshape(-1, 3), np.array(dice), kept, errors


def train_reliability(rows, gt_dir=None, artifacts_dir=".", threshold=0.9, test_size=0.3, seed=0,
                      l2=1e-3):
    """One classifier per class on a fixed stratified train/test split.

    Returns ``{class_id: result}`` where a result holds the fitted model and
    test metrics, or an ``error`` string for classes with degenerate data.
    """
    from sklearn.model_selection import train_test_split

    rows = [r for r in rows if r.get("method", "misure") == "misure"]
    by_class = {}
    for r in rows:
        by_class.setdefault(int(r["class_id"]), []).append(r)
    results = {}
    for cls, crow in sorted(by_class.items()):
        X, dice, _, errors = _features_and_labels(crow, gt_dir, artifacts_dir)
        y = (dice >= threshold).astype(int)
        try:
            if len(np.unique(y)) < 2 or np.bincount(y, minlength=2).min() < 4:
                raise DegenerateLabelsError(f"class {cls}: label counts {np.bincount(y, minlength=2).tolist()}")
            Xtr, Xte, ytr, yte = train_test_split(X, y, test_size=test_size, random_state=seed, stratify=y)
            model = ReliabilityClassifier(l2=l2, label_threshold=threshold).fit(Xtr, ytr)
            scores = model.predict_proba(Xte)[:, 1]
            auc, curve = roc_auc(scores, yte)
            results[cls] = {
                "model": model,
                "accuracy": float(np.mean(model.predict(Xte) == yte)),
                "auc": auc,
                "curve": curve,
                "n_train": len(ytr),
                "n_test": len(yte),
                "protocol": f"stratified holdout test_size={test_size} seed={seed}",
                "errors": errors,
            }
        except (DegenerateLabelsError, DegenerateFeatureError) as exc:
            results[cls] = {"error": f"{type(exc).__name__}: {exc}", "errors": errors}
    return results


def evaluate_reliability(model, rows, gt_dir=None, artifacts_dir="."):
    X, dice, _, errors = _features_and_labels(rows, gt_dir, artifacts_dir)
    y = (dice >= model.label_threshold).astype(int)
    scores = model.predict_proba(X)[:, 1]
    auc, curve = roc_auc(scores, y)
    return {"accuracy": float(np.mean(model.predict(X) == y)), "auc": auc, "curve": curve,
            "n": len(y), "errors": errors}


def predict_reliability(model, rows):
    """Score records; rows that cannot be featurized go to the error list."""
    out, errors = [], []
    for row in rows:
        try:
            f = extract_features(row)
        except RecordError as exc:
            errors.append((row.get("image_id", ""), f"RecordError: {exc}"))
            continue
        out.append((row["image_id"], int(row["class_id"]), float(model.predict_proba(f.as_array()[None])[0, 1])))
    return out, errors


# --- corruption protocol -----------------------------------------------------


def spurious_patch(sample, size, seed, index):
    """A square away from the ground-truth objects, chosen deterministically."""
    H, W = sample.image.shape[1:]
    rng = np.random.default_rng([seed, index])
    forbidden = sample.gt if sample.gt is not None else np.zeros((H, W), dtype=bool)
    forbidden = dilate(forbidden.astype(bool), StructuringElement.disk(2))
    for _ in range(1000):
        top = int(rng.integers(0, H - size + 1))
        left = int(rng.integers(0, W - size + 1))
        if not forbidden[top:top + size, left:left + size].any():
            return top, left, size
    return 0, 0, size


def corruption_plan(samples, fraction=0.5, seed=0):
    """Indices of the samples whose predictions get corrupted."""
    rng = np.random.default_rng(seed)
    n = int(round(len(samples) * fraction))
    return set(int(i) for i in rng.permutation(len(samples))[:n])


def corrupted_adapters(adapter, samples, label=1, fraction=0.5, patch_size=16, confidence=0.95, seed=0):
    """Map image id to the adapter to explain it with: for a ``fraction`` of
    the samples the model is replaced by one predicting an extra, input
    independent blob of class ``label``."""
    chosen = corruption_plan(samples, fraction, seed)
    table = {}
    for i, s in enumerate(samples):
        if i in chosen:
            table[s.image_id] = SpuriousPatchAdapter(adapter, label, spurious_patch(s, patch_size, seed, i),
                                                     confidence)
        else:
            table[s.image_id] = adapter
    return table, chosen
