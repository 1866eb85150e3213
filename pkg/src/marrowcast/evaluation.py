"""ROC/AUC, emerging-lesion targets, leave-one-out cross-validation and reports."""
from __future__ import annotations

import csv
import json
import logging
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import patches
from .errors import GeometryError, UndefinedMetricError
from .phantom import LEGS, THORAX
from .volume import MaskVolume, check_same_geometry

log = logging.getLogger(__name__)

SUMMARY_SCHEMA_VERSION = 1
LESION_REGIONS = (THORAX, LEGS, "all")
MAX_ROC_POINTS = 512


# -- ROC --------------------------------------------------------------------

def _binary_labels(labels):
    y = np.asarray(labels).ravel()
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    return y.astype(bool)


def roc_auc(scores, labels):
    """Mann-Whitney AUC: P(score_pos > score_neg), ties counting one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _binary_labels(labels)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUC undefined with {n_pos} positives and {n_neg} negatives")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels):
    """``(fpr, tpr)`` from (0, 0) to (1, 1), one point per distinct score."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _binary_labels(labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC curve undefined for a single class")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    return fpr, tpr


def thin_curve(fpr, tpr, max_points=MAX_ROC_POINTS):
    """Subsample a ROC curve, keeping both end points and monotonicity."""
    if len(fpr) <= max_points:
        return np.asarray(fpr), np.asarray(tpr)
    idx = np.unique(np.linspace(0, len(fpr) - 1, max_points).round().astype(int))
    return np.asarray(fpr)[idx], np.asarray(tpr)[idx]


# -- targets and regions ----------------------------------------------------

def emerging_lesion_targets(case):
    """Voxels annotated at t+1 but not at t."""
    check_same_geometry(case.A_t, case.A_t1)
    em = (case.A_t1.data >= 0.5) & ~(case.A_t.data >= 0.5)
    return MaskVolume(em.astype(np.float32), case.A_t1.spacing, {"kind": "emerging"})


@dataclass(frozen=True)
class BodyPartSplit:
    labels: tuple

    def __post_init__(self):
        seen, prev = set(), None
        for lab in self.labels:
            if lab not in (THORAX, LEGS):
                raise ValueError(f"unknown body part {lab!r}")
            if lab != prev and lab in seen:
                raise ValueError("body-part labels must form contiguous z-ranges")
            seen.add(lab)
            prev = lab

    @property
    def boundary(self):
        """First slice index after the leading region."""
        for z in range(1, len(self.labels)):
            if self.labels[z] != self.labels[z - 1]:
                return z
        return len(self.labels)

    @classmethod
    def from_case(cls, case):
        return cls(tuple(case.body_part_map))

    @classmethod
    def from_fraction(cls, nz, legs_fraction=0.5):
        b = int(round(nz * legs_fraction))
        return cls(tuple(LEGS if z < b else THORAX for z in range(nz)))

    def z_mask(self, region):
        if region == "all":
            return np.ones(len(self.labels), dtype=bool)
        return np.array([lab == region for lab in self.labels])


def dilated_bone_region(bone_mask, threshold=patches.BONE_THRESHOLD, radius_px=patches.DILATION_RADIUS_PX):
    data = bone_mask.data
    return np.stack([patches.binarize_and_dilate(data[:, :, z], threshold, radius_px)
                     for z in range(data.shape[2])], axis=2)


def _auc_or_none(scores, labels):
    try:
        return roc_auc(scores, labels)
    except UndefinedMetricError:
        return None


def evaluate_case(pipeline, case, split=None, keep_scores=True, predictions=None):
    """Bone AUC over all voxels and emerging-lesion AUC inside dilated bone, per body part.

    Returns a fragment dict. Regions without positives (or negatives) get
    ``None``. With ``keep_scores`` the raw score/label vectors are included
    under ``"scores"`` for ROC pooling.
    """
    from .cascade import predict_risk_volume

    split = split or BodyPartSplit.from_case(case)
    if len(split.labels) != case.dims[2]:
        raise GeometryError("body-part split does not match the number of slices")
    bone, risk = predictions if predictions is not None else predict_risk_volume(pipeline, case.I_t)
    check_same_geometry(bone, risk, case.B_t)
    gt_bone = case.B_t.data >= 0.5
    frag = {"patient_id": case.patient_id, "bone_auc": _auc_or_none(bone.data.ravel(), gt_bone.ravel()),
            "lesion_auc": {}, "counts": {}}
    scores = {"bone": (bone.data.ravel().astype(np.float64), gt_bone.ravel())}
    targets = emerging_lesion_targets(case).data >= 0.5
    region = dilated_bone_region(case.B_t)
    for name in LESION_REGIONS:
        sel = region & split.z_mask(name)[None, None, :]
        s, y = risk.data[sel].astype(np.float64), targets[sel]
        frag["lesion_auc"][name] = _auc_or_none(s, y)
        frag["counts"][name] = {"voxels": int(sel.sum()), "positives": int(y.sum()),
                                "negatives": int(sel.sum() - y.sum()),
                                "slab_voxels": int(split.z_mask(name).sum() * case.dims[0] * case.dims[1])}
        scores[f"lesion_{name}"] = (s, y)
    if keep_scores:
        frag["scores"] = scores
    frag["_outputs"] = (bone, risk)
    return frag


# -- results ----------------------------------------------------------------

METRIC_KEYS = ("bone",) + tuple(f"lesion_{r}" for r in LESION_REGIONS)


def _fold_metric(fold, key):
    if fold.get("status") != "ok":
        return None
    if key == "bone":
        return fold.get("bone_auc")
    return fold.get("lesion_auc", {}).get(key[len("lesion_"):])


@dataclass
class EvalResult:
    folds: list
    roc: dict = field(default_factory=dict)          # metric key -> {"fpr": [...], "tpr": [...]}
    config: dict = field(default_factory=dict)
    case_outputs: dict = field(default_factory=dict)  # patient_id -> {"risk": path, "bone": path}

    def per_fold(self, key):
        return [_fold_metric(f, key) for f in sorted(self.folds, key=lambda f: f["fold"])]

    def mean(self, key):
        vals = [v for v in self.per_fold(key) if v is not None]
        return float(np.mean(vals)) if vals else None

    def n_undefined(self, key):
        return sum(1 for f in self.folds if f.get("status") == "ok" and _fold_metric(f, key) is None)

    @property
    def failed_folds(self):
        return [f["fold"] for f in self.folds if f.get("status") != "ok"]

    def summary(self):
        return {
            "schema_version": SUMMARY_SCHEMA_VERSION,
            "auc_granularity": "voxelwise",
            "bone_auc_region": "all voxels",
            "lesion_auc_region": "inside the dilated ground-truth bone mask; targets = emerging lesions (A_t1 and not A_t)",
            "n_folds": len(self.folds),
            "failed_folds": self.failed_folds,
            "folds": [{k: v for k, v in f.items() if not k.startswith("_") and k != "scores"}
                      for f in sorted(self.folds, key=lambda f: f["fold"])],
            "mean": {k: (self.mean(k) if self.mean(k) is not None else "undefined") for k in METRIC_KEYS},
            "n_defined": {k: sum(v is not None for v in self.per_fold(k)) for k in METRIC_KEYS},
            "n_undefined": {k: self.n_undefined(k) for k in METRIC_KEYS},
            "case_outputs": self.case_outputs,
            "config": self.config,
        }

    def to_json(self):
        return {"summary": self.summary(), "roc": self.roc}

    @classmethod
    def from_json(cls, d):
        s = d["summary"]
        return cls(folds=s["folds"], roc=d.get("roc", {}), config=s.get("config", {}),
                   case_outputs=s.get("case_outputs", {}))


# -- LOOCV ------------------------------------------------------------------

def fold_seed(base_seed, fold):
    return int(np.random.SeedSequence([int(base_seed), 0x10CF, int(fold)]).generate_state(1)[0])


def _run_fold(args):
    fold, cases, train_fn, eval_fn, base_seed = args
    test = cases[fold]
    train = [c for i, c in enumerate(cases) if i != fold]
    seed = fold_seed(base_seed, fold)
    record = {"fold": fold, "patient_id": test.patient_id, "seed": seed,
              "train_ids": [c.patient_id for c in train]}
    if test.patient_id in record["train_ids"]:
        raise AssertionError(f"fold {fold} leaks test patient {test.patient_id} into training")
    try:
        pipeline = train_fn(train, seed, fold)
        frag = eval_fn(pipeline, test, fold)
    except Exception as exc:  # fold failures are recorded, the run continues
        log.error("fold %d failed: %s", fold, exc)
        record.update(status="failed", error=f"{type(exc).__name__}: {exc}",
                      traceback=traceback.format_exc(limit=5))
        return record
    record.update(status="ok", **frag)
    return record


def loocv(cohort, train_fn, eval_fn, base_seed=0, jobs=1):
    """Leave-one-patient-out cross-validation.

    ``train_fn(train_cases, seed, fold) -> pipeline`` and
    ``eval_fn(pipeline, test_case, fold) -> fragment`` (as returned by
    :func:`evaluate_case`). Failed folds are recorded, not raised.
    """
    cohort = list(cohort)
    if len(cohort) < 2:
        raise ValueError("leave-one-out needs at least 2 patients")
    ids = [c.patient_id for c in cohort]
    if len(set(ids)) != len(ids):
        raise ValueError("patient ids must be unique")
    tasks = [(i, cohort, train_fn, eval_fn, base_seed) for i in range(len(cohort))]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            folds = list(pool.map(_run_fold, tasks))
    else:
        folds = [_run_fold(t) for t in tasks]
    folds.sort(key=lambda f: f["fold"])
    roc = {}
    for key in METRIC_KEYS:
        parts = [f["scores"][key] for f in folds if f.get("status") == "ok" and "scores" in f]
        if not parts:
            continue
        s = np.concatenate([p[0] for p in parts])
        y = np.concatenate([p[1] for p in parts])
        try:
            fpr, tpr = thin_curve(*roc_curve(s, y))
        except UndefinedMetricError:
            continue
        roc[key] = {"fpr": fpr.tolist(), "tpr": tpr.tolist(), "pooled_auc": roc_auc(s, y)}
    for f in folds:
        f.pop("scores", None)
    return EvalResult(folds=folds, roc=roc)


# -- report -----------------------------------------------------------------

def _svg(fpr, tpr, title):
    size, pad = 320, 40
    pts = " ".join(f"{pad + x * size:.2f},{pad + (1 - y) * size:.2f}" for x, y in zip(fpr, tpr))
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 2 * pad}" height="{size + 2 * pad}">\n'
        f'<rect x="{pad}" y="{pad}" width="{size}" height="{size}" fill="none" stroke="black"/>\n'
        f'<line x1="{pad}" y1="{pad + size}" x2="{pad + size}" y2="{pad}" stroke="gray" stroke-dasharray="4"/>\n'
        f'<polyline fill="none" stroke="red" stroke-width="2" points="{pts}"/>\n'
        f'<text x="{pad}" y="{pad - 12}" font-size="14">{title}</text>\n'
        f'<text x="{pad + size / 2 - 10}" y="{pad + size + 28}" font-size="12">FPR</text>\n'
        f'<text x="8" y="{pad + size / 2}" font-size="12">TPR</text>\n'
        "</svg>\n")


def emit_report(result, out_dir):
    """Write ``summary.json``, ``result.json`` and per-region ROC CSV/SVG files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    (out / "summary.json").write_text(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")
    (out / "result.json").write_text(json.dumps(result.to_json(), indent=2, sort_keys=True) + "\n")
    written += [out / "summary.json", out / "result.json"]
    for key in METRIC_KEYS:
        curve = result.roc.get(key)
        csv_path = out / f"roc_{key}.csv"
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fpr", "tpr"])
            if curve:
                w.writerows([[repr(float(a)), repr(float(b))] for a, b in zip(curve["fpr"], curve["tpr"])])
        written.append(csv_path)
        svg_path = out / f"roc_{key}.svg"
        if curve:
            mean = result.mean(key)
            title = f"{key}: mean AUC {mean:.4f}" if mean is not None else f"{key}: undefined"
            svg_path.write_text(_svg(curve["fpr"], curve["tpr"], title))
        else:
            svg_path.write_text(_svg([], [], f"{key}: undefined"))
        written.append(svg_path)
    return written


def mean_or_nan(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else math.nan
