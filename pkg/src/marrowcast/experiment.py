"""End-to-end runs driven by a :class:`~marrowcast.config.RunConfig`.

These functions back the CLI subcommands: cohort preprocessing, per-fold
training with checkpoints, LOOCV evaluation with risk-map export, and the
``provenance.json`` record written next to every run's outputs.
"""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import cascade, evaluation, phantom, preprocess, unet
from .volume import save_nifti

log = logging.getLogger(__name__)

PROVENANCE_NAME = "provenance.json"


# -- cohorts ----------------------------------------------------------------

def _manifest(path):
    path = Path(path)
    mpath = path / phantom.MANIFEST_NAME if path.is_dir() else path
    return json.loads(mpath.read_text())


def load_cases(data_dir):
    """Cases of a cohort directory and whether they were already preprocessed."""
    try:
        done = bool(_manifest(data_dir).get("preprocessed", False))
    except (OSError, json.JSONDecodeError):
        done = False
    return phantom.load_cohort(data_dir), done


def _preprocess_one(args):
    case, fwhm, align, levels = args
    return preprocess.preprocess_case(case, fwhm_mm=fwhm, align=align, levels=levels)


def preprocess_cohort(cases, cfg, jobs=1):
    p = cfg.preprocess
    tasks = [(c, p.bias_fwhm_mm, p.align, p.registration_levels) for c in cases]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_preprocess_one, tasks))
    return [_preprocess_one(t) for t in tasks]


def write_preprocessed(cases, out_dir, cfg):
    return phantom.write_cohort(cases, out_dir, extra={"preprocessed": True,
                                                       "preprocess": cfg.preprocess.model_dump()})


def prepared_cases(data_dir, cfg, jobs=1):
    cases, done = load_cases(data_dir)
    return cases if done else preprocess_cohort(cases, cfg, jobs)


# -- training ---------------------------------------------------------------

def fold_seeds(fold_seed):
    from .config import derive_seed

    return {name: derive_seed(fold_seed, name) for name in ("init-bone", "init-lesion", "shuffle")}


def train_bonenet(cases, cfg, seeds):
    return cascade.train_bonenet(cases, cfg.bonenet.unet(seed=seeds["init-bone"]),
                                 shuffle_seed=seeds["shuffle"],
                                 log=lambda e, l: log.info("bonenet epoch %d loss %.5f", e, l))


def train_lesionnet(cases, cfg, seeds, bonenet=None):
    c = cfg.cascade
    return cascade.train_lesionnet(
        cases, cfg.lesionnet.unet(seed=seeds["init-lesion"]), stride=c.train_stride,
        bone_source=c.bone_source, bonenet=bonenet, max_negatives_per_case=c.max_negatives_per_case,
        shuffle_seed=seeds["shuffle"], threshold=c.threshold, radius_px=c.dilation_radius_px,
        log=lambda e, l: log.info("lesionnet epoch %d loss %.5f", e, l))


def make_pipeline(cfg, bonenet, lesionnet):
    c = cfg.cascade
    return cascade.CascadePipeline(bonenet=bonenet, lesionnet=lesionnet, threshold=c.threshold,
                                   radius_px=c.dilation_radius_px,
                                   patch_size=lesionnet.config.input_size if lesionnet else cfg.lesionnet.input_size,
                                   stride=c.stride, fusion=c.fusion)


class FoldTrainer:
    """``train_fn`` for :func:`evaluation.loocv`; saves both checkpoints per fold."""

    def __init__(self, cfg, out_dir):
        self.cfg = cfg
        self.out_dir = Path(out_dir)

    def __call__(self, train_cases, seed, fold):
        seeds = fold_seeds(seed)
        bonenet = train_bonenet(train_cases, self.cfg, seeds)
        needs_bonenet = self.cfg.cascade.bone_source == "bonenet"
        lesionnet, stats = train_lesionnet(train_cases, self.cfg, seeds, bonenet if needs_bonenet else None)
        fold_dir = self.out_dir / "folds" / f"fold_{fold:02d}"
        unet.save_checkpoint(bonenet, fold_dir / "bonenet")
        unet.save_checkpoint(lesionnet, fold_dir / "lesionnet")
        (fold_dir / "lesion_dataset.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
        return make_pipeline(self.cfg, bonenet, lesionnet)


class FoldEvaluator:
    """``eval_fn`` for :func:`evaluation.loocv`; writes the test case's risk and bone maps."""

    def __init__(self, cfg, out_dir):
        self.cfg = cfg
        self.out_dir = Path(out_dir)

    def __call__(self, pipeline, case, fold):
        frag = evaluation.evaluate_case(pipeline, case, evaluation.BodyPartSplit.from_case(case))
        bone, risk = frag.pop("_outputs")
        maps = self.out_dir / "risk_maps"
        maps.mkdir(parents=True, exist_ok=True)
        paths = {"risk": f"risk_maps/{case.patient_id}_risk.nii", "bone": f"risk_maps/{case.patient_id}_bone.nii"}
        save_nifti(risk, self.out_dir / paths["risk"])
        save_nifti(bone, self.out_dir / paths["bone"])
        frag["outputs"] = paths
        return frag


def run_evaluate(cfg, cases, out_dir, jobs=1):
    """LOOCV over ``cases`` (already preprocessed); writes report, checkpoints and risk maps."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = evaluation.loocv(cases, FoldTrainer(cfg, out), FoldEvaluator(cfg, out),
                              base_seed=cfg.seed_for("folds"), jobs=jobs)
    result.config = cfg.model_dump(mode="json")
    result.case_outputs = {f["patient_id"]: f["outputs"] for f in result.folds if f.get("status") == "ok"}
    evaluation.emit_report(result, out)
    checkpoints = {}
    for f in sorted((out / "folds").glob("fold_*/*.json")):
        if f.name != "lesion_dataset.json":
            checkpoints[str(f.relative_to(out).with_suffix(""))] = unet.checkpoint_digest(f)
    write_provenance(out, cfg, "evaluate",
                     seeds={"global": cfg.seed, "folds": cfg.seed_for("folds"),
                            "per_fold": {f["fold"]: f["seed"] for f in result.folds}},
                     checkpoints=checkpoints)
    return result


# -- provenance -------------------------------------------------------------

def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_provenance(out_dir, cfg, command, seeds=None, checkpoints=None, **extra):
    """Write ``provenance.json``: config hash, seeds, checkpoint hashes and run parameters."""
    from . import __version__

    record = {
        "command": command,
        "marrowcast_version": __version__,
        "config_hash": cfg.config_hash() if cfg is not None else None,
        "profile": cfg.profile if cfg is not None else None,
        "reference_mode": cfg.reference_mode if cfg is not None else None,
        "seeds": seeds or ({"global": cfg.seed} if cfg is not None else {}),
        "checkpoints": checkpoints or {},
    }
    if cfg is not None:
        c = cfg.cascade
        record["cascade"] = {"threshold": c.threshold, "dilation_radius_px": c.dilation_radius_px,
                             "stride": c.stride, "fusion": c.fusion}
    record.update(extra)
    path = Path(out_dir) / PROVENANCE_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")
    return path
