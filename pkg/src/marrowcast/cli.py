"""Command-line entry point: ``marrowcast <subcommand> [options]``.

Exit status: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure. Errors are reported on stderr as one JSON line.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import evaluation, experiment, phantom, preprocess, unet
from .config import load_config
from .errors import ConfigError, MarrowcastError
from .volume import MaskVolume, load_nifti, normalize_intensity, save_nifti

log = logging.getLogger("marrowcast")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
JOBS_ENV = "MARROWCAST_JOBS"


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1 and a JSON diagnostic after the usage text."""

    def error(self, message):
        self.print_usage(sys.stderr)
        _diagnose("UsageError", message, EXIT_USAGE)
        raise SystemExit(EXIT_USAGE)


def _diagnose(kind, message, code):
    line = json.dumps({"error": kind, "message": str(message).replace("\n", " "), "exit_code": code})
    print(line, file=sys.stderr)


def _common(p):
    p.add_argument("--config", help="RunConfig JSON file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. --set cascade.stride=4 (repeatable)")
    p.add_argument("--profile", choices=["desk_scale", "paper_scale"], help="override the config profile")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--jobs", type=int, help=f"worker processes (fallback: ${JOBS_ENV}; default 1)")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def build_parser():
    parser = _Parser(prog="marrowcast", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom-gen", help="generate a synthetic longitudinal cohort")
    _common(p)
    p.add_argument("--out", required=True, help="output cohort directory")

    p = sub.add_parser("preprocess", help="bias-correct, align and normalise a cohort")
    _common(p)
    p.add_argument("--data", required=True, help="input cohort directory")
    p.add_argument("--out", required=True, help="output cohort directory")

    p = sub.add_parser("train-bone", help="train BoneNet on a whole cohort")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")

    p = sub.add_parser("train-lesion", help="train LesionNet on a whole cohort")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--bonenet", help="BoneNet checkpoint (needed when cascade.bone_source is 'bonenet')")

    p = sub.add_parser("predict", help="bone and risk maps for one baseline volume")
    _common(p)
    p.add_argument("--in", dest="input", required=True, help="baseline NIfTI volume")
    p.add_argument("--bonenet", required=True, help="BoneNet checkpoint")
    p.add_argument("--lesionnet", required=True, help="LesionNet checkpoint")
    p.add_argument("--out", required=True, help="risk map NIfTI path")
    p.add_argument("--bone-out", help="bone probability NIfTI path (default: next to --out)")
    p.add_argument("--normalized", action="store_true",
                   help="input is already bias-corrected and normalised")

    p = sub.add_parser("evaluate", help="leave-one-patient-out evaluation of the full cascade")
    _common(p)
    p.add_argument("--data", required=True, help="cohort directory (raw or preprocessed)")
    p.add_argument("--out", help="results directory (default: config output_dir or ./results)")

    p = sub.add_parser("report", help="re-emit summary, ROC CSV and SVG files from result.json")
    p.add_argument("--result", required=True, help="result.json written by evaluate")
    p.add_argument("--out", required=True)
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return parser


def resolve_jobs(flag, cfg=None):
    jobs = flag
    if jobs is None:
        env = os.environ.get(JOBS_ENV)
        if env:
            try:
                jobs = int(env)
            except ValueError as exc:
                raise ConfigError(f"{JOBS_ENV} must be an integer, got {env!r}") from exc
    jobs = 1 if jobs is None else jobs
    if jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    return jobs


def _config(args):
    overrides = list(args.set)
    if args.profile:
        overrides.append(("profile", args.profile))
    if args.seed is not None:
        overrides.append(("seed", args.seed))
    return load_config(args.config, overrides)


# -- subcommands ------------------------------------------------------------

def cmd_phantom_gen(args, cfg, jobs):
    template = cfg.phantom.params()
    seed = cfg.seed_for("phantom")
    phantom.generate_cohort(seed, cfg.phantom.n_patients, template, out_dir=args.out, jobs=jobs)
    experiment.write_provenance(args.out, cfg, "phantom-gen", seeds={"global": cfg.seed, "phantom": seed})
    return EXIT_OK


def cmd_preprocess(args, cfg, jobs):
    cases = phantom.load_cohort(args.data)
    cases = experiment.preprocess_cohort(cases, cfg, jobs)
    experiment.write_preprocessed(cases, args.out, cfg)
    experiment.write_provenance(args.out, cfg, "preprocess", source=str(args.data))
    return EXIT_OK


def cmd_train_bone(args, cfg, jobs):
    cases = experiment.prepared_cases(args.data, cfg, jobs)
    seeds = experiment.fold_seeds(cfg.seed_for("folds"))
    model = experiment.train_bonenet(cases, cfg, seeds)
    manifest, _ = unet.save_checkpoint(model, Path(args.out) / "bonenet")
    experiment.write_provenance(args.out, cfg, "train-bone", seeds={"global": cfg.seed, **seeds},
                                checkpoints={"bonenet": unet.checkpoint_digest(manifest)})
    return EXIT_OK


def cmd_train_lesion(args, cfg, jobs):
    cases = experiment.prepared_cases(args.data, cfg, jobs)
    seeds = experiment.fold_seeds(cfg.seed_for("folds"))
    bonenet = unet.load_checkpoint(args.bonenet) if args.bonenet else None
    if cfg.cascade.bone_source == "bonenet" and bonenet is None:
        raise ConfigError("cascade.bone_source is 'bonenet' but no --bonenet checkpoint was given")
    model, stats = experiment.train_lesionnet(cases, cfg, seeds, bonenet)
    manifest, _ = unet.save_checkpoint(model, Path(args.out) / "lesionnet")
    checkpoints = {"lesionnet": unet.checkpoint_digest(manifest)}
    if args.bonenet:
        checkpoints["bonenet"] = unet.checkpoint_digest(args.bonenet)
    experiment.write_provenance(args.out, cfg, "train-lesion", seeds={"global": cfg.seed, **seeds},
                                checkpoints=checkpoints, lesion_dataset=stats)
    return EXIT_OK


def cmd_predict(args, cfg, jobs):
    img = load_nifti(args.input, kind="intensity")
    if not args.normalized:
        img = normalize_intensity(preprocess.bias_correct(img, cfg.preprocess.bias_fwhm_mm))
    bonenet = unet.load_checkpoint(args.bonenet)
    lesionnet = unet.load_checkpoint(args.lesionnet)
    pipeline = experiment.make_pipeline(cfg, bonenet, lesionnet)
    from .cascade import predict_risk_volume

    bone, risk = predict_risk_volume(pipeline, img)
    out = Path(args.out)
    bone_out = Path(args.bone_out) if args.bone_out else out.with_name(out.stem + "_bone" + out.suffix)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_nifti(MaskVolume(risk.data, risk.spacing), out)
    save_nifti(MaskVolume(bone.data, bone.spacing), bone_out)
    experiment.write_provenance(
        out.parent, cfg, "predict",
        checkpoints={"bonenet": unet.checkpoint_digest(args.bonenet),
                     "lesionnet": unet.checkpoint_digest(args.lesionnet)},
        input={"path": str(args.input), "sha256": experiment.file_sha256(args.input)},
        outputs={"risk": str(out), "bone": str(bone_out)}, patch_size=pipeline.patch_size)
    return EXIT_OK


def cmd_evaluate(args, cfg, jobs):
    out = args.out or cfg.output_dir or "results"
    cases = experiment.prepared_cases(args.data, cfg, jobs)
    result = experiment.run_evaluate(cfg, cases, out, jobs=jobs)
    for key in evaluation.METRIC_KEYS:
        mean = result.mean(key)
        log.warning("mean %s AUC: %s", key, "undefined" if mean is None else f"{mean:.4f}")
    if result.failed_folds:
        _diagnose("FoldFailure", f"folds failed: {result.failed_folds}", EXIT_DATA)
        return EXIT_DATA
    return EXIT_OK


def cmd_report(args):
    try:
        doc = json.loads(Path(args.result).read_text())
        result = evaluation.EvalResult.from_json(doc)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise MarrowcastError(f"cannot read result file {args.result}: {exc}") from exc
    evaluation.emit_report(result, args.out)
    return EXIT_OK


COMMANDS = {
    "phantom-gen": cmd_phantom_gen,
    "preprocess": cmd_preprocess,
    "train-bone": cmd_train_bone,
    "train-lesion": cmd_train_lesion,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
}


def dispatch(argv):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report":
        return cmd_report(args)
    cfg = _config(args)
    jobs = resolve_jobs(args.jobs, cfg)
    if cfg.reference_mode and jobs > 1:
        log.warning("reference_mode is on: running single-process instead of --jobs %d", jobs)
        jobs = 1
    return COMMANDS[args.command](args, cfg, jobs)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        return dispatch(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except MarrowcastError as exc:
        _diagnose(type(exc).__name__, exc, exc.exit_code)
        return exc.exit_code
    except (ArithmeticError, FloatingPointError) as exc:
        _diagnose(type(exc).__name__, exc, EXIT_NUMERICAL)
        return EXIT_NUMERICAL
    except (OSError, ValueError) as exc:
        _diagnose(type(exc).__name__, exc, EXIT_DATA)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
