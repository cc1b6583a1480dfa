"""Command-line entry point: reconstruction, evaluation, scene synthesis.

Exit codes: 0 success (any nonempty reconstruction), 1 input/parse error,
2 reconstruction failure (no valid initial pair). Verbosity comes from the
CVDSFM_LOG environment variable (error, warn, info, debug).
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time

import numpy as np
import yaml

from . import config as config_mod
from . import fileio, metrics, synthetic
from .engine import NoValidPairError, run_incremental

logger = logging.getLogger(__name__)

_LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


def _setup_logging() -> None:
    level = _LOG_LEVELS.get(os.environ.get("CVDSFM_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for field in dataclasses.fields(config_mod.RunConfig):
        parser.add_argument(
            f"--{field.name.replace('_', '-')}",
            dest=f"cfg_{field.name}",
            default=None,
            metavar="V",
            help=argparse.SUPPRESS,
        )


def _collect_overrides(args) -> dict:
    out = {}
    for key, value in vars(args).items():
        if key.startswith("cfg_") and value is not None:
            out[key[4:]] = value
    return out


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geosfm",
        description="Incremental structure-from-motion with horizontal geolocation priors",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    rec = sub.add_parser("reconstruct", help="run the incremental pipeline")
    rec.add_argument("--corr", required=True, help="correspondence file")
    rec.add_argument("--priors", default=None, help="prior file (optional)")
    rec.add_argument("--config", default=None, help="YAML config file")
    rec.add_argument("--out", required=True, help="output directory")
    _add_config_flags(rec)

    ev = sub.add_parser("evaluate", help="compare a poses file against ground truth")
    ev.add_argument("--poses", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--out", required=True, help="metrics report output path")
    ev.add_argument(
        "--run-report",
        default=None,
        help="report.txt from the reconstruction, to carry over reprojection metrics",
    )

    syn = sub.add_parser("synth", help="generate a synthetic scene")
    syn.add_argument("--spec", default=None, help="YAML scene spec (defaults used if omitted)")
    syn.add_argument("--out", required=True, help="output directory")
    return parser


def cmd_reconstruct(args) -> int:
    try:
        cfg = config_mod.load_config(args.config, _collect_overrides(args))
    except (config_mod.ConfigError, OSError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    t0 = time.perf_counter()
    try:
        model = fileio.parse_correspondences(args.corr, min_score=cfg.min_match_score)
        priors = (
            fileio.parse_priors(args.priors, view_ids=set(model.views))
            if args.priors
            else []
        )
    except (fileio.ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    try:
        recon, stats = run_incremental(model, priors, cfg.engine_config())
    except NoValidPairError as exc:
        print(f"reconstruction failed: {exc}", file=sys.stderr)
        return 2

    has_matches = {v for key in model.matches for v in key}
    reproj_mean = reproj_rms = None
    try:
        reproj_mean = metrics.mean_reprojection_error(recon)
        reproj_rms = metrics.reprojection_rms(recon)
    except metrics.MetricsError:
        pass
    report = metrics.build_report(
        recon.views,
        recon.registered_ids,
        per_view_errors={},
        reproj_mean_px2=reproj_mean,
        reproj_rms_px=reproj_rms,
        include_satellite=cfg.include_satellite_in_coverage,
        has_matches=has_matches,
    )
    paths = fileio.write_outputs(recon, report.as_dict(), args.out)

    log_path = os.path.join(args.out, "run_log.txt")
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write("# effective configuration\n")
        yaml.safe_dump(cfg.as_dict(), fh, default_flow_style=False)
        fh.write("# stage timings (s)\n")
        for key in sorted(stats.timings):
            fh.write(f"{key} = {stats.timings[key]:.3f}\n")
        fh.write("# counts\n")
        for key in sorted(stats.counts):
            fh.write(f"{key} = {stats.counts[key]}\n")
        fh.write("# events\n")
        for event in stats.events:
            fh.write(f"{event}\n")
        fh.write(f"total_wall_s = {time.perf_counter() - t0:.3f}\n")
    print(
        f"registered {report.n_estimated}/{report.n_input} views, "
        f"{len(recon.triangulated_tracks())} points -> {paths['poses']}"
    )
    return 0


def cmd_evaluate(args) -> int:
    try:
        poses = fileio.parse_poses(args.poses)
        gts = fileio.parse_ground_truth(args.gt)
    except (fileio.ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    estimated = {p.view_id: p.pose.translation for p in poses}
    ground_truth = {g.view_id: g.position for g in gts}
    try:
        _, per_view = metrics.evaluate_positions(estimated, ground_truth)
    except metrics.EmptyIntersectionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    n_input = len(set(estimated) | set(ground_truth))
    err = np.array(list(per_view.values()))
    report = {
        "rmse_min_m": float(err.min()),
        "rmse_mean_m": float(np.sqrt(np.mean(err**2))),
        "rmse_max_m": float(err.max()),
        "coverage_total": metrics.coverage(len(estimated), n_input),
        "n_estimated": len(estimated),
        "n_input": n_input,
    }
    if args.run_report:
        try:
            run_report = fileio.parse_report(args.run_report)
        except (fileio.ParseError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        for key in (
            "reproj_mean_px2",
            "reproj_rms_px",
            "coverage_aerial",
            "coverage_ground",
            "coverage_total",
        ):
            if key in run_report:
                report[key] = run_report[key]
    fileio.write_report(report, args.out)
    print(f"rmse_mean_m = {report['rmse_mean_m']:.6g}")
    print(f"coverage_total = {report['coverage_total']:.6g}")
    if "reproj_mean_px2" in report:
        print(f"reproj_mean_px2 = {report['reproj_mean_px2']:.6g}")
    if "reproj_rms_px" in report:
        print(f"reproj_rms_px = {report['reproj_rms_px']:.6g}")
    return 0


def cmd_synth(args) -> int:
    spec_kwargs = {}
    if args.spec:
        try:
            with open(args.spec, "r", encoding="utf-8") as fh:
                spec_kwargs = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
    try:
        spec = synthetic.SceneSpec(**spec_kwargs)
        scene = synthetic.generate_scene(spec, out_dir=args.out)
    except (TypeError, synthetic.SyntheticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for name, path in sorted(scene.paths.items()):
        print(f"{name}: {path}")
    return 0


def main(argv=None) -> int:
    _setup_logging()
    args = _build_parser().parse_args(argv)
    if args.command == "reconstruct":
        return cmd_reconstruct(args)
    if args.command == "evaluate":
        return cmd_evaluate(args)
    if args.command == "synth":
        return cmd_synth(args)
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
