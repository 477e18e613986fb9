"""Command-line surface: simulate, fit, diagnose, report, predict and pipeline.

Subcommands communicate through files only. Every output directory receives a
manifest.json that re-runs it when passed back as --spec.
"""

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd
from pydantic import BaseModel, Field

from crashtype_bayes import __version__
from crashtype_bayes.data_model import CrashType, derive_partner_volumes, load_dataset, load_schema_map, write_dataset
from crashtype_bayes.design import build_design
from crashtype_bayes.diagnostics import diagnose
from crashtype_bayes.exceptions import CrashModelError, UsageError
from crashtype_bayes.posterior_report import REPORT_FORMATS, render_report, summarize, text_histogram
from crashtype_bayes.reference_models import REFERENCE_MODELS
from crashtype_bayes.run_config import RunConfig, crash_types, load_run_config
from crashtype_bayes.sampler import phi_name, read_traces, run_chains, write_traces
from crashtype_bayes.simulate_predict import posterior_predict, rank_hotspots, simulate, write_truth

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_LEVELS = ("critical", "error", "warning", "info", "debug")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_CONVERGENCE_WARNINGS = 4

MANIFEST_FILE = "manifest.json"
TRACE_DIR = "traces"
DIAGNOSTICS_FILE = "diagnostics.json"
REPORT_FILE = "report.txt"
REPORT_CSV_FILE = "report.csv"
PREDICTIONS_FILE = "predictions.csv"
HOTSPOTS_FILE = "hotspots.csv"
DATA_FILE = "data.csv"
TRUTH_FILE = "truth.json"


class RunManifest(BaseModel):
    """What a run read, which settings it used and what it wrote"""

    command: str
    version: str = __version__
    config: dict
    seeds: List[int] = Field(default_factory=list)
    data: Optional[str] = None
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: List[str] = Field(default_factory=list)
    column_means: Optional[List[float]] = None
    intersections: List[str] = Field(default_factory=list)
    wall_time_seconds: float = 0.0

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / MANIFEST_FILE
        path.write_text(json.dumps(self.model_dump(), indent=2, sort_keys=True), encoding="utf-8")
        return path

    @classmethod
    def read(cls, run_dir: Path) -> "RunManifest":
        path = Path(run_dir) / MANIFEST_FILE
        if not path.is_file():
            raise UsageError(f"no {MANIFEST_FILE} in {run_dir}, is it the output of 'fit'?")
        return cls.model_validate_json(path.read_text(encoding="utf-8"))


def file_digest(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def _digests(*paths: Optional[Path]) -> Dict[str, str]:
    return {str(p): file_digest(p) for p in paths if p is not None and Path(p).is_file()}


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    config = load_run_config(args.spec)
    return config.with_overrides(
        seed=getattr(args, "seed", None),
        chains=getattr(args, "chains", None),
        iterations=getattr(args, "iters", None),
        burnin=getattr(args, "burnin", None),
        crash_type=getattr(args, "crash_type", None) if getattr(args, "crash_type", None) != "all" else None,
        threshold=getattr(args, "threshold", None),
    )


def _write_reports(traces, config: RunConfig, out_dir: Path) -> List[Path]:
    reference = REFERENCE_MODELS[config.model.crash_type].reference_values()
    summaries = summarize(traces, reference=reference if config.model.covariates is None else None)
    text_path = out_dir / REPORT_FILE
    csv_path = out_dir / REPORT_CSV_FILE
    text_path.write_text(render_report(summaries, "text"), encoding="utf-8")
    csv_path.write_text(render_report(summaries, "csv"), encoding="utf-8")
    return [text_path, csv_path]


def fit_model(
    data: Path,
    config: RunConfig,
    out_dir: Path,
    spec_path: Optional[Path] = None,
    schema_path: Optional[Path] = None,
    report_json: Optional[Path] = None,
) -> int:
    """Load, fit, diagnose and summarize one model; returns the exit code"""
    start = time.perf_counter()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if schema_path is not None:
        config = config.model_copy(update={"columns": load_schema_map(schema_path)})

    dataset = derive_partner_volumes(load_dataset(data, config.columns, report_path=report_json))
    dm = build_design(dataset, config.model)
    logger.info(
        f"fitting {config.model.crash_type.value}: {dm.n_rows} rows, {dm.n_groups} intersections, "
        f"columns {', '.join(dm.column_names)}"
    )
    traces = run_chains(dm, config.model.priors, config.sampler)
    outputs = write_traces(traces, out_dir / TRACE_DIR, config.sampler)
    report = diagnose(traces)
    report.to_json(out_dir / DIAGNOSTICS_FILE)
    outputs += [out_dir / DIAGNOSTICS_FILE] + _write_reports(traces, config, out_dir)
    print(report.to_text())

    manifest = RunManifest(
        command="fit",
        config=config.model_dump(mode="json"),
        seeds=list(config.sampler.resolved_seeds()),
        data=str(data),
        inputs=_digests(data, spec_path, schema_path),
        outputs=[str(p.relative_to(out_dir)) for p in outputs],
        column_means=dm.column_means.tolist() if dm.column_means is not None else None,
        intersections=list(dm.group_ids),
        wall_time_seconds=round(time.perf_counter() - start, 3),
    )
    manifest.write(out_dir)
    if not report.converged:
        logger.warning(f"{config.model.crash_type.value}: finished with convergence warnings")
        return EXIT_CONVERGENCE_WARNINGS
    return EXIT_OK


def predict_model(
    run_dir: Path,
    out_dir: Path,
    data: Optional[Path] = None,
    threshold: Optional[int] = None,
    top: int = 10,
) -> int:
    """Posterior prediction and hotspot ranking from a fitted run directory"""
    start = time.perf_counter()
    run_dir = Path(run_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest.read(run_dir)
    config = load_run_config(run_dir / MANIFEST_FILE).with_overrides(threshold=threshold)
    data = Path(data) if data is not None else Path(manifest.data)

    dataset = derive_partner_volumes(load_dataset(data, config.columns))
    dm = build_design(dataset, config.model, column_means=manifest.column_means)
    traces = read_traces(run_dir / TRACE_DIR)
    traced = set(traces[0].names)
    fitted = set(manifest.intersections)
    untraced = [gid for gid in dm.group_ids if gid in fitted and phi_name(gid) not in traced]
    if untraced and "sigma2_phi" in traced:
        raise UsageError(
            f"{len(untraced)} fitted intersection(s) ({', '.join(untraced[:3])}, ...) have no traced "
            f"random effect; refit {run_dir} without --no-store-phi"
        )
    settings = config.predict
    predictions = posterior_predict(
        traces,
        dm,
        thresholds=(settings.threshold,),
        level=settings.level,
        replicates_per_draw=settings.replicates_per_draw,
        seed=settings.seed,
    )
    ranking = rank_hotspots(predictions, settings.threshold)

    rows = [
        {
            "record": p.record,
            "intersection_id": p.intersection_id,
            "mean": p.mean,
            "lower": p.lower,
            "upper": p.upper,
            f"p_exceed_{settings.threshold}": p.exceedance[settings.threshold],
            "out_of_sample": p.out_of_sample,
        }
        for p in predictions
    ]
    pd.DataFrame(rows).to_csv(out_dir / PREDICTIONS_FILE, index=False, lineterminator="\n")
    ranking.to_frame().to_csv(out_dir / HOTSPOTS_FILE, index=False, lineterminator="\n")

    print(f"top {min(top, len(ranking.entries))} approaches by P(y > {settings.threshold}):")
    for entry in ranking.top(top):
        print(f"{entry.rank:>4}  {entry.record:<20} {entry.exceedance:8.4f} {entry.mean:10.3f}")

    if out_dir != run_dir:
        RunManifest(
            command="predict",
            config=config.model_dump(mode="json"),
            data=str(data),
            inputs=_digests(data, run_dir / MANIFEST_FILE),
            outputs=[PREDICTIONS_FILE, HOTSPOTS_FILE],
            column_means=manifest.column_means,
            wall_time_seconds=round(time.perf_counter() - start, 3),
        ).write(out_dir)
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    start = time.perf_counter()
    config = _config_from_args(args)
    spec = config.simulate
    if args.intersections is not None:
        spec = spec.model_copy(update={"n_intersections": args.intersections})
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = simulate(spec)
    write_dataset(result.dataset, out_dir / DATA_FILE, config.columns)
    write_truth(spec, out_dir / TRUTH_FILE, result)
    RunManifest(
        command="simulate",
        config=config.model_copy(update={"simulate": spec}).model_dump(mode="json"),
        seeds=[spec.seed],
        inputs=_digests(args.spec),
        outputs=[DATA_FILE, TRUTH_FILE],
        wall_time_seconds=round(time.perf_counter() - start, 3),
    ).write(out_dir)
    return EXIT_OK


def cmd_fit(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    config = config.model_copy(update={"sampler": config.sampler.model_copy(update={"store_phi": args.store_phi})})
    if args.workers is not None:
        config = config.model_copy(update={"sampler": config.sampler.model_copy(update={"n_workers": args.workers})})
    return fit_model(args.data, config, args.out, args.spec, args.schema, args.report_json)


def cmd_diagnose(args: argparse.Namespace) -> int:
    traces = read_traces(Path(args.run) / TRACE_DIR)
    report = diagnose(traces, split=args.split, include_phi=args.include_phi)
    print(report.to_text())
    if args.out is not None:
        report.to_json(args.out)
    return EXIT_OK if report.converged else EXIT_CONVERGENCE_WARNINGS


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    traces = read_traces(run_dir / TRACE_DIR)
    reference = None
    if args.compare_reference:
        crash_type = CrashType(RunManifest.read(run_dir).config["model"]["crash_type"])
        reference = REFERENCE_MODELS[crash_type].reference_values()
    if args.histogram is not None:
        if not traces[0].has(args.histogram):
            raise UsageError(f"no trace named {args.histogram!r}; traced: {', '.join(traces[0].names)}")
        pooled = [value for t in traces for value in t[args.histogram]]
        sys.stdout.write(text_histogram(pooled, bins=args.bins, label=args.histogram))
        return EXIT_OK
    document = render_report(summarize(traces, include_phi=args.include_phi, reference=reference), args.format)
    if args.out is not None:
        Path(args.out).write_text(document, encoding="utf-8")
    else:
        sys.stdout.write(document)
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    return predict_model(args.run, args.out or args.run, data=args.data, threshold=args.threshold, top=args.top)


def _config_for_type(config: RunConfig, crash_type: CrashType) -> RunConfig:
    model = config.model
    if model.crash_type != crash_type:
        model = model.model_copy(update={"crash_type": crash_type, "covariates": None, "exposure": None})
    sampler = config.sampler.model_copy(update={"store_phi": True})
    return config.model_copy(update={"model": model, "sampler": sampler})


def cmd_pipeline(args: argparse.Namespace) -> int:
    """simulate (when no data is given), then fit, report and predict per crash type"""
    config = _config_from_args(args)
    out_dir = Path(args.out)
    data = args.data
    if data is None:
        simulate_args = argparse.Namespace(
            spec=args.spec, seed=args.seed, intersections=args.intersections, out=out_dir / "simulated"
        )
        cmd_simulate(simulate_args)
        data = out_dir / "simulated" / DATA_FILE

    status = EXIT_OK
    for crash_type in crash_types(args.crash_type):
        type_dir = out_dir / crash_type.value
        code = fit_model(data, _config_for_type(config, crash_type), type_dir, args.spec)
        predict_model(type_dir, type_dir)
        status = max(status, code)
    return status


def _argument_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log", choices=LOG_LEVELS, default="info", help="set log level, default is info")
    common.add_argument("--log-file", type=Path, default=None, help="write the log to this file")

    def run_options(p: argparse.ArgumentParser, crash_default: Optional[str] = None) -> None:
        p.add_argument("--spec", type=Path, default=None, help="run configuration (TOML or manifest.json)")
        p.add_argument("--seed", type=int, default=None, help="master seed")
        p.add_argument("--chains", type=int, default=None, help="number of chains")
        p.add_argument("--iters", type=int, default=None, help="iterations per chain, burn-in included")
        p.add_argument("--burnin", type=int, default=None, help="burn-in iterations")
        p.add_argument(
            "--crash-type",
            default=crash_default,
            choices=[c.value for c in CrashType] + (["all"] if crash_default == "all" else []),
            help="modeled crash type",
        )
        p.add_argument("--threshold", type=int, default=None, help="exceedance threshold for hotspots")

    parser = argparse.ArgumentParser(
        prog="crashtype-bayes",
        description="Bayesian random-effect negative binomial models of approach-level crash types",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = subparsers.add_parser("simulate", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--spec", type=Path, default=None, help="run configuration with a [simulate] table")
    p.add_argument("--seed", type=int, default=None, help="generator seed")
    p.add_argument("--intersections", type=int, default=None, help="number of intersections")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(handler=cmd_simulate)

    p = subparsers.add_parser("fit", parents=[common], help="fit one crash type model by MCMC")
    p.add_argument("--data", type=Path, required=True, help="approach-level CSV file")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--schema", type=Path, default=None, help="TOML file mapping fields to columns")
    p.add_argument("--report-json", type=Path, default=None, help="write the data validation report here")
    p.add_argument(
        "--store-phi",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="keep random-effect draws in the traces, needed by predict on the fitted intersections",
    )
    p.add_argument("--workers", type=int, default=None, help="worker processes for the chains")
    run_options(p)
    p.set_defaults(handler=cmd_fit)

    p = subparsers.add_parser("diagnose", parents=[common], help="convergence diagnostics of a fitted run")
    p.add_argument("--run", type=Path, required=True, help="output directory of 'fit'")
    p.add_argument("--split", action="store_true", help="split-chain R-hat")
    p.add_argument("--include-phi", action="store_true", help="diagnose random effects too")
    p.add_argument("--out", type=Path, default=None, help="write the report as JSON")
    p.set_defaults(handler=cmd_diagnose)

    p = subparsers.add_parser("report", parents=[common], help="posterior summary table of a fitted run")
    p.add_argument("--run", type=Path, required=True, help="output directory of 'fit'")
    p.add_argument("--format", choices=REPORT_FORMATS, default="text", help="output format")
    p.add_argument("--out", type=Path, default=None, help="output file, standard output when omitted")
    p.add_argument("--include-phi", action="store_true", help="summarize random effects too")
    p.add_argument("--compare-reference", action="store_true", help="show published estimates alongside")
    p.add_argument("--histogram", default=None, metavar="NAME", help="print a text histogram of NAME")
    p.add_argument("--bins", type=int, default=20, help="histogram bins")
    p.set_defaults(handler=cmd_report)

    p = subparsers.add_parser("predict", parents=[common], help="posterior prediction and hotspot ranking")
    p.add_argument("--run", type=Path, required=True, help="output directory of 'fit'")
    p.add_argument("--data", type=Path, default=None, help="approaches to predict, the fitted data when omitted")
    p.add_argument("--out", type=Path, default=None, help="output directory, the run directory when omitted")
    p.add_argument("--threshold", type=int, default=None, help="exceedance threshold")
    p.add_argument("--top", type=int, default=10, help="hotspots to print")
    p.set_defaults(handler=cmd_predict)

    p = subparsers.add_parser(
        "pipeline", parents=[common], help="simulate, fit, report and predict for one or all crash types"
    )
    p.add_argument("--data", type=Path, default=None, help="approach-level CSV, simulated when omitted")
    p.add_argument("--out", type=Path, required=True, help="output directory, one sub-directory per type")
    p.add_argument("--intersections", type=int, default=None, help="intersections to simulate")
    run_options(p, crash_default="all")
    p.set_defaults(handler=cmd_pipeline)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _argument_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return EXIT_USAGE if exit_.code not in (0, None) else EXIT_OK

    logging.basicConfig(
        level=getattr(logging, args.log.upper()),
        format=LOG_FORMAT,
        filename=args.log_file,
    )
    try:
        return args.handler(args)
    except CrashModelError as err:
        logger.error(str(err))
        return err.exit_code
    except FileNotFoundError as err:
        logger.error(str(err))
        return EXIT_VALIDATION
    except KeyboardInterrupt:
        logger.error("interrupted")
        return EXIT_RUNTIME
    except Exception as err:
        logger.exception(f"unexpected error: {err}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
