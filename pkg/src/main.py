#!/usr/bin/env python3
"""
spindetect - nuclear-spin detection from CPMG coherence traces.

Subcommands simulate scenes, generate datasets, train models, run detection,
evaluate models, emit plot-ready data bundles and list previous runs.
"""

import argparse
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from .architectures import denoiser, hpc_classifier, regression_model
from .config import ConfigError, RunConfig, apply_overrides, dump_run_config, load_run_config, resolve_workers
from .dataset_store import load_dataset, write_dataset
from .datasets import DatasetError, random_scene, sample_seed
from .denoising import preprocess
from .detection import DetectionError, detect
from .evaluation import ClassificationMetrics, EvaluationError, evaluate_models, export_metrics
from .imaging import ImagingError
from .layers import NetworkError
from .model_bank import (
    MissingModelError,
    ModelBank,
    ModelJob,
    denoiser_job,
    dip_count_job,
    generate_job_samples,
    hpc_job,
    job_manifest_extra,
    regression_job,
    train_from_dataset,
)
from .model_io import ModelFormatError, ReuseKeyMismatchError, load_model, save_model
from .models import DecoherenceParams, LossKind, Regime, SpinParams, Trace
from .plot_bundles import (
    PlotBundleError,
    curve_frame,
    overlay_frame,
    read_curve_csv,
    reproduce_trace,
    write_curve,
    write_overlay,
    write_spin_images,
)
from .report_renderer import ReportRenderer, load_report
from .run_registry import RunRecord, RunRegistry
from .spinmodel import SpinModelError, add_gaussian_noise, apply_decoherence, cpmg_signal
from .stage_tracker import get_stage_tracker, reset_stage_tracker
from .trace_io import TraceIOError, load_spins, load_trace, save_scene, save_trace
from .training import TrainingDivergedError, gradient_check

logger = logging.getLogger(__name__)

VERSION = "spindetect 1.0.0"
TEMPLATES_DIR = Path(__file__).resolve().parent.parent / "templates"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_REUSE = 4
EXIT_NUMERIC = 5


class GradientCheckError(Exception):
    """Custom exception for gradient checks exceeding their tolerance."""
    pass


EXIT_CODES = [
    (ReuseKeyMismatchError, EXIT_REUSE, "Model Reuse Error"),
    ((TrainingDivergedError, GradientCheckError, SpinModelError, FloatingPointError), EXIT_NUMERIC, "Numerical Error"),
    ((MissingModelError, FileNotFoundError, TraceIOError, DatasetError, ModelFormatError, EvaluationError),
     EXIT_MISSING, "Missing Input"),
    ((ConfigError, DetectionError, PlotBundleError, ImagingError, NetworkError, ValueError), EXIT_USAGE, "Usage Error"),
]


def exit_code_for(error: Exception) -> Tuple[int, str]:
    for types, code, label in EXIT_CODES:
        if isinstance(error, types):
            return code, label
    return 1, "Unexpected Error"


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------

def parse_spin_list(text: str) -> List[SpinParams]:
    """
    Parse inline spins such as "-20000:30000,15000:8000" (A:B pairs in Hz).

    Raises:
        ConfigError: If a pair is malformed
    """
    spins = []
    for item in (part.strip() for part in text.split(",")):
        if not item:
            continue
        try:
            a, b = (float(v) for v in item.split(":"))
        except ValueError:
            raise ConfigError(f"Spin '{item}' is not of the form A:B (Hz)")
        spins.append(SpinParams.from_signed(a, b))
    return spins


def parse_set_options(items: Optional[Sequence[str]]) -> Dict[str, object]:
    """Turn repeated --set key=value options into dotted-key overrides."""
    overrides: Dict[str, object] = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got '{item}'")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        if isinstance(value, str):
            try:
                value = float(value)
            except ValueError:
                pass
        overrides[key.strip()] = value
    return overrides


def command_overrides(args) -> Dict[str, object]:
    """Configuration keys set by command flags; None leaves the file value."""
    if args.command != "detect":
        return {}
    return {
        "detection.regimes": args.regimes,
        "detection.index_range": args.index_range,
        "detection.fit_on": args.fit_on,
        "detection.use_denoiser": False if args.no_denoiser else None,
        "detection.train_missing": False if args.no_train else None,
    }


def build_config(args, extra: Optional[Dict[str, object]] = None) -> RunConfig:
    """File values, then --set options, then command flags, then --seed and --workers."""
    config = load_run_config(Path(args.config) if args.config else None)
    overrides = parse_set_options(args.set)
    overrides.update(extra or {})
    overrides["seed"] = args.seed
    overrides["workers"] = args.workers
    return apply_overrides(config, overrides)


def make_run_dir(config: RunConfig, command: str, out: Optional[str] = None) -> Path:
    """
    Fresh output directory of a command.

    Raises:
        ConfigError: If an explicitly given directory already has content
    """
    if out:
        run_dir = Path(out)
        if run_dir.exists() and any(run_dir.iterdir()):
            raise ConfigError(f"Output directory {run_dir} is not empty")
        run_dir.mkdir(parents=True, exist_ok=True)
        return run_dir

    stamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    base = Path(config.run_root) / f"{command}_{stamp}"
    run_dir, suffix = base, 1
    while run_dir.exists():
        suffix += 1
        run_dir = Path(f"{base}_{suffix}")
    run_dir.mkdir(parents=True)
    return run_dir


def jobs_from_args(args, config: RunConfig) -> List[ModelJob]:
    """
    Model jobs selected by --role and its companion options.

    Raises:
        ConfigError: If an option the role needs is missing
    """
    role = args.role
    if role == "denoiser":
        pulses = args.n_pulses or sorted({p.n_pulses for p in config.regimes.values()})
        return [denoiser_job(n) for n in pulses]

    if not args.regime:
        raise ConfigError(f"--regime is required for {role} models")
    regime = Regime(args.regime)

    if role == "hpc":
        if args.dft_group:
            return [hpc_job(config, regime, dft_group=args.dft_group)]
        if not args.index_range:
            raise ConfigError("--index-range or --dft-group is required for hpc models")
        return [hpc_job(config, regime, group) for group in config.model_groups(regime, tuple(args.index_range))]
    if role == "regression":
        if not args.tp_index:
            raise ConfigError("--tp-index is required for regression models")
        return [regression_job(config, regime, i) for i in args.tp_index]
    if not args.index_range:
        raise ConfigError("--index-range is required for dip_count models")
    return [dip_count_job(config, regime, tuple(args.index_range))]


def add_job_arguments(parser: argparse.ArgumentParser, required: bool = True) -> None:
    parser.add_argument("--role", choices=["hpc", "regression", "dip_count", "denoiser"], required=required,
                        help="Kind of model")
    parser.add_argument("--regime", choices=[r.value for r in Regime], help="HPC regime (all roles but denoiser)")
    parser.add_argument("--index-range", type=int, nargs=2, metavar=("LO", "HI"),
                        help="Dictionary index range (hpc: every model group covering it; dip_count: the run)")
    parser.add_argument("--tp-index", type=int, nargs="+", help="Target-period indices of regression models")
    parser.add_argument("--dft-group", help="Strong-coupling DFT group used as hpc target")
    parser.add_argument("--n-pulses", type=int, nargs="+", help="Pulse counts of denoiser models")


def setup_argument_parser() -> argparse.ArgumentParser:
    """Setup and configure command line argument parser."""
    parser = argparse.ArgumentParser(
        prog="spindetect",
        description="Detect nuclear spins and their hyperfine parameters from CPMG coherence traces",
        epilog="Examples:\n"
               "  %(prog)s simulate --spins=-20000:30000,15000:8000 --n-pulses 32 256\n"
               "  %(prog)s gen-data --role hpc --regime n32_high_b --index-range 1200 1214\n"
               "  %(prog)s train --dataset runs/gen-data_20240101_120000/datasets/hpc_1200_1204\n"
               "  %(prog)s detect --n32 trace_n32.csv --n256 trace_n256.csv\n"
               "  %(prog)s plotdata --trace trace_n32.csv --report runs/detect_x/report.json --html",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--config", help="Run configuration YAML (default: templates/run_config.yaml)")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="Override a configuration value, e.g. --set fine_tune.max_passes=3")
    parser.add_argument("--seed", type=int, help="Base seed of every random draw")
    parser.add_argument("--workers", type=int, help="Worker processes/threads (default: available cores)")
    parser.add_argument("--out", help="Output directory (default: a fresh directory under the run root)")
    parser.add_argument("--no-progress", action="store_true", help="Hide progress bars")
    parser.add_argument("--verbose", "-v", action="store_true", help="Enable debug logging")
    parser.add_argument("--version", action="version", version=VERSION)

    commands = parser.add_subparsers(dest="command", required=True)

    sim = commands.add_parser("simulate", help="Simulate pure, decohered and noisy traces of a scene")
    source = sim.add_mutually_exclusive_group()
    source.add_argument("--spins", help="Inline A:B pairs in Hz, comma separated")
    source.add_argument("--spins-file", help="Scene JSON or CSV with a_hz,b_hz columns")
    source.add_argument("--random", type=int, metavar="COUNT", help="Draw a random scene of COUNT spins")
    sim.add_argument("--b-range", type=float, nargs=2, default=(6_000.0, 80_000.0), metavar=("LO", "HI"),
                     help="B range of random scenes in Hz")
    sim.add_argument("--min-separation", type=float, default=0.0,
                     help="Smallest period-frequency gap between random spins in Hz")
    sim.add_argument("--n-pulses", type=int, nargs="+", default=[32], help="Pulse counts to simulate")
    sim.add_argument("--decoherence", type=float, nargs=2, metavar=("T_US", "N"),
                     help="Dephasing envelope (default: middle of the configured ranges)")
    sim.add_argument("--sigma", type=float, help="Noise standard deviation (default: noise.sigma)")
    sim.set_defaults(func=cmd_simulate)

    gen = commands.add_parser("gen-data", help="Generate training datasets")
    add_job_arguments(gen)
    gen.set_defaults(func=cmd_gen_data)

    tr = commands.add_parser("train", help="Train models from datasets or freshly generated samples")
    tr.add_argument("--dataset", action="append", help="Dataset directory written by gen-data")
    add_job_arguments(tr, required=False)
    tr.add_argument("--gradcheck", action="store_true", help="Check backprop against finite differences first")
    tr.set_defaults(func=cmd_train)

    det = commands.add_parser("detect", help="Detect spins in measured traces")
    det.add_argument("--n32", help="N=32 trace CSV")
    det.add_argument("--n256", help="N=256 trace CSV")
    det.add_argument("--trace", action="append", metavar="N=PATH",
                     help="Trace CSV with pulse count N, used by the regimes configured with that N")
    det.add_argument("--regimes", nargs="+", choices=[r.value for r in Regime], help="Regimes to sweep")
    det.add_argument("--index-range", type=int, nargs=2, metavar=("LO", "HI"), help="Dictionary index range")
    det.add_argument("--fit-on", choices=["recovered", "raw"], help="Trace the fine-tuning loss compares with")
    det.add_argument("--no-denoiser", action="store_true", help="Skip the denoiser")
    det.add_argument("--no-train", action="store_true", help="Fail instead of training missing models")
    det.add_argument("--title", help="Report title")
    det.set_defaults(func=cmd_detect)

    ev = commands.add_parser("eval", help="Evaluate models on held-out datasets")
    ev.add_argument("--pair", nargs=2, action="append", required=True, metavar=("MODEL", "DATASET"),
                    help="Model file and the dataset directory it is scored on")
    ev.set_defaults(func=cmd_eval)

    plot = commands.add_parser("plotdata", help="Write plot-ready data bundles")
    plot.add_argument("--trace", required=True, help="Measured trace CSV")
    plot.add_argument("--report", help="report.json of a detect run (overlay and spin images)")
    plot.add_argument("--curves", nargs="+", help="Confidence CSVs of a detect run")
    plot.add_argument("--n-pulses", type=int, help="Pulse count of a trace without sidecar")
    plot.add_argument("--html", action="store_true", help="Also write interactive plotly HTML")
    plot.set_defaults(func=cmd_plotdata)

    runs = commands.add_parser("runs", help="List previous runs")
    runs.add_argument("--filter", help="Only runs of this command")
    runs.set_defaults(func=cmd_runs)

    return parser


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def simulate_traces(
    spins: Sequence[SpinParams],
    config: RunConfig,
    n_pulses: int,
    decoherence: DecoherenceParams,
    sigma: float,
) -> Dict[str, Trace]:
    """Pure, decohered and noisy traces of one scene; the noise seed derives from the run seed and N."""
    pure = cpmg_signal(list(spins), config.acquisition.for_pulses(n_pulses))
    decohered = apply_decoherence(pure, decoherence)
    noisy = add_gaussian_noise(decohered, sigma, config.noise.clip, seed=sample_seed(config.seed, n_pulses))
    return {"pure": pure, "decohered": decohered, "noisy": noisy}


def cmd_simulate(args, config: RunConfig, run_dir: Path, workers: int) -> str:
    print("\n🧲 Step 1: Building scene...")
    if args.spins is not None:
        spins = parse_spin_list(args.spins)
        source = "inline"
    elif args.spins_file:
        spins = load_spins(Path(args.spins_file))
        source = args.spins_file
    elif args.random is not None:
        lo, hi = args.b_range
        if args.random < 0 or not 0 <= lo < hi:
            raise ConfigError("--random needs a non-negative count and --b-range with 0 <= LO < HI")
        larmor = config.acquisition.for_pulses(1).larmor_hz
        spins = random_scene(args.random, larmor, config.seed,
                             (config.dictionary.a_min_hz, config.dictionary.a_max_hz), (lo, hi),
                             args.min_separation)
        source = f"random ({args.random} spins)"
    else:
        spins = []
        source = "empty"
    print(f"   Spins: {len(spins)} from {source}")

    if args.decoherence:
        t_us, n_exp = args.decoherence
        dp = DecoherenceParams(t_s=t_us * 1e-6, n_exp=n_exp)
    else:
        dp = config.noise.typical_decoherence()
    sigma = config.noise.sigma if args.sigma is None else args.sigma
    if sigma < 0:
        raise ConfigError(f"--sigma must be non-negative, got {sigma}")

    print("\n📈 Step 2: Simulating traces...")
    tracker = get_stage_tracker()
    for n_pulses in args.n_pulses:
        with tracker.track("simulate", items=1):
            traces = simulate_traces(spins, config, n_pulses, dp, sigma)
        for kind, trace in traces.items():
            save_trace(trace, run_dir / f"N{n_pulses}" / f"{kind}.csv")
        print(f"✅ N={n_pulses}: {traces['pure'].config.n_points} points written to {run_dir / f'N{n_pulses}'}")

    save_scene(spins, run_dir / "scene.json", extra={
        "seed": config.seed,
        "n_pulses": list(args.n_pulses),
        "decoherence": dp.model_dump(),
        "noise_sigma": sigma,
    })
    return f"{len(spins)} spins, N={list(args.n_pulses)}"


def cmd_gen_data(args, config: RunConfig, run_dir: Path, workers: int) -> str:
    jobs = jobs_from_args(args, config)
    bank = ModelBank(config, workers=workers, progress=not args.no_progress)
    tracker = get_stage_tracker()

    print(f"\n🧪 Step 1: Generating {len(jobs)} dataset(s)...")
    for job in jobs:
        with tracker.track(f"gen_{job.role}"):
            samples, spec = generate_job_samples(job, config, bank.dft_table, workers, not args.no_progress)
        manifest = write_dataset(
            run_dir / "datasets" / job.name, samples, job.role, spec, job.seed(config.seed),
            config.datasets.shard_size, extra=job_manifest_extra(job),
        )
        print(f"✅ {job.name}: {manifest.n_samples} samples, classes {manifest.class_counts}")
    return f"{len(jobs)} datasets"


def run_gradient_checks(seed: int) -> None:
    """
    Gradient check of small networks of every architecture family.

    Raises:
        GradientCheckError: If any tensor exceeds the tolerance
    """
    rng = np.random.default_rng(seed)
    labels = np.eye(3)[rng.integers(0, 3, 6)]
    cases = [
        ("hpc", hpc_classifier(12, 3, hidden=(8, 6), seed=seed), rng.random((6, 12)), labels, LossKind.BCE),
        ("regression", regression_model(12, hidden=(8,), seed=seed), rng.random((6, 12)), rng.random((6, 2)),
         LossKind.MSE),
        ("denoiser", denoiser(16, channels=(2, 3), seed=seed), rng.random((4, 1, 16)), rng.random((4, 1, 16)),
         LossKind.MSE),
    ]
    failed = []
    for name, network, x, y, loss in cases:
        result = gradient_check(network, x, y, loss)
        marker = "✅" if result.passed else "❌"
        print(f"{marker} {name}: max relative error {result.max_error:.2e}")
        if not result.passed:
            failed.append(name)
    if failed:
        raise GradientCheckError(f"Gradient check failed for: {', '.join(failed)}")


def cmd_train(args, config: RunConfig, run_dir: Path, workers: int) -> str:
    step = 1
    if args.gradcheck:
        print(f"\n🔬 Step {step}: Checking gradients...")
        run_gradient_checks(config.seed)
        step += 1

    if not args.dataset and not args.role:
        if args.gradcheck:
            return "gradient check passed"
        raise ConfigError("train needs --dataset or --role")

    trained = 0
    tracker = get_stage_tracker()
    print(f"\n🏋️ Step {step}: Training models...")
    for directory in args.dataset or []:
        dataset = load_dataset(Path(directory))
        with tracker.track(f"train_{dataset.manifest.kind}", items=dataset.manifest.n_samples):
            job, model, history = train_from_dataset(dataset, config, not args.no_progress)
        path = save_model(model, job.path(config.models_dir))
        history.to_csv(run_dir / f"{job.name}_history.csv")
        final = history.final_train_loss
        if final is None:
            print(f"⚠️  {job.name}: 0 epochs, initial weights saved to {path}")
        else:
            print(f"✅ {job.name}: final train loss {final:.5f}, saved to {path}")
        trained += 1

    if args.role:
        bank = ModelBank(config, workers=workers, progress=not args.no_progress, train_missing=True)
        for job in jobs_from_args(args, config):
            bank.train_job(job)
            print(f"✅ {job.name}: saved to {bank.path_for(job)}")
            trained += 1
    return f"{trained} models"


def parse_trace_option(value: str) -> Tuple[int, Path]:
    """`N=PATH` of a `detect --trace` option."""
    count, sep, path = value.partition("=")
    try:
        n_pulses = int(count)
    except ValueError:
        n_pulses = 0
    if not sep or not path or n_pulses <= 0:
        raise ConfigError(f"Trace option {value!r} is not of the form N=PATH")
    return n_pulses, Path(path)


def load_detection_traces(args, config: RunConfig) -> Dict[int, Trace]:
    field = config.acquisition.field_gauss
    sources = [(n, Path(p)) for n, p in ((32, args.n32), (256, args.n256)) if p]
    sources += [parse_trace_option(v) for v in args.trace or []]
    traces = {}
    for n_pulses, path in sources:
        if n_pulses in traces:
            raise ConfigError(f"More than one trace given for N={n_pulses}")
        traces[n_pulses] = load_trace(path, n_pulses=n_pulses, field_gauss=field)
    return traces


def cmd_detect(args, config: RunConfig, run_dir: Path, workers: int) -> str:
    print("\n📂 Step 1: Loading traces...")
    traces = load_detection_traces(args, config)
    if not traces:
        raise DetectionError("detect needs --n32, --n256 or --trace N=PATH")
    for n_pulses, trace in sorted(traces.items()):
        print(f"   N={n_pulses}: {trace.config.n_points} points, ω_L/2π = {trace.config.larmor_hz / 1e3:.3f} kHz")

    print("\n🔍 Step 2: Sweeping, merging and fine-tuning...")
    bank = ModelBank(config, workers=workers, progress=not args.no_progress)
    run = detect(traces, bank, config, workers)

    print("\n💾 Step 3: Saving results...")
    renderer = ReportRenderer(TEMPLATES_DIR)
    paths = renderer.save(run.report, run_dir, args.title)
    for regime, curve in run.curves.items():
        write_curve(curve_frame(curve), regime.value, run_dir)
    for n_pulses, recovered in run.recovered.items():
        save_trace(recovered, run_dir / f"recovered_N{n_pulses}.csv")

    print()
    print(paths["text"].read_text(encoding="utf-8"))
    print(f"✅ Report saved to {paths['json']}")
    return f"{run.report.summary_total} spins, loss {run.report.fit_loss_final:.4g}"


def cmd_eval(args, config: RunConfig, run_dir: Path, workers: int) -> str:
    print(f"\n📊 Step 1: Evaluating {len(args.pair)} model(s)...")
    models, test_sets = {}, {}
    for model_path, dataset_dir in args.pair:
        name = Path(model_path).stem
        models[name] = load_model(Path(model_path))
        test_sets[name] = load_dataset(Path(dataset_dir))

    metrics = evaluate_models(models, test_sets)
    for name, m in metrics.items():
        if isinstance(m, ClassificationMetrics):
            print(f"   {name}: accuracy {m.accuracy:.3f}, macro AUC {m.auc_macro:.3f}, mAP {m.mean_average_precision:.3f}")
        else:
            print(f"   {name}: MAE {', '.join(f'{v:.4g}' for v in m.mae)}")

    path = export_metrics(metrics, run_dir, extra={"seed": config.seed})
    print(f"✅ Metrics saved to {path}")
    return f"{len(metrics)} models evaluated"


def cmd_plotdata(args, config: RunConfig, run_dir: Path, workers: int) -> str:
    print("\n📂 Step 1: Loading inputs...")
    trace = load_trace(Path(args.trace), n_pulses=args.n_pulses, field_gauss=config.acquisition.field_gauss)
    written = []

    if args.report:
        report = load_report(Path(args.report))
        spins = [SpinParams(a_hz=s.a_hz, b_hz=s.b_hz) for s in report.spins]
        print(f"   Report: {len(spins)} spins")

        print("\n📈 Step 2: Writing overlay and spin images...")
        written += write_overlay(overlay_frame(trace, reproduce_trace(trace, spins)), run_dir, args.html)
        recovered, _ = preprocess(trace, envelope_floor=config.noise.envelope_floor)
        written += list(write_spin_images(recovered, report.spins, config, run_dir / "images").values())

    for path in args.curves or []:
        name = Path(path).stem.replace("confidence_", "", 1)
        written += write_curve(read_curve_csv(Path(path)), name, run_dir, args.html)

    if not written:
        print("⚠️  Nothing to write; pass --report and/or --curves")
    else:
        print(f"✅ {len(written)} files written to {run_dir}")
    return f"{len(written)} files"


def cmd_runs(args, config: RunConfig, run_dir: Optional[Path], workers: int) -> str:
    registry = RunRegistry(Path(config.run_root) / "runs.db")
    records = registry.get_all_runs(args.filter)
    if not records:
        print("No runs recorded.")
        return ""
    print(f"{'id':>5}  {'created':19}  {'command':10}  {'status':9}  summary / directory")
    for record in records:
        created = record.created_at.strftime("%Y-%m-%d %H:%M:%S") if record.created_at else "-"
        print(f"{record.id:>5}  {created:19}  {record.command:10}  {record.status:9}  {record.summary}")
        print(f"{'':>50}{record.run_dir}")
    return f"{len(records)} runs"


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def print_configuration(args, config: RunConfig, run_dir: Optional[Path], workers: int) -> None:
    """Print the command and where its results go."""
    print(f"🚀 spindetect {args.command}")
    print("=" * 40)
    print(f"🎲 Seed: {config.seed}")
    print(f"⚙️  Workers: {workers}")
    if run_dir is not None:
        print(f"📁 Output directory: {run_dir}")
    if args.verbose:
        print(f"🔧 Configuration: {args.config or 'templates/run_config.yaml (or built-in defaults)'}")
        print(f"   Models directory: {config.models_dir}")
        print(f"   Regimes: {', '.join(r.value for r in config.detection.regimes)}")


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one command and return its exit code."""
    parser = setup_argument_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    reset_stage_tracker()

    registry = None
    run_id = None
    try:
        config = build_config(args, command_overrides(args))
        workers = resolve_workers(config)

        run_dir = None
        if args.command != "runs":
            run_dir = make_run_dir(config, args.command, args.out)
            dump_run_config(config, run_dir / "config.yaml")
            registry = RunRegistry(Path(config.run_root) / "runs.db")
            run_id = registry.start_run(RunRecord(
                command=args.command, run_dir=str(run_dir), seed=config.seed,
                config=config.model_dump(mode="json"),
            ))

        print_configuration(args, config, run_dir, workers)
        summary = args.func(args, config, run_dir, workers)
        if registry is not None:
            registry.finish_run(run_id, "success", summary)
        code = EXIT_OK

    except Exception as e:
        code, label = exit_code_for(e)
        print(f"❌ {label}: {e}")
        if code == 1:
            logger.exception("Unexpected failure")
        if registry is not None:
            registry.finish_run(run_id, "failed", f"{label}: {e}"[:500])

    tracker = get_stage_tracker()
    if tracker.total_stages:
        print()
        print(tracker.get_formatted_summary())
    if code == EXIT_OK and args.command != "runs":
        print("\n🎉 Done!")
    return code


def main():
    """Main entry point for spindetect."""
    sys.exit(run())


if __name__ == "__main__":
    main()
