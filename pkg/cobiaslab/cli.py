import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import coloredlogs
import numpy as np
from dotenv import load_dotenv

from .config_store import (
    apply_env_fallback,
    env_jobs_default,
    load_env_fallback,
    load_experiment_config,
)
from .constants import (
    ENV_SEED,
    ESTIMATOR_DV_DIFFERENCE,
    EXIT_NUMERICAL_ERROR,
    EXIT_OK,
    EXIT_USER_ERROR,
    REPORT_FORMATS,
)
from .errors import CobiasError, ConfigError, NumericalError
from .infomeasure import (
    ContingencyTable,
    MIEstimate,
    exact_conditional_mi,
    exact_mi,
    gaussian_mi_from_samples,
)
from .mine import EstimatorConfig, train_mi_estimator
from .ndcore import RngState
from .runtime_support import (
    TABLE_FORMATTERS,
    find_run_dirs,
    format_sweep_text,
    load_reports,
    run_experiment,
    run_sweep,
    summarize_reports,
    write_json,
    write_tables,
)
from .synthdata import DomainShift, LabeledDataset, SpuriousSpec, generate, load_csv, save_csv
from .utils import as_labels, one_hot

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(name)s %(levelname)s %(message)s"

ESTIMATOR_CHOICES = ("exact", "dv", "gaussian")
LABEL_COLUMNS = ("y", "z")


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="cobiaslab",
        description=(
            "Measure and reduce algorithmic bias as conditional mutual information "
            "between learned features and a bias attribute given the target."
        ),
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true", help="Log debug details")
    verbosity.add_argument("--quiet", action="store_true", help="Only log warnings and errors")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", help="Generate a spurious-correlation dataset as CSV")
    gen.add_argument("--out", default="data", help="Output directory for train.csv and test.csv")
    gen.add_argument("--n", type=int, default=20000, help="Training samples")
    gen.add_argument("--n-test", type=int, default=None, help="Test samples (default: --n)")
    gen.add_argument("--targets", type=int, default=2, help="Target classes A")
    gen.add_argument("--biases", type=int, default=2, help="Bias classes B")
    gen.add_argument("--corr", type=float, default=0.9, help="p(Z = matched | Y) in the training split")
    gen.add_argument("--d-core", type=int, default=2, help="Dimensions carrying the target signal")
    gen.add_argument("--d-bias", type=int, default=2, help="Dimensions carrying the bias signal")
    gen.add_argument("--d-noise", type=int, default=4, help="Pure-noise dimensions")
    gen.add_argument("--signal-sep", type=float, default=2.0, help="Separation of target class means")
    gen.add_argument("--bias-sep", type=float, default=3.0, help="Separation of bias class means")
    gen.add_argument("--noise-sigma", type=float, default=1.0, help="Gaussian noise scale")
    gen.add_argument("--shift-corr", type=float, default=None, help="Test-split corr (default 1/B)")
    gen.add_argument("--shift-signal-sep", type=float, default=None, help="Test-split signal separation")
    gen.add_argument("--seed", type=int, default=None, help=f"Random seed (default ${ENV_SEED} or 0)")

    est = commands.add_parser("estimate-mi", help="Estimate I(U;V) or I(U;V|W) from CSV columns")
    est.add_argument("csv", help="Dataset CSV (x0..,y,z)")
    est.add_argument("--u", required=True, help="Comma-separated columns for U; 'x' selects all features")
    est.add_argument("--v", required=True, help="Comma-separated columns for V")
    est.add_argument("--given", default=None, help="Conditioning column W")
    est.add_argument("--estimator", default="exact", choices=ESTIMATOR_CHOICES, help="Estimator family")
    est.add_argument("--bits", action="store_true", help="Report bits instead of nats")
    est.add_argument("--miller-madow", action="store_true", help="Bias-correct exact estimates")
    est.add_argument("--epochs", type=int, default=60, help="DV estimator epochs")
    est.add_argument("--batch", type=int, default=256, help="DV estimator batch size")
    est.add_argument("--lr", type=float, default=1e-3, help="DV estimator learning rate")
    est.add_argument("--seed", type=int, default=None, help=f"Random seed (default ${ENV_SEED} or 0)")
    est.add_argument("--json", dest="json_path", default=None, help="Also write the estimate as JSON")

    train = commands.add_parser("train", help="Train every method x seed of an experiment config")
    train.add_argument("config", help="Experiment config file")
    train.add_argument("--out", default=None, help="Override the output directory")
    train.add_argument("--jobs", type=int, default=None, help="Concurrent runs")

    report = commands.add_parser("report", help="Comparison table over run directories")
    report.add_argument("runs", nargs="+", help="Run directories or their parents")
    report.add_argument("--format", default="text", choices=REPORT_FORMATS, help="Table format on stdout")
    report.add_argument(
        "--section",
        default="test",
        choices=["test", "probe_before", "probe_after"],
        help="Which stored report to tabulate",
    )
    report.add_argument("--out", default=None, help="Also write the table in every format to this directory")

    sweep = commands.add_parser("sweep", help="Ablation sweep over beta, rho or corr")
    sweep.add_argument("config", help="Base experiment config file")
    sweep.add_argument("--param", required=True, choices=["beta", "rho", "corr"], help="Swept parameter")
    sweep.add_argument("--values", required=True, help="Comma-separated values")
    sweep.add_argument("--out", default=None, help="Override the output directory")
    sweep.add_argument("--jobs", type=int, default=None, help="Concurrent runs")
    return parser.parse_args(argv)


def configure_logging(args: argparse.Namespace) -> None:
    level = logging.INFO
    if getattr(args, "verbose", False):
        level = logging.DEBUG
    elif getattr(args, "quiet", False):
        level = logging.WARNING
    coloredlogs.install(level=level, fmt=LOG_FORMAT, stream=sys.stderr)


def _default_seed(value: int | None, env: dict) -> int:
    if value is not None:
        return value
    text = env.get(ENV_SEED)
    if text is None:
        return 0
    try:
        return int(text)
    except ValueError as exc:
        raise ConfigError(f"{ENV_SEED}: expected an integer, got '{text}'") from exc


def cmd_gen_data(args: argparse.Namespace, env: dict) -> int:
    shift = None
    if args.shift_corr is not None:
        shift = DomainShift(args.shift_corr, args.shift_signal_sep)
    elif args.shift_signal_sep is not None:
        raise ConfigError("--shift-signal-sep requires --shift-corr")
    spec = SpuriousSpec(
        n=args.n,
        n_targets=args.targets,
        n_biases=args.biases,
        corr=args.corr,
        d_core=args.d_core,
        d_bias=args.d_bias,
        d_noise=args.d_noise,
        signal_sep=args.signal_sep,
        bias_sep=args.bias_sep,
        noise_sigma=args.noise_sigma,
        n_test=args.n_test,
        shift=shift,
        seed=_default_seed(args.seed, env),
    )
    train, test = generate(spec)
    out = Path(args.out)
    for name, split in (("train", train), ("test", test)):
        path = save_csv(split, out / f"{name}.csv")
        print(f"{name}: {len(split)} rows -> {path}")
    return EXIT_OK


def _select_columns(ds: LabeledDataset, spec: str, encode_labels: bool) -> np.ndarray:
    blocks = []
    for name in (item.strip() for item in spec.split(",") if item.strip()):
        if name == "x":
            blocks.append(ds.X)
        elif name in LABEL_COLUMNS:
            labels = ds.y if name == "y" else ds.z
            size = ds.n_targets if name == "y" else ds.n_biases
            blocks.append(one_hot(labels, size) if encode_labels else labels[:, None].astype(np.float64))
        elif name.startswith("x") and name[1:].isdigit() and int(name[1:]) < ds.input_dim:
            blocks.append(ds.X[:, [int(name[1:])]])
        else:
            raise ConfigError(f"unknown column '{name}'; use x, x0..x{ds.input_dim - 1}, y or z")
    if not blocks:
        raise ConfigError("empty column selection")
    return np.concatenate(blocks, axis=1)


def _discrete(ds: LabeledDataset, spec: str, flag: str) -> np.ndarray:
    values = _select_columns(ds, spec, encode_labels=False)
    if values.shape[1] != 1:
        raise ConfigError(f"{flag}: exact estimation needs a single discrete column")
    try:
        return as_labels(values[:, 0], flag)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_estimate_mi(args: argparse.Namespace, env: dict) -> int:
    ds = load_csv(args.csv)
    seed = _default_seed(args.seed, env)
    if args.estimator == "exact":
        columns = [_discrete(ds, args.u, "--u"), _discrete(ds, args.v, "--v")]
        if args.given is not None:
            columns.append(_discrete(ds, args.given, "--given"))
        table = ContingencyTable.from_samples(*columns)
        if args.given is None:
            estimate = exact_mi(table, miller_madow=args.miller_madow)
        else:
            estimate = exact_conditional_mi(table, given=2, miller_madow=args.miller_madow)
    elif args.estimator == "gaussian":
        if args.given is not None:
            raise ConfigError("--given is not supported by the gaussian estimator")
        u = _select_columns(ds, args.u, encode_labels=False)
        v = _select_columns(ds, args.v, encode_labels=False)
        if u.shape[1] != 1 or v.shape[1] != 1:
            raise ConfigError("the gaussian estimator needs one column for --u and one for --v")
        estimate = gaussian_mi_from_samples(u[:, 0], v[:, 0])
    else:
        cfg = EstimatorConfig(epochs=args.epochs, batch=args.batch, lr=args.lr)
        u = _select_columns(ds, args.u, encode_labels=True)
        v = _select_columns(ds, args.v, encode_labels=True)
        root = RngState(seed)
        if args.given is None:
            _, estimate, _ = train_mi_estimator(u, v, cfg, root)
        else:
            # I(U;V|W) = I(U;V,W) - I(U;W)
            w = _select_columns(ds, args.given, encode_labels=True)
            _, joint, _ = train_mi_estimator(u, np.concatenate([v, w], axis=1), cfg, root.child(0))
            _, given, _ = train_mi_estimator(u, w, cfg, root.child(1))
            estimate = MIEstimate(
                joint.value - given.value,
                ESTIMATOR_DV_DIFFERENCE,
                False,
                joint.n_samples,
                components=(joint, given),
            )

    unit = "bits" if args.bits else "nats"
    label = f"I({args.u};{args.v}" + (f"|{args.given})" if args.given else ")")
    print(f"{label} = {estimate.in_units(args.bits):.6f} {unit} [{estimate.estimator}]")
    if args.json_path:
        write_json(estimate.to_dict(args.bits), Path(args.json_path))
    return EXIT_OK


def _load_experiment(path: str, env: dict):
    return apply_env_fallback(load_experiment_config(path), env)


def cmd_train(args: argparse.Namespace, env: dict) -> int:
    cfg = _load_experiment(args.config, env)
    out = Path(args.out or cfg.output_dir)
    jobs = args.jobs if args.jobs is not None else env_jobs_default(env, cfg.jobs)
    run_dirs = run_experiment(cfg, out, jobs)
    rows = summarize_reports(load_reports(run_dirs))
    write_tables(rows, out, cfg.formats, "summary")
    print(TABLE_FORMATTERS["text"](rows), end="")
    return EXIT_OK


def cmd_report(args: argparse.Namespace, env: dict) -> int:
    rows = summarize_reports(load_reports(find_run_dirs(args.runs), key=args.section))
    if args.out:
        write_tables(rows, Path(args.out), REPORT_FORMATS, f"report-{args.section}")
    print(TABLE_FORMATTERS[args.format](rows), end="")
    return EXIT_OK


def _parse_values(text: str) -> list[float]:
    try:
        values = [float(item) for item in text.split(",") if item.strip()]
    except ValueError as exc:
        raise ConfigError(f"--values: {exc}") from exc
    if not values:
        raise ConfigError("--values: give at least one value")
    return values


def cmd_sweep(args: argparse.Namespace, env: dict) -> int:
    cfg = _load_experiment(args.config, env)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    jobs = args.jobs if args.jobs is not None else env_jobs_default(env, cfg.jobs)
    rows = run_sweep(cfg, args.param, _parse_values(args.values), jobs=jobs)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = format_sweep_text(rows, args.param)
    (out / f"sweep-{args.param}.txt").write_text(text, encoding="utf-8")
    write_json(rows, out / f"sweep-{args.param}.json")
    print(text, end="")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "estimate-mi": cmd_estimate_mi,
    "train": cmd_train,
    "report": cmd_report,
    "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)
    configure_logging(args)
    try:
        load_dotenv()
        env = load_env_fallback()
        return COMMANDS[args.command](args, env)
    except NumericalError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_NUMERICAL_ERROR
    except (CobiasError, ValueError, OSError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USER_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
