import csv
import io
import json
import logging
import math
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import spearmanr

from .config_store import ExperimentConfig, MethodSpec, save_experiment_config
from .debias import fit, linear_probe_experiment
from .errors import ConfigError
from .fairmetrics import full_report
from .model import BiasModel, save_checkpoint, save_model
from .ndcore import RngState
from .synthdata import LabeledDataset, generate, load_csv
from .utils import format_float

logger = logging.getLogger(__name__)

_MODEL_STREAM = 100
_REPORT_STREAM = 101

REPORT_FILE = "report.json"

# (report key, column title, scale); accuracies are shown in percent.
TABLE_COLUMNS = (
    ("cobias", "Cobias", 1.0),
    ("unbiased_acc", "Unbiased Acc.", 100.0),
    ("worst_group_acc", "Worst-group Acc.", 100.0),
    ("ba", "BA", 1.0),
    ("eo", "EO", 1.0),
    ("di", "DI", 1.0),
    ("average_acc", "Average Acc.", 100.0),
)

SWEEP_PARAMS = ("beta", "rho", "corr")


@dataclass(frozen=True)
class RunPaths:
    root: Path

    @classmethod
    def for_run(cls, out_dir: str | Path, method: str, seed: int) -> "RunPaths":
        return cls(Path(out_dir) / method / f"seed-{seed}")

    @property
    def config(self) -> Path:
        return self.root / "config.cfg"

    @property
    def model(self) -> Path:
        return self.root / "model.json"

    @property
    def critic(self) -> Path:
        return self.root / "critic.json"

    @property
    def trainlog(self) -> Path:
        return self.root / "trainlog.csv"

    @property
    def report(self) -> Path:
        return self.root / REPORT_FILE


def write_json(data: Any, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")
    return path


def load_datasets(cfg: ExperimentConfig, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    if cfg.train_csv is not None:
        train = load_csv(cfg.train_csv)
        test = load_csv(cfg.test_csv, n_targets=train.n_targets, n_biases=train.n_biases)
        return train, test
    return generate(replace(cfg.dataset, seed=cfg.dataset.seed + seed))


def run_single(cfg: ExperimentConfig, method: MethodSpec, seed: int, out_dir: str | Path) -> Path:
    """Train one (method, seed) pair and persist config, checkpoints, log and report."""
    paths = RunPaths.for_run(out_dir, method.name, seed)
    train, test = load_datasets(cfg, seed)
    train_cfg = replace(method.train, seed=seed)
    root = RngState(seed)
    model = BiasModel(
        train.input_dim,
        train.n_targets,
        root.child(_MODEL_STREAM),
        hidden=cfg.hidden,
        feature_dim=cfg.feature_dim,
    )
    report_cfg = replace(cfg.report, rho=train_cfg.rho if train_cfg.flags.noise else 0.0)
    logger.info("run %s seed %d -> %s", method.name, seed, paths.root)
    result = fit(model, train, train_cfg, eval_ds=test, report_cfg=report_cfg)

    save_experiment_config(replace(cfg, methods=(method,), seeds=(seed,)), paths.config)
    save_model(result.model, paths.model)
    if result.critic is not None:
        save_checkpoint(result.critic.to_checkpoint(), paths.critic)
    result.log.to_csv(paths.trainlog)

    train_labels = train.yz_table()
    test_report = full_report(result.model, test, report_cfg, root.child(_REPORT_STREAM), train_labels=train_labels)
    report: dict[str, Any] = {
        "method": method.name,
        "train_method": train_cfg.method,
        "seed": seed,
        "test": test_report.to_dict(),
    }
    if cfg.probe:
        probe = linear_probe_experiment(result.model, train, train_cfg, report_cfg, eval_ds=test)
        report["probe_before"] = probe.before.to_dict()
        report["probe_after"] = probe.after.to_dict()
    write_json(report, paths.report)
    return paths.root


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    jobs: int | None = None,
    *,
    executor_factory: Callable[[int], Executor] = lambda workers: ThreadPoolExecutor(max_workers=workers),
) -> list[Path]:
    """Every method x seed as an independent job; returns run directories in config order."""
    out_dir = Path(cfg.output_dir if out_dir is None else out_dir)
    workers = cfg.jobs if jobs is None else jobs
    pairs = [(method, seed) for method in cfg.methods for seed in cfg.seeds]
    with executor_factory(max(1, workers)) as pool:
        futures = [pool.submit(run_single, cfg, method, seed, out_dir) for method, seed in pairs]
        return [future.result() for future in futures]


# -- reports --------------------------------------------------------------------


def find_run_dirs(paths: Iterable[str | Path]) -> list[Path]:
    """Run directories under the given paths (a run directory holds report.json)."""
    found: list[Path] = []
    for path in paths:
        path = Path(path)
        if (path / REPORT_FILE).is_file():
            found.append(path)
            continue
        if not path.is_dir():
            raise ConfigError(f"not a run directory: {path}")
        found.extend(sorted(report.parent for report in path.rglob(REPORT_FILE)))
    if not found:
        raise ConfigError("no run directories with report.json found")
    return found


def load_reports(run_dirs: Iterable[Path], key: str = "test") -> list[dict[str, Any]]:
    reports = []
    for run_dir in run_dirs:
        path = Path(run_dir) / REPORT_FILE
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if key not in data:
            raise ConfigError(f"{path}: missing '{key}' section")
        reports.append({"method": data.get("method", "?"), "seed": data.get("seed"), **data[key]})
    return reports


def _mean_std(values: Sequence[float]) -> tuple[float, float] | None:
    finite = [value for value in values if value is not None]
    if not finite:
        return None
    array = np.asarray(finite, dtype=np.float64)
    std = float(array.std(ddof=1)) if array.size > 1 else 0.0
    return float(array.mean()), std


def summarize_reports(reports: Sequence[Mapping[str, Any]]) -> list[dict[str, Any]]:
    """One row per method (first-seen order) with mean/std per table column."""
    methods: dict[str, list[Mapping[str, Any]]] = {}
    for report in reports:
        methods.setdefault(str(report["method"]), []).append(report)
    rows = []
    for method, group in methods.items():
        row: dict[str, Any] = {"method": method, "n_runs": len(group)}
        for key, _, scale in TABLE_COLUMNS:
            stats = _mean_std([None if r.get(key) is None else float(r[key]) * scale for r in group])
            row[f"{key}_mean"] = None if stats is None else stats[0]
            row[f"{key}_std"] = None if stats is None else stats[1]
        rows.append(row)
    return rows


def _align(header: list[str], body: list[list[str]]) -> str:
    widths = [max(len(line[index]) for line in [header, *body]) for index in range(len(header))]
    lines = ["  ".join(cell.ljust(width) for cell, width in zip(line, widths)).rstrip() for line in [header, *body]]
    lines.insert(1, "  ".join("-" * width for width in widths))
    return "\n".join(lines) + "\n"


def format_text_table(rows: Sequence[Mapping[str, Any]], label: str = "Method") -> str:
    header = [label] + [title for _, title, _ in TABLE_COLUMNS]
    body = []
    for row in rows:
        cells = [str(row["method"])]
        for key, _, scale in TABLE_COLUMNS:
            mean = row.get(f"{key}_mean")
            if mean is None:
                cells.append("n/a")
                continue
            digits = 1 if scale != 1.0 else 3
            cells.append(f"{mean:.{digits}f} ± {row[f'{key}_std']:.{digits}f}")
        body.append(cells)
    return _align(header, body)


def _csv_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format_float(value)
    return str(value)


def format_csv_table(rows: Sequence[Mapping[str, Any]]) -> str:
    if not rows:
        return ""
    names = list(rows[0].keys())
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(names)
    for row in rows:
        writer.writerow([_csv_cell(row[name]) for name in names])
    return buffer.getvalue()


def format_json_table(rows: Sequence[Mapping[str, Any]]) -> str:
    return json.dumps(list(rows), indent=2, sort_keys=True, allow_nan=False) + "\n"


TABLE_FORMATTERS: dict[str, Callable[[Sequence[Mapping[str, Any]]], str]] = {
    "text": format_text_table,
    "csv": format_csv_table,
    "json": format_json_table,
}

TABLE_SUFFIXES = {"text": "txt", "csv": "csv", "json": "json"}


def write_tables(rows: Sequence[Mapping[str, Any]], out_dir: Path, formats: Sequence[str], stem: str) -> list[Path]:
    written = []
    for name in formats:
        path = out_dir / f"{stem}.{TABLE_SUFFIXES[name]}"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(TABLE_FORMATTERS[name](rows), encoding="utf-8")
        written.append(path)
    return written


# -- sweeps ---------------------------------------------------------------------


def sweep_config(cfg: ExperimentConfig, param: str, value: float) -> ExperimentConfig:
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep parameter must be one of {list(SWEEP_PARAMS)}, got '{param}'")
    try:
        if param == "corr":
            return replace(cfg, dataset=replace(cfg.dataset, corr=value))
        methods = tuple(
            MethodSpec(method.name, replace(method.train, **{param: value})) for method in cfg.methods
        )
        return replace(cfg, methods=methods)
    except ValueError as exc:
        raise ConfigError(f"sweep {param}={value}: {exc}") from exc


def run_sweep(
    cfg: ExperimentConfig,
    param: str,
    values: Sequence[float],
    out_dir: str | Path | None = None,
    jobs: int | None = None,
    *,
    executor_factory: Callable[[int], Executor] = lambda workers: ThreadPoolExecutor(max_workers=workers),
) -> list[dict[str, Any]]:
    """Median of every table column per (value, method), plus Spearman of median Cobias vs the value."""
    out_dir = Path(cfg.output_dir if out_dir is None else out_dir) / f"sweep-{param}"
    configs = [(value, sweep_config(cfg, param, value)) for value in values]
    workers = max(1, cfg.jobs if jobs is None else jobs)
    jobs_list = [
        (value, method, seed, out_dir / f"{param}={value:g}")
        for value, swept in configs
        for method in swept.methods
        for seed in swept.seeds
    ]
    swept_by_value = dict(configs)
    with executor_factory(workers) as pool:
        futures = [
            pool.submit(run_single, swept_by_value[value], method, seed, run_root)
            for value, method, seed, run_root in jobs_list
        ]
        run_dirs = [future.result() for future in futures]

    reports = load_reports(run_dirs)
    rows: list[dict[str, Any]] = []
    for (value, method, _, _), report in zip(jobs_list, reports):
        row = next((r for r in rows if r[param] == value and r["method"] == method.name), None)
        if row is None:
            row = {param: value, "method": method.name, "_runs": []}
            rows.append(row)
        row["_runs"].append(report)
    for row in rows:
        runs = row.pop("_runs")
        row["n_runs"] = len(runs)
        for key, _, scale in TABLE_COLUMNS:
            finite = [float(run[key]) * scale for run in runs if run.get(key) is not None]
            row[f"{key}_median"] = float(np.median(finite)) if finite else None

    for method in cfg.methods:
        series = [(row[param], row["cobias_median"]) for row in rows if row["method"] == method.name]
        series = [(value, cobias) for value, cobias in series if cobias is not None]
        rank = None
        if len(series) >= 2:
            statistic = spearmanr([value for value, _ in series], [cobias for _, cobias in series])[0]
            rank = None if math.isnan(statistic) else float(statistic)
        for row in rows:
            if row["method"] == method.name:
                row["cobias_spearman"] = rank
        logger.info("sweep %s, method %s: Spearman(Cobias, %s) = %s", param, method.name, param, rank)
    return rows


def format_sweep_text(rows: Sequence[Mapping[str, Any]], param: str) -> str:
    header = [param, "Method", "Runs"] + [f"{title} (median)" for _, title, _ in TABLE_COLUMNS] + ["Spearman"]
    body = []
    for row in rows:
        cells = [f"{row[param]:g}", str(row["method"]), str(row["n_runs"])]
        for key, _, scale in TABLE_COLUMNS:
            value = row.get(f"{key}_median")
            cells.append("n/a" if value is None else f"{value:.{1 if scale != 1.0 else 3}f}")
        rank = row.get("cobias_spearman")
        cells.append("n/a" if rank is None else f"{rank:+.2f}")
        body.append(cells)
    return _align(header, body)
