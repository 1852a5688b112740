"""
Batch experiment runner: config parsing, seeded Monte-Carlo sweeps over the
four design schemes, and CSV output.

Usage:
    python harness.py run --config configs/fig2_rf_chains.cfg --out fig2.csv
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor, as_completed
import csv
from dataclasses import dataclass, field, replace
import hashlib
import logging
import sys
import time

import click
import numpy as np

from errors import ConfigError, NumericalError
from estimation import (
    ADC_MODES, analytic_mse, build_model, empirical_mse, highres_stats, highres_summse, mmse_filter,
)
from optimizer import (
    SCHEMES, OptimizerConfig, highres_combiner_opt, highres_pilot_opt, init_design, run_algorithm1,
)
from scenario import SystemConfig, channel_stats, make_streams, sample_geometry

logger = logging.getLogger(__name__)

# --- CONFIGURATION ---
CSV_HEADER = (
    "scheme", "sweep_name", "sweep_value", "placement", "seed",
    "sum_mse_analytic", "sum_mse_empirical", "iterations", "wall_time_ms",
)
CSV_FLOAT_FORMAT = ".9g"
DEFAULT_N_PLACEMENTS = 50
DEFAULT_N_CHANNEL_TRIALS = 0
SEED_MASK = (1 << 63) - 1
SWEEP_AXES = {"iterations": int, "l_chains": int, "tau": int, "snr_db": float}

# config key -> parser, per section
SYSTEM_KEYS = {
    "n_ue": int, "n_rrh": int, "m_antennas": int, "l_chains": int, "tau": int,
    "power_per_ue": float, "snr_db": float, "noise_var": float, "area_side_m": float,
    "d_over_lambda": float, "delta_spread": float, "bussgang_gain": str,
}
OPTIMIZER_KEYS = {
    "max_outer_iters": int, "gamma0": float, "gamma_decay": float, "inner_max_iters": int,
    "inner_tol": float, "outer_tol": float, "keep_best": bool,
}
EXPERIMENT_KEYS = {
    "scheme": str, "adc": str, "n_placements": int, "n_channel_trials": int,
    "seed": int, "workers": int,
}
SWEEP_KEYS = {"axis": str, "values": str}
SECTIONS = {
    "system": SYSTEM_KEYS, "optimizer": OPTIMIZER_KEYS,
    "experiment": EXPERIMENT_KEYS, "sweep": SWEEP_KEYS,
}
REQUIRED_KEYS = ("system.n_ue", "system.n_rrh", "system.m_antennas", "system.l_chains", "system.tau")


@dataclass(frozen=True)
class ExperimentSpec:
    base: SystemConfig
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schemes: tuple[str, ...] = tuple(SCHEMES)
    sweep_axis: str = "iterations"
    sweep_values: tuple = ()
    n_placements: int = DEFAULT_N_PLACEMENTS
    n_channel_trials: int = DEFAULT_N_CHANNEL_TRIALS
    adc: str = "one-bit"
    workers: int = 1

    def __post_init__(self):
        for scheme in self.schemes:
            if scheme not in SCHEMES:
                raise ConfigError(f"experiment.scheme: unknown scheme {scheme!r}; expected {', '.join(SCHEMES)}")
        if not self.schemes:
            raise ConfigError("experiment.scheme must name at least one scheme")
        if self.sweep_axis not in SWEEP_AXES:
            raise ConfigError(f"sweep.axis must be one of {', '.join(SWEEP_AXES)}, got {self.sweep_axis!r}")
        if self.adc not in ADC_MODES:
            raise ConfigError(f"experiment.adc must be one of {', '.join(ADC_MODES)}, got {self.adc!r}")
        if self.n_placements < 1:
            raise ConfigError(f"experiment.n_placements must be >= 1, got {self.n_placements}")
        if self.n_channel_trials < 0:
            raise ConfigError(f"experiment.n_channel_trials must be >= 0, got {self.n_channel_trials}")
        if self.workers < 1:
            raise ConfigError(f"experiment.workers must be >= 1, got {self.workers}")
        if not self.sweep_values:
            if self.sweep_axis != "iterations":
                raise ConfigError(f"sweep.values is required for sweep.axis={self.sweep_axis}")
            object.__setattr__(self, "sweep_values", (self.optimizer.max_outer_iters,))
        floor = 0 if self.sweep_axis == "iterations" else 1
        if SWEEP_AXES[self.sweep_axis] is int and any(v < floor for v in self.sweep_values):
            raise ConfigError(f"sweep.values for {self.sweep_axis} must be >= {floor}, got {list(self.sweep_values)}")
        if self.adc == "one-bit":
            if self.base.noise_variance <= 0:
                raise ConfigError("system.noise_var must be > 0 with experiment.adc=one-bit")
        if self.sweep_axis == "snr_db" and self.base.noise_var is not None:
            raise ConfigError("sweep.axis=snr_db has no effect while system.noise_var is set")

    @property
    def seed(self) -> int:
        return self.base.rng_seed


@dataclass(frozen=True)
class ResultRecord:
    scheme: str
    sweep_name: str
    sweep_value: float
    placement: int
    seed: int
    sum_mse_analytic: float
    sum_mse_empirical: float | None
    per_ue_mse: tuple[float, ...]
    iterations: int
    wall_time_ms: float = field(default=0.0, compare=False)


def _parse_scalar(key: str, raw: str, kind):
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("true", "1", "yes")
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: malformed value {raw!r}") from None


def parse_schemes(raw: str) -> tuple[str, ...]:
    """'joint, pilot-opt' -> ('joint', 'pilot-opt'); 'all' selects every scheme."""
    names = tuple(part.strip() for part in raw.split(",") if part.strip())
    if names == ("all",):
        return tuple(SCHEMES)
    return names


def read_config_entries(path) -> dict[str, str]:
    """Flat key=value lines; blank lines and '#' comments are skipped."""
    entries = {}
    with open(path, encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {number}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key in entries:
                raise ConfigError(f"line {number}: duplicate key {key}")
            entries[key] = value
    return entries


def parse_config(path) -> ExperimentSpec:
    """Read a flat dotted key=value file into a validated ExperimentSpec."""
    values: dict[str, dict] = {section: {} for section in SECTIONS}
    for key, raw in read_config_entries(path).items():
        section, _, name = key.partition(".")
        if section not in SECTIONS or name not in SECTIONS[section]:
            raise ConfigError(f"unknown key {key}")
        values[section][name] = _parse_scalar(key, raw, SECTIONS[section][name])
    for key in REQUIRED_KEYS:
        section, _, name = key.partition(".")
        if name not in values[section]:
            raise ConfigError(f"missing required key {key}")

    experiment = values["experiment"]
    base = SystemConfig(**values["system"], rng_seed=experiment.pop("seed", 0))
    optimizer = OptimizerConfig(**values["optimizer"])
    axis = values["sweep"].get("axis", "iterations")
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep.axis must be one of {', '.join(SWEEP_AXES)}, got {axis!r}")
    sweep_values = ()
    if "values" in values["sweep"]:
        sweep_values = tuple(
            _parse_scalar("sweep.values", part.strip(), SWEEP_AXES[axis])
            for part in values["sweep"]["values"].split(",") if part.strip()
        )
    if "scheme" in experiment:
        experiment["schemes"] = parse_schemes(experiment.pop("scheme"))
    return ExperimentSpec(base=base, optimizer=optimizer, sweep_axis=axis,
                          sweep_values=sweep_values, **experiment)


def apply_overrides(spec: ExperimentSpec, scheme: str | None = None, seed: int | None = None,
                    empirical_trials: int | None = None, workers: int | None = None) -> ExperimentSpec:
    """Command-line flags take precedence over config keys."""
    changes = {}
    if scheme is not None:
        changes["schemes"] = parse_schemes(scheme)
    if seed is not None:
        changes["base"] = replace(spec.base, rng_seed=seed)
    if empirical_trials is not None:
        changes["n_channel_trials"] = empirical_trials
    if workers is not None:
        changes["workers"] = workers
    return replace(spec, **changes) if changes else spec


def record_seed(base_seed: int, sweep_value, placement: int) -> int:
    """Stable 63-bit seed for one (sweep point, placement); sweep_value None drops the point."""
    point = "" if sweep_value is None else repr(float(sweep_value))
    payload = f"{int(base_seed)}|{point}|{int(placement)}".encode()
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little") & SEED_MASK


def placement_seed(base_seed: int, placement: int) -> int:
    """Geometry seed shared by every scheme and sweep point of one placement."""
    return record_seed(base_seed, None, placement)


def point_config(spec: ExperimentSpec, sweep_value) -> SystemConfig:
    """System configuration of one sweep point. Raises ConfigError when infeasible."""
    if spec.sweep_axis == "iterations":
        config = spec.base
    else:
        config = replace(spec.base, **{spec.sweep_axis: sweep_value})
    if spec.adc == "high-res-noiseless" and config.tau > config.n_ue:
        raise ConfigError(
            f"system.tau={config.tau} exceeds system.n_ue={config.n_ue} on the noiseless path"
        )
    return config


def _one_bit_records(spec: ExperimentSpec, scheme: str, config: SystemConfig, sweep_value,
                     placement: int, seed: int, stats, streams, started: float) -> list[ResultRecord]:
    optimizer = spec.optimizer
    if spec.sweep_axis == "iterations":
        optimizer = replace(optimizer, max_outer_iters=max(spec.sweep_values))
    trace = run_algorithm1(config, optimizer, scheme, stats, streams.design)

    if spec.sweep_axis == "iterations":
        elapsed = (time.perf_counter() - started) * 1000.0
        last = len(trace.sum_mse) - 1
        records = []
        for value in spec.sweep_values:
            index = min(int(value), last)
            records.append(ResultRecord(
                scheme=scheme, sweep_name=spec.sweep_axis, sweep_value=value, placement=placement,
                seed=seed, sum_mse_analytic=float(trace.per_ue_mse[index].sum()),
                sum_mse_empirical=None, per_ue_mse=tuple(trace.per_ue_mse[index].tolist()),
                iterations=index, wall_time_ms=elapsed,
            ))
        return records

    empirical = None
    if spec.n_channel_trials > 0:
        empirical = empirical_mse(trace.pilots, trace.combiners, trace.filters, stats,
                                  config.noise_variance, spec.n_channel_trials, streams.empirical).total
    per_ue = trace.final_per_ue
    return [ResultRecord(
        scheme=scheme, sweep_name=spec.sweep_axis, sweep_value=sweep_value, placement=placement,
        seed=seed, sum_mse_analytic=float(per_ue.sum()), sum_mse_empirical=empirical,
        per_ue_mse=tuple(per_ue.tolist()), iterations=trace.iterations,
        wall_time_ms=(time.perf_counter() - started) * 1000.0,
    )]


def _highres_records(spec: ExperimentSpec, scheme: str, config: SystemConfig, sweep_value,
                     placement: int, seed: int, stats, streams, started: float) -> list[ResultRecord]:
    opt_pilots, opt_combiners = SCHEMES[scheme]
    pilots, combiners = init_design(config, streams.design)
    if opt_combiners:
        combiners = highres_combiner_opt(stats, config.l_chains, streams.design)
    hr = highres_stats(pilots, combiners, stats)
    if opt_pilots:
        weights = hr.trace_j
        pilots = highres_pilot_opt(stats, weights, config.tau, config.power_budget)
        hr = highres_stats(pilots, combiners, stats)

    model = build_model(pilots, combiners, stats, 0.0, adc="high-res-noiseless")
    filters = mmse_filter(model)
    per_ue = analytic_mse(filters, model).per_ue
    logger.debug("placement %d: decomposed sum-MSE %.6g, per-UE sum %.6g",
                 placement, highres_summse(hr), per_ue.sum())
    empirical = None
    if spec.n_channel_trials > 0:
        empirical = empirical_mse(pilots, combiners, filters, stats, 0.0, spec.n_channel_trials,
                                  streams.empirical, quantize=False).total
    return [ResultRecord(
        scheme=scheme, sweep_name=spec.sweep_axis, sweep_value=value, placement=placement,
        seed=seed, sum_mse_analytic=float(per_ue.sum()), sum_mse_empirical=empirical,
        per_ue_mse=tuple(per_ue.tolist()), iterations=0,
        wall_time_ms=(time.perf_counter() - started) * 1000.0,
    ) for value in ((sweep_value,) if spec.sweep_axis != "iterations" else spec.sweep_values)]


def run_point(spec: ExperimentSpec, scheme: str, sweep_value, placement: int) -> list[ResultRecord]:
    """
    Every record of one (scheme, sweep point, placement). On the iterations
    axis sweep_value is None and one run yields a record per swept count.
    """
    started = time.perf_counter()
    config = point_config(spec, sweep_value)
    seed = record_seed(spec.seed, sweep_value, placement)
    streams = make_streams(seed)
    geometry = sample_geometry(config, make_streams(placement_seed(spec.seed, placement)).geometry)
    stats = channel_stats(config, geometry)
    build = _one_bit_records if spec.adc == "one-bit" else _highres_records
    return build(spec, scheme, config, sweep_value, placement, seed, stats, streams, started)


def _sort_key(record: ResultRecord):
    return (record.scheme, record.sweep_value, record.placement)


def run_sweep(spec: ExperimentSpec, workers: int | None = None) -> list[ResultRecord]:
    """All records of an experiment, sorted on (scheme, sweep_value, placement)."""
    workers = spec.workers if workers is None else workers
    points = (None,) if spec.sweep_axis == "iterations" else spec.sweep_values
    tasks = []
    for value in points:
        try:
            point_config(spec, value)
        except ConfigError as err:
            logger.warning("Skipping %s=%s: %s", spec.sweep_axis, value, err)
            continue
        for scheme in spec.schemes:
            tasks.extend((scheme, value, placement) for placement in range(spec.n_placements))

    if spec.adc == "one-bit" and spec.n_channel_trials > 0 and spec.base.bussgang_gain == "sqrt_half":
        logger.warning("Gain rule sqrt_half models the quantizer only approximately; "
                       "sum_mse_empirical will sit systematically off sum_mse_analytic "
                       "(use system.bussgang_gain = sqrt_2_over_pi for an exact match)")
    logger.info("Running %d tasks (%s sweep, %s ADCs) on %d worker(s)",
                len(tasks), spec.sweep_axis, spec.adc, workers)
    records: list[ResultRecord] = []
    if workers == 1:
        for scheme, value, placement in tasks:
            records.extend(run_point(spec, scheme, value, placement))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_point, spec, *task) for task in tasks]
            for future in as_completed(futures):
                records.extend(future.result())
    records.sort(key=_sort_key)
    logger.info("Sweep produced %d records", len(records))
    return records


def _format_number(value) -> str:
    return "" if value is None else format(value, CSV_FLOAT_FORMAT)


def emit_csv(records: list[ResultRecord], path) -> None:
    """Write records in canonical order; numbers use 9 significant digits."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=CSV_HEADER, lineterminator="\n")
        writer.writeheader()
        for record in sorted(records, key=_sort_key):
            writer.writerow({
                "scheme": record.scheme,
                "sweep_name": record.sweep_name,
                "sweep_value": _format_number(record.sweep_value),
                "placement": record.placement,
                "seed": record.seed,
                "sum_mse_analytic": _format_number(record.sum_mse_analytic),
                "sum_mse_empirical": _format_number(record.sum_mse_empirical),
                "iterations": record.iterations,
                "wall_time_ms": _format_number(record.wall_time_ms),
            })


def read_csv(path) -> list[dict]:
    """Parse a file written by emit_csv; an empty empirical field reads as None."""
    integer_fields = ("placement", "seed", "iterations")
    rows = []
    with open(path, newline="", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            parsed = dict(row)
            for key in integer_fields:
                parsed[key] = int(row[key])
            for key in ("sweep_value", "sum_mse_analytic", "sum_mse_empirical", "wall_time_ms"):
                parsed[key] = float(row[key]) if row[key] != "" else None
            rows.append(parsed)
    return rows


def summarize(records: list[ResultRecord]) -> list[tuple[str, float, float, int]]:
    """Mean analytic sum-MSE per (scheme, sweep value)."""
    groups: dict[tuple, list[float]] = {}
    for record in records:
        groups.setdefault((record.scheme, record.sweep_value), []).append(record.sum_mse_analytic)
    return [(scheme, value, float(np.mean(vals)), len(vals))
            for (scheme, value), vals in sorted(groups.items())]


@click.group()
def cli():
    """Pilot and analog-combiner design experiments for one-bit cell-free receivers."""


@cli.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False), help="Experiment config file.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False), help="CSV output path.")
@click.option("--scheme", default=None, help="Scheme name or comma list; overrides experiment.scheme.")
@click.option("--seed", type=int, default=None, help="Base seed; overrides experiment.seed.")
@click.option("--empirical-trials", type=int, default=None,
              help="Monte-Carlo channel draws per record; overrides experiment.n_channel_trials.")
@click.option("--workers", type=int, default=None, help="Parallel workers; overrides experiment.workers.")
@click.option("--verbose", is_flag=True, help="Log per-iteration optimizer progress.")
def run(config_path, out_path, scheme, seed, empirical_trials, workers, verbose):
    """Run one experiment sweep and write its records as CSV."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        spec = apply_overrides(parse_config(config_path), scheme=scheme, seed=seed,
                               empirical_trials=empirical_trials, workers=workers)
    except ConfigError as err:
        click.echo(f"Configuration error: {err}", err=True)
        sys.exit(2)

    click.echo(f"Starting {spec.sweep_axis} sweep: {', '.join(spec.schemes)} "
               f"over {spec.n_placements} placement(s)...", err=True)
    try:
        records = run_sweep(spec)
    except NumericalError as err:
        click.echo(f"Numerical failure: {err}", err=True)
        sys.exit(3)
    except ConfigError as err:
        click.echo(f"Configuration error: {err}", err=True)
        sys.exit(2)

    try:
        emit_csv(records, out_path)
    except OSError as err:
        click.echo(f"Could not write {out_path}: {err}", err=True)
        sys.exit(1)
    for name, value, mean, count in summarize(records):
        click.echo(f"  {name:<13} {spec.sweep_axis}={value:<8g} mean sum-MSE {mean:.6g} ({count} runs)", err=True)
    click.echo(f"Sweep complete. {len(records)} records written to {out_path}.", err=True)


if __name__ == "__main__":
    cli()
