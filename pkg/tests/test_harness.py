#!/usr/bin/env python
"""Tests for config parsing, sweep execution, CSV output and the command line."""

# xxxxxxxxxx Add the parent folder to the python path. xxxxxxxxxxxxxxxxxxxx
import sys
import os

try:
    parent_dir = os.path.split(os.path.abspath(os.path.dirname(__file__)))[0]
    sys.path.append(parent_dir)
except NameError:  # pragma: no cover
    parent_dir = '../'
    sys.path.append('../')
# xxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxx

from dataclasses import replace
import tempfile
import unittest
from unittest import mock

from click.testing import CliRunner
from numpy.testing import assert_array_equal

from errors import ConfigError, SingularMatrixError
import harness
from harness import (
    CSV_HEADER, ExperimentSpec, ResultRecord, apply_overrides, emit_csv, parse_config, read_csv,
    record_seed, run_sweep, summarize,
)
from optimizer import OptimizerConfig
from scenario import SystemConfig, sample_geometry

MINIMAL = "system.n_ue=6\nsystem.n_rrh=2\nsystem.m_antennas=4\nsystem.l_chains=2\nsystem.tau=2\n"


def tiny_spec(**changes):
    values = dict(
        base=SystemConfig(n_ue=3, n_rrh=1, m_antennas=2, l_chains=1, tau=2, rng_seed=5),
        optimizer=OptimizerConfig(max_outer_iters=2, inner_max_iters=20),
        schemes=("joint",),
        sweep_axis="l_chains",
        sweep_values=(1, 2),
        n_placements=2,
    )
    values.update(changes)
    return ExperimentSpec(**values)


def record(**changes):
    values = dict(scheme="joint", sweep_name="tau", sweep_value=2, placement=0, seed=123,
                  sum_mse_analytic=1.234567891234, sum_mse_empirical=None,
                  per_ue_mse=(1.234567891234,), iterations=3, wall_time_ms=12.5)
    values.update(changes)
    return ResultRecord(**values)


class ConfigTestCase(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def write(self, text):
        path = os.path.join(self.tmp.name, "experiment.cfg")
        with open(path, "w") as handle:
            handle.write(text)
        return path

    def test_minimal_config_defaults(self):
        spec = parse_config(self.write(MINIMAL))
        self.assertEqual(spec.n_placements, 50)
        self.assertEqual(spec.n_channel_trials, 0)
        self.assertEqual(spec.adc, "one-bit")
        self.assertEqual(spec.schemes, ("fully-random", "combiner-opt", "pilot-opt", "joint"))
        self.assertEqual(spec.sweep_axis, "iterations")
        self.assertEqual(spec.sweep_values, (30,))
        self.assertEqual(spec.optimizer, OptimizerConfig())
        self.assertEqual(spec.base.snr_db, 10.0)
        self.assertEqual(spec.base.power_per_ue, 1.0)

    def test_full_config(self):
        text = MINIMAL + (
            "# comment line\n\noptimizer.gamma0=0.5\noptimizer.keep_best=false\n"
            "sweep.axis=l_chains\nsweep.values=1,2,3,4\n"
            "experiment.scheme=joint, pilot-opt\nexperiment.seed=9\n"
        )
        spec = parse_config(self.write(text))
        self.assertEqual(spec.optimizer.gamma0, 0.5)
        self.assertFalse(spec.optimizer.keep_best)
        self.assertEqual(spec.sweep_values, (1, 2, 3, 4))
        self.assertEqual(spec.schemes, ("joint", "pilot-opt"))
        self.assertEqual(spec.seed, 9)

    def test_chains_above_antennas(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config(self.write(MINIMAL.replace("l_chains=2", "l_chains=5")))
        self.assertIn("system.l_chains", str(ctx.exception))
        self.assertIn("system.m_antennas", str(ctx.exception))

    def test_unknown_key(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config(self.write(MINIMAL + "system.colour=blue\n"))
        self.assertIn("system.colour", str(ctx.exception))

    def test_missing_key(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config(self.write(MINIMAL.replace("system.tau=2\n", "")))
        self.assertIn("system.tau", str(ctx.exception))

    def test_malformed_value(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config(self.write(MINIMAL + "optimizer.gamma0=fast\n"))
        self.assertIn("optimizer.gamma0", str(ctx.exception))

    def test_unknown_scheme(self):
        with self.assertRaises(ConfigError):
            parse_config(self.write(MINIMAL + "experiment.scheme=greedy\n"))

    def test_bundled_configs(self):
        spec = parse_config(os.path.join(parent_dir, "configs", "fig4_snr.cfg"))
        self.assertEqual((spec.base.n_ue, spec.base.n_rrh, spec.base.m_antennas), (6, 2, 10))
        self.assertEqual((spec.base.l_chains, spec.base.tau), (2, 3))
        for name in ("fig1_iterations.cfg", "fig2_rf_chains.cfg", "fig3_pilot_length.cfg",
                     "highres_rf_chains.cfg"):
            parse_config(os.path.join(parent_dir, "configs", name))

    def test_overrides(self):
        spec = apply_overrides(parse_config(self.write(MINIMAL)), scheme="joint", seed=4,
                               empirical_trials=100, workers=2)
        self.assertEqual(spec.schemes, ("joint",))
        self.assertEqual(spec.seed, 4)
        self.assertEqual(spec.n_channel_trials, 100)
        self.assertEqual(spec.workers, 2)


class SeedTestCase(unittest.TestCase):
    def test_stable_and_distinct(self):
        self.assertEqual(record_seed(1, 2, 3), record_seed(1, 2, 3))
        self.assertNotEqual(record_seed(1, 2, 3), record_seed(1, 2, 4))
        self.assertNotEqual(record_seed(1, 2, 3), record_seed(1, 3, 3))
        self.assertLess(record_seed(1, None, 0), 1 << 63)


class CsvTestCase(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = os.path.join(self.tmp.name, "out.csv")

    def test_empty_records(self):
        emit_csv([], self.path)
        with open(self.path, newline="") as handle:
            self.assertEqual(handle.read(), ",".join(CSV_HEADER) + "\n")

    def test_missing_empirical_field(self):
        emit_csv([record()], self.path)
        with open(self.path, newline="") as handle:
            row = handle.read().splitlines()[1]
        self.assertEqual(row, "joint,tau,2,0,123,1.23456789,,3,12.5")
        self.assertIsNone(read_csv(self.path)[0]["sum_mse_empirical"])

    def test_round_trip(self):
        records = [record(placement=p, sum_mse_analytic=0.1 * (p + 1) / 3,
                          sum_mse_empirical=0.2 / (p + 7), sweep_value=-10.5) for p in range(3)]
        emit_csv(records, self.path)
        rows = read_csv(self.path)
        for original, row in zip(records, rows):
            self.assertEqual(row["scheme"], original.scheme)
            self.assertEqual(row["placement"], original.placement)
            self.assertEqual(row["seed"], original.seed)
            self.assertAlmostEqual(row["sum_mse_analytic"] / original.sum_mse_analytic, 1.0, places=8)
            self.assertAlmostEqual(row["sum_mse_empirical"] / original.sum_mse_empirical, 1.0, places=8)
            self.assertEqual(row["sweep_value"], -10.5)

    def test_canonical_order(self):
        records = [record(placement=1), record(scheme="fully-random"), record(placement=0, sweep_value=1)]
        emit_csv(records, self.path)
        first = open(self.path).read()
        emit_csv(list(reversed(records)), self.path)
        self.assertEqual(open(self.path).read(), first)
        rows = read_csv(self.path)
        self.assertEqual([(r["scheme"], r["sweep_value"], r["placement"]) for r in rows],
                         [("fully-random", 2.0, 0), ("joint", 1.0, 0), ("joint", 2.0, 1)])


class SweepTestCase(unittest.TestCase):
    def test_deterministic(self):
        spec = tiny_spec()
        first = run_sweep(spec)
        second = run_sweep(spec)
        self.assertEqual(first, second)
        self.assertEqual(len(first), 4)
        for rec in first:
            self.assertAlmostEqual(rec.sum_mse_analytic, sum(rec.per_ue_mse), places=9)
            self.assertGreaterEqual(rec.sum_mse_analytic, 0.0)

    def test_workers_do_not_change_records(self):
        spec = tiny_spec()
        self.assertEqual(run_sweep(spec, workers=1), run_sweep(spec, workers=3))

    def test_record_reproducible_alone(self):
        spec = tiny_spec()
        records = run_sweep(spec)
        alone = run_sweep(replace(spec, sweep_values=(2,)))
        self.assertEqual([r for r in records if r.sweep_value == 2], alone)

    def test_infeasible_point_skipped(self):
        spec = tiny_spec(sweep_values=(1, 3))
        with self.assertLogs("harness", level="WARNING") as logs:
            records = run_sweep(spec)
        self.assertTrue(any("l_chains=3" in line for line in logs.output))
        self.assertEqual({r.sweep_value for r in records}, {1})

    def test_paired_scheme_dominance(self):
        spec = tiny_spec(schemes=("fully-random", "combiner-opt", "pilot-opt", "joint"), sweep_values=(1,))
        records = run_sweep(spec)
        by_key = {(r.scheme, r.placement): r.sum_mse_analytic for r in records}
        for placement in range(spec.n_placements):
            baseline = by_key[("fully-random", placement)]
            for scheme in ("combiner-opt", "pilot-opt", "joint"):
                self.assertLessEqual(by_key[(scheme, placement)], baseline + 1e-12)

    def test_iterations_axis(self):
        spec = tiny_spec(sweep_axis="iterations", sweep_values=(0, 1, 2),
                         schemes=("fully-random", "joint"), n_placements=1)
        records = run_sweep(spec)
        joint = [r for r in records if r.scheme == "joint"]
        self.assertEqual([r.sweep_value for r in joint], [0, 1, 2])
        self.assertEqual(len({r.seed for r in joint}), 1)
        random_zero = [r for r in records if r.scheme == "fully-random" and r.sweep_value == 0][0]
        self.assertEqual(joint[0].sum_mse_analytic, random_zero.sum_mse_analytic)

    def test_empirical_column(self):
        spec = tiny_spec(sweep_values=(1,), n_placements=1, n_channel_trials=200)
        (rec,) = run_sweep(spec)
        self.assertIsNotNone(rec.sum_mse_empirical)
        self.assertGreater(rec.sum_mse_empirical, 0.0)

    def test_high_resolution_path(self):
        spec = tiny_spec(adc="high-res-noiseless", sweep_axis="tau", sweep_values=(1, 2, 4),
                         schemes=("fully-random", "joint"), n_placements=1,
                         base=SystemConfig(n_ue=3, n_rrh=2, m_antennas=3, l_chains=2, tau=1, rng_seed=1))
        records = run_sweep(spec)
        self.assertEqual({r.sweep_value for r in records}, {1, 2})
        for rec in records:
            self.assertGreaterEqual(rec.sum_mse_analytic, -1e-9)
            self.assertAlmostEqual(rec.sum_mse_analytic / sum(rec.per_ue_mse), 1.0, places=8)

    def test_placements_pair_across_sweep_points(self):
        captured = []

        def recording(config, rng):
            geometry = sample_geometry(config, rng)
            captured.append(geometry)
            return geometry

        with mock.patch.object(harness, "sample_geometry", side_effect=recording):
            records = run_sweep(tiny_spec(n_placements=1, schemes=("fully-random", "joint")))
        self.assertEqual(len(captured), 4)
        for geometry in captured[1:]:
            assert_array_equal(geometry.distances, captured[0].distances)
        self.assertEqual(len({r.seed for r in records}), 2)

    def test_rf_chain_trend_of_random_designs(self):
        spec = parse_config(os.path.join(parent_dir, "configs", "fig2_rf_chains.cfg"))
        spec = replace(spec, schemes=("fully-random",), n_placements=100)
        means = [mean for _, _, mean, _ in summarize(run_sweep(spec))]
        self.assertEqual(len(means), 4)
        for fewer, more in zip(means, means[1:]):
            self.assertLessEqual(more, 1.02 * fewer)
        self.assertLess(means[-1], means[0])

    def test_high_resolution_square_combiners(self):
        spec = tiny_spec(adc="high-res-noiseless", sweep_values=(4,), schemes=("combiner-opt", "joint"),
                         n_placements=3,
                         base=SystemConfig(n_ue=6, n_rrh=2, m_antennas=4, l_chains=1, tau=6, rng_seed=2))
        records = run_sweep(spec)
        self.assertEqual(len(records), 6)
        for rec in records:
            self.assertTrue(all(value >= 0.0 for value in rec.per_ue_mse))
            self.assertLessEqual(abs(rec.sum_mse_analytic - sum(rec.per_ue_mse)), 1e-9)
            self.assertEqual(rec.iterations, 0)

    def test_high_resolution_iterations_axis(self):
        spec = tiny_spec(adc="high-res-noiseless", sweep_axis="iterations", sweep_values=(0, 3),
                         schemes=("fully-random",), n_placements=1)
        records = run_sweep(spec)
        self.assertEqual([r.sweep_value for r in records], [0, 3])
        self.assertEqual([r.iterations for r in records], [0, 0])

    def test_approximate_gain_warning(self):
        spec = tiny_spec(sweep_values=(1,), n_placements=1, n_channel_trials=50)
        with self.assertLogs("harness", level="WARNING") as logs:
            run_sweep(spec)
        self.assertTrue(any("sqrt_half" in line for line in logs.output))

    def test_invalid_specs(self):
        with self.assertRaises(ConfigError):
            tiny_spec(n_placements=0)
        with self.assertRaises(ConfigError):
            tiny_spec(sweep_axis="snr_db", sweep_values=())
        with self.assertRaises(ConfigError):
            tiny_spec(base=SystemConfig(n_ue=3, n_rrh=1, m_antennas=2, l_chains=1, tau=2, noise_var=0.0))


class CliTestCase(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.config = os.path.join(self.tmp.name, "run.cfg")
        with open(self.config, "w") as handle:
            handle.write("system.n_ue=2\nsystem.n_rrh=1\nsystem.m_antennas=2\nsystem.l_chains=1\n"
                         "system.tau=1\noptimizer.max_outer_iters=1\nexperiment.n_placements=1\n"
                         "sweep.axis=tau\nsweep.values=1,2\n")
        self.out = os.path.join(self.tmp.name, "run.csv")

    def test_success(self):
        result = CliRunner().invoke(harness.cli, ["run", "--config", self.config, "--out", self.out,
                                                  "--scheme", "fully-random,joint", "--seed", "3"])
        self.assertEqual(result.exit_code, 0, result.output)
        rows = read_csv(self.out)
        self.assertEqual(len(rows), 4)

    def test_config_error(self):
        with open(self.config, "a") as handle:
            handle.write("system.unknown=1\n")
        result = CliRunner().invoke(harness.cli, ["run", "--config", self.config, "--out", self.out])
        self.assertEqual(result.exit_code, 2)

    def test_numerical_error(self):
        with mock.patch.object(harness, "run_sweep", side_effect=SingularMatrixError("boom", 1e20)):
            result = CliRunner().invoke(harness.cli, ["run", "--config", self.config, "--out", self.out])
        self.assertEqual(result.exit_code, 3)


if __name__ == '__main__':
    unittest.main()
