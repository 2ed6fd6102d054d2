import json

import numpy as np
import pytest

from dosedml.coarsen import aipw_bin_means, make_partition
from dosedml.dataset import make_table
from dosedml.diagnostics import (
    balance_report,
    clip_floor,
    dose_response_export,
    overlap_report,
)
from dosedml.nuisance import clip_probabilities
from dosedml.simlab import bin_conditional_truth, canonical_dgp, sample_dgp


def _confounded(n=50000, seed=3, lam=(4.0, 6.0, 9.0)):
    import dataclasses
    dgp = dataclasses.replace(canonical_dgp(seed=seed), lam=lam)
    table, truth = sample_dgp(dgp, n)
    partition = make_partition(table.t, "quantile", 5)
    p, _ = bin_conditional_truth(dgp, partition)
    phat = clip_probabilities(p[truth.stratum], 1e-3)
    return table, partition, phat


class TestBalance:
    def test_identical_distributions_near_zero(self):
        rng = np.random.default_rng(0)
        n = 20000
        t = rng.gamma(3.0, 1.0, n)  # independent of the covariate
        x = rng.standard_normal(n)
        y = t + rng.standard_normal(n)
        table = make_table(y, t, x_num=x)
        partition = make_partition(t, "quantile", 4)
        phat = np.tile(partition.masses, (n, 1))
        report = balance_report(table, partition, phat)
        pre, post = report.max_abs()
        assert pre < 0.06 and post < 0.06

    def test_weighting_reduces_imbalance(self):
        table, partition, phat = _confounded()
        report = balance_report(table, partition, phat)
        pre, post = report.max_abs()
        assert pre > 0.3
        assert post < pre

    def test_constant_covariate_skipped(self):
        rng = np.random.default_rng(1)
        n = 4000
        t = rng.integers(0, 3, n).astype(float)
        table = make_table(rng.standard_normal(n), t,
                           x_num=np.full((n, 1), 2.5))
        partition = make_partition(t, "unit_integer", 0)
        phat = np.tile(partition.masses, (n, 1))
        report = balance_report(table, partition, phat)
        assert report.skipped == ("x0",)
        assert report.rows == ()

    def test_smd_invariant_to_rescaling(self):
        table, partition, phat = _confounded(n=20000)
        base = balance_report(table, partition, phat)
        # rescale by replacing the categorical covariate with an affine copy
        rescaled = make_table(table.y, table.t,
                              x_num=5.0 - 3.0 * table.x_cat[:, 0])
        out = balance_report(rescaled, partition, phat)
        for a, b in zip(base.rows, out.rows):
            assert abs(abs(a.smd_pre) - abs(b.smd_pre)) < 1e-12
            assert abs(abs(a.smd_post) - abs(b.smd_post)) < 1e-12

    def test_empty_baseline_errors(self):
        table, partition, phat = _confounded(n=5000)
        from dosedml.errors import ConfigError
        with pytest.raises(ConfigError):
            balance_report(table, partition, phat, baseline=99)

    def test_csv_writer(self, tmp_path):
        table, partition, phat = _confounded(n=5000)
        report = balance_report(table, partition, phat)
        path = tmp_path / "balance.csv"
        report.write_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "covariate,bin,smd_pre,smd_post"
        assert len(lines) == 1 + len(report.rows)


class TestOverlap:
    def test_uniform_propensities_no_warnings(self):
        phat = np.full((1000, 4), 0.25)
        report = overlap_report(phat, clip=1e-3)
        assert report.warnings == ()
        assert all(b["n_at_clip_floor"] == 0 for b in report.bins)

    def test_deterministic_bin_warns(self):
        rng = np.random.default_rng(2)
        n = 2000
        raw = np.column_stack([np.full(n, 1e-6), rng.uniform(0.3, 0.7, n)])
        raw = np.column_stack([raw, 1.0 - raw.sum(axis=1)])
        phat = clip_probabilities(raw, 1e-3)
        report = overlap_report(phat, clip=1e-3)
        assert any("bin 0" in w for w in report.warnings)

    def test_flags_exactly_clipped_rows(self):
        # half the rows clipped in bin 0, well separated from the floor
        n = 1000
        raw = np.column_stack([
            np.where(np.arange(n) < 500, 1e-5, 0.3),
            np.full(n, 0.2)])
        raw = np.column_stack([raw, 1.0 - raw.sum(axis=1)])
        phat = clip_probabilities(raw, 1e-3)
        report = overlap_report(phat, clip=1e-3)
        assert report.bins[0]["n_at_clip_floor"] == 500
        assert (phat[:, 0] <= clip_floor(1e-3)).sum() == 500

    def test_quantiles_monotone(self):
        rng = np.random.default_rng(5)
        phat = clip_probabilities(rng.dirichlet(np.ones(3), 500), 1e-3)
        report = overlap_report(phat, clip=1e-3)
        for b in report.bins:
            qs = list(b["quantiles"].values())
            assert qs == sorted(qs)
            assert b["min"] <= qs[0] and qs[-1] <= b["max"]


class TestDoseResponseExport:
    def _means(self):
        rng = np.random.default_rng(7)
        n = 3000
        t = rng.integers(0, 3, n).astype(float)
        y = 2.0 * t + rng.standard_normal(n)
        table = make_table(y, t, x_cat=np.zeros(n, dtype=int))
        partition = make_partition(t, "unit_integer", 0)
        phat = np.tile(partition.masses, (n, 1))
        mhat = np.tile(np.array([0.0, 2.0, 4.0]), (n, 1))
        return aipw_bin_means(table, partition, phat, mhat), partition

    def test_shapes(self):
        means, partition = self._means()
        payload = dose_response_export(means, partition)
        assert len(payload.curve) == 3
        assert len(payload.effects) == 2
        assert len(payload.masses) == 3

    def test_effects_are_adjacent_differences(self):
        means, partition = self._means()
        payload = dose_response_export(means, partition)
        for row in payload.effects:
            expected = means.psi[row["to_bin"]] - means.psi[row["from_bin"]]
            assert row["effect"] == pytest.approx(expected, abs=1e-12)

    def test_masses_sum_to_one(self):
        means, partition = self._means()
        payload = dose_response_export(means, partition)
        assert sum(r["mass"] for r in payload.masses) == pytest.approx(1.0)

    def test_writers(self, tmp_path):
        means, partition = self._means()
        payload = dose_response_export(means, partition)
        paths = payload.write_csv(str(tmp_path / "dose"))
        assert [p.endswith(s) for p, s in
                zip(paths, ("_curve.csv", "_effects.csv", "_masses.csv"))]
        for p in paths:
            assert (tmp_path / p.split("/")[-1]).exists()
        blob = json.dumps(payload.to_dict())
        assert "curve" in blob and "masses" in blob
