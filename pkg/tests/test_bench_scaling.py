from __future__ import annotations

import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsectr.bench import (
    BENCH_COLUMNS,
    BenchConfig,
    analytic_flops,
    bench,
    count_forward,
    flops_estimate,
    full_attention_reference,
    write_bench_csv,
)
from sparsectr.scaling import fit_power_law, read_points, write_fit_csv
from instances import tiny_instance
from oracles import full_attention_oracle


class TestAnalytic:
    def test_default_ratio(self):
        sparse, full = analytic_flops(1, 2, 1024, 32, 2, 16, 32)
        assert sparse / full == (32 + 64 + 16) / 1024
        assert round(sparse / full, 3) == 0.109

    def test_degenerate_limit(self):
        n = 256
        sparse, full = analytic_flops(1, 1, n, n, 1, 0, 8)
        assert sparse / full == 2.0

    def test_ratio_decreases_in_n(self):
        ratios = [np.divide(*analytic_flops(1, 2, n, 16, 2, 16, 32)) for n in (128, 256, 512, 1024, 4096)]
        assert all(a > b for a, b in zip(ratios, ratios[1:]))

    def test_estimate_without_counting(self):
        est = flops_estimate(BenchConfig(), counted=False)
        assert est.analytic_ratio == pytest.approx(0.109375)


class TestCounted:
    @pytest.mark.parametrize("n,p,m,w", [(96, 4, 1, 4), (128, 8, 2, 8), (200, 6, 3, 10)])
    def test_sparse_cheaper_than_full(self, n, p, m, w):
        assert p + m * p + w + 1 < n
        cfg = BenchConfig(n=n, num_chunks=p, transition_m=m, local_w=w, d=16, num_heads=4)
        sparse, full = count_forward(cfg, "evo"), count_forward(cfg, "full")
        assert sparse.attention < full.attention

    def test_score_interactions_track_formula(self):
        cfg = BenchConfig(n=256, num_chunks=8, transition_m=2, local_w=8, d=16, num_heads=4)
        est = flops_estimate(cfg)
        # dense: exactly n x L queries-by-keys per layer
        assert est.interactions_full == cfg.num_layers * cfg.n * cfg.num_behaviors * cfg.d
        # sparse adds only the user slot of the local branch
        expected = cfg.num_layers * cfg.n * cfg.d * (cfg.num_chunks * (1 + cfg.transition_m) + cfg.local_w + 1)
        assert est.interactions_sparse == expected

    def test_full_reference_matches_oracle(self):
        inst = tiny_instance(np.random.default_rng(21))
        bias = inst.layout.biases(inst.slopes, ["full"])["full"]
        out = full_attention_reference(inst.e_s, inst.e_b(), inst.layout, inst.weights, bias).data[0]
        ref = full_attention_oracle(inst.e_s.data[0], inst.e_s.data[0, :inst.num_behaviors], inst.behavior_times,
                                    inst.candidate_times, inst.weight_arrays(), inst.slope_arrays(),
                                    inst.cfg.num_heads)
        np.testing.assert_allclose(out, ref, atol=1e-9)


class TestBench:
    def test_csv(self, tmp_path):
        grid = [BenchConfig(attention=a, n=64, d=8, num_heads=2, num_chunks=4, local_w=4, repeats=2)
                for a in ("evo", "full")]
        rows = bench(grid)
        path = tmp_path / "b.csv"
        write_bench_csv(rows, path)
        got = list(csv.DictReader(open(path)))
        assert list(got[0]) == BENCH_COLUMNS
        assert [r["attention"] for r in got] == ["evo", "full"]
        for r in got:
            assert float(r["median_ms"]) > 0 and int(r["peak_bytes"]) > 0 and int(r["counted_flops"]) > 0
        assert int(got[0]["counted_flops"]) < int(got[1]["counted_flops"])

    def test_config_validation(self):
        with pytest.raises(ValueError):
            BenchConfig.from_dict({"attention": "dense"})
        with pytest.raises(ValueError):
            BenchConfig.from_dict({"bogus": 1})


class TestPowerLaw:
    def test_exact_recovery(self):
        x = np.logspace(3, 12, 10)
        fit = fit_power_law(x, 0.72 - 1.0 * x ** -0.3)
        assert fit.E == pytest.approx(0.72, abs=1e-6)
        assert fit.A == pytest.approx(1.0, abs=1e-6)
        assert fit.alpha == pytest.approx(0.3, abs=1e-6)
        assert fit.r2 == pytest.approx(1.0, abs=1e-12)

    def test_constant_is_degenerate(self):
        fit = fit_power_law([1e6, 1e7, 1e8], [0.7, 0.7, 0.7])
        assert fit.degenerate and fit.A == 0.0 and fit.r2 == 1.0
        np.testing.assert_allclose(fit.predict([1.0, 2.0]), [0.7, 0.7], rtol=1e-15)

    def test_noisy_points(self):
        rng = np.random.default_rng(0)
        x = np.logspace(1, 6, 12)
        fits = []
        for _ in range(20):
            y = 0.72 - 1.0 * x ** -0.3 + rng.normal(0, 1e-4, x.size)
            fits.append(fit_power_law(x, y))
        assert all(f.r2 > 0.99 for f in fits)
        for f in fits:
            assert f.E == pytest.approx(0.72, rel=0.05)
            assert f.alpha == pytest.approx(0.3, rel=0.05)
            assert f.A == pytest.approx(1.0, rel=0.05)

    @settings(max_examples=20, deadline=None)
    @given(st.permutations(list(range(7))))
    def test_order_invariance(self, perm):
        x = np.logspace(4, 10, 7)
        y = 0.8 - 2.0 * x ** -0.2 + np.random.default_rng(1).normal(0, 1e-3, 7)
        base = fit_power_law(x, y)
        fit = fit_power_law(x[perm], y[perm])
        assert (fit.E, fit.A, fit.alpha, fit.r2) == (base.E, base.A, base.alpha, base.r2)

    def test_too_few_points(self):
        with pytest.raises(ValueError, match="at least 3"):
            fit_power_law([1.0, 2.0], [0.5, 0.6])

    def test_invalid_points(self):
        with pytest.raises(ValueError):
            fit_power_law([1.0, -2.0, 3.0], [0.5, 0.6, 0.7])

    def test_csv_round_trip(self, tmp_path):
        pts = tmp_path / "p.csv"
        x = np.logspace(5, 9, 5)
        y = 0.7 - 0.5 * x ** -0.25
        pts.write_text("flops,auc\n" + "".join(f"{float(a)!r},{float(b)!r}\n" for a, b in zip(x, y)))
        xr, yr = read_points(pts)
        np.testing.assert_array_equal(xr, x)
        fit = fit_power_law(xr, yr)
        out = tmp_path / "f.csv"
        write_fit_csv(out, xr, yr, fit)
        rows = list(csv.DictReader(open(out)))
        assert len(rows) == 5
        assert float(rows[0]["alpha"]) == fit.alpha
        np.testing.assert_allclose([float(r["fitted_auc"]) for r in rows], y, atol=1e-9)

    def test_bad_points_file(self, tmp_path):
        pts = tmp_path / "p.csv"
        pts.write_text("x,y\n1,2\n")
        with pytest.raises(ValueError, match="columns"):
            read_points(pts)
        pts.write_text("flops,auc\n1,2\nabc,3\n")
        with pytest.raises(ValueError, match="line 3"):
            read_points(pts)
