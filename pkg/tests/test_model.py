import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgecdn.model import (Catalog, ClassSpec, InfeasibleProfileError, ReplicationProfile,
                           SystemParams, class_catalog, clamp_and_renormalize,
                           integer_budget_round, proportional_replication, read_profile_csv,
                           write_profile_csv, zipf_catalog)

from conftest import CLASS_MODEL


class TestSystemParams:
    def test_from_load_derives_lambda_bar(self):
        p = SystemParams.from_load(n=200, m=2000, d=10, rho=0.9)
        assert p.lambda_bar == pytest.approx(9.0)
        assert p.budget == 20000
        assert p.mean_replicas == 100

    @pytest.mark.parametrize("kw", [
        dict(n=0, m=10, d=1, rho=0.5, lambda_bar=0.0),
        dict(n=5, m=10, d=6, rho=0.5, lambda_bar=1.0),
        dict(n=10, m=10, d=2, rho=1.0, lambda_bar=1.0),
        dict(n=10, m=10, d=2, rho=0.5, lambda_bar=0.6),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SystemParams(**kw)

    def test_cap(self):
        assert SystemParams.from_load(200, 2000, 10, 0.9).cap() == 1900


class TestZipf:
    def test_uniform_when_alpha_zero(self):
        np.testing.assert_allclose(zipf_catalog(4, 0.0, 2.0).popularities, 2.0)

    @given(n=st.integers(2, 500), alpha=st.floats(0, 3), lam=st.floats(0.01, 100))
    @settings(max_examples=50, deadline=None)
    def test_mean_and_ratio(self, n, alpha, lam):
        cat = zipf_catalog(n, alpha, lam)
        assert cat.lambda_bar == pytest.approx(lam, rel=1e-12)
        assert cat.popularities[0] / cat.popularities[1] == pytest.approx(2.0 ** alpha)
        assert np.all(np.diff(cat.popularities) <= 0)

    def test_desk_instance(self, zipf08):
        cat, params = zipf08
        assert params.rho == pytest.approx(0.9)
        assert cat.lambda_bar == pytest.approx(9.0)

    def test_rejects_negative_alpha(self):
        with pytest.raises(ValueError):
            zipf_catalog(10, -1, 1.0)


class TestClassCatalog:
    def test_class_model_totals(self):
        cat = class_catalog(CLASS_MODEL)
        assert cat.n == 1000
        assert cat.total_rate == pytest.approx(3400)
        assert 3400 / 0.9 == pytest.approx(3778, abs=1)
        np.testing.assert_array_equal(cat.popularities[:200], 9.0)
        np.testing.assert_array_equal(cat.popularities[600:], 1.0)

    def test_single_class_uniform(self):
        cat = class_catalog(ClassSpec((5,), (2.0,)))
        np.testing.assert_array_equal(cat.popularities, 2.0)

    def test_scale_is_linear(self):
        a, b = class_catalog(CLASS_MODEL), class_catalog(CLASS_MODEL, 2.0)
        np.testing.assert_allclose(b.popularities, 2 * a.popularities)
        assert b.lambda_bar == pytest.approx(2 * a.lambda_bar)

    def test_empty_spec(self):
        with pytest.raises(ValueError):
            ClassSpec((), ())


class TestRounding:
    def test_integers_unchanged(self):
        np.testing.assert_array_equal(integer_budget_round([3.0, 4.0, 5.0], 12), [3, 4, 5])

    def test_tie_goes_to_lower_index(self):
        np.testing.assert_array_equal(integer_budget_round([1.5, 1.5], 3), [2, 1])

    def test_negative_targets(self):
        with pytest.raises(ValueError):
            integer_budget_round([-1.0, 2.0], 1)

    def test_class_model_targets(self):
        # proportional targets per content are 201.18 / 67.06 / 22.35
        t = np.repeat(np.array([9, 3, 1]) * 76000 / 3400, [200, 400, 400])
        out = integer_budget_round(t, 76000)
        assert out.sum() == 76000
        assert set(np.unique(out[:200])) <= {201, 202}
        assert set(np.unique(out[200:600])) <= {67, 68}
        assert set(np.unique(out[600:])) <= {22, 23}

    @given(st.lists(st.floats(0.01, 1000), min_size=1, max_size=60), st.integers(1, 10_000))
    @settings(max_examples=80, deadline=None)
    def test_floor_or_ceil_and_exact_sum(self, raw, budget):
        t = np.array(raw) * (budget / sum(raw))
        out = integer_budget_round(t, budget)
        assert out.sum() == budget
        assert np.all((out == np.floor(t)) | (out == np.ceil(t)) | np.isclose(out, t))


class TestProportional:
    def test_class_model_classes(self):
        """Largest remainder gives 201/67/22-23 per class; 200/67/23 is within one replica."""
        cat = class_catalog(CLASS_MODEL)
        params = SystemParams.from_catalog(cat, 3800, 20)
        prof = proportional_replication(cat, params)
        assert prof.total == 76000
        for k, (lo, hi) in enumerate([(0, 200), (200, 600), (600, 1000)]):
            assert np.all(np.abs(prof.replicas[lo:hi] - CLASS_MODEL.replicas[k]) <= 1)

    def test_uniform_catalog(self):
        cat = Catalog(np.full(50, 2.0))
        params = SystemParams.from_catalog(cat, 200, 5)
        np.testing.assert_array_equal(proportional_replication(cat, params).replicas, 20)

    def test_zipf12_hits_cap(self, zipf12):
        cat, params = zipf12
        raw = cat.popularities[0] * params.budget / cat.total_rate
        assert raw > 0.95 * params.m
        prof = proportional_replication(cat, params)
        assert prof.replicas[0] == params.cap()
        assert prof.replicas.max() <= params.cap()
        assert prof.total == params.budget

    @given(n=st.integers(10, 200), alpha=st.floats(0, 2))
    @settings(max_examples=40, deadline=None)
    def test_monotone_and_conserving(self, n, alpha):
        m, d = 5 * n, 5
        cat = zipf_catalog(n, alpha, 0.8 * m / n)
        params = SystemParams.from_catalog(cat, m, d)
        prof = proportional_replication(cat, params)
        assert prof.total == m * d
        assert prof.replicas.max() <= params.cap()
        assert np.all(np.diff(prof.replicas) <= 0)

    def test_infeasible(self):
        with pytest.raises(InfeasibleProfileError):
            clamp_and_renormalize(np.ones(2), budget=100, cap=10)


class TestProfile:
    def test_validate(self, zipf08):
        cat, params = zipf08
        with pytest.raises(InfeasibleProfileError):
            ReplicationProfile(np.full(200, 99)).validate(params)
        reps = np.full(200, 100)
        reps[0], reps[1] = 1901, 100 - 1801
        with pytest.raises(ValueError):
            ReplicationProfile(reps)
        reps = np.full(200, 100)
        reps[0], reps[1:20] = 1901, 100 - 1801 // 19
        with pytest.raises(InfeasibleProfileError):
            ReplicationProfile(reps).validate(params)

    def test_csv_round_trip(self, tmp_path, zipf08):
        cat, params = zipf08
        prof = proportional_replication(cat, params)
        path = tmp_path / "p.csv"
        write_profile_csv(path, cat, prof)
        assert path.read_text().splitlines()[0] == "content_id,lambda,replicas"
        cat2, prof2 = read_profile_csv(path)
        np.testing.assert_array_equal(cat2.popularities, cat.popularities)
        np.testing.assert_array_equal(prof2.replicas, prof.replicas)

    def test_csv_missing_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("content_id,lambda\n0,1.0\n")
        with pytest.raises(ValueError):
            read_profile_csv(path)
