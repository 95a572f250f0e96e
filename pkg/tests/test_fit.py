from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from clssem.estimator import estimate
from clssem.fit import (DF_MODES, FitReport, chi_square_fit, permutation_null_fit,
                        permute_columns, residual_mean_R)
from clssem.model import Dataset
from clssem.optimizer import OptimizerConfig
from clssem.simgen import get_study

CFG = OptimizerConfig(multistart=1, seed=0)


def _result(residuals, Q=1, S=1):
    E = np.asarray(residuals, dtype=float)
    return SimpleNamespace(residuals=E, model=SimpleNamespace(Q=Q, S=S))


@pytest.mark.parametrize("f, n, m, R", [(0.0, 5, 3, 0.0), (15.0, 5, 3, 1.0), (4.0, 2, 2, 1.0)])
def test_residual_mean(f, n, m, R):
    assert residual_mean_R(f, n, m) == R


def test_residual_mean_rejects_negative():
    with pytest.raises(ValueError):
        residual_mean_R(-1.0, 2, 2)


@given(st.floats(0, 1e6), st.floats(0, 1e6), st.integers(1, 500), st.integers(1, 20))
def test_residual_mean_monotone(f1, f2, n, m):
    lo, hi = sorted((f1, f2))
    assert residual_mean_R(lo, n, m) <= residual_mean_R(hi, n, m)
    assert residual_mean_R(hi, n, m) == pytest.approx(np.sqrt(hi / (n * m)))


@given(st.integers(0, 1000))
def test_permute_columns_preserves_marginals(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((12, 3))
    P = permute_columns(X, np.random.default_rng(seed))
    for j in range(3):
        np.testing.assert_array_equal(np.sort(P[:, j]), np.sort(X[:, j]))


def test_r_invariant_under_case_permutation():
    study = get_study("regression")
    data, _ = study.generate(40, seed=1)
    a = estimate(study.model(), data, "w1", CFG, check_uniqueness=False)
    perm = np.random.default_rng(0).permutation(40)
    b = estimate(study.model(), data.take(perm), "w1", CFG, check_uniqueness=False)
    assert b.fit["R"] == pytest.approx(a.fit["R"], rel=1e-7)


# -- permutation null ------------------------------------------------------

def test_structured_data_beats_every_permutation():
    study = get_study("regression")
    data, _ = study.generate(100, seed=3)
    null = permutation_null_fit(study.model(), data, "w1", CFG, reps=20, seed=3)
    assert len(null.samples) == 20 and null.failures == 0
    assert null.fraction_below == 0.0
    assert all(s >= 0 for s in null.samples)


def test_pure_noise_sits_inside_null():
    rng = np.random.default_rng(12)
    data = Dataset.from_mapping({c: rng.standard_normal(60) for c in ("x1", "x2", "y1", "y2")})
    null = permutation_null_fit(get_study("regression").model(), data, "w1", CFG, reps=20,
                                seed=1)
    assert 0.0 < null.fraction_below < 1.0


def test_single_replicate():
    study = get_study("regression")
    data, _ = study.generate(30, seed=2)
    null = permutation_null_fit(study.model(), data, "w1", CFG, reps=1)
    assert len(null.samples) == 1


def test_identity_reproduces_original():
    study = get_study("regression")
    data, _ = study.generate(30, seed=2)
    orig = estimate(study.model(), data, "w1", CFG, check_uniqueness=False).f_min
    null = permutation_null_fit(study.model(), data, "w1", CFG, reps=2, identity=True)
    assert null.samples == [orig, orig]
    assert null.original == orig


def test_permutation_reproducible_and_jobs_independent():
    study = get_study("regression")
    data, _ = study.generate(30, seed=4)
    kw = dict(strategy="w1", cfg=CFG, reps=3, seed=9, original=1.0)
    a = permutation_null_fit(study.model(), data, **kw)
    b = permutation_null_fit(study.model(), data, **kw, jobs=2)
    assert a.samples == b.samples


def test_failed_replicates_counted(monkeypatch):
    import clssem.estimator as est

    study = get_study("regression")
    data, _ = study.generate(20, seed=5)
    real = est.estimate
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 2:
            raise est.EstimationError("boom")
        return real(*args, **kwargs)

    monkeypatch.setattr(est, "estimate", flaky)
    null = permutation_null_fit(study.model(), data, "w1", CFG, reps=3, original=1.0)
    assert null.failures == 1 and len(null.samples) == 2
    assert "boom" in null.errors[0]


def test_report_serialization():
    study = get_study("regression")
    data, _ = study.generate(20, seed=6)
    null = permutation_null_fit(study.model(), data, "w1", CFG, reps=2, original=0.5)
    rep = FitReport(0.1, 0.5, null, chi_square_fit(_result(np.ones((4, 2)) * [1, -1] *
                                                          [[1], [-1], [1], [-1]])))
    d = rep.as_dict()
    assert set(d) == {"R", "f_min", "permutation", "chi_square"}
    assert d["permutation"]["fraction_below"] == null.fraction_below


# -- chi-square ------------------------------------------------------------

def test_naive_df_arithmetic():
    E = np.random.default_rng(0).standard_normal((100, 13))
    out = chi_square_fit(_result(E, Q=3, S=8), "naive")
    assert out.df == 992
    assert chi_square_fit(_result(E, Q=3, S=8), "equations").df == 1300
    assert set(DF_MODES) == {"naive", "equations"}


def test_statistic_near_df_for_unit_normal_residuals():
    E = np.random.default_rng(1).standard_normal((1000, 4))
    out = chi_square_fit(_result(E), "equations", sigma=1.0)
    assert abs(out.statistic / out.df - 1) < 3 * np.sqrt(2 / out.df)
    assert 0.001 < out.p_value < 0.999


def test_zero_residuals_with_known_sigma():
    out = chi_square_fit(_result(np.zeros((5, 2))), "equations", sigma=[1.0, 2.0])
    assert out.statistic == 0.0
    assert out.p_value == 1.0


def test_zero_residual_variance_rejected():
    with pytest.raises(ValueError, match="zero residual variance"):
        chi_square_fit(_result(np.zeros((5, 2))))


def test_unknown_df_mode():
    with pytest.raises(ValueError):
        chi_square_fit(_result(np.ones((3, 1))), "exact")


def test_estimated_sigma_gives_nm_statistic():
    # with sigma_l estimated from the residuals themselves the statistic is
    # sum over l of n * mean(e**2) / var(e), i.e. n*m for centred residuals
    E = np.random.default_rng(2).standard_normal((50, 3))
    E -= E.mean(axis=0)
    assert chi_square_fit(_result(E)).statistic == pytest.approx(150.0)
