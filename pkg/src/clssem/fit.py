"""Fit diagnostics: the residual mean ``R``, a permutation null for ``F_min``
and a chi-square statistic for normally distributed residuals."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .model import Dataset, Model
from .optimizer import OptimizerConfig

logger = logging.getLogger(__name__)

DF_MODES = ("naive", "equations")


def residual_mean_R(f_min: float, n: int, m: int) -> float:
    """``sqrt(F_min / (n * m))``."""
    if f_min < 0:
        raise ValueError("f_min must be non-negative")
    return math.sqrt(f_min / (n * m))


def permute_columns(values: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Shuffle every column independently."""
    out = np.array(values, dtype=float, copy=True)
    n = out.shape[0]
    for j in range(out.shape[1]):
        out[:, j] = out[rng.permutation(n), j]
    return out


@dataclass
class PermutationNull:
    original: float
    samples: list[float]
    failures: int = 0
    errors: list[str] = field(default_factory=list)

    @property
    def fraction_below(self) -> float:
        """Share of null samples with ``F_min`` below the original fit."""
        if not self.samples:
            return float("nan")
        return float(np.mean(np.asarray(self.samples) < self.original))

    def as_dict(self) -> dict:
        d = asdict(self)
        d["fraction_below"] = self.fraction_below
        return d


def _null_rep(args):
    model, data, strategy, cfg, seed, rep, identity, penalty = args
    from .estimator import estimate

    rng = np.random.default_rng([seed, rep])
    values = data.values if identity else permute_columns(data.values, rng)
    try:
        res = estimate(model, data.with_values(values), strategy, cfg, penalty=penalty,
                       check_uniqueness=False)
    except Exception as exc:  # any failure of a replicate is recorded, not fatal
        return rep, None, f"{type(exc).__name__}: {exc}"
    return rep, res.f_min, None


def permutation_null_fit(model: Model, data: Dataset, strategy: str = "w1",
                         cfg: OptimizerConfig | None = None, reps: int = 20, seed: int = 0,
                         original: float | None = None, identity: bool = False,
                         penalty: float | None = None, jobs: int = 1) -> PermutationNull:
    """Re-estimate on column-permuted copies of the data.

    Each replicate shuffles every column with its own stream seeded by
    ``(seed, rep)`` and refits with the same strategy and optimizer settings
    as the original fit.  ``identity=True`` skips the shuffle (a check that
    the original ``F_min`` is reproduced).  Failed replicates are counted
    and excluded.
    """
    from .estimator import estimate

    if reps < 0:
        raise ValueError("reps must be non-negative")
    cfg = cfg or OptimizerConfig()
    if original is None:
        original = estimate(model, data, strategy, cfg, penalty=penalty,
                            check_uniqueness=False).f_min
    tasks = [(model, data, strategy, cfg, seed, r, identity, penalty) for r in range(reps)]
    if jobs > 1 and reps > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_null_rep, tasks))
    else:
        outcomes = [_null_rep(t) for t in tasks]
    outcomes.sort(key=lambda o: o[0])
    samples = [f for _, f, err in outcomes if err is None]
    errors = [err for _, _, err in outcomes if err is not None]
    for err in errors:
        logger.warning("permutation replicate failed: %s", err)
    return PermutationNull(float(original), samples, len(errors), errors)


@dataclass
class ChiSquare:
    statistic: float
    df: int
    p_value: float
    df_mode: str

    def as_dict(self) -> dict:
        return asdict(self)


def chi_square_fit(result, df_mode: str = "naive", sigma=None) -> ChiSquare:
    """Chi-square statistic ``sum_{i,l} eps[i,l]**2 / sigma_l**2``.

    Only meaningful if the residuals are independent and normal.  ``sigma``
    defaults to the residual standard deviations of the fit.  Degrees of
    freedom (both modes experimental):

    * ``"naive"``: ``n*m - (n*Q + S)``
    * ``"equations"``: ``n*m``
    """
    if df_mode not in DF_MODES:
        raise ValueError(f"df_mode must be one of {DF_MODES}")
    E = np.asarray(result.residuals, dtype=float)
    n, m = E.shape
    if sigma is None:
        var = E.var(axis=0)
    else:
        var = np.broadcast_to(np.asarray(sigma, dtype=float) ** 2, (m,))
    if np.any(var <= 0):
        raise ValueError("zero residual variance; chi-square statistic undefined")
    statistic = float(np.sum(E**2 / var))
    model = result.model
    if df_mode == "naive":
        df = n * m - (n * model.Q + model.S)
    else:
        df = n * m
    p = float(stats.chi2.sf(statistic, df)) if df > 0 else float("nan")
    return ChiSquare(statistic, int(df), p, df_mode)


@dataclass
class FitReport:
    R: float
    f_min: float
    null: PermutationNull | None = None
    chi_square: ChiSquare | None = None

    def as_dict(self) -> dict:
        d = {"R": self.R, "f_min": self.f_min}
        if self.null is not None:
            d["permutation"] = self.null.as_dict()
        if self.chi_square is not None:
            d["chi_square"] = self.chi_square.as_dict()
        return d
