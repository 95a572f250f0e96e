"""Local quasi-Newton minimization with multi-starts, a Hessian-based local
uniqueness check, and a derivative-free maximizer over the weight simplex."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy import optimize
from scipy.sparse.linalg import eigsh

logger = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-6


class InitializationError(RuntimeError):
    """No start point with a finite objective could be produced."""


class Minimizable(Protocol):
    size: int

    def value(self, u: np.ndarray) -> float: ...

    def value_and_gradient(self, u: np.ndarray) -> tuple[float, np.ndarray]: ...


@dataclass
class OptimizerConfig:
    max_iter: int = 2000
    gtol: float = 1e-8
    """Gradient tolerance relative to the (inf-)norm of the first start's gradient."""
    multistart: int = 5
    seed: int = 0
    memory: int = 20
    ftol: float = 1e-15
    max_linesearch: int = 40
    outer_budget: int = 60
    init_retries: int = 10

    def __post_init__(self):
        if self.gtol <= 0 or self.ftol <= 0:
            raise ValueError("tolerances must be positive")
        if self.multistart < 1:
            raise ValueError("multistart must be at least 1")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class StartRecord:
    index: int
    f_start: float
    f_final: float
    converged: bool
    iterations: int
    grad_norm: float
    message: str

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    converged: bool
    starts: list[StartRecord] = field(default_factory=list)
    uniqueness: str | None = None

    @property
    def best_start(self) -> int:
        return min(self.starts, key=lambda s: (s.f_final, s.index)).index


Initializer = Callable[[int, np.random.Generator, int], np.ndarray]


def _as_initializer(init) -> Initializer:
    if callable(init):
        return init
    x0 = np.asarray(init, dtype=float)

    def perturbed(k: int, rng: np.random.Generator, attempt: int = 0) -> np.ndarray:
        if k == 0 and attempt == 0:
            return x0.copy()
        return x0 + 0.5 * np.maximum(np.abs(x0), 1.0) * rng.standard_normal(x0.shape)

    return perturbed


def local_minimize(obj: Minimizable, x0: np.ndarray, cfg: OptimizerConfig,
                   gtol_abs: float | None = None,
                   bounds: Sequence[tuple[float | None, float | None]] | None = None
                   ) -> tuple[np.ndarray, float, bool, int, float, str]:
    """One L-BFGS run from ``x0``.

    The objective is divided by its starting value for the solver's sake, so
    ``gtol_abs`` (in unscaled units) is converted accordingly.  Returns
    ``(x, f, converged, iterations, grad_inf_norm, message)``.
    """
    f0, g0 = obj.value_and_gradient(x0)
    if not np.isfinite(f0):
        raise InitializationError("objective not finite at start point")
    scale = max(abs(f0), 1e-300)
    if gtol_abs is None:
        gtol_abs = cfg.gtol * max(float(np.max(np.abs(g0))) if g0.size else 0.0, 1e-300)
    best = {"f": f0, "x": np.array(x0, dtype=float)}

    def fun(x):
        f, g = obj.value_and_gradient(x)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            return 1e30, np.zeros_like(x)
        if f < best["f"]:
            best["f"], best["x"] = f, x.copy()
        return f / scale, g / scale

    res = optimize.minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                            options=dict(maxiter=cfg.max_iter, maxcor=cfg.memory,
                                         ftol=cfg.ftol, gtol=gtol_abs / scale,
                                         maxls=cfg.max_linesearch, maxfun=10 * cfg.max_iter))
    x = res.x
    f, g = obj.value_and_gradient(x)
    if not np.isfinite(f) or best["f"] < f:
        x, f = best["x"], best["f"]
        g = obj.value_and_gradient(x)[1]
    gproj = _projected_gradient(x, g, bounds)
    gnorm = float(np.max(np.abs(gproj))) if gproj.size else 0.0
    converged = bool(gnorm <= gtol_abs or (res.success and res.nit < cfg.max_iter))
    msg = res.message if isinstance(res.message, str) else res.message.decode()
    return x, float(f), converged, int(res.nit), gnorm, msg


def _projected_gradient(x, g, bounds):
    if bounds is None:
        return g
    g = g.copy()
    for j, (lo, hi) in enumerate(bounds):
        if lo is not None and x[j] <= lo and g[j] > 0:
            g[j] = 0.0
        if hi is not None and x[j] >= hi and g[j] < 0:
            g[j] = 0.0
    return g


def minimize(obj: Minimizable, cfg: OptimizerConfig | None = None, init=None,
             bounds=None, gtol_ref: float | None = None) -> OptimResult:
    """Best local minimizer over ``cfg.multistart`` seeded starts.

    Parameters
    ----------
    obj
        Anything with ``size``, ``value`` and ``value_and_gradient``.
    init
        Either a start vector (later starts add seeded Gaussian noise with SD
        ``0.5 * max(|x0|, 1)``) or a callable ``init(k, rng, attempt)``
        returning start ``k``; ``attempt`` counts retries after non-finite
        starts.  Start ``k`` draws from its own stream seeded by
        ``(cfg.seed, k)``.
    gtol_ref
        Gradient scale for the stopping test, ``|g|_inf <= gtol * gtol_ref``.
        Defaults to the gradient norm at the first finite start, which is
        too strict when that start is already close to a minimizer.
    """
    cfg = cfg or OptimizerConfig()
    init = _as_initializer(np.zeros(obj.size) if init is None else init)
    records: list[StartRecord] = []
    best = None
    gtol_abs = None if gtol_ref is None else cfg.gtol * max(gtol_ref, 1e-300)
    for k in range(cfg.multistart):
        rng = np.random.default_rng([cfg.seed, k])
        x0 = None
        for attempt in range(cfg.init_retries):
            cand = np.asarray(init(k, rng, attempt), dtype=float)
            f0, g0 = obj.value_and_gradient(cand)
            if np.isfinite(f0) and np.all(np.isfinite(g0)):
                x0 = cand
                break
        if x0 is None:
            logger.warning("start %d: no finite start point after %d tries", k, cfg.init_retries)
            records.append(StartRecord(k, np.inf, np.inf, False, 0, np.inf, "non-finite start"))
            continue
        if gtol_abs is None:
            gtol_abs = cfg.gtol * max(float(np.max(np.abs(g0))) if g0.size else 0.0, 1e-300)
        x, f, conv, nit, gnorm, msg = local_minimize(obj, x0, cfg, gtol_abs, bounds)
        records.append(StartRecord(k, float(f0), f, conv, nit, gnorm, msg))
        if best is None or f < best[1]:
            best = (x, f, conv)
    if best is None:
        raise InitializationError("objective non-finite at every start point")
    return OptimResult(best[0], best[1], best[2], records)


# ---------------------------------------------------------------------------
# Local uniqueness
# ---------------------------------------------------------------------------

POSITIVE_DEFINITE = "positive-definite"
SEMI_DEFINITE = "semi-definite"
INDEFINITE = "indefinite"
UNKNOWN = "unknown"


def fd_hessian(obj: Minimizable, u: np.ndarray, rel_step: float = 1e-5) -> np.ndarray:
    """Central differences of the analytic gradient, symmetrized."""
    u = np.asarray(u, dtype=float)
    n = u.size
    H = np.empty((n, n))
    for j in range(n):
        h = rel_step * max(1.0, abs(u[j]))
        e = np.zeros(n)
        e[j] = h
        gp = obj.value_and_gradient(u + e)[1]
        gm = obj.value_and_gradient(u - e)[1]
        H[:, j] = (gp - gm) / (2 * h)
    return 0.5 * (H + H.T)


def classify_eigenvalues(eigs: np.ndarray, rtol: float = 1e-7) -> str:
    eigs = np.asarray(eigs)
    if eigs.size == 0 or not np.all(np.isfinite(eigs)):
        return UNKNOWN
    top = float(np.max(np.abs(eigs)))
    if top == 0:
        return SEMI_DEFINITE
    tol = rtol * top
    lo = float(np.min(eigs))
    if lo > tol:
        return POSITIVE_DEFINITE
    if lo >= -tol:
        return SEMI_DEFINITE
    return INDEFINITE


def local_uniqueness(obj, u: np.ndarray, exact_max: int = 200, rtol: float = 1e-7) -> str:
    """Definiteness of the Hessian at a minimizer, restricted to free directions.

    Uses a finite-difference Hessian when ``u`` has at most ``exact_max``
    entries (or hard constraints are active) and the Gauss-Newton matrix
    otherwise.  Directions that hard constraints leave inert are projected
    out first.  Returns ``"positive-definite"``, ``"semi-definite"``,
    ``"indefinite"`` or ``"unknown"``.
    """
    u = np.asarray(u, dtype=float)
    gauge = obj.gauge_directions(u) if hasattr(obj, "gauge_directions") else []
    hard = bool(gauge)
    try:
        if u.size <= exact_max or hard or not hasattr(obj, "gauss_newton_hessian"):
            H = fd_hessian(obj, u)
        else:
            H = obj.gauss_newton_hessian(u)
            if u.size > 3000:
                return _classify_sparse(H, rtol)
            H = H.toarray()
        if gauge:
            G = np.column_stack(gauge)
            Qfull, _ = np.linalg.qr(np.column_stack([G, np.eye(u.size)]))
            basis = Qfull[:, G.shape[1]:u.size]
            H = basis.T @ H @ basis
        eigs = np.linalg.eigvalsh(H)
    except (np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
        logger.warning("local uniqueness check failed: %s", exc)
        return UNKNOWN
    return classify_eigenvalues(eigs, rtol)


def _classify_sparse(H, rtol: float) -> str:
    try:
        top = eigsh(H, k=1, which="LA", return_eigenvectors=False)[0]
        low = eigsh(H, k=1, sigma=-abs(top) * 1e-3, which="LM", return_eigenvectors=False)[0]
    except Exception as exc:  # ARPACK failures surface as several types
        logger.warning("sparse eigenvalue computation failed: %s", exc)
        return UNKNOWN
    return classify_eigenvalues(np.array([low, top]), rtol)


# ---------------------------------------------------------------------------
# Derivative-free search over the weight simplex
# ---------------------------------------------------------------------------


def project_to_simplex(x: np.ndarray, floor: float = WEIGHT_FLOOR) -> np.ndarray:
    """Euclidean projection onto ``{w : sum(w) = 1, w >= floor}``."""
    x = np.asarray(x, dtype=float)
    m = x.size
    total = 1.0 - m * floor
    if total < 0:
        raise ValueError("weight floor too large for this dimension")
    y = x - floor
    s = np.sort(y)[::-1]
    css = np.cumsum(s) - total
    idx = np.arange(1, m + 1)
    rho = np.nonzero(s - css / idx > 0)[0][-1]
    tau = css[rho] / (rho + 1)
    return np.maximum(y - tau, 0.0) + floor


@dataclass
class SimplexResult:
    weights: np.ndarray
    value: float
    evaluations: int
    exhausted: bool
    history: list[tuple[np.ndarray, float]] = field(default_factory=list)


def maximize_on_simplex(f: Callable[[np.ndarray], float], m: int, budget: int = 60,
                        seed: int = 0, x0: Sequence[float] | None = None,
                        floor: float = WEIGHT_FLOOR, step: float = 0.1) -> SimplexResult:
    """Maximize ``f`` over weight vectors with ``sum(w) = 1`` and ``w >= floor``.

    Nelder-Mead search on the first ``m - 1`` coordinates; every trial point
    is projected back onto the simplex before ``f`` sees it.  The best point
    seen is returned, with ``exhausted`` set when the evaluation budget ran
    out before the simplex collapsed.
    """
    if m < 1:
        raise ValueError("dimension must be at least 1")
    if m == 1:
        return SimplexResult(np.ones(1), float("nan"), 0, False)
    start = np.full(m, 1.0 / m) if x0 is None else project_to_simplex(np.asarray(x0, float), floor)
    history: list[tuple[np.ndarray, float]] = []
    best = {"w": start, "f": -np.inf}

    def to_weights(y):
        return project_to_simplex(np.append(y, 1.0 - np.sum(y)), floor)

    def neg(y):
        w = to_weights(y)
        val = float(f(w))
        if not np.isfinite(val):
            val = -np.inf
        history.append((w, val))
        if val > best["f"]:
            best["w"], best["f"] = w, val
        return -val if np.isfinite(val) else 1e30

    rng = np.random.default_rng(seed)
    y0 = start[:-1]
    # rotated initial simplex so the seed matters; each vertex moves one step
    rot, _ = np.linalg.qr(rng.standard_normal((m - 1, m - 1)))
    simplex = np.vstack([y0] + [y0 + step * rot[j] / m for j in range(m - 1)])
    res = optimize.minimize(neg, y0, method="Nelder-Mead",
                            options=dict(maxfev=budget, initial_simplex=simplex,
                                         xatol=1e-6, fatol=1e-12))
    exhausted = len(history) >= budget and not res.success
    return SimplexResult(best["w"], best["f"], len(history), bool(exhausted), history)
