"""Estimation: bind model, data and weight strategy; run the optimizer; package
parameter estimates, latent scores, residuals and diagnostics."""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .expr import EvaluationError
from .model import Dataset, Model, scale_anchors
from .objective import Objective
from .optimizer import (
    InitializationError,
    OptimizerConfig,
    OptimResult,
    local_uniqueness,
    minimize,
)

logger = logging.getLogger(__name__)

STRATEGIES = ("w1", "wn", "ww", "wo", "wa")


class EstimationError(RuntimeError):
    """Estimation failed; ``diagnostics`` holds whatever was collected."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# ---------------------------------------------------------------------------
# Start values
# ---------------------------------------------------------------------------


def _param_roles(obj: Objective) -> dict[str, str]:
    """Classify free parameters as 'offset', 'structural' or 'loading'.

    Offsets enter their equations with a case-independent derivative;
    parameters of equations with two or more latents are structural;
    everything else is treated as a loading.
    """
    model = obj.model
    rng = np.random.default_rng(0)
    p = np.ones(obj.layout.S)
    Z = rng.standard_normal((obj.n, obj.layout.Q))
    b = obj.bindings(p, Z)
    roles: dict[str, str] = {}
    for name in model.free_params:
        constant = True
        structural = False
        for eq, tape in zip(model.equations, obj.tapes):
            if name not in eq.symbols():
                continue
            if eq.n_latent >= 2:
                structural = True
            with np.errstate(all="ignore"):
                try:
                    d = np.broadcast_to(tape.partials(tape.forward(b))[name], (obj.n,))
                except EvaluationError:
                    constant = False
                    continue
            if not np.allclose(d, d[0], rtol=1e-12, atol=1e-12):
                constant = False
        roles[name] = "offset" if constant else "structural" if structural else "loading"
    return roles


def base_start(obj: Objective) -> np.ndarray:
    """Deterministic start: loadings 1, structural coefficients and offsets 0;
    each latent starts at its (centered) indicator value."""
    model = obj.model
    roles = _param_roles(obj)
    p = np.array([0.0 if roles[name] != "loading" else 1.0 for name in model.free_params])
    n, Q = obj.n, obj.layout.Q
    Z = np.zeros((n, Q))
    anchors = scale_anchors(model)
    rng = np.random.default_rng(1)
    for q, name in enumerate(model.latent):
        cands = []
        if name in anchors:
            cands.append(anchors[name])
        cands += [l for l, eq in enumerate(model.equations)
                  if eq.latents == frozenset([name]) and l not in cands]
        col = None
        for l in cands:
            b = obj.bindings(p, Z)
            b[name] = np.zeros(n)
            tape = obj.tapes[l]
            with np.errstate(all="ignore"):
                try:
                    vals = tape.forward(b)
                    d = np.broadcast_to(tape.partials(vals)[name], (n,))
                except EvaluationError:
                    continue
                g0 = np.broadcast_to(vals[-1], (n,))
                cand = -g0 / d
            if np.all(np.isfinite(cand)):
                col = cand - cand.mean()
                break
        if col is None:
            col = 0.1 * rng.standard_normal(n)
        Z[:, q] = col
    return obj.layout.join(p, Z)


def make_initializer(obj: Objective, warm: np.ndarray | None = None):
    """Start ``k``: the warm start (if given), the base start, then seeded
    Gaussian perturbations of the base start (SD 0.5 relative)."""
    base = base_start(obj)
    S = obj.layout.S
    fixed_starts = [warm] if warm is not None else []
    fixed_starts.append(base)
    _, Zb = obj.layout.split(base)
    zscale = np.maximum(Zb.std(axis=0), 1e-3)

    def init(k: int, rng: np.random.Generator, attempt: int = 0) -> np.ndarray:
        if k < len(fixed_starts) and attempt == 0:
            return np.array(fixed_starts[k], dtype=float)
        p, Z = obj.layout.split(base)
        p = p + 0.5 * np.maximum(np.abs(p), 1.0) * rng.standard_normal(S)
        Z = Z + 0.5 * zscale * rng.standard_normal(Z.shape)
        return obj.layout.join(p, Z)

    return init


# ---------------------------------------------------------------------------
# Fitting with fixed weights
# ---------------------------------------------------------------------------


@dataclass
class Fit:
    objective: Objective
    opt: OptimResult

    @property
    def u(self) -> np.ndarray:
        return self.opt.x

    def residuals(self) -> np.ndarray:
        return self.objective.residuals(self.opt.x)

    def residual_variances(self) -> np.ndarray:
        return self.residuals().var(axis=0)


def fit_weighted(model: Model, data: Dataset, weights: Sequence[float],
                 cfg: OptimizerConfig | None = None, penalty: float | None = None,
                 warm: np.ndarray | None = None) -> Fit:
    """Minimize ``F_w`` for fixed weights."""
    cfg = cfg or OptimizerConfig()
    obj = Objective(model, data, weights, penalty)
    init = make_initializer(obj, warm)
    # stopping scale from the cold start, so warm starts are held to the same test
    g_ref = obj.value_and_gradient(base_start(obj))[1]
    ref = float(np.max(np.abs(g_ref))) if np.all(np.isfinite(g_ref)) else None
    try:
        opt = minimize(obj, cfg, init, gtol_ref=ref)
    except InitializationError as exc:
        raise EstimationError(f"initialization failed: {exc}") from exc
    return Fit(obj, opt)


def variance_floor(model: Model, data: Dataset) -> float:
    cols = np.column_stack(list(data.columns_for(model).values()))
    scale = float(np.mean(cols.var(axis=0))) or 1.0
    return 1e-8 * scale


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass
class EstimationResult:
    model: Model
    strategy: str
    params: dict[str, float]
    latent_scores: np.ndarray
    residuals: np.ndarray
    weights: np.ndarray
    f_min: float
    u: np.ndarray
    converged: bool
    starts: list = field(default_factory=list)
    uniqueness: str | None = None
    fit: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def n(self) -> int:
        return self.latent_scores.shape[0]

    @property
    def residual_variances(self) -> np.ndarray:
        return self.residual_cov.diagonal().copy()

    @property
    def residual_cov(self) -> np.ndarray:
        return error_covariances(self)[0]

    @property
    def latent_error_cov(self) -> np.ndarray:
        return error_covariances(self)[1]

    @property
    def f_unweighted(self) -> float:
        return float(np.sum(self.residuals**2))

    def to_dict(self, include_cases: bool = True) -> dict:
        labels = [eq.label for eq in self.model.equations]
        rcov, lcov = error_covariances(self)
        out = {
            "strategy": self.strategy,
            "n": self.n,
            "params": {k: float(v) for k, v in self.params.items()},
            "fixed_params": {k: float(v) for k, v in self.model.fixed.items()},
            "latent_scores": {"columns": list(self.model.latent),
                              "values": self.latent_scores.tolist() if include_cases else []},
            "residuals": {"columns": labels,
                          "values": self.residuals.tolist() if include_cases else []},
            "residual_cov": {"labels": labels, "matrix": rcov.tolist()},
            "latent_error_cov": {"latents": list(self.model.latent), "labels": labels,
                                 "matrix": lcov.tolist()},
            "weights": dict(zip(labels, map(float, self.weights))),
            "f_min": float(self.f_min),
            "fit": self.fit,
            "diagnostics": {
                "converged": bool(self.converged),
                "uniqueness": self.uniqueness,
                "starts": [s.as_dict() if hasattr(s, "as_dict") else s for s in self.starts],
                "wall_time": self.wall_time,
                **self.diagnostics,
            },
        }
        return _jsonable(out)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def error_covariances(result: EstimationResult) -> tuple[np.ndarray, np.ndarray]:
    """Residual covariance (m, m) and latent-residual covariance (Q, m).

    Sample covariances with denominator ``n``.
    """
    E = result.residuals - result.residuals.mean(axis=0)
    Z = result.latent_scores - result.latent_scores.mean(axis=0)
    n = E.shape[0]
    return E.T @ E / n, Z.T @ E / n


RESULT_SCHEMA = {
    "type": "object",
    "required": ["params", "latent_scores", "residuals", "residual_cov", "latent_error_cov",
                 "weights", "f_min", "fit", "diagnostics"],
    "properties": {
        "strategy": {"type": "string"},
        "n": {"type": "integer", "minimum": 1},
        "params": {"type": "object", "additionalProperties": {"type": ["number", "null"]}},
        "fixed_params": {"type": "object"},
        "latent_scores": {
            "type": "object", "required": ["columns", "values"],
            "properties": {"columns": {"type": "array", "items": {"type": "string"}},
                           "values": {"type": "array", "items": {"type": "array"}}}},
        "residuals": {
            "type": "object", "required": ["columns", "values"],
            "properties": {"columns": {"type": "array", "items": {"type": "string"}},
                           "values": {"type": "array", "items": {"type": "array"}}}},
        "residual_cov": {"type": "object", "required": ["labels", "matrix"]},
        "latent_error_cov": {"type": "object", "required": ["latents", "labels", "matrix"]},
        "weights": {"type": "object", "additionalProperties": {"type": "number"}},
        "f_min": {"type": ["number", "null"]},
        "fit": {"type": "object", "required": ["R"],
                "properties": {"R": {"type": ["number", "null"]}}},
        "diagnostics": {"type": "object", "required": ["converged", "starts"],
                        "properties": {"converged": {"type": "boolean"},
                                       "starts": {"type": "array"}}},
    },
}


def package(fit: Fit, strategy: str, weights: np.ndarray, check_uniqueness: bool = True,
            diagnostics: dict | None = None, t0: float | None = None) -> EstimationResult:
    from .fit import residual_mean_R

    obj = fit.objective
    model = obj.model
    u = fit.opt.x
    p, _ = obj.layout.split(u)
    Z = obj.latent_scores(u)
    R = obj.residuals(u)
    params = dict(zip(model.free_params, map(float, p)))
    uniq = local_uniqueness(obj, u) if check_uniqueness else None
    diag = dict(diagnostics or {})
    if obj.soft:
        diag["constraint_violations"] = obj.constraint_violations(u)
    result = EstimationResult(
        model=model, strategy=strategy, params=params, latent_scores=Z, residuals=R,
        weights=np.asarray(weights, dtype=float), f_min=float(fit.opt.fun), u=u,
        converged=fit.opt.converged, starts=list(fit.opt.starts), uniqueness=uniq,
        diagnostics=diag)
    result.fit = {"R": residual_mean_R(result.f_unweighted, obj.n, model.m),
                  "f_unweighted": result.f_unweighted}
    if t0 is not None:
        result.wall_time = time.perf_counter() - t0
    return result


def _fix_signs(fit: Fit, cfg: OptimizerConfig) -> tuple[Fit, list[str]]:
    """Orient latents scaled by normalize() so they covary positively with
    their first indicator; the flipped start is refit and kept only if it
    reaches the same objective value."""
    obj = fit.objective
    model = obj.model
    normalized = [c.args[0] for c in obj.constraints if c.kind == "normalize"]
    anchors = scale_anchors(model)
    flipped = []
    for name in normalized:
        if name in anchors:
            continue
        q = model.latent.index(name)
        indicator = next((eq for eq in model.equations
                          if eq.latents == frozenset([name])
                          and any(x in eq.symbols() for x in model.manifest)), None)
        if indicator is None:
            continue
        x = obj.columns[next(x for x in model.manifest if x in indicator.symbols())]
        Z = obj.latent_scores(fit.u)
        if np.cov(Z[:, q], x)[0, 1] >= 0:
            continue
        p, V = obj.layout.split(fit.u)
        V = V.copy()
        V[:, q] = -V[:, q]
        start = obj.layout.join(-p, V)
        opt = minimize(obj, OptimizerConfig(**{**cfg.__dict__, "multistart": 1}), start)
        Z2 = obj.latent_scores(opt.x)
        if abs(opt.fun - fit.opt.fun) <= 1e-8 * max(1.0, abs(fit.opt.fun)) and \
                np.cov(Z2[:, q], x)[0, 1] >= 0:
            opt.starts = fit.opt.starts + opt.starts
            fit = Fit(obj, opt)
            flipped.append(name)
    return fit, flipped


def estimate(model: Model, data: Dataset, strategy: str = "w1",
             cfg: OptimizerConfig | None = None, penalty: float | None = None,
             check_uniqueness: bool = True, **options) -> EstimationResult:
    """Estimate parameters and latent scores.

    Parameters
    ----------
    model, data
        The model and a dataset covering its manifest variables.
    strategy : {'w1', 'wn', 'ww', 'wo', 'wa'}
        Weight strategy, see :mod:`clssem.weights`.
    cfg : OptimizerConfig, optional
        Optimizer settings (multi-starts, seed, tolerances, outer budget).
    penalty : float, optional
        Soft-constraint penalty constant.
    check_uniqueness : bool
        Classify the Hessian at the solution.
    **options
        Strategy settings: ``ww_iterations`` (1-3), ``wo_penalty``,
        ``wo_method`` and ``wa_budget``.

    Raises
    ------
    EstimationError
        If no estimate could be produced.
    """
    from . import weights as W

    t0 = time.perf_counter()
    cfg = cfg or OptimizerConfig()
    strategy = strategy.lower()
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")
    if data.n < model.Q + model.S:
        warnings.warn(f"only {data.n} cases for {model.Q} latents and {model.S} free "
                      "parameters", RuntimeWarning, stacklevel=2)
    diag: dict = {}
    if strategy == "w1":
        w = W.weights_w1(model.m)
        fit = fit_weighted(model, data, w, cfg, penalty)
    elif strategy == "wn":
        w = W.weights_wn(model, data.n)
        fit = fit_weighted(model, data, w, cfg, penalty)
    elif strategy == "ww":
        out = W.weights_ww(model, data, cfg, penalty=penalty,
                           iterations=options.get("ww_iterations", 1))
        w, fit = out.weights, out.fit
        diag.update(out.diagnostics)
    elif strategy == "wo":
        out = W.weights_wo(model, data, cfg, penalty=penalty,
                           wo_penalty=options.get("wo_penalty"),
                           method=options.get("wo_method", "fixed-point"))
        w, fit = out.weights, out.fit
        diag.update(out.diagnostics)
    else:
        out = W.weights_wa(model, data, cfg, penalty=penalty,
                           budget=options.get("wa_budget"))
        w, fit = out.weights, out.fit
        diag.update(out.diagnostics)
    fit, flipped = _fix_signs(fit, cfg)
    if flipped:
        diag["sign_flipped"] = flipped
    return package(fit, strategy, w, check_uniqueness, diag, t0)
