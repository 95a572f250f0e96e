"""Weight strategies for the equations of the objective.

``w1``  all ones.
``wn``  ``n ** -L_l`` with ``L_l`` the number of latents in equation ``l``.
``ww``  fit with ``wn``, then refit with reciprocal residual variances.
``wo``  weights and a proportionality factor ``K`` join the unknowns; a
        penalty ties ``w_l`` to ``K / var(eps_l)`` under ``sum(w) = 1``.
``wa``  search the weight simplex for weights parallel to the reciprocal
        residual variances they produce (angle criterion ``H``).
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .estimator import Fit, fit_weighted, variance_floor
from .model import Dataset, Model
from .objective import Objective
from .optimizer import (
    WEIGHT_FLOOR,
    OptimizerConfig,
    OptimResult,
    StartRecord,
    local_minimize,
    maximize_on_simplex,
)

logger = logging.getLogger(__name__)

MAX_WW_ITERATIONS = 3


class DegenerateWeightsWarning(RuntimeWarning):
    pass


@dataclass
class StrategyOutcome:
    weights: np.ndarray
    fit: Fit
    diagnostics: dict = field(default_factory=dict)


def weights_w1(m: int) -> np.ndarray:
    if m < 1:
        raise ValueError("need at least one equation")
    return np.ones(m)


def weights_wn(model: Model, n: int) -> np.ndarray:
    L = np.asarray(model.latent_counts, dtype=float)
    return float(n) ** -L


def reciprocal_variance_weights(variances, floor: float = 0.0) -> np.ndarray:
    v = np.maximum(np.asarray(variances, dtype=float), floor)
    return 1.0 / v


def weights_ww(model: Model, data: Dataset, cfg: OptimizerConfig | None = None,
               penalty: float | None = None, iterations: int = 1) -> StrategyOutcome:
    """Two-step weights: reciprocal residual variances of the ``wn`` fit.

    ``iterations > 1`` repeats the reweighting (at most 3 times).  The
    repeated scheme tends to drift towards a degenerate solution and is off
    by default.
    """
    if not 1 <= iterations <= MAX_WW_ITERATIONS:
        raise ValueError(f"iterations must be between 1 and {MAX_WW_ITERATIONS}")
    cfg = cfg or OptimizerConfig()
    floor = variance_floor(model, data)
    first = fit_weighted(model, data, weights_wn(model, data.n), cfg, penalty)
    stages = [{"weights": weights_wn(model, data.n).tolist(),
               "variances": first.residual_variances().tolist(),
               "converged": first.opt.converged}]
    fit = first
    for _ in range(iterations):
        var = fit.residual_variances()
        w = reciprocal_variance_weights(var, floor)
        fit = fit_weighted(model, data, w, cfg, penalty, warm=fit.u)
        stages.append({"weights": w.tolist(), "variances": fit.residual_variances().tolist(),
                       "converged": fit.opt.converged})
    return StrategyOutcome(w, fit, {"ww_stages": stages})


# ---------------------------------------------------------------------------
# Self-consistent weights
# ---------------------------------------------------------------------------


class SelfConsistentObjective:
    """``F_w(u) + P_o * sum_l (w_l - K / var_l(u))**2`` over ``(u, v, K)``.

    Weights are ``w = v / sum(v)`` so the sum constraint holds exactly;
    ``v`` and ``K`` are kept positive by bounds.  ``var_l`` is the sample
    variance of equation ``l``'s residuals, floored.
    """

    def __init__(self, base: Objective, wo_penalty: float, var_floor: float):
        self.base = base
        self.P = float(wo_penalty)
        self.floor = float(var_floor)
        self.m = base.model.m
        self.nu = base.size
        self.size = self.nu + self.m + 1

    def split(self, x: np.ndarray):
        return x[: self.nu], x[self.nu: self.nu + self.m], float(x[-1])

    def parts(self, x: np.ndarray) -> dict:
        u, v, K = self.split(x)
        R = self.base.residuals(u)
        w = v / v.sum()
        var = np.maximum(R.var(axis=0), self.floor)
        F = float(np.sum(w * np.sum(R**2, axis=0)))
        F += self.base.penalty_value(self.base.latent_scores(u), R)
        gap = w - K / var
        return {"u": u, "w": w, "K": K, "var": var, "F_w": F, "gap": gap,
                "F_o": F + self.P * float(gap @ gap)}

    def value(self, x: np.ndarray) -> float:
        try:
            return self.parts(x)["F_o"]
        except ArithmeticError:
            return np.inf

    def value_and_gradient(self, x: np.ndarray):
        u, v, K = self.split(x)
        base = self.base
        try:
            t = base.terms(u)
        except ArithmeticError:
            return np.inf, np.full(self.size, np.nan)
        R = t.residuals
        n = R.shape[0]
        Z = base.latent_scores(u)
        sv = v.sum()
        w = v / sv
        raw_var = R.var(axis=0)
        var = np.maximum(raw_var, self.floor)
        ss = np.sum(R**2, axis=0)
        gap = w - K / var
        f = float(w @ ss) + self.P * float(gap @ gap)
        C = 2.0 * R * w
        gZ = np.zeros_like(Z)
        f += base.accumulate_penalties(Z, R, C, gZ)
        live = raw_var > self.floor
        coef = np.where(live, 2.0 * self.P * gap * K / var**2, 0.0)
        C += coef * (2.0 / n) * (R - R.mean(axis=0))
        gu = base.pull_back(u, t, C, gZ)
        gw = ss + 2.0 * self.P * gap
        gv = (gw - gw @ w) / sv
        gK = float(np.sum(2.0 * self.P * gap * (-1.0 / var)))
        if not np.isfinite(f):
            return np.inf, np.full(self.size, np.nan)
        return f, np.concatenate([gu, gv, [gK]])


WO_METHODS = ("fixed-point", "penalty")


def _wo_default_penalty(base: Objective, u0: np.ndarray, w0: np.ndarray) -> float:
    F0 = float(np.sum(w0 * np.sum(base.residuals(u0) ** 2, axis=0)))
    return 1e4 * F0 / float(w0 @ w0)


def _wo_penalty_minimize(model, warm, cfg, wo_penalty, floor):
    base = warm.fit.objective.with_weights(np.ones(model.m))
    u0 = warm.fit.u
    var0 = np.maximum(base.residuals(u0).var(axis=0), floor)
    w0 = (1.0 / var0) / np.sum(1.0 / var0)
    K0 = float(np.mean(w0 * var0))
    if wo_penalty is None:
        wo_penalty = _wo_default_penalty(base, u0, w0)
    obj = SelfConsistentObjective(base, wo_penalty, floor)
    x0 = np.concatenate([u0, w0, [K0]])
    bounds = [(None, None)] * base.size + [(WEIGHT_FLOOR, None)] * model.m + [(1e-12 * K0, None)]
    x, f, conv, nit, gnorm, msg = local_minimize(obj, x0, cfg, bounds=bounds)
    parts = obj.parts(x)
    w, u = parts["w"], parts["u"]
    final_obj = base.with_weights(np.maximum(w, WEIGHT_FLOOR))
    record = StartRecord(0, obj.value(x0), f, conv, nit, gnorm, msg)
    fit = Fit(final_obj, OptimResult(u, final_obj.value(u), conv, [record]))
    return w, fit, parts, wo_penalty, conv


WO_STARTS = 3
WO_ROOT_TOL = 1e-5  # on log-weight ratios


def _wo_fixed_point(model, data, warm, cfg, penalty, wo_penalty, floor):
    from scipy.optimize import least_squares

    m = model.m
    # no f-based stop: the root search differences u*(w) across nearby w
    inner_cfg = replace(cfg, multistart=1, ftol=1e-300)
    state = {"u": warm.fit.u}

    def to_w(s):
        z = np.concatenate([s, [0.0]])
        e = np.exp(z - z.max())
        return e / e.sum()

    def inner(w):
        fit = fit_weighted(model, data, w, inner_cfg, penalty, warm=state["u"])
        state["u"] = fit.u
        return fit, np.maximum(fit.residual_variances(), floor)

    def resid(s):
        w = to_w(s)
        _, var = inner(w)
        t = np.log(1.0 / var) - np.log(np.sum(1.0 / var))
        return np.log(w[:-1]) - np.log(w[-1]) - (t[:-1] - t[-1])

    # Starts: the ww weights and two further reweighting steps.  The map has
    # several fixed points; among non-degenerate roots the one with the
    # smallest K (hence smallest F_w on the penalty's zero set) is kept.
    w_start = warm.weights / warm.weights.sum()
    roots = []
    for k in range(WO_STARTS):
        state["u"] = warm.fit.u
        s0 = np.log(w_start[:-1]) - np.log(w_start[-1])
        sol = least_squares(resid, s0, diff_step=1e-3, xtol=1e-10, max_nfev=40 * m)
        w = to_w(sol.x)
        fit, var = inner(w)
        K = 1.0 / float(np.sum(1.0 / var))
        gap = float(np.max(np.abs(sol.fun))) if sol.fun.size else 0.0
        ok = bool(gap <= WO_ROOT_TOL and fit.opt.converged and np.max(w) <= 0.99)
        roots.append({"start": w_start.tolist(), "weights": w.tolist(), "K": K,
                      "converged": ok, "message": str(sol.message).strip(),
                      "max_residual": gap, "u": fit.u})
        state["u"] = warm.fit.u
        _, var = inner(w_start)
        w_start = (1.0 / var) / np.sum(1.0 / var)
    good = [r for r in roots if r["converged"]]
    if good:
        best = min(good, key=lambda r: r["K"])
    else:
        best = min(roots, key=lambda r: r["max_residual"])
    w = np.asarray(best["weights"])
    fit = fit_weighted(model, data, w, cfg, penalty, warm=best["u"])
    base = fit.objective.with_weights(np.ones(m))
    var = np.maximum(base.residuals(fit.u).var(axis=0), floor)
    K = float(np.sum(w / var) / np.sum(1.0 / var**2))
    if wo_penalty is None:
        wo_penalty = _wo_default_penalty(base, fit.u, w)
    obj = SelfConsistentObjective(base, wo_penalty, floor)
    parts = obj.parts(np.concatenate([fit.u, w, [K]]))
    parts["roots"] = [{k: v for k, v in r.items() if k != "u"} for r in roots]
    conv = bool(best["converged"] and fit.opt.converged)
    return w, fit, parts, wo_penalty, conv


def weights_wo(model: Model, data: Dataset, cfg: OptimizerConfig | None = None,
               penalty: float | None = None, wo_penalty: float | None = None,
               warm: StrategyOutcome | None = None,
               method: str = "fixed-point") -> StrategyOutcome:
    """Self-consistent weights ``w_l = K / var(eps_l)``, started from ``ww``.

    Parameters
    ----------
    method : {"fixed-point", "penalty"}
        ``"penalty"`` minimizes ``F_w + P_o * sum_l (w_l - K / var_l)**2``
        jointly over scores, parameters, ``w`` and ``K``.  On the zero set
        of the penalty ``F_w = n * m * K`` with ``K = 1 / sum(1 / var_l)``,
        so that descent keeps shrinking one residual variance and ends near
        the degenerate one-equation solution.  ``"fixed-point"`` (default)
        instead solves for self-consistent points, ``w`` such that the
        ``F_w`` minimizer reproduces ``w ~ 1 / var``, from the ``ww``
        weights and two further reweighting steps, and keeps the
        non-degenerate root with the smallest ``K``.  These roots are the
        large-``P_o`` limits of stationary points of the penalized
        objective.
    wo_penalty : float, optional
        ``P_o``.  Defaults to ``1e4 * F_0 / sum(w_0**2)`` with ``F_0`` the
        weighted objective at the start.

    Warns ``DegenerateWeightsWarning`` when the weights collapse.
    """
    if method not in WO_METHODS:
        raise ValueError(f"method must be one of {WO_METHODS}")
    cfg = cfg or OptimizerConfig()
    warm = warm or weights_ww(model, data, cfg, penalty)
    floor = variance_floor(model, data)
    if model.m == 1:
        return StrategyOutcome(np.ones(1), fit_weighted(model, data, np.ones(1), cfg, penalty,
                                                        warm=warm.fit.u),
                               {"wo_method": method, **warm.diagnostics})
    if method == "penalty":
        w, fit, parts, wo_penalty, conv = _wo_penalty_minimize(model, warm, cfg, wo_penalty, floor)
    else:
        w, fit, parts, wo_penalty, conv = _wo_fixed_point(model, data, warm, cfg, penalty,
                                                          wo_penalty, floor)
    fit.opt.converged = conv
    tiny = (w <= 10 * WEIGHT_FLOOR) & (parts["var"] <= 1e-6 * np.mean(parts["var"]))
    degenerate = bool(np.max(w) > 0.99 or np.any(tiny))
    if degenerate:
        warnings.warn("self-consistent weights collapsed onto few equations",
                      DegenerateWeightsWarning, stacklevel=2)
    diag = {"wo_method": method, "wo_K": parts["K"], "wo_penalty": wo_penalty,
            "wo_objective": parts["F_o"], "wo_gap": parts["gap"].tolist(),
            "wo_degenerate": degenerate, **warm.diagnostics}
    if "roots" in parts:
        diag["wo_roots"] = parts["roots"]
    return StrategyOutcome(w, fit, diag)


# ---------------------------------------------------------------------------
# Angle criterion
# ---------------------------------------------------------------------------


def angle_criterion(w, sigma) -> float:
    """Cosine between ``w`` and the reciprocal variances ``1 / sigma**2``."""
    w = np.asarray(w, dtype=float)
    inv = 1.0 / np.asarray(sigma, dtype=float) ** 2
    return float(w @ inv / (np.linalg.norm(w) * np.linalg.norm(inv)))


def weights_wa(model: Model, data: Dataset, cfg: OptimizerConfig | None = None,
               penalty: float | None = None, budget: int | None = None) -> StrategyOutcome:
    """Maximize the angle criterion over the weight simplex.

    Each evaluation refits with the trial weights, warm-started from the
    previous evaluation; evaluations whose fit did not converge score -1.
    The search starts from the normalized ``ww`` weights and the final
    estimate is refit at the best weights with the full multi-start budget.
    """
    cfg = cfg or OptimizerConfig()
    m = model.m
    if m == 1:
        fit = fit_weighted(model, data, np.ones(1), cfg, penalty)
        return StrategyOutcome(np.ones(1), fit, {"wa_evaluations": 0})
    floor = variance_floor(model, data)
    ww = weights_ww(model, data, cfg, penalty)
    inner_cfg = replace(cfg, multistart=1)
    state = {"u": ww.fit.u}
    evals: list[dict] = []

    def H(w: np.ndarray) -> float:
        fit = fit_weighted(model, data, w, inner_cfg, penalty, warm=state["u"])
        entry = {"weights": w.tolist(), "converged": fit.opt.converged}
        if not fit.opt.converged:
            logger.info("wa: inner fit did not converge for weights %s", np.round(w, 4))
            entry["H"] = -1.0
            evals.append(entry)
            return -1.0
        state["u"] = fit.u
        sigma = np.sqrt(np.maximum(fit.residual_variances(), floor))
        h = angle_criterion(w, sigma)
        entry["H"] = h
        evals.append(entry)
        return h

    x0 = ww.weights / ww.weights.sum()
    res = maximize_on_simplex(H, m, budget or cfg.outer_budget, seed=cfg.seed, x0=x0)
    fit = fit_weighted(model, data, res.weights, cfg, penalty, warm=state["u"])
    diag = {"wa_H": res.value, "wa_evaluations": res.evaluations,
            "wa_budget_exhausted": res.exhausted,
            "wa_inner_converged": [e["converged"] for e in evals],
            "wa_history": evals, **ww.diagnostics}
    return StrategyOutcome(res.weights, fit, diag)
