"""Weighted least-squares objective over parameters and per-case latent scores.

For weights ``w`` the objective is

    F_w(u) = sum_l w_l * sum_i eps[i, l]**2  +  sum_c P * s_c(u)**2

where ``eps[i, l]`` is the residual of equation ``l`` for case ``i`` and
``s_c`` are the sums behind the declared soft constraints.  Every equation is
evaluated on whole data columns at once; its per-case partial derivatives come
from one reverse sweep, because case ``i``'s residual depends only on case
``i``'s latent scores.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import sparse

from .expr import EvaluationError, compile_expr
from .model import ConstraintDecl, Dataset, Layout, Model, free_unknowns


def default_penalty(model: Model, data: Dataset) -> float:
    """``1e3 * m * n * mean(A**2)`` over the model's manifest columns."""
    cols = np.column_stack(list(data.columns_for(model).values()))
    scale = float(np.mean(cols**2)) or 1.0
    return 1e3 * model.m * data.n * scale


@dataclass
class EquationTerms:
    residuals: np.ndarray  # (n, m)
    partials: list[dict[str, np.ndarray]]  # per equation: symbol -> (n,) partials


class Objective:
    """``F_w`` for a bound model and dataset.

    Parameters
    ----------
    model, data
        Model and dataset; the data must provide every manifest column.
    weights : array_like, optional
        Positive equation weights, default all ones.
    penalty : float, optional
        Penalty constant for soft constraints, default :func:`default_penalty`.
    constraints : sequence of ConstraintDecl, optional
        Overrides the model's declared constraints.
    """

    def __init__(self, model: Model, data: Dataset, weights: Sequence[float] | None = None,
                 penalty: float | None = None,
                 constraints: Sequence[ConstraintDecl] | None = None):
        self.model = model
        self.data = data
        self.n = data.n
        self.layout: Layout = free_unknowns(model, data.n)
        self.columns = data.columns_for(model)
        self.tapes = [compile_expr(eq.residual) for eq in model.equations]
        self.fixed = model.fixed
        w = np.ones(model.m) if weights is None else np.asarray(weights, dtype=float)
        if w.shape != (model.m,) or not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError(f"weights must be {model.m} positive finite numbers")
        self.weights = w
        self.penalty = default_penalty(model, data) if penalty is None else float(penalty)
        if self.penalty <= 0:
            raise ValueError("penalty constant must be positive")
        decls = model.constraints if constraints is None else tuple(constraints)
        self.constraints = tuple(decls)
        self._lat_index = {q: j for j, q in enumerate(model.latent)}
        self._par_index = {p: j for j, p in enumerate(model.free_params)}
        self.soft = [c for c in decls if c.mode == "soft"]
        hard_center = {c.args[0] for c in decls if c.mode == "hard" and c.kind == "center"}
        hard_norm = {c.args[0] for c in decls if c.mode == "hard" and c.kind == "normalize"}
        self._hard = [(self._lat_index[q], q in hard_center, q in hard_norm)
                      for q in model.latent if q in hard_center or q in hard_norm]

    def with_weights(self, weights: Sequence[float]) -> "Objective":
        return Objective(self.model, self.data, weights, self.penalty, self.constraints)

    @property
    def size(self) -> int:
        return self.layout.size

    # -- latent maps for hard constraints ---------------------------------

    def latent_scores(self, u: np.ndarray) -> np.ndarray:
        """Latent score matrix ``Z`` (n, Q) implied by ``u``."""
        _, V = self.layout.split(u)
        Z = V.copy()
        for q, center, normalize in self._hard:
            v = Z[:, q]
            if center:
                v = v - v.mean()
            if normalize:
                v = np.sqrt(self.n) * v / np.linalg.norm(v)
            Z[:, q] = v
        return Z

    def _pull_back(self, V: np.ndarray, gZ: np.ndarray) -> np.ndarray:
        gV = gZ.copy()
        for q, center, normalize in self._hard:
            v = V[:, q]
            g = gZ[:, q]
            c = v - v.mean() if center else v
            if normalize:
                r = np.linalg.norm(c)
                g = np.sqrt(self.n) / r * (g - c * (c @ g) / r**2)
            if center:
                g = g - g.mean()
            gV[:, q] = g
        return gV

    def gauge_directions(self, u: np.ndarray) -> list[np.ndarray]:
        """Directions in ``u`` along which hard-constraint maps are constant."""
        out = []
        _, V = self.layout.split(u)
        S, Q = self.layout.S, self.layout.Q
        for q, center, normalize in self._hard:
            if center:
                d = np.zeros(self.size)
                d[S + q::Q] = 1.0
                out.append(d)
            if normalize:
                v = V[:, q] - V[:, q].mean() if center else V[:, q]
                d = np.zeros(self.size)
                d[S + q::Q] = v
                out.append(d)
        return out

    # -- core evaluation ---------------------------------------------------

    def bindings(self, p: np.ndarray, Z: np.ndarray) -> dict[str, object]:
        b: dict[str, object] = dict(self.columns)
        b.update(self.fixed)
        for name, j in self._par_index.items():
            b[name] = float(p[j])
        for q, j in self._lat_index.items():
            b[q] = Z[:, j]
        return b

    def terms(self, u: np.ndarray, partials: bool = True) -> EquationTerms:
        """Residual matrix and (optionally) per-case partials of every equation.

        Raises :class:`EvaluationError` if any equation cannot be evaluated.
        """
        p, _ = self.layout.split(u)
        Z = self.latent_scores(u)
        b = self.bindings(p, Z)
        n = self.n
        R = np.empty((n, self.model.m))
        parts = []
        with np.errstate(all="ignore"):
            for l, tape in enumerate(self.tapes):
                vals = tape.forward(b)
                R[:, l] = np.broadcast_to(vals[-1], (n,))
                if partials:
                    raw = tape.partials(vals)
                    parts.append({k: np.broadcast_to(v, (n,)) for k, v in raw.items()
                                  if k in self._par_index or k in self._lat_index})
        return EquationTerms(R, parts)

    def residuals(self, u: np.ndarray) -> np.ndarray:
        """Residual matrix ``eps`` of shape (n, m)."""
        return self.terms(u, partials=False).residuals

    def _constraint_sums(self, Z: np.ndarray, R: np.ndarray) -> list[float]:
        out = []
        for c in self.soft:
            if c.kind == "center":
                out.append(Z[:, self._lat_index[c.args[0]]].sum())
            elif c.kind == "normalize":
                out.append((Z[:, self._lat_index[c.args[0]]] ** 2).sum() - self.n)
            elif c.kind == "zerocov":
                a, b = (self.model.equation_index(x) for x in c.args)
                out.append(R[:, a] @ R[:, b])
            else:
                q = self._lat_index[c.args[0]]
                out.append(Z[:, q] @ R[:, self.model.equation_index(c.args[1])])
        return out

    def constraint_violations(self, u: np.ndarray) -> dict[str, float]:
        Z = self.latent_scores(u)
        R = self.residuals(u)
        return {c.to_text(): float(s) for c, s in zip(self.soft, self._constraint_sums(Z, R))}

    def penalty_value(self, Z: np.ndarray, R: np.ndarray) -> float:
        return float(sum(self.penalty * s**2 for s in self._constraint_sums(Z, R)))

    def value(self, u: np.ndarray) -> float:
        """Objective value; ``inf`` where an equation cannot be evaluated."""
        try:
            R = self.residuals(u)
        except EvaluationError:
            return np.inf
        f = float(np.sum(self.weights * np.sum(R**2, axis=0)))
        if self.soft:
            f += self.penalty_value(self.latent_scores(u), R)
        return f if np.isfinite(f) else np.inf

    def value_and_gradient(self, u: np.ndarray) -> tuple[float, np.ndarray]:
        try:
            t = self.terms(u)
        except EvaluationError:
            return np.inf, np.full(self.size, np.nan)
        R = t.residuals
        Z = self.latent_scores(u)
        f = float(np.sum(self.weights * np.sum(R**2, axis=0)))
        C = 2.0 * R * self.weights  # d f / d eps
        gZ = np.zeros_like(Z)
        f += self.accumulate_penalties(Z, R, C, gZ)
        if not np.isfinite(f):
            return np.inf, np.full(self.size, np.nan)
        return f, self.pull_back(u, t, C, gZ)

    def accumulate_penalties(self, Z: np.ndarray, R: np.ndarray, C: np.ndarray,
                             gZ: np.ndarray) -> float:
        """Soft-constraint penalty value; adds its residual cotangent to ``C``
        and its direct latent-score gradient to ``gZ`` in place."""
        if not self.soft:
            return 0.0
        total = 0.0
        for c, s in zip(self.soft, self._constraint_sums(Z, R)):
            total += self.penalty * s**2
            k = 2.0 * self.penalty * s
            if c.kind == "center":
                gZ[:, self._lat_index[c.args[0]]] += k
            elif c.kind == "normalize":
                q = self._lat_index[c.args[0]]
                gZ[:, q] += 2.0 * k * Z[:, q]
            elif c.kind == "zerocov":
                a, b = (self.model.equation_index(x) for x in c.args)
                C[:, a] += k * R[:, b]
                C[:, b] += k * R[:, a]
            else:
                q = self._lat_index[c.args[0]]
                l = self.model.equation_index(c.args[1])
                gZ[:, q] += k * R[:, l]
                C[:, l] += k * Z[:, q]
        return float(total)

    def pull_back(self, u: np.ndarray, t: EquationTerms, C: np.ndarray,
                  gZ: np.ndarray | None = None) -> np.ndarray:
        """Gradient in ``u`` of a function with residual cotangent ``C`` (n, m)
        plus a direct latent-score gradient ``gZ``."""
        gp = np.zeros(self.layout.S)
        gZ = np.zeros((self.n, self.layout.Q)) if gZ is None else gZ.copy()
        for l, D in enumerate(t.partials):
            c = C[:, l]
            for name, d in D.items():
                j = self._par_index.get(name)
                if j is not None:
                    gp[j] += c @ d
                else:
                    gZ[:, self._lat_index[name]] += c * d
        if self._hard:
            _, V = self.layout.split(u)
            gZ = self._pull_back(V, gZ)
        return self.layout.join(gp, gZ)

    def gradient(self, u: np.ndarray) -> np.ndarray:
        return self.value_and_gradient(u)[1]

    # -- second-order information -----------------------------------------

    def jacobian(self, u: np.ndarray) -> sparse.csr_matrix:
        """Sparse Jacobian of the stacked residuals ``eps[i, l]`` (row ``i*m + l``)
        with respect to ``u``.  Hard-constraint maps are not applied."""
        t = self.terms(u)
        n, m, S, Q = self.n, self.model.m, self.layout.S, self.layout.Q
        rows, cols, vals = [], [], []
        case = np.arange(n)
        for l, D in enumerate(t.partials):
            r = case * m + l
            for name, d in D.items():
                j = self._par_index.get(name)
                if j is not None:
                    rows.append(r)
                    cols.append(np.full(n, j))
                else:
                    rows.append(r)
                    cols.append(S + case * Q + self._lat_index[name])
                vals.append(np.asarray(d, dtype=float))
        if not rows:
            return sparse.csr_matrix((n * m, self.size))
        return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                 shape=(n * m, self.size))

    def gauss_newton_hessian(self, u: np.ndarray) -> sparse.csr_matrix:
        """``2 J' W J`` plus the rank-one Gauss-Newton terms of soft penalties."""
        J = self.jacobian(u)
        W = sparse.diags(np.tile(self.weights, self.n))
        H = 2.0 * (J.T @ W @ J)
        if self.soft:
            t = self.terms(u)
            R = t.residuals
            Z = self.latent_scores(u)
            for c in self.soft:
                gs = self._constraint_gradient(c, u, t, R, Z)
                H = H + sparse.csr_matrix(2.0 * self.penalty * np.outer(gs, gs))
        return H.tocsr()

    def _constraint_gradient(self, c: ConstraintDecl, u, t: EquationTerms, R, Z) -> np.ndarray:
        C = np.zeros_like(R)
        gZ = np.zeros_like(Z)
        if c.kind == "center":
            gZ[:, self._lat_index[c.args[0]]] = 1.0
        elif c.kind == "normalize":
            q = self._lat_index[c.args[0]]
            gZ[:, q] = 2.0 * Z[:, q]
        elif c.kind == "zerocov":
            a, b = (self.model.equation_index(x) for x in c.args)
            C[:, a] += R[:, b]
            C[:, b] += R[:, a]
        else:
            q = self._lat_index[c.args[0]]
            l = self.model.equation_index(c.args[1])
            gZ[:, q] += R[:, l]
            C[:, l] += Z[:, q]
        return self.pull_back(u, t, C, gZ)
