"""Closed forms and a brute-force minimizer, used as independent references
in the tests."""
from __future__ import annotations

import itertools

import numpy as np
from scipy import optimize

MAX_BRUTE_DIM = 8


class OracleError(ValueError):
    pass


def orthogonal_regression(x, y):
    """Unweighted fit of ``x = Z, y = a * Z`` with free scores ``Z``.

    Returns ``(a, Z)`` with ``A = sum x**2``, ``B = sum y**2``,
    ``C = sum x*y``::

        a = (B - A + sqrt((A - B)**2 + 4 C**2)) / (2 C)
        Z = (x + a y) / (1 + a**2)
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise OracleError("x and y differ in length")
    A, B, C = float(x @ x), float(y @ y), float(x @ y)
    if C == 0:
        raise OracleError("sum(x*y) = 0: orientation of the fitted line is undetermined")
    a = (B - A + np.sqrt((A - B) ** 2 + 4 * C**2)) / (2 * C)
    return float(a), (x + a * y) / (1 + a**2)


def reflective_scores(X, loadings):
    """Least-squares scores of ``x_j = lambda_j * Z``: ``X @ lambda / sum(lambda**2)``."""
    lam = np.asarray(loadings, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    ss = float(lam @ lam)
    if ss == 0:
        raise OracleError("all loadings are zero")
    return X @ lam / ss


def brute_force_min(obj, bounds, resolution: int = 21, refine: bool = True):
    """Grid search over a box followed by a Nelder-Mead polish.

    Parameters
    ----------
    obj
        Callable ``f(u)`` or anything with a ``value`` method.
    bounds
        ``[(lo, hi), ...]`` per coordinate; at most 8 coordinates.
    resolution
        Grid points per coordinate.
    """
    f = obj.value if hasattr(obj, "value") else obj
    dim = len(bounds)
    if dim == 0 or dim > MAX_BRUTE_DIM:
        raise OracleError(f"brute force supports 1..{MAX_BRUTE_DIM} unknowns, got {dim}")
    axes = [np.linspace(lo, hi, resolution) for lo, hi in bounds]
    best_u, best_f = None, np.inf
    for point in itertools.product(*axes):
        u = np.array(point)
        val = f(u)
        if val < best_f:
            best_u, best_f = u, val
    if best_u is None:
        raise OracleError("objective not finite anywhere on the grid")
    if refine:
        res = optimize.minimize(f, best_u, method="Nelder-Mead",
                                options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 20000,
                                         "maxfev": 40000})
        if res.fun <= best_f:
            best_u, best_f = res.x, float(res.fun)
    return np.asarray(best_u), float(best_f)
