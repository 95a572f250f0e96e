"""Seeded generators for the simulation studies.

Every generator takes ``(n, seed, params)`` and returns a :class:`Dataset`
together with a :class:`Truth` holding the true model parameters and latent
scores.  Random numbers come from numpy's PCG64 generator; each named
quantity (``"X"``, ``"x1"``, ...) draws from its own stream derived from
``(seed, name)``, so overriding one noise level leaves the other columns
unchanged.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .model import Dataset, Model, parse_model

Seed = int | tuple[int, ...]


@dataclass
class Truth:
    params: dict[str, float]
    latents: dict[str, np.ndarray] = field(repr=False)

    def as_dict(self) -> dict:
        return {"params": dict(self.params),
                "latents": {k: v.tolist() for k, v in self.latents.items()}}


class Streams:
    """Independent normal streams keyed by name."""

    def __init__(self, seed: Seed):
        words = [seed] if isinstance(seed, (int, np.integer)) else list(seed)
        if any(int(w) < 0 for w in words):
            raise ValueError("seeds must be non-negative")
        self._entropy = [int(w) for w in words]

    def rng(self, name: str) -> np.random.Generator:
        key = zlib.crc32(name.encode())
        ss = np.random.SeedSequence(self._entropy + [key])
        return np.random.Generator(np.random.PCG64(ss))

    def normal(self, name: str, sd: float, n: int) -> np.ndarray:
        if sd < 0:
            raise ValueError(f"negative standard deviation for {name}")
        return sd * self.rng(name).standard_normal(n)

    def bivariate(self, name: str, cov, n: int) -> np.ndarray:
        """``n x 2`` draws with the given covariance (Cholesky factor)."""
        cov = np.asarray(cov, dtype=float)
        L = np.linalg.cholesky(cov) if np.any(cov) else np.zeros((2, 2))
        return self.rng(name).standard_normal((n, 2)) @ L.T


def _merge(defaults: Mapping[str, float], params: Mapping[str, float] | None) -> dict:
    p = dict(defaults)
    for k, v in (params or {}).items():
        if k not in p:
            raise KeyError(f"unknown parameter {k!r}; known: {', '.join(p)}")
        p[k] = float(v)
    return p


def _check_n(n: int):
    if int(n) != n or n < 1:
        raise ValueError("n must be a positive integer")


def theta(x):
    return (x + np.abs(x)) / 2


# ---------------------------------------------------------------------------
# regression
# ---------------------------------------------------------------------------

REGRESSION_DEFAULTS = {"a": 0.5, "sd_d1": 0.5, "sd_d2": 0.2, "sd_e1": 0.2, "sd_e2": 0.1}

REGRESSION_MODEL = """\
latent: X
manifest: x1, x2, y1, y2
param: a
eq x1: x1 = X
eq x2: x2 = X
eq y1: y1 = a*X
eq y2: y2 = a*X
"""


def gen_regression(n: int, seed: Seed = 0, params=None):
    """Two error-laden indicators for each side of ``Y = a * X``."""
    _check_n(n)
    p = _merge(REGRESSION_DEFAULTS, params)
    s = Streams(seed)
    X = s.normal("X", 1.0, n)
    cols = {"x1": X + s.normal("x1", p["sd_d1"], n),
            "x2": X + s.normal("x2", p["sd_d2"], n),
            "y1": p["a"] * X + s.normal("y1", p["sd_e1"], n),
            "y2": p["a"] * X + s.normal("y2", p["sd_e2"], n)}
    return Dataset.from_mapping(cols), Truth({"a": p["a"]}, {"X": X})


# ---------------------------------------------------------------------------
# democracy
# ---------------------------------------------------------------------------

DEMOCRACY_DEFAULTS = {
    "b1": 1.2, "b2": 0.5, "b3": 0.8, "c2": 0.7, "c3": 0.9,
    "d2": 0.3, "d3": 0.9, "d4": 1.7, "d6": 0.6, "d7": 0.4, "d8": 1.3,
    "sd_x1": 0.1, "sd_x2": 0.2, "sd_x3": 0.3,
    "sd_y1": 0.2, "sd_y2": 0.1, "sd_y3": 0.2, "sd_y4": 0.3,
    "sd_y5": 0.2, "sd_y6": 0.1, "sd_y7": 0.2, "sd_y8": 0.3,
    "sd_dem60": 0.5, "sd_dem65": 0.2,
}
DEMOCRACY_LOADINGS = ("b1", "b2", "b3", "c2", "c3", "d2", "d3", "d4", "d6", "d7", "d8")

DEMOCRACY_MODEL = """\
latent: ind60, dem60, dem65
manifest: x1, x2, x3, y1, y2, y3, y4, y5, y6, y7, y8
param: b1, b2, b3, c2, c3, d2, d3, d4, d6, d7, d8
param: t1, t2, t3, s1, s2, s3, s4, s5, s6, s7, s8
eq x1: x1 = ind60 + t1
eq x2: x2 = c2*ind60 + t2
eq x3: x3 = c3*ind60 + t3
eq y1: y1 = dem60 + s1
eq y2: y2 = d2*dem60 + s2
eq y3: y3 = d3*dem60 + s3
eq y4: y4 = d4*dem60 + s4
eq y5: y5 = dem65 + s5
eq y6: y6 = d6*dem65 + s6
eq y7: y7 = d7*dem65 + s7
eq y8: y8 = d8*dem65 + s8
eq dem60: dem60 = b1*ind60
eq dem65: dem65 = b2*ind60 + b3*dem60
constraint center(ind60) hard
"""


def gen_democracy(n: int, seed: Seed = 0, params=None):
    """Industrialization and democracy; ``y5..y8`` load on ``dem65``."""
    _check_n(n)
    p = _merge(DEMOCRACY_DEFAULTS, params)
    s = Streams(seed)
    ind60 = s.normal("ind60", 1.0, n)
    dem60 = p["b1"] * ind60 + s.normal("dem60", p["sd_dem60"], n)
    dem65 = p["b2"] * ind60 + p["b3"] * dem60 + s.normal("dem65", p["sd_dem65"], n)
    load = {"x1": (1.0, ind60), "x2": (p["c2"], ind60), "x3": (p["c3"], ind60),
            "y1": (1.0, dem60), "y2": (p["d2"], dem60), "y3": (p["d3"], dem60),
            "y4": (p["d4"], dem60), "y5": (1.0, dem65), "y6": (p["d6"], dem65),
            "y7": (p["d7"], dem65), "y8": (p["d8"], dem65)}
    cols = {c: lam * eta + s.normal(c, p["sd_" + c], n) for c, (lam, eta) in load.items()}
    # intercepts are left out: under the centring convention their true
    # values depend on the sample mean of ind60
    truth = {k: p[k] for k in DEMOCRACY_LOADINGS}
    return Dataset.from_mapping(cols), Truth(truth, {"ind60": ind60, "dem60": dem60,
                                                      "dem65": dem65})


# ---------------------------------------------------------------------------
# Ganzach quadratic model
# ---------------------------------------------------------------------------

GANZACH_DEFAULTS = {
    "gamma1": 0.3, "gamma2": 0.2, "om11": 0.5, "om12": 0.3, "om22": 0.2,
    "c1": 1.0, "c2": 0.7, "c3": 1.2, "c4": 1.0, "c5": 0.5, "c6": 0.9,
    "d1": 1.0, "d2": 0.8, "d3": 1.3,
    "rho": 0.3, "sd_eta": 0.3,
    "sd_x1": 0.1, "sd_x2": 0.1, "sd_x3": 0.3, "sd_x4": 0.1, "sd_x5": 0.1, "sd_x6": 0.3,
    "sd_y1": 0.1, "sd_y2": 0.1, "sd_y3": 0.3,
}

# No indicator offsets: with free offsets the factor locations, and with them
# the linear coefficients gamma, are not identified.  The generator has none.
GANZACH_MODEL = """\
latent: eta, xi1, xi2
manifest: x1, x2, x3, x4, x5, x6, y1, y2, y3
param: gamma1, gamma2, om11, om12, om22, c2, c3, c5, c6, d2, d3, Oeta
eq y1: y1 = eta
eq y2: y2 = d2*eta
eq y3: y3 = d3*eta
eq x1: x1 = xi1
eq x2: x2 = c2*xi1
eq x3: x3 = c3*xi1
eq x4: x4 = xi2
eq x5: x5 = c5*xi2
eq x6: x6 = c6*xi2
eq eta: eta = gamma1*xi1 + gamma2*xi2 + om11*xi1^2 + om12*xi1*xi2 + om22*xi2^2 + Oeta
"""


def gen_ganzach(n: int, seed: Seed = 0, params=None):
    """Quadratic and interaction effects of two correlated factors."""
    _check_n(n)
    p = _merge(GANZACH_DEFAULTS, params)
    s = Streams(seed)
    xi = s.bivariate("xi", [[1.0, p["rho"]], [p["rho"], 1.0]], n)
    xi1, xi2 = xi[:, 0], xi[:, 1]
    eta = (p["gamma1"] * xi1 + p["gamma2"] * xi2 + p["om11"] * xi1**2
           + p["om12"] * xi1 * xi2 + p["om22"] * xi2**2 + s.normal("eta", p["sd_eta"], n))
    cols = {}
    for i in range(1, 7):
        f = xi1 if i <= 3 else xi2
        cols[f"x{i}"] = p[f"c{i}"] * f + s.normal(f"x{i}", p[f"sd_x{i}"], n)
    for i in range(1, 4):
        cols[f"y{i}"] = p[f"d{i}"] * eta + s.normal(f"y{i}", p[f"sd_y{i}"], n)
    truth = {k: p[k] for k in ("gamma1", "gamma2", "om11", "om12", "om22",
                               "c2", "c3", "c5", "c6", "d2", "d3")}
    truth["Oeta"] = 0.0
    return Dataset.from_mapping(cols), Truth(truth, {"eta": eta, "xi1": xi1, "xi2": xi2})


# ---------------------------------------------------------------------------
# Muthen quadratic model
# ---------------------------------------------------------------------------

MUTHEN_C = (1, 0.5, 0.7, 1, 0.7, 0.4, 1, 1.2, 0.4, 1, 0.8, 0.9)
MUTHEN_DEFAULTS = {
    "B1": 0.1, "B2": 0.3, "B3": 0.2, "B4": 0.7,
    **{f"c{i}": float(c) for i, c in enumerate(MUTHEN_C, 1)},
    "var1": 1.2, "cov12": 0.4, "var2": 0.8, "sd_eta3": 0.2, "sd_eta4": 0.1,
    **{f"sd_y{i}": 0.1 * (1 + i % 3) for i in range(1, 13)},
}
MUTHEN_FREE_LOADINGS = ("c2", "c3", "c5", "c6", "c8", "c9", "c11", "c12")


def _muthen_model() -> str:
    lines = ["latent: eta1, eta2, eta3, eta4",
             "manifest: " + ", ".join(f"y{i}" for i in range(1, 13)),
             "param: B1, B2, B3, B4, " + ", ".join(MUTHEN_FREE_LOADINGS)]
    for i in range(1, 13):
        q = (i - 1) // 3 + 1
        lam = "" if (i - 1) % 3 == 0 else f"c{i}*"
        lines.append(f"eq y{i}: y{i} = {lam}eta{q}")
    lines.append("eq eta3: eta3 = B1*eta1 + B2*eta2 + B3*eta1*eta2")
    lines.append("eq eta4: eta4 = B4*eta3")
    return "\n".join(lines) + "\n"


MUTHEN_MODEL = _muthen_model()


def gen_muthen(n: int, seed: Seed = 0, params=None):
    """Interaction of two factors feeding a mediated chain."""
    _check_n(n)
    p = _merge(MUTHEN_DEFAULTS, params)
    s = Streams(seed)
    e = s.bivariate("eta12", [[p["var1"], p["cov12"]], [p["cov12"], p["var2"]]], n)
    eta1, eta2 = e[:, 0], e[:, 1]
    eta3 = (p["B1"] * eta1 + p["B2"] * eta2 + p["B3"] * eta1 * eta2
            + s.normal("eta3", p["sd_eta3"], n))
    eta4 = p["B4"] * eta3 + s.normal("eta4", p["sd_eta4"], n)
    etas = (eta1, eta2, eta3, eta4)
    cols = {f"y{i}": p[f"c{i}"] * etas[(i - 1) // 3] + s.normal(f"y{i}", p[f"sd_y{i}"], n)
            for i in range(1, 13)}
    truth = {k: p[k] for k in ("B1", "B2", "B3", "B4", *MUTHEN_FREE_LOADINGS)}
    return Dataset.from_mapping(cols), Truth(
        truth, {"eta1": eta1, "eta2": eta2, "eta3": eta3, "eta4": eta4})


# ---------------------------------------------------------------------------
# exponential and implicative relations
# ---------------------------------------------------------------------------

EXPONENTIAL_DEFAULTS = {"d1": 3.0, "k1": 0.5, "c2": 0.7, "d2": 0.9, "sd_X0": 0.1,
                        "sd_x1": 0.1, "sd_x2": 0.2, "sd_y1": 0.2, "sd_y2": 0.1}

EXPONENTIAL_MODEL = """\
latent: X0
manifest: x1, x2, y1, y2
param: c2, d1, d2, k1
eq x1: x1 = X0
eq x2: x2 = c2*X0
eq y1: y1 = d1*exp(k1*X0)
eq y2: y2 = d2*d1*exp(k1*X0)
"""


def gen_exponential(n: int, seed: Seed = 0, params=None):
    """``Y0 = d1 * exp(k1 * X0)`` with two indicators on each side."""
    _check_n(n)
    p = _merge(EXPONENTIAL_DEFAULTS, params)
    s = Streams(seed)
    X0 = s.normal("X0", p["sd_X0"], n)
    Y0 = p["d1"] * np.exp(p["k1"] * X0)
    cols = {"x1": X0 + s.normal("x1", p["sd_x1"], n),
            "x2": p["c2"] * X0 + s.normal("x2", p["sd_x2"], n),
            "y1": Y0 + s.normal("y1", p["sd_y1"], n),
            "y2": p["d2"] * Y0 + s.normal("y2", p["sd_y2"], n)}
    truth = {k: p[k] for k in ("c2", "d1", "d2", "k1")}
    return Dataset.from_mapping(cols), Truth(truth, {"X0": X0})


IMPLICATIVE_DEFAULTS = {"c2": 0.7, "d1": 0.4, "d2": 0.8, "sd_X0": 1.0,
                        "sd_x1": 0.3, "sd_x2": 0.15, "sd_y": 0.2}

IMPLICATIVE_MODEL = """\
latent: X0
manifest: x1, x2, y
param: c2, d1, d2
eq x1: x1 = X0
eq x2: x2 = c2*X0
eq y: y = d1*X0 + d2*theta(X0)
"""


def gen_implicative(n: int, seed: Seed = 0, params=None):
    """``y`` responds to ``X0`` linearly plus an extra slope for ``X0 > 0``."""
    _check_n(n)
    p = _merge(IMPLICATIVE_DEFAULTS, params)
    s = Streams(seed)
    X0 = s.normal("X0", p["sd_X0"], n)
    cols = {"x1": X0 + s.normal("x1", p["sd_x1"], n),
            "x2": p["c2"] * X0 + s.normal("x2", p["sd_x2"], n),
            "y": p["d1"] * X0 + p["d2"] * theta(X0) + s.normal("y", p["sd_y"], n)}
    truth = {k: p[k] for k in ("c2", "d1", "d2")}
    return Dataset.from_mapping(cols), Truth(truth, {"X0": X0})


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Study:
    tag: str
    generate: Callable
    model_text: str
    defaults: Mapping[str, float]
    table: tuple[str, ...]

    def model(self) -> Model:
        return parse_model(self.model_text, source=f"<{self.tag}>")

    def noiseless(self) -> dict[str, float]:
        """Overrides that switch every noise term off (``sd_X0`` scales a
        latent, not noise, and is kept)."""
        return {k: 0.0 for k in self.defaults if k.startswith("sd_") and k != "sd_X0"}


STUDIES: dict[str, Study] = {
    "regression": Study("regression", gen_regression, REGRESSION_MODEL,
                        REGRESSION_DEFAULTS, ("a",)),
    "democracy": Study("democracy", gen_democracy, DEMOCRACY_MODEL,
                       DEMOCRACY_DEFAULTS, ("b1", "b2", "b3")),
    "ganzach": Study("ganzach", gen_ganzach, GANZACH_MODEL, GANZACH_DEFAULTS,
                     ("om11", "om12", "om22", "gamma1", "gamma2")),
    "muthen": Study("muthen", gen_muthen, MUTHEN_MODEL, MUTHEN_DEFAULTS,
                    ("B1", "B2", "B3", "B4")),
    "exponential": Study("exponential", gen_exponential, EXPONENTIAL_MODEL,
                         EXPONENTIAL_DEFAULTS, ("c2", "d1", "d2", "k1")),
    "implicative": Study("implicative", gen_implicative, IMPLICATIVE_MODEL,
                         IMPLICATIVE_DEFAULTS, ("c2", "d1", "d2")),
}


def get_study(tag: str) -> Study:
    try:
        return STUDIES[tag.lower()]
    except KeyError:
        raise KeyError(f"unknown study {tag!r}; choose from {', '.join(STUDIES)}") from None


def simulate(tag: str, n: int, seed: Seed = 0, params=None):
    return get_study(tag).generate(n, seed, params)
