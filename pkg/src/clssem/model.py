"""Model specifications, the model file format, and case-level datasets."""
from __future__ import annotations

import csv
import io
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .expr import (
    FUNCTIONS,
    LATENT,
    MANIFEST,
    PARAM,
    Binary,
    Expr,
    ExprSyntaxError,
    UndeclaredIdentifierError,
    compile_expr,
    parse_expr,
    symbols_of,
    to_text,
)

CONSTRAINT_KINDS = ("center", "normalize", "zerocov", "zerolatcov")


class ModelError(ValueError):
    """Invalid model text or model structure.  ``line`` is 1-based if known."""

    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        prefix = ""
        if source is not None:
            prefix = f"{source}:"
        if line is not None:
            prefix += f"{line}: "
        elif prefix:
            prefix += " "
        super().__init__(prefix + message)


class IdentificationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Equation:
    """Model equation ``lhs = rhs``, used as the residual ``lhs - rhs``."""

    label: str
    lhs: Expr
    rhs: Expr

    @property
    def residual(self) -> Expr:
        return Binary("-", self.lhs, self.rhs)

    @property
    def latents(self) -> frozenset[str]:
        return frozenset(symbols_of(self.lhs, LATENT) | symbols_of(self.rhs, LATENT))

    @property
    def n_latent(self) -> int:
        return len(self.latents)

    def symbols(self) -> set[str]:
        return symbols_of(self.lhs) | symbols_of(self.rhs)


@dataclass(frozen=True)
class ConstraintDecl:
    kind: str
    args: tuple[str, ...]
    mode: str = "soft"

    def to_text(self) -> str:
        s = f"constraint {self.kind}({', '.join(self.args)})"
        return s if self.mode == "soft" else f"{s} {self.mode}"


@dataclass(frozen=True)
class Model:
    manifest: tuple[str, ...]
    latent: tuple[str, ...]
    params: tuple[tuple[str, float | None], ...]
    equations: tuple[Equation, ...]
    constraints: tuple[ConstraintDecl, ...] = ()

    def __post_init__(self):
        _validate(self)

    @property
    def m(self) -> int:
        return len(self.equations)

    @property
    def Q(self) -> int:
        return len(self.latent)

    @property
    def k(self) -> int:
        return len(self.manifest)

    @property
    def fixed(self) -> dict[str, float]:
        return {name: v for name, v in self.params if v is not None}

    @property
    def free_params(self) -> tuple[str, ...]:
        return tuple(name for name, v in self.params if v is None)

    @property
    def S(self) -> int:
        return len(self.free_params)

    @property
    def latent_counts(self) -> tuple[int, ...]:
        """Number of distinct latents in each equation (``L_l``)."""
        return tuple(eq.n_latent for eq in self.equations)

    def symbol_table(self) -> dict[str, str]:
        table = {name: MANIFEST for name in self.manifest}
        table.update({name: LATENT for name in self.latent})
        table.update({name: PARAM for name, _ in self.params})
        return table

    def equation_index(self, label: str) -> int:
        for i, eq in enumerate(self.equations):
            if eq.label == label:
                return i
        raise KeyError(label)

    def with_constraints(self, constraints: Iterable[ConstraintDecl]) -> "Model":
        return Model(self.manifest, self.latent, self.params, self.equations, tuple(constraints))


def _validate(model: Model) -> None:
    seen: dict[str, str] = {}
    for kind, names in ((MANIFEST, model.manifest), (LATENT, model.latent),
                        (PARAM, [p for p, _ in model.params])):
        for name in names:
            if name in FUNCTIONS:
                raise ModelError(f"{name!r} is a reserved function name")
            if name in seen:
                raise ModelError(f"{name!r} declared twice ({seen[name]} and {kind})")
            seen[name] = kind
    if not model.equations:
        raise ModelError("model needs at least one equation")
    labels = set()
    used: set[str] = set()
    for eq in model.equations:
        if eq.label in labels:
            raise ModelError(f"duplicate equation label {eq.label!r}")
        labels.add(eq.label)
        for name in eq.symbols():
            if name not in seen:
                raise ModelError(f"equation {eq.label!r}: undeclared identifier {name!r}")
        used |= eq.latents
    for name in model.latent:
        if name not in used:
            raise ModelError(f"latent variable {name!r} appears in no equation")
    for c in model.constraints:
        _check_constraint(c, model.latent, labels)


def _check_constraint(c: ConstraintDecl, latents: Sequence[str], labels: set[str]) -> None:
    if c.kind not in CONSTRAINT_KINDS:
        raise ModelError(f"unknown constraint {c.kind!r}")
    if c.mode not in ("soft", "hard"):
        raise ModelError(f"constraint mode must be soft or hard, not {c.mode!r}")
    arity = {"center": 1, "normalize": 1, "zerocov": 2, "zerolatcov": 2}[c.kind]
    if len(c.args) != arity:
        raise ModelError(f"{c.kind} takes {arity} argument(s), got {len(c.args)}")
    if c.kind in ("center", "normalize", "zerolatcov") and c.args[0] not in latents:
        raise ModelError(f"{c.kind}: {c.args[0]!r} is not a latent variable")
    if c.kind == "zerocov":
        for a in c.args:
            if a not in labels:
                raise ModelError(f"zerocov: no equation labelled {a!r}")
    if c.kind == "zerolatcov" and c.args[1] not in labels:
        raise ModelError(f"zerolatcov: no equation labelled {c.args[1]!r}")
    if c.mode == "hard" and c.kind not in ("center", "normalize"):
        raise ModelError("hard mode is only available for center and normalize")


# ---------------------------------------------------------------------------
# Model file format
# ---------------------------------------------------------------------------

_DECL_RE = re.compile(r"^(latent|manifest|param)\s*:(.*)$")
_EQ_RE = re.compile(r"^eq\s+([A-Za-z_][A-Za-z_0-9]*)\s*:(.*)$")
_CONSTRAINT_RE = re.compile(
    r"^constraint\s+([A-Za-z_]+)\s*\(([^)]*)\)\s*(soft|hard)?\s*$")
_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z_0-9]*$")


def parse_model(text: str, source: str | None = None) -> Model:
    """Parse the line-oriented model format.

    ::

        latent: xi
        manifest: x1, x2
        param: c2, l1 = 1
        eq m1: x1 = l1*xi
        eq m2: x2 = c2*xi
        constraint center(xi)

    ``param: name = value`` fixes a parameter.  Constraints are soft unless
    followed by ``hard``.
    """
    decls: dict[str, list] = {"latent": [], "manifest": [], "param": []}
    eq_lines: list[tuple[int, str, str]] = []
    constraints: list[ConstraintDecl] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _DECL_RE.match(line)
        if m:
            kind, body = m.group(1), m.group(2)
            for item in filter(None, (s.strip() for s in body.split(","))):
                if kind == "param" and "=" in item:
                    name, val = (s.strip() for s in item.split("=", 1))
                    try:
                        value = float(val)
                    except ValueError:
                        raise ModelError(f"bad fixed value {val!r} for {name!r}",
                                         lineno, source) from None
                    entry = (name, value)
                else:
                    name, entry = item, (item, None) if kind == "param" else item
                if not _NAME_RE.match(name):
                    raise ModelError(f"invalid name {name!r}", lineno, source)
                decls[kind].append((entry, lineno))
            continue
        m = _EQ_RE.match(line)
        if m:
            eq_lines.append((lineno, m.group(1), m.group(2)))
            continue
        m = _CONSTRAINT_RE.match(line)
        if m:
            args = tuple(a.strip() for a in m.group(2).split(",") if a.strip())
            constraints.append((ConstraintDecl(m.group(1), args, m.group(3) or "soft"), lineno))
            continue
        if line.startswith("constraint"):
            raise ModelError(f"malformed constraint: {line!r}", lineno, source)
        raise ModelError(f"cannot parse line: {line!r}", lineno, source)

    seen: dict[str, int] = {}
    for kind in ("manifest", "latent", "param"):
        for entry, lineno in decls[kind]:
            name = entry[0] if kind == "param" else entry
            if name in seen:
                raise ModelError(f"{name!r} declared twice", lineno, source)
            if name in FUNCTIONS:
                raise ModelError(f"{name!r} is a reserved function name", lineno, source)
            seen[name] = lineno
    manifest = tuple(e for e, _ in decls["manifest"])
    latents = tuple(e for e, _ in decls["latent"])
    params = tuple(e for e, _ in decls["param"])
    table = {n: MANIFEST for n in manifest}
    table.update({n: LATENT for n in latents})
    table.update({n: PARAM for n, _ in params})

    equations = []
    labels: set[str] = set()
    for lineno, label, body in eq_lines:
        if label in labels:
            raise ModelError(f"duplicate equation label {label!r}", lineno, source)
        labels.add(label)
        if body.count("=") != 1:
            raise ModelError(f"equation {label!r} must contain exactly one '='", lineno, source)
        lhs_text, rhs_text = body.split("=")
        try:
            lhs = parse_expr(lhs_text, table)
            rhs = parse_expr(rhs_text, table)
        except UndeclaredIdentifierError as exc:
            raise ModelError(f"equation {label!r}: undeclared identifier {exc.name!r}",
                             lineno, source) from None
        except ExprSyntaxError as exc:
            raise ModelError(f"equation {label!r}: {exc}", lineno, source) from None
        equations.append(Equation(label, lhs, rhs))

    for c, lineno in constraints:
        try:
            _check_constraint(c, latents, labels)
        except ModelError as exc:
            raise ModelError(str(exc), lineno, source) from None
    try:
        model = Model(manifest, latents, params, tuple(equations), tuple(c for c, _ in constraints))
    except ModelError as exc:
        raise ModelError(str(exc), None, source) from None
    check_identification(model)
    return model


def load_model(path: str | Path) -> Model:
    path = Path(path)
    return parse_model(path.read_text(), source=str(path))


def print_model(model: Model) -> str:
    """Inverse of :func:`parse_model`."""
    lines = []
    if model.latent:
        lines.append("latent: " + ", ".join(model.latent))
    if model.manifest:
        lines.append("manifest: " + ", ".join(model.manifest))
    if model.params:
        items = [n if v is None else f"{n} = {v!r}" for n, v in model.params]
        lines.append("param: " + ", ".join(items))
    for eq in model.equations:
        lines.append(f"eq {eq.label}: {to_text(eq.lhs)} = {to_text(eq.rhs)}")
    for c in model.constraints:
        lines.append(c.to_text())
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Identification helpers
# ---------------------------------------------------------------------------


def scale_anchors(model: Model, draws: int = 3, seed: int = 12345) -> dict[str, int]:
    """Map each latent to an equation that fixes its scale, where one exists.

    An anchor is an equation in which the latent is the only latent and its
    coefficient is a nonzero constant that no free parameter can change
    (``x1 = 1*xi + O1``).  Detected numerically by comparing the partial
    derivative at random bindings.
    """
    rng = np.random.default_rng(seed)
    names = list(model.symbol_table())
    fixed = model.fixed
    bindings = []
    for _ in range(draws):
        b = {n: rng.normal(size=4) for n in names}
        b.update({n: float(v) for n, v in fixed.items()})
        for n in model.free_params:
            b[n] = float(rng.normal())
        bindings.append(b)
    anchors: dict[str, int] = {}
    for li, eq in enumerate(model.equations):
        lat = eq.latents
        if len(lat) != 1:
            continue
        (q,) = lat
        if q in anchors:
            continue
        tape = compile_expr(eq.residual)
        ds = []
        for b in bindings:
            with np.errstate(all="ignore"):
                try:
                    d = np.broadcast_to(tape.partials(tape.forward(b))[q], (4,))
                except (ArithmeticError, ValueError):
                    break
            ds.append(np.asarray(d, dtype=float))
        if len(ds) != draws:
            continue
        ref = ds[0][0]
        if ref != 0 and np.isfinite(ref) and all(np.allclose(d, ref, rtol=1e-12, atol=0) for d in ds):
            anchors[q] = li
    return anchors


def check_identification(model: Model) -> list[str]:
    """Warn about latents whose scale is neither fixed nor normalized."""
    anchors = scale_anchors(model)
    normalized = {c.args[0] for c in model.constraints if c.kind == "normalize"}
    loose = [q for q in model.latent if q not in anchors and q not in normalized]
    for q in loose:
        warnings.warn(f"latent {q!r} has no fixed-loading indicator and no normalize() "
                      "constraint; its scale may be unidentified", IdentificationWarning,
                      stacklevel=3)
    return loose


# ---------------------------------------------------------------------------
# Unknown vector layout
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Layout:
    """Ordering of the unknown vector: free parameters, then latent scores
    case-major (``u[S + i*Q + q]`` is case ``i``, latent ``q``)."""

    params: tuple[str, ...]
    latents: tuple[str, ...]
    n: int

    @property
    def S(self) -> int:
        return len(self.params)

    @property
    def Q(self) -> int:
        return len(self.latents)

    @property
    def size(self) -> int:
        return self.S + self.n * self.Q

    def split(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        u = np.asarray(u, dtype=float)
        return u[: self.S], u[self.S:].reshape(self.n, self.Q)

    def join(self, p: np.ndarray, Z: np.ndarray) -> np.ndarray:
        return np.concatenate([np.asarray(p, dtype=float).ravel(),
                               np.asarray(Z, dtype=float).reshape(-1)])

    def names(self) -> list[str]:
        return list(self.params) + [f"{q}[{i}]" for i in range(self.n) for q in self.latents]


def free_unknowns(model: Model, n: int) -> Layout:
    return Layout(model.free_params, model.latent, int(n))


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


class DataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    columns: tuple[str, ...]
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim != 2:
            raise DataError("data matrix must be two-dimensional")
        if vals.shape[0] < 1:
            raise DataError("data needs at least one case")
        if vals.shape[1] != len(self.columns):
            raise DataError(f"{len(self.columns)} column names for {vals.shape[1]} columns")
        if len(set(self.columns)) != len(self.columns):
            raise DataError("duplicate column names")
        if not np.all(np.isfinite(vals)):
            raise DataError("data contains non-finite entries")
        vals.setflags(write=False)
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "values", vals)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def columns_for(self, model: Model) -> dict[str, np.ndarray]:
        missing = [x for x in model.manifest if x not in self.columns]
        if missing:
            raise DataError(f"data lacks manifest column(s): {', '.join(missing)}")
        return {x: self.column(x) for x in model.manifest}

    def take(self, rows: np.ndarray) -> "Dataset":
        return Dataset(self.columns, self.values[np.asarray(rows)])

    def with_values(self, values: np.ndarray) -> "Dataset":
        return Dataset(self.columns, values)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Sequence[float]]) -> "Dataset":
        names = tuple(data)
        return cls(names, np.column_stack([np.asarray(data[c], dtype=float) for c in names]))

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.values:
            w.writerow([repr(float(v)) for v in row])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def read_csv(path: str | Path) -> Dataset:
    """Read a dataset: header row of names, one numeric row per case."""
    path = Path(path)
    with open(path, newline="") as fh:
        return parse_csv(fh.read(), source=str(path))


def parse_csv(text: str, source: str = "<data>") -> Dataset:
    reader = csv.reader(io.StringIO(text))
    rows = []
    header = None
    for lineno, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if header is None:
            header = tuple(c.strip() for c in row)
            continue
        if len(row) != len(header):
            raise DataError(f"{source}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            rows.append([float(c) for c in row])
        except ValueError as exc:
            raise DataError(f"{source}:{lineno}: {exc}") from None
    if header is None:
        raise DataError(f"{source}: empty file")
    if not rows:
        raise DataError(f"{source}: no data rows")
    try:
        return Dataset(header, np.array(rows))
    except DataError as exc:
        raise DataError(f"{source}: {exc}") from None
