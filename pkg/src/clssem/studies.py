"""Monte-Carlo replication of the simulation studies."""
from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .optimizer import OptimizerConfig
from .simgen import Seed, get_study

logger = logging.getLogger(__name__)


@dataclass
class Replication:
    study: str
    n: int
    reps: int
    strategies: tuple[str, ...]
    truth: dict[str, float]
    errors: dict[str, dict[str, list[float]]]
    failures: dict[str, int]
    nonconverged: dict[str, int]
    seconds: float = 0.0
    messages: list[str] = field(default_factory=list)

    def summary(self, strategy: str, param: str) -> tuple[float, float]:
        """Mean and sample SD of the estimation error."""
        e = np.asarray(self.errors[strategy][param], dtype=float)
        if e.size == 0:
            return float("nan"), float("nan")
        sd = float(e.std(ddof=1)) if e.size > 1 else 0.0
        return float(e.mean()), sd

    def table(self) -> str:
        """Mean error and SD per parameter and strategy, as ``mean(sd)``."""
        head = ["n", "param", "true", *self.strategies]
        rows = [head]
        for p in self.truth:
            row = [str(self.n), p, f"{self.truth[p]:g}"]
            for s in self.strategies:
                mu, sd = self.summary(s, p)
                row.append(f"{mu:.3f}({sd:.3f})")
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
        lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
        fails = ", ".join(f"{s}: {self.failures[s]} failed, {self.nonconverged[s]} not converged"
                          for s in self.strategies)
        return "\n".join(lines) + f"\n({self.reps} reps; {fails})"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["study", "n", "param", "true", "strategy", "mean_error", "sd_error",
                    "reps_ok", "failures", "nonconverged"])
        for p in self.truth:
            for s in self.strategies:
                mu, sd = self.summary(s, p)
                w.writerow([self.study, self.n, p, repr(self.truth[p]), s, repr(mu), repr(sd),
                            len(self.errors[s][p]), self.failures[s], self.nonconverged[s]])
        return buf.getvalue()


def _one_rep(args):
    tag, n, seed, rep, strategies, cfg, params, columns, options = args
    from .estimator import estimate

    study = get_study(tag)
    data, truth = study.generate(n, _rep_seed(seed, rep), params)
    model = study.model()
    out = {}
    for s in strategies:
        try:
            r = estimate(model, data, s, cfg, check_uniqueness=False, **options)
        except Exception as exc:  # recorded per replicate
            out[s] = (None, False, f"rep {rep} {s}: {type(exc).__name__}: {exc}")
            continue
        err = {p: r.params[p] - truth.params[p] for p in columns}
        out[s] = (err, bool(r.converged), None)
    return rep, out


def _rep_seed(seed: Seed, rep: int) -> tuple[int, ...]:
    base = (seed,) if isinstance(seed, (int, np.integer)) else tuple(seed)
    return (*base, rep)


def replicate(tag: str, n: int, reps: int = 25, strategies=("w1",), seed: Seed = 0,
              cfg: OptimizerConfig | None = None, params=None, jobs: int = 1,
              columns=None, **options) -> Replication:
    """Generate ``reps`` datasets and record ``estimate - truth`` per strategy.

    Replicate ``r`` uses data seed ``(seed, r)``; results are collected by
    replicate index so the outcome does not depend on ``jobs``.
    Non-converged fits are kept and counted; fits that raise are counted
    as failures and left out. ``columns`` selects the parameters to record
    (default: the study's table columns).
    """
    study = get_study(tag)
    strategies = tuple(s.lower() for s in strategies)
    cfg = cfg or OptimizerConfig()
    _, truth = study.generate(1, 0, params)
    columns = tuple(columns or study.table)
    unknown = [p for p in columns if p not in truth.params]
    if unknown:
        raise KeyError(f"no true value for: {', '.join(unknown)}")
    t0 = time.perf_counter()
    tasks = [(study.tag, n, seed, r, strategies, cfg, params, columns, options) for r in range(reps)]
    if jobs > 1 and reps > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_one_rep, tasks))
    else:
        results = [_one_rep(t) for t in tasks]
    results.sort(key=lambda x: x[0])
    errors = {s: {p: [] for p in columns} for s in strategies}
    failures = dict.fromkeys(strategies, 0)
    nonconv = dict.fromkeys(strategies, 0)
    messages = []
    for _, out in results:
        for s, (err, conv, msg) in out.items():
            if err is None:
                failures[s] += 1
                messages.append(msg)
                logger.warning(msg)
                continue
            nonconv[s] += not conv
            for p, e in err.items():
                errors[s][p].append(e)
    return Replication(study.tag, n, reps, strategies,
                       {p: truth.params[p] for p in columns}, errors, failures, nonconv,
                       time.perf_counter() - t0, messages)
