"""Hyperparameter search by seeded random sampling.

Minimizes a caller-supplied objective (misclassification rate on a held-out
pool) over a declared space. Random search keeps the trial history exactly
reproducible under a seed and needs no surrogate-model machinery; the
callback interface leaves room for smarter strategies later.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Real:
    """Continuous parameter domain; log=True samples log-uniformly."""

    lo: float
    hi: float
    log: bool = False

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"need lo < hi, got [{self.lo}, {self.hi}]")
        if self.log and self.lo <= 0:
            raise ValueError("log-scale domains need lo > 0")


@dataclass(frozen=True)
class Choice:
    """Discrete parameter domain."""

    values: tuple

    def __post_init__(self):
        if len(self.values) == 0:
            raise ValueError("discrete domain must be non-empty")


SearchSpace = Mapping[str, Real | Choice]


@dataclass(frozen=True)
class TrialRecord:
    index: int
    params: dict
    objective: float
    wall_time: float
    failed: bool = False


def default_space(model: str) -> dict:
    """Search domains bracketing the regimes these detectors end up in."""
    if model == "ocsvm":
        return {"gamma": Real(1e-5, 1e1, log=True), "nu": Real(1e-6, 0.5)}
    if model == "iforest":
        return {"n_trees": Choice(tuple(range(25, 275, 25)))}
    raise ValueError(f"unknown model {model!r}")


def _sample(space: SearchSpace, rng: np.random.Generator) -> dict:
    params = {}
    for name in space:
        domain = space[name]
        if isinstance(domain, Real):
            if domain.log:
                params[name] = float(math.exp(rng.uniform(math.log(domain.lo), math.log(domain.hi))))
            else:
                params[name] = float(rng.uniform(domain.lo, domain.hi))
        else:
            params[name] = domain.values[int(rng.integers(len(domain.values)))]
    return params


def search(
    space: SearchSpace,
    objective: Callable[[dict], float],
    budget: int,
    seed: int = 0,
) -> tuple[TrialRecord, list[TrialRecord]]:
    """Evaluate `budget` sampled points; return (best, full history).

    Parameter points are drawn up front from the seeded stream, so the history
    is identical run to run even if evaluation were farmed out. A callback
    error is recorded as objective 1.0 with the failed flag and the search
    continues. Ties go to the earliest trial.
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    rng = np.random.default_rng(seed)
    points = [_sample(space, rng) for _ in range(budget)]

    history: list[TrialRecord] = []
    for index, params in enumerate(points):
        start = time.perf_counter()
        failed = False
        try:
            value = float(objective(params))
        except Exception as exc:
            logger.warning("trial %d failed: %s", index, exc)
            value = 1.0
            failed = True
        history.append(
            TrialRecord(
                index=index,
                params=params,
                objective=value,
                wall_time=time.perf_counter() - start,
                failed=failed,
            )
        )

    best = min(history, key=lambda r: (r.objective, r.index))
    return best, history


def history_jsonl(history: Sequence[TrialRecord]) -> str:
    """Line-delimited records of the deterministic trial fields.

    Wall times are reporting-only (they differ run to run) and are left to the
    human-readable table so this stream is byte-stable under a fixed seed.
    """
    lines = []
    for r in history:
        lines.append(
            json.dumps(
                {"index": r.index, "params": r.params, "objective": r.objective, "failed": r.failed},
                sort_keys=True,
                separators=(",", ":"),
            )
        )
    return "\n".join(lines) + "\n"


def history_table(history: Sequence[TrialRecord], best: TrialRecord) -> str:
    rows = ["trial  objective  time_s  params"]
    for r in history:
        mark = " *" if r.index == best.index else ("  !" if r.failed else "")
        params = ", ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in r.params.items())
        rows.append(f"{r.index:5d}  {r.objective:9.4f}  {r.wall_time:6.2f}  {params}{mark}")
    rows.append(f"best: trial {best.index}, objective {best.objective:.4f}")
    return "\n".join(rows) + "\n"
