"""Semantic op counting, skip statistics, and output comparison.

Counting is at the semantic dataflow level, not the Python level: a
vector multiply over length-d operands counts d scalar multiplies, a
length-d dot product counts d multiplies and d-1 adds, and one PWL or
exact nonlinearity evaluation counts as a single unit (its internal
arithmetic belongs to the evaluation unit, not the kernel datapath).
Comparisons against skip thresholds and representability clamps are free;
max_cmp counts only running-maximum comparisons between scores.
vec_loads counts value-vector elements actually read, which is what the
low-side skip saves.

Besides the whole-run totals, kernels attribute the elementwise output
update into a separate OpCounts so the per-step update cost of each
kernel can be asserted exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

REL_DENOM_FLOOR = 1e-30

CSV_COLUMNS = (
    "kernel",
    "precision",
    "N",
    "d",
    "skip",
    "mode",
    "nonlinear",
    "mul",
    "add",
    "sub",
    "div",
    "exp",
    "max_cmp",
    "vec_loads",
    "skipped_low",
    "skipped_high",
    "max_rel_err",
    "runtime_ns",
)


@dataclass
class OpCounts:
    mul: int = 0
    add: int = 0
    sub: int = 0
    div: int = 0
    exp: int = 0
    ln: int = 0
    sigmoid_eval: int = 0
    max_cmp: int = 0
    vec_loads: int = 0

    def merged(self, other: "OpCounts") -> "OpCounts":
        return OpCounts(**{k: getattr(self, k) + getattr(other, k) for k in self.__dataclass_fields__})

    __add__ = merged

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class SkipStats:
    total_steps: int = 0
    skipped_low: int = 0
    skipped_high: int = 0

    @property
    def skip_rate(self) -> float:
        if self.total_steps == 0:
            return 0.0
        return (self.skipped_low + self.skipped_high) / self.total_steps

    def merged(self, other: "SkipStats") -> "SkipStats":
        return SkipStats(
            self.total_steps + other.total_steps,
            self.skipped_low + other.skipped_low,
            self.skipped_high + other.skipped_high,
        )

    __add__ = merged

    def as_dict(self) -> dict:
        d = asdict(self)
        d["skip_rate"] = self.skip_rate
        return d


@dataclass
class RunCounters:
    """Mutable counter set for one kernel run (or one worker's share)."""

    ops: OpCounts = field(default_factory=OpCounts)
    update_ops: OpCounts = field(default_factory=OpCounts)
    skips: SkipStats = field(default_factory=SkipStats)

    def count(self, *, mul=0, add=0, sub=0, div=0, exp=0, ln=0, sigmoid_eval=0, max_cmp=0):
        o = self.ops
        o.mul += mul
        o.add += add
        o.sub += sub
        o.div += div
        o.exp += exp
        o.ln += ln
        o.sigmoid_eval += sigmoid_eval
        o.max_cmp += max_cmp

    def count_update(self, *, mul=0, add=0, sub=0):
        self.count(mul=mul, add=add, sub=sub)
        u = self.update_ops
        u.mul += mul
        u.add += add
        u.sub += sub

    def vec_load(self, n: int):
        self.ops.vec_loads += n

    def step(self):
        self.skips.total_steps += 1

    def skip_low(self):
        self.skips.skipped_low += 1

    def skip_high(self):
        self.skips.skipped_high += 1

    def merged(self, other: "RunCounters") -> "RunCounters":
        return RunCounters(
            self.ops + other.ops,
            self.update_ops + other.update_ops,
            self.skips + other.skips,
        )


@dataclass
class ErrorReport:
    """Componentwise error summary of outputs a against baseline b.

    max_rel/mean_rel use the componentwise denominator max(|b|, 1e-30);
    max_rel_norm is the per-query inf-norm relative error, which is the
    metric tolerances are gated on (componentwise relative error explodes
    on near-zero output components regardless of kernel quality).
    """

    max_abs: float
    max_rel: float
    mean_rel: float
    max_rel_norm: float
    per_query: list

    def as_dict(self) -> dict:
        return asdict(self)


def norm_rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max over queries of ||a_q - b_q||_inf / max(||b_q||_inf, floor)."""
    a2 = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b2 = np.atleast_2d(np.asarray(b, dtype=np.float64))
    num = np.max(np.abs(a2 - b2), axis=1)
    den = np.maximum(np.max(np.abs(b2), axis=1), REL_DENOM_FLOOR)
    return float(np.max(num / den))


def compare_outputs(a: np.ndarray, b: np.ndarray) -> ErrorReport:
    a2 = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b2 = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a2.shape != b2.shape:
        raise ValueError(f"shape mismatch: {a2.shape} vs {b2.shape}")
    absdiff = np.abs(a2 - b2)
    rel = absdiff / np.maximum(np.abs(b2), REL_DENOM_FLOOR)
    per_query = []
    for q in range(a2.shape[0]):
        den = max(float(np.max(np.abs(b2[q]))), REL_DENOM_FLOOR)
        per_query.append(
            {
                "query": q,
                "max_abs": float(np.max(absdiff[q])),
                "max_rel": float(np.max(rel[q])),
                "mean_rel": float(np.mean(rel[q])),
                "rel_norm": float(np.max(absdiff[q])) / den,
            }
        )
    return ErrorReport(
        max_abs=float(np.max(absdiff)),
        max_rel=float(np.max(rel)),
        mean_rel=float(np.mean(rel)),
        max_rel_norm=norm_rel_error(a2, b2),
        per_query=per_query,
    )


def summarize_run(counts: OpCounts, stats: SkipStats, n_keys: int, d: int) -> dict:
    """Per-step normalized counts plus the division/max elimination flags."""
    steps = max(stats.total_steps, 1)
    per_step = {k: v / steps for k, v in counts.as_dict().items()}
    return {
        "ops": counts.as_dict(),
        "per_step": per_step,
        "n_keys": n_keys,
        "d": d,
        "skip": stats.as_dict(),
        "skip_rate_scope": "synthetic input distribution; not comparable to LLM inference traces",
        "division_free": counts.div == 0,
        "max_free": counts.max_cmp == 0,
    }


def csv_header() -> str:
    return ",".join(CSV_COLUMNS)


def csv_row(record: dict) -> str:
    cells = []
    for col in CSV_COLUMNS:
        v = record.get(col, "")
        if isinstance(v, float):
            cells.append(repr(v))
        else:
            cells.append(str(v))
    return ",".join(cells)


def now_ns() -> int:
    return time.perf_counter_ns()
