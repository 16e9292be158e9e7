"""Streaming attention kernels.

Four formulations of single-head attention that all compute, for each
query q, the softmax-weighted average of the value vectors:

  reference  two-pass safe softmax: subtract the max score, exponentiate,
             normalize, accumulate. The ground-truth oracle.
  alg1       one-pass online softmax: running max m, running exp-sum l,
             output renormalized every step with two scalar divisions.
  alg2       same running state, but the output stays unnormalized until
             one vector division by l at the end of the stream.
  flashd     division-free streaming form. The per-step softmax weight of
             the incoming value, w_i = exp(s_i - m_i) / l_i, obeys the
             self-contained recurrence

                 w_1 = 1,   w_i = sigmoid((s_i - s_{i-1}) + ln w_{i-1})

             and the output update is the lerp o += (v_i - o) * w_i, so
             the running max and the exp-sum disappear along with every
             division (the only divide lives inside the sigmoid unit).

flashd optionally skips work based on the sigmoid argument
z = (s_i - s_{i-1}) + ln w_{i-1}, the quantity that actually decides the
weight: below skip.lo the weight is so small the output would not move,
so the nonlinearities are skipped and the value vector is never even
loaded (the carried log-weight keeps the saturated value z, which is
ln sigmoid(z) to within e^skip.lo); above skip.hi the weight saturates
to 1 and the output is replaced by a plain copy of the value. Both
shortcuts are approximations with per-event output error at most
sigmoid(skip.lo) respectively 1 - sigmoid(skip.hi) times the gap between
the incoming value and the output, and both leave the score recurrence
intact (s_prev always advances). Thresholding z rather than the raw
score difference is what keeps that per-event bound valid once weights
drift far from 1.

Weight flooring: stored weights are kept strictly positive so the next
step's ln is always defined. With exact nonlinearities the floor is the
working format's smallest positive value, which never disturbs realistic
runs; with PWL tables the floor is max(2**-24, format minimum) because
the ln table's domain starts at 2**-24. A low-side skip stores the same
2**-24-anchored value as its reported weight while the carried log-weight
keeps the saturated argument z. In log_domain mode the carried quantity is
lnw itself (computed by the stable log-sigmoid), which survives score
swings far beyond what a stored w can represent; paper mode, carrying w,
is the default.

Per-query state is independent, so queries may be processed concurrently
as long as each worker uses its own RunCounters (merge them afterwards).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .instrumentation import RunCounters, now_ns
from .nonlinear import (
    LN_TABLE_LO,
    PwlTable,
    eval_pwl,
    ln_exact,
    log_sigmoid_exact,
    segment_index,
    sigmoid_exact,
)
from .precision import PREC_FP64, Precision

REFERENCE = "reference"
ALG1 = "alg1"
ALG2 = "alg2"
FLASHD = "flashd"
KERNEL_KINDS = (REFERENCE, ALG1, ALG2, FLASHD)

MODE_PAPER = "paper"
MODE_LOG = "log"
MODES = (MODE_PAPER, MODE_LOG)


@dataclass(frozen=True)
class SkipConfig:
    """Saturation window for the sigmoid argument z = (s - s_prev) + lnw.

    Steps with z below lo skip the output update entirely; steps with z
    above hi replace the output by the incoming value.
    """

    enabled: bool = False
    lo: float = -6.0
    hi: float = 11.0

    def __post_init__(self) -> None:
        if not self.lo < self.hi:
            raise ValueError("skip window needs lo < hi")


SKIP_OFF = SkipConfig()


@dataclass(frozen=True)
class PwlTables:
    """Sigmoid and ln tables used when running with approximate nonlinearities."""

    sigmoid: PwlTable
    ln: PwlTable


@dataclass
class AttnProblem:
    """One batch of queries against a shared key/value stream."""

    queries: np.ndarray  # (n_queries, d)
    keys: np.ndarray  # (n_keys, d)
    values: np.ndarray  # (n_keys, d)

    def __post_init__(self) -> None:
        self.queries = np.atleast_2d(np.asarray(self.queries, dtype=np.float64))
        self.keys = np.atleast_2d(np.asarray(self.keys, dtype=np.float64))
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if self.queries.ndim != 2 or self.keys.ndim != 2 or self.values.ndim != 2:
            raise ValueError("queries, keys and values must be rank-2")
        d = self.queries.shape[1]
        if self.keys.shape[1] != d or self.values.shape[1] != d:
            raise ValueError("queries, keys and values must share the feature dimension")
        if self.keys.shape[0] != self.values.shape[0]:
            raise ValueError("keys and values must have the same length")
        if self.keys.shape[0] < 1:
            raise ValueError("need at least one key/value pair")

    @property
    def n_queries(self) -> int:
        return self.queries.shape[0]

    @property
    def n_keys(self) -> int:
        return self.keys.shape[0]

    @property
    def d(self) -> int:
        return self.queries.shape[1]


@dataclass
class Alg1State:
    m: float
    l: float
    o: np.ndarray
    i: int

    @classmethod
    def initial(cls, d: int) -> "Alg1State":
        return cls(m=0.0, l=0.0, o=np.zeros(d), i=0)


@dataclass
class Alg2State:
    m: float
    l: float
    o: np.ndarray
    i: int

    @classmethod
    def initial(cls, d: int) -> "Alg2State":
        return cls(m=0.0, l=0.0, o=np.zeros(d), i=0)


@dataclass
class FlashDState:
    s_prev: float
    w: float
    lnw: float
    o: np.ndarray
    i: int
    mode: str = MODE_PAPER

    @classmethod
    def initial(cls, d: int, mode: str = MODE_PAPER) -> "FlashDState":
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        return cls(s_prev=math.nan, w=1.0, lnw=0.0, o=np.zeros(d), i=0, mode=mode)


def score(q: np.ndarray, k: np.ndarray, prec: Precision = PREC_FP64, counters: RunCounters | None = None) -> float:
    """Dot product of one query against one key.

    Emulated formats round after every multiply, then fold the products
    left to right with a rounded add per step; wide_accumulate sums the
    rounded products in float64 and rounds once. Counts d multiplies and
    d - 1 adds either way.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape != k.shape or q.ndim != 1:
        raise ValueError("score needs two equal-length vectors")
    d = q.size
    if counters is not None:
        counters.count(mul=d, add=d - 1)
    if prec.native:
        return float(np.dot(q, k))
    prods = prec.round(q * k)
    if prec.wide_accumulate:
        return float(prec.round(float(np.sum(prods))))
    acc = float(prods[0])
    for j in range(1, d):
        acc = prec.round(acc + float(prods[j]))
    return acc


def _score_stream(q: np.ndarray, keys: np.ndarray, prec: Precision, counters: RunCounters | None) -> np.ndarray:
    # all scores for one query; same arithmetic contract as score()
    n, d = keys.shape
    if counters is not None:
        counters.count(mul=n * d, add=n * (d - 1))
    if prec.native:
        return keys @ q
    prods = prec.round(keys * q[None, :])
    if prec.wide_accumulate:
        return prec.round(prods.sum(axis=1))
    acc = prods[:, 0].copy()
    for j in range(1, d):
        acc = prec.round(acc + prods[:, j])
    return acc


def _weight_floor(prec: Precision, tables: PwlTables | None) -> float:
    if tables is not None:
        return max(LN_TABLE_LO, prec.fmt.min_positive)
    return prec.fmt.min_positive


def skip_weight_value(prec: Precision = PREC_FP64) -> float:
    """Weight stored by a low-side skip: the 2**-24 anchor, raised to the
    format minimum when 2**-24 itself is not representable."""
    return max(LN_TABLE_LO, prec.fmt.min_positive)


def _pwl_eval_clamped(table: PwlTable, x: float, prec: Precision) -> float:
    # hardware-style endpoint saturation, then slope*x + intercept in the
    # working format (coefficients are held at that format too)
    if x < table.domain_lo:
        x = table.domain_lo
    elif x > table.domain_hi:
        x = table.domain_hi
    j = int(segment_index(table, x))
    if prec.native:
        return float(table.slopes[j] * x + table.intercepts[j])
    sl = prec.round(float(table.slopes[j]))
    ic = prec.round(float(table.intercepts[j]))
    return prec.round(prec.round(sl * x) + ic)


def _update_output(o: np.ndarray, v: np.ndarray, w: float, prec: Precision, counters: RunCounters | None, d: int) -> np.ndarray:
    # o + (v - o) * w: one vector subtract, one vector multiply, one vector add
    if counters is not None:
        counters.count_update(mul=d, add=d, sub=d)
    diff = prec.round(v - o)
    prod = prec.round(diff * w)
    return prec.round(o + prod)


def alg1_step(
    st: Alg1State,
    s: float,
    v: np.ndarray,
    prec: Precision = PREC_FP64,
    counters: RunCounters | None = None,
) -> Alg1State:
    """Online softmax with per-step renormalization.

    m <- max(m, s); l <- l * e^(m_prev - m) + e^(s - m);
    o <- o * (l_prev * e^(m_prev - m) / l) + v * (e^(s - m) / l).
    The first step reduces to m = s, l = 1, o = v.
    """
    first = st.i == 0
    m_prev = s if first else st.m
    l_prev = 0.0 if first else st.l
    o_prev = np.zeros_like(v) if first else st.o
    r = prec.round
    if counters is not None:
        counters.step()
        counters.count(max_cmp=1, sub=2, exp=2, mul=1, add=1, div=2)
        counters.count_update(mul=2 * v.size, add=v.size)
        counters.vec_load(v.size)
    m_new = max(m_prev, s)
    a = r(math.exp(r(m_prev - m_new)))
    b = r(math.exp(r(s - m_new)))
    la = r(l_prev * a)
    l_new = r(la + b)
    c1 = r(la / l_new)
    c2 = r(b / l_new)
    o_new = r(r(o_prev * c1) + r(v * c2))
    return Alg1State(m=m_new, l=l_new, o=o_new, i=st.i + 1)


def alg2_step(
    st: Alg2State,
    s: float,
    v: np.ndarray,
    prec: Precision = PREC_FP64,
    counters: RunCounters | None = None,
) -> Alg2State:
    """Online softmax with the division deferred to finalize.

    m <- max(m, s); l <- l * e^(m_prev - m) + e^(s - m);
    o <- o * e^(m_prev - m) + v * e^(s - m).
    """
    first = st.i == 0
    m_prev = s if first else st.m
    l_prev = 0.0 if first else st.l
    o_prev = np.zeros_like(v) if first else st.o
    r = prec.round
    if counters is not None:
        counters.step()
        counters.count(max_cmp=1, sub=2, exp=2, mul=1, add=1)
        counters.count_update(mul=2 * v.size, add=v.size)
        counters.vec_load(v.size)
    m_new = max(m_prev, s)
    a = r(math.exp(r(m_prev - m_new)))
    b = r(math.exp(r(s - m_new)))
    l_new = r(r(l_prev * a) + b)
    o_new = r(r(o_prev * a) + r(v * b))
    return Alg2State(m=m_new, l=l_new, o=o_new, i=st.i + 1)


def alg2_finalize(
    st: Alg2State,
    prec: Precision = PREC_FP64,
    counters: RunCounters | None = None,
) -> np.ndarray:
    """One vector division by l; calling before any step is an error."""
    if st.i == 0:
        raise ValueError("alg2_finalize called before any step was consumed")
    if counters is not None:
        counters.count(div=st.o.size)
    return prec.round(st.o / st.l)


def flashd_step(
    st: FlashDState,
    s: float,
    v: np.ndarray,
    skip: SkipConfig | None = None,
    tables: PwlTables | None = None,
    prec: Precision = PREC_FP64,
    counters: RunCounters | None = None,
) -> FlashDState:
    """One division-free streaming step; see the module docstring.

    The first step forces w = 1 (so o becomes exactly v_1) without
    evaluating any nonlinearity. Skip decisions test the full sigmoid
    argument z = (s - s_prev) + lnw and never apply to the first step.
    """
    skip = skip or SKIP_OFF
    d = v.size
    if counters is not None:
        counters.step()
    if st.i == 0:
        w, lnw = 1.0, 0.0
        o_new = _update_output(st.o, v, w, prec, counters, d)
        if counters is not None:
            counters.vec_load(d)
        return FlashDState(s_prev=s, w=w, lnw=lnw, o=o_new, i=1, mode=st.mode)

    r = prec.round
    delta = r(s - st.s_prev)
    z = r(delta + st.lnw)
    if counters is not None:
        counters.count(sub=1, add=1)

    if skip.enabled and z < skip.lo:
        # weight would be negligible: output untouched, value never loaded.
        # The carried log-weight keeps the saturated value z itself, which
        # equals ln(sigmoid(z)) to within e^z < sigmoid(lo); anything cruder
        # corrupts every later weight and breaks the skip deviation bound.
        w = skip_weight_value(prec)
        if counters is not None:
            counters.skip_low()
        return FlashDState(s_prev=s, w=w, lnw=z, o=st.o, i=st.i + 1, mode=st.mode)

    if skip.enabled and z > skip.hi:
        # weight saturates to one: plain copy, no arithmetic; ln(sigmoid(z))
        # is within e^-z < 1 - sigmoid(hi) of the carried value 0
        if counters is not None:
            counters.skip_high()
            counters.vec_load(d)
        return FlashDState(s_prev=s, w=1.0, lnw=0.0, o=np.array(v, dtype=np.float64), i=st.i + 1, mode=st.mode)

    floor = _weight_floor(prec, tables)

    if st.mode == MODE_LOG:
        # carry lnw itself; exact nonlinearities only
        lnw = r(log_sigmoid_exact(z))
        w = r(math.exp(lnw))
        if counters is not None:
            counters.count(sigmoid_eval=1, exp=1)
        if w < floor:
            w = floor  # lnw keeps the true value: that is the point of this mode
    else:
        if tables is not None:
            w = r(_pwl_eval_clamped(tables.sigmoid, z, prec))
        else:
            w = r(sigmoid_exact(z))
        if counters is not None:
            counters.count(sigmoid_eval=1)
        if w > 1.0:
            w = 1.0
        if w < floor:
            w = floor
        if tables is not None:
            lnw = r(_pwl_eval_clamped(tables.ln, w, prec))
            if lnw > 0.0:
                lnw = 0.0
        else:
            lnw = r(ln_exact(w))
        if counters is not None:
            counters.count(ln=1)

    o_new = _update_output(st.o, v, w, prec, counters, d)
    if counters is not None:
        counters.vec_load(d)
    return FlashDState(s_prev=s, w=w, lnw=lnw, o=o_new, i=st.i + 1, mode=st.mode)


def _reference_from_scores(
    scores: np.ndarray,
    values: np.ndarray,
    prec: Precision,
    counters: RunCounters | None,
) -> np.ndarray:
    n, d = values.shape
    r = prec.round
    if counters is not None:
        counters.count(max_cmp=n - 1, sub=n, exp=n, div=n, add=n - 1)
        counters.count_update(mul=n * d, add=(n - 1) * d)
        counters.vec_load(n * d)
        counters.skips.total_steps += n
    if prec.native:
        m = float(np.max(scores))
        e = np.exp(scores - m)
        return (e / float(np.sum(e))) @ values
    m = float(np.max(scores))  # max of representable values is representable
    e = r(np.exp(r(scores - m)))
    l = float(e[0])
    for i in range(1, n):
        l = prec.round(l + float(e[i]))
    f = r(e / l)
    o = r(values[0] * f[0])
    for i in range(1, n):
        o = r(o + r(values[i] * f[i]))
    return o


def reference_attention(
    problem: AttnProblem,
    query_index: int,
    prec: Precision = PREC_FP64,
    counters: RunCounters | None = None,
) -> np.ndarray:
    """Two-pass safe softmax attention for one query."""
    scores = _score_stream(problem.queries[query_index], problem.keys, prec, counters)
    return _reference_from_scores(scores, problem.values, prec, counters)


def naive_attention(problem: AttnProblem, query_index: int) -> np.ndarray:
    """Softmax without the max subtraction. Deliberately unsafe: large
    scores overflow exp and poison the output. Exists only so tests can
    demonstrate what the safe formulations avoid."""
    scores = problem.keys @ problem.queries[query_index]
    with np.errstate(over="ignore", invalid="ignore"):
        e = np.exp(scores)
        return (e / np.sum(e)) @ problem.values


@dataclass
class RunResult:
    outputs: np.ndarray
    ops: "OpCounts"
    update_ops: "OpCounts"
    skip_stats: "SkipStats"
    runtime_ns: int


def run_kernel(
    problem: AttnProblem,
    kind: str,
    prec: Precision = PREC_FP64,
    skip: SkipConfig | None = None,
    tables: PwlTables | None = None,
    mode: str = MODE_PAPER,
    counters: RunCounters | None = None,
) -> RunResult:
    """Run one kernel over every query of a problem.

    Inputs are rounded to the working format once up front. Queries are
    processed independently; counters aggregate across them.
    """
    if kind not in KERNEL_KINDS:
        raise ValueError(f"unknown kernel {kind!r}; expected one of {KERNEL_KINDS}")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    skip = skip or SKIP_OFF
    counters = counters if counters is not None else RunCounters()

    queries = prec.round(problem.queries)
    keys = prec.round(problem.keys)
    values = prec.round(problem.values)
    n, d = keys.shape
    outputs = np.empty_like(queries)

    t0 = now_ns()
    for qi in range(queries.shape[0]):
        scores = _score_stream(queries[qi], keys, prec, counters)
        if kind == REFERENCE:
            outputs[qi] = _reference_from_scores(scores, values, prec, counters)
        elif kind == ALG1:
            st = Alg1State.initial(d)
            for i in range(n):
                st = alg1_step(st, float(scores[i]), values[i], prec, counters)
            outputs[qi] = st.o
        elif kind == ALG2:
            st = Alg2State.initial(d)
            for i in range(n):
                st = alg2_step(st, float(scores[i]), values[i], prec, counters)
            outputs[qi] = alg2_finalize(st, prec, counters)
        else:
            st = FlashDState.initial(d, mode)
            for i in range(n):
                st = flashd_step(st, float(scores[i]), values[i], skip, tables, prec, counters)
            outputs[qi] = st.o
    runtime = now_ns() - t0

    return RunResult(
        outputs=outputs,
        ops=counters.ops,
        update_ops=counters.update_ops,
        skip_stats=counters.skips,
        runtime_ns=runtime,
    )
