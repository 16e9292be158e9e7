"""Numerically stable scalar nonlinearities and piecewise-linear tables.

The exact forms never overflow and never return non-finite values for
finite input: sigmoid branches on the sign of x so exp only ever sees a
non-positive argument, and log-sigmoid is computed through log1p so it
degrades to x on the far-negative side instead of -inf.

fit_pwl produces a continuous piecewise-linear approximation with free
breakpoints. Breakpoints start uniformly spaced (in the fit grid's
coordinate, so geometric for a log grid) and are refined one at a time
by coordinate descent over dense-grid candidate positions. Segment
ordinates come from a least-squares fit against the grid samples during
the search; for the default maxerr objective the final ordinates are
re-solved as a small linear program that minimizes the maximum absolute
error (with monotonicity constraints when the sampled target itself is
monotone). Continuity is by construction: slopes and intercepts are
derived from shared node ordinates. The achieved max-abs error over a
10,001-point validation grid is recorded on the table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

LN_TABLE_LO = 2.0 ** -24  # smallest weight the ln table must digest
SIGMOID_TABLE_LO = -6.0
SIGMOID_TABLE_HI = 11.0
VALIDATION_POINTS = 10_001


def _sigmoid_scalar(x: float) -> float:
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    ex = math.exp(x)  # exp of a non-positive number only
    return ex / (1.0 + ex)


# array paths reuse the scalar code so results do not depend on which
# SIMD exp the local numpy build ships; fit grids are small enough
_sigmoid_vec = np.vectorize(_sigmoid_scalar, otypes=[np.float64])


def sigmoid_exact(x):
    """Stable logistic sigmoid; scalar or ndarray, never overflows."""
    if np.ndim(x) == 0:
        return _sigmoid_scalar(float(x))
    return _sigmoid_vec(np.asarray(x, dtype=np.float64))


def ln_exact(w):
    """Natural log on the weight domain (0, 1]; anything else is an error."""
    if np.ndim(w) == 0:
        w = float(w)
        if not (0.0 < w <= 1.0):
            raise ValueError(f"ln_exact domain is (0, 1], got {w!r}")
        return math.log(w)
    wa = np.asarray(w, dtype=np.float64)
    if not ((wa > 0.0) & (wa <= 1.0)).all():
        raise ValueError("ln_exact domain is (0, 1]")
    return np.log(wa)


def _log_sigmoid_scalar(x: float) -> float:
    if x >= 0.0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


_log_sigmoid_vec = np.vectorize(_log_sigmoid_scalar, otypes=[np.float64])


def log_sigmoid_exact(x):
    """ln(sigmoid(x)) without intermediate overflow or -inf.

    For x >= 0 this is -log1p(exp(-x)) (about -exp(-x) for large x);
    for x < 0 it is x - log1p(exp(x)) (about x for very negative x).
    Always finite and <= 0 for finite input.
    """
    if np.ndim(x) == 0:
        return _log_sigmoid_scalar(float(x))
    return _log_sigmoid_vec(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class PwlTable:
    """Continuous piecewise-linear approximation on [domain_lo, domain_hi].

    Segment j covers [breakpoints[j], breakpoints[j+1]) with value
    slopes[j] * x + intercepts[j]; the last segment is closed on the
    right. Junction mismatch is bounded by 1e-12 by construction.
    """

    breakpoints: np.ndarray
    slopes: np.ndarray
    intercepts: np.ndarray
    domain_lo: float
    domain_hi: float
    max_abs_error: float | None = None
    name: str | None = None

    def __post_init__(self) -> None:
        bp = np.asarray(self.breakpoints, dtype=np.float64)
        sl = np.asarray(self.slopes, dtype=np.float64)
        ic = np.asarray(self.intercepts, dtype=np.float64)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "slopes", sl)
        object.__setattr__(self, "intercepts", ic)
        if bp.ndim != 1 or bp.size < 2:
            raise ValueError("need at least two breakpoints")
        if sl.shape != (bp.size - 1,) or ic.shape != (bp.size - 1,):
            raise ValueError("slopes/intercepts must have one entry per segment")
        if not np.all(np.diff(bp) > 0):
            raise ValueError("breakpoints must be strictly increasing")
        if bp[0] != self.domain_lo or bp[-1] != self.domain_hi:
            raise ValueError("breakpoints must span exactly the stated domain")
        inner = bp[1:-1]
        if inner.size:
            left = sl[:-1] * inner + ic[:-1]
            right = sl[1:] * inner + ic[1:]
            gap = np.max(np.abs(left - right))
            if gap > 1e-12:
                raise ValueError(f"discontinuous table: junction gap {gap:.3e}")

    @property
    def n_segments(self) -> int:
        return self.breakpoints.size - 1

    def to_dict(self) -> dict:
        return {
            "function": self.name,
            "domain": [self.domain_lo, self.domain_hi],
            "breakpoints": self.breakpoints.tolist(),
            "slopes": self.slopes.tolist(),
            "intercepts": self.intercepts.tolist(),
            "max_abs_error": self.max_abs_error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PwlTable":
        return cls(
            breakpoints=np.asarray(d["breakpoints"], dtype=np.float64),
            slopes=np.asarray(d["slopes"], dtype=np.float64),
            intercepts=np.asarray(d["intercepts"], dtype=np.float64),
            domain_lo=float(d["domain"][0]),
            domain_hi=float(d["domain"][1]),
            max_abs_error=d.get("max_abs_error"),
            name=d.get("function"),
        )


def segment_index(table: PwlTable, x) -> np.ndarray:
    """Index of the segment owning x; x == domain_hi maps to the last one."""
    idx = np.searchsorted(table.breakpoints, x, side="right") - 1
    return np.clip(idx, 0, table.n_segments - 1)


def eval_pwl(table: PwlTable, x):
    """Evaluate the table; x outside the domain is a contract violation."""
    scalar = np.ndim(x) == 0
    xa = np.asarray(x, dtype=np.float64)
    if np.any(xa < table.domain_lo) or np.any(xa > table.domain_hi):
        raise ValueError(
            f"eval_pwl argument outside [{table.domain_lo!r}, {table.domain_hi!r}]"
        )
    j = segment_index(table, xa)
    y = table.slopes[j] * xa + table.intercepts[j]
    return float(y) if scalar else y


def _hat_matrix(xs: np.ndarray, bps: np.ndarray) -> np.ndarray:
    # continuous PWL as a sum of hat functions over the node ordinates
    n = bps.size - 1
    j = np.clip(np.searchsorted(bps, xs, side="right") - 1, 0, n - 1)
    t = (xs - bps[j]) / (bps[j + 1] - bps[j])
    A = np.zeros((xs.size, n + 1))
    rows = np.arange(xs.size)
    A[rows, j] = 1.0 - t
    A[rows, j + 1] = t
    return A


def _lsq_ordinates(A: np.ndarray, ys: np.ndarray) -> np.ndarray:
    return np.linalg.lstsq(A, ys, rcond=None)[0]


def _monotone_direction(ys: np.ndarray) -> int:
    d = np.diff(ys)
    if np.all(d >= 0):
        return 1
    if np.all(d <= 0):
        return -1
    return 0


def _minimax_ordinates(A: np.ndarray, ys: np.ndarray, monotone: int) -> np.ndarray:
    # minimize t subject to |A y - ys| <= t, optionally with monotone nodes
    from scipy.optimize import linprog

    m = A.shape[1]
    c = np.zeros(m + 1)
    c[-1] = 1.0
    ones = np.ones((A.shape[0], 1))
    rows = [np.hstack([A, -ones]), np.hstack([-A, -ones])]
    rhs = [ys, -ys]
    if monotone:
        mono = np.zeros((m - 1, m + 1))
        for j in range(m - 1):
            mono[j, j] = monotone
            mono[j, j + 1] = -monotone
        rows.append(mono)
        rhs.append(np.zeros(m - 1))
    res = linprog(
        c,
        A_ub=np.vstack(rows),
        b_ub=np.concatenate(rhs),
        bounds=[(None, None)] * m + [(0, None)],
        method="highs",
    )
    if not res.success:
        raise RuntimeError(f"minimax ordinate solve failed: {res.message}")
    return res.x[:m]


def _table_from_nodes(bps, nodes, max_abs_error, name) -> PwlTable:
    h = np.diff(bps)
    slopes = np.diff(nodes) / h
    intercepts = nodes[:-1] - slopes * bps[:-1]
    return PwlTable(
        breakpoints=bps.copy(),
        slopes=slopes,
        intercepts=intercepts,
        domain_lo=float(bps[0]),
        domain_hi=float(bps[-1]),
        max_abs_error=max_abs_error,
        name=name,
    )


def fit_pwl(
    f,
    domain_lo: float,
    domain_hi: float,
    n_segments: int = 8,
    *,
    objective: str = "maxerr",
    grid: str = "uniform",
    n_grid: int = 2001,
    passes: int = 4,
    candidates: int = 24,
    name: str | None = None,
) -> PwlTable:
    """Fit a continuous PWL approximation of f with free breakpoints.

    objective "maxerr" (default) approximately minimizes the maximum
    absolute error; "lsq" minimizes the sum of squares. grid "uniform"
    or "log" controls the sample spacing (log requires domain_lo > 0 and
    suits targets with curvature packed toward zero).
    """
    if not domain_lo < domain_hi:
        raise ValueError("domain_lo must be < domain_hi")
    if n_segments < 1:
        raise ValueError("n_segments must be >= 1")
    if objective not in ("maxerr", "lsq"):
        raise ValueError(f"unknown objective {objective!r}")
    if grid not in ("uniform", "log"):
        raise ValueError(f"unknown grid {grid!r}")
    if grid == "log" and domain_lo <= 0:
        raise ValueError("log grid requires a positive domain")

    if grid == "log":
        fwd, inv = np.log, np.exp
    else:
        fwd, inv = (lambda t: t), (lambda t: t)

    lo_t, hi_t = fwd(domain_lo), fwd(domain_hi)
    xs = inv(np.linspace(lo_t, hi_t, n_grid))
    xs[0], xs[-1] = domain_lo, domain_hi
    ys = np.asarray(f(xs), dtype=np.float64)
    if ys.shape != xs.shape:
        ys = np.asarray([f(x) for x in xs], dtype=np.float64)
    if not np.all(np.isfinite(ys)):
        raise ValueError("f produced non-finite values on the fit domain")

    # initial breakpoints: uniform in grid coordinate, snapped to grid points
    idx = np.round(np.linspace(0, n_grid - 1, n_segments + 1)).astype(int)
    bp_idx = list(idx)

    def objective_value(indices) -> tuple[float, float]:
        # chord interpolation error is a cheap, well-behaved proxy for the
        # final fit quality: the minimax ordinate solve roughly halves it
        # per segment, so breakpoints that equalize chord error are close
        # to breakpoints that equalize the true error
        sel = np.asarray(indices)
        r = np.interp(xs, xs[sel], ys[sel]) - ys
        sse = float(r @ r)
        if objective == "lsq":
            return (sse, sse)
        # lexicographic: SSE breaks plateau ties so the descent keeps
        # moving when a single-coordinate move cannot yet lower the max
        return (float(np.max(np.abs(r))), sse)

    best = objective_value(bp_idx)
    if n_segments > 1:
        for _ in range(passes):
            improved = False
            for j in range(1, n_segments):
                lo_i, hi_i = bp_idx[j - 1] + 1, bp_idx[j + 1] - 1
                if hi_i <= lo_i:
                    continue
                cand = np.unique(
                    np.round(np.linspace(lo_i, hi_i, min(candidates, hi_i - lo_i + 1))).astype(int)
                )
                for c in cand:
                    if c == bp_idx[j]:
                        continue
                    trial = bp_idx.copy()
                    trial[j] = int(c)
                    val = objective_value(trial)
                    if val < best:
                        best = val
                        bp_idx = trial
                        improved = True
            if not improved:
                break

    bps = xs[np.asarray(bp_idx)]
    A = _hat_matrix(xs, bps)
    if objective == "maxerr":
        nodes = _minimax_ordinates(A, ys, _monotone_direction(ys))
    else:
        nodes = _lsq_ordinates(A, ys)

    table = _table_from_nodes(bps, nodes, None, name)

    vx = inv(np.linspace(lo_t, hi_t, VALIDATION_POINTS))
    vx[0], vx[-1] = domain_lo, domain_hi
    vy = np.asarray(f(vx), dtype=np.float64)
    err = float(np.max(np.abs(eval_pwl(table, vx) - vy)))
    return _table_from_nodes(bps, nodes, err, name)


@lru_cache(maxsize=None)
def default_sigmoid_table(n_segments: int = 8, objective: str = "maxerr") -> PwlTable:
    return fit_pwl(
        sigmoid_exact,
        SIGMOID_TABLE_LO,
        SIGMOID_TABLE_HI,
        n_segments,
        objective=objective,
        name="sigmoid",
    )


@lru_cache(maxsize=None)
def default_ln_table(n_segments: int = 8, objective: str = "maxerr") -> PwlTable:
    # log-spaced grid: ln's curvature is concentrated at the small end
    return fit_pwl(
        np.log,
        LN_TABLE_LO,
        1.0,
        n_segments,
        objective=objective,
        grid="log",
        name="ln",
    )
