"""Binary tensor files and deterministic problem generation.

File format (all integers little-endian):

    offset  size        field
    0       4           magic, ASCII "ATN1"
    4       1           dtype code: 0=fp64, 1=fp32, 2=bf16, 3=fp8e4m3
    5       1           rank
    6       4*rank      dims, u32 each
    ...     payload     row-major elements; 8/4/2/1 bytes per element

bf16 elements are the top 16 bits of the IEEE float32 encoding; fp8e4m3
elements use the 1-4-3 layout described in the precision module. Reading
never loses information; writing rounds values to the stored dtype first,
so write-then-read equals round(x, dtype) and is bit-identical when x was
already representable.

Deterministic generation
------------------------
All randomness comes from one documented, platform-independent integer
recipe. Word k (k = 1, 2, ...) of the stream for a given 64-bit seed is

    z = (seed + k * 0x9E3779B97F4A7C15) mod 2**64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) mod 2**64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) mod 2**64
    z = z ^ (z >> 31)

Floats are derived by fixed mappings: open-closed uniform
u = ((z >> 11) + 1) * 2**-53 in (0, 1], half-open uniform
v = (z >> 11) * 2**-53 in [0, 1). Gaussians come in Box-Muller pairs:
words are consumed two at a time (u1 from the first, v2 from the second),
r = sqrt(-2 ln u1), and the pair (r cos(2 pi v2), r sin(2 pi v2)) is
emitted in that order; a trailing odd element discards the sine half.
A problem consumes the stream as queries row-major, then keys, then
values. Everything downstream of the integer stream is ordinary float64
arithmetic, so bit-identical reruns on one platform are guaranteed and
cross-platform agreement holds to libm's log/cos/sin quality.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .precision import BF16, FP8E4M3, decode_bits, encode_bits, round_array
from .kernels import AttnProblem

MAGIC = b"ATN1"

DTYPE_CODES = {"fp64": 0, "fp32": 1, "bf16": 2, "fp8e4m3": 3}
DTYPE_NAMES = {v: k for k, v in DTYPE_CODES.items()}
_ELEM_SIZE = {"fp64": 8, "fp32": 4, "bf16": 2, "fp8e4m3": 1}

DISTRIBUTIONS = ("gaussian", "uniform", "adversarial")


class TensorFileError(Exception):
    """Base class for tensor file problems."""


class BadMagicError(TensorFileError):
    pass


class UnknownDtypeError(TensorFileError):
    pass


class SizeMismatchError(TensorFileError):
    pass


_FP8_DECODE = np.array([decode_bits(c, FP8E4M3) for c in range(256)], dtype=np.float64)


def _fp8_encode_array(x: np.ndarray) -> np.ndarray:
    flat = np.asarray(x, dtype=np.float64).reshape(-1)
    out = np.empty(flat.size, dtype=np.uint8)
    for i, v in enumerate(flat):
        out[i] = encode_bits(float(v), FP8E4M3)
    return out


def write_tensor(path, array: np.ndarray, dtype: str = "fp64") -> None:
    """Write array to path, rounding values to the stored dtype."""
    if dtype not in DTYPE_CODES:
        raise UnknownDtypeError(f"unknown dtype {dtype!r}")
    a = np.ascontiguousarray(np.asarray(array, dtype=np.float64))
    header = MAGIC + struct.pack("<BB", DTYPE_CODES[dtype], a.ndim)
    header += struct.pack(f"<{a.ndim}I", *a.shape)
    if dtype == "fp64":
        payload = a.astype("<f8").tobytes()
    elif dtype == "fp32":
        payload = a.astype("<f4").tobytes()
    elif dtype == "bf16":
        carrier = round_array(a, BF16)
        bits = carrier.astype(np.float32).view(np.uint32) >> 16
        payload = bits.astype("<u2").tobytes()
    else:
        carrier = round_array(a, FP8E4M3)
        payload = _fp8_encode_array(carrier).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_tensor(path) -> tuple[np.ndarray, str]:
    """Read a tensor file; returns (float64 array, stored dtype name)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 6 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not an ATN1 tensor file")
    code, rank = struct.unpack_from("<BB", raw, 4)
    if code not in DTYPE_NAMES:
        raise UnknownDtypeError(f"{path}: unknown dtype code {code}")
    dtype = DTYPE_NAMES[code]
    need = 6 + 4 * rank
    if len(raw) < need:
        raise SizeMismatchError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", raw, 6) if rank else ()
    count = 1
    for n in dims:
        count *= n
    payload = raw[need:]
    if len(payload) != count * _ELEM_SIZE[dtype]:
        raise SizeMismatchError(
            f"{path}: payload holds {len(payload)} bytes, expected {count * _ELEM_SIZE[dtype]}"
        )
    if dtype == "fp64":
        a = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    elif dtype == "fp32":
        a = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    elif dtype == "bf16":
        bits = np.frombuffer(payload, dtype="<u2").astype(np.uint32) << 16
        a = bits.view(np.float32).astype(np.float64)
    else:
        a = _FP8_DECODE[np.frombuffer(payload, dtype=np.uint8)]
    return a.reshape(dims), dtype


_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def splitmix64(seed: int, count: int, offset: int = 0) -> np.ndarray:
    """Words offset+1 .. offset+count of the documented stream, as uint64."""
    k = np.arange(offset + 1, offset + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + _GOLDEN * k) & _MASK
        z = ((z ^ (z >> np.uint64(30))) * _MIX1) & _MASK
        z = ((z ^ (z >> np.uint64(27))) * _MIX2) & _MASK
        z = z ^ (z >> np.uint64(31))
    return z


class _Stream:
    """Sequential view over the splitmix64 word stream for one seed."""

    def __init__(self, seed: int):
        self.seed = seed
        self.consumed = 0

    def words(self, n: int) -> np.ndarray:
        w = splitmix64(self.seed, n, offset=self.consumed)
        self.consumed += n
        return w

    def uniform(self, n: int) -> np.ndarray:
        # half-open [0, 1)
        return (self.words(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def gaussian(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        w = self.words(2 * pairs)
        u1 = ((w[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53  # (0, 1]
        v2 = (w[1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53  # [0, 1)
        r = np.sqrt(-2.0 * np.log(u1))
        ang = 2.0 * math.pi * v2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(ang)
        out[1::2] = r * np.sin(ang)
        return out[:n]


@dataclass(frozen=True)
class GenSpec:
    """Deterministic problem description: same spec, same bits."""

    seed: int
    n_keys: int
    d: int
    n_queries: int = 1
    distribution: str = "gaussian"
    params: tuple = (0.0, 1.0)

    def __post_init__(self) -> None:
        if self.n_keys < 1 or self.d < 1 or self.n_queries < 1:
            raise ValueError("n_keys, d and n_queries must all be >= 1")
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(
                f"unknown distribution {self.distribution!r}; expected one of {DISTRIBUTIONS}"
            )
        if self.distribution in ("gaussian", "uniform") and len(self.params) != 2:
            raise ValueError(f"{self.distribution} takes two parameters")
        if self.distribution == "adversarial":
            if len(self.params) != 1:
                raise ValueError("adversarial takes one parameter (scale)")
            if self.params[0] <= 0:
                raise ValueError("adversarial scale must be positive")
        if self.distribution == "uniform" and not self.params[0] < self.params[1]:
            raise ValueError("uniform needs a < b")


def generate(spec: GenSpec) -> AttnProblem:
    """Materialize a problem from a GenSpec.

    gaussian(mu, sigma): every entry is mu + sigma * g.
    uniform(a, b): every entry is a + (b - a) * u.
    adversarial(scale): query and key entries are gaussian scaled so the
    score standard deviation is scale / 2, which drives dot products to
    about +-scale; values stay standard gaussian.
    """
    st = _Stream(spec.seed)
    nq, nk, d = spec.n_queries, spec.n_keys, spec.d
    if spec.distribution == "gaussian":
        mu, sigma = spec.params
        q = mu + sigma * st.gaussian(nq * d)
        k = mu + sigma * st.gaussian(nk * d)
        v = mu + sigma * st.gaussian(nk * d)
    elif spec.distribution == "uniform":
        a, b = spec.params
        q = a + (b - a) * st.uniform(nq * d)
        k = a + (b - a) * st.uniform(nk * d)
        v = a + (b - a) * st.uniform(nk * d)
    else:
        (scale,) = spec.params
        f = math.sqrt(scale / (2.0 * math.sqrt(d)))
        q = f * st.gaussian(nq * d)
        k = f * st.gaussian(nk * d)
        v = st.gaussian(nk * d)
    return AttnProblem(
        queries=q.reshape(nq, d),
        keys=k.reshape(nk, d),
        values=v.reshape(nk, d),
    )


def save_problem(directory, problem: AttnProblem, dtype: str = "fp64") -> None:
    from pathlib import Path

    p = Path(directory)
    p.mkdir(parents=True, exist_ok=True)
    write_tensor(p / "q.atn", problem.queries, dtype)
    write_tensor(p / "k.atn", problem.keys, dtype)
    write_tensor(p / "v.atn", problem.values, dtype)


def load_problem(directory) -> AttnProblem:
    from pathlib import Path

    p = Path(directory)
    q, _ = read_tensor(p / "q.atn")
    k, _ = read_tensor(p / "k.atn")
    v, _ = read_tensor(p / "v.atn")
    return AttnProblem(queries=np.atleast_2d(q), keys=np.atleast_2d(k), values=np.atleast_2d(v))
