"""Software emulation of small floating-point formats on a float64 carrier.

Formats
-------
    name      bits  exp  mant  bias  special-value behavior
    fp64      64    11   52    1023  native; rounding is the identity
    bf16      16    8    7     127   IEEE-style: all-ones exponent encodes
                                     inf (mantissa 0) and NaN (mantissa
                                     nonzero); overflow rounds to +-inf
    fp8e4m3   8     4    3     7     no infinity encodings: the all-ones
                                     exponent keeps encoding normal values
                                     except mantissa 0b111, which is NaN;
                                     max finite is 448 and overflow
                                     saturates there

An emulated value is an ordinary float64 that happens to be exactly
representable in its target format, so fp64 arithmetic on carriers is
exact whenever the true result fits. Every emulated operation therefore
follows one rule: compute in float64, then round the result back to the
format with round-to-nearest-even. Subnormals are kept in all formats.
Division by zero follows the format's own convention: +-inf where the
format has infinities, NaN where it does not (and 0/0 is always NaN).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class FloatFormat:
    """Bit-level description of a binary floating-point format."""

    name: str
    exponent_bits: int
    mantissa_bits: int
    bias: int
    has_infinity: bool = True

    # derived limits, filled by __post_init__
    min_normal_exp: int = field(init=False, repr=False)
    max_finite: float = field(init=False, repr=False)
    min_positive: float = field(init=False, repr=False)

    def __post_init__(self) -> None:
        emin = 1 - self.bias
        if self.has_infinity:
            # all-ones exponent is reserved, so the top normal binade is one below
            top = ((1 << self.exponent_bits) - 2) - self.bias
            hi = math.ldexp(2.0 - 2.0 ** -self.mantissa_bits, top)
        else:
            # all-ones exponent still encodes values; only the all-ones
            # mantissa slot in that binade is NaN
            top = ((1 << self.exponent_bits) - 1) - self.bias
            frac = ((1 << self.mantissa_bits) - 2) / (1 << self.mantissa_bits)
            hi = math.ldexp(1.0 + frac, top)
        object.__setattr__(self, "min_normal_exp", emin)
        object.__setattr__(self, "max_finite", hi)
        object.__setattr__(self, "min_positive", math.ldexp(1.0, emin - self.mantissa_bits))

    @property
    def total_bits(self) -> int:
        return 1 + self.exponent_bits + self.mantissa_bits


FP64 = FloatFormat("fp64", 11, 52, 1023)
BF16 = FloatFormat("bf16", 8, 7, 127)
FP8E4M3 = FloatFormat("fp8e4m3", 4, 3, 7, has_infinity=False)

FORMATS = {f.name: f for f in (FP64, BF16, FP8E4M3)}


def get_format(name: str) -> FloatFormat:
    try:
        return FORMATS[name]
    except KeyError:
        raise ValueError(f"unknown float format {name!r}; expected one of {sorted(FORMATS)}") from None


def round_to_format(x: float, fmt: FloatFormat) -> float:
    """Round a float64 to the nearest value representable in fmt.

    Round-to-nearest-even, with subnormal support. Overflow rounds to
    +-inf for formats with infinities (at or beyond max_finite plus half
    an ulp of the top binade) and saturates to +-max_finite otherwise.
    Idempotent: rounding an already-representable value returns it
    unchanged, including signed zeros and NaN.
    """
    if fmt.name == "fp64":
        return float(x)
    x = float(x)
    if math.isnan(x) or x == 0.0:
        return x
    if math.isinf(x):
        return x if fmt.has_infinity else math.nan
    _, e = math.frexp(x)  # |x| in [2**(e-1), 2**e)
    quant = max(e - 1, fmt.min_normal_exp) - fmt.mantissa_bits
    try:
        y = math.ldexp(round(math.ldexp(x, -quant)), quant)
    except OverflowError:  # rescaling past the float64 range: far beyond max_finite
        y = math.copysign(math.inf, x)
    if y == 0.0:
        return math.copysign(0.0, x)
    if abs(y) > fmt.max_finite:
        y = math.copysign(math.inf if fmt.has_infinity else fmt.max_finite, y)
    return y


def round_array(x: np.ndarray, fmt: FloatFormat) -> np.ndarray:
    """Vectorized round_to_format over a float64 array."""
    x = np.asarray(x, dtype=np.float64)
    if fmt.name == "fp64":
        return x
    out = x.copy()
    flat = out.reshape(-1)
    src = x.reshape(-1)
    finite = np.isfinite(src) & (src != 0.0)
    if finite.any():
        xf = src[finite]
        _, e = np.frexp(xf)
        quant = np.maximum(e - 1, fmt.min_normal_exp) - fmt.mantissa_bits
        with np.errstate(over="ignore"):
            y = np.ldexp(np.rint(np.ldexp(xf, -quant)), quant)
        over = np.abs(y) > fmt.max_finite
        if over.any():
            cap = np.inf if fmt.has_infinity else fmt.max_finite
            y[over] = np.copysign(cap, y[over])
        flat[finite] = y
    if not fmt.has_infinity:
        flat[np.isinf(src)] = np.nan
    return out


@dataclass(frozen=True)
class EmulatedScalar:
    """A float64 carrier constrained to be exactly representable in fmt."""

    value: float
    fmt: FloatFormat

    def __post_init__(self) -> None:
        v = self.value
        r = round_to_format(v, self.fmt)
        ok = (math.isnan(v) and math.isnan(r)) or r == v
        if not ok:
            raise ValueError(f"{v!r} is not representable in {self.fmt.name}")

    @classmethod
    def from_float(cls, x: float, fmt: FloatFormat) -> "EmulatedScalar":
        return cls(round_to_format(x, fmt), fmt)


def _pair_format(a: EmulatedScalar, b: EmulatedScalar) -> FloatFormat:
    if a.fmt is not b.fmt and a.fmt.name != b.fmt.name:
        raise ValueError(f"format mismatch: {a.fmt.name} vs {b.fmt.name}")
    return a.fmt


def emulated_add(a: EmulatedScalar, b: EmulatedScalar) -> EmulatedScalar:
    fmt = _pair_format(a, b)
    return EmulatedScalar(round_to_format(a.value + b.value, fmt), fmt)


def emulated_sub(a: EmulatedScalar, b: EmulatedScalar) -> EmulatedScalar:
    fmt = _pair_format(a, b)
    return EmulatedScalar(round_to_format(a.value - b.value, fmt), fmt)


def emulated_mul(a: EmulatedScalar, b: EmulatedScalar) -> EmulatedScalar:
    fmt = _pair_format(a, b)
    return EmulatedScalar(round_to_format(a.value * b.value, fmt), fmt)


def emulated_div(a: EmulatedScalar, b: EmulatedScalar) -> EmulatedScalar:
    fmt = _pair_format(a, b)
    num, den = a.value, b.value
    if den == 0.0:
        if num == 0.0 or math.isnan(num):
            q = math.nan
        else:
            sign = math.copysign(1.0, num) * math.copysign(1.0, den)
            q = math.copysign(math.inf, sign)
    else:
        q = num / den
    return EmulatedScalar(round_to_format(q, fmt), fmt)


def decode_bits(code: int, fmt: FloatFormat) -> float:
    """Decode an unsigned bit pattern of the format into its float64 value."""
    e_bits, m_bits = fmt.exponent_bits, fmt.mantissa_bits
    if not 0 <= code < (1 << fmt.total_bits):
        raise ValueError(f"code {code:#x} out of range for {fmt.name}")
    sign = (code >> (e_bits + m_bits)) & 1
    e_field = (code >> m_bits) & ((1 << e_bits) - 1)
    m_field = code & ((1 << m_bits) - 1)
    e_max = (1 << e_bits) - 1
    if e_field == e_max:
        if fmt.has_infinity:
            if m_field == 0:
                return -math.inf if sign else math.inf
            return math.nan
        if m_field == (1 << m_bits) - 1:
            return math.nan
    if e_field == 0:
        mag = math.ldexp(m_field, fmt.min_normal_exp - m_bits)
    else:
        mag = math.ldexp((1 << m_bits) + m_field, e_field - fmt.bias - m_bits)
    return -mag if sign else mag


def encode_bits(x: float, fmt: FloatFormat) -> int:
    """Encode an exactly-representable value into the format's bit pattern.

    NaN encodes to the canonical quiet pattern (sign 0). Values that are
    not exactly representable raise ValueError.
    """
    e_bits, m_bits = fmt.exponent_bits, fmt.mantissa_bits
    e_max = (1 << e_bits) - 1
    if math.isnan(x):
        if fmt.has_infinity:
            return (e_max << m_bits) | (1 << (m_bits - 1))
        return (e_max << m_bits) | ((1 << m_bits) - 1)
    sign = 1 if math.copysign(1.0, x) < 0 else 0
    if math.isinf(x):
        if not fmt.has_infinity:
            raise ValueError(f"{fmt.name} has no infinity encoding")
        return (sign << (e_bits + m_bits)) | (e_max << m_bits)
    if x == 0.0:
        return sign << (e_bits + m_bits)
    mag = abs(x)
    _, e = math.frexp(mag)  # mag in [2**(e-1), 2**e)
    e_unb = e - 1
    if e_unb < fmt.min_normal_exp:
        f = math.ldexp(mag, m_bits - fmt.min_normal_exp)
        e_field = 0
    else:
        f = math.ldexp(mag, m_bits - e_unb) - (1 << m_bits)
        e_field = e_unb + fmt.bias
    if f != int(f) or not 0 <= int(f) < (1 << m_bits) or not 0 <= e_field <= e_max:
        raise ValueError(f"{x!r} is not representable in {fmt.name}")
    code = (sign << (e_bits + m_bits)) | (e_field << m_bits) | int(f)
    # guard against landing on a special slot (e.g. 512 in fp8e4m3)
    check = decode_bits(code, fmt)
    if check != x:
        raise ValueError(f"{x!r} is not representable in {fmt.name}")
    return code


@dataclass(frozen=True)
class Precision:
    """Runtime rounding context handed to the kernels.

    native fp64 is a true no-op so the full-precision paths pay nothing.
    wide_accumulate switches dot products from element-by-element rounded
    accumulation to a single float64 accumulation rounded once at the end.
    """

    fmt: FloatFormat = FP64
    wide_accumulate: bool = False

    @property
    def native(self) -> bool:
        return self.fmt.name == "fp64"

    def round(self, x):
        if self.fmt.name == "fp64":
            return x
        if isinstance(x, np.ndarray):
            return round_array(x, self.fmt)
        return round_to_format(float(x), self.fmt)


PREC_FP64 = Precision()
