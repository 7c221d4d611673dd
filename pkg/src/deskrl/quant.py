"""Bit-exact block-scaled quantization: MXFP8 and the per-token NVFP4 variant.

MXFP8: E4M3 code per element, one E8M0 (power-of-two) scale per 32-element
block along each row. NVFP4-PT: E2M1 nibble per element, one E4M3 scale per
16-element block, plus one float32 scale per row (token). Per-row scaling is
what buys batch invariance and causality: nothing a row stores depends on
any other row.

Everything here is elementwise or row-local numpy in float64 with explicit
round-to-nearest-even against small code tables, so results are bitwise
deterministic across platforms and thread counts. Saturating conversions:
E4M3 has no infinity and tops out at 448; E2M1 tops out at 6; the E8M0 byte
255 is invalid and rejected.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

E4M3_MAX = 448.0
E2M1_MAX = 6.0
MXFP8_BLOCK = 32
NVFP4_BLOCK = 16
# Row amax maps to E4M3_MAX * E2M1_MAX so a full-scale element hits code 6
# at block scale 448 exactly.
NVFP4_ROW_DIVISOR = E4M3_MAX * E2M1_MAX  # 2688


class QuantError(ValueError):
    pass


class Precision(str, Enum):
    EXACT = "exact"
    MXFP8 = "mxfp8"
    NVFP4_PT = "nvfp4_pt"


def _build_e4m3_table() -> np.ndarray:
    """Positive E4M3 values indexed by code 0..126 (code 127 is NaN).

    Bias 7; exponent field 0 holds subnormals m/8 * 2^-6; field 15 keeps
    mantissas 0..6 as normal values up to 448.
    """

    values = np.empty(127, dtype=np.float64)
    for code in range(127):
        ef, m = code >> 3, code & 0x7
        if ef == 0:
            values[code] = (m / 8.0) * 2.0**-6
        else:
            values[code] = (1.0 + m / 8.0) * 2.0 ** (ef - 7)
    return values


def _build_e2m1_table() -> np.ndarray:
    """Positive E2M1 values indexed by code 0..7: 0,.5,1,1.5,2,3,4,6."""

    values = np.empty(8, dtype=np.float64)
    for code in range(8):
        ef, m = code >> 1, code & 0x1
        if ef == 0:
            values[code] = m * 0.5
        else:
            values[code] = (1.0 + m / 2.0) * 2.0 ** (ef - 1)
    return values


_E4M3_VALUES = _build_e4m3_table()
_E2M1_VALUES = _build_e2m1_table()


def _rne_code(magnitudes: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Round-to-nearest table code for nonnegative magnitudes.

    Ties resolve to the even code; code order equals value order in both
    tables, so index parity is mantissa-LSB parity. Values beyond the table
    max saturate to the top code.
    """

    a = np.asarray(magnitudes, dtype=np.float64)
    hi = np.searchsorted(table, a, side="left")
    hi = np.minimum(hi, len(table) - 1)
    lo = np.maximum(hi - 1, 0)
    d_lo = a - table[lo]
    d_hi = table[hi] - a
    # d_hi < 0 happens only past the table max: saturate by taking hi.
    take_hi = (d_hi < d_lo) | ((d_hi == d_lo) & (hi % 2 == 0))
    return np.where(take_hi, hi, lo).astype(np.uint8)


def _check_finite(x: np.ndarray) -> None:
    if not np.isfinite(x).all():
        raise QuantError("input contains NaN or Inf")


def e4m3_encode(x: np.ndarray) -> np.ndarray:
    """Saturating RNE conversion to E4M3 bytes (sign bit 0x80)."""

    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    sign = np.signbit(x).astype(np.uint8) << 7
    return (_rne_code(np.abs(x), _E4M3_VALUES) | sign).astype(np.uint8)


def e4m3_decode(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.uint8)
    mag = codes & 0x7F
    if (mag == 127).any():
        raise QuantError("E4M3 NaN code encountered")
    vals = _E4M3_VALUES[mag]
    return np.where(codes & 0x80, -vals, vals)


def e2m1_encode(x: np.ndarray) -> np.ndarray:
    """Saturating RNE conversion to E2M1 nibbles (sign bit 0x8)."""

    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    sign = np.signbit(x).astype(np.uint8) << 3
    return (_rne_code(np.abs(x), _E2M1_VALUES) | sign).astype(np.uint8)


def e2m1_decode(nibbles: np.ndarray) -> np.ndarray:
    nibbles = np.asarray(nibbles, dtype=np.uint8)
    vals = _E2M1_VALUES[nibbles & 0x7]
    return np.where(nibbles & 0x8, -vals, vals)


def e8m0_decode(byte: np.ndarray) -> np.ndarray:
    b = np.asarray(byte, dtype=np.int64)
    if (b == 255).any():
        raise QuantError("E8M0 byte 255 is invalid")
    if ((b < 0) | (b > 254)).any():
        raise QuantError("E8M0 byte out of range")
    return np.power(2.0, b - 127)


def _pad_columns(x: np.ndarray, block: int) -> np.ndarray:
    r, c = x.shape
    rem = c % block
    if rem == 0:
        return x
    padded = np.zeros((r, c + block - rem), dtype=x.dtype)
    padded[:, :c] = x
    return padded


def _as_matrix(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise QuantError(f"expected a 2-d matrix, got shape {x.shape}")
    _check_finite(x)
    return np.ascontiguousarray(x, dtype=np.float32)


@dataclass(frozen=True)
class MXFP8Tensor:
    """E4M3 codes with one E8M0 scale byte per 32-wide block along C."""

    codes: np.ndarray  # uint8 [R, C_pad]
    scales: np.ndarray  # uint8 [R, C_pad // 32]
    shape: tuple[int, int]

    def __post_init__(self) -> None:
        if self.codes.shape[1] % MXFP8_BLOCK != 0:
            raise QuantError("stored code width must be a multiple of 32")
        if self.scales.shape != (self.codes.shape[0], self.codes.shape[1] // MXFP8_BLOCK):
            raise QuantError("scale shape inconsistent with codes")
        if (self.scales == 255).any():
            raise QuantError("E8M0 byte 255 is invalid")


@dataclass(frozen=True)
class NVFP4Tensor:
    """Packed E2M1 nibbles, E4M3 block-16 scales, float32 per-row scales."""

    codes: np.ndarray  # uint8 [R, C_pad // 2], low nibble = even column
    block_scales: np.ndarray  # uint8 [R, C_pad // 16]
    token_scales: np.ndarray  # float32 [R]
    shape: tuple[int, int]

    def __post_init__(self) -> None:
        c_pad = self.codes.shape[1] * 2
        if c_pad % NVFP4_BLOCK != 0:
            raise QuantError("stored code width must be a multiple of 16")
        if self.block_scales.shape != (self.codes.shape[0], c_pad // NVFP4_BLOCK):
            raise QuantError("block scale shape inconsistent with codes")
        if self.token_scales.shape != (self.codes.shape[0],):
            raise QuantError("token scale shape inconsistent with codes")


def quantize_mxfp8(x: np.ndarray) -> MXFP8Tensor:
    """Per 32-block: scale exponent floor(log2(amax)) - 8 (E8M0-clamped,
    amax=0 -> scale 1 and zero codes); codes = saturating RNE E4M3 of
    x/scale."""

    x32 = _as_matrix(x)
    r, c = x32.shape
    padded = _pad_columns(x32, MXFP8_BLOCK).astype(np.float64)
    blocks = padded.reshape(r, -1, MXFP8_BLOCK)
    amax = np.abs(blocks).max(axis=2)
    # frexp gives amax = m * 2^e with m in [0.5, 1), so floor(log2) = e - 1
    # without any float log imprecision.
    _, exp = np.frexp(amax)
    scale_exp = np.clip(exp - 1 - 8, -127, 127)
    scale_exp = np.where(amax == 0.0, 0, scale_exp)
    scaled = blocks / np.power(2.0, scale_exp)[:, :, None]
    codes = e4m3_encode(scaled).reshape(r, -1)
    scales = (scale_exp + 127).astype(np.uint8)
    return MXFP8Tensor(codes=codes, scales=scales, shape=(r, c))


def dequantize_mxfp8(t: MXFP8Tensor) -> np.ndarray:
    r, c = t.shape
    vals = e4m3_decode(t.codes).reshape(r, -1, MXFP8_BLOCK)
    scales = e8m0_decode(t.scales)
    out = vals * scales[:, :, None]
    return out.reshape(r, -1)[:, :c].astype(np.float32)


def quantize_nvfp4_pt(x: np.ndarray) -> NVFP4Tensor:
    """Per-token NVFP4: s_r = amax(row)/2688 in float32 (0 -> 1), block
    scale b = E4M3-RNE(amax(block)/(6 s_r)), code = E2M1-RNE of
    x/(s_r * decoded(b)). All divisions correctly rounded IEEE."""

    x32 = _as_matrix(x)
    r, c = x32.shape
    if r == 0 or c == 0:
        raise QuantError("empty matrix")
    amax_row = np.abs(x32).max(axis=1)
    s_r = (amax_row / np.float32(NVFP4_ROW_DIVISOR)).astype(np.float32)
    s_r = np.where(s_r == 0.0, np.float32(1.0), s_r)
    padded = _pad_columns(x32, NVFP4_BLOCK).astype(np.float64)
    blocks = padded.reshape(r, -1, NVFP4_BLOCK)
    amax_block = np.abs(blocks).max(axis=2)
    s64 = s_r.astype(np.float64)
    block_scales = e4m3_encode(amax_block / (E2M1_MAX * s64[:, None]))
    b_vals = e4m3_decode(block_scales)
    denom = s64[:, None, None] * b_vals[:, :, None]
    scaled = np.divide(blocks, denom, out=np.zeros_like(blocks), where=denom != 0.0)
    codes = e2m1_encode(scaled).reshape(r, -1)
    packed = (codes[:, 0::2] | (codes[:, 1::2] << 4)).astype(np.uint8)
    return NVFP4Tensor(
        codes=packed,
        block_scales=block_scales,
        token_scales=s_r,
        shape=(r, c),
    )


def dequantize_nvfp4_pt(t: NVFP4Tensor) -> np.ndarray:
    r, c = t.shape
    low = t.codes & 0x0F
    high = t.codes >> 4
    nibbles = np.empty((r, t.codes.shape[1] * 2), dtype=np.uint8)
    nibbles[:, 0::2] = low
    nibbles[:, 1::2] = high
    vals = e2m1_decode(nibbles).reshape(r, -1, NVFP4_BLOCK)
    b_vals = e4m3_decode(t.block_scales)
    s64 = t.token_scales.astype(np.float64)
    out = vals * b_vals[:, :, None] * s64[:, None, None]
    return out.reshape(r, -1)[:, :c].astype(np.float32)


def quantize(x: np.ndarray, precision: Precision) -> MXFP8Tensor | NVFP4Tensor:
    precision = Precision(precision)
    if precision is Precision.MXFP8:
        return quantize_mxfp8(x)
    if precision is Precision.NVFP4_PT:
        return quantize_nvfp4_pt(x)
    raise QuantError(f"no quantized form for precision {precision.value}")


def dequantize(t: MXFP8Tensor | NVFP4Tensor) -> np.ndarray:
    if isinstance(t, MXFP8Tensor):
        return dequantize_mxfp8(t)
    if isinstance(t, NVFP4Tensor):
        return dequantize_nvfp4_pt(t)
    raise QuantError(f"unknown tensor type {type(t)!r}")


def moe_forward_reference(
    token_groups: Sequence[tuple[np.ndarray, np.ndarray]],
    expert_weights: Sequence[np.ndarray],
    precision: Precision,
) -> np.ndarray:
    """Software mirror of a grouped GEMM: per expert, quantize activations
    (per token) and weights, dequantize, multiply in float64, and scatter
    back to the original token order.

    token_groups: one (row_indices, activations[n_e, d]) pair per expert.
    precision=exact bypasses quantization entirely.
    """

    precision = Precision(precision)
    if len(token_groups) != len(expert_weights):
        raise QuantError(
            f"{len(token_groups)} token groups for {len(expert_weights)} experts"
        )
    seen: set[int] = set()
    total = 0
    d_out = None
    for (idx, acts), w in zip(token_groups, expert_weights):
        idx = np.asarray(idx)
        if acts.shape[0] != idx.shape[0]:
            raise QuantError("group index count does not match activation rows")
        if acts.shape[1] != w.shape[0]:
            raise QuantError(
                f"activation dim {acts.shape[1]} does not match weight dim {w.shape[0]}"
            )
        if d_out is None:
            d_out = w.shape[1]
        elif w.shape[1] != d_out:
            raise QuantError("expert output dims differ")
        overlap = seen.intersection(idx.tolist())
        if overlap:
            raise QuantError(f"token groups overlap at rows {sorted(overlap)}")
        seen.update(idx.tolist())
        total += idx.shape[0]
    if seen != set(range(total)):
        raise QuantError("token groups do not cover rows 0..N-1 exactly")

    out = np.zeros((total, d_out), dtype=np.float64)
    for (idx, acts), w in zip(token_groups, expert_weights):
        idx = np.asarray(idx)
        if idx.shape[0] == 0:
            continue
        if precision is Precision.EXACT:
            a_eff = np.asarray(acts, dtype=np.float64)
            w_eff = np.asarray(w, dtype=np.float64)
        else:
            a_eff = dequantize(quantize(acts, precision)).astype(np.float64)
            w_eff = dequantize(quantize(w, precision)).astype(np.float64)
        out[idx] = a_eff @ w_eff
    return out


# ---------------------------------------------------------------------------
# golden fixtures
#
# Fixture file = one JSON header line + concatenated raw sections. The
# header pins shape, format, section lengths and sha256 digests; quant-check
# re-quantizes the stored input and compares section bytes.


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _tensor_sections(t: MXFP8Tensor | NVFP4Tensor) -> dict[str, bytes]:
    if isinstance(t, MXFP8Tensor):
        return {"codes": t.codes.tobytes(), "scales": t.scales.tobytes()}
    return {
        "codes": t.codes.tobytes(),
        "block_scales": t.block_scales.tobytes(),
        "token_scales": t.token_scales.astype("<f4").tobytes(),
    }


def write_fixture(path: str | Path, name: str, fmt: Precision, x: np.ndarray) -> None:
    """Quantize x and store input + quantized sections under a JSON header."""

    fmt = Precision(fmt)
    x32 = _as_matrix(x)
    t = quantize(x32, fmt)
    sections: dict[str, bytes] = {"input": x32.astype("<f4").tobytes()}
    sections.update(_tensor_sections(t))
    header = {
        "name": name,
        "format": fmt.value,
        "shape": list(x32.shape),
        "sections": {k: len(v) for k, v in sections.items()},
        "digests": {k: _digest(v) for k, v in sections.items()},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        for data in sections.values():
            fh.write(data)


@dataclass(frozen=True)
class FixtureReport:
    name: str
    format: str
    ok: bool
    mismatches: tuple[str, ...]


def verify_fixture(path: str | Path) -> FixtureReport:
    """Re-quantize the stored input; every section must match byte-exactly."""

    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        sections: dict[str, bytes] = {}
        for key, length in header["sections"].items():
            data = fh.read(length)
            if len(data) != length:
                return FixtureReport(header["name"], header["format"], False, (f"{key}: truncated",))
            sections[key] = data
    mismatches: list[str] = []
    for key, data in sections.items():
        if _digest(data) != header["digests"][key]:
            mismatches.append(f"{key}: stored digest mismatch")
    shape = tuple(header["shape"])
    x = np.frombuffer(sections["input"], dtype="<f4").reshape(shape)
    try:
        t = quantize(x, Precision(header["format"]))
    except QuantError as exc:
        # A corrupted input section can decode to NaN/Inf; report it as a
        # failure instead of letting the checker crash mid-directory.
        mismatches.append(f"input: not quantizable ({exc})")
    else:
        for key, data in _tensor_sections(t).items():
            if data != sections[key]:
                mismatches.append(f"{key}: requantization differs")
    return FixtureReport(header["name"], header["format"], not mismatches, tuple(mismatches))


def default_fixture_dir() -> Path:
    return Path(__file__).parent / "data" / "quant"


def _fixture_inputs() -> list[tuple[str, Precision, np.ndarray]]:
    rng = np.random.Generator(np.random.Philox(key=np.array([2688, 448], dtype=np.uint64)))
    normal_a = rng.normal(size=(8, 80)).astype(np.float32) * 3.0
    normal_b = rng.normal(size=(6, 40)).astype(np.float32)
    special = np.zeros((4, 64), dtype=np.float32)
    special[0, :] = 1.0
    special[1, 0] = 448.0
    special[2, 0] = 2688.0
    special[2, 16] = 6.0
    special[2, 17] = 2.5
    special[3, :] = 0.0
    wide = (rng.normal(size=(5, 96)) * np.logspace(-3, 3, 96)).astype(np.float32)
    return [
        ("mxfp8_normal", Precision.MXFP8, normal_a),
        ("mxfp8_special", Precision.MXFP8, special),
        ("mxfp8_wide_range", Precision.MXFP8, wide),
        ("nvfp4_normal", Precision.NVFP4_PT, normal_b),
        ("nvfp4_special", Precision.NVFP4_PT, special),
        ("nvfp4_wide_range", Precision.NVFP4_PT, wide),
    ]


GEMM_CALIBRATION = {"seed": 64, "n": 64, "d": 64, "d_out": 64, "experts": 4}


def gemm_reference_errors(margin: float = 1.0) -> dict[str, float]:
    """Max relative output error of each quantized path on the calibration
    problem (seeded N(0,1), 64x64, 4 experts)."""

    cal = GEMM_CALIBRATION
    rng = np.random.Generator(
        np.random.Philox(key=np.array([cal["seed"], 7], dtype=np.uint64))
    )
    x = rng.normal(size=(cal["n"], cal["d"])).astype(np.float32)
    weights = [
        rng.normal(size=(cal["d"], cal["d_out"])).astype(np.float32)
        for _ in range(cal["experts"])
    ]
    assignment = rng.integers(0, cal["experts"], size=cal["n"])
    groups = [
        (np.flatnonzero(assignment == e), x[assignment == e]) for e in range(cal["experts"])
    ]
    exact = moe_forward_reference(groups, weights, Precision.EXACT)
    scale = np.abs(exact).max()
    errors: dict[str, float] = {}
    for precision in (Precision.MXFP8, Precision.NVFP4_PT):
        approx = moe_forward_reference(groups, weights, precision)
        errors[precision.value] = float(np.abs(approx - exact).max() / scale) * margin
    return errors


def build_default_fixtures(directory: str | Path | None = None) -> list[Path]:
    """Write the committed golden fixtures (maintainer entry point)."""

    directory = Path(directory) if directory is not None else default_fixture_dir()
    directory.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for name, fmt, x in _fixture_inputs():
        path = directory / f"{name}.bin"
        write_fixture(path, name, fmt, x)
        written.append(path)
    # GEMM calibration thresholds: observed error x 1.05 headroom for BLAS
    # summation-order differences across platforms.
    errors = gemm_reference_errors(margin=1.05)
    cal_path = directory / "gemm_calibration.json"
    with open(cal_path, "w", encoding="utf-8") as fh:
        json.dump({**GEMM_CALIBRATION, "thresholds": errors}, fh, indent=2)
        fh.write("\n")
    written.append(cal_path)
    return written


def check_fixture_dir(directory: str | Path | None = None) -> list[FixtureReport]:
    """Verify every .bin fixture plus the GEMM calibration thresholds."""

    directory = Path(directory) if directory is not None else default_fixture_dir()
    reports = [verify_fixture(p) for p in sorted(directory.glob("*.bin"))]
    cal_path = directory / "gemm_calibration.json"
    if cal_path.exists():
        with open(cal_path, "r", encoding="utf-8") as fh:
            cal = json.load(fh)
        errors = gemm_reference_errors()
        ok = (
            0.0 < errors[Precision.MXFP8.value] <= cal["thresholds"][Precision.MXFP8.value]
            and errors[Precision.MXFP8.value]
            < errors[Precision.NVFP4_PT.value]
            <= cal["thresholds"][Precision.NVFP4_PT.value]
        )
        mismatches = () if ok else (f"observed errors {errors} vs thresholds {cal['thresholds']}",)
        reports.append(FixtureReport("gemm_calibration", "gemm", ok, mismatches))
    return reports
