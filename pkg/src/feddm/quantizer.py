"""Per-tensor affine quantization of parameter vectors.

A tensor W maps onto integer levels

    codes = round((clamp(W) - lo) / delta),   delta = (hi - lo) / (2^b - 1),

and reconstructs as codes * delta + lo.  By default (lo, hi) is the raw value
range; calibration shrinks it symmetrically by a clip ratio chosen to minimize
the squared reconstruction error.  Rounding is half-away-from-zero so codes
are bit-identical across platforms.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .denoiser import ParamVector, TensorSpec
from .diffusion import NoiseSchedule, reverse_step

CLIP_RATIOS = (1.0, 0.999, 0.99, 0.97, 0.95, 0.90)

_QUANT_FORMAT = "feddm-quant"
_PREFIX_BYTES = 8


def _round_half_away_from_zero(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    """Integer codes plus the affine grid (delta, offset) and original shape."""

    codes: np.ndarray
    bitwidth: int
    delta: float
    offset: float
    shape: tuple[int, ...]

    def __post_init__(self) -> None:
        codes = np.asarray(self.codes, dtype=np.int64)
        if not (1 <= self.bitwidth <= 32):
            raise ValueError(f"bitwidth must be in [1, 32], got {self.bitwidth}")
        levels = (1 << self.bitwidth) - 1
        if codes.size and (codes.min() < 0 or codes.max() > levels):
            raise ValueError(f"codes out of range [0, {levels}]")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.delta == 0 and codes.size and codes.max() != 0:
            raise ValueError("delta 0 requires all-zero codes")
        if codes.size != int(np.prod(self.shape, dtype=np.int64)):
            raise ValueError("codes do not match the declared shape")
        if codes.flags.writeable:
            codes = codes.copy()
            codes.flags.writeable = False
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "shape", tuple(self.shape))

    @property
    def count(self) -> int:
        return int(self.codes.size)

    @property
    def code_bytes(self) -> int:
        return (self.count * self.bitwidth + 7) // 8


def quantize(values, bitwidth: int, clip: Optional[tuple[float, float]] = None) -> QuantizedTensor:
    """Quantize a tensor onto a fresh grid spanning its (possibly clipped) range."""
    w = np.asarray(values, dtype=float)
    if w.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    if not np.all(np.isfinite(w)):
        raise ValueError("tensor has non-finite entries")
    if not (1 <= bitwidth <= 32):
        raise ValueError(f"bitwidth must be in [1, 32], got {bitwidth}")
    if clip is None:
        lo, hi = float(w.min()), float(w.max())
    else:
        lo, hi = float(clip[0]), float(clip[1])
        if lo > hi:
            raise ValueError(f"clip range is empty: ({lo}, {hi})")
    levels = (1 << bitwidth) - 1
    flat = np.clip(w.reshape(-1), lo, hi)
    span = hi - lo
    if span == 0.0:
        codes = np.zeros(flat.shape, dtype=np.int64)
        delta = 0.0
    else:
        delta = span / levels
        codes = _round_half_away_from_zero((flat - lo) / delta)
        codes = np.clip(codes, 0, levels).astype(np.int64)
    return QuantizedTensor(
        codes=codes, bitwidth=bitwidth, delta=delta, offset=lo, shape=w.shape
    )


def requantize(values, like: QuantizedTensor) -> QuantizedTensor:
    """Quantize onto an existing grid (delta, offset, bitwidth) instead of a fresh range."""
    w = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(w)):
        raise ValueError("tensor has non-finite entries")
    levels = (1 << like.bitwidth) - 1
    if like.delta == 0.0:
        codes = np.zeros(w.size, dtype=np.int64)
    else:
        codes = _round_half_away_from_zero((w.reshape(-1) - like.offset) / like.delta)
        codes = np.clip(codes, 0, levels).astype(np.int64)
    return QuantizedTensor(
        codes=codes,
        bitwidth=like.bitwidth,
        delta=like.delta,
        offset=like.offset,
        shape=w.shape,
    )


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Reconstruct codes * delta + offset in the original shape."""
    return (q.codes * q.delta + q.offset).reshape(q.shape)


def quant_error(values, bitwidth: int, clip: Optional[tuple[float, float]] = None) -> float:
    """Squared reconstruction error ||W - dequantize(quantize(W))||^2."""
    w = np.asarray(values, dtype=float)
    resid = w - dequantize(quantize(w, bitwidth, clip))
    return float(np.sum(resid * resid))


@dataclass(frozen=True, eq=False)
class CalibrationParams:
    """Per-tensor clip ranges chosen by the ratio grid search.

    ``sample_outputs`` holds the denoiser outputs recorded while probing the
    sampling process; they feed the run log's activation-range diagnostics.
    """

    ranges: dict[str, tuple[float, float]]
    clip_ratios: dict[str, float]
    sample_outputs: Optional[np.ndarray] = None


def calibrate(
    theta: ParamVector,
    model: Callable[[np.ndarray, int], np.ndarray],
    sched: NoiseSchedule,
    n_samples: int,
    bitwidth: int,
    seed: int,
    dim: Optional[int] = None,
) -> CalibrationParams:
    """Pick per-tensor clip ranges minimizing squared error on the weights.

    Also runs the reverse sampler on ``n_samples`` points, recording the model
    output for each at a timestep drawn uniformly from [1, T]; these probes are
    returned for activation-range diagnostics and do not alter weight scales.
    """
    if n_samples < 1:
        raise ValueError(f"need at least one probe sample, got {n_samples}")
    ranges: dict[str, tuple[float, float]] = {}
    ratios: dict[str, float] = {}
    for spec, w in theta.tensors():
        lo, hi = float(w.min()), float(w.max())
        best_clip, best_ratio = (lo, hi), 1.0
        best_err = quant_error(w, bitwidth, (lo, hi))
        center = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo)
        for ratio in CLIP_RATIOS[1:]:
            clip = (max(lo, center - ratio * half), min(hi, center + ratio * half))
            err = quant_error(w, bitwidth, clip)
            if err < best_err:
                best_clip, best_ratio, best_err = clip, ratio, err
        ranges[spec.name] = best_clip
        ratios[spec.name] = best_ratio
    outputs = _probe_sampler(model, sched, n_samples, seed, dim)
    return CalibrationParams(ranges=ranges, clip_ratios=ratios, sample_outputs=outputs)


def _probe_sampler(model, sched: NoiseSchedule, n: int, seed: int, dim: Optional[int]) -> np.ndarray:
    if dim is None:
        dim = getattr(model, "data_dim", None)
    if dim is None:
        raise ValueError("pass dim= or a model handle exposing data_dim")
    rng = np.random.default_rng(seed)
    probe_ts = rng.integers(1, sched.timesteps + 1, size=n)
    x = rng.standard_normal((n, dim))
    outputs = np.zeros((n, dim))
    for t in range(sched.timesteps, 0, -1):
        eps_hat = np.asarray(model(x, t), dtype=float)
        hits = probe_ts == t
        if np.any(hits):
            outputs[hits] = eps_hat[hits]
        z = rng.standard_normal((n, dim)) if t > 1 else np.zeros((n, dim))
        x = reverse_step(x, t, eps_hat, sched, z)
    return outputs


@dataclass(frozen=True, eq=False)
class QuantizedModel:
    """Quantized tensors matching a ParamVector layout, with exact byte accounting."""

    layout: tuple[TensorSpec, ...]
    tensors: tuple[QuantizedTensor, ...]
    bitwidth: int

    def __post_init__(self) -> None:
        if len(self.layout) != len(self.tensors):
            raise ValueError("layout and tensors must have equal length")
        for spec, q in zip(self.layout, self.tensors):
            if q.shape != spec.shape:
                raise ValueError(f"tensor {spec.name} shape mismatch")
            if q.bitwidth != self.bitwidth:
                raise ValueError(f"tensor {spec.name} bitwidth mismatch")
        object.__setattr__(self, "layout", tuple(self.layout))
        object.__setattr__(self, "tensors", tuple(self.tensors))

    @property
    def code_bytes(self) -> int:
        """Packed code payload: sum of ceil(count * b / 8) over tensors."""
        return sum(q.code_bytes for q in self.tensors)

    @property
    def header_bytes(self) -> int:
        return _PREFIX_BYTES + len(_header_blob(self))

    @property
    def payload_bytes(self) -> int:
        return self.header_bytes + self.code_bytes


def quantize_model(
    theta: ParamVector, bitwidth: int, calib: Optional[CalibrationParams] = None
) -> QuantizedModel:
    """Quantize every tensor of a ParamVector, honoring calibrated clip ranges."""
    tensors = []
    for spec, w in theta.tensors():
        clip = calib.ranges.get(spec.name) if calib is not None else None
        tensors.append(quantize(w, bitwidth, clip))
    return QuantizedModel(layout=theta.layout, tensors=tuple(tensors), bitwidth=bitwidth)


def dequantize_model(q: QuantizedModel) -> ParamVector:
    flat = (
        np.concatenate([dequantize(t).reshape(-1) for t in q.tensors])
        if q.tensors
        else np.zeros(0)
    )
    return ParamVector(values=flat, layout=q.layout)


def payload_size(q: QuantizedModel) -> int:
    """Exact serialized size in bytes: header plus bit-packed codes."""
    return q.payload_bytes


def _header_blob(q: QuantizedModel) -> bytes:
    header = {
        "format": _QUANT_FORMAT,
        "version": 1,
        "bitwidth": q.bitwidth,
        "tensors": [
            {
                "name": spec.name,
                "shape": list(spec.shape),
                "start": spec.offset,
                "delta": t.delta,
                "offset": t.offset,
            }
            for spec, t in zip(q.layout, q.tensors)
        ],
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode()


def _pack_codes(codes: np.ndarray, bitwidth: int) -> bytes:
    """LSB-first bit packing at the exact code width."""
    if codes.size == 0:
        return b""
    bits = (codes[:, None].astype(np.uint64) >> np.arange(bitwidth, dtype=np.uint64)) & 1
    return np.packbits(bits.astype(np.uint8).reshape(-1), bitorder="little").tobytes()


def _unpack_codes(blob: bytes, count: int, bitwidth: int) -> np.ndarray:
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8), bitorder="little")
    bits = bits[: count * bitwidth].reshape(count, bitwidth).astype(np.uint64)
    weights = np.uint64(1) << np.arange(bitwidth, dtype=np.uint64)
    return (bits * weights).sum(axis=1).astype(np.int64)


def save_quantized(path: str | Path, q: QuantizedModel) -> None:
    """Write the wire format: u64-LE length prefix, JSON header, packed codes."""
    blob = _header_blob(q)
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for t in q.tensors:
            f.write(_pack_codes(t.codes, t.bitwidth))


def load_quantized(path: str | Path) -> QuantizedModel:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX_BYTES:
        raise ValueError(f"truncated quantized checkpoint: {path}")
    (length,) = struct.unpack("<Q", raw[:_PREFIX_BYTES])
    header = json.loads(raw[_PREFIX_BYTES : _PREFIX_BYTES + length].decode())
    if header.get("format") != _QUANT_FORMAT:
        raise ValueError(f"not a quantized checkpoint: {path}")
    bitwidth = int(header["bitwidth"])
    layout = []
    tensors = []
    cursor = _PREFIX_BYTES + length
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        spec = TensorSpec(entry["name"], shape, int(entry["start"]))
        count = spec.count
        nbytes = (count * bitwidth + 7) // 8
        codes = _unpack_codes(raw[cursor : cursor + nbytes], count, bitwidth)
        cursor += nbytes
        layout.append(spec)
        tensors.append(
            QuantizedTensor(
                codes=codes,
                bitwidth=bitwidth,
                delta=float(entry["delta"]),
                offset=float(entry["offset"]),
                shape=shape,
            )
        )
    return QuantizedModel(layout=tuple(layout), tensors=tuple(tensors), bitwidth=bitwidth)
