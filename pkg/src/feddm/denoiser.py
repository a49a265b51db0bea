"""Dense noise-prediction network with hand-derived gradients.

Trainable parameters live in a flat float64 vector with an explicit tensor
layout, so averaging, quantization, and serialization all operate on one
representation.  The network consumes a data point concatenated with a time
embedding (normalized t/T plus sinusoidal pairs) and is trained on the mean
squared error between predicted and injected noise.  Gradients are exact
analytic backpropagation; the tests check them against central finite
differences before anything downstream trusts them.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .diffusion import NoiseSchedule, forward_sample

ACTIVATIONS = ("tanh", "relu")

_CHECKPOINT_FORMAT = "feddm-params"


@dataclass(frozen=True)
class TensorSpec:
    """Name, shape, and flat offset of one tensor inside a ParamVector."""

    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def count(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Immutable flat parameter vector plus the layout describing its tensors."""

    values: np.ndarray
    layout: tuple[TensorSpec, ...]

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError(f"values must be 1-d, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("parameter values must all be finite")
        expected = 0
        for spec in self.layout:
            if spec.offset != expected:
                raise ValueError(
                    f"layout offsets must tile [0, P): {spec.name} starts at "
                    f"{spec.offset}, expected {expected}"
                )
            expected += spec.count
        if expected != values.shape[0]:
            raise ValueError(
                f"layout covers {expected} values but vector holds {values.shape[0]}"
            )
        if values.flags.writeable:
            values = values.copy()
            values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", tuple(self.layout))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    @property
    def size(self) -> int:
        return int(self.values.shape[0])

    def tensor(self, name: str) -> np.ndarray:
        for spec in self.layout:
            if spec.name == name:
                return self.values[spec.offset : spec.offset + spec.count].reshape(
                    spec.shape
                )
        raise KeyError(name)

    def tensors(self) -> Iterator[tuple[TensorSpec, np.ndarray]]:
        for spec in self.layout:
            yield spec, self.values[spec.offset : spec.offset + spec.count].reshape(
                spec.shape
            )

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values=values, layout=self.layout)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout


def _require_same_layout(a: ParamVector, b: ParamVector) -> None:
    if not a.same_layout(b):
        raise ValueError("parameter vectors have different layouts")


@dataclass(frozen=True)
class MlpDenoiser:
    """Architecture of the dense denoiser.

    ``layer_dims`` lists every layer width including input and output; the
    input width must equal data dim + time-embedding dim and the output width
    must equal the data dim.
    """

    layer_dims: tuple[int, ...]
    activation: str = "tanh"
    time_features: int = 4

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 3:
            raise ValueError("need at least one hidden layer")
        if any(d < 1 for d in dims):
            raise ValueError(f"layer dims must be positive: {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(
                f"activation must be one of {ACTIVATIONS}, got {self.activation!r}"
            )
        if self.time_features < 0:
            raise ValueError("time_features must be >= 0")
        if dims[0] != dims[-1] + self.time_dim:
            raise ValueError(
                f"input width {dims[0]} must equal data dim {dims[-1]} plus "
                f"time-embedding dim {self.time_dim}"
            )

    @property
    def time_dim(self) -> int:
        return 1 + 2 * self.time_features

    @property
    def data_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def num_params(self) -> int:
        return sum(
            fi * fo + fo for fi, fo in zip(self.layer_dims[:-1], self.layer_dims[1:])
        )

    @classmethod
    def for_data(
        cls,
        data_dim: int,
        hidden: tuple[int, ...] = (64, 64),
        activation: str = "tanh",
        time_features: int = 4,
    ) -> "MlpDenoiser":
        time_dim = 1 + 2 * time_features
        return cls((data_dim + time_dim, *hidden, data_dim), activation, time_features)

    def layout(self) -> tuple[TensorSpec, ...]:
        specs: list[TensorSpec] = []
        offset = 0
        for i, (fan_in, fan_out) in enumerate(
            zip(self.layer_dims[:-1], self.layer_dims[1:])
        ):
            specs.append(TensorSpec(f"w{i}", (fan_in, fan_out), offset))
            offset += fan_in * fan_out
            specs.append(TensorSpec(f"b{i}", (fan_out,), offset))
            offset += fan_out
        return tuple(specs)


@dataclass(frozen=True, eq=False)
class TrainBatch:
    """Clean points, timestep indices, and the noise used to corrupt them."""

    x0s: np.ndarray
    ts: np.ndarray
    noises: np.ndarray

    def __post_init__(self) -> None:
        x0s = np.asarray(self.x0s, dtype=float)
        ts = np.asarray(self.ts, dtype=np.int64)
        noises = np.asarray(self.noises, dtype=float)
        if x0s.ndim != 2 or noises.ndim != 2 or ts.ndim != 1:
            raise ValueError("x0s/noises must be (B, d) and ts must be (B,)")
        if not (len(x0s) == len(ts) == len(noises)):
            raise ValueError("batch fields must have equal lengths")
        if x0s.shape != noises.shape:
            raise ValueError("x0s and noises must have the same shape")
        if len(ts) and ts.min() < 1:
            raise ValueError("timesteps must be >= 1")
        object.__setattr__(self, "x0s", x0s)
        object.__setattr__(self, "ts", ts)
        object.__setattr__(self, "noises", noises)

    def __len__(self) -> int:
        return int(self.ts.shape[0])


def init_params(arch: MlpDenoiser, seed: int) -> ParamVector:
    """Glorot-uniform weights, zero biases; identical output for equal seeds."""
    rng = np.random.default_rng(seed)
    chunks: list[np.ndarray] = []
    for fan_in, fan_out in zip(arch.layer_dims[:-1], arch.layer_dims[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return ParamVector(np.concatenate(chunks), arch.layout())


def _time_embedding(arch: MlpDenoiser, t, batch: int, timesteps: int) -> np.ndarray:
    u = np.broadcast_to(np.asarray(t, dtype=float), (batch,)) / float(timesteps)
    cols = [u]
    for j in range(arch.time_features):
        angle = (2.0**j) * np.pi * u
        cols.append(np.sin(angle))
        cols.append(np.cos(angle))
    return np.stack(cols, axis=1)


def _layers(arch: MlpDenoiser, theta: ParamVector):
    for i in range(arch.num_layers):
        yield theta.tensor(f"w{i}"), theta.tensor(f"b{i}")


def _forward(
    arch: MlpDenoiser, theta: ParamVector, x: np.ndarray, t, sched: NoiseSchedule
):
    """Forward pass returning the prediction plus per-layer caches for backprop."""
    emb = _time_embedding(arch, t, x.shape[0], sched.timesteps)
    inputs = [np.concatenate([x, emb], axis=1)]
    preacts: list[np.ndarray] = []
    for i, (w, b) in enumerate(_layers(arch, theta)):
        z = inputs[-1] @ w + b
        preacts.append(z)
        if i < arch.num_layers - 1:
            h = np.tanh(z) if arch.activation == "tanh" else np.maximum(z, 0.0)
            inputs.append(h)
    return preacts[-1], inputs, preacts


def predict_noise(
    arch: MlpDenoiser, theta: ParamVector, x, t, sched: NoiseSchedule
) -> np.ndarray:
    """Deterministic forward pass; accepts one point (d,) or a batch (B, d)."""
    if theta.layout != arch.layout():
        raise ValueError("parameter layout does not match the architecture")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != arch.data_dim:
        raise ValueError(f"expected points of dim {arch.data_dim}, got shape {x.shape}")
    out, _, _ = _forward(arch, theta, x, t, sched)
    return out[0] if single else out


def loss_and_grad(
    arch: MlpDenoiser, theta: ParamVector, batch: TrainBatch, sched: NoiseSchedule
) -> tuple[float, ParamVector]:
    """Mean squared noise-prediction error over the batch and its exact gradient.

    loss = (1/B) sum_i ||eps_hat(x_t_i, t_i) - noise_i||^2 with
    x_t_i = forward_sample(x0_i, t_i, noise_i).
    """
    n = len(batch)
    if n == 0:
        raise ValueError("batch must be nonempty")
    if theta.layout != arch.layout():
        raise ValueError("parameter layout does not match the architecture")
    if batch.x0s.shape[1] != arch.data_dim:
        raise ValueError(
            f"expected points of dim {arch.data_dim}, got shape {batch.x0s.shape}"
        )
    x_t = forward_sample(batch.x0s, batch.ts, batch.noises, sched)
    eps_hat, inputs, preacts = _forward(arch, theta, x_t, batch.ts, sched)
    resid = eps_hat - batch.noises
    loss = float(np.sum(resid * resid) / n)

    grads: dict[str, np.ndarray] = {}
    g = (2.0 / n) * resid
    for i in reversed(range(arch.num_layers)):
        w = theta.tensor(f"w{i}")
        grads[f"w{i}"] = inputs[i].T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        if i > 0:
            gh = g @ w.T
            if arch.activation == "tanh":
                g = gh * (1.0 - inputs[i] ** 2)
            else:
                g = gh * (preacts[i - 1] > 0.0)
    flat = np.concatenate([grads[spec.name].reshape(-1) for spec in theta.layout])
    return loss, theta.with_values(flat)


def prox_grad(
    grad: ParamVector, theta: ParamVector, theta_global: ParamVector, mu: float
) -> ParamVector:
    """Add the proximal pull mu * (theta - theta_global) to a gradient."""
    _require_same_layout(grad, theta)
    _require_same_layout(grad, theta_global)
    if mu < 0:
        raise ValueError(f"mu must be >= 0, got {mu}")
    return grad.with_values(grad.values + mu * (theta.values - theta_global.values))


def sgd_step(theta: ParamVector, grad: ParamVector, lr: float) -> ParamVector:
    """Plain gradient step theta - lr * grad."""
    _require_same_layout(theta, grad)
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    return theta.with_values(theta.values - lr * grad.values)


def noise_predictor(
    arch: MlpDenoiser, theta: ParamVector, sched: NoiseSchedule
) -> Callable[[np.ndarray, int], np.ndarray]:
    """Bind (arch, theta, sched) into the (points, t) -> noise handle used by samplers."""

    def fn(x, t):
        return predict_noise(arch, theta, x, t, sched)

    fn.data_dim = arch.data_dim
    return fn


def save_params(path: str | Path, theta: ParamVector) -> None:
    """Write a checkpoint: u64-LE length prefix, JSON layout header, f64-LE values."""
    header = {
        "format": _CHECKPOINT_FORMAT,
        "version": 1,
        "tensors": [
            {"name": s.name, "shape": list(s.shape), "offset": s.offset}
            for s in theta.layout
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(theta.values.astype("<f8").tobytes())


def load_params(path: str | Path) -> ParamVector:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"truncated checkpoint: {path}")
    (length,) = struct.unpack("<Q", raw[:8])
    if len(raw) < 8 + length:
        raise ValueError(f"truncated checkpoint header: {path}")
    header = json.loads(raw[8 : 8 + length].decode())
    if header.get("format") != _CHECKPOINT_FORMAT:
        raise ValueError(f"not a parameter checkpoint: {path}")
    layout = tuple(
        TensorSpec(t["name"], tuple(t["shape"]), int(t["offset"]))
        for t in header["tensors"]
    )
    values = np.frombuffer(raw[8 + length :], dtype="<f8").astype(np.float64)
    return ParamVector(values, layout)
