"""Round orchestration for the three federated training variants.

Each round selects clients uniformly without replacement, runs local SGD from
the received global parameters, and aggregates the results weighted by shard
size (weights sum to one; no extra 1/k factor).  The quantized variant wraps
both transfer directions in quantize/calibrate/dequantize and accounts exact
on-the-wire bytes.  All randomness is derived per (seed, round, client), so
local updates are independent and rounds replay deterministically.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .data import LabeledDataset, PartitionSpec, partition
from .denoiser import (
    MlpDenoiser,
    ParamVector,
    TrainBatch,
    init_params,
    loss_and_grad,
    noise_predictor,
    prox_grad,
    sgd_step,
)
from .diffusion import DiffusionConfig, NoiseSchedule, build_linear_schedule, sample
from .errors import ConfigError
from .metrics import fit_gaussian, frechet_distance
from .quantizer import calibrate, dequantize_model, quantize_model
from .rng import derive_seed

VARIANTS = ("vanilla", "prox", "quant")
WIRE_BITWIDTHS = (8, 16, 32)

FLOAT32_WIRE_BYTES = 4  # full-precision transfers ship 32-bit floats


@dataclass(frozen=True)
class FedConfig:
    """Hyperparameters for one federated run."""

    clients: int = 10
    contributing: int = 6
    rounds: int = 16
    local_epochs: int = 10
    lr: float = 1e-3
    mu: float = 0.0
    variant: str = "vanilla"
    bitwidth: int = 8
    batch_size: int = 64
    seed: int = 0
    eval_every: int = 4
    eval_samples: int = 4096
    calib_samples: int = 16

    def __post_init__(self) -> None:
        if not (1 <= self.contributing <= self.clients):
            raise ConfigError(
                f"contributing clients must satisfy 1 <= k <= K, got "
                f"k={self.contributing}, K={self.clients}"
            )
        if self.rounds < 0:
            raise ConfigError(f"rounds must be >= 0, got {self.rounds}")
        if self.local_epochs < 1:
            raise ConfigError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.mu < 0:
            raise ConfigError(f"mu must be >= 0, got {self.mu}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.bitwidth not in WIRE_BITWIDTHS:
            raise ConfigError(
                f"bitwidth must be one of {WIRE_BITWIDTHS}, got {self.bitwidth}"
            )
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.eval_samples < 2:
            raise ConfigError(f"eval_samples must be >= 2, got {self.eval_samples}")
        if self.calib_samples < 1:
            raise ConfigError(f"calib_samples must be >= 1, got {self.calib_samples}")


@dataclass(frozen=True, eq=False)
class ClientState:
    """One client's shard and its private RNG seed."""

    id: int
    shard: LabeledDataset
    size: int
    rng_seed: int

    def __post_init__(self) -> None:
        if self.size != len(self.shard):
            raise ValueError(f"client {self.id}: size {self.size} != shard length {len(self.shard)}")
        if self.size == 0:
            raise ValueError(f"client {self.id} has an empty shard")


@dataclass(frozen=True, eq=False)
class RoundReport:
    """Selection, weighting, loss, and exact byte ledger for one round."""

    round: int
    selected: tuple[int, ...]
    weights: dict[int, float]
    mean_local_loss: float
    bytes_down: int
    bytes_up: int
    code_bytes_down: int
    code_bytes_up: int
    wall_time: float
    calibration: Optional[list[dict]] = None

    def __post_init__(self) -> None:
        if set(self.weights) != set(self.selected):
            raise ValueError("weights must cover exactly the selected clients")
        total = sum(self.weights.values())
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1 within 1e-12, got {total!r}")


@dataclass
class TrainingLog:
    """Ordered round reports plus the quality-metric trace of one run."""

    config: FedConfig
    reports: list[RoundReport] = field(default_factory=list)
    fid_trace: list[tuple[int, float]] = field(default_factory=list)
    final_params: Optional[ParamVector] = None
    calibration: list[dict] = field(default_factory=list)

    @property
    def best_fid(self) -> float:
        return min(f for _, f in self.fid_trace)

    @property
    def total_bytes(self) -> int:
        return sum(r.bytes_down + r.bytes_up for r in self.reports)

    @property
    def total_code_bytes(self) -> int:
        return sum(r.code_bytes_down + r.code_bytes_up for r in self.reports)


def select_clients(total: int, count: int, seed: int) -> tuple[int, ...]:
    """``count`` distinct ids, uniform without replacement, ascending order."""
    if not (1 <= count <= total):
        raise ConfigError(f"cannot select {count} of {total} clients")
    rng = np.random.default_rng(seed)
    return tuple(sorted(int(i) for i in rng.choice(total, size=count, replace=False)))


def aggregation_weights(
    sizes: Mapping[int, int], selected: Sequence[int]
) -> dict[int, float]:
    """Shard-size weights n_i = |D_i| / sum_j |D_j| over the selected clients."""
    if not selected:
        raise ValueError("selected clients must be nonempty")
    for cid in selected:
        if cid not in sizes:
            raise ValueError(f"unknown client id {cid}")
        if sizes[cid] <= 0:
            raise ValueError(f"client {cid} has nonpositive size {sizes[cid]}")
    total = sum(sizes[cid] for cid in selected)
    return {cid: sizes[cid] / total for cid in selected}


def aggregate(updates: Sequence[ParamVector], weights: Sequence[float]) -> ParamVector:
    """Convex combination of parameter vectors, accumulated in list order."""
    if not updates:
        raise ValueError("nothing to aggregate")
    if len(updates) != len(weights):
        raise ValueError("one weight per update required")
    base = updates[0]
    for other in updates[1:]:
        if not base.same_layout(other):
            raise ValueError("parameter vectors have different layouts")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise ValueError(f"weights must sum to 1, got {sum(weights)!r}")
    acc = np.zeros(base.size)
    for update, weight in zip(updates, weights):
        acc += weight * update.values
    return base.with_values(acc)


def local_update(
    theta_global: ParamVector,
    client: ClientState,
    cfg: FedConfig,
    sched: NoiseSchedule,
    arch: MlpDenoiser,
) -> tuple[ParamVector, float]:
    """E epochs of minibatch SGD from the received global parameters.

    Batch order, timestep draws, and noise realizations all derive from the
    client's rng_seed, so the result is a pure function of its inputs and the
    mean minibatch loss comes back alongside the update.
    """
    n = client.size
    if n == 0:
        raise ValueError(f"client {client.id} has an empty shard")
    rng = np.random.default_rng(client.rng_seed)
    theta = theta_global
    dim = arch.data_dim
    losses: list[float] = []
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            ts = rng.integers(1, sched.timesteps + 1, size=idx.size)
            noises = rng.standard_normal((idx.size, dim))
            batch = TrainBatch(client.shard.points[idx], ts, noises)
            loss, grad = loss_and_grad(arch, theta, batch, sched)
            if cfg.variant == "prox":
                grad = prox_grad(grad, theta, theta_global, cfg.mu)
            theta = sgd_step(theta, grad, cfg.lr)
            losses.append(loss)
    return theta, float(np.mean(losses))


def _round_clients(
    clients: Sequence[ClientState], selected: Sequence[int], cfg: FedConfig, round_index: int
) -> list[ClientState]:
    by_id = {c.id: c for c in clients}
    return [
        replace(by_id[cid], rng_seed=derive_seed(cfg.seed, "client", round_index, cid))
        for cid in selected
    ]


def run_round_vanilla(
    theta: ParamVector,
    clients: Sequence[ClientState],
    cfg: FedConfig,
    sched: NoiseSchedule,
    arch: MlpDenoiser,
    round_index: int,
) -> tuple[ParamVector, RoundReport]:
    """One full-precision round: select, train locally, weight-average."""
    if cfg.variant not in ("vanilla", "prox"):
        raise ConfigError(f"variant {cfg.variant!r} is not a full-precision variant")
    start = time.perf_counter()
    selected = select_clients(
        cfg.clients, cfg.contributing, derive_seed(cfg.seed, "select", round_index)
    )
    weights = aggregation_weights({c.id: c.size for c in clients}, selected)
    updates: list[ParamVector] = []
    losses: list[float] = []
    for client in _round_clients(clients, selected, cfg, round_index):
        update, loss = local_update(theta, client, cfg, sched, arch)
        updates.append(update)
        losses.append(loss)
    new_theta = aggregate(updates, [weights[cid] for cid in selected])
    wire = FLOAT32_WIRE_BYTES * theta.size * len(selected)
    report = RoundReport(
        round=round_index,
        selected=selected,
        weights=weights,
        mean_local_loss=float(np.mean(losses)),
        bytes_down=wire,
        bytes_up=wire,
        code_bytes_down=wire,
        code_bytes_up=wire,
        wall_time=time.perf_counter() - start,
    )
    return new_theta, report


def _calibration_entry(actor, calib) -> dict:
    outputs = calib.sample_outputs
    return {
        "actor": actor,
        "clip_ratios": dict(calib.clip_ratios),
        "activation_min": float(outputs.min()),
        "activation_max": float(outputs.max()),
        "activation_mean": float(outputs.mean()),
    }


def run_round_quant(
    theta: ParamVector,
    clients: Sequence[ClientState],
    cfg: FedConfig,
    sched: NoiseSchedule,
    arch: MlpDenoiser,
    round_index: int,
) -> tuple[ParamVector, RoundReport]:
    """One quantized round.

    The server calibrates and quantizes the broadcast; each client dequantizes,
    trains in full precision, calibrates, and re-quantizes its upload.  The
    server dequantizes every upload and averages in full precision, since each
    client carries its own grid.
    """
    if cfg.variant != "quant":
        raise ConfigError(f"variant {cfg.variant!r} is not the quantized variant")
    start = time.perf_counter()
    bitwidth = cfg.bitwidth
    selected = select_clients(
        cfg.clients, cfg.contributing, derive_seed(cfg.seed, "select", round_index)
    )
    weights = aggregation_weights({c.id: c.size for c in clients}, selected)

    server_calib = calibrate(
        theta,
        noise_predictor(arch, theta, sched),
        sched,
        cfg.calib_samples,
        bitwidth,
        derive_seed(cfg.seed, "calib", round_index, "server"),
    )
    q_broadcast = quantize_model(theta, bitwidth, server_calib)
    broadcast = dequantize_model(q_broadcast)
    calibration = [_calibration_entry("server", server_calib)]

    updates: list[ParamVector] = []
    losses: list[float] = []
    bytes_up = 0
    code_bytes_up = 0
    for client in _round_clients(clients, selected, cfg, round_index):
        update, loss = local_update(broadcast, client, cfg, sched, arch)
        client_calib = calibrate(
            update,
            noise_predictor(arch, update, sched),
            sched,
            cfg.calib_samples,
            bitwidth,
            derive_seed(cfg.seed, "calib", round_index, client.id),
        )
        q_update = quantize_model(update, bitwidth, client_calib)
        bytes_up += q_update.payload_bytes
        code_bytes_up += q_update.code_bytes
        updates.append(dequantize_model(q_update))
        losses.append(loss)
        calibration.append(_calibration_entry(client.id, client_calib))

    new_theta = aggregate(updates, [weights[cid] for cid in selected])
    report = RoundReport(
        round=round_index,
        selected=selected,
        weights=weights,
        mean_local_loss=float(np.mean(losses)),
        bytes_down=q_broadcast.payload_bytes * len(selected),
        bytes_up=bytes_up,
        code_bytes_down=q_broadcast.code_bytes * len(selected),
        code_bytes_up=code_bytes_up,
        wall_time=time.perf_counter() - start,
        calibration=calibration,
    )
    return new_theta, report


def run_experiment(
    cfg: FedConfig,
    data: LabeledDataset,
    pspec: PartitionSpec,
    arch: MlpDenoiser,
    dcfg: DiffusionConfig,
    eval_every: Optional[int] = None,
) -> TrainingLog:
    """Partition, initialize, run R rounds, evaluating quality periodically.

    Round 0 of the metric trace is the untrained model, so rounds = 0 yields a
    log holding only the initial evaluation.  Fully deterministic per seed.
    """
    eval_every = cfg.eval_every if eval_every is None else eval_every
    if eval_every < 1:
        raise ConfigError(f"eval_every must be >= 1, got {eval_every}")
    if pspec.partitions != cfg.clients:
        raise ConfigError(
            f"partition count {pspec.partitions} != client count {cfg.clients}"
        )
    if arch.data_dim != data.dim:
        raise ValueError(f"model data dim {arch.data_dim} != dataset dim {data.dim}")
    sched = build_linear_schedule(dcfg)
    shards = partition(data, pspec)
    empty = [i for i, s in enumerate(shards) if len(s) == 0]
    if empty:
        raise ValueError(f"partitioning produced empty shards for clients {empty}")
    clients = [
        ClientState(i, shards[i], len(shards[i]), derive_seed(cfg.seed, "client", i))
        for i in range(cfg.clients)
    ]
    theta = init_params(arch, derive_seed(cfg.seed, "init"))
    real_stats = fit_gaussian(data.points)
    log = TrainingLog(config=cfg, final_params=theta)

    def evaluate(round_index: int, params: ParamVector) -> None:
        generated = sample(
            noise_predictor(arch, params, sched),
            sched,
            cfg.eval_samples,
            arch.data_dim,
            derive_seed(cfg.seed, "eval", round_index),
        )
        log.fid_trace.append(
            (round_index, frechet_distance(real_stats, fit_gaussian(generated)))
        )

    evaluate(0, theta)
    run_round = run_round_quant if cfg.variant == "quant" else run_round_vanilla
    for round_index in range(1, cfg.rounds + 1):
        theta, report = run_round(theta, clients, cfg, sched, arch, round_index)
        log.reports.append(report)
        if report.calibration:
            log.calibration.append(
                {"round": round_index, "entries": report.calibration}
            )
        if round_index % eval_every == 0 or round_index == cfg.rounds:
            evaluate(round_index, theta)
    log.final_params = theta
    return log


def train_centralized(
    arch: MlpDenoiser,
    data: LabeledDataset,
    cfg: FedConfig,
    dcfg: DiffusionConfig,
    epochs: int,
) -> tuple[ParamVector, float]:
    """Plain SGD on the pooled dataset: the single-client limit of a round."""
    sched = build_linear_schedule(dcfg)
    theta = init_params(arch, derive_seed(cfg.seed, "init"))
    client = ClientState(0, data, len(data), derive_seed(cfg.seed, "centralized"))
    solo = replace(
        cfg, clients=1, contributing=1, variant="vanilla", local_epochs=epochs
    )
    return local_update(theta, client, solo, sched, arch)


def write_metrics_csv(log: TrainingLog, path: str | Path) -> None:
    """Columns: round, variant, mean_local_loss, fid, bytes_up, bytes_down, wall_time.

    Row 0 carries the initial evaluation only; the fid cell is empty on rounds
    without an evaluation.  Wall time is the one non-deterministic column.
    """
    fid_by_round = dict(log.fid_trace)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["round", "variant", "mean_local_loss", "fid", "bytes_up", "bytes_down", "wall_time"]
        )
        initial = fid_by_round.get(0)
        writer.writerow(
            [0, log.config.variant, "", "" if initial is None else repr(initial), "", "", ""]
        )
        for report in log.reports:
            fid = fid_by_round.get(report.round)
            writer.writerow(
                [
                    report.round,
                    log.config.variant,
                    repr(report.mean_local_loss),
                    "" if fid is None else repr(fid),
                    report.bytes_up,
                    report.bytes_down,
                    repr(report.wall_time),
                ]
            )


def read_metrics_csv(path: str | Path) -> list[dict]:
    """Rows as dicts with floats/ints restored; empty cells become None."""
    rows: list[dict] = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for record in reader:
            rows.append(
                {
                    "round": int(record["round"]),
                    "variant": record["variant"],
                    "mean_local_loss": float(record["mean_local_loss"])
                    if record["mean_local_loss"]
                    else None,
                    "fid": float(record["fid"]) if record["fid"] else None,
                    "bytes_up": int(record["bytes_up"]) if record["bytes_up"] else None,
                    "bytes_down": int(record["bytes_down"]) if record["bytes_down"] else None,
                    "wall_time": float(record["wall_time"]) if record["wall_time"] else None,
                }
            )
    return rows
