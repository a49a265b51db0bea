"""Self-contained property families behind the verify subcommand.

Each family re-derives its expected values from an independent oracle
(finite differences, direct formula evaluation, brute-force accumulation)
rather than trusting the code paths it checks.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import LabeledDataset, PartitionSpec, make_gaussian_mixture, partition
from .denoiser import MlpDenoiser, TrainBatch, init_params, loss_and_grad
from .diffusion import DiffusionConfig, build_linear_schedule
from .metrics import GaussianStats, fit_gaussian, frechet_distance, verify_contraction_bound
from .quantizer import dequantize, quantize, quantize_model
from .rng import derive_seed


@dataclass
class FamilyResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> FamilyResult:
    start = time.perf_counter()
    passed, detail = fn()
    return FamilyResult(name, passed, detail, time.perf_counter() - start)


def _kink_free_batch(arch, theta, sched, rng, batch_n: int) -> TrainBatch:
    """Draw a batch keeping relu pre-activations away from their kink.

    Central differences are invalid where the loss is not differentiable, so
    batches that land a pre-activation within 1e-4 of zero are redrawn.
    """
    from .denoiser import _forward
    from .diffusion import forward_sample

    dim = arch.data_dim
    for _ in range(50):
        batch = TrainBatch(
            rng.standard_normal((batch_n, dim)),
            rng.integers(1, sched.timesteps + 1, size=batch_n),
            rng.standard_normal((batch_n, dim)),
        )
        if arch.activation != "relu":
            return batch
        x_t = forward_sample(batch.x0s, batch.ts, batch.noises, sched)
        _, _, preacts = _forward(arch, theta, x_t, batch.ts, sched)
        margin = min(float(np.min(np.abs(z))) for z in preacts[:-1])
        if margin > 1e-4:
            return batch
    raise RuntimeError("could not find a kink-free batch for the relu gradcheck")


def check_gradients(cases: int = 12, seed: int = 2024) -> FamilyResult:
    """Analytic gradients vs central finite differences on random small nets."""

    def run() -> tuple[bool, str]:
        sched = build_linear_schedule(DiffusionConfig(timesteps=10))
        worst = 0.0
        for case in range(cases):
            rng = np.random.default_rng(derive_seed(seed, "grad", case))
            dim = int(rng.integers(1, 4))
            hidden = tuple(int(h) for h in rng.integers(2, 7, size=int(rng.integers(1, 3))))
            activation = "tanh" if case % 2 == 0 else "relu"
            arch = MlpDenoiser.for_data(dim, hidden, activation, time_features=int(rng.integers(0, 3)))
            theta = init_params(arch, derive_seed(seed, "init", case))
            batch_n = int(rng.integers(2, 5))
            batch = _kink_free_batch(arch, theta, sched, rng, batch_n)
            _, grad = loss_and_grad(arch, theta, batch, sched)
            step = 1e-6
            fd = np.zeros(theta.size)
            base = theta.values
            for i in range(theta.size):
                plus = base.copy()
                plus[i] += step
                minus = base.copy()
                minus[i] -= step
                loss_plus, _ = loss_and_grad(arch, theta.with_values(plus), batch, sched)
                loss_minus, _ = loss_and_grad(arch, theta.with_values(minus), batch, sched)
                fd[i] = (loss_plus - loss_minus) / (2 * step)
            denom = max(np.linalg.norm(grad.values), np.linalg.norm(fd), 1e-12)
            rel = float(np.linalg.norm(grad.values - fd) / denom)
            worst = max(worst, rel)
            if rel > 1e-5:
                return False, f"case {case}: relative error {rel:.2e} > 1e-5"
        return True, f"{cases} architectures, worst relative error {worst:.2e}"

    return _timed("gradient-check", run)


def check_quantizer(tensors: int = 1000, seed: int = 7) -> FamilyResult:
    """Round-trip bound and the exact 4:1 code-payload ratio."""

    def run() -> tuple[bool, str]:
        rng = np.random.default_rng(seed)
        worst = 0.0
        for i in range(tensors):
            bitwidth = 8 if i % 2 == 0 else 16
            size = int(rng.integers(1, 200))
            scale = 10.0 ** rng.uniform(-2, 2)
            values = rng.standard_normal(size) * scale
            q = quantize(values, bitwidth)
            err = float(np.max(np.abs(values - dequantize(q))))
            limit = q.delta / 2 + 1e-12
            worst = max(worst, err - q.delta / 2)
            if err > limit:
                return False, f"tensor {i}: round-trip error {err:.3e} > delta/2"
        arch = MlpDenoiser.for_data(2, (16, 16))
        theta = init_params(arch, seed)
        wide = quantize_model(theta, 32)
        narrow = quantize_model(theta, 8)
        if wide.code_bytes != 4 * narrow.code_bytes:
            return False, (
                f"code payload ratio {wide.code_bytes}/{narrow.code_bytes} != 4"
            )
        return True, f"{tensors} tensors within delta/2; 32-bit/8-bit code bytes = 4 exactly"

    return _timed("quantizer-roundtrip", run)


def check_partition_formulas() -> FamilyResult:
    """Per-label shard counts for K=10, N_l=5000 at skew levels 1/3/5, plus non-IID."""

    def run() -> tuple[bool, str]:
        clients = 10
        per_label = 5000
        labels = 10
        data = make_gaussian_mixture(
            per_label * labels, np.random.default_rng(0).standard_normal((labels, 2)), 0.05, seed=1
        )
        for level in (1, 3, 5):
            skew = 2 ** (level - 1)
            share = per_label // (skew + clients - 1)
            expected_last = per_label - (clients - 1) * share
            shards = partition(data, PartitionSpec(clients, "skew", level, seed=3))
            for label in range(labels):
                counts = [int(np.sum(s.labels == label)) for s in shards]
                if counts[:-1] != [share] * (clients - 1) or counts[-1] != expected_last:
                    return False, f"level {level} label {label}: counts {counts}"
        shards = partition(data, PartitionSpec(clients, "non_iid", seed=3))
        for i, shard in enumerate(shards):
            if set(np.unique(shard.labels)) != {i}:
                return False, f"non_iid shard {i} holds labels {set(np.unique(shard.labels))}"
        return True, "skew levels 1/3/5 match the count formula; non-IID shards hold whole labels"

    return _timed("partition-formula", run)


def check_frechet_identities(seed: int = 11) -> FamilyResult:
    """Zero self-distance, mean-shift identity, and the 1-d closed form."""

    def run() -> tuple[bool, str]:
        rng = np.random.default_rng(seed)
        for _ in range(20):
            dim = int(rng.integers(1, 5))
            basis = rng.standard_normal((dim, dim))
            stats = GaussianStats(rng.standard_normal(dim), basis @ basis.T)
            if frechet_distance(stats, stats) > 1e-9:
                return False, "self-distance exceeded 1e-9"
            shift = rng.standard_normal(dim)
            shifted = GaussianStats(stats.mean + shift, stats.cov)
            got = frechet_distance(stats, shifted)
            if abs(got - float(shift @ shift)) > 1e-9:
                return False, f"mean-shift identity off by {abs(got - float(shift @ shift)):.2e}"
        one_d = frechet_distance(
            GaussianStats([0.0], [[4.0]]), GaussianStats([0.0], [[1.0]])
        )
        if abs(one_d - (math.sqrt(4) - math.sqrt(1)) ** 2) > 1e-9:
            return False, f"1-d variances (4, 1) gave {one_d}, expected 1"
        return True, "self-distance, mean-shift, and 1-d identities all within 1e-9"

    return _timed("frechet-identities", run)


def check_contraction_bound(trials: int = 10_000, seed: int = 5) -> FamilyResult:
    """Exact geometric decay at sigma = 0 and the noisy bound within 3 SE."""

    def run() -> tuple[bool, str]:
        maps = [lambda x: 0.3 * x, lambda x: 0.7 * x]
        weights = [0.5, 0.5]
        exact = verify_contraction_bound(
            maps, weights, noise_std=0.0, x0=[1.0], steps=30, trials=1, seed=seed
        )
        expected = 0.5 ** np.arange(31) * exact.trajectory[0]
        if float(np.max(np.abs(exact.trajectory - expected))) > 1e-9:
            return False, "sigma=0 trajectory deviates from L^t decay"
        if not exact.satisfied:
            return False, "sigma=0 bound violated"
        noisy = verify_contraction_bound(
            maps, weights, noise_std=0.1, x0=[1.0], steps=30, trials=trials, seed=seed
        )
        if not noisy.satisfied:
            return False, "sigma=0.1 bound violated beyond 3 standard errors"
        return True, (
            f"L=0.5 ensemble: exact decay to 1e-9, noisy bound holds over {trials} trials"
        )

    return _timed("contraction-bound", run)


def run_all() -> list[FamilyResult]:
    return [
        check_gradients(),
        check_quantizer(),
        check_partition_formulas(),
        check_frechet_identities(),
        check_contraction_bound(),
    ]
