"""Few-shot regression and classification episodes.

Every generator is a pure function of its spec and an integer seed, so a
stream of tasks can be regenerated (or resumed mid-way) from the seed and
the episode index alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np


@dataclass(frozen=True)
class Task:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    ways: int
    shots: int
    # generating parameters, kept for plotting ground-truth curves
    meta: dict | None = None

    @property
    def is_classification(self) -> bool:
        return self.ways > 1


@dataclass(frozen=True)
class SineTaskSpec:
    amplitude: tuple[float, float] = (0.1, 5.0)
    phase: tuple[float, float] = (0.0, np.pi)
    x_range: tuple[float, float] = (-5.0, 5.0)
    noise: float = 0.0

    def validate(self):
        a_lo, a_hi = self.amplitude
        if not a_lo > 0:
            raise ValueError(f"amplitude lower bound must be positive, got {a_lo}")
        for name, (lo, hi) in (("amplitude", self.amplitude), ("phase", self.phase), ("x_range", self.x_range)):
            if not hi > lo:
                raise ValueError(f"{name} range is degenerate: [{lo}, {hi}]")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")


@dataclass(frozen=True)
class ClusterTaskSpec:
    dim: int = 8
    center_scale: float = 3.0
    spread: float = 0.5
    ways: int = 2
    shots: int = 1

    def validate(self):
        if self.ways < 2:
            raise ValueError(f"classification needs at least 2 ways, got {self.ways}")
        if self.shots < 1 or self.dim < 1:
            raise ValueError("shots and dim must be >= 1")
        if not self.spread > 0:
            raise ValueError(f"spread must be positive, got {self.spread}")
        if not self.center_scale > 0:
            raise ValueError(f"center_scale must be positive, got {self.center_scale}")


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed))


def sine_function(x, amplitude: float, phase: float) -> np.ndarray:
    return amplitude * np.sin(np.asarray(x, dtype=np.float64) + phase)


def sample_sine_task(spec: SineTaskSpec, shots: int, n_query: int, seed) -> Task:
    spec.validate()
    if shots < 1 or n_query < 1:
        raise ValueError("shots and n_query must be >= 1")
    rng = _rng(seed)
    amp = rng.uniform(*spec.amplitude)
    phase = rng.uniform(*spec.phase)
    # one draw of shots + n_query points, split without reuse
    x = rng.uniform(*spec.x_range, size=(shots + n_query, 1))
    y = sine_function(x, amp, phase)
    if spec.noise > 0:
        y = y + spec.noise * rng.standard_normal(y.shape)
    return Task(
        support_x=x[:shots], support_y=y[:shots],
        query_x=x[shots:], query_y=y[shots:],
        ways=1, shots=shots,
        meta={"amplitude": float(amp), "phase": float(phase)},
    )


def sample_cluster_task(spec: ClusterTaskSpec, n_query_per_class: int, seed) -> Task:
    """C Gaussian blobs; support is ordered class-major (k rows per class)."""
    spec.validate()
    if n_query_per_class < 1:
        raise ValueError("n_query_per_class must be >= 1")
    rng = _rng(seed)
    C, k, d = spec.ways, spec.shots, spec.dim
    centers = spec.center_scale * rng.standard_normal((C, d))
    per_class = k + n_query_per_class
    noise = spec.spread * rng.standard_normal((C, per_class, d))
    pts = centers[:, None, :] + noise
    eye = np.eye(C)
    sx = pts[:, :k].reshape(C * k, d)
    qx = pts[:, k:].reshape(C * n_query_per_class, d)
    sy = np.repeat(eye, k, axis=0)
    qy = np.repeat(eye, n_query_per_class, axis=0)
    return Task(sx, sy, qx, qy, ways=C, shots=k, meta={"centers": centers})


def episode_seed(seed: int, stream: int, index: int) -> list[int]:
    """Seed material for episode ``index`` of a given stream (0 = train, 1 = eval)."""
    return [int(seed), int(stream), int(index)]


def episode_stream(
    generator: Callable[[object], Task],
    episodes_per_iteration: int,
    iterations: int,
    seed: int,
    stream: int = 0,
    start_iteration: int = 0,
) -> Iterator[list[Task]]:
    """Yield one list of tasks (a meta-batch) per iteration.

    ``generator`` maps seed material to a task.  Starting at
    ``start_iteration`` reproduces the tail of the full stream exactly.
    """
    if episodes_per_iteration < 1 or iterations < 0:
        raise ValueError("episodes_per_iteration must be >= 1 and iterations >= 0")
    for it in range(start_iteration, iterations):
        base = it * episodes_per_iteration
        yield [generator(episode_seed(seed, stream, base + e)) for e in range(episodes_per_iteration)]


def class_labels(task: Task) -> np.ndarray:
    return np.argmax(task.support_y, axis=1) if task.is_classification else np.arange(task.support_x.shape[0])
