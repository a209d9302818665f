"""
Distillation losses and Pro-KD scheduling.

Teacher logits passed to any loss here are treated as constants: only the
gradient with respect to the student logits is returned.
"""

import logging
from dataclasses import dataclass
from typing import Iterator, List, Sequence, Tuple

import numpy as np

from .errors import AllocationError, DomainError, ShapeError
from .numerics import LossAndGrad, Matrix, cross_entropy, kl_divergence, mse_logits, softmax

logger = logging.getLogger('distill-lab.distill')


def temperature_sequence(tau_max: int) -> List[int]:
    """Temperatures tau_max, tau_max - 1, ..., 1."""
    if int(tau_max) != tau_max or tau_max < 1:
        raise DomainError(f"tau_max must be an integer >= 1, got {tau_max!r}")
    return list(range(int(tau_max), 0, -1))


def allocate_epochs(tau_max: int, total_n: int, increment_factor: int = 1) -> List[int]:
    """Split a Phase I budget of ``total_n`` epochs over ``tau_max`` steps.

    With ``increment_factor == 1`` every step gets ``total_n / tau_max``
    epochs (divisibility required). With a factor f > 1 the counts grow
    geometrically (n1, f*n1, f^2*n1, ...), n1 is the largest integer keeping
    the sum within ``total_n``, and the remainder goes to the last step.
    """
    if int(tau_max) != tau_max or tau_max < 1:
        raise AllocationError(f"tau_max must be an integer >= 1, got {tau_max!r}")
    if int(increment_factor) != increment_factor or increment_factor < 1:
        raise AllocationError(f"increment_factor must be an integer >= 1, got {increment_factor!r}")
    if int(total_n) != total_n or total_n < tau_max:
        raise AllocationError(
            f"cannot give each of {tau_max} temperature steps an epoch out of {total_n}")
    tau_max, total_n, factor = int(tau_max), int(total_n), int(increment_factor)

    if factor == 1:
        if total_n % tau_max:
            raise AllocationError(
                f"{total_n} epochs do not split evenly over {tau_max} steps with increment factor 1")
        return [total_n // tau_max] * tau_max

    unit_sum = (factor ** tau_max - 1) // (factor - 1)
    first = total_n // unit_sum
    if first < 1:
        raise AllocationError(
            f"{total_n} epochs cannot hold a geometric schedule of {tau_max} steps "
            f"with increment factor {factor} (needs at least {unit_sum})")
    counts = [first * factor ** k for k in range(tau_max)]
    counts[-1] += total_n - first * unit_sum
    return counts


@dataclass(frozen=True)
class TemperatureSchedule:
    """Phase I temperature steps and the student epochs spent on each."""
    tau_max: int
    per_step_epochs: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, 'per_step_epochs', tuple(int(n) for n in self.per_step_epochs))
        if int(self.tau_max) != self.tau_max or self.tau_max < 1:
            raise DomainError(f"tau_max must be an integer >= 1, got {self.tau_max!r}")
        if len(self.per_step_epochs) != self.tau_max:
            raise AllocationError(
                f"schedule has {len(self.per_step_epochs)} epoch counts for tau_max={self.tau_max}")
        if any(n < 1 for n in self.per_step_epochs):
            raise AllocationError(f"every step needs at least one epoch: {self.per_step_epochs}")

    @classmethod
    def allocate(cls, tau_max: int, total_n: int, increment_factor: int = 1) -> 'TemperatureSchedule':
        return cls(tau_max, tuple(allocate_epochs(tau_max, total_n, increment_factor)))

    @property
    def temperatures(self) -> List[int]:
        return temperature_sequence(self.tau_max)

    @property
    def total_epochs(self) -> int:
        return sum(self.per_step_epochs)

    def steps(self) -> Iterator[Tuple[int, int, int]]:
        """Yield (step index from 1, temperature, epochs) in training order."""
        for i, (temperature, n) in enumerate(zip(self.temperatures, self.per_step_epochs), start=1):
            yield i, temperature, n

    def checkpoint_epochs(self, warmup_epochs: int = 0) -> List[int]:
        """Teacher epochs followed by the steps: warmup+1 ... warmup+tau_max."""
        return [warmup_epochs + i for i in range(1, self.tau_max + 1)]


@dataclass(frozen=True)
class VanillaKdConfig:
    alpha: float = 0.5
    temperature: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise DomainError(f"vanilla KD alpha must lie in [0, 1], got {self.alpha!r}")
        if not self.temperature > 0:
            raise DomainError(f"vanilla KD temperature must be positive, got {self.temperature!r}")


def one_hot(labels: Sequence[int], n_classes: int) -> Matrix:
    labels = np.asarray(labels, dtype=np.int64)
    encoded = np.zeros((labels.size, n_classes))
    encoded[np.arange(labels.size), labels] = 1.0
    return encoded


def vanilla_kd_loss(labels: Matrix, z_s: Matrix, z_t: Matrix, cfg: VanillaKdConfig) -> LossAndGrad:
    """alpha * CE(y, softmax(z_s)) + (1 - alpha) * T^2 * KL(softmax(z_t/T) || softmax(z_s/T)).

    The temperature softens both sides. Terms with zero weight are skipped,
    so alpha == 1 is exactly cross-entropy.
    """
    z_s = np.asarray(z_s, dtype=np.float64)
    z_t = np.asarray(z_t, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if z_s.shape != z_t.shape or labels.shape != z_s.shape:
        raise ShapeError("vanilla_kd_loss: shape mismatch", labels.shape, z_s.shape, z_t.shape)

    loss = 0.0
    grad = np.zeros_like(z_s)
    if cfg.alpha > 0.0:
        ce, ce_grad = cross_entropy(labels, softmax(z_s, 1.0))
        loss = cfg.alpha * ce
        grad = cfg.alpha * ce_grad
    if cfg.alpha < 1.0:
        t = cfg.temperature
        p_teacher = softmax(z_t, t)
        p_student = softmax(z_s, t)
        kd_weight = (1.0 - cfg.alpha) * t * t
        batch = z_s.shape[0]
        loss = loss + kd_weight * kl_divergence(p_teacher, p_student)
        grad = grad + kd_weight * (p_student - p_teacher) / (t * batch)
    return float(loss), grad


def prokd_phase1_loss(z_s: Matrix, z_t: Matrix, temperature: float) -> LossAndGrad:
    """Regression of the student logits onto ``z_t / temperature``."""
    if not temperature >= 1:
        raise DomainError(f"Pro-KD temperature must be >= 1, got {temperature!r}")
    z_t = np.asarray(z_t, dtype=np.float64)
    return mse_logits(z_s, z_t / temperature)


def annealing_target(z_t_final: Matrix, index: int, tau_max: int) -> Matrix:
    """Final teacher logits scaled by ``index / tau_max`` (1 <= index <= tau_max)."""
    if int(tau_max) != tau_max or tau_max < 1:
        raise DomainError(f"tau_max must be an integer >= 1, got {tau_max!r}")
    if int(index) != index or not 1 <= index <= tau_max:
        raise DomainError(f"annealing index must lie in [1, {tau_max}], got {index!r}")
    return np.asarray(z_t_final, dtype=np.float64) * (index / tau_max)
