"""
Empirical Neural Tangent Kernel analysis.

For a scalar network output f(theta, x) and probes x_1..x_n the Gram matrix
H[i, j] = <df(x_i)/dtheta, df(x_j)/dtheta> governs full-batch gradient
descent on 1/2 ||u - y||^2: in the eigenbasis of H the residual decays per
direction as (1 - eta * lambda_i)^t. This module measures the Gram matrix,
runs the descent, and compares the recorded projections with that law.

Multi-class networks are probed one logit at a time via ``output_unit``.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DomainError, ShapeError
from .nn import (Activation, MlpModel, MlpSpec, SgdConfig, activation_derivative, backward,
                 forward, init_model, sgd_step)
from .numerics import EigenDecomposition, Matrix, symmetric_eigen

logger = logging.getLogger('distill-lab.ntk')

MAX_PROBES = 200
SYMMETRY_TOLERANCE = 1e-8
PSD_TOLERANCE = 1e-8
EIGEN_TIE_TOLERANCE = 1e-9
DEFAULT_WIDE_NET_TOLERANCE = 0.1
DEFAULT_TOP_K = 3
DEFAULT_HORIZON = 50


@dataclass(eq=False)
class GramMatrix:
    """n x n kernel of one output unit over the probe samples."""
    matrix: Matrix
    sample_ids: Tuple[int, ...]
    output_unit: int = 0

    @property
    def size(self) -> int:
        return int(self.matrix.shape[0])

    def asymmetry(self) -> float:
        return float(np.max(np.abs(self.matrix - self.matrix.T))) if self.size else 0.0

    def eigen(self) -> EigenDecomposition:
        return symmetric_eigen(self.matrix)

    def frobenius(self) -> float:
        return float(np.linalg.norm(self.matrix))


@dataclass(frozen=True)
class ProjectionStep:
    t: int
    projection: float
    predicted: float


@dataclass
class ProjectionTrace:
    """Residual projection onto one step-0 eigendirection, step by step."""
    eigen_index: int
    eigenvalue: float
    steps: List[ProjectionStep] = field(default_factory=list)

    @property
    def initial(self) -> float:
        return self.steps[0].projection if self.steps else 0.0

    def max_relative_error(self, horizon: Optional[int] = None) -> float:
        """Largest |actual - predicted| over t <= horizon, relative to |initial|."""
        scale = abs(self.initial)
        worst = 0.0
        for step in self.steps:
            if horizon is not None and step.t > horizon:
                break
            gap = abs(step.projection - step.predicted)
            worst = max(worst, gap / scale if scale > 0 else gap)
        return worst

    def half_life(self) -> Optional[float]:
        """Steps until |projection| first halves, interpolated in log space.

        ``None`` when the initial projection vanishes, ``inf`` when the trace
        never halves.
        """
        p0 = abs(self.initial)
        if p0 == 0.0:
            return None
        previous = 1.0
        for step in self.steps[1:]:
            ratio = abs(step.projection) / p0
            if ratio <= 0.5:
                if ratio <= 0.0:
                    return step.t - 1 + (previous - 0.5) / previous
                return step.t - 1 + (math.log(previous) - math.log(0.5)) / (
                    math.log(previous) - math.log(ratio))
            previous = ratio
        return math.inf

    def to_dict(self) -> Dict[str, Any]:
        return {
            'eigen_index': self.eigen_index,
            'eigenvalue': self.eigenvalue,
            't': [s.t for s in self.steps],
            'projection': [s.projection for s in self.steps],
            'predicted': [s.predicted for s in self.steps],
        }


@dataclass
class RateOrderingReport:
    """Empirical half-lives against the larger-eigenvalue-decays-faster law."""
    eigenvalues: List[float]
    half_lives: List[Optional[float]]
    inversions: List[Tuple[int, int]]
    ties: List[Tuple[int, int]]
    allowed_inversions: int = 0

    @property
    def n_inversions(self) -> int:
        return len(self.inversions)

    @property
    def within_tolerance(self) -> bool:
        return self.n_inversions <= self.allowed_inversions

    @property
    def fastest_index(self) -> Optional[int]:
        defined = [(hl, i) for i, hl in enumerate(self.half_lives) if hl is not None]
        if not defined:
            return None
        return min(defined)[1]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'half_lives': [_json_float(hl) for hl in self.half_lives],
            'inversions': [list(pair) for pair in self.inversions],
            'ties': [list(pair) for pair in self.ties],
            'n_inversions': self.n_inversions,
            'allowed_inversions': self.allowed_inversions,
            'within_tolerance': self.within_tolerance,
            'fastest_index': self.fastest_index,
        }


def _json_float(value: Optional[float]) -> Any:
    if value is None:
        return None
    if math.isinf(value):
        return 'inf'
    return value


def _resolve_unit(model: MlpModel, output_unit: Optional[int]) -> int:
    output_dim = model.spec.output_dim
    if output_unit is None:
        if output_dim != 1:
            raise DomainError(
                f"NTK analysis needs a scalar head but the model has {output_dim} outputs; "
                f"select one logit with output_unit (--output-unit) for per-class analysis")
        return 0
    if not 0 <= int(output_unit) < output_dim:
        raise DomainError(f"output_unit {output_unit} outside [0, {output_dim})")
    return int(output_unit)


def _check_probes(model: MlpModel, probes: Matrix) -> Matrix:
    probes = np.asarray(probes, dtype=np.float64)
    if probes.ndim != 2 or probes.shape[1] != model.spec.input_dim:
        raise ShapeError("probes do not match the network input_dim",
                         probes.shape, (None, model.spec.input_dim))
    if probes.shape[0] > MAX_PROBES:
        raise DomainError(f"at most {MAX_PROBES} probes are supported, got {probes.shape[0]}")
    return probes


def compute_gram(model: MlpModel, probes: Matrix, output_unit: Optional[int] = None) -> GramMatrix:
    """Gram matrix of per-sample parameter gradients of one output unit.

    Per-sample gradients of layer k factor as outer(a_k(x), delta_k(x)), so
    H = sum_k (A_k A_k^T + [bias]) * (D_k D_k^T) without forming the Jacobian.
    """
    unit = _resolve_unit(model, output_unit)
    probes = _check_probes(model, probes)
    n = probes.shape[0]
    _, cache = forward(model, probes)

    delta = np.zeros((n, model.spec.output_dim))
    delta[:, unit] = 1.0
    gram = np.zeros((n, n))
    for k in range(model.spec.n_layers - 1, -1, -1):
        inputs = cache.layer_inputs[k]
        kernel = inputs @ inputs.T
        if model.spec.use_bias:
            kernel = kernel + 1.0
        gram += kernel * (delta @ delta.T)
        if k > 0:
            delta = (delta @ model.weights[k].T) * activation_derivative(
                model.spec.activation, cache.pre_activations[k - 1], cache.layer_inputs[k])
    gram = (gram + gram.T) / 2.0
    return GramMatrix(gram, tuple(range(n)), unit)


def jacobian(model: MlpModel, probes: Matrix, output_unit: Optional[int] = None) -> Matrix:
    """Explicit n x P Jacobian of one output unit, one backward pass per probe."""
    unit = _resolve_unit(model, output_unit)
    probes = _check_probes(model, probes)
    rows = []
    for i in range(probes.shape[0]):
        _, cache = forward(model, probes[i:i + 1])
        d_logits = np.zeros((1, model.spec.output_dim))
        d_logits[0, unit] = 1.0
        rows.append(backward(model, cache, d_logits).flatten())
    return np.vstack(rows) if rows else np.zeros((0, model.parameter_count()))


def gram_from_jacobian(model: MlpModel, probes: Matrix,
                       output_unit: Optional[int] = None) -> GramMatrix:
    j = jacobian(model, probes, output_unit)
    return GramMatrix(j @ j.T, tuple(range(j.shape[0])), _resolve_unit(model, output_unit))


def _outputs(model: MlpModel, probes: Matrix, unit: int) -> np.ndarray:
    logits, _ = forward(model, probes)
    return logits[:, unit]


@dataclass
class DescentRun:
    """Everything recorded by one full-batch descent from a frozen eigenbasis."""
    gram: GramMatrix
    eigen: EigenDecomposition
    eta: float
    traces: List[ProjectionTrace]
    residual_norms: List[float]
    final_model: MlpModel
    warnings: List[str] = field(default_factory=list)


def stability_warning(eta: float, lambda_max: float) -> Optional[str]:
    if lambda_max > 0 and eta >= 2.0 / lambda_max:
        return (f"eta={eta:g} is at or above the stability limit 2/lambda_max="
                f"{2.0 / lambda_max:g}; residuals may diverge")
    return None


def run_descent(model: MlpModel, probes: Matrix, targets: Sequence[float], eta: float,
                steps: int, output_unit: Optional[int] = None) -> DescentRun:
    """Full-batch GD on 1/2 ||u - y||^2 over the probes, on a copy of ``model``."""
    unit = _resolve_unit(model, output_unit)
    probes = _check_probes(model, probes)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if targets.shape != (probes.shape[0],):
        raise ShapeError("targets must hold one value per probe", targets.shape, (probes.shape[0],))
    if int(steps) != steps or steps < 0:
        raise DomainError(f"steps must be an integer >= 0, got {steps!r}")

    gram = compute_gram(model, probes, unit)
    eigen = gram.eigen()
    warnings = []
    lambda_max = float(eigen.eigenvalues[0]) if gram.size else 0.0
    message = stability_warning(eta, lambda_max)
    if message:
        logger.warning(message)
        warnings.append(message)

    basis = eigen.eigenvectors
    sgd = SgdConfig(learning_rate=eta)
    current = model.copy()
    residual = _outputs(current, probes, unit) - targets
    initial = basis.T @ residual
    decay = 1.0 - eta * eigen.eigenvalues
    traces = [ProjectionTrace(i, float(lam)) for i, lam in enumerate(eigen.eigenvalues)]
    residual_norms = []
    for t in range(int(steps) + 1):
        if t > 0:
            logits, cache = forward(current, probes)
            d_logits = np.zeros_like(logits)
            d_logits[:, unit] = logits[:, unit] - targets
            sgd_step(current, backward(current, cache, d_logits), sgd)
            residual = _outputs(current, probes, unit) - targets
        projections = basis.T @ residual
        predicted = initial * decay ** t
        for i, trace in enumerate(traces):
            trace.steps.append(ProjectionStep(t, float(projections[i]), float(predicted[i])))
        residual_norms.append(float(np.linalg.norm(residual)))
        logger.debug("GD step %d: residual norm %.6e", t, residual_norms[-1])
    return DescentRun(gram, eigen, eta, traces, residual_norms, current, warnings)


def trace_projections(model: MlpModel, probes: Matrix, targets: Sequence[float], eta: float,
                      steps: int, output_unit: Optional[int] = None) -> List[ProjectionTrace]:
    """Actual vs predicted residual projections on the step-0 eigenbasis."""
    return run_descent(model, probes, targets, eta, steps, output_unit).traces


def rate_ordering_report(traces: Sequence[ProjectionTrace],
                         allowed_inversions: int = 0) -> RateOrderingReport:
    """Count pairs where a larger eigenvalue decays more slowly.

    Eigenvalues within a relative 1e-9 of the spectrum scale are ties, as are
    two directions that never halve; neither counts as an inversion.
    """
    ordered = sorted(traces, key=lambda tr: tr.eigen_index)
    eigenvalues = [tr.eigenvalue for tr in ordered]
    half_lives = [tr.half_life() for tr in ordered]
    scale = max([abs(lam) for lam in eigenvalues] + [0.0])
    inversions: List[Tuple[int, int]] = []
    ties: List[Tuple[int, int]] = []
    for a in range(len(ordered)):
        for b in range(a + 1, len(ordered)):
            hl_a, hl_b = half_lives[a], half_lives[b]
            if hl_a is None or hl_b is None:
                continue
            pair = (ordered[a].eigen_index, ordered[b].eigen_index)
            same_rate = abs(eigenvalues[a] - eigenvalues[b]) <= EIGEN_TIE_TOLERANCE * scale
            if same_rate or (math.isinf(hl_a) and math.isinf(hl_b)):
                ties.append(pair)
            elif eigenvalues[a] > eigenvalues[b] and hl_a > hl_b:
                inversions.append(pair)
            elif eigenvalues[b] > eigenvalues[a] and hl_b > hl_a:
                inversions.append(pair)
    if inversions:
        logger.info("Rate ordering: %d inversion(s) among %d directions",
                    len(inversions), len(ordered))
    return RateOrderingReport(eigenvalues, half_lives, inversions, ties, allowed_inversions)


def gram_drift(initial: GramMatrix, final: GramMatrix) -> float:
    """||H_T - H_0||_F / ||H_0||_F (0 for a vanishing initial kernel)."""
    base = initial.frobenius()
    if base == 0.0:
        return 0.0
    return float(np.linalg.norm(final.matrix - initial.matrix) / base)


@dataclass(frozen=True)
class NtkSettings:
    """Network, probes and descent parameters of one NTK analysis.

    ``eta`` wins when set; otherwise the step size is ``eta_fraction /
    lambda_max`` of the step-0 kernel.
    """
    input_dim: int = 8
    hidden_dims: Tuple[int, ...] = (512,)
    output_dim: int = 1
    activation: Activation = Activation.TANH
    use_bias: bool = True
    n_probes: int = 20
    steps: int = 50
    eta: Optional[float] = None
    eta_fraction: float = 0.5
    seed: int = 0
    output_unit: Optional[int] = None
    top_k: int = DEFAULT_TOP_K
    horizon: int = DEFAULT_HORIZON
    tolerance: float = DEFAULT_WIDE_NET_TOLERANCE
    allowed_inversions: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'hidden_dims', tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, 'activation', Activation(self.activation))
        if not 1 <= self.n_probes <= MAX_PROBES:
            raise DomainError(f"n_probes must lie in [1, {MAX_PROBES}], got {self.n_probes}")
        if self.eta is not None and not self.eta > 0:
            raise DomainError(f"eta must be positive, got {self.eta!r}")
        if not self.eta_fraction > 0:
            raise DomainError(f"eta_fraction must be positive, got {self.eta_fraction!r}")
        if self.steps < 0 or self.top_k < 1 or self.horizon < 0 or self.tolerance <= 0:
            raise DomainError("steps and horizon must be >= 0, top_k >= 1, tolerance > 0")

    @property
    def model_spec(self) -> MlpSpec:
        return MlpSpec(self.input_dim, self.hidden_dims, self.output_dim,
                       self.activation, self.use_bias)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'input_dim': self.input_dim,
            'hidden_dims': list(self.hidden_dims),
            'output_dim': self.output_dim,
            'activation': self.activation.value,
            'use_bias': self.use_bias,
            'n_probes': self.n_probes,
            'steps': self.steps,
            'eta': self.eta,
            'eta_fraction': self.eta_fraction,
            'seed': self.seed,
            'output_unit': self.output_unit,
            'top_k': self.top_k,
            'horizon': self.horizon,
            'tolerance': self.tolerance,
            'allowed_inversions': self.allowed_inversions,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'NtkSettings':
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise DomainError(f"unknown ntk keys: {sorted(unknown)}")
        kwargs = dict(data)
        if 'hidden_dims' in kwargs:
            kwargs['hidden_dims'] = tuple(kwargs['hidden_dims'])
        return cls(**kwargs)


@dataclass
class NtkReport:
    settings: NtkSettings
    eta: float
    eigenvalues: List[float]
    traces: List[ProjectionTrace]
    residual_norms: List[float]
    drift: float
    ordering: RateOrderingReport
    top_k_relative_error: float
    warnings: List[str]

    @property
    def wide_net_ok(self) -> bool:
        return self.top_k_relative_error <= self.settings.tolerance

    def to_dict(self) -> Dict[str, Any]:
        return {
            'settings': self.settings.to_dict(),
            'eta': self.eta,
            'gram_eigenvalues': list(self.eigenvalues),
            'traces': [trace.to_dict() for trace in self.traces],
            'residual_norms': list(self.residual_norms),
            'gram_drift': self.drift,
            'rate_ordering': self.ordering.to_dict(),
            'top_k': self.settings.top_k,
            'horizon': self.settings.horizon,
            'tolerance': self.settings.tolerance,
            'top_k_relative_error': self.top_k_relative_error,
            'wide_net_ok': self.wide_net_ok,
            'warnings': list(self.warnings),
        }


def probe_problem(settings: NtkSettings) -> Tuple[MlpModel, Matrix, np.ndarray]:
    """Seeded network, standard-normal probes and targets for ``settings``."""
    rng = np.random.default_rng([int(settings.seed), 1])
    probes = rng.normal(size=(settings.n_probes, settings.input_dim))
    targets = rng.normal(size=settings.n_probes)
    model = init_model(settings.model_spec, int(settings.seed))
    return model, probes, targets


def run_ntk_analysis(settings: NtkSettings, model: Optional[MlpModel] = None,
                     probes: Optional[Matrix] = None,
                     targets: Optional[Sequence[float]] = None) -> NtkReport:
    """Gram spectrum, projection traces, drift and rate ordering in one report."""
    default_model, default_probes, default_targets = probe_problem(settings)
    model = default_model if model is None else model
    probes = default_probes if probes is None else probes
    targets = default_targets if targets is None else targets

    eta = settings.eta
    if eta is None:
        lambda_max = float(compute_gram(model, probes, settings.output_unit).eigen().eigenvalues[0])
        if lambda_max <= 0:
            raise DomainError("the probe kernel vanishes; set eta explicitly")
        eta = settings.eta_fraction / lambda_max
    logger.info("NTK analysis: %d probes, %d parameters, eta %.6g, %d steps",
                np.asarray(probes).shape[0], model.parameter_count(), eta, settings.steps)

    descent = run_descent(model, probes, targets, eta, settings.steps, settings.output_unit)
    final_gram = compute_gram(descent.final_model, probes, descent.gram.output_unit)
    drift = gram_drift(descent.gram, final_gram)
    ordering = rate_ordering_report(descent.traces, settings.allowed_inversions)
    top = descent.traces[:settings.top_k]
    top_error = max((trace.max_relative_error(settings.horizon) for trace in top), default=0.0)
    logger.info("NTK analysis done: drift %.4g, top-%d relative error %.4g, %d inversion(s)",
                drift, settings.top_k, top_error, ordering.n_inversions)
    return NtkReport(settings, float(eta), [float(v) for v in descent.eigen.eigenvalues],
                     descent.traces, descent.residual_norms, drift, ordering, top_error,
                     descent.warnings)
