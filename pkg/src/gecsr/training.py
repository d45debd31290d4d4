"""Training and evaluation of damping controllers.

Three gradient estimators drive the same Adam/SGD loop over the unrolled
solver loss: simultaneous perturbation (SPSA) with common random numbers --
the same batch, measurements, and spectral initializations are reused for
both perturbation signs -- componentwise central differences as a
slow-but-exact-to-O(step^2) cross-check, and exact reverse-mode gradients
from the adjoint module.  grad_check compares SPSA against central
differences on a quadratic surrogate and on a tiny end-to-end scenario.

The per-sample loss is the phase-aligned squared error summed over layers;
a batch is scored by its mean.  Divergent runs are charged the loss clip
value so one bad sample cannot destroy a gradient estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import hypernets, model, solver
from .hypernets import (
    checkpoint_payload,
    init_variant_params,
    params_from_vector,
    params_to_vector,
    policy_for_params,
)
from .model import DatasetManifest, Sample, SignalPrior
from .solver import DampingPolicy, GaussianMessage, SolverTrace, align_phase, run_solver


class EstimatorError(RuntimeError):
    """A gradient estimator hit a non-finite loss; carries the parameters."""

    def __init__(self, message: str, theta: Optional[np.ndarray] = None):
        super().__init__(message)
        self.theta = theta


class TrainingAborted(RuntimeError):
    """Training stopped because the solver diverged on most of a batch."""


class TruncatedTraceError(ValueError):
    """A trace is shorter than the number of layers being scored."""


class IncompatibleError(RuntimeError):
    """Checkpoint and evaluation scenario do not fit together."""


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 0.05
    batch_size: int = 100
    epochs: int = 1
    layers: int = 10
    grad_estimator: str = "spsa"
    grad_pairs: int = 8
    grad_perturbation: float = 0.05
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    hidden: int = 32
    heads: int = 4
    tied: bool = False
    loss_clip: float = 1e6
    abort_fraction: float = 0.5
    keep_best: bool = True
    grad_clip_norm: float = 0.0  # 0 disables; >0 rescales large gradients
    direct_init_base: float = 0.9  # warm-start schedule for direct logits

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.grad_estimator not in ("spsa", "central_diff", "adjoint"):
            raise ValueError(f"unknown gradient estimator {self.grad_estimator!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @staticmethod
    def from_dict(raw: dict) -> "TrainerConfig":
        known = set(TrainerConfig.__dataclass_fields__)
        unknown = raw.keys() - known
        if unknown:
            raise ValueError(f"unknown trainer fields: {sorted(unknown)}")
        return TrainerConfig(**raw)


@dataclass
class LossReport:
    total: float
    per_layer: np.ndarray
    per_sample: np.ndarray


def sample_loss(x_true: np.ndarray, trace: SolverTrace, layers: int) -> float:
    """Phase-aligned squared error summed over the first `layers` estimates."""
    if trace.layers < layers:
        raise TruncatedTraceError(
            f"trace has {trace.layers} layers, need {layers}")
    total = 0.0
    for t in range(layers):
        diff = x_true - align_phase(x_true, trace.x_means[t])
        total += float(np.sum(diff.real**2 + diff.imag**2))
    return total


def multi_layer_loss(batch: Sequence[tuple[np.ndarray, SolverTrace]],
                     layers: int) -> LossReport:
    """Mean over samples of the per-layer aligned squared errors."""
    per_sample = np.zeros(len(batch))
    per_layer = np.zeros(layers)
    for i, (x_true, trace) in enumerate(batch):
        if trace.layers < layers:
            raise TruncatedTraceError(
                f"trace {i} has {trace.layers} layers, need {layers}")
        for t in range(layers):
            diff = x_true - align_phase(x_true, trace.x_means[t])
            term = float(np.sum(diff.real**2 + diff.imag**2))
            per_layer[t] += term
            per_sample[i] += term
    per_layer /= max(len(batch), 1)
    total = float(np.mean(per_sample)) if len(batch) else 0.0
    return LossReport(total=total, per_layer=per_layer, per_sample=per_sample)


@dataclass
class SpsaEstimate:
    gradient: np.ndarray
    loss_mean: float
    evaluations: int


def spsa_gradient(loss_fn: Callable[[np.ndarray], float], theta: np.ndarray,
                  pairs: int, perturbation: float,
                  rng: np.random.Generator) -> SpsaEstimate:
    """Simultaneous-perturbation gradient estimate.

    Averages [L(theta + c D) - L(theta - c D)] / (2c) * D over `pairs`
    independent Rademacher directions D (whose componentwise inverse is D
    itself).  Also reports the mean of all loss evaluations, a free
    O(perturbation^2)-accurate estimate of L(theta).
    """
    if pairs < 1:
        raise ValueError("need at least one perturbation pair")
    if perturbation <= 0:
        raise ValueError("perturbation must be positive")
    grad = np.zeros_like(theta)
    loss_sum = 0.0
    for _ in range(pairs):
        delta = rng.integers(0, 2, theta.size) * 2.0 - 1.0
        plus = loss_fn(theta + perturbation * delta)
        minus = loss_fn(theta - perturbation * delta)
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise EstimatorError("non-finite loss during SPSA", theta=theta)
        grad += (plus - minus) / (2.0 * perturbation) * delta
        loss_sum += plus + minus
    return SpsaEstimate(gradient=grad / pairs, loss_mean=loss_sum / (2 * pairs),
                        evaluations=2 * pairs)


def central_diff_gradient(loss_fn: Callable[[np.ndarray], float],
                          theta: np.ndarray, step: float) -> np.ndarray:
    """Componentwise central differences (2 * dim evaluations)."""
    if step <= 0:
        raise ValueError("step must be positive")
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        probe = theta.copy()
        probe[i] = theta[i] + step
        plus = loss_fn(probe)
        probe[i] = theta[i] - step
        minus = loss_fn(probe)
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise EstimatorError("non-finite loss during central differences",
                                 theta=theta)
        grad[i] = (plus - minus) / (2.0 * step)
    return grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @staticmethod
    def fresh(dim: int) -> "AdamState":
        return AdamState(m=np.zeros(dim), v=np.zeros(dim), step=0)


def adam_step(theta: np.ndarray, grad: np.ndarray, state: AdamState,
              config: TrainerConfig) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update."""
    b1, b2 = config.adam_beta1, config.adam_beta2
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    step = state.step + 1
    m_hat = m / (1.0 - b1**step)
    v_hat = v / (1.0 - b2**step)
    theta = theta - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return theta, AdamState(m=m, v=v, step=step)


def _slim_sample(sample: Sample) -> Sample:
    """Replace the full left unitary by its active column block (cache diet)."""
    mat = sample.matrix
    k = len(mat.singulars)
    if mat.left_unitary.shape[1] == k:
        return sample
    slim = model.TransformMatrix(np.ascontiguousarray(mat.left_unitary[:, :k]),
                                 mat.right_unitary, mat.singulars)
    return Sample(x=sample.x, y=sample.y, matrix=slim, snr=sample.snr,
                  rho=sample.rho)


class _SampleCache:
    """Samples and spectral initializations, generated once per index."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._store: dict[int, tuple[Sample, SignalPrior,
                                     tuple[GaussianMessage, GaussianMessage]]] = {}

    def get(self, index: int):
        hit = self._store.get(index)
        if hit is None:
            sample = _slim_sample(model.sample_at(self.manifest, index))
            prior = SignalPrior(sample.rho)
            init = solver.spectral_init(sample.y, sample.matrix)
            hit = (sample, prior, init)
            self._store[index] = hit
        return hit


@dataclass
class TrainResult:
    checkpoint: dict
    history: list
    no_progress: bool
    params: object


def _history_moving_average(history: list, window: int = 10) -> tuple[float, float]:
    losses = [row[1] for row in history]
    head = losses[:window]
    tail = losses[-window:]
    return float(np.mean(head)), float(np.mean(tail))


def train(variant: str, manifest: DatasetManifest, config: TrainerConfig) -> TrainResult:
    """Train one controller variant on a manifest.

    Iterates epochs x batches over the manifest; every batch regenerates its
    samples from the per-index RNG streams (cached, so later epochs reuse
    them), runs the solver under the candidate parameters, and updates via
    the configured estimator and optimizer.  History rows are
    (step, batch_loss, moving_avg) where batch_loss is the estimator's own
    evaluation average at that step.
    """
    params = init_variant_params(variant, manifest.n, config.layers,
                                 hidden=config.hidden, heads=config.heads,
                                 tied=config.tied, seed=config.seed,
                                 direct_init_base=config.direct_init_base)
    theta = params_to_vector(params)
    cache = _SampleCache(manifest)
    direction_rng = np.random.default_rng([config.seed, 0x5B5A])
    batches = manifest.count // config.batch_size
    if config.epochs > 0 and batches == 0:
        raise ValueError("manifest smaller than one batch")

    def batch_loss(vec: np.ndarray, indices: Sequence[int]) -> float:
        candidate = params_from_vector(params, vec)
        policy = policy_for_params(candidate)
        total = 0.0
        diverged = 0
        for i in indices:
            sample, prior, init = cache.get(i)
            trace = run_solver(sample, prior, policy, config.layers, init=init)
            if trace.diverged or trace.layers < config.layers:
                diverged += 1
                total += config.loss_clip
            else:
                total += min(sample_loss(sample.x, trace, config.layers),
                             config.loss_clip)
        if diverged > config.abort_fraction * len(indices):
            raise TrainingAborted(
                f"solver diverged on {diverged}/{len(indices)} samples of a batch")
        return total / len(indices)

    def batch_adjoint(vec: np.ndarray, indices: Sequence[int]):
        from . import adjoint as adj
        candidate = params_from_vector(params, vec)
        total = 0.0
        grad = np.zeros_like(vec)
        diverged = 0
        for i in indices:
            sample, prior, init = cache.get(i)
            loss_i, grads_i, div_i = adj.loss_and_gradient(
                sample, prior, candidate, config.layers, init=init,
                loss_clip=config.loss_clip)
            total += loss_i
            grad += adj.gradient_vector(candidate, grads_i)
            diverged += int(div_i)
        if diverged > config.abort_fraction * len(indices):
            raise TrainingAborted(
                f"solver diverged on {diverged}/{len(indices)} samples of a batch")
        return total / len(indices), grad / len(indices)

    history: list[tuple[int, float, float]] = []
    adam = AdamState.fresh(theta.size)
    step = 0
    recent: list[float] = []
    best_theta = theta.copy()
    best_ma = float("inf")
    for _epoch in range(config.epochs):
        for b in range(batches):
            indices = range(b * config.batch_size, (b + 1) * config.batch_size)
            fn = lambda vec: batch_loss(vec, indices)
            if config.grad_estimator == "spsa":
                est = spsa_gradient(fn, theta, config.grad_pairs,
                                    config.grad_perturbation, direction_rng)
                grad, observed = est.gradient, est.loss_mean
            elif config.grad_estimator == "adjoint":
                observed, grad = batch_adjoint(theta, indices)
            else:
                observed = fn(theta)
                grad = central_diff_gradient(fn, theta, config.grad_perturbation)
            if config.grad_clip_norm > 0.0:
                norm = float(np.linalg.norm(grad))
                if norm > config.grad_clip_norm:
                    grad = grad * (config.grad_clip_norm / norm)
            recent.append(observed)
            moving = float(np.mean(recent[-10:]))
            # SPSA wanders around the optimum; remember the iterate whose
            # recent training loss was best (no test data involved).
            if len(recent) >= min(5, config.epochs * batches) and moving < best_ma:
                best_ma = moving
                best_theta = theta.copy()
            if config.optimizer == "adam":
                theta, adam = adam_step(theta, grad, adam, config)
            else:
                theta = theta - config.learning_rate * grad
            history.append((step, observed, moving))
            step += 1

    if config.keep_best and history:
        theta = best_theta
    trained = params_from_vector(params, theta)
    no_progress = False
    if history:
        start_ma, end_ma = _history_moving_average(history)
        no_progress = not (end_ma < start_ma)
    metadata = {
        "train_manifest_hash": manifest.hash(),
        "trainer": config.to_dict(),
        "steps": step,
        "final_loss": history[-1][1] if history else None,
        "no_progress": no_progress,
    }
    optimizer_state = {"m": adam.m.tolist(), "v": adam.v.tolist(), "step": adam.step}
    payload = checkpoint_payload(variant, trained, n=manifest.n,
                                 layers=config.layers, metadata=metadata,
                                 optimizer=optimizer_state)
    return TrainResult(checkpoint=payload, history=history,
                       no_progress=no_progress, params=trained)


class ExtendedPolicy(DampingPolicy):
    """Wraps a fixed-depth policy; beyond its depth the factor is constant."""

    def __init__(self, base: DampingPolicy, base_layers: int, fill: float = 0.5):
        self.base = base
        self.base_layers = base_layers
        self.fill = fill

    def reset(self) -> None:
        self.base.reset()

    def beta(self, side: str, t: int, features) -> float:
        if t <= self.base_layers:
            return self.base.beta(side, t, features)
        return self.fill


class FeatureResamplePolicy(DampingPolicy):
    """Adapts the spectrum-shape feature to a controller of another width.

    The normalized singular spectrum is linearly resampled to the trained
    input width and renormalized to unit L2 norm, which lets a controller
    trained at one signal dimension drive scenarios of another (the image
    demo reconstructs thousands of pixels with controllers trained at
    N = 100).  Remaining features pass through unchanged.
    """

    def __init__(self, base: DampingPolicy, trained_n: int):
        self.base = base
        self.trained_n = trained_n
        self._cache: Optional[tuple[int, np.ndarray]] = None

    def reset(self) -> None:
        self.base.reset()

    def _resample(self, sigma_tilde: np.ndarray) -> np.ndarray:
        cached = self._cache
        if cached is not None and cached[0] == id(sigma_tilde):
            return cached[1]
        n = sigma_tilde.shape[0]
        grid_out = np.linspace(0.0, 1.0, self.trained_n)
        grid_in = np.linspace(0.0, 1.0, n)
        shape = np.interp(grid_out, grid_in, sigma_tilde)
        norm = float(np.linalg.norm(shape))
        if norm > 0:
            shape = shape / norm
        self._cache = (id(sigma_tilde), shape)
        return shape

    def beta(self, side: str, t: int, features) -> float:
        if features.sigma_tilde.shape[0] != self.trained_n:
            features = replace(features,
                               sigma_tilde=self._resample(features.sigma_tilde))
        return self.base.beta(side, t, features)


STATIC_VARIANTS = ("net_direct", "hypernet", "hypernet_attn")


def policy_for_evaluation(source: Union[DampingPolicy, dict], layers: int,
                          n: Optional[int] = None) -> DampingPolicy:
    """Build the evaluation policy for a checkpoint or pass one through.

    Fixed-depth variants evaluated beyond their trained depth fall back to a
    constant 0.5; recurrent variants extend natively.  A checkpoint trained
    at a different signal dimension than the target scenario is rejected.
    """
    if isinstance(source, DampingPolicy):
        return source
    payload = source
    if n is not None and int(payload["n"]) != n:
        raise IncompatibleError(
            f"checkpoint trained at N={payload['n']}, scenario has N={n}")
    policy = hypernets.policy_from_checkpoint(payload)
    trained_layers = int(payload["layers"])
    if payload["variant"] in STATIC_VARIANTS and layers > trained_layers:
        return ExtendedPolicy(policy, trained_layers, fill=0.5)
    return policy


@dataclass
class EvalResult:
    """Per-layer reconstruction quality over a test manifest."""

    variant: str
    layers: int
    nmse_db: np.ndarray        # (samples, layers)
    init_nmse_db: np.ndarray   # (samples,)
    diverged: np.ndarray       # (samples,) bool

    @property
    def mean_db(self) -> np.ndarray:
        return self.nmse_db.mean(axis=0)

    @property
    def median_db(self) -> np.ndarray:
        return np.median(self.nmse_db, axis=0)


def evaluate(source: Union[DampingPolicy, dict], manifest: DatasetManifest,
             layers: int, variant: str = "policy") -> EvalResult:
    """Run the solver over every manifest sample and collect NMSE curves.

    Divergent runs keep their recorded prefix; the remaining layers are
    charged 0 dB (no better than a zero estimate) and the run is flagged.
    """
    if isinstance(source, dict):
        variant = source.get("variant", variant)
    policy = policy_for_evaluation(source, layers, n=manifest.n)
    curves = np.zeros((manifest.count, layers))
    inits = np.zeros(manifest.count)
    flags = np.zeros(manifest.count, dtype=bool)
    for i in range(manifest.count):
        sample = model.sample_at(manifest, i)
        trace = run_solver(sample, SignalPrior(sample.rho), policy, layers)
        got = trace.layers
        curves[i, :got] = trace.nmse_db
        if got < layers:
            curves[i, got:] = 0.0
        inits[i] = trace.init_nmse_db
        flags[i] = trace.diverged
    return EvalResult(variant=variant, layers=layers, nmse_db=curves,
                      init_nmse_db=inits, diverged=flags)


@dataclass
class GradCheckReport:
    quadratic_cosine: float
    end_to_end_cosine: float
    end_to_end_rel_norm_error: float


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def grad_check(pairs: int = 64, perturbation: float = 1e-3,
               seed: int = 0) -> GradCheckReport:
    """Compare SPSA against exact/central-difference gradients.

    Part one uses a 2-D quadratic with an analytic gradient; part two uses
    the true training loss of a tiny static controller (60 parameters) on a
    fixed (16, 8), 3-layer scenario, where central differences serve as the
    reference.
    """
    if perturbation <= 0:
        raise ValueError("perturbation must be positive")
    rng = np.random.default_rng(seed)

    anchor = np.array([0.3, -1.2])
    quad = lambda th: float(np.sum((th - anchor) ** 2))
    theta_q = np.array([1.0, -2.0])
    est_q = spsa_gradient(quad, theta_q, pairs, perturbation, rng)
    quad_cos = _cosine(est_q.gradient, 2.0 * (theta_q - anchor))

    manifest = DatasetManifest(seed=20, count=4, m=16, n=8,
                               matrix_class=("gaussian",),
                               snr_db_range=(20.0, 20.0), rho_range=(0.5, 0.5))
    cache = _SampleCache(manifest)
    template = hypernets.init_hypernet_params(manifest.n, layers=3, hidden=5,
                                              attention=False, seed=seed)
    theta_e = params_to_vector(template)
    if theta_e.size > 64:
        raise ValueError("end-to-end surrogate exceeds 64 parameters")

    def end_loss(vec: np.ndarray) -> float:
        policy = hypernets.StaticHyperNetPolicy(params_from_vector(template, vec))
        total = 0.0
        for i in range(manifest.count):
            sample, prior, init = cache.get(i)
            trace = run_solver(sample, prior, policy, 3, init=init)
            total += min(sample_loss(sample.x, trace, 3), 1e6)
        return total / manifest.count

    est_e = spsa_gradient(end_loss, theta_e, max(pairs, 64), perturbation, rng)
    reference = central_diff_gradient(end_loss, theta_e, perturbation)
    cos = _cosine(est_e.gradient, reference)
    ref_norm = float(np.linalg.norm(reference))
    rel = (float(np.linalg.norm(est_e.gradient - reference)) / ref_norm
           if ref_norm > 0 else float("inf"))
    return GradCheckReport(quadratic_cosine=quad_cos, end_to_end_cosine=cos,
                           end_to_end_rel_norm_error=rel)
