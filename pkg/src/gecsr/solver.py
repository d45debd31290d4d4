"""Expectation-consistent phase-retrieval solver with pluggable damping.

One solver layer runs three Bayesian estimators in sequence -- a phase
reconstructor working on the magnitude measurements, an SVD-domain linear
(LMMSE) reconstructor coupling the signal and its transform, and a denoiser
applying the true signal prior -- each followed by an extrinsic (debiasing)
step.  The messages leaving the phase reconstructor and the denoiser pass
through a damping operation whose factor beta(t) is supplied online by a
DampingPolicy, which is where fixed schedules, learned vectors, and
hypernetwork controllers plug in.

All messages carry a complex mean vector and a single scalar variance (the
component average).  Variances are clamped to [V_MIN, V_MAX] throughout.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .model import Sample, SignalPrior, TransformMatrix

V_MIN = 1e-11
V_MAX = 1e11

NMSE_FLOOR_DB = -120.0

_POWER_ITERATIONS = 50
_CF_DEPTH = 40
_CF_CUTOFF = 30.0


class PolicyError(RuntimeError):
    """A damping policy returned an unusable value."""


def clamp_variance(v: float) -> float:
    return min(max(float(v), V_MIN), V_MAX)


@dataclass
class GaussianMessage:
    """Complex mean vector with one shared scalar variance."""

    mean: np.ndarray
    variance: float

    def clamped(self) -> "GaussianMessage":
        return GaussianMessage(self.mean, clamp_variance(self.variance))


def bessel_ratio(kappa):
    """Ratio of modified Bessel functions I1(k)/I0(k) for k >= 0.

    Monotone increasing from 0 towards 1.  Small arguments use a fixed-depth
    continued fraction; above the cutoff an asymptotic expansion takes over
    (both branches agree to ~1e-8 at the switch).  Accepts scalars or arrays.
    """
    k = np.asarray(kappa, dtype=float)
    if np.any(k < 0):
        raise ValueError("bessel_ratio requires non-negative arguments")
    scalar = k.ndim == 0
    k = np.atleast_1d(k)
    out = np.empty_like(k)

    big = k > _CF_CUTOFF
    if np.any(big):
        kl = k[big]
        out[big] = (1.0 - 1.0 / (2.0 * kl) - 1.0 / (8.0 * kl**2)
                    - 1.0 / (8.0 * kl**3) - 25.0 / (128.0 * kl**4))
    small = ~big
    if np.any(small):
        ks = np.where(k[small] > 0, k[small], 1.0)
        r = np.zeros_like(ks)
        for j in range(_CF_DEPTH, 0, -1):
            r = 1.0 / (2.0 * j / ks + r)
        out[small] = np.where(k[small] > 0, r, 0.0)
    return float(out[0]) if scalar else out


def magnitude_posterior(msg: GaussianMessage, y: np.ndarray) -> tuple[np.ndarray, float]:
    """Posterior (mean, avg variance) of z from y = |z + n| under z ~ CN(mu, v).

    Marginalizing the unit-variance noise leaves the phase of z + n as the
    only unknown, with a von Mises posterior of concentration 2 y |mu|/(v+1);
    mixing back through the joint Gaussian gives closed forms in terms of the
    Bessel ratio.  The phase of a zero prior mean is taken as 0.
    """
    v = float(msg.variance)
    mu = msg.mean
    if not np.isfinite(v) or not np.all(np.isfinite(mu)) or not np.all(np.isfinite(y)):
        raise FloatingPointError("non-finite inputs to the phase reconstructor")
    c = v / (v + 1.0)
    amu = np.abs(mu)
    ratio = bessel_ratio((2.0 / (v + 1.0)) * y * amu)
    safe = np.where(amu > 0, amu, 1.0)
    mean = (mu / safe) * ((1.0 - c) * amu + (c * ratio) * y)
    var = c + c * c * float(np.mean(y * y * (1.0 - ratio * ratio)))
    return mean, clamp_variance(var)


def gb_posterior(msg: GaussianMessage, prior: SignalPrior) -> tuple[np.ndarray, float]:
    """Posterior (mean, avg variance) of x under the Bernoulli-Gaussian prior.

    The pseudo-measurement model is r = x + e with e ~ CN(0, v).  Spike/slab
    responsibilities are computed in log space.
    """
    v = float(msg.variance)
    r = msg.mean
    s2 = prior.slab_variance
    gain = s2 / (s2 + v)
    r2 = r.real * r.real + r.imag * r.imag
    if prior.rho >= 1.0:
        mean = gain * r
        return mean, clamp_variance(gain * v)
    log_slab = np.log(prior.rho) - r2 / (s2 + v) - np.log(s2 + v)
    log_spike = np.log1p(-prior.rho) - r2 / v - np.log(v)
    resp = np.exp(log_slab - np.logaddexp(log_slab, log_spike))
    mean = (resp * gain) * r
    second = resp * ((gain * gain) * r2 + gain * v)
    var = float(np.mean(second - (resp * gain) ** 2 * r2))
    return mean, clamp_variance(var)


def lmmse_posterior(msg_z: GaussianMessage, msg_x: GaussianMessage,
                    matrix: TransformMatrix, output: str) -> tuple[np.ndarray, float]:
    """Joint-Gaussian (LMMSE) posterior of x or z = A x in the SVD basis.

    The model couples x ~ CN(mu_x, v_x I) with the pseudo-observation
    mu_z = A x + e, e ~ CN(0, v_z I); per singular mode the posterior variance
    is (1/v_x + s^2/v_z)^{-1}.  `output` selects which variable's (mean,
    averaged variance) is returned: "x" or "z".
    """
    if msg_x.mean.shape != (matrix.n,) or msg_z.mean.shape != (matrix.m,):
        raise ValueError("message shapes do not match the transform size")
    un, unh, v_mat, vh = matrix._factors()
    sig = matrix.singulars
    vx = float(msg_x.variance)
    vz = float(msg_z.variance)
    x_modes = vh @ msg_x.mean
    z_modes = unh @ msg_z.mean
    d = 1.0 / (1.0 / vx + (sig * sig) / vz)
    w = d * (x_modes / vx + sig * (z_modes / vz))
    if output == "x":
        return v_mat @ w, clamp_variance(float(np.mean(d)))
    if output == "z":
        return un @ (sig * w), clamp_variance(float(np.sum(sig * sig * d)) / matrix.m)
    raise ValueError(f"output must be 'x' or 'z', got {output!r}")


def extrinsic(post_mean: np.ndarray, post_var: float,
              prior: GaussianMessage) -> GaussianMessage:
    """Divide the posterior by the incoming prior (Gaussian quotient).

    When the quotient variance is non-positive or above V_MAX (no information
    gained), fall back to a weak message: the posterior mean with variance
    V_MAX.
    """
    if not np.isfinite(post_var) or not np.isfinite(prior.variance):
        raise FloatingPointError("non-finite variance in extrinsic step")
    inv = 1.0 / post_var - 1.0 / prior.variance
    if inv <= 1.0 / V_MAX:
        return GaussianMessage(post_mean, V_MAX)
    v2 = 1.0 / inv
    mean = v2 * (post_mean / post_var - prior.mean / prior.variance)
    return GaussianMessage(mean, clamp_variance(v2))


def damp(current: tuple[np.ndarray, float], previous: tuple[np.ndarray, float],
         beta: float) -> tuple[np.ndarray, float]:
    """Convex combination beta * previous + (1 - beta) * current."""
    if not (0.0 <= beta <= 1.0):
        warnings.warn(f"damping factor {beta} outside [0, 1]; clamping")
        beta = min(max(beta, 0.0), 1.0)
    mean = beta * previous[0] + (1.0 - beta) * current[0]
    var = beta * previous[1] + (1.0 - beta) * current[1]
    return mean, var


def spectral_init(y: np.ndarray, matrix: TransformMatrix
                  ) -> tuple[GaussianMessage, GaussianMessage]:
    """Leading-eigenvector initialization from the weighted covariance.

    Runs a fixed 50-step power iteration on S = (1/M) A^H diag(y^2) A from a
    deterministic unit start vector, then scales the eigenvector so that
    ||A x0||^2 matches the measurement energy with the expected noise energy
    subtracted.  Returns the z-side message (A x0, SNR) and the x-side
    message (x0, 1).
    """
    m, n = matrix.m, matrix.n
    snr = clamp_variance(matrix.snr)
    y2 = y * y
    total = float(np.sum(y2))
    if total == 0.0:
        return (GaussianMessage(np.zeros(m, complex), snr),
                GaussianMessage(np.zeros(n, complex), 1.0))
    x = np.ones(n, dtype=complex) / np.sqrt(n)
    for _ in range(_POWER_ITERATIONS):
        w = matrix.apply(x)
        w *= y2
        x = matrix.adjoint(w) / m
        norm = np.linalg.norm(x)
        if norm == 0.0:
            break
        x /= norm
    target = max(total - m, 1e-6)
    ax = matrix.apply(x)
    norm_ax = float(np.linalg.norm(ax))
    if norm_ax > 0.0:
        scale = np.sqrt(target) / norm_ax
        x = x * scale
        ax = ax * scale
    return GaussianMessage(ax, snr), GaussianMessage(x, 1.0)


def align_phase(x_true: np.ndarray, x_est: np.ndarray) -> np.ndarray:
    """Rotate the estimate by the global phase minimizing the L2 distance."""
    if x_true.shape != x_est.shape:
        raise ValueError("aligned vectors must have equal length")
    inner = np.vdot(x_est, x_true)
    if inner == 0:
        return x_est
    return (inner / abs(inner)) * x_est


def nmse_db(x_true: np.ndarray, x_est: np.ndarray) -> float:
    """Normalized squared error in dB, floored at -120 dB."""
    denom = float(np.sum(np.abs(x_true) ** 2))
    if denom == 0.0:
        raise ValueError("NMSE undefined for a zero reference signal")
    num = float(np.sum(np.abs(x_true - x_est) ** 2))
    if num == 0.0:
        return NMSE_FLOOR_DB
    return max(10.0 * np.log10(num / denom), NMSE_FLOOR_DB)


@dataclass(frozen=True)
class PolicyFeatures:
    """Per-query inputs available to a damping policy."""

    sigma_tilde: np.ndarray
    sqrt_snr: float
    beta_prev: float
    beta_prev2: float
    v_ext: float


class DampingPolicy:
    """Online source of damping factors, queried once per side per layer."""

    def reset(self) -> None:
        """Clear per-run state; called by the solver before each run."""

    def beta(self, side: str, t: int, features: PolicyFeatures) -> float:
        raise NotImplementedError


class SchedulePolicy(DampingPolicy):
    """Fixed schedule beta(t), identical for both sides."""

    def __init__(self, schedule: Callable[[int], float], name: str = "schedule"):
        self._schedule = schedule
        self.name = name

    def beta(self, side: str, t: int, features: PolicyFeatures) -> float:
        return float(self._schedule(t))


def geometric_schedule(base: float = 0.9) -> SchedulePolicy:
    """beta(t) = base^t."""
    return SchedulePolicy(lambda t: base**t, name=f"schedule_{base}^t")


def constant_schedule(value: float = 0.5) -> SchedulePolicy:
    """beta(t) = value for every layer."""
    return SchedulePolicy(lambda t: value, name=f"schedule_{value}")


@dataclass
class SolverTrace:
    """Per-layer record of one solver run."""

    x_means: list = field(default_factory=list)
    nmse_db: list = field(default_factory=list)
    beta_z: list = field(default_factory=list)
    beta_x: list = field(default_factory=list)
    v2z: list = field(default_factory=list)
    v2x: list = field(default_factory=list)
    init_nmse_db: float = 0.0
    diverged: bool = False

    @property
    def layers(self) -> int:
        return len(self.x_means)


def _query(policy: DampingPolicy, side: str, t: int,
           features: PolicyFeatures) -> float:
    beta = policy.beta(side, t, features)
    if not np.isfinite(beta):
        raise PolicyError(f"policy returned non-finite damping factor {beta}")
    return min(max(float(beta), 0.0), 1.0)


def run_solver(sample: Sample, prior: SignalPrior, policy: DampingPolicy,
               layers: int,
               init: Optional[tuple[GaussianMessage, GaussianMessage]] = None
               ) -> SolverTrace:
    """Run the layered solver and record the per-layer trace.

    Each layer executes: phase reconstructor -> extrinsic -> damping (z side)
    -> LMMSE towards x -> extrinsic -> denoiser -> extrinsic -> damping
    (x side) -> LMMSE towards z -> extrinsic.  Damping histories start at the
    spectral-initialization messages; damping-factor histories start at 1.
    A non-finite message truncates the run and flags divergence.

    `init` may carry a precomputed spectral initialization so the (pure)
    layer recursion can be re-run cheaply under different policies.
    """
    if layers < 1:
        raise ValueError(f"need at least one layer, got {layers}")
    matrix = sample.matrix
    msg_z0, msg_x0 = spectral_init(sample.y, matrix) if init is None else init
    sigma_tilde = matrix.sigma_tilde
    sqrt_snr = float(np.sqrt(matrix.snr))
    policy.reset()

    trace = SolverTrace()
    trace.init_nmse_db = nmse_db(sample.x, align_phase(sample.x, msg_x0.mean))

    msg_1z = GaussianMessage(msg_z0.mean, clamp_variance(msg_z0.variance))
    msg_2x = GaussianMessage(msg_x0.mean, clamp_variance(msg_x0.variance))
    hist_z = (msg_1z.mean, msg_1z.variance)
    hist_x = (msg_2x.mean, msg_2x.variance)
    beta_hist = {"z": (1.0, 1.0), "x": (1.0, 1.0)}

    def features_for(side: str, v_ext: float) -> PolicyFeatures:
        prev, prev2 = beta_hist[side]
        return PolicyFeatures(sigma_tilde=sigma_tilde, sqrt_snr=sqrt_snr,
                              beta_prev=prev, beta_prev2=prev2, v_ext=v_ext)

    for t in range(1, layers + 1):
        post_z, var_z = magnitude_posterior(msg_1z, sample.y)
        ext_z = extrinsic(post_z, var_z, msg_1z)
        beta_z = _query(policy, "z", t, features_for("z", ext_z.variance))
        beta_hist["z"] = (beta_z, beta_hist["z"][0])
        hist_z = damp((ext_z.mean, ext_z.variance), hist_z, beta_z)
        msg_2z = GaussianMessage(hist_z[0], clamp_variance(hist_z[1]))

        post_x, var_x = lmmse_posterior(msg_2z, msg_2x, matrix, output="x")
        msg_1x = extrinsic(post_x, var_x, msg_2x)

        den_x, den_var = gb_posterior(msg_1x, prior)
        if not np.all(np.isfinite(den_x)):
            trace.diverged = True
            break
        trace.x_means.append(den_x)
        trace.nmse_db.append(nmse_db(sample.x, align_phase(sample.x, den_x)))

        ext_x = extrinsic(den_x, den_var, msg_1x)
        beta_x = _query(policy, "x", t, features_for("x", ext_x.variance))
        beta_hist["x"] = (beta_x, beta_hist["x"][0])
        hist_x = damp((ext_x.mean, ext_x.variance), hist_x, beta_x)
        msg_2x = GaussianMessage(hist_x[0], clamp_variance(hist_x[1]))

        trace.beta_z.append(beta_z)
        trace.beta_x.append(beta_x)
        trace.v2z.append(ext_z.variance)
        trace.v2x.append(ext_x.variance)

        post_z2, var_z2 = lmmse_posterior(msg_2z, msg_2x, matrix, output="z")
        msg_1z = extrinsic(post_z2, var_z2, msg_2z)

        if not (np.all(np.isfinite(msg_1z.mean)) and np.all(np.isfinite(msg_2x.mean))):
            trace.diverged = True
            break
    return trace


def trace_csv_rows(trace: SolverTrace, sample_id: int) -> list[str]:
    """Long-format CSV rows (sample_id, t, beta_z, beta_x, v2z, v2x, nmse_db)."""
    rows = []
    for t in range(trace.layers):
        rows.append(f"{sample_id},{t + 1},{trace.beta_z[t]!r},{trace.beta_x[t]!r},"
                    f"{trace.v2z[t]!r},{trace.v2x[t]!r},{trace.nmse_db[t]!r}")
    return rows


TRACE_CSV_HEADER = "sample_id,t,beta_z,beta_x,v2z,v2x,nmse_db"


def write_trace_csv(path: str, traces) -> None:
    """Write one CSV for a sequence of traces, sample ids in order."""
    lines = [TRACE_CSV_HEADER]
    for sample_id, trace in enumerate(traces):
        lines.extend(trace_csv_rows(trace, sample_id))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
