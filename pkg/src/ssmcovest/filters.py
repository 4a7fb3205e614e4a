"""Assimilation engines.

Four filters share the :class:`Ensemble` currency:

* a mapping particle filter that transports particles along a kernelized
  steepest-descent flow toward the analysis density (no resampling),
* a classical sampling-importance-resampling particle filter,
* the exact Kalman filter with a Rauch-Tung-Striebel smoother for
  linear-Gaussian problems (the oracle the others are tested against),
* a stochastic ensemble Kalman filter with a fixed-interval ensemble
  smoother.

All per-particle work is vectorized; a filter step is one logical operation
and assimilation cycles are strictly sequential.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from .errors import (
    AllWeightsZero,
    DimensionMismatch,
    NonFiniteState,
    SingularInnovationCovariance,
)
from .numerics import LOG_2PI, SpdMatrix, mvn_sample

__all__ = [
    "Ensemble",
    "VmpfOptions",
    "GaussianStateSpace",
    "systematic_resample",
    "sir_step",
    "vmpf_kernel_and_grad",
    "vmpf_log_posterior",
    "vmpf_log_posterior_gradient",
    "vmpf_assimilate",
    "kf_step",
    "kf_filter",
    "rts_smoother",
    "enkf_step",
    "enkf_filter",
    "enks",
    "KalmanFilterResult",
    "EnkfRun",
]


@dataclass(frozen=True)
class Ensemble:
    """Weighted particle representation of one filter density.

    Attributes
    ----------
    particles : ndarray, shape (n_particles, state_dim)
    weights : ndarray, shape (n_particles,)
        Nonnegative, summing to one within 1e-12.
    cycle_index : int
        Assimilation cycle this ensemble represents.
    """

    particles: np.ndarray
    weights: np.ndarray
    cycle_index: int = 0

    def __post_init__(self):
        particles = np.atleast_2d(np.asarray(self.particles, dtype=float))
        weights = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "particles", particles)
        object.__setattr__(self, "weights", weights)
        if particles.shape[0] < 1:
            raise ValueError("an ensemble needs at least one particle")
        if weights.shape != (particles.shape[0],):
            raise DimensionMismatch(
                f"{weights.shape[0] if weights.ndim else 0} weights for "
                f"{particles.shape[0]} particles"
            )
        if np.any(weights < 0):
            raise ValueError("weights must be nonnegative")
        if abs(float(weights.sum()) - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {weights.sum()!r}, expected 1")

    @property
    def n_particles(self):
        return self.particles.shape[0]

    @property
    def state_dim(self):
        return self.particles.shape[1]

    def mean(self):
        return self.weights @ self.particles

    def ess(self):
        """Effective sample size 1 / sum(w^2)."""
        return 1.0 / float(np.sum(self.weights**2))

    @classmethod
    def uniform(cls, particles, cycle_index=0):
        particles = np.atleast_2d(np.asarray(particles, dtype=float))
        n = particles.shape[0]
        return cls(particles, np.full(n, 1.0 / n), cycle_index)


@dataclass(frozen=True)
class VmpfOptions:
    """Tuning knobs of the mapping particle filter flow.

    Attributes
    ----------
    step_size : float
        Initial flow step; halved whenever a step makes the mean analytic
        log-posterior of the particle set decrease or a particle go
        non-finite, never below `min_step_size`.
    max_map_iterations : int
        Cap on mapping iterations per assimilation cycle.
    grad_norm_tolerance : float
        Stop once the mean flow magnitude over particles drops below this.
    kernel_bandwidth_rule : str
        ``"scaled-identity"`` scales the model error covariance by the
        median pairwise squared distance (in that covariance's metric)
        over ``2 ln(n_particles)``; ``"median-heuristic"`` uses the same
        factor on Euclidean distances times the identity. Recomputed every
        mapping iteration.
    """

    step_size: float = 0.05
    max_map_iterations: int = 100
    grad_norm_tolerance: float = 1e-3
    kernel_bandwidth_rule: str = "scaled-identity"
    min_step_size: float = 1e-4

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.kernel_bandwidth_rule not in ("scaled-identity", "median-heuristic"):
            raise ValueError(f"unknown kernel bandwidth rule {self.kernel_bandwidth_rule!r}")


@dataclass(frozen=True)
class GaussianStateSpace:
    """Linear-Gaussian state-space system for the exact Kalman recursions."""

    transition: np.ndarray
    observation: np.ndarray
    q: SpdMatrix
    r: SpdMatrix
    initial_mean: np.ndarray
    initial_cov: SpdMatrix

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.transition, dtype=float))
        h = np.atleast_2d(np.asarray(self.observation, dtype=float))
        mean = np.atleast_1d(np.asarray(self.initial_mean, dtype=float))
        object.__setattr__(self, "transition", a)
        object.__setattr__(self, "observation", h)
        object.__setattr__(self, "initial_mean", mean)
        n = a.shape[0]
        if a.shape != (n, n):
            raise DimensionMismatch("transition matrix must be square")
        if h.shape[1] != n:
            raise DimensionMismatch("observation matrix columns must match the state")
        if self.q.dim != n or self.r.dim != h.shape[0]:
            raise DimensionMismatch("covariance dimensions do not match the system")
        if mean.shape != (n,) or self.initial_cov.dim != n:
            raise DimensionMismatch("initial moments do not match the state dimension")

    @property
    def state_dim(self):
        return self.transition.shape[0]

    @property
    def obs_dim(self):
        return self.observation.shape[0]


# ---------------------------------------------------------------------------
# Sampling-importance-resampling
# ---------------------------------------------------------------------------


def systematic_resample(weights, rng):
    """Systematic resampling: ancestor indices from one uniform draw.

    The expected copy count of particle ``j`` is ``n * weights[j]``; with
    uniform weights every index appears exactly once.
    """
    weights = np.asarray(weights, dtype=float)
    n = weights.shape[0]
    u = rng.generator.uniform(0.0, 1.0 / n)
    points = u + np.arange(n) / n
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0  # guard roundoff in the last bin
    return np.searchsorted(cumulative, points, side="right")


def _log_likelihood_rows(points, y, model, r):
    """Observation log-likelihood of each particle row."""
    innov = y - np.asarray(model.observe(points), dtype=float)
    maha = r.maha_sq(innov)
    return -0.5 * r.dim * LOG_2PI - 0.5 * r.log_det - 0.5 * maha


def _sir_propagate_weight(ens, y, model, q, r, rng):
    """Propagate with model noise and compute normalized posterior weights."""
    n = ens.n_particles
    noise = mvn_sample(np.zeros(q.dim), q, rng, n)
    proposed = np.asarray(model.propagate(ens.particles), dtype=float) + noise
    log_w = np.log(ens.weights, out=np.full(n, -np.inf), where=ens.weights > 0)
    log_w = log_w + _log_likelihood_rows(proposed, y, model, r)
    norm = logsumexp(log_w)
    if not np.isfinite(norm):
        raise AllWeightsZero(
            f"all {n} particle likelihoods vanished at cycle {ens.cycle_index + 1}"
        )
    weights = np.exp(log_w - norm)
    weights = weights / weights.sum()
    return proposed, weights


def sir_step(ens, y, model, q, r, rng):
    """One sampling-importance-resampling cycle.

    Particles are propagated with additive model noise, reweighted by the
    observation likelihood (normalized through log-sum-exp), and
    systematically resampled every cycle; the returned ensemble carries
    uniform weights.

    Raises
    ------
    AllWeightsZero
        If every particle log-likelihood underflows, which signals filter
        divergence.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    proposed, weights = _sir_propagate_weight(ens, y, model, q, r, rng)
    ancestors = systematic_resample(weights, rng)
    n = ens.n_particles
    return Ensemble(proposed[ancestors], np.full(n, 1.0 / n), ens.cycle_index + 1)


# ---------------------------------------------------------------------------
# Mapping particle filter
# ---------------------------------------------------------------------------


def vmpf_kernel_and_grad(x_src, x_dst, bandwidth):
    """Gaussian kernel value and its gradient with respect to `x_src`.

    ``K = exp(-0.5 d^T B^{-1} d)`` with ``d = x_src - x_dst``; the gradient
    is ``-K B^{-1} d``.
    """
    x_src = np.atleast_1d(np.asarray(x_src, dtype=float))
    x_dst = np.atleast_1d(np.asarray(x_dst, dtype=float))
    d = x_src - x_dst
    k = float(np.exp(-0.5 * bandwidth.maha_sq(d)))
    return k, -k * bandwidth.solve(d)


def _forecast_mixture_terms(points, images, log_prev_w, q):
    """Log mixture terms of the one-step forecast density at `points`.

    Returns ``(log_terms, log_norm)`` where ``log_terms[p, i]`` is
    ``log w_i - 0.5 maha(points[p] - images[i]; q)`` and ``log_norm`` its
    log-sum-exp over mixture components.
    """
    diffs = points[:, None, :] - images[None, :, :]
    maha = (diffs @ q.inv * diffs).sum(axis=-1)
    log_terms = log_prev_w[None, :] - 0.5 * maha
    return log_terms, logsumexp(log_terms, axis=1)


def _log_weights(weights):
    return np.log(weights, out=np.full(weights.shape, -np.inf), where=weights > 0)


def _posterior_parts(points, images, log_prev_w, y, model, q, r):
    """Responsibilities, unnormalized log-posterior, and likelihood gradient rows."""
    log_terms, log_norm = _forecast_mixture_terms(points, images, log_prev_w, q)
    resp = np.exp(log_terms - log_norm[:, None])
    log_prior = log_norm - 0.5 * q.dim * LOG_2PI - 0.5 * q.log_det
    innov = y - np.asarray(model.observe(points), dtype=float)
    innov_scaled = innov @ r.inv
    log_lik = (
        -0.5 * r.dim * LOG_2PI - 0.5 * r.log_det - 0.5 * (innov_scaled * innov).sum(axis=-1)
    )
    grad_lik = np.asarray(model.obs_adjoint(innov_scaled), dtype=float)
    return resp, log_prior + log_lik, grad_lik


def vmpf_log_posterior(x, prev_ens, y, model, q, r):
    """Unnormalized analysis log-density at `x`.

    Sum of the observation log-likelihood and the log of the Gaussian
    mixture obtained by propagating the previous ensemble and convolving
    with the model error covariance. This is the density whose gradient
    drives the particle flow.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    images = np.asarray(model.propagate(prev_ens.particles), dtype=float)
    _, log_post, _ = _posterior_parts(
        x, images, _log_weights(prev_ens.weights), y, model, q, r
    )
    return float(log_post[0])


def vmpf_log_posterior_gradient(x, prev_ens, y, model, q, r):
    """Gradient of the analysis log-density at `x`.

    The likelihood part is ``H^T R^{-1} (y - H(x))``; the forecast-mixture
    part is ``-Q^{-1} (x - sum_i resp_i * image_i)`` where the
    responsibilities are the normalized mixture weights
    ``w_i exp(-0.5 maha_i)`` of each propagated particle image, computed in
    log space.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    images = np.asarray(model.propagate(prev_ens.particles), dtype=float)
    resp, _, grad_lik = _posterior_parts(
        x[None, :], images, _log_weights(prev_ens.weights), y, model, q, r
    )
    grad_prior = -(x - resp[0] @ images) @ q.inv
    return grad_lik[0] + grad_prior


def _kernel_matrix(points, q, rule):
    """Pairwise Gaussian kernel matrix and the inverse bandwidth matrix."""
    n = points.shape[0]
    diffs = points[:, None, :] - points[None, :, :]
    if rule == "scaled-identity":
        sq = (diffs @ q.inv * diffs).sum(axis=-1)
        base_inv = q.inv
    else:
        sq = (diffs * diffs).sum(axis=-1)
        base_inv = np.eye(points.shape[1])
    if n > 1:
        med = float(np.median(sq[np.triu_indices(n, k=1)]))
        factor = med / (2.0 * np.log(n)) if med > 0 else 1.0
    else:
        factor = 1.0
    kernel = np.exp(-0.5 * sq / factor)
    return kernel, base_inv / factor


def _flow_field(points, grads, q, rule):
    """Interacting-particle steepest-descent direction at every particle."""
    kernel, bw_inv = _kernel_matrix(points, q, rule)
    n = points.shape[0]
    attraction = kernel @ grads
    ksum = kernel.sum(axis=1)
    repulsion = (ksum[:, None] * points - kernel @ points) @ bw_inv
    return (attraction + repulsion) / n


def vmpf_assimilate(
    prev_ens,
    y,
    model,
    q,
    r,
    opts,
    rng,
    *,
    init_particles=None,
    images=None,
    diagnostics=None,
):
    """Assimilate one observation by transporting particles along a flow.

    Particles are initialized by propagating the previous ensemble and
    adding model noise, then iteratively shifted by ``step_size`` times the
    kernel-weighted mean of analysis log-density gradients plus kernel
    gradients (attraction plus repulsion). Iteration stops when the mean
    flow magnitude falls below ``opts.grad_norm_tolerance`` or the
    iteration cap is reached. The returned ensemble has uniform weights:
    the mapping transports a sample, it does not reweight it.

    Parameters
    ----------
    init_particles : ndarray, optional
        Skip the propagate-plus-noise initialization and start the flow
        from these positions (testing hook; `rng` is unused then).
    images : ndarray, optional
        Precomputed ``propagate(prev_ens.particles)``, to avoid recomputing
        the model map when the caller already has it.
    diagnostics : dict, optional
        Filled in place with ``map_iterations`` and ``mean_update_norm``.

    Raises
    ------
    NonFiniteState
        If a particle becomes non-finite even at the minimum step size.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if images is None:
        images = np.asarray(model.propagate(prev_ens.particles), dtype=float)
    if init_particles is None:
        noise = mvn_sample(np.zeros(q.dim), q, rng, prev_ens.n_particles)
        points = images + noise
    else:
        points = np.array(init_particles, dtype=float, copy=True)
    log_prev_w = _log_weights(prev_ens.weights)

    step = opts.step_size
    resp, log_post, grad_lik = _posterior_parts(points, images, log_prev_w, y, model, q, r)
    mean_log_post = float(np.mean(log_post))
    iterations = 0
    mean_norm = np.inf
    while iterations < opts.max_map_iterations:
        grads = grad_lik - (points - resp @ images) @ q.inv
        flow = _flow_field(points, grads, q, opts.kernel_bandwidth_rule)
        mean_norm = float(np.mean(np.linalg.norm(flow, axis=1)))
        if mean_norm < opts.grad_norm_tolerance:
            break
        iterations += 1
        while True:
            proposal = points + step * flow
            finite = bool(np.all(np.isfinite(proposal)))
            if finite:
                new_parts = _posterior_parts(proposal, images, log_prev_w, y, model, q, r)
                new_mean = float(np.mean(new_parts[1]))
                if np.isfinite(new_mean) and new_mean >= mean_log_post:
                    points = proposal
                    resp, _, grad_lik = new_parts
                    mean_log_post = new_mean
                    break
            if step <= opts.min_step_size:
                if not finite:
                    raise NonFiniteState(
                        f"particle flow diverged at cycle {prev_ens.cycle_index + 1}"
                    )
                # at the floor and still not improving: accept the stall
                iterations = opts.max_map_iterations
                break
            step = max(step / 2.0, opts.min_step_size)
    if diagnostics is not None:
        diagnostics["map_iterations"] = iterations
        diagnostics["mean_update_norm"] = mean_norm
    return Ensemble.uniform(points, prev_ens.cycle_index + 1)


# ---------------------------------------------------------------------------
# Kalman filter and smoother
# ---------------------------------------------------------------------------


@dataclass
class KalmanFilterResult:
    """Forward-pass moments; index 0 is the initial state, 1..K the cycles."""

    pred_means: np.ndarray
    pred_covs: np.ndarray
    filt_means: np.ndarray
    filt_covs: np.ndarray
    logliks: np.ndarray

    @property
    def n_cycles(self):
        return self.filt_means.shape[0] - 1

    def total_loglik(self):
        return float(np.sum(self.logliks))


def kf_step(mean, cov, y, gss):
    """One Kalman predict-update cycle.

    Returns the analysis mean, analysis covariance (Joseph form), and the
    predictive log-likelihood increment ``log p(y_k | y_{1:k-1})`` from the
    innovation Gaussian.

    Raises
    ------
    SingularInnovationCovariance
    """
    a, h = gss.transition, gss.observation
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    m_pred = a @ mean
    p_pred = a @ cov @ a.T + gss.q.values
    m_a, p_a, loglik = _kalman_update(m_pred, p_pred, y, gss)
    return m_a, p_a, loglik


def _kalman_update(m_pred, p_pred, y, gss):
    h = gss.observation
    innov_cov = h @ p_pred @ h.T + gss.r.values
    try:
        factor = cho_factor(innov_cov, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularInnovationCovariance(str(exc)) from exc
    innov = y - h @ m_pred
    gain = cho_solve(factor, h @ p_pred).T
    m_a = m_pred + gain @ innov
    i_kh = np.eye(gss.state_dim) - gain @ h
    p_a = i_kh @ p_pred @ i_kh.T + gain @ gss.r.values @ gain.T
    log_det = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    maha = float(innov @ cho_solve(factor, innov))
    loglik = -0.5 * (gss.obs_dim * LOG_2PI + log_det + maha)
    return m_a, p_a, loglik


def kf_filter(gss, observations):
    """Full forward Kalman pass over ``y_1 .. y_K``."""
    ys = np.atleast_2d(np.asarray(observations, dtype=float))
    n_cycles = ys.shape[0]
    n = gss.state_dim
    res = KalmanFilterResult(
        pred_means=np.zeros((n_cycles + 1, n)),
        pred_covs=np.zeros((n_cycles + 1, n, n)),
        filt_means=np.zeros((n_cycles + 1, n)),
        filt_covs=np.zeros((n_cycles + 1, n, n)),
        logliks=np.zeros(n_cycles),
    )
    res.filt_means[0] = gss.initial_mean
    res.filt_covs[0] = gss.initial_cov.values
    res.pred_means[0] = gss.initial_mean
    res.pred_covs[0] = gss.initial_cov.values
    a = gss.transition
    for k in range(1, n_cycles + 1):
        res.pred_means[k] = a @ res.filt_means[k - 1]
        res.pred_covs[k] = a @ res.filt_covs[k - 1] @ a.T + gss.q.values
        m_a, p_a, loglik = _kalman_update(
            res.pred_means[k], res.pred_covs[k], ys[k - 1], gss
        )
        res.filt_means[k] = m_a
        res.filt_covs[k] = p_a
        res.logliks[k - 1] = loglik
    return res


def rts_smoother(kf_result, gss):
    """Rauch-Tung-Striebel backward pass with lag-one cross-covariances.

    Returns
    -------
    smoothed_means : ndarray, shape (K + 1, n)
    smoothed_covs : ndarray, shape (K + 1, n, n)
    lag_one_covs : ndarray, shape (K + 1, n, n)
        ``lag_one_covs[k] = Cov(x_k, x_{k-1} | y_{1:K})`` for k >= 1
        (index 0 is zero). Computed as the smoothed covariance times the
        transpose of the previous smoother gain, which the backward
        recursion makes exact.
    """
    a = gss.transition
    n_cycles = kf_result.n_cycles
    n = gss.state_dim
    s_means = np.array(kf_result.filt_means, copy=True)
    s_covs = np.array(kf_result.filt_covs, copy=True)
    gains = np.zeros((n_cycles, n, n))
    for k in range(n_cycles - 1, -1, -1):
        p_pred_next = kf_result.pred_covs[k + 1]
        gains[k] = np.linalg.solve(p_pred_next.T, (kf_result.filt_covs[k] @ a.T).T).T
        s_means[k] = kf_result.filt_means[k] + gains[k] @ (
            s_means[k + 1] - kf_result.pred_means[k + 1]
        )
        s_covs[k] = (
            kf_result.filt_covs[k]
            + gains[k] @ (s_covs[k + 1] - p_pred_next) @ gains[k].T
        )
    lag_one = np.zeros((n_cycles + 1, n, n))
    for k in range(1, n_cycles + 1):
        lag_one[k] = s_covs[k] @ gains[k - 1].T
    return s_means, s_covs, lag_one


# ---------------------------------------------------------------------------
# Ensemble Kalman filter and smoother
# ---------------------------------------------------------------------------


@dataclass
class EnkfRun:
    """Stored forward pass of the stochastic ensemble Kalman filter.

    Keeps what the fixed-interval smoother needs: analysis ensembles,
    per-cycle predicted observations of the forecast members, the perturbed
    observations actually used in the update, and the innovation-covariance
    factors.
    """

    analyses: list = field(default_factory=list)
    forecasts: list = field(default_factory=list)
    pred_obs: list = field(default_factory=list)
    perturbed_obs: list = field(default_factory=list)
    innovation_factors: list = field(default_factory=list)


def _enkf_analysis(ens, y, model, q, r, rng):
    n = ens.n_particles
    if n < 2:
        raise ValueError("the ensemble Kalman filter needs at least 2 members")
    noise = mvn_sample(np.zeros(q.dim), q, rng, n)
    forecast = np.asarray(model.propagate(ens.particles), dtype=float) + noise
    pred = np.asarray(model.observe(forecast), dtype=float)
    anomalies = forecast - forecast.mean(axis=0)
    pred_anom = pred - pred.mean(axis=0)
    innov_cov = pred_anom.T @ pred_anom / (n - 1) + r.values
    try:
        factor = cho_factor(innov_cov, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularInnovationCovariance(str(exc)) from exc
    cross = anomalies.T @ pred_anom / (n - 1)
    perturbed = y + mvn_sample(np.zeros(r.dim), r, rng, n)
    analysis = forecast + (perturbed - pred) @ cho_solve(factor, cross.T)
    return analysis, forecast, pred, perturbed, factor


def enkf_step(ens, y, model, q, r, rng):
    """One stochastic (perturbed-observation) ensemble Kalman cycle.

    Members are propagated with model noise; sample cross- and
    innovation covariances build the gain; each member assimilates its own
    perturbed copy of the observation. Returns uniform weights.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    analysis, *_ = _enkf_analysis(ens, y, model, q, r, rng)
    return Ensemble.uniform(analysis, ens.cycle_index + 1)


def enkf_filter(model, observations, q, r, init_ens, rng):
    """Forward ensemble Kalman pass, storing what :func:`enks` needs."""
    ys = np.atleast_2d(np.asarray(observations, dtype=float))
    run = EnkfRun(analyses=[init_ens])
    ens = init_ens
    for k in range(ys.shape[0]):
        analysis, forecast, pred, perturbed, factor = _enkf_analysis(
            ens, ys[k], model, q, r, rng.child(k + 1)
        )
        ens = Ensemble.uniform(analysis, k + 1)
        run.analyses.append(ens)
        run.forecasts.append(forecast)
        run.pred_obs.append(pred)
        run.perturbed_obs.append(perturbed)
        run.innovation_factors.append(factor)
    return run


def enks(run, lag="full"):
    """Fixed-interval ensemble smoother over a stored filter pass.

    Each assimilation's perturbed innovations are regressed onto earlier
    smoothed members (up to `lag` cycles back, or the whole window), so a
    member's trajectory across cycles approximates a joint smoother draw.

    Returns
    -------
    ndarray, shape (K + 1, n_particles, state_dim)
    """
    n_cycles = len(run.forecasts)
    smoothed = np.stack([ens.particles for ens in run.analyses]).astype(float)
    if lag == "full":
        lag = n_cycles
    lag = int(lag)
    n = smoothed.shape[1]
    for k in range(1, n_cycles + 1):
        innovations = run.perturbed_obs[k - 1] - run.pred_obs[k - 1]
        pred_anom = run.pred_obs[k - 1] - run.pred_obs[k - 1].mean(axis=0)
        scaled = cho_solve(run.innovation_factors[k - 1], innovations.T).T
        for t in range(max(0, k - lag), k):
            anom_t = smoothed[t] - smoothed[t].mean(axis=0)
            cross = anom_t.T @ pred_anom / (n - 1)
            smoothed[t] = smoothed[t] + scaled @ cross.T
    return smoothed
