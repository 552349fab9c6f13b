"""Mean-field Gaussian posterior over the random effects.

Every factor ``w_l^(s)`` gets an independent ``N(mu, sigma2)`` posterior.
Samples are drawn through ``w = mu + sigma * v`` with ``v`` standard normal,
and the draws ``v`` are kept so the same noise can be reused (common random
numbers) when comparing objective values or differentiating through the
sample.

Variances are optimised on the log scale (``tau = log sigma2``).
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from .errors import DegenerateWarning, InvalidArgumentError
from .model import (
    Dataset,
    MixedLRMoEModel,
    RandomEffectDesign,
    expert_loglik_matrix,
    linear_predictor,
    log_softmax,
    logsumexp,
    per_observation,
)

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-12
_LOG_VARIANCE_FLOOR = math.log(VARIANCE_FLOOR)


@dataclass(frozen=True)
class VariationalPosterior:
    mu: tuple
    sigma2: tuple

    def __post_init__(self):
        mu = tuple(np.array(m, dtype=float).reshape(-1) for m in self.mu)
        s2 = tuple(np.array(s, dtype=float).reshape(-1) for s in self.sigma2)
        if len(mu) != len(s2) or any(a.shape != b.shape for a, b in zip(mu, s2)):
            raise InvalidArgumentError("mu and sigma2 must have matching shapes")
        if any(np.any(~np.isfinite(a)) for a in mu) or any(np.any(~(b > 0)) for b in s2):
            raise InvalidArgumentError("mu must be finite and sigma2 positive")
        s2 = tuple(np.maximum(b, VARIANCE_FLOOR) for b in s2)
        for a in mu + s2:
            a.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma2", s2)

    @classmethod
    def prior(cls, design: RandomEffectDesign) -> "VariationalPosterior":
        return cls(tuple(np.zeros(s) for s in design.S), tuple(np.ones(s) for s in design.S))

    @property
    def design(self) -> RandomEffectDesign:
        return RandomEffectDesign(tuple(a.size for a in self.mu))

    @property
    def L(self) -> int:
        return len(self.mu)

    def sd(self, level: int) -> np.ndarray:
        return np.sqrt(self.sigma2[level])

    def with_level(self, level: int, mu, sigma2) -> "VariationalPosterior":
        mus, s2s = list(self.mu), list(self.sigma2)
        mus[level], s2s[level] = mu, sigma2
        return VariationalPosterior(tuple(mus), tuple(s2s))


@dataclass(frozen=True)
class EffectSamples:
    """M joint draws of every random effect plus the standard normals behind them.

    ``w[l]`` and ``v[l]`` have shape (M, S_l).
    """

    w: tuple
    v: tuple

    @property
    def M(self) -> int:
        return self.v[0].shape[0] if self.v else 1


def standard_normals(design: RandomEffectDesign, rng, M: int) -> tuple:
    rng = np.random.default_rng(rng)
    return tuple(rng.standard_normal((M, s)) for s in design.S)


def realize(post: VariationalPosterior, v) -> tuple:
    return tuple(post.mu[l] + np.sqrt(post.sigma2[l]) * v[l] for l in range(post.L))


def sample_w(post: VariationalPosterior, rng_seed, M: int) -> EffectSamples:
    """Draw M realisations of all random effects from ``post``."""
    if M < 1:
        raise InvalidArgumentError("M must be >= 1")
    v = standard_normals(post.design, rng_seed, M)
    return EffectSamples(realize(post, v), v)


def kl_to_prior(post: VariationalPosterior) -> float:
    """KL(q || N(0, I)) in closed form; zero exactly at the prior."""
    total = 0.0
    for mu, s2 in zip(post.mu, post.sigma2):
        total += 0.5 * float(np.sum(s2 + mu * mu - 1.0 - np.log(s2)))
    return total


def kl_per_factor(mu, sigma2):
    return 0.5 * (sigma2 + mu * mu - 1.0 - np.log(sigma2))


# ----------------------------------------------------------------------------
# ELBO
# ----------------------------------------------------------------------------

def sample_loglik(data: Dataset, model: MixedLRMoEModel, w, logf=None) -> np.ndarray:
    """Conditional log-likelihood for each of the M draws in ``w`` (shape (M,))."""
    if logf is None:
        logf = expert_loglik_matrix(model, data.Y)
    w_obs = per_observation(w, data.factor_index)
    logpi = log_softmax(linear_predictor(data.X, model.alpha, model.beta, w_obs))
    per_obs = logsumexp(logpi + logf, axis=-1)
    return np.sum(np.atleast_2d(per_obs), axis=-1)


def elbo_from_normals(data, model, post, v, logf=None) -> tuple[float, float]:
    """ELBO estimate and its Monte Carlo standard error for fixed draws ``v``."""
    if model.L == 0:
        ll = sample_loglik(data, model, (), logf)
        return float(ll[0]), 0.0
    ll = sample_loglik(data, model, realize(post, v), logf)
    M = ll.size
    se = float(np.std(ll, ddof=1) / math.sqrt(M)) if M > 1 else float("nan")
    return float(np.mean(ll)) - kl_to_prior(post), se


def elbo_estimate(data: Dataset, model: MixedLRMoEModel, post: VariationalPosterior, M: int, seed,
                  return_se: bool = False):
    """Unbiased Monte Carlo estimate of the evidence lower bound.

    With no random effects this is the exact log-likelihood.
    """
    if M < 1:
        raise InvalidArgumentError("M must be >= 1")
    v = standard_normals(post.design, seed, M)
    elbo, se = elbo_from_normals(data, model, post, v)
    return (elbo, se) if return_se else elbo


# ----------------------------------------------------------------------------
# derivatives with respect to the random effects
# ----------------------------------------------------------------------------

def _level_terms(eta, z, beta_l):
    """Per-observation gradient and curvature terms of sum_j z_ij log pi_ij
    with respect to the level-l effect; eta has shape (..., n, g)."""
    pi = np.exp(log_softmax(eta))
    bbar = pi @ beta_l
    b2bar = pi @ (beta_l * beta_l)
    zsum = z.sum(axis=-1)
    grad = z @ beta_l - zsum * bbar
    hess = zsum * (bbar * bbar - b2bar)
    return grad, hess


def _scatter(values, index, S):
    """Sum (..., n) values into (..., S) bins given by ``index``."""
    values = np.asarray(values)
    if values.ndim == 1:
        return np.bincount(index, weights=values, minlength=S)
    lead = values.shape[:-1]
    flat = values.reshape(-1, values.shape[-1])
    offs = (np.arange(flat.shape[0]) * S)[:, None] + index[None, :]
    out = np.bincount(offs.ravel(), weights=flat.ravel(), minlength=flat.shape[0] * S)
    return out.reshape(lead + (S,))


def grad_wrt_w(data: Dataset, model: MixedLRMoEModel, w, responsibilities, level: int):
    """Gradient and Hessian diagonal of ``sum_ij z_ij log pi_ij(w)`` in ``w[level]``.

    Each observation loads on exactly one factor per level, so the Hessian
    over a level is diagonal. ``w`` may carry a leading sample axis, in
    which case the outputs do too.

    Returns
    -------
    gradient, hessian_diag : ndarray, shape (..., S_level)
    """
    z = np.asarray(responsibilities, dtype=float)
    if z.shape != (data.n, model.g):
        raise InvalidArgumentError(f"responsibilities must have shape ({data.n}, {model.g})")
    if not 0 <= level < model.L:
        raise InvalidArgumentError(f"level {level} out of range for L={model.L}")
    if len(w) != model.L or any(np.shape(w[l])[-1] != s for l, s in enumerate(model.design.S)):
        raise InvalidArgumentError("random effects do not match the model design")
    eta = linear_predictor(data.X, model.alpha, model.beta, per_observation(w, data.factor_index))
    grad, hess = _level_terms(eta, z, model.beta[:, level])
    S = model.design.S[level]
    idx = data.factor_index[:, level]
    return _scatter(grad, idx, S), _scatter(hess, idx, S)


# ----------------------------------------------------------------------------
# variational CM-step
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class VIControls:
    max_iters: int = 20
    rel_tol: float = 1e-10
    max_halvings: int = 20
    max_log_var_step: float = 2.0


class LevelObjective:
    """Monte Carlo objective of one level's variational parameters.

    ``F(mu, tau) = mean_m sum_ij z_ij log pi_ij(w^m) - KL`` restricted to the
    terms touching level ``l``, with the other levels held at their draws.
    It is separable across the factors of the level, so values, gradients
    and 2x2 Hessian blocks are returned per factor.
    """

    def __init__(self, data, model, post, z, v, level):
        self.level = level
        self.z = z
        self.v = v[level]
        self.idx = data.factor_index[:, level]
        self.S = model.design.S[level]
        self.beta_l = model.beta[:, level]
        w = realize(post, v)
        others = [np.zeros_like(w[k]) if k == level else w[k] for k in range(model.L)]
        self.eta_base = linear_predictor(
            data.X, model.alpha, model.beta, per_observation(others, data.factor_index)
        )

    def _eta(self, mu, tau):
        w_l = mu + np.exp(0.5 * tau) * self.v
        return self.eta_base + w_l[:, self.idx][..., None] * self.beta_l

    def value(self, mu, tau):
        logpi = log_softmax(self._eta(mu, tau))
        contrib = np.einsum("mij,ij->i", logpi, self.z) / self.v.shape[0]
        return np.bincount(self.idx, weights=contrib, minlength=self.S) - kl_per_factor(mu, np.exp(tau))

    def derivatives(self, mu, tau):
        """Per-factor gradient (G_mu, G_tau) and Hessian (H_mm, H_mt, H_tt)."""
        sig = np.exp(0.5 * tau)
        grad_obs, hess_obs = _level_terms(self._eta(mu, tau), self.z, self.beta_l)
        g = _scatter(grad_obs, self.idx, self.S)
        h = _scatter(hess_obs, self.idx, self.S)
        dw = 0.5 * sig * self.v
        s2 = sig * sig
        G_mu = g.mean(0) - mu
        G_tau = (g * dw).mean(0) - 0.5 * (s2 - 1.0)
        H_mm = h.mean(0) - 1.0
        H_mt = (h * dw).mean(0)
        H_tt = (h * dw * dw + 0.5 * g * dw).mean(0) - 0.5 * s2
        return (G_mu, G_tau), (H_mm, H_mt, H_tt)


def _newton_direction(G, H, max_tau_step):
    G_mu, G_tau = G
    H_mm, H_mt, H_tt = H
    det = H_mm * H_tt - H_mt * H_mt
    ok = (H_mm < 0) & (det > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        d_mu = np.where(ok, -(H_tt * G_mu - H_mt * G_tau) / det, -G_mu / np.minimum(H_mm, -1.0))
        d_tau = np.where(ok, -(H_mm * G_tau - H_mt * G_mu) / det, G_tau / np.maximum(np.abs(H_tt), 0.5))
    scale = np.minimum(1.0, max_tau_step / np.maximum(np.abs(d_tau), 1e-300))
    return d_mu * scale, d_tau * scale


def update_level(obj: LevelObjective, mu, tau, controls: VIControls):
    """Damped Newton ascent on one level; returns (mu, tau, n_stalled)."""
    mu = np.array(mu, dtype=float)
    tau = np.array(tau, dtype=float)
    F = obj.value(mu, tau)
    stalled = np.zeros(mu.shape, dtype=bool)
    for _ in range(controls.max_iters):
        G, H = obj.derivatives(mu, tau)
        d_mu, d_tau = _newton_direction(G, H, controls.max_log_var_step)
        # second-order predicted gain; factors already at their optimum are left alone
        gain = G[0] * d_mu + G[1] * d_tau
        pending = gain > 1e-12 * (1.0 + np.abs(F))
        step = 1.0
        F_start = F.sum()
        for _ in range(controls.max_halvings + 1):
            mu_c = np.where(pending, mu + step * d_mu, mu)
            tau_c = np.where(pending, np.maximum(tau + step * d_tau, _LOG_VARIANCE_FLOOR), tau)
            F_c = obj.value(mu_c, tau_c)
            accept = pending & (F_c >= F)
            mu = np.where(accept, mu_c, mu)
            tau = np.where(accept, tau_c, tau)
            F = np.where(accept, F_c, F)
            pending &= ~accept
            if not pending.any():
                break
            step *= 0.5
        gnorm = np.abs(G[0]) + np.abs(G[1])
        stalled = pending & (gnorm > 1e-6 * (1.0 + np.abs(F)))
        if F.sum() - F_start <= controls.rel_tol * (1.0 + abs(F_start)):
            break
    return mu, tau, int(stalled.sum())


def update_variational(data: Dataset, model: MixedLRMoEModel, post: VariationalPosterior,
                       responsibilities, M: int = 5, seed=None, step_controls: VIControls | None = None,
                       v=None) -> VariationalPosterior:
    """Variational CM-step: damped Newton ascent level by level.

    Parameters
    ----------
    responsibilities : ndarray, shape (n, g)
        Class responsibilities from the current E-step.
    M, seed
        Number and seed of the standard-normal draws; ignored when ``v`` is
        given (common random numbers shared with the rest of an iteration).
    step_controls : VIControls, optional
    v : sequence of ndarray, optional
        Standard normal draws, ``v[l]`` of shape (M, S_l).
    """
    if model.L == 0:
        return post
    controls = step_controls or VIControls()
    z = np.asarray(responsibilities, dtype=float)
    if v is None:
        v = standard_normals(post.design, seed, M)
    for l in range(model.L):
        obj = LevelObjective(data, model, post, z, v, l)
        mu, tau, n_stalled = update_level(obj, post.mu[l], np.log(post.sigma2[l]), controls)
        if n_stalled:
            warnings.warn(
                f"variational update stalled for {n_stalled} factor(s) at level {l}; kept previous values",
                DegenerateWarning,
                stacklevel=2,
            )
        post = post.with_level(l, mu, np.exp(tau))
    return post
