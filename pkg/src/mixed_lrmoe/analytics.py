"""Posterior ratemaking, risk-scoring diagnostics and model comparison.

Factor ids at or beyond a level's factor count are treated as new
(unseen) factors: their effect is drawn from the N(0, 1) prior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .ecm import effective_param_count, evaluation_normals
from .errors import InvalidArgumentError
from .model import (
    Dataset,
    MixedLRMoEModel,
    expert_loglik_matrix,
    linear_predictor,
    log_softmax,
    logsumexp,
    per_observation,
)
from .variational import VariationalPosterior, kl_per_factor, realize, sample_loglik

DEFAULT_COVERAGES = (0.90, 0.95, 0.975, 0.99)

# cap on M * rows held in memory at once when averaging over draws
_CHUNK_CELLS = 2_000_000


# ----------------------------------------------------------------------------
# credible intervals
# ----------------------------------------------------------------------------

def interval_multiplier(coverage: float) -> float:
    """Standard normal quantile z with P(|Z| <= z) = coverage."""
    coverage = float(coverage)
    if not 0.0 < coverage < 1.0:
        raise InvalidArgumentError(f"coverage must lie in (0, 1), got {coverage!r}")
    return float(stats.norm.ppf(0.5 * (1.0 + coverage)))


def credible_interval(post: VariationalPosterior, level: int, factor: int, coverage: float) -> tuple[float, float]:
    """Central Gaussian interval ``mu +- z * sigma`` for one factor."""
    z = interval_multiplier(coverage)
    mu = float(post.mu[level][factor])
    sd = math.sqrt(float(post.sigma2[level][factor]))
    return mu - z * sd, mu + z * sd


def credible_intervals(post: VariationalPosterior, level: int, coverage: float) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`credible_interval` over every factor of a level."""
    z = interval_multiplier(coverage)
    sd = post.sd(level)
    return post.mu[level] - z * sd, post.mu[level] + z * sd


# ----------------------------------------------------------------------------
# posterior class probabilities and premiums
# ----------------------------------------------------------------------------

def effect_moments(post: VariationalPosterior, factor_index: np.ndarray):
    """Posterior mean/sd of each row's effects, prior for unseen ids."""
    n, L = factor_index.shape
    mean = np.zeros((n, L))
    sd = np.ones((n, L))
    seen = np.zeros((n, L), dtype=bool)
    for l in range(L):
        idx = factor_index[:, l]
        seen[:, l] = (idx >= 0) & (idx < post.mu[l].size)
        mean[seen[:, l], l] = post.mu[l][idx[seen[:, l]]]
        sd[seen[:, l], l] = post.sd(l)[idx[seen[:, l]]]
    return mean, sd, seen


def _as_rows(X, factor_index, model):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    fi = np.asarray(() if factor_index is None else factor_index, dtype=np.int64)
    if X.shape[1] != model.P:
        raise InvalidArgumentError(f"covariates have P={X.shape[1]}, model expects {model.P}")
    if fi.size != n * model.L:
        raise InvalidArgumentError(f"need {model.L} factor id(s) per row")
    fi = fi.reshape(n, model.L)
    if not np.all(np.isfinite(X)):
        raise InvalidArgumentError("covariates must be finite")
    return X, fi


def class_probs_rows(X, factor_index, post: VariationalPosterior, model: MixedLRMoEModel, M: int, seed):
    """Posterior-averaged gating probabilities for many rows, shape (n, g).

    Each row gets its own M draws from the variational posterior of the
    factors it belongs to (prior for unseen factors).
    """
    if M < 1:
        raise InvalidArgumentError("M must be >= 1")
    X, fi = _as_rows(X, factor_index, model)
    n = X.shape[0]
    if model.L == 0:
        return np.exp(log_softmax(X @ model.alpha.T))
    mean, sd, _ = effect_moments(post, fi)
    rng = np.random.default_rng(seed)
    out = np.empty((n, model.g))
    step = max(1, _CHUNK_CELLS // M)
    for a in range(0, n, step):
        b = min(n, a + step)
        w_obs = mean[a:b] + sd[a:b] * rng.standard_normal((M, b - a, model.L))
        pi = np.exp(log_softmax(linear_predictor(X[a:b], model.alpha, model.beta, w_obs)))
        out[a:b] = pi.mean(axis=0)
    return out / out.sum(axis=1, keepdims=True)


def posterior_class_probs(x_new, post: VariationalPosterior, model: MixedLRMoEModel, factor_ids, M: int, seed):
    """Monte Carlo average of the gating probabilities over the policyholder's posterior."""
    return class_probs_rows(np.asarray(x_new, dtype=float)[None, :], np.reshape(factor_ids, (1, -1)),
                            post, model, M, seed)[0]


def class_means(model: MixedLRMoEModel) -> np.ndarray:
    """Expected loss per class, summed over response dimensions."""
    return np.array([sum(e.mean() for e in row) for row in model.experts])


def premium_rows(X, factor_index, post, model, M, seed):
    means = class_means(model)
    if not np.all(np.isfinite(means)):
        raise InvalidArgumentError("every expert needs a finite mean to price")
    return class_probs_rows(X, factor_index, post, model, M, seed) @ means


def posterior_premium(x_new, post: VariationalPosterior, model: MixedLRMoEModel, factor_ids, M: int, seed) -> float:
    """Pure premium ``sum_j pi_j * E[Y | class j]`` averaged over the posterior."""
    probs = posterior_class_probs(x_new, post, model, factor_ids, M, seed)
    return float(probs @ class_means(model))


@dataclass(frozen=True)
class PolicyholderPosterior:
    factor_ids: tuple
    mean: np.ndarray
    variance: np.ndarray
    intervals: dict
    class_probs: np.ndarray
    premium: float
    unseen: tuple


def policyholder_posterior(x_new, post, model, factor_ids, M: int = 1000, seed=0,
                           coverages=DEFAULT_COVERAGES) -> PolicyholderPosterior:
    """Everything known about one policyholder a posteriori.

    ``intervals[c]`` holds one (lo, hi) pair per level at coverage ``c``.
    """
    ids = tuple(int(i) for i in np.reshape(factor_ids, -1))
    mean, sd, seen = effect_moments(post, np.array([ids], dtype=np.int64).reshape(1, model.L))
    mean, sd = mean[0], sd[0]
    intervals = {}
    for c in coverages:
        z = interval_multiplier(c)
        intervals[float(c)] = tuple(zip(mean - z * sd, mean + z * sd))
    probs = posterior_class_probs(x_new, post, model, ids, M, seed)
    return PolicyholderPosterior(
        factor_ids=ids,
        mean=mean,
        variance=sd * sd,
        intervals=intervals,
        class_probs=probs,
        premium=float(probs @ class_means(model)),
        unseen=tuple(bool(not s) for s in seen[0]),
    )


# ----------------------------------------------------------------------------
# ordered Lorenz curve
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class LorenzCurve:
    x: np.ndarray
    y: np.ndarray
    gini: float
    gini_se: float


def _curve(premiums, losses):
    order = np.argsort(premiums, kind="stable")
    x = np.concatenate([[0.0], np.cumsum(premiums[order])])
    y = np.concatenate([[0.0], np.cumsum(losses[order])])
    x /= x[-1]
    y /= y[-1]
    return x, y


def _gini(x, y) -> float:
    # twice the area between the diagonal and the curve
    return float(1.0 - np.sum(np.diff(x) * (y[1:] + y[:-1])))


def ordered_lorenz(premiums, losses, n_boot: int = 500, seed=0) -> LorenzCurve:
    """Ordered Lorenz curve with policyholders sorted by ascending premium.

    Ties keep their original order. ``gini_se`` is the standard deviation of
    the Gini index over ``n_boot`` nonparametric bootstrap resamples
    (resamples with no losses are redrawn); it is ``nan`` when
    ``n_boot == 0``.
    """
    p = np.asarray(premiums, dtype=float).reshape(-1)
    ell = np.asarray(losses, dtype=float).reshape(-1)
    if p.shape != ell.shape or p.size == 0:
        raise InvalidArgumentError("premiums and losses must be non-empty and the same length")
    if not (np.all(np.isfinite(p)) and np.all(p > 0.0)):
        raise InvalidArgumentError("premiums must be finite and positive")
    if not (np.all(np.isfinite(ell)) and np.all(ell >= 0.0)):
        raise InvalidArgumentError("losses must be finite and non-negative")
    if not ell.sum() > 0.0:
        raise InvalidArgumentError("ordered Lorenz curve is undefined when every loss is zero")
    x, y = _curve(p, ell)
    gini = _gini(x, y)

    se = float("nan")
    if n_boot > 0:
        rng = np.random.default_rng(seed)
        draws = []
        while len(draws) < n_boot:
            rows = rng.integers(0, p.size, p.size)
            if ell[rows].sum() > 0.0:
                draws.append(_gini(*_curve(p[rows], ell[rows])))
        se = float(np.std(draws, ddof=1)) if n_boot > 1 else 0.0
    x.setflags(write=False)
    y.setflags(write=False)
    return LorenzCurve(x, y, gini, se)


# ----------------------------------------------------------------------------
# model comparison
# ----------------------------------------------------------------------------

def _extended_posterior(post: VariationalPosterior, data: Dataset) -> VariationalPosterior:
    """Append prior entries for factor ids the posterior has not seen."""
    mus, s2s = [], []
    for l in range(post.L):
        S_new = max(post.mu[l].size, int(data.factor_index[:, l].max()) + 1)
        extra = S_new - post.mu[l].size
        mus.append(np.concatenate([post.mu[l], np.zeros(extra)]))
        s2s.append(np.concatenate([post.sigma2[l], np.ones(extra)]))
    return VariationalPosterior(tuple(mus), tuple(s2s))


def _test_normals(post: VariationalPosterior, ext: VariationalPosterior, seed, M: int):
    """Fitting-time evaluation draws for known factors, fresh draws for new ones."""
    v_fit = evaluation_normals(post.design, seed, M)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(4)[3])
    return tuple(
        np.concatenate([v_fit[l], rng.standard_normal((M, ext.mu[l].size - post.mu[l].size))], axis=1)
        for l in range(post.L)
    )


def _importance_loglik(data, model, ext, v, present):
    """log p(y) by importance sampling with q as the proposal.

    A single level factorises over factors, so each factor gets its own
    importance average; otherwise one joint average is used.
    """
    w = realize(ext, v)
    log_ratio = []
    for l in range(ext.L):
        s2 = ext.sigma2[l]
        # log N(w; 0, 1) - log q(w)
        log_ratio.append(-0.5 * w[l] ** 2 + 0.5 * v[l] ** 2 + 0.5 * np.log(s2))
    w_obs = per_observation(w, data.factor_index)
    logf = expert_loglik_matrix(model, data.Y)
    terms = logsumexp(log_softmax(linear_predictor(data.X, model.alpha, model.beta, w_obs)) + logf, axis=-1)
    M = terms.shape[0]
    if ext.L == 1:
        idx = data.factor_index[:, 0]
        S = ext.mu[0].size
        per_factor = np.stack([np.bincount(idx, weights=t, minlength=S) for t in terms])
        lw = per_factor + log_ratio[0]
        return float(np.sum((logsumexp(lw, axis=0) - math.log(M))[present[0]]))
    total = terms.sum(axis=1) + sum(r[:, p].sum(axis=1) for r, p in zip(log_ratio, present))
    return float(logsumexp(total, axis=0) - math.log(M))


def evaluate(model: MixedLRMoEModel, post: VariationalPosterior, data_test: Dataset, M: int = 1000, seed=0) -> dict:
    """Score a fitted model on (possibly new) data.

    Returns a dict with ``elbo`` (plus its Monte Carlo ``elbo_se``),
    ``loglik`` (importance-sampling estimate of the marginal
    log-likelihood, exact when L = 0), ``aic`` and ``n_unseen`` (rows with
    at least one unseen factor id).

    Only factors that occur in ``data_test`` enter the KL term. Seen
    factors reuse the draws that produced the fitted ELBO trace, so scoring
    the training data with the fitting seed reproduces it.
    """
    if data_test is None or data_test.n == 0:
        raise InvalidArgumentError("test set is empty")
    if M < 1:
        raise InvalidArgumentError("M must be >= 1")
    if data_test.P != model.P or data_test.L != model.L or data_test.D != model.D:
        raise InvalidArgumentError("test data dimensions do not match the model")
    k = effective_param_count(model)
    if model.L == 0:
        ll = float(sample_loglik(data_test, model, ())[0])
        return {"elbo": ll, "elbo_se": 0.0, "loglik": ll, "aic": 2.0 * k - 2.0 * ll, "n_unseen": 0}

    ext = _extended_posterior(post, data_test)
    _, _, seen = effect_moments(post, data_test.factor_index)
    present = [np.bincount(data_test.factor_index[:, l], minlength=ext.mu[l].size) > 0 for l in range(ext.L)]
    v = _test_normals(post, ext, seed, M)
    ll_draws = sample_loglik(data_test, model, realize(ext, v))
    kl = sum(float(np.sum(kl_per_factor(ext.mu[l], ext.sigma2[l])[present[l]])) for l in range(ext.L))
    elbo = float(np.mean(ll_draws)) - kl
    se = float(np.std(ll_draws, ddof=1) / math.sqrt(M)) if M > 1 else float("nan")
    ll = _importance_loglik(data_test, model, ext, v, present)
    return {
        "elbo": elbo,
        "elbo_se": se,
        "loglik": ll,
        "aic": 2.0 * k - 2.0 * ll,
        "n_unseen": int(np.sum(~np.all(seen, axis=1))),
    }


def fitted_cdf(model: MixedLRMoEModel, post: VariationalPosterior, data: Dataset, y, dim: int = 0,
               M: int = 20, seed=0) -> np.ndarray:
    """Marginal CDF of response ``dim`` averaged over the portfolio.

    ``F(y) = mean_i sum_j pbar_ij F_jd(y)`` with ``pbar`` the posterior
    averaged gating probabilities of each row.
    """
    probs = class_probs_rows(data.X, data.factor_index, post, model, M, seed)
    weights = probs.mean(axis=0)
    y = np.asarray(y, dtype=float)
    return sum(weights[j] * model.experts[j][dim].cdf(y) for j in range(model.g))


def ks_statistic(model, post, data: Dataset, dim: int = 0, M: int = 20, seed=0) -> float:
    """Kolmogorov-Smirnov distance between the fitted marginal and the sample."""
    y = np.sort(data.Y[:, dim])
    F = fitted_cdf(model, post, data, y, dim, M, seed)
    n = y.size
    # ties: the empirical CDF jumps at the last copy of each value
    hi = np.searchsorted(y, y, side="right") / n
    lo = np.searchsorted(y, y, side="left") / n
    return float(max(np.max(np.abs(hi - F)), np.max(np.abs(F - lo))))
