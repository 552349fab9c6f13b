"""Independent reference computations used as test oracles.

Nothing here calls the package's likelihood code: densities come from
scipy.stats and the softmax from scipy.special, so agreement is evidence
rather than tautology.
"""

from __future__ import annotations

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy import special, stats

from mixed_lrmoe import Dataset, Gamma, MixedLRMoEModel, RandomEffectDesign


def expert_logpdf_ref(expert, y):
    y = np.asarray(y, dtype=float)
    name = type(expert).__name__
    with np.errstate(divide="ignore"):
        if name == "Gamma":
            return stats.gamma.logpdf(y, a=expert.shape, scale=expert.scale)
        if name == "LogNormal":
            return stats.lognorm.logpdf(y, s=expert.sdlog, scale=np.exp(expert.meanlog))
        pos = np.log1p(-expert.zeroprob) + stats.lognorm.logpdf(y, s=expert.sdlog, scale=np.exp(expert.meanlog))
        return np.where(y == 0.0, np.log(expert.zeroprob), pos)


def row_logliks(data, model, w_rows):
    """log p(y_i | w_i) for each row, w_rows of shape (n, L)."""
    out = np.empty(data.n)
    for i in range(data.n):
        eta = model.alpha @ data.X[i] + model.beta @ w_rows[i]
        logpi = eta - special.logsumexp(eta)
        logf = np.array([sum(expert_logpdf_ref(e, data.Y[i, d]) for d, e in enumerate(row))
                         for row in model.experts])
        out[i] = special.logsumexp(logpi + logf)
    return out


def _factor_logliks(data, model, s, w_values):
    """Sum over the rows of factor s of log p(y_i | w), for each w in w_values (L = 1)."""
    rows = np.flatnonzero(data.factor_index[:, 0] == s)
    X, Y = data.X[rows], data.Y[rows]
    eta = (X @ model.alpha.T)[None] + w_values[:, None, None] * model.beta[:, 0][None, None]
    logpi = eta - special.logsumexp(eta, axis=-1, keepdims=True)
    logf = np.stack([sum(expert_logpdf_ref(e, Y[:, d]) for d, e in enumerate(row))
                     for row in model.experts], axis=-1)
    return special.logsumexp(logpi + logf[None], axis=-1).sum(axis=1)


def gh_marginal_loglik(data, model, nodes: int = 50) -> float:
    """Marginal log-likelihood with one random-effect level, integrated per factor."""
    x, wts = hermegauss(nodes)
    logw = np.log(wts) - 0.5 * np.log(2.0 * np.pi)
    return float(sum(special.logsumexp(logw + _factor_logliks(data, model, s, x))
                     for s in range(model.design.S[0])))


def gh_elbo(data, model, mu, sigma2, nodes: int = 50) -> float:
    """ELBO with the expectation under q done by Gauss-Hermite quadrature (L = 1)."""
    x, wts = hermegauss(nodes)
    wts = wts / np.sqrt(2.0 * np.pi)
    total = 0.0
    for s in range(model.design.S[0]):
        w = mu[s] + np.sqrt(sigma2[s]) * x
        total += float(wts @ _factor_logliks(data, model, s, w))
        total -= 0.5 * (sigma2[s] + mu[s] ** 2 - 1.0 - np.log(sigma2[s]))
    return total


def random_tiny_instance(seed: int, n: int = 20, S: int = 2, g: int = 2, P: int = 2):
    """Random well-posed model (gamma experts, one level) and data drawn from it."""
    rng = np.random.default_rng(seed)
    alpha = rng.normal(0.0, 1.0, (g, P))
    alpha[-1] = 0.0
    beta = rng.normal(0.0, 1.0, (g, 1))
    beta[0], beta[-1] = 1.0, 0.0
    experts = tuple((Gamma(rng.uniform(1.0, 6.0), rng.uniform(0.5, 5.0)),) for _ in range(g))
    model = MixedLRMoEModel(alpha, beta, experts, RandomEffectDesign((S,)))
    X = np.ones((n, P))
    X[:, 1:] = rng.random((n, P - 1)) < 0.5
    fi = np.arange(n) % S
    w = rng.standard_normal(S)
    y = np.empty(n)
    for i in range(n):
        eta = alpha @ X[i] + beta[:, 0] * w[fi[i]]
        j = rng.choice(g, p=special.softmax(eta))
        y[i] = experts[j][0].rvs(rng, 1)[0]
    return Dataset(X, y, fi), model


def central_diff_grad(f, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e.flat[k] = h
        g.flat[k] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def rel_err(a, b) -> float:
    """Max-norm relative error of a against reference b."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def trapezoid_gini(premiums, losses) -> float:
    """Loop-based ordered Lorenz Gini: ascending premium, stable ties."""
    order = sorted(range(len(premiums)), key=lambda i: premiums[i])
    P, L = float(sum(premiums)), float(sum(losses))
    x_prev = y_prev = 0.0
    area = 0.0
    cp = cl = 0.0
    for i in order:
        cp += premiums[i]
        cl += losses[i]
        x, y = cp / P, cl / L
        area += (x - x_prev) * (y + y_prev) / 2.0
        x_prev, y_prev = x, y
    return 1.0 - 2.0 * area
