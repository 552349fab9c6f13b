"""Domain types and the conditional (given random effects) Mixed LRMoE likelihood.

Notation follows the usual mixture-of-experts conventions: ``g`` latent
classes, ``P`` covariates (column 0 is the intercept), ``D`` response
dimensions and ``L`` random-effect levels with ``S[l]`` factors each.
Factor indices are stored 0-based.

All mixture arithmetic happens in log space. The linear predictor of class
``j`` for observation ``i`` is ``alpha[j] @ x_i + beta[j] @ w_i`` where
``w_i[l] = w[l][factor_index[i, l]]``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateWarning, InvalidArgumentError
from .experts import ExpertFamily


@dataclass(frozen=True)
class RandomEffectDesign:
    S: tuple[int, ...] = ()

    def __post_init__(self):
        S = tuple(int(s) for s in self.S)
        if any(s < 1 for s in S):
            raise InvalidArgumentError(f"every factor count must be >= 1, got {S}")
        object.__setattr__(self, "S", S)

    @property
    def L(self) -> int:
        return len(self.S)

    @property
    def total_factors(self) -> int:
        return sum(self.S)


@dataclass(frozen=True)
class Dataset:
    """Covariates ``X`` (n, P), responses ``Y`` (n, D), factor ids (n, L)."""

    X: np.ndarray
    Y: np.ndarray
    factor_index: np.ndarray = None

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        n = X.shape[0]
        fi = self.factor_index
        fi = np.zeros((n, 0), dtype=np.int64) if fi is None else np.asarray(fi, dtype=np.int64)
        if fi.ndim == 1:
            fi = fi[:, None]
        if n < 1 or X.shape[1] < 1 or Y.shape[1] < 1:
            raise InvalidArgumentError("dataset needs n >= 1, P >= 1 and D >= 1")
        if Y.shape[0] != n or fi.shape[0] != n:
            raise InvalidArgumentError(
                f"row counts disagree: X {X.shape[0]}, Y {Y.shape[0]}, factor_index {fi.shape[0]}"
            )
        if not np.all(X[:, 0] == 1.0):
            raise InvalidArgumentError("column 0 of X must be the intercept (all ones)")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise InvalidArgumentError("X and Y must be finite")
        if np.any(fi < 0):
            raise InvalidArgumentError("factor indices must be non-negative")
        for a in (X, Y, fi):
            a.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "factor_index", fi)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def P(self) -> int:
        return self.X.shape[1]

    @property
    def D(self) -> int:
        return self.Y.shape[1]

    @property
    def L(self) -> int:
        return self.factor_index.shape[1]

    def check_design(self, design: RandomEffectDesign) -> None:
        if design.L != self.L:
            raise InvalidArgumentError(f"dataset has {self.L} factor columns, design has L={design.L}")
        for l, S_l in enumerate(design.S):
            if self.n and self.factor_index[:, l].max(initial=0) >= S_l:
                raise InvalidArgumentError(f"factor index out of range for level {l} (S={S_l})")

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        if rows.dtype != bool:
            rows = rows.astype(np.intp)
        return Dataset(self.X[rows], self.Y[rows], self.factor_index[rows])


@dataclass(frozen=True)
class MixedLRMoEModel:
    """Gating coefficients ``alpha`` (g, P), loadings ``beta`` (g, L) and a
    g x D grid of experts.

    The constructor checks shapes and finiteness only; the identifiability
    pattern (last rows of ``alpha``/``beta`` zero, first row of ``beta``
    ones) is checked by :meth:`is_identified` and enforced by fitting.
    """

    alpha: np.ndarray
    beta: np.ndarray
    experts: tuple
    design: RandomEffectDesign = field(default_factory=RandomEffectDesign)

    def __post_init__(self):
        alpha = np.atleast_2d(np.array(self.alpha, dtype=float))
        g = alpha.shape[0]
        beta = np.array(self.beta, dtype=float).reshape(g, self.design.L)
        experts = tuple(
            tuple(row) if isinstance(row, (list, tuple)) else (row,) for row in self.experts
        )
        if g < 1:
            raise InvalidArgumentError("need at least one latent class")
        if len(experts) != g or len({len(r) for r in experts}) != 1:
            raise InvalidArgumentError("experts must be a g x D grid")
        if not all(isinstance(e, ExpertFamily) for r in experts for e in r):
            raise InvalidArgumentError("experts must be ExpertFamily instances")
        if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(beta))):
            raise InvalidArgumentError("alpha and beta must be finite")
        alpha.setflags(write=False)
        beta.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "experts", experts)

    @property
    def g(self) -> int:
        return self.alpha.shape[0]

    @property
    def P(self) -> int:
        return self.alpha.shape[1]

    @property
    def L(self) -> int:
        return self.design.L

    @property
    def D(self) -> int:
        return len(self.experts[0])

    def replace(self, **changes) -> "MixedLRMoEModel":
        kw = dict(alpha=self.alpha, beta=self.beta, experts=self.experts, design=self.design)
        kw.update(changes)
        return MixedLRMoEModel(**kw)

    def is_identified(self) -> bool:
        ref = identified_pattern(self.alpha, self.beta)
        return np.array_equal(ref[0], self.alpha) and np.array_equal(ref[1], self.beta)

    def identified(self) -> "MixedLRMoEModel":
        alpha, beta = identified_pattern(self.alpha, self.beta)
        return self.replace(alpha=alpha, beta=beta)


def identified_pattern(alpha, beta):
    """Copy of (alpha, beta) with the reference-class pins applied.

    Class g (last) is the reference: zero coefficients and zero loadings.
    Class 1 has all loadings fixed at one. With a single class there is no
    reference to pin against, so its loadings are zero.
    """
    alpha = np.array(alpha, dtype=float)
    beta = np.array(beta, dtype=float)
    alpha[-1] = 0.0
    if beta.shape[1]:
        beta[0] = 1.0
        beta[-1] = 0.0
    return alpha, beta


def free_beta_rows(g: int) -> range:
    return range(1, g - 1)


# ----------------------------------------------------------------------------
# random-effect bookkeeping
# ----------------------------------------------------------------------------

def per_observation(w: Sequence[np.ndarray], factor_index: np.ndarray) -> np.ndarray:
    """Assemble w_i from level vectors.

    ``w[l]`` has shape (..., S_l); the result has shape (..., n, L).
    """
    L = factor_index.shape[1]
    if L == 0:
        n = factor_index.shape[0]
        lead = np.shape(w[0])[:-1] if len(w) else ()
        return np.zeros(lead + (n, 0))
    cols = [np.asarray(w[l])[..., factor_index[:, l]] for l in range(L)]
    return np.stack(cols, axis=-1)


def zero_effects(design: RandomEffectDesign) -> list[np.ndarray]:
    return [np.zeros(s) for s in design.S]


# ----------------------------------------------------------------------------
# gating
# ----------------------------------------------------------------------------

def linear_predictor(X: np.ndarray, alpha: np.ndarray, beta: np.ndarray, w_obs: np.ndarray) -> np.ndarray:
    """eta[..., i, j] = alpha_j . x_i + beta_j . w_i for w_obs of shape (..., n, L)."""
    eta = X @ alpha.T
    if beta.shape[1]:
        eta = eta + w_obs @ beta.T
    return eta


def logsumexp(a: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    """Max-shifted log-sum-exp; rows that are entirely -inf give -inf."""
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


def log_softmax(eta: np.ndarray) -> np.ndarray:
    return eta - logsumexp(eta, axis=-1, keepdims=True)


def gating_probs(x, w_i, model: MixedLRMoEModel) -> np.ndarray:
    """Latent class probabilities for one covariate vector and its random effects.

    Parameters
    ----------
    x : array_like, shape (P,)
    w_i : array_like, shape (L,)
        Random effects attached to this observation, one per level.
    model : MixedLRMoEModel

    Returns
    -------
    ndarray, shape (g,)
    """
    x = np.asarray(x, dtype=float)
    w_i = np.asarray(w_i, dtype=float).reshape(model.L)
    if x.shape != (model.P,):
        raise InvalidArgumentError(f"x must have length {model.P}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(w_i))):
        raise InvalidArgumentError("gating inputs must be finite")
    eta = model.alpha @ x + model.beta @ w_i
    return np.exp(log_softmax(eta))


def log_gating_matrix(X, model: MixedLRMoEModel, w_obs) -> np.ndarray:
    return log_softmax(linear_predictor(X, model.alpha, model.beta, w_obs))


# ----------------------------------------------------------------------------
# experts and likelihood
# ----------------------------------------------------------------------------

def expert_loglik_matrix(model: MixedLRMoEModel, Y: np.ndarray) -> np.ndarray:
    """log f_j(y_i) summed over response dimensions, shape (n, g)."""
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[1] != model.D:
        raise InvalidArgumentError(f"responses have D={Y.shape[1]}, model expects {model.D}")
    out = np.zeros((Y.shape[0], model.g))
    for j, row in enumerate(model.experts):
        for d, fam in enumerate(row):
            out[:, j] += fam.logpdf(Y[:, d])
    return out


def loglik_terms(data: Dataset, model: MixedLRMoEModel, w, logf=None) -> np.ndarray:
    """Per-observation log mixture densities; w may carry a leading sample axis."""
    if logf is None:
        logf = expert_loglik_matrix(model, data.Y)
    w_obs = per_observation(w, data.factor_index)
    logpi = log_gating_matrix(data.X, model, w_obs)
    return logsumexp(logpi + logf, axis=-1)


def conditional_loglik(data: Dataset, model: MixedLRMoEModel, w) -> float:
    """Log-likelihood given a realisation ``w`` of every random effect.

    Returns ``-inf`` (with a :class:`DegenerateWarning` naming the rows) if
    some observation has zero density under every class.
    """
    _check_shapes(data, model, w)
    terms = loglik_terms(data, model, w)
    bad = np.flatnonzero(~np.isfinite(terms))
    if bad.size:
        warnings.warn(f"zero density under every class at rows {bad[:10].tolist()}", DegenerateWarning, stacklevel=2)
        return -np.inf
    return float(np.sum(terms))


def responsibilities_from_logs(logpi: np.ndarray, logf: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior class probabilities; returns (resp, degenerate_row_mask)."""
    joint = logpi + logf
    norm = logsumexp(joint, axis=-1, keepdims=True)
    degenerate = ~np.isfinite(norm[..., 0])
    with np.errstate(invalid="ignore"):
        resp = np.exp(joint - norm)
    if np.any(degenerate):
        resp[degenerate] = 1.0 / joint.shape[-1]
    return resp, degenerate


def latent_class_responsibilities_given_w(data: Dataset, model: MixedLRMoEModel, w) -> np.ndarray:
    """Matrix (n, g) of class posterior probabilities at a fixed ``w``."""
    _check_shapes(data, model, w)
    logf = expert_loglik_matrix(model, data.Y)
    logpi = log_gating_matrix(data.X, model, per_observation(w, data.factor_index))
    resp, degenerate = responsibilities_from_logs(logpi, logf)
    if degenerate.any():
        warnings.warn(
            f"{int(degenerate.sum())} degenerate row(s) replaced by uniform responsibilities",
            DegenerateWarning,
            stacklevel=2,
        )
    return resp


def _check_shapes(data: Dataset, model: MixedLRMoEModel, w) -> None:
    if data.P != model.P:
        raise InvalidArgumentError(f"data has P={data.P}, model expects {model.P}")
    data.check_design(model.design)
    if len(w) != model.L or any(np.shape(w[l])[-1] != s for l, s in enumerate(model.design.S)):
        raise InvalidArgumentError("random effects do not match the model design")
