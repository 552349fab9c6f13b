"""Synthetic portfolios drawn from a known Mixed LRMoE model.

Covariates are an intercept followed by independent Bernoulli indicators.
Each observation is attached to one factor per random-effect level,
either uniformly at random, in a balanced round-robin, or nested (the
finest level is drawn uniformly and every coarser factor owns a contiguous
block of finer factors). The random
effects are standard normal. Class labels are returned as class numbers
``1..g``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .experts import Gamma, ZILogNormal
from .model import Dataset, MixedLRMoEModel, RandomEffectDesign, linear_predictor, log_softmax, per_observation


ASSIGNMENTS = ("uniform", "balanced", "nested")


@dataclass(frozen=True)
class SimSpec:
    n: int
    model: MixedLRMoEModel
    seed: int = 0
    assignment: str = "uniform"
    bernoulli_p: float = 0.5

    def __post_init__(self):
        if self.n < 1:
            raise InvalidArgumentError("n must be >= 1")
        if self.assignment not in ASSIGNMENTS:
            raise InvalidArgumentError(f"assignment must be one of {ASSIGNMENTS}, got {self.assignment!r}")
        S = self.model.design.S
        if self.assignment == "nested" and any(a > b for a, b in zip(S, S[1:])):
            raise InvalidArgumentError(f"nested assignment needs non-decreasing factor counts, got {S}")
        if not 0.0 <= self.bernoulli_p <= 1.0:
            raise InvalidArgumentError("bernoulli_p must lie in [0, 1]")


@dataclass(frozen=True)
class Simulated:
    data: Dataset
    w: tuple
    labels: np.ndarray


def simulate(spec: SimSpec) -> Simulated:
    """Draw a dataset together with the true random effects and class labels."""
    model = spec.model
    rng = np.random.default_rng(spec.seed)
    n, P = spec.n, model.P
    X = np.ones((n, P))
    if P > 1:
        X[:, 1:] = rng.random((n, P - 1)) < spec.bernoulli_p

    S = model.design.S
    factor_index = np.empty((n, model.L), dtype=np.int64)
    if spec.assignment == "nested" and model.L:
        finest = rng.integers(0, S[-1], size=n)
        for l, S_l in enumerate(S):
            factor_index[:, l] = finest * S_l // S[-1]
    else:
        for l, S_l in enumerate(S):
            if spec.assignment == "uniform":
                factor_index[:, l] = rng.integers(0, S_l, size=n)
            else:
                factor_index[:, l] = rng.permutation(np.arange(n) % S_l)
    w = tuple(rng.standard_normal(S_l) for S_l in model.design.S)

    logpi = log_softmax(linear_predictor(X, model.alpha, model.beta, per_observation(w, factor_index)))
    cum = np.cumsum(np.exp(logpi), axis=1)
    u = rng.random(n)[:, None]
    labels = np.minimum(np.sum(u >= cum, axis=1), model.g - 1)

    Y = np.empty((n, model.D))
    for j in range(model.g):
        rows = np.flatnonzero(labels == j)
        for d, fam in enumerate(model.experts[j]):
            Y[rows, d] = fam.rvs(rng, rows.size)
    return Simulated(Dataset(X, Y, factor_index), w, labels + 1)


# ----------------------------------------------------------------------------
# reference designs (parameters chosen to be well separated)
# ----------------------------------------------------------------------------

def design_one_model(S1: int = 200) -> MixedLRMoEModel:
    """Two gamma classes, one random-effect level."""
    alpha = [[-0.5, 1.0], [0.0, 0.0]]
    beta = [[1.0], [0.0]]
    experts = ((Gamma(2.0, 1.0),), (Gamma(5.0, 6.0),))
    return MixedLRMoEModel(alpha, beta, experts, RandomEffectDesign((S1,)))


def design_two_model(S1: int = 200, S2: int = 2000) -> MixedLRMoEModel:
    """Three gamma classes, two random-effect levels."""
    alpha = [[-0.5, 1.0], [0.5, -1.0], [0.0, 0.0]]
    beta = [[1.0, 1.0], [-0.5, 0.5], [0.0, 0.0]]
    experts = ((Gamma(2.0, 1.0),), (Gamma(6.0, 4.0),), (Gamma(20.0, 5.0),))
    return MixedLRMoEModel(alpha, beta, experts, RandomEffectDesign((S1, S2)))


def design_one(n: int = 50_000, S1: int = 200, seed: int = 0) -> SimSpec:
    return SimSpec(n=n, model=design_one_model(S1), seed=seed)


def design_two(n: int = 50_000, S1: int = 200, S2: int = 2000, seed: int = 0) -> SimSpec:
    return SimSpec(n=n, model=design_two_model(S1, S2), seed=seed)


def ratemaking_model(n_policyholders: int = 2000) -> MixedLRMoEModel:
    """Zero-inflated lognormal portfolio with a claim-prone class 1."""
    alpha = [[-1.5, 0.5], [0.0, 0.0]]
    beta = [[1.0], [0.0]]
    experts = ((ZILogNormal(0.6, 8.0, 1.0),), (ZILogNormal(0.97, 7.0, 1.0),))
    return MixedLRMoEModel(alpha, beta, experts, RandomEffectDesign((n_policyholders,)))
