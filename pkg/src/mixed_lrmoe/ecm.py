"""Stochastic variational ECM fitting of the Mixed LRMoE model.

One iteration draws fresh standard normals ``v`` (shared by every step of
that iteration), then runs

1. the Monte Carlo E-step (averaged class responsibilities),
2. stochastic IRLS on the gating coefficients and free loadings,
3. weighted maximum likelihood for each expert,
4. damped Newton ascent on the variational parameters,

and records the ELBO on a fixed set of evaluation draws so the trace is a
deterministic function of the parameters.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.cluster.vq import ClusterError, kmeans2

from .errors import DegenerateWarning, InitializationError, InvalidConfigurationError
from .experts import ExpertFamily, ZILogNormal, expert_from_spec
from .model import (
    Dataset,
    MixedLRMoEModel,
    RandomEffectDesign,
    expert_loglik_matrix,
    free_beta_rows,
    identified_pattern,
    linear_predictor,
    log_softmax,
    per_observation,
    responsibilities_from_logs,
)
from .variational import (
    VariationalPosterior,
    VIControls,
    elbo_from_normals,
    realize,
    standard_normals,
    update_variational,
)

logger = logging.getLogger(__name__)

FROZEN_CLASS_MASS = 1e-8


@dataclass(frozen=True)
class FitConfig:
    g: int
    expert_spec: object = "gamma"
    M: int = 5
    max_ecm_iters: int = 200
    elbo_rel_tol: float = 1e-6
    window: int = 5
    irls_max_iters: int = 20
    irls_grad_tol: float = 1e-6
    vi_max_iters: int = 20
    seed: int = 0
    hessian_ridge: float = 1e-8
    eval_M: int | None = None
    refresh_draws: bool = True

    def __post_init__(self):
        counts = dict(g=self.g, M=self.M, max_ecm_iters=self.max_ecm_iters, window=self.window,
                      irls_max_iters=self.irls_max_iters, vi_max_iters=self.vi_max_iters)
        if self.eval_M is not None:
            counts["eval_M"] = self.eval_M
        for name, value in counts.items():
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise InvalidConfigurationError(f"{name} must be an integer >= 1, got {value!r}")
        for name in ("elbo_rel_tol", "irls_grad_tol"):
            if not getattr(self, name) > 0:
                raise InvalidConfigurationError(f"{name} must be > 0")
        if not self.hessian_ridge >= 0:
            raise InvalidConfigurationError("hessian_ridge must be >= 0")

    def families(self, D: int) -> list[list[type[ExpertFamily]]]:
        """Resolve ``expert_spec`` into a g x D grid of family classes."""
        spec = self.expert_spec
        if isinstance(spec, str):
            grid = [[spec] * D for _ in range(self.g)]
        else:
            spec = list(spec)
            if len(spec) != self.g:
                raise InvalidConfigurationError(f"expert_spec has {len(spec)} entries, expected g={self.g}")
            grid = [[row] * D if isinstance(row, str) else list(row) for row in spec]
        if any(len(row) != D for row in grid):
            raise InvalidConfigurationError(f"expert_spec rows must have D={D} entries")
        return [[expert_from_spec(t) for t in row] for row in grid]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FitReport:
    elbo_trace: list = field(default_factory=list)
    initial_elbo: float = float("nan")
    converged: bool = False
    reason: str = ""
    n_iter: int = 0
    n_params: int = 0
    class_weights: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def final_elbo(self) -> float:
        return self.elbo_trace[-1] if self.elbo_trace else self.initial_elbo

    def to_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        status = "converged" if self.converged else "not converged"
        return (
            f"{status} ({self.reason}) after {self.n_iter} iterations; "
            f"ELBO {self.initial_elbo:.6f} -> {self.final_elbo:.6f}; "
            f"{self.n_params} parameters; class weights {np.round(self.class_weights, 4).tolist()}"
        )


def effective_param_count(model: MixedLRMoEModel) -> int:
    experts = sum(e.n_params for row in model.experts for e in row)
    return (model.g - 1) * model.P + max(model.g - 2, 0) * model.L + experts


# ----------------------------------------------------------------------------
# initialisation
# ----------------------------------------------------------------------------

def _kmeans(points, g, rng, restarts=10):
    best, best_inertia = None, np.inf
    for _ in range(restarts):
        try:
            centers, labels = kmeans2(points, g, minit="++", seed=rng, missing="raise")
        except ClusterError:
            continue
        inertia = float(np.sum((points - centers[labels]) ** 2))
        if inertia < best_inertia:
            best, best_inertia = (centers, labels), inertia
    if best is None:
        centers, labels = kmeans2(points, g, minit="++", seed=rng, missing="warn")
        best = (centers, labels)
    return best


def cmm_initialize(data: Dataset, config: FitConfig, design: RandomEffectDesign | None = None):
    """Clusterised method of moments start.

    k-means (10 restarts) on ``log(1 + y)``; clusters are ordered by their
    centre so class 1 holds the smallest responses. Each cluster's moments
    are matched to its expert family. Zero-inflated experts are clustered on
    the strictly positive rows and start from the overall zero fraction.
    Gating intercepts reproduce the cluster proportions, loadings take the
    identifiability pattern and the posterior starts at the prior.
    """
    g = config.g
    if design is None:
        design = RandomEffectDesign(tuple(int(c.max()) + 1 for c in data.factor_index.T))
    data.check_design(design)
    families = config.families(data.D)
    any_zi = any(issubclass(c, ZILogNormal) for row in families for c in row)
    rows = np.all(data.Y > 0, axis=1) if any_zi else np.ones(data.n, dtype=bool)
    Yc = data.Y[rows]
    if Yc.shape[0] < g:
        raise InvalidConfigurationError(f"need at least g={g} usable observations to initialise")
    zero_frac = np.mean(data.Y == 0.0, axis=0)

    rng = np.random.default_rng(config.seed)
    if g == 1:
        labels = np.zeros(Yc.shape[0], dtype=int)
    else:
        points = np.log1p(Yc)
        for _ in range(10):
            centers, labels = _kmeans(points, g, rng)
            counts = np.bincount(labels, minlength=g)
            if np.all(counts > 0):
                break
        order = np.argsort(centers[:, 0])
        labels = np.argsort(order)[labels]
    counts = np.bincount(labels, minlength=g).astype(float)

    if np.any(counts == 0):
        warnings.warn(
            f"{int(np.sum(counts == 0))} empty cluster(s) after 10 re-seeds; "
            "splitting the largest cluster in half", DegenerateWarning, stacklevel=2)
        big = int(np.argmax(counts))
        for j in np.flatnonzero(counts == 0):
            labels = labels.copy()
            members = np.flatnonzero(labels == big)
            labels[members[: members.size // 2]] = j
            counts = np.bincount(labels, minlength=g).astype(float)

    experts = []
    for j in range(g):
        Yj = Yc[labels == j]
        row = []
        for d, cls in enumerate(families[j]):
            e = cls.method_of_moments(Yj[:, d])
            if isinstance(e, ZILogNormal):
                e = ZILogNormal(float(zero_frac[d]), e.meanlog, e.sdlog)
            row.append(e)
        experts.append(tuple(row))

    p = counts / counts.sum()
    alpha = np.zeros((g, data.P))
    alpha[:, 0] = np.log(p / p[-1])
    alpha, beta = identified_pattern(alpha, np.zeros((g, design.L)))
    model = MixedLRMoEModel(alpha, beta, tuple(experts), design)
    return model, VariationalPosterior.prior(design)


def split_class(model: MixedLRMoEModel, post: VariationalPosterior, share: float = 0.5):
    """Embed a g-class model into g+1 classes without changing its density.

    Class 1 is split in two copies carrying ``share`` and ``1 - share`` of its
    gating mass; the copy goes to position 2 with loadings equal to class 1's.
    Used to warm-start nested fits.
    """
    if model.g < 2:
        raise InvalidConfigurationError("need g >= 2 to split class 1 while keeping a reference class")
    if not 0.0 < share < 1.0:
        raise InvalidConfigurationError(f"share must lie in (0, 1), got {share}")
    unit = np.zeros(model.P)
    unit[0] = 1.0
    a1 = model.alpha[0]
    alpha = np.vstack([a1 + math.log(share) * unit, a1 + math.log1p(-share) * unit, model.alpha[1:]])
    beta = np.vstack([model.beta[:1], model.beta[:1], model.beta[1:]])
    experts = (model.experts[0],) + model.experts
    return MixedLRMoEModel(alpha, beta, experts, model.design), post


# ----------------------------------------------------------------------------
# E-step
# ----------------------------------------------------------------------------

def _sample_effects_obs(data, post, v):
    """Per-observation random effects for each draw, shape (M, n, L)."""
    if post.L == 0:
        return np.zeros((1, data.n, 0))
    return per_observation(realize(post, v), data.factor_index)


def responsibilities_mc(data, model, post, v, logf=None):
    if logf is None:
        logf = expert_loglik_matrix(model, data.Y)
    W = _sample_effects_obs(data, post, v)
    logpi = log_softmax(linear_predictor(data.X, model.alpha, model.beta, W))
    resp, degenerate = responsibilities_from_logs(np.broadcast_to(logpi, W.shape[:-1] + logf.shape[-1:]), logf)
    if degenerate.any():
        warnings.warn(
            f"{int(np.any(degenerate, axis=0).sum())} degenerate row(s) replaced by uniform responsibilities",
            DegenerateWarning, stacklevel=2)
    return resp.mean(axis=0) if resp.ndim == 3 else resp


def e_step(data: Dataset, model: MixedLRMoEModel, post: VariationalPosterior, M: int = 5, seed=None,
           v=None) -> np.ndarray:
    """Monte Carlo E-step: responsibilities averaged over M posterior draws."""
    if v is None:
        v = standard_normals(post.design, seed, M)
    z = responsibilities_mc(data, model, post, v)
    return z / z.sum(axis=1, keepdims=True)


# ----------------------------------------------------------------------------
# CM-step (i): gating by stochastic IRLS
# ----------------------------------------------------------------------------

class GatingObjective:
    """``Q1 = mean_m sum_ij z_ij log pi_ij`` over fixed draws of the effects."""

    def __init__(self, X, W, z):
        self.X = X
        self.W = W  # (M, n, L)
        self.z = z

    def eta(self, alpha, beta):
        eta = linear_predictor(self.X, alpha, beta, self.W)
        return eta if eta.ndim == 3 else eta[None]

    def value(self, alpha, beta):
        logpi = log_softmax(self.eta(alpha, beta))
        return float(np.einsum("mij,ij->", logpi, self.z)) / self.W.shape[0]

    def alpha_derivatives(self, alpha, beta, j):
        pi = np.exp(log_softmax(self.eta(alpha, beta)))[..., j]
        resid = self.z[:, j] - pi.mean(0)
        wts = (pi * (1.0 - pi)).mean(0)
        return self.X.T @ resid, -(self.X * wts[:, None]).T @ self.X

    def beta_derivatives(self, alpha, beta, j):
        pi = np.exp(log_softmax(self.eta(alpha, beta)))[..., j]
        M = self.W.shape[0]
        resid = self.z[None, :, j] - pi
        grad = np.einsum("mi,mik->k", resid, self.W) / M
        hess = -np.einsum("mi,mik,mil->kl", pi * (1.0 - pi), self.W, self.W) / M
        return grad, hess


def _newton_block(obj: GatingObjective, alpha, beta, j, which, config, n, notes):
    """Newton iterations on one coefficient row with step halving on Q1."""
    deriv = obj.alpha_derivatives if which == "alpha" else obj.beta_derivatives
    q = obj.value(alpha, beta)
    grad = None
    for _ in range(config.irls_max_iters):
        grad, hess = deriv(alpha, beta, j)
        if np.max(np.abs(grad), initial=0.0) <= config.irls_grad_tol * n:
            break
        H = hess - config.hessian_ridge * np.eye(hess.shape[0])
        try:
            step = -np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            notes.append(f"singular {which} Hessian for class {j + 1}; update skipped")
            break
        if not np.all(np.isfinite(step)):
            notes.append(f"singular {which} Hessian for class {j + 1}; update skipped")
            break
        t = 1.0
        for _ in range(21):
            a_c, b_c = alpha.copy(), beta.copy()
            target = a_c if which == "alpha" else b_c
            target[j] += t * step
            q_c = obj.value(a_c, b_c)
            if q_c >= q:
                alpha, beta, q = a_c, b_c, q_c
                break
            t *= 0.5
        else:
            break
    return alpha, beta, grad


def cm_step_gating(data: Dataset, model: MixedLRMoEModel, post: VariationalPosterior, responsibilities,
                   M: int = 5, seed=None, config: FitConfig | None = None, v=None):
    """Stochastic IRLS for the gating coefficients and free loadings.

    Cycles over classes ``j < g``: Newton steps on ``alpha_j`` then on
    ``beta_j`` (rows 2..g-1 only), with gradients and Hessians averaged over
    the Monte Carlo draws. A step is kept only when the Monte Carlo
    objective does not decrease; otherwise it is halved. The gradient
    tolerance ``irls_grad_tol`` is per observation.

    Returns
    -------
    alpha, beta : ndarray
    """
    config = config or FitConfig(g=model.g)
    z = np.asarray(responsibilities, dtype=float)
    if v is None:
        v = standard_normals(post.design, seed, M)
    obj = GatingObjective(data.X, _sample_effects_obs(data, post, v), z)
    alpha, beta = identified_pattern(model.alpha, model.beta)
    notes: list[str] = []
    free_beta = set(free_beta_rows(model.g)) if model.L else set()
    for _ in range(config.irls_max_iters):
        worst = 0.0
        for j in range(model.g - 1):
            alpha, beta, grad = _newton_block(obj, alpha, beta, j, "alpha", config, data.n, notes)
            worst = max(worst, np.max(np.abs(grad), initial=0.0) if grad is not None else 0.0)
            if j in free_beta:
                alpha, beta, grad = _newton_block(obj, alpha, beta, j, "beta", config, data.n, notes)
                worst = max(worst, np.max(np.abs(grad), initial=0.0) if grad is not None else 0.0)
        if worst <= config.irls_grad_tol * data.n:
            break
    for msg in dict.fromkeys(notes):
        warnings.warn(msg, DegenerateWarning, stacklevel=2)
    return alpha, beta


# ----------------------------------------------------------------------------
# CM-step (i): experts
# ----------------------------------------------------------------------------

def _families_grid(expert_spec, g, D):
    if isinstance(expert_spec, FitConfig):
        return expert_spec.families(D)
    if expert_spec and isinstance(expert_spec[0], (list, tuple)) and isinstance(expert_spec[0][0], type):
        return [list(r) for r in expert_spec]
    return FitConfig(g=g, expert_spec=expert_spec).families(D)


def cm_step_experts(data: Dataset, responsibilities, expert_spec, previous=None) -> tuple:
    """Weighted maximum likelihood for every expert.

    ``expert_spec`` is a tag, a per-class list of tags, a g x D grid of tags
    or a :class:`FitConfig`. Classes whose responsibility mass is below
    ``1e-8 * n`` keep ``previous`` parameters. When ``previous`` is given a
    new estimate replaces it only if the weighted log-likelihood does not
    drop.
    """
    z = np.asarray(responsibilities, dtype=float)
    g = z.shape[1]
    families = _families_grid(expert_spec, g, data.D)
    mass = z.sum(axis=0)
    out = []
    for j in range(g):
        if mass[j] < FROZEN_CLASS_MASS * data.n:
            if previous is None:
                raise InvalidConfigurationError(f"class {j + 1} has no responsibility mass")
            warnings.warn(f"class {j + 1} frozen (responsibility mass {mass[j]:.3g})", DegenerateWarning,
                          stacklevel=2)
            out.append(tuple(previous[j]))
            continue
        row = []
        for d, cls in enumerate(families[j]):
            y = data.Y[:, d]
            try:
                new = cls.fit_weighted(y, z[:, j])
            except InvalidConfigurationError as exc:
                raise InvalidConfigurationError(f"class {j + 1}, dimension {d + 1}: {exc}") from None
            if previous is not None:
                old = previous[j][d]
                keep = z[:, j] > 0
                q_new = np.dot(z[keep, j], new.logpdf(y[keep]))
                q_old = np.dot(z[keep, j], old.logpdf(y[keep]))
                if not q_new >= q_old:
                    new = old
            row.append(new)
        out.append(tuple(row))
    return tuple(out)


# ----------------------------------------------------------------------------
# driver
# ----------------------------------------------------------------------------

def evaluation_normals(design: RandomEffectDesign, seed, M: int) -> tuple:
    """Fixed draws behind the recorded ELBO trace; reused when re-scoring a fit."""
    return standard_normals(design, np.random.SeedSequence(seed).spawn(1)[0], M)


# ----------------------------------------------------------------------------
# fitting loop
# ----------------------------------------------------------------------------

def fit(data: Dataset, config: FitConfig, init=None, design: RandomEffectDesign | None = None):
    """Fit a Mixed LRMoE model.

    Parameters
    ----------
    data : Dataset
    config : FitConfig
    init : (MixedLRMoEModel, VariationalPosterior), optional
        Warm start; CMM initialisation is used otherwise.
    design : RandomEffectDesign, optional
        Factor counts; inferred from ``data.factor_index`` when omitted.

    Returns
    -------
    model, posterior, report
    """
    t0 = time.perf_counter()
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegenerateWarning)
        if init is None:
            model, post = cmm_initialize(data, config, design)
        else:
            model, post = init
            if model.g != config.g:
                raise InvalidConfigurationError(f"warm start has g={model.g}, config has g={config.g}")
            model = model.identified()
        data.check_design(model.design)
        families = config.families(data.D)
        eval_v = evaluation_normals(model.design, config.seed, config.eval_M or config.M)
        iter_rng = np.random.default_rng(seeds[1])
        controls = VIControls(max_iters=config.vi_max_iters)

        report = FitReport(n_params=effective_param_count(model))
        elbo0, _ = elbo_from_normals(data, model, post, eval_v)
        report.initial_elbo = elbo0
        if not np.isfinite(elbo0):
            logf = expert_loglik_matrix(model, data.Y)
            bad = np.flatnonzero(~np.isfinite(np.max(logf, axis=1)))
            raise InitializationError(
                f"initial ELBO is {elbo0}; rows with zero density under every class: {bad[:10].tolist()}"
            )

        report.reason = "max_ecm_iters reached"
        z = None
        for t in range(config.max_ecm_iters):
            v = standard_normals(model.design, iter_rng, config.M) if config.refresh_draws else eval_v
            logf = expert_loglik_matrix(model, data.Y)
            z = responsibilities_mc(data, model, post, v, logf)
            alpha, beta = cm_step_gating(data, model, post, z, config=config, v=v)
            model = model.replace(alpha=alpha, beta=beta)
            experts = cm_step_experts(data, z, families, previous=model.experts)
            model = model.replace(experts=experts)
            post = update_variational(data, model, post, z, v=v, step_controls=controls)
            elbo, _ = elbo_from_normals(data, model, post, eval_v)
            report.elbo_trace.append(elbo)
            report.n_iter = t + 1
            logger.debug("iteration %d: ELBO %.8f", t + 1, elbo)
            if not np.isfinite(elbo):
                report.reason = "non-finite ELBO"
                break
            if t >= config.window:
                prev = report.elbo_trace[-1 - config.window]
                if elbo - prev <= config.elbo_rel_tol * abs(elbo):
                    report.converged = True
                    report.reason = f"relative ELBO change below {config.elbo_rel_tol:g} over {config.window} iterations"
                    break

    report.n_params = effective_param_count(model)
    if z is not None:
        report.class_weights = z.mean(axis=0).tolist()
    report.warnings = list(dict.fromkeys(str(w.message) for w in caught))
    for msg in report.warnings:
        logger.warning(msg)
    report.elapsed = time.perf_counter() - t0
    return model, post, report
