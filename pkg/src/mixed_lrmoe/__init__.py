"""Mixed LRMoE: logit-gated mixture of experts with Gaussian random effects,
fitted by stochastic variational ECM."""

from .analytics import (
    LorenzCurve,
    PolicyholderPosterior,
    credible_interval,
    credible_intervals,
    evaluate,
    ks_statistic,
    ordered_lorenz,
    policyholder_posterior,
    posterior_class_probs,
    posterior_premium,
)
from .ecm import (
    FitConfig,
    FitReport,
    cm_step_experts,
    cm_step_gating,
    cmm_initialize,
    e_step,
    effective_param_count,
    fit,
    split_class,
)
from .errors import (
    DataFormatError,
    DegenerateWarning,
    InitializationError,
    InvalidArgumentError,
    InvalidConfigurationError,
    MixedLRMoEError,
    SupportWarning,
)
from .experts import ExpertFamily, Gamma, LogNormal, ZILogNormal, expert_logpdf, expert_mean
from .formats import ModelArchive, read_archive, read_dataset, write_archive, write_dataset
from .model import (
    Dataset,
    MixedLRMoEModel,
    RandomEffectDesign,
    conditional_loglik,
    gating_probs,
    latent_class_responsibilities_given_w,
)
from .variational import (
    EffectSamples,
    VariationalPosterior,
    VIControls,
    elbo_estimate,
    grad_wrt_w,
    kl_to_prior,
    sample_w,
    update_variational,
)
from .simulation import SimSpec, Simulated, simulate

__version__ = "0.1.0"
