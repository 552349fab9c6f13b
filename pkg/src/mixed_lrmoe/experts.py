"""Covariate-free expert distributions.

Each expert is an immutable parameter record with vectorised ``logpdf``,
``cdf``, ``mean``, sampling, method-of-moments and weighted maximum
likelihood. Zero-inflated experts use the atom-plus-density convention:
the log-density of an exact zero is ``log(zeroprob)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, fields
from typing import ClassVar

import numpy as np
from scipy import special

from .errors import InvalidArgumentError, InvalidConfigurationError, SupportWarning

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

# shape cap used when the weighted sample is (numerically) degenerate
_MAX_GAMMA_SHAPE = 1e8


def _finite_positive(name: str, value: float) -> float:
    value = float(value)
    if not (math.isfinite(value) and value > 0.0):
        raise InvalidArgumentError(f"{name} must be finite and > 0, got {value!r}")
    return value


class ExpertFamily:
    """Base class; concrete families register themselves under ``tag``."""

    tag: ClassVar[str] = ""
    registry: ClassVar[dict[str, type["ExpertFamily"]]] = {}

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if cls.tag:
            ExpertFamily.registry[cls.tag] = cls

    @property
    def n_params(self) -> int:
        return len(fields(self))

    def params(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}

    def to_dict(self) -> dict:
        return {"family": self.tag, **self.params()}

    @staticmethod
    def from_dict(d: dict) -> "ExpertFamily":
        d = dict(d)
        try:
            cls = ExpertFamily.registry[d.pop("family")]
        except KeyError as exc:
            raise InvalidArgumentError(f"unknown expert family {exc}") from None
        return cls(**d)

    # interface -------------------------------------------------------------
    def logpdf(self, y):
        raise NotImplementedError

    def cdf(self, y):
        raise NotImplementedError

    def mean(self) -> float:
        raise NotImplementedError

    def rvs(self, rng: np.random.Generator, size: int) -> np.ndarray:
        raise NotImplementedError

    @classmethod
    def method_of_moments(cls, y: np.ndarray) -> "ExpertFamily":
        raise NotImplementedError

    @classmethod
    def fit_weighted(cls, y: np.ndarray, weights: np.ndarray) -> "ExpertFamily":
        raise NotImplementedError

    def in_support(self, y) -> np.ndarray:
        return np.asarray(y, dtype=float) > 0.0


@dataclass(frozen=True)
class Gamma(ExpertFamily):
    """Gamma(shape ``k``, scale ``theta``)."""

    tag: ClassVar[str] = "gamma"
    shape: float
    scale: float

    def __post_init__(self):
        object.__setattr__(self, "shape", _finite_positive("shape", self.shape))
        object.__setattr__(self, "scale", _finite_positive("scale", self.scale))

    def logpdf(self, y):
        y = np.asarray(y, dtype=float)
        k, th = self.shape, self.scale
        with np.errstate(divide="ignore", invalid="ignore"):
            out = (k - 1.0) * np.log(y) - y / th - k * math.log(th) - special.gammaln(k)
        return np.where(y > 0.0, out, -np.inf)

    def cdf(self, y):
        y = np.asarray(y, dtype=float)
        return special.gammainc(self.shape, np.maximum(y, 0.0) / self.scale)

    def mean(self) -> float:
        return self.shape * self.scale

    def rvs(self, rng, size):
        return rng.gamma(self.shape, self.scale, size=size)

    @classmethod
    def method_of_moments(cls, y):
        y = np.asarray(y, dtype=float)
        y = y[y > 0.0]
        if y.size == 0:
            raise InvalidConfigurationError("gamma expert needs positive responses")
        m, v = y.mean(), y.var()
        if not v > 0.0:
            return cls(_MAX_GAMMA_SHAPE, m / _MAX_GAMMA_SHAPE)
        return cls(m * m / v, v / m)

    @classmethod
    def fit_weighted(cls, y, weights):
        """Weighted MLE via Newton iterations on the profile equation
        ``log k - digamma(k) = log(ybar) - mean(log y)``."""
        y, w = _positive_part(y, weights, cls.tag)
        wsum = w.sum()
        ybar = np.dot(w, y) / wsum
        s = math.log(ybar) - np.dot(w, np.log(y)) / wsum
        k = _gamma_shape_from_stat(s)
        return cls(k, ybar / k)


def _gamma_shape_from_stat(s: float) -> float:
    if not s > 1e-14:
        return _MAX_GAMMA_SHAPE
    # Minka's closed-form start, then Newton on log k - psi(k) - s = 0
    k = (3.0 - s + math.sqrt((s - 3.0) ** 2 + 24.0 * s)) / (12.0 * s)
    for _ in range(100):
        f = math.log(k) - special.digamma(k) - s
        fp = 1.0 / k - special.polygamma(1, k)
        k_new = k - f / fp
        if k_new <= 0.0:
            k_new = 0.5 * k
        if abs(k_new - k) <= 1e-14 * k:
            k = k_new
            break
        k = k_new
    return min(k, _MAX_GAMMA_SHAPE)


@dataclass(frozen=True)
class LogNormal(ExpertFamily):
    """LogNormal(``meanlog``, ``sdlog``)."""

    tag: ClassVar[str] = "lognormal"
    meanlog: float
    sdlog: float

    def __post_init__(self):
        m = float(self.meanlog)
        if not math.isfinite(m):
            raise InvalidArgumentError(f"meanlog must be finite, got {m!r}")
        object.__setattr__(self, "meanlog", m)
        object.__setattr__(self, "sdlog", _finite_positive("sdlog", self.sdlog))

    def logpdf(self, y):
        y = np.asarray(y, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            ly = np.log(y)
            out = -ly - math.log(self.sdlog) - _LOG_SQRT_2PI - 0.5 * ((ly - self.meanlog) / self.sdlog) ** 2
        return np.where(y > 0.0, out, -np.inf)

    def cdf(self, y):
        y = np.asarray(y, dtype=float)
        with np.errstate(divide="ignore"):
            z = (np.log(np.maximum(y, 0.0)) - self.meanlog) / self.sdlog
        return special.ndtr(z)

    def mean(self) -> float:
        return math.exp(self.meanlog + 0.5 * self.sdlog**2)

    def rvs(self, rng, size):
        return rng.lognormal(self.meanlog, self.sdlog, size=size)

    @classmethod
    def method_of_moments(cls, y):
        y = np.asarray(y, dtype=float)
        y = y[y > 0.0]
        if y.size == 0:
            raise InvalidConfigurationError("lognormal expert needs positive responses")
        m, v = y.mean(), y.var()
        s2 = math.log1p(v / (m * m)) if v > 0.0 else 1e-8
        return cls(math.log(m) - 0.5 * s2, math.sqrt(s2))

    @classmethod
    def fit_weighted(cls, y, weights):
        y, w = _positive_part(y, weights, cls.tag)
        ly = np.log(y)
        wsum = w.sum()
        m = np.dot(w, ly) / wsum
        s2 = np.dot(w, (ly - m) ** 2) / wsum
        return cls(m, math.sqrt(max(s2, 1e-16)))


@dataclass(frozen=True)
class ZILogNormal(ExpertFamily):
    """Zero-inflated lognormal: mass ``zeroprob`` at zero, LogNormal otherwise."""

    tag: ClassVar[str] = "zilognormal"
    zeroprob: float
    meanlog: float
    sdlog: float

    def __post_init__(self):
        d = float(self.zeroprob)
        if not (0.0 <= d <= 1.0):
            raise InvalidArgumentError(f"zeroprob must lie in [0, 1], got {d!r}")
        object.__setattr__(self, "zeroprob", d)
        object.__setattr__(self, "_positive", LogNormal(self.meanlog, self.sdlog))
        object.__setattr__(self, "meanlog", float(self.meanlog))
        object.__setattr__(self, "sdlog", float(self.sdlog))

    def in_support(self, y):
        return np.asarray(y, dtype=float) >= 0.0

    def logpdf(self, y):
        y = np.asarray(y, dtype=float)
        with np.errstate(divide="ignore"):
            log_zero = math.log(self.zeroprob) if self.zeroprob > 0 else -np.inf
            log_pos = math.log1p(-self.zeroprob) if self.zeroprob < 1 else -np.inf
        out = np.where(y == 0.0, log_zero, log_pos + self._positive.logpdf(y))
        return np.where(y < 0.0, -np.inf, out)

    def cdf(self, y):
        y = np.asarray(y, dtype=float)
        c = self.zeroprob + (1.0 - self.zeroprob) * self._positive.cdf(y)
        return np.where(y < 0.0, 0.0, c)

    def mean(self) -> float:
        return (1.0 - self.zeroprob) * self._positive.mean()

    def rvs(self, rng, size):
        zero = rng.random(size) < self.zeroprob
        pos = self._positive.rvs(rng, size)
        return np.where(zero, 0.0, pos)

    @classmethod
    def method_of_moments(cls, y):
        y = np.asarray(y, dtype=float)
        delta = float(np.mean(y == 0.0))
        if delta == 1.0:
            return cls(1.0, 0.0, 1.0)
        pos = LogNormal.method_of_moments(y)
        return cls(delta, pos.meanlog, pos.sdlog)

    @classmethod
    def fit_weighted(cls, y, weights):
        y = np.asarray(y, dtype=float)
        w = np.asarray(weights, dtype=float)
        zero = y == 0.0
        delta = float(w[zero].sum() / w.sum())
        if not (w[~zero] > 0.0).any():
            return cls(1.0, 0.0, 1.0)
        pos = LogNormal.fit_weighted(y[~zero], w[~zero])
        return cls(min(max(delta, 0.0), 1.0), pos.meanlog, pos.sdlog)


def _positive_part(y, weights, tag):
    y = np.asarray(y, dtype=float)
    w = np.asarray(weights, dtype=float)
    keep = (y > 0.0) & (w > 0.0)
    if not keep.any():
        raise InvalidConfigurationError(f"{tag} expert has no positive responses with positive weight")
    return y[keep], w[keep]


def expert_logpdf(family: ExpertFamily, y):
    """Log-density of ``y`` under ``family``.

    Responses outside the support give ``-inf``; a :class:`SupportWarning`
    is issued so the caller can see which values were affected.
    """
    out = family.logpdf(y)
    bad = ~family.in_support(y)
    if np.any(bad):
        warnings.warn(
            f"{int(np.sum(bad))} response value(s) outside the support of {family.tag}",
            SupportWarning,
            stacklevel=2,
        )
    return out[()] if np.ndim(out) == 0 else out


def expert_mean(family: ExpertFamily) -> float:
    return family.mean()


def expert_from_spec(tag: str) -> type[ExpertFamily]:
    try:
        return ExpertFamily.registry[tag.lower()]
    except KeyError:
        raise InvalidConfigurationError(
            f"unknown expert family {tag!r}; choose from {sorted(ExpertFamily.registry)}"
        ) from None


__all__ = [
    "ExpertFamily",
    "Gamma",
    "LogNormal",
    "ZILogNormal",
    "expert_logpdf",
    "expert_mean",
    "expert_from_spec",
]
