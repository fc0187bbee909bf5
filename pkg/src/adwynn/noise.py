"""Martingale-difference error generators.

Every variant draws errors with conditional mean zero and bounded
conditional variance given the past.  The catalog covers the regimes
the asymptotic results distinguish:

- ``IIDGaussian`` and ``IIDScaledT``: i.i.d., independent of the past
  (the Lindeberg condition holds by identical distribution).
- ``IIDScaledT`` with df > 4 additionally has finite third absolute
  conditional moments, the classical sufficient moment bound.
- ``Heteroscedastic``: conditional s.d. sigma * sqrt(1 + c/i) at step
  i, so the conditional variance converges to sigma^2 (asymptotic
  homogeneity).
- ``NonAH``: the conditional variance alternates between two values
  and never settles; deliberately violates asymptotic homogeneity for
  negative tests while still being a martingale difference.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import DomainError

_MASK64 = (1 << 64) - 1


def mix_seed(master_seed: int, index: int) -> int:
    """Derive a replicate seed from a master seed and replicate index.

    SplitMix-style 64-bit avalanche of master_seed + (index+1) * golden
    ratio increment.  Documented so replicate streams are reproducible
    by construction, not by accident of the RNG library.
    """
    z = (int(master_seed) + (int(index) + 1) * 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic 64-bit-seeded generator."""
    return np.random.Generator(np.random.PCG64(int(seed) & _MASK64))


@dataclass(frozen=True)
class IIDGaussian:
    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise DomainError("sigma must be >= 0")

    def conditional_sd(self, step: int) -> float:
        return self.sigma

    def limit_variance(self) -> float:
        return self.sigma**2

    def draw(self, step: int, rng: np.random.Generator) -> float:
        return self.sigma * rng.standard_normal()


@dataclass(frozen=True)
class IIDScaledT:
    """Student-t rescaled so the variance equals scale^2; df must exceed 4."""

    df: float
    scale: float

    def __post_init__(self):
        if self.df <= 4:
            raise DomainError("df must exceed 4 so third absolute moments exist comfortably")
        if self.scale <= 0:
            raise DomainError("scale must be positive")

    def conditional_sd(self, step: int) -> float:
        return self.scale

    def limit_variance(self) -> float:
        return self.scale**2

    def draw(self, step: int, rng: np.random.Generator) -> float:
        return self.scale * np.sqrt((self.df - 2.0) / self.df) * rng.standard_t(self.df)


@dataclass(frozen=True)
class Heteroscedastic:
    """Gaussian with conditional s.d. sigma*sqrt(1 + decay/i) at step i."""

    sigma: float
    decay: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise DomainError("sigma must be positive")
        if self.decay < 0:
            raise DomainError("decay must be >= 0")

    def conditional_sd(self, step: int) -> float:
        return self.sigma * np.sqrt(1.0 + self.decay / step)

    def limit_variance(self) -> float:
        return self.sigma**2

    def draw(self, step: int, rng: np.random.Generator) -> float:
        return self.conditional_sd(step) * rng.standard_normal()


@dataclass(frozen=True)
class NonAH:
    """Oscillating conditional variance; no asymptotic limit exists."""

    sigma_odd: float
    sigma_even: float

    def __post_init__(self):
        if self.sigma_odd <= 0 or self.sigma_even <= 0:
            raise DomainError("both standard deviations must be positive")
        if self.sigma_odd == self.sigma_even:
            raise DomainError("NonAH requires sigma_odd != sigma_even")

    def conditional_sd(self, step: int) -> float:
        return self.sigma_odd if step % 2 == 1 else self.sigma_even

    def limit_variance(self) -> None:
        return None

    def draw(self, step: int, rng: np.random.Generator) -> float:
        return self.conditional_sd(step) * rng.standard_normal()


ErrorSpec = Union[IIDGaussian, IIDScaledT, Heteroscedastic, NonAH]


class ErrorProcess:
    """Stateful wrapper advancing the step counter across draws."""

    def __init__(self, spec: ErrorSpec):
        self.spec = spec
        self.step = 0

    def reset(self) -> None:
        self.step = 0


def next_error(proc: ErrorProcess, rng: np.random.Generator) -> float:
    proc.step += 1
    return float(proc.spec.draw(proc.step, rng))


def conditional_variance(proc: ErrorProcess | ErrorSpec, step: int) -> float:
    """Exact conditional variance the variant uses at the given step."""
    if step < 1:
        raise DomainError("step must be >= 1")
    spec = proc.spec if isinstance(proc, ErrorProcess) else proc
    return float(spec.conditional_sd(step)) ** 2


_VARIANTS = {
    "iid_gaussian": (IIDGaussian, ("sigma",)),
    "iid_scaled_t": (IIDScaledT, ("df", "scale")),
    "heteroscedastic": (Heteroscedastic, ("sigma", "decay")),
    "non_ah": (NonAH, ("sigma_odd", "sigma_even")),
}


def make_error_spec(variant: str, **params) -> ErrorSpec:
    """Build an error spec from its configuration name and parameters."""
    try:
        cls, names = _VARIANTS[variant]
    except KeyError:
        known = ", ".join(sorted(_VARIANTS))
        raise DomainError(f"unknown noise variant {variant!r}; known: {known}") from None
    missing = [k for k in names if k not in params]
    extra = [k for k in params if k not in names]
    if missing or extra:
        raise DomainError(
            f"noise variant {variant!r} takes {names}; missing {missing}, unexpected {extra}"
        )
    try:
        values = {k: float(v) for k, v in params.items()}
    except (TypeError, ValueError):
        raise DomainError(f"noise variant {variant!r} parameters must be numbers") from None
    return cls(**values)
