"""Reparameterizable elementary distributions: Normal and LogNormal.

Both kinds are used as priors of the hierarchical model and as conditional
base distributions of the flows.  LogNormal is the exp-transform of a Normal
on the log-value; its underlying Normal supplies the unconstrained space the
flows operate in.

loc/scale may be plain floats, numpy arrays or tape Arrays; everything is
promoted through diffcore so gradients flow to learned parameters.
"""

from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from .diffcore import Array

LOG_2PI = math.log(2.0 * math.pi)

KINDS = ("normal", "lognormal")


def _as_array(x) -> Array:
    return x if isinstance(x, Array) else dc.constant(x)


class Normal:
    """Gaussian with elementwise loc and strictly positive scale."""

    kind = "normal"

    def __init__(self, loc, scale):
        self.loc = _as_array(loc)
        self.scale = _as_array(scale)
        if np.any(self.scale.data <= 0.0):
            raise dc.DomainError("Normal: scale must be strictly positive")

    def log_prob(self, value) -> Array:
        """Exact log density summed over the trailing event axis."""
        value = _as_array(value)
        z = dc.div(dc.sub(value, self.loc), self.scale)
        per_elem = dc.sub(
            dc.mul(dc.add(dc.square(z), dc.constant(LOG_2PI)), dc.constant(-0.5)),
            dc.log(self.scale),
        )
        return dc.array_sum(per_elem, axis=-1)

    def rsample(self, noise) -> Array:
        """loc + scale * noise; differentiable in loc and scale."""
        return dc.add(self.loc, dc.mul(self.scale, _as_array(noise)))

    # flows act directly on this distribution's own sample space
    def underlying(self) -> "Normal":
        return self

    @staticmethod
    def to_value(z: Array) -> Array:
        return z

    @staticmethod
    def value_log_jacobian(z: Array) -> Array | None:
        """log |d value / d z| summed over the event axis (identity: zero)."""
        return None


class LogNormal:
    """exp of a Normal on the log-value; loc/scale parameterize that Normal."""

    kind = "lognormal"

    def __init__(self, loc, scale):
        self.loc = _as_array(loc)
        self.scale = _as_array(scale)
        if np.any(self.scale.data <= 0.0):
            raise dc.DomainError("LogNormal: scale must be strictly positive")

    def log_prob(self, value) -> Array:
        value = _as_array(value)
        if np.any(value.data <= 0.0):
            raise dc.DomainError("LogNormal: log_prob of non-positive value")
        logv = dc.log(value)
        base = Normal(self.loc, self.scale).log_prob(logv)
        # change of variables: subtract sum(log value)
        return dc.sub(base, dc.array_sum(logv, axis=-1))

    def rsample(self, noise) -> Array:
        return dc.exp(Normal(self.loc, self.scale).rsample(noise))

    def underlying(self) -> Normal:
        """The Normal on log-values; flows run in this unconstrained space."""
        return Normal(self.loc, self.scale)

    @staticmethod
    def to_value(z: Array) -> Array:
        return dc.exp(z)

    @staticmethod
    def value_log_jacobian(z: Array) -> Array | None:
        return dc.array_sum(z, axis=-1)


def make_distribution(kind: str, loc, scale):
    if kind == "normal":
        return Normal(loc, scale)
    if kind == "lognormal":
        return LogNormal(loc, scale)
    raise ValueError(f"unknown distribution kind {kind!r}; expected one of {KINDS}")
