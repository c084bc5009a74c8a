"""Exact ground truths for the Gaussian random effects model.

The three-level chain (population mean, group means, observations) is
linear-Gaussian, so posterior moments and the marginal likelihood have
closed forms.  The log evidence is the exact ceiling of any ELBO on the
same data, which makes it a strictly tighter reference than the
empirical-mean diagnostic distribution also computed here.

All quantities factorize over the feature dimension: the posterior
covariance is identical per dimension and only the means vary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import TemplateGraph

LOG_2PI = math.log(2.0 * math.pi)


class OracleDomainError(Exception):
    """The linear-Gaussian system is singular or the data is degenerate."""


@dataclass(frozen=True)
class GreSpec:
    n_groups: int
    n_per_group: int
    dim: int
    sigma_x: float
    sigma_1: float
    sigma_2: float

    def __post_init__(self):
        if min(self.sigma_x, self.sigma_1, self.sigma_2) <= 0.0:
            raise OracleDomainError("sigma values must be strictly positive")
        if self.n_groups < 1 or self.n_per_group < 1:
            raise OracleDomainError("need at least one group and one observation per group")

    @classmethod
    def from_graph(cls, graph: TemplateGraph) -> "GreSpec":
        """Extract the scales from a GRE-shaped template graph."""
        pop, grp, obs = graph.template("pop_mean"), graph.template("group_mean"), graph.template("x")
        if any(t.kind != "normal" for t in (pop, grp, obs)):
            raise OracleDomainError("oracle requires the all-normal GRE chain")
        return cls(
            n_groups=graph.plate("group").full_card,
            n_per_group=graph.plate("obs").full_card,
            dim=obs.dim,
            sigma_x=float(obs.scale),
            sigma_1=float(grp.scale),
            sigma_2=float(pop.scale),
        )


@dataclass
class GrePosterior:
    """Joint Gaussian posterior over (population mean, group means).

    mean has one row per latent: row 0 is the population mean, rows 1..G the
    group means, each a dim-vector.  cov is the (G+1, G+1) covariance shared
    across dimensions.
    """

    mean: np.ndarray
    cov: np.ndarray
    log_evidence: float

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))


def _as_grouped(x, spec: GreSpec) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x.reshape(spec.n_groups, spec.n_per_group, spec.dim)
    if x.shape != (spec.n_groups, spec.n_per_group, spec.dim):
        raise OracleDomainError(
            f"data shape {x.shape} does not match ({spec.n_groups}, {spec.n_per_group}, {spec.dim})"
        )
    if x.shape[1] == 0:
        raise OracleDomainError("empty group")
    return x


def gre_exact_posterior(x, spec: GreSpec) -> GrePosterior:
    """Posterior moments from the joint precision matrix of the latent block."""
    x = _as_grouped(x, spec)
    g, s = spec.n_groups, spec.n_per_group
    tx, t1, t2 = spec.sigma_x**-2, spec.sigma_1**-2, spec.sigma_2**-2

    prec = np.zeros((g + 1, g + 1))
    prec[0, 0] = t2 + g * t1
    prec[0, 1:] = -t1
    prec[1:, 0] = -t1
    np.fill_diagonal(prec[1:, 1:], t1 + s * tx)

    rhs = np.zeros((g + 1, spec.dim))
    rhs[1:] = tx * x.sum(axis=1)
    mean = np.linalg.solve(prec, rhs)
    cov = np.linalg.inv(prec)
    return GrePosterior(mean=mean, cov=cov, log_evidence=gre_log_evidence(x, spec))


def gre_log_evidence(x, spec: GreSpec) -> float:
    """Exact log p(X), marginalizing the chain level by level."""
    x = _as_grouped(x, spec)
    g, s = spec.n_groups, spec.n_per_group
    vx, v1, v2 = spec.sigma_x**2, spec.sigma_1**2, spec.sigma_2**2

    group_means = x.mean(axis=1)                              # (g, dim)
    ss_within = ((x - group_means[:, None, :]) ** 2).sum(axis=(0, 1))   # (dim,)
    vbar = v1 + vx / s                                        # variance of group mean given pop mean
    grand = group_means.mean(axis=0)                          # (dim,)
    ss_between = ((group_means - grand[None, :]) ** 2).sum(axis=0)      # (dim,)
    v_top = v2 + vbar / g

    per_dim = (
        -0.5 * g * s * (LOG_2PI + math.log(vx))
        - ss_within / (2.0 * vx)
        + 0.5 * g * (LOG_2PI + math.log(vx / s))
        - 0.5 * g * (LOG_2PI + math.log(vbar))
        - ss_between / (2.0 * vbar)
        + 0.5 * (LOG_2PI + math.log(vbar / g))
        - 0.5 * (LOG_2PI + math.log(v_top))
        - grand**2 / (2.0 * v_top)
    )
    return float(per_dim.sum())


def empirical_mean_elbo_baseline(x, spec: GreSpec) -> float:
    """ELBO of the diagnostic mean-field Gaussian centered on empirical means.

    The factors are Gaussians at the empirical group means and the empirical
    population mean, with the exact conditional posterior variances (the
    inverse diagonal of the joint posterior precision).  Evaluated in closed
    form; always a true lower bound on the log evidence.
    """
    x = _as_grouped(x, spec)
    g, s = spec.n_groups, spec.n_per_group
    vx, v1, v2 = spec.sigma_x**2, spec.sigma_1**2, spec.sigma_2**2

    m1 = x.mean(axis=1)                # (g, dim) group means
    m2 = m1.mean(axis=0)               # (dim,) population mean
    q1 = 1.0 / (1.0 / v1 + s / vx)     # conditional posterior variance of a group mean
    q2 = 1.0 / (1.0 / v2 + g / v1)     # conditional posterior variance of the pop mean

    e_log_p2 = -0.5 * (LOG_2PI + math.log(v2)) - (m2**2 + q2) / (2.0 * v2)
    e_log_p1 = (
        -0.5 * g * (LOG_2PI + math.log(v1))
        - (((m1 - m2[None, :]) ** 2).sum(axis=0) + g * (q1 + q2)) / (2.0 * v1)
    )
    e_log_px = (
        -0.5 * g * s * (LOG_2PI + math.log(vx))
        - (((x - m1[:, None, :]) ** 2).sum(axis=(0, 1)) + g * s * q1) / (2.0 * vx)
    )
    entropy = 0.5 * (1.0 + LOG_2PI + math.log(q2)) + 0.5 * g * (1.0 + LOG_2PI + math.log(q1))
    per_dim = e_log_p2 + e_log_p1 + e_log_px + entropy
    return float(per_dim.sum())
