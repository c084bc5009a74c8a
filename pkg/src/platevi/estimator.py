"""Scikit-learn style front end around the training loop.

``PAVI(...).fit(X)`` optimizes the variational posterior for the observed
data and exposes posterior sampling, posterior means and an ELBO score.
Construction arguments follow the sklearn convention (stored verbatim,
validated in fit), so the estimator composes with ``clone``,
``get_params``/``set_params`` and friends.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .family import FamilyConfig, build_family
from .model import TemplateGraph
from .modelfile import load_bundled, parse_model
from .trainer import TrainConfig, build_svi_baseline, full_elbo, train


def check_observed_data(graph: TemplateGraph, X) -> dict[str, np.ndarray]:
    """Validate observed data against the graph's full grounding.

    Accepts a dict keyed by observed template name, or a bare array when the
    model has a single observed template.  Arrays may be (N, dim) flat or
    carry one axis per plate; they are returned flat, float64 and finite.
    """
    observed = graph.observed()
    if not isinstance(X, dict):
        if len(observed) != 1:
            raise ValueError("pass a dict of arrays for models with several observed templates")
        X = {observed[0].name: X}
    model = graph.ground("full")
    out = {}
    for t in observed:
        if t.name not in X:
            raise ValueError(f"missing observed data for template {t.name!r}")
        arr = np.asarray(X[t.name], dtype=np.float64)
        n = model.count(t.name)
        if arr.ndim == len(t.plates) + 1:
            arr = arr.reshape(n, t.dim) if arr.size == n * t.dim else arr
        if arr.shape != (n, t.dim):
            raise ValueError(
                f"observed {t.name!r}: expected shape compatible with ({n}, {t.dim}), got {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"observed {t.name!r}: non-finite values")
        out[t.name] = arr
    return out


class PAVI(BaseEstimator):
    """Plate-amortized variational inference estimator.

    Parameters mirror the CLI flags; ``model`` is a TemplateGraph, a bundled
    model name ("gre", "hv"), or a model-file path.
    """

    def __init__(self, model="gre", scheme="pavi-f", flow="affine", hidden=(32, 32),
                 triangular=False, encoding_size=8, learning_rate=1e-2, mc_samples=8,
                 max_steps=2000, plateau_window=500, plateau_tol=1e-3, eval_every=0,
                 seed=0):
        self.model = model
        self.scheme = scheme
        self.flow = flow
        self.hidden = hidden
        self.triangular = triangular
        self.encoding_size = encoding_size
        self.learning_rate = learning_rate
        self.mc_samples = mc_samples
        self.max_steps = max_steps
        self.plateau_window = plateau_window
        self.plateau_tol = plateau_tol
        self.eval_every = eval_every
        self.seed = seed

    def _resolve_graph(self) -> TemplateGraph:
        if isinstance(self.model, TemplateGraph):
            return self.model
        if self.model in ("gre", "hv"):
            return load_bundled(self.model)
        return parse_model(self.model)

    def fit(self, X, y=None):
        graph = self._resolve_graph()
        data = check_observed_data(graph, X)
        fam_cfg = FamilyConfig(
            flow=self.flow, hidden=tuple(self.hidden), triangular=self.triangular,
            encoding_dim=self.encoding_size, init_seed=self.seed,
        )
        if self.scheme == "svi-baseline":
            family = build_svi_baseline(graph, fam_cfg)
        else:
            family = build_family(graph, self.scheme, fam_cfg)
        cfg = TrainConfig(
            learning_rate=self.learning_rate, mc_samples=self.mc_samples,
            max_steps=self.max_steps, plateau_window=self.plateau_window,
            plateau_tol=self.plateau_tol, eval_every=self.eval_every, seed=self.seed,
        )
        self.graph_ = graph
        self.model_ = graph.ground("full")
        self.data_ = data
        self.family_ = family
        self.trace_ = train(family, self.model_, data, cfg)
        return self

    def _check_fitted(self):
        if not hasattr(self, "family_"):
            raise NotFittedError("this PAVI instance is not fitted yet; call fit first")

    def sample_posterior(self, n_samples: int = 100, seed: int = 0) -> dict[str, np.ndarray]:
        """Draws from the fitted posterior, (n_samples, N_i, dim) per latent."""
        self._check_fitted()
        rng = np.random.default_rng(seed)
        batch = self.family_.full_batch()
        noise = self.family_.draw_noise(batch, rng, n_samples)
        enc = self.family_.full_encodings(self.data_ if self.scheme == "pavi-e" else None)
        sample = self.family_.sample_and_logq_full(enc, noise)
        out = {}
        for t in self.graph_.latents():
            n = self.model_.count(t.name)
            out[t.name] = sample.values[t.name].data.reshape(n_samples, n, t.dim)
        return out

    def posterior_mean(self, n_samples: int = 256, seed: int = 0) -> dict[str, np.ndarray]:
        self._check_fitted()
        draws = self.sample_posterior(n_samples, seed)
        return {k: v.mean(axis=0) for k, v in draws.items()}

    def score(self, X=None, y=None, n_samples: int = 64, seed: int = 0) -> float:
        """Monte Carlo full-model ELBO on the fitted (or new) data."""
        self._check_fitted()
        data = self.data_ if X is None else check_observed_data(self.graph_, X)
        return full_elbo(self.family_, self.model_, data, n_samples, np.random.default_rng(seed))
