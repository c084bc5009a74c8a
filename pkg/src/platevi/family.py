"""The variational family: shared conditional flows plus an encoding source.

Every latent template gets one conditional flow whose weights are shared
across its ground RVs; what individualizes ground RV n is the encoding row
E[i, n] fed into the flow's context.  Free encodings (scheme "pavi-f") live
in per-plate-level arrays at the full model's cardinalities and are sliced
per batch; scheme "pavi-e" computes them with a set encoder from the batch's
data slice instead.

Sampling runs in topological (cascading) order: each flow's base
distribution is the prior conditional evaluated at the already-sampled
parent values, so the variational distribution inherits the prior's forward
dependency structure.  For templates with lognormal priors the flow acts on
the underlying log-space and the sample is exponentiated afterwards, with
the exp Jacobian folded into the density.

Value arrays are flat (rows, dim): rows enumerate plate index tuples in
row-major order; with mc_samples > 1 the Monte Carlo copies are stacked
sample-major, i.e. row = m * n_batch + j.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Array, ContractError, Parameter
from .distributions import Normal, make_distribution
from .encoder import EncoderStack
from .flows import FlowContext, build_flow, load_params, save_params
from .model import PlateBatch, TemplateGraph

SCHEMES = ("pavi-f", "pavi-e")


class MemoryGuardError(Exception):
    """Full grounding exceeds the configured dimension cap."""


@dataclass
class FamilyConfig:
    """Architecture knobs shared by both encoding schemes."""

    flow: str = "affine"                  # "affine" or "maf" (affine block + MAF stack)
    hidden: tuple = (32, 32)              # MAF hidden sizes
    triangular: bool = False              # triangular scaling in the affine block
    encoding_dim: int | dict = 8          # int, or {plate level tuple: int}
    encoder_rho_hidden: tuple = (32, 32)
    encoder_g_hidden: tuple = (32,)
    init_seed: int = 0
    max_full_dim: int = 5_000_000         # guard for full-model sampling


@dataclass
class ReducedPosteriorSample:
    """One sample-and-density pass over a plate batch."""

    values: dict[str, Array]              # natural values, (mc * n_batch, dim) each
    logq_templates: dict[str, Array]      # scaled, MC-averaged per-template contributions
    logq: Array                           # total: sum of the above
    mc_samples: int


class VariationalFamily:
    """Per-template shared flows plus a free encoding store or an encoder."""

    def __init__(self, graph: TemplateGraph, scheme: str, cfg: FamilyConfig | None = None):
        if scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
        self.graph = graph
        self.scheme = scheme
        self.cfg = cfg or FamilyConfig()
        self.full_model = graph.ground("full")
        rng = np.random.default_rng(self.cfg.init_seed)

        self.level_of = {t.name: t.plates for t in graph.latents()}
        self.flows = {}
        for t in graph.latents():
            ctx_dim = self.encoding_dim(t.plates) + sum(
                graph.template(p).dim for p in t.parents
            )
            self.flows[t.name] = build_flow(
                f"flow/{t.name}", self.cfg.flow, t.dim, ctx_dim,
                hidden=self.cfg.hidden, triangular=self.cfg.triangular, rng=rng,
            )

        self.store: dict[tuple, Parameter] = {}
        self.encoder: EncoderStack | None = None
        if scheme == "pavi-f":
            # zero init: every ground RV starts with the same posterior
            for level in graph.plate_levels():
                rows = int(np.prod([graph.plate(p).full_card for p in level])) if level else 1
                self.store[level] = Parameter(
                    f"enc/{'x'.join(level) or 'root'}",
                    np.zeros((rows, self.encoding_dim(level))),
                    row_sparse=True,
                )
        else:
            self.encoder = EncoderStack(
                graph, self.cfg.encoding_dim,
                rho_hidden=self.cfg.encoder_rho_hidden,
                g_hidden=self.cfg.encoder_g_hidden,
                rng=rng,
            )

    # -- parameters ---------------------------------------------------------

    def encoding_dim(self, level: tuple[str, ...]) -> int:
        if isinstance(self.cfg.encoding_dim, dict):
            return int(self.cfg.encoding_dim[level])
        return int(self.cfg.encoding_dim)

    def flow_parameters(self) -> list[Parameter]:
        out = []
        for name in sorted(self.flows):
            out.extend(self.flows[name].parameters())
        return out

    def encoding_parameters(self) -> list[Parameter]:
        if self.scheme == "pavi-f":
            return [self.store[lvl] for lvl in sorted(self.store)]
        return self.encoder.parameters()

    def parameters(self) -> list[Parameter]:
        return self.flow_parameters() + self.encoding_parameters()

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def save_checkpoint(self, path) -> None:
        save_params(path, self.parameters())

    def load_checkpoint(self, path) -> None:
        load_params(path, self.parameters())

    # -- encodings ----------------------------------------------------------

    def full_batch(self) -> PlateBatch:
        return PlateBatch({p.name: np.arange(p.full_card) for p in self.graph.plates})

    def slice_encodings(self, batch: PlateBatch, tape=None) -> dict[str, Array]:
        """Per-template encoding rows gathered from the free store (pavi-f).

        Gathering keeps the rows differentiable: gradients scatter-add back
        into the store arrays, leaving unselected rows at exactly zero.
        """
        if self.scheme != "pavi-f":
            raise ContractError("slice_encodings: free encodings exist only in scheme pavi-f")
        out: dict[str, Array] = {}
        for t in self.graph.latents():
            level = t.plates
            rows = self.full_model.batch_rows(t.name, batch)
            base = tape.watch(self.store[level]) if tape is not None else dc.constant(self.store[level].value)
            out[t.name] = dc.gather_rows(base, rows)
        return out

    def encodings_from_data(self, x_slice, cards: dict[str, int], tape=None) -> dict[str, Array]:
        """Per-template encodings computed from a data slice (pavi-e)."""
        if self.scheme != "pavi-e":
            raise ContractError("encodings_from_data: scheme pavi-e required")
        levels = self.encoder.encode(x_slice, cards, tape)
        return {t.name: levels[t.plates] for t in self.graph.latents()}

    def encodings_for_batch(self, batch: PlateBatch, x_full: dict[str, np.ndarray], tape=None):
        """Scheme dispatch used by the trainer: slice the store or encode the data slice."""
        if self.scheme == "pavi-f":
            return self.slice_encodings(batch, tape)
        obs = self.graph.observed()[0]
        rows = self.full_model.batch_rows(obs.name, batch)
        cards = {p: batch.size(p) for p in obs.plates}
        return self.encodings_from_data(x_full[obs.name][rows], cards, tape)

    def touched_store_rows(self, batch: PlateBatch) -> dict[str, np.ndarray]:
        """Store rows selected by a batch, keyed by parameter id (pavi-f only)."""
        if self.scheme != "pavi-f":
            return {}
        out = {}
        for level, param in self.store.items():
            cards = tuple(self.graph.plate(p).full_card for p in level)
            sets = [np.asarray(batch.indices[p], dtype=np.int64) for p in level]
            rows = np.zeros(1, dtype=np.int64)
            for card, idx in zip(cards, sets):
                rows = (rows[:, None] * card + idx[None, :]).reshape(-1)
            out[param.id] = rows
        return out

    # -- sampling -----------------------------------------------------------

    def sample_and_logq_reduced(self, batch: PlateBatch, encodings: dict[str, Array],
                                noise: dict[str, np.ndarray], tape=None) -> ReducedPosteriorSample:
        """Cascading sample over a plate batch with the scaled reduced density.

        ``encodings[name]`` holds one row per batch position of that template
        (n_batch, enc_dim); ``noise[name]`` is (mc, n_batch, dim) standard
        normal.  Per-template log q sums are scaled by N_i / n_batch_i and
        averaged over the mc axis.
        """
        values: dict[str, Array] = {}
        logq_templates: dict[str, Array] = {}
        total: Array | None = None
        mc = None
        for t in self.graph.latents():
            n_batch = self.full_model.reduced_count(t.name, batch)
            eps = np.asarray(noise[t.name], dtype=np.float64)
            if eps.ndim == 2:
                eps = eps[None]
            if eps.shape[1] != n_batch or eps.shape[2] != t.dim:
                raise ContractError(
                    f"noise for {t.name!r} has shape {eps.shape}, expected (mc, {n_batch}, {t.dim})"
                )
            if mc is None:
                mc = eps.shape[0]
            elif eps.shape[0] != mc:
                raise ContractError("noise mc axes differ between templates")
            if t.name not in encodings:
                raise ContractError(f"missing encoding rows for template {t.name!r}")
            enc = encodings[t.name]
            if enc.data.shape[0] != n_batch:
                raise ContractError(
                    f"encoding rows for {t.name!r}: got {enc.data.shape[0]}, expected {n_batch}"
                )

            tile = np.tile(np.arange(n_batch), mc)
            enc_rows = dc.gather_rows(enc, tile)

            parent_vals = []
            for pname in t.parents:
                per_sample = self.full_model._batch_parent_rows(t.name, pname, batch)
                n_parent = self.full_model.reduced_count(pname, batch)
                rows = np.concatenate([per_sample + m * n_parent for m in range(mc)])
                parent_vals.append((pname, rows))

            def resolve(ref):
                if isinstance(ref, str):
                    rows = dict(parent_vals)[ref]
                    return dc.gather_rows(values[ref], rows)
                return dc.constant(float(ref))

            loc, scale = resolve(t.loc), resolve(t.scale)
            base = Normal(loc, scale)  # underlying space for both kinds
            u = base.rsample(eps.reshape(mc * n_batch, t.dim))

            ctx = FlowContext(enc_rows, [dc.gather_rows(values[p], r) for p, r in parent_vals]).build()
            z, logdet = self.flows[t.name].forward(u, ctx, tape)

            dist = make_distribution(t.kind, loc, scale)
            value = dist.to_value(z)
            logq_rows = dc.sub(base.log_prob(u), logdet)
            jac = dist.value_log_jacobian(z)
            if jac is not None:
                logq_rows = dc.sub(logq_rows, jac)

            n_full = self.full_model.count(t.name)
            contrib = dc.mul(dc.array_sum(logq_rows), dc.constant(n_full / (n_batch * mc)))
            values[t.name] = value
            logq_templates[t.name] = contrib
            total = contrib if total is None else dc.add(total, contrib)

        return ReducedPosteriorSample(values, logq_templates, total, mc)

    def sample_and_logq_full(self, encodings: dict[str, Array],
                             noise: dict[str, np.ndarray], tape=None) -> ReducedPosteriorSample:
        """Posterior sample over every ground RV with its exact log q.

        Refuses when the total ground dimension exceeds the configured cap.
        """
        total_dim = self.full_model.total_ground_dim()
        if total_dim > self.cfg.max_full_dim:
            raise MemoryGuardError(
                f"full grounding has dimension {total_dim}, above the cap {self.cfg.max_full_dim}"
            )
        return self.sample_and_logq_reduced(self.full_batch(), encodings, noise, tape)

    def full_encodings(self, x_full: dict[str, np.ndarray] | None = None, tape=None):
        """Encodings for the full grounding: whole store, or encoder on the full data."""
        if self.scheme == "pavi-f":
            return self.slice_encodings(self.full_batch(), tape)
        if x_full is None:
            raise ContractError("full_encodings: scheme pavi-e needs the observed data")
        obs = self.graph.observed()[0]
        cards = {p: self.graph.plate(p).full_card for p in obs.plates}
        return self.encodings_from_data(x_full[obs.name], cards, tape)

    def draw_noise(self, batch: PlateBatch, rng: np.random.Generator, mc: int) -> dict[str, np.ndarray]:
        """Standard-normal noise for one pass, in latent topological order."""
        out = {}
        for t in self.graph.latents():
            out[t.name] = rng.standard_normal((mc, self.full_model.reduced_count(t.name, batch), t.dim))
        return out


def build_family(graph: TemplateGraph, scheme: str, cfg: FamilyConfig | None = None) -> VariationalFamily:
    """Assemble flows plus encoding source for a validated template graph."""
    return VariationalFamily(graph, scheme, cfg)
