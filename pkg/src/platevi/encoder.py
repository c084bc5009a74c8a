"""Permutation-invariant set encoders producing plate-level encodings.

The encoder turns (a slice of) observed data into one encoding array per
latent plate level by walking the plate-level dependency graph backwards:
each stage applies a per-element network to the rows of the deeper level,
mean-pools over the plates being contracted, and post-processes the pooled
summary.  Mean pooling keeps the two properties the training scheme relies
on: permutation invariance along pooled axes, and set-size generalization
(the same weights summarize sets of any length).

Observed values are fed to the first stage in their unconstrained
representation (log-values for lognormal observations), which keeps the
inputs well-scaled for heavy-tailed models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Array, ContractError, Parameter
from .flows import Mlp
from .model import TemplateGraph


class SetPoolEncoder:
    """rho (per element) -> mean over the pooled axis -> g (per set).

    With ``identity=True`` both networks are skipped, so the output is the
    plain per-set mean of the inputs; this harness mode is what the
    statistical tests check against.
    """

    def __init__(self, name: str, in_dim: int, out_dim: int,
                 rho_hidden=(32, 32), g_hidden=(32,), identity: bool = False,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.in_dim = in_dim
        self.out_dim = in_dim if identity else out_dim
        self.identity = identity
        if identity:
            self.rho = None
            self.g = None
        else:
            self.rho = Mlp(f"{name}/rho", in_dim, list(rho_hidden), out_dim, rng, zero_final=False)
            self.g = Mlp(f"{name}/g", out_dim, list(g_hidden), out_dim, rng, zero_final=False)

    def forward(self, x: Array, n_sets: int, set_size: int, tape=None) -> Array:
        """x has n_sets * set_size rows (set-major); returns n_sets rows."""
        if x.data.shape[0] != n_sets * set_size:
            raise ContractError(
                f"{self.name}: expected {n_sets * set_size} rows, got {x.data.shape[0]}"
            )
        if set_size < 1:
            raise ContractError(f"{self.name}: pooled set must have at least one element")
        h = self.rho(x, tape) if self.rho is not None else x
        pooled = dc.array_mean(dc.reshape(h, (n_sets, set_size, h.data.shape[-1])), axis=1)
        return self.g(pooled, tape) if self.g is not None else pooled

    def parameters(self) -> list[Parameter]:
        if self.identity:
            return []
        return self.rho.parameters() + self.g.parameters()


@dataclass
class _Stage:
    out_level: tuple[str, ...]
    in_level: tuple[str, ...]
    pooled: tuple[str, ...]
    net: SetPoolEncoder


class EncoderStack:
    """Backward pass over plate levels: observed data down to the root level."""

    def __init__(self, graph: TemplateGraph, enc_dim, rho_hidden=(32, 32),
                 g_hidden=(32,), identity: bool = False,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        observed = graph.observed()
        if len(observed) != 1:
            raise ContractError("EncoderStack: exactly one observed template is supported")
        self.graph = graph
        self.observed_template = observed[0]
        self._enc_dim = enc_dim

        level_of = {t.name: t.plates for t in graph.templates}
        # reversed dependency graph over plate levels: child level feeds parent level
        feeds: dict[tuple, set[tuple]] = {}
        for t in graph.templates:
            for parent in set(t.parents):
                feeds.setdefault(level_of[parent], set()).add(level_of[t.name])

        self.stages: list[_Stage] = []
        available = {self.observed_template.plates}
        pending = [lvl for lvl in graph.plate_levels()][::-1]  # deepest first
        in_dim_of = {self.observed_template.plates: self.observed_template.dim}
        for lvl in pending:
            sources = feeds.get(lvl, set())
            if len(sources) != 1:
                raise ContractError(
                    f"EncoderStack: plate level {lvl} needs exactly one source level, got {sorted(sources)}"
                )
            src = next(iter(sources))
            if src not in available:
                raise ContractError(f"EncoderStack: source level {src} for {lvl} not yet computed")
            if src[: len(lvl)] != lvl:
                raise ContractError(f"EncoderStack: level {lvl} is not a prefix of source {src}")
            pooled = tuple(p for p in src if p not in lvl)
            net = SetPoolEncoder(
                f"enc/{'x'.join(lvl) or 'root'}", in_dim_of[src], self.level_dim(lvl),
                rho_hidden, g_hidden, identity=identity, rng=rng,
            )
            self.stages.append(_Stage(lvl, src, pooled, net))
            available.add(lvl)
            in_dim_of[lvl] = net.out_dim

        self._out_dims = {s.out_level: s.net.out_dim for s in self.stages}

    def level_dim(self, level: tuple[str, ...]) -> int:
        if isinstance(self._enc_dim, dict):
            return int(self._enc_dim[level])
        return int(self._enc_dim)

    def output_dim(self, level: tuple[str, ...]) -> int:
        return self._out_dims[level]

    def encode(self, x_slice, cards: dict[str, int], tape=None) -> dict[tuple, Array]:
        """Plate-level encodings for a data slice with the given plate sizes.

        x_slice rows enumerate the observed template's plate tuples in
        row-major order; the result arrays do the same for each level.
        """
        obs = self.observed_template
        for p in obs.plates:
            if p not in cards:
                raise ContractError(f"encode: missing cardinality for plate axis {p!r}")
        x = x_slice if isinstance(x_slice, Array) else dc.constant(x_slice)
        expected = int(np.prod([cards[p] for p in obs.plates]))
        if x.data.shape[0] != expected:
            raise ContractError(f"encode: expected {expected} rows, got {x.data.shape[0]}")
        if obs.kind == "lognormal":
            x = dc.log(x)
        out: dict[tuple, Array] = {}
        current = {obs.plates: x}
        for stage in self.stages:
            src = current[stage.in_level]
            n_sets = int(np.prod([cards[p] for p in stage.out_level])) if stage.out_level else 1
            set_size = int(np.prod([cards[p] for p in stage.pooled])) if stage.pooled else 1
            enc = stage.net.forward(src, n_sets, set_size, tape)
            current[stage.out_level] = enc
            out[stage.out_level] = enc
        return out

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for stage in self.stages:
            params.extend(stage.net.parameters())
        return params


@dataclass
class SetSizeReport:
    sizes: tuple[int, int]
    distances: dict[tuple, float]


def set_size_generalization_check(stack: EncoderStack, small_set, small_cards,
                                  big_set, big_cards) -> SetSizeReport:
    """Distance between encodings of a small and a large slice of the same source."""
    enc_small = stack.encode(small_set, small_cards)
    enc_big = stack.encode(big_set, big_cards)
    distances = {}
    for lvl in enc_small:
        a, b = enc_small[lvl].data, enc_big[lvl].data
        if a.shape == b.shape:
            distances[lvl] = float(np.linalg.norm(a - b))
    n_small = int(np.prod(list(small_cards.values())))
    n_big = int(np.prod(list(big_cards.values())))
    return SetSizeReport((n_small, n_big), distances)
