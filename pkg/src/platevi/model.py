"""Plate-enriched model templates, grounding, and exact log-joint evaluation.

A TemplateGraph is the compact description of a hierarchical Bayesian model:
plates with full/reduced cardinalities, and RV templates whose distribution
parameters may reference parent templates.  Grounding instantiates the
template at either the full or the reduced cardinalities; ground values for
a template are stored as flat (N_i, dim) arrays whose rows enumerate the
template's plate index tuples in row-major order (plates in declaration
order).

Only nested plates are supported: every parent's plate set must be a subset
of its child's plate set.  That covers all in-scope models; anything else is
rejected at validation time.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Array
from .distributions import KINDS, make_distribution

__all__ = [
    "PlateDecl",
    "TemplateDecl",
    "TemplateGraph",
    "GroundModel",
    "PlateBatch",
    "ValidationError",
    "gre_model",
    "hv_model",
]


class ValidationError(Exception):
    """A template graph violates a structural invariant."""


@dataclass(frozen=True)
class PlateDecl:
    name: str
    full_card: int
    reduced_card: int

    def __post_init__(self):
        if self.full_card < 1:
            raise ValidationError(f"plate {self.name!r}: cardinality must be >= 1")
        if not (1 <= self.reduced_card <= self.full_card):
            raise ValidationError(
                f"plate {self.name!r}: reduced cardinality {self.reduced_card} "
                f"not in [1, {self.full_card}]"
            )


@dataclass(frozen=True)
class TemplateDecl:
    """One RV template; loc/scale are floats or names of parent templates."""

    name: str
    plates: tuple[str, ...]
    kind: str
    loc: float | str
    scale: float | str
    dim: int = 1
    observed: bool = False

    @property
    def parents(self) -> tuple[str, ...]:
        out = []
        for ref in (self.loc, self.scale):
            if isinstance(ref, str):
                out.append(ref)
        return tuple(out)


class TemplateGraph:
    """Validated plate-enriched DAG of RV templates."""

    def __init__(self, plates: list[PlateDecl], templates: list[TemplateDecl]):
        self.plates = list(plates)
        self.templates = list(templates)
        self._plate_by_name = {p.name: p for p in self.plates}
        self._template_by_name = {t.name: t for t in self.templates}
        self._validate()
        self._topo = self._topological_order()

    # -- structure ---------------------------------------------------------

    def _validate(self) -> None:
        if len(self._plate_by_name) != len(self.plates):
            raise ValidationError("duplicate plate names")
        if len(self._template_by_name) != len(self.templates):
            raise ValidationError("duplicate template names")
        plate_order = {p.name: i for i, p in enumerate(self.plates)}
        for t in self.templates:
            if t.kind not in KINDS:
                raise ValidationError(f"template {t.name!r}: unknown distribution kind {t.kind!r}")
            if t.dim < 1:
                raise ValidationError(f"template {t.name!r}: dim must be >= 1")
            for p in t.plates:
                if p not in self._plate_by_name:
                    raise ValidationError(f"template {t.name!r}: unknown plate {p!r}")
            if tuple(sorted(t.plates, key=plate_order.__getitem__)) != t.plates:
                raise ValidationError(
                    f"template {t.name!r}: plates must follow declaration order"
                )
            if isinstance(t.scale, float) and t.scale <= 0.0:
                raise ValidationError(f"template {t.name!r}: constant scale must be positive")
            for ref in t.parents:
                parent = self._template_by_name.get(ref)
                if parent is None:
                    raise ValidationError(f"template {t.name!r}: unknown parent {ref!r}")
                if parent.observed:
                    raise ValidationError(
                        f"template {t.name!r}: observed template {ref!r} cannot be a parent"
                    )
                if parent.dim != t.dim:
                    raise ValidationError(
                        f"template {t.name!r}: dim {t.dim} differs from parent {ref!r} dim {parent.dim}"
                    )
                if not set(parent.plates) <= set(t.plates):
                    raise ValidationError(
                        f"non-nested plates on edge {ref!r} -> {t.name!r}: "
                        f"{parent.plates} is not a subset of {t.plates}"
                    )
        self._topological_order()  # raises on cycles

    def _topological_order(self) -> list[TemplateDecl]:
        order: list[TemplateDecl] = []
        state: dict[str, int] = {}

        def visit(name: str):
            if state.get(name) == 2:
                return
            if state.get(name) == 1:
                raise ValidationError(f"cyclic parent references involving {name!r}")
            state[name] = 1
            for ref in self._template_by_name[name].parents:
                visit(ref)
            state[name] = 2
            order.append(self._template_by_name[name])

        for t in self.templates:
            visit(t.name)
        return order

    def topological(self) -> list[TemplateDecl]:
        return list(self._topo)

    def template(self, name: str) -> TemplateDecl:
        return self._template_by_name[name]

    def plate(self, name: str) -> PlateDecl:
        return self._plate_by_name[name]

    def latents(self) -> list[TemplateDecl]:
        return [t for t in self._topo if not t.observed]

    def observed(self) -> list[TemplateDecl]:
        return [t for t in self._topo if t.observed]

    def plate_levels(self) -> list[tuple[str, ...]]:
        """Distinct plate sets of latent templates, outermost first."""
        seen: list[tuple[str, ...]] = []
        for t in self.latents():
            if t.plates not in seen:
                seen.append(t.plates)
        return sorted(seen, key=len)

    def ground(self, which: str = "full") -> "GroundModel":
        if which not in ("full", "reduced"):
            raise ValueError(f"which must be 'full' or 'reduced', got {which!r}")
        cards = {
            p.name: (p.full_card if which == "full" else p.reduced_card) for p in self.plates
        }
        return GroundModel(self, cards)

    def __eq__(self, other):
        return (
            isinstance(other, TemplateGraph)
            and self.plates == other.plates
            and self.templates == other.templates
        )


@dataclass(frozen=True)
class PlateBatch:
    """Per-plate index subsets drawn for one stochastic step."""

    indices: dict[str, np.ndarray]

    def __post_init__(self):
        for name, idx in self.indices.items():
            arr = np.asarray(idx, dtype=np.int64)
            if len(np.unique(arr)) != arr.size:
                raise ValueError(f"plate {name!r}: batch indices must be unique")
            object.__setattr__(self, "indices", {**self.indices, name: arr})

    def size(self, plate: str) -> int:
        return int(self.indices[plate].size)


def _row_index(multi: tuple[int, ...], cards: tuple[int, ...]) -> int:
    row = 0
    for i, c in zip(multi, cards):
        row = row * c + i
    return row


class GroundModel:
    """A TemplateGraph instantiated at concrete plate cardinalities."""

    def __init__(self, graph: TemplateGraph, cards: dict[str, int]):
        self.graph = graph
        self.cards = dict(cards)

    def count(self, name: str) -> int:
        t = self.graph.template(name)
        n = 1
        for p in t.plates:
            n *= self.cards[p]
        return n

    def counts(self) -> dict[str, int]:
        return {t.name: self.count(t.name) for t in self.graph.templates}

    def total_ground_dim(self) -> int:
        return sum(self.count(t.name) * t.dim for t in self.graph.templates)

    def parent_row_map(self, child: str, parent: str) -> np.ndarray:
        """For each child ground row, the row of its parent's value array."""
        ct = self.graph.template(child)
        pt = self.graph.template(parent)
        child_cards = tuple(self.cards[p] for p in ct.plates)
        parent_cards = tuple(self.cards[p] for p in pt.plates)
        keep = [ct.plates.index(p) for p in pt.plates]
        rows = np.empty(int(np.prod(child_cards)) if child_cards else 1, dtype=np.int64)
        for i, multi in enumerate(itertools.product(*[range(c) for c in child_cards])):
            rows[i] = _row_index(tuple(multi[k] for k in keep), parent_cards)
        return rows

    def batch_rows(self, name: str, batch: PlateBatch) -> np.ndarray:
        """Full-model rows selected for a template by a plate batch (row-major)."""
        t = self.graph.template(name)
        cards = tuple(self.cards[p] for p in t.plates)
        sets = [np.asarray(batch.indices[p], dtype=np.int64) for p in t.plates]
        rows = np.empty(int(np.prod([s.size for s in sets])) if sets else 1, dtype=np.int64)
        for i, multi in enumerate(itertools.product(*sets)):
            rows[i] = _row_index(multi, cards)
        return rows

    def reduced_count(self, name: str, batch: PlateBatch) -> int:
        t = self.graph.template(name)
        n = 1
        for p in t.plates:
            n *= batch.size(p)
        return n

    # -- densities ---------------------------------------------------------

    def _resolve_param(self, ref, values: dict[str, Array], rows_of_parent) -> Array:
        """Dist parameter: constant broadcast or parent values gathered to child rows."""
        if isinstance(ref, str):
            return dc.gather_rows(values[ref], rows_of_parent(ref))
        return dc.constant(float(ref))

    def _template_log_prob(
        self,
        t: TemplateDecl,
        value: Array,
        values: dict[str, Array],
        rows_of_parent,
    ) -> Array:
        loc = self._resolve_param(t.loc, values, rows_of_parent)
        scale = self._resolve_param(t.scale, values, rows_of_parent)
        dist = make_distribution(t.kind, loc, scale)
        return dc.array_sum(dist.log_prob(value))

    def log_joint(self, theta: dict, x: dict) -> Array:
        """Exact full log-joint; theta/x map template name to (N_i, dim) values."""
        values: dict[str, Array] = {}
        for t in self.graph.topological():
            src = x if t.observed else theta
            if t.name not in src:
                raise dc.ContractError(f"log_joint: missing assignment for template {t.name!r}")
            v = src[t.name]
            values[t.name] = v if isinstance(v, Array) else dc.constant(v)
        total = dc.constant(0.0)
        for t in self.graph.topological():
            lp = self._template_log_prob(
                t, values[t.name], values, lambda parent, t=t: self.parent_row_map(t.name, parent)
            )
            total = dc.add(total, lp)
        return total

    def reduced_log_joint(self, batch: PlateBatch, theta: dict, x: dict, mc_samples: int = 1) -> Array:
        """Scaled log-joint over a plate batch.

        Each template's contribution is multiplied by N_i / N-reduced_i.  Value
        arrays hold the batch rows only; with mc_samples > 1 they carry
        mc_samples copies stacked along the first axis (sample-major) and the
        result is the Monte Carlo mean of the per-sample scaled log-joints.
        """
        values: dict[str, Array] = {}
        for t in self.graph.topological():
            src = x if t.observed else theta
            if t.name not in src:
                raise dc.ContractError(f"reduced_log_joint: missing assignment for {t.name!r}")
            v = src[t.name]
            v = v if isinstance(v, Array) else dc.constant(v)
            expected = self.reduced_count(t.name, batch) * mc_samples
            if v.data.shape[0] != expected:
                raise dc.ContractError(
                    f"reduced_log_joint: template {t.name!r} has {v.data.shape[0]} rows, "
                    f"batch implies {expected}"
                )
            values[t.name] = v
        total = dc.constant(0.0)
        for t in self.graph.topological():
            n_full = self.count(t.name)
            n_redu = self.reduced_count(t.name, batch)

            def rows_of_parent(parent, t=t, n_redu=n_redu):
                per_sample = self._batch_parent_rows(t.name, parent, batch)
                n_parent = self.reduced_count(parent, batch)
                return np.concatenate(
                    [per_sample + m * n_parent for m in range(mc_samples)]
                )

            lp = self._template_log_prob(t, values[t.name], values, rows_of_parent)
            total = dc.add(total, dc.mul(lp, dc.constant(n_full / (n_redu * mc_samples))))
        return total

    def _batch_parent_rows(self, child: str, parent: str, batch: PlateBatch) -> np.ndarray:
        """Parent batch-row for each child batch-row (both batch-local)."""
        ct = self.graph.template(child)
        pt = self.graph.template(parent)
        sizes = [batch.size(p) for p in ct.plates]
        parent_sizes = tuple(batch.size(p) for p in pt.plates)
        keep = [ct.plates.index(p) for p in pt.plates]
        rows = np.empty(int(np.prod(sizes)) if sizes else 1, dtype=np.int64)
        for i, multi in enumerate(itertools.product(*[range(s) for s in sizes])):
            rows[i] = _row_index(tuple(multi[k] for k in keep), parent_sizes)
        return rows

    # -- generation --------------------------------------------------------

    def sample_prior(self, rng: np.random.Generator):
        """Ancestral sampling in topological order; returns (theta, x) dicts."""
        theta: dict[str, np.ndarray] = {}
        x: dict[str, np.ndarray] = {}
        values: dict[str, np.ndarray] = {}
        for t in self.graph.topological():
            n = self.count(t.name)
            noise = rng.standard_normal((n, t.dim))
            loc = self._numeric_param(t.loc, values, t)
            scale = self._numeric_param(t.scale, values, t)
            dist = make_distribution(t.kind, dc.constant(loc), dc.constant(scale))
            draw = dist.rsample(noise).data
            values[t.name] = draw
            (x if t.observed else theta)[t.name] = draw
        return theta, x

    def _numeric_param(self, ref, values: dict[str, np.ndarray], t: TemplateDecl):
        if isinstance(ref, str):
            return values[ref][self.parent_row_map(t.name, ref)]
        return float(ref)


# -- model zoo ---------------------------------------------------------------


def gre_model(
    n_groups: int = 20,
    n_per_group: int = 10,
    reduced_groups: int | None = None,
    reduced_per_group: int | None = None,
    dim: int = 1,
    sigma_x: float = 1.0,
    sigma_1: float = 1.0,
    sigma_2: float = 1.0,
) -> TemplateGraph:
    """Three-level Gaussian random effects model.

    population mean -> group means (group plate) -> observations
    (group x obs plates).  Scales default to 1.0.
    """
    return TemplateGraph(
        plates=[
            PlateDecl("group", n_groups, reduced_groups or n_groups),
            PlateDecl("obs", n_per_group, reduced_per_group or n_per_group),
        ],
        templates=[
            TemplateDecl("pop_mean", (), "normal", 0.0, float(sigma_2), dim),
            TemplateDecl("group_mean", ("group",), "normal", "pop_mean", float(sigma_1), dim),
            TemplateDecl("x", ("group", "obs"), "normal", "group_mean", float(sigma_x), dim, observed=True),
        ],
    )


def hv_model(
    n_groups: int = 15,
    n_per_group: int = 15,
    reduced_groups: int | None = None,
    reduced_per_group: int | None = None,
    dim: int = 2,
) -> TemplateGraph:
    """Hierarchical variance model: parents act as scales of their children.

    log x ~ N(0, group_scale), log group_scale ~ N(0, pop_scale),
    log pop_scale ~ N(0, 1); all three are LogNormal chains.
    """
    return TemplateGraph(
        plates=[
            PlateDecl("group", n_groups, reduced_groups or n_groups),
            PlateDecl("obs", n_per_group, reduced_per_group or n_per_group),
        ],
        templates=[
            TemplateDecl("pop_scale", (), "lognormal", 0.0, 1.0, dim),
            TemplateDecl("group_scale", ("group",), "lognormal", 0.0, "pop_scale", dim),
            TemplateDecl("x", ("group", "obs"), "lognormal", 0.0, "group_scale", dim, observed=True),
        ],
    )


MODEL_ZOO = {"gre": gre_model, "hv": hv_model}
