"""Stochastic training loop over reduced-model plate batches.

Each step samples per-plate index subsets without replacement, assembles the
scaled reduced ELBO from mc_samples reparameterized draws, backpropagates
once, and applies Adam to exactly the parameters that took part: shared flow
weights every step, free encoding rows only when their plate indices were
drawn, per-ground-RV baseline flows only when visited.

The root seed splits into independent streams for plate sampling, base
noise, data generation and evaluation, so changing mc_samples leaves the
batch sequence untouched.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Array, ContractError, Parameter
from .distributions import Normal, make_distribution
from .family import ReducedPosteriorSample, VariationalFamily
from .flows import build_flow
from .model import GroundModel, PlateBatch, TemplateGraph


class ConfigError(Exception):
    """Inconsistent training configuration."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mc_samples: int = 8
    max_steps: int = 2000
    plateau_window: int = 500
    plateau_tol: float = 1e-3
    seed: int = 0
    sample_amortized: bool = False
    eval_every: int = 0          # 0 disables periodic full-ELBO evaluation
    eval_mc: int = 32
    final_eval_mc: int = 64      # 0 skips the final full-ELBO evaluation
    lr_decay_rate: float | None = None
    lr_decay_every: int = 1000
    grad_clip: float | None = None   # global L2-norm cap; heavy-tailed models need it
    reject_patience: int = 10    # consecutive non-finite steps before halting
    virtual_clock: bool = False  # deterministic wall column (one tick per step)

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")
        if self.plateau_window < 2:
            raise ConfigError("plateau_window must be >= 2")

    def lr_at(self, step: int) -> float:
        if self.lr_decay_rate is None:
            return self.learning_rate
        return self.learning_rate * self.lr_decay_rate ** (step // self.lr_decay_every)


@dataclass
class Trace:
    """Per-step training records plus periodic full-ELBO evaluations."""

    parameter_count: int = 0
    steps: list[int] = field(default_factory=list)
    wall_seconds: list[float] = field(default_factory=list)
    elbo_mc: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    elbo_full: dict[int, float] = field(default_factory=dict)
    status: str = "completed"
    final_elbo: float | None = None

    def append(self, step: int, wall: float, elbo: float, gnorm: float) -> None:
        if self.steps and step <= self.steps[-1]:
            raise ContractError("trace steps must be strictly increasing")
        if self.wall_seconds and wall < self.wall_seconds[-1]:
            raise ContractError("wall time must be non-decreasing")
        self.steps.append(step)
        self.wall_seconds.append(wall)
        self.elbo_mc.append(elbo)
        self.grad_norm.append(gnorm)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("step,wall_seconds,elbo_mc,elbo_full,grad_norm\n")
            for i, step in enumerate(self.steps):
                full = self.elbo_full.get(step)
                fh.write(
                    f"{step},{self.wall_seconds[i]:.17g},{self.elbo_mc[i]:.17g},"
                    f"{'' if full is None else format(full, '.17g')},{self.grad_norm[i]:.17g}\n"
                )

    def summary(self) -> dict:
        return {
            "final_elbo": self.final_elbo if self.final_elbo is not None
            else (self.elbo_mc[-1] if self.elbo_mc else None),
            "steps": len(self.steps),
            "wall_seconds": self.wall_seconds[-1] if self.wall_seconds else 0.0,
            "parameter_count": self.parameter_count,
            "status": self.status,
        }


class Adam:
    """Adam with lazy per-parameter state and per-row sparse updates.

    Dense parameters are updated only when they appear in the step's visited
    set (they took part in the forward graph).  Row-sparse parameters
    (encoding stores) additionally restrict the update to the rows named in
    touched_rows; untouched rows keep their moments and values bit-identical.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._state: dict[str, tuple] = {}

    def step(self, params: list[Parameter], grads: dict[str, np.ndarray], lr: float,
             touched_rows: dict[str, np.ndarray] | None = None) -> None:
        touched_rows = touched_rows or {}
        b1, b2 = self.beta1, self.beta2
        for p in params:
            g = grads.get(p.id)
            if g is None:
                continue
            if p.row_sparse:
                rows = touched_rows.get(p.id)
                if rows is None:
                    continue
                m, v, t = self._state.setdefault(
                    p.id,
                    (np.zeros_like(p.value), np.zeros_like(p.value),
                     np.zeros(p.value.shape[0], dtype=np.int64)),
                )
                t[rows] += 1
                gr = g[rows]
                m[rows] = b1 * m[rows] + (1 - b1) * gr
                v[rows] = b2 * v[rows] + (1 - b2) * gr * gr
                tc = t[rows][:, None]
                mhat = m[rows] / (1 - b1**tc)
                vhat = v[rows] / (1 - b2**tc)
                p.value[rows] -= lr * mhat / (np.sqrt(vhat) + self.eps)
            else:
                m, v, t = self._state.setdefault(
                    p.id, (np.zeros_like(p.value), np.zeros_like(p.value), 0)
                )
                t += 1
                self._state[p.id] = (m, v, t)
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                mhat = m / (1 - b1**t)
                vhat = v / (1 - b2**t)
                p.value = p.value - lr * mhat / (np.sqrt(vhat) + self.eps)


def sample_plate_batches(graph: TemplateGraph, rng: np.random.Generator) -> PlateBatch:
    """Independent uniform subsets without replacement, one per plate."""
    indices = {}
    for p in graph.plates:
        indices[p.name] = np.sort(rng.permutation(p.full_card)[: p.reduced_card])
    return PlateBatch(indices)


def _observed_rows(family, model: GroundModel, x_full: dict, batch: PlateBatch, mc: int) -> dict:
    out = {}
    for t in family.graph.observed():
        rows = model.batch_rows(t.name, batch)
        sliced = x_full[t.name][rows]
        out[t.name] = np.tile(sliced, (mc, 1))
    return out


def reduced_elbo_step(family, model: GroundModel, x_full: dict, batch: PlateBatch,
                      noise: dict, cfg: TrainConfig, tape: dc.Tape | None = None):
    """One Monte Carlo reduced-ELBO evaluation; returns (elbo Array, sample, tape)."""
    tape = tape if tape is not None else dc.Tape()
    encodings = family.encodings_for_batch(batch, x_full, tape)
    sample = family.sample_and_logq_reduced(batch, encodings, noise, tape)
    x_rows = _observed_rows(family, model, x_full, batch, sample.mc_samples)
    logp = model.reduced_log_joint(batch, sample.values, x_rows, mc_samples=sample.mc_samples)
    elbo = dc.sub(logp, sample.logq)
    return elbo, sample, tape


def full_elbo(family, model: GroundModel, x_full: dict, mc: int, rng: np.random.Generator) -> float:
    """Monte Carlo full-model ELBO (no gradients)."""
    batch = family.full_batch()
    noise = family.draw_noise(batch, rng, mc)
    encodings = family.full_encodings(x_full if family.scheme == "pavi-e" else None)
    sample = family.sample_and_logq_full(encodings, noise)
    x_rows = _observed_rows(family, model, x_full, batch, mc)
    logp = model.reduced_log_joint(batch, sample.values, x_rows, mc_samples=mc)
    return float(logp.data - sample.logq.data)


def full_elbo_stats(family, model: GroundModel, x_full: dict, n: int,
                    rng: np.random.Generator) -> tuple[float, float]:
    """Mean and standard error of single-draw full ELBOs over n draws."""
    draws = np.array([full_elbo(family, model, x_full, 1, rng) for _ in range(n)])
    return float(draws.mean()), float(draws.std(ddof=1) / math.sqrt(n))


def detect_plateau(values, window: int, tol: float) -> bool:
    """Moving-average improvement over the window dropped below tol of its level.

    Compares the means of the two halves of the trailing window; fires when
    the improvement is smaller than tol times the level's magnitude.
    """
    if window < 2 or len(values) < window:
        return False
    half = window // 2
    recent = np.asarray(values[-window:], dtype=np.float64)
    first = recent[:half].mean()
    second = recent[half:].mean()
    return second - first < tol * max(abs(second), 1e-12)


def train(family, model: GroundModel, data_or_generator, cfg: TrainConfig) -> Trace:
    """Run the stochastic loop until max_steps, plateau, or repeated failures.

    data_or_generator is either a dict of observed arrays or, for
    sample-amortized training, a callable rng -> dict drawing a fresh dataset
    every step (and once more for the final evaluation).
    """
    if model.graph is not family.graph:
        raise ConfigError("family and model were built from different template graphs")
    generator = data_or_generator if callable(data_or_generator) else None
    if cfg.sample_amortized:
        if family.scheme != "pavi-e":
            raise ConfigError("sample amortization requires the pavi-e scheme")
        if generator is None:
            raise ConfigError("sample-amortized training needs a data generator")
    if generator is not None and not cfg.sample_amortized:
        raise ConfigError("a data generator was given but sample_amortized is off")

    seq = np.random.SeedSequence(cfg.seed)
    batch_rng, noise_rng, data_rng, eval_rng = (np.random.default_rng(s) for s in seq.spawn(4))

    x_full = generator(data_rng) if generator is not None else data_or_generator
    eval_data = x_full

    adam = Adam(cfg.beta1, cfg.beta2, cfg.eps)
    trace = Trace(parameter_count=family.parameter_count())
    start = time.perf_counter()
    rejects = 0

    for step in range(cfg.max_steps):
        if generator is not None:
            x_full = generator(data_rng)
        batch = sample_plate_batches(family.graph, batch_rng)
        noise = family.draw_noise(batch, noise_rng, cfg.mc_samples)
        elbo, _, tape = reduced_elbo_step(family, model, x_full, batch, noise, cfg)
        elbo_val = float(elbo.data)
        wall = float(step) if cfg.virtual_clock else time.perf_counter() - start

        finite = math.isfinite(elbo_val)
        grads = None
        if finite:
            grads = tape.backward(dc.neg(elbo))
            if any(not np.all(np.isfinite(g)) for g in grads.values()):
                finite = False
        if not finite:
            rejects += 1
            trace.append(step, wall, elbo_val, float("nan"))
            if rejects >= cfg.reject_patience:
                trace.status = "halted-nonfinite"
                break
            continue
        rejects = 0

        gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if cfg.grad_clip is not None and gnorm > cfg.grad_clip:
            scale = cfg.grad_clip / gnorm
            grads = {pid: g * scale for pid, g in grads.items()}
        adam.step(tape.touched_params(), grads, cfg.lr_at(step),
                  touched_rows=family.touched_store_rows(batch))
        trace.append(step, wall, elbo_val, gnorm)

        if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            trace.elbo_full[step] = full_elbo(family, model, eval_data, cfg.eval_mc, eval_rng)

        if detect_plateau(trace.elbo_mc, cfg.plateau_window, cfg.plateau_tol):
            trace.status = "plateau"
            break
    else:
        trace.status = "max-steps"

    if cfg.final_eval_mc:
        trace.final_elbo = full_elbo(family, model, eval_data, cfg.final_eval_mc, eval_rng)
    return trace


# -- non-plate-amortized baseline ---------------------------------------------


class SviBaselineFamily:
    """Per-ground-RV fully parameterized flows: no weight sharing, no encodings.

    Identical flow architecture and cascading structure to the amortized
    family; the only difference is that every ground RV of a template owns a
    private copy of the flow, trained only on the steps that visit it.
    """

    scheme = "svi-baseline"

    def __init__(self, graph: TemplateGraph, cfg):
        self.graph = graph
        self.cfg = cfg
        self.full_model = graph.ground("full")
        rng = np.random.default_rng(cfg.init_seed)
        self.flows: dict[str, list] = {}
        for t in graph.latents():
            ctx_dim = sum(graph.template(p).dim for p in t.parents)
            n = self.full_model.count(t.name)
            self.flows[t.name] = [
                build_flow(f"flow/{t.name}/{i}", cfg.flow, t.dim, ctx_dim,
                           hidden=cfg.hidden, triangular=cfg.triangular, rng=rng)
                for i in range(n)
            ]

    def parameters(self) -> list[Parameter]:
        out = []
        for name in sorted(self.flows):
            for flow in self.flows[name]:
                out.extend(flow.parameters())
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def full_batch(self) -> PlateBatch:
        return PlateBatch({p.name: np.arange(p.full_card) for p in self.graph.plates})

    def draw_noise(self, batch: PlateBatch, rng: np.random.Generator, mc: int) -> dict:
        return {
            t.name: rng.standard_normal((mc, self.full_model.reduced_count(t.name, batch), t.dim))
            for t in self.graph.latents()
        }

    def encodings_for_batch(self, batch, x_full, tape=None):
        return None

    def full_encodings(self, x_full=None, tape=None):
        return None

    def touched_store_rows(self, batch) -> dict:
        return {}

    def sample_and_logq_reduced(self, batch: PlateBatch, encodings, noise,
                                tape=None) -> ReducedPosteriorSample:
        values: dict[str, Array] = {}
        logq_templates: dict[str, Array] = {}
        total = None
        mc = None
        for t in self.graph.latents():
            n_batch = self.full_model.reduced_count(t.name, batch)
            ground_rows = self.full_model.batch_rows(t.name, batch)
            eps = np.asarray(noise[t.name], dtype=np.float64)
            if eps.ndim == 2:
                eps = eps[None]
            mc = eps.shape[0] if mc is None else mc
            eps_flat = eps.reshape(mc * n_batch, t.dim)

            parent_rows = {}
            for pname in set(t.parents):
                per_sample = self.full_model._batch_parent_rows(t.name, pname, batch)
                n_parent = self.full_model.reduced_count(pname, batch)
                parent_rows[pname] = np.concatenate(
                    [per_sample + m * n_parent for m in range(mc)]
                )

            def resolve(ref):
                if isinstance(ref, str):
                    return dc.gather_rows(values[ref], parent_rows[ref])
                return dc.constant(float(ref))

            loc, scale = resolve(t.loc), resolve(t.scale)
            base = Normal(loc, scale)
            u = base.rsample(eps_flat)
            if t.parents:
                ctx = dc.concat([dc.gather_rows(values[p], parent_rows[p]) for p in t.parents], axis=1) \
                    if len(t.parents) > 1 else dc.gather_rows(values[t.parents[0]], parent_rows[t.parents[0]])
            else:
                ctx = dc.constant(np.zeros((mc * n_batch, 0)))

            # run each visited ground RV's private flow on its mc rows
            pieces_z, pieces_ld = [], []
            for j in range(n_batch):
                rows_j = np.arange(mc) * n_batch + j
                z_j, ld_j = self.flows[t.name][int(ground_rows[j])].forward(
                    dc.gather_rows(u, rows_j), dc.gather_rows(ctx, rows_j), tape
                )
                pieces_z.append(z_j)
                pieces_ld.append(ld_j)
            # reassemble sample-major row order from the per-RV blocks
            perm = np.argsort(np.concatenate([np.arange(mc) * n_batch + j for j in range(n_batch)]),
                              kind="stable")
            z = dc.gather_rows(dc.concat(pieces_z, axis=0), perm)
            logdet = dc.gather_rows(dc.concat(pieces_ld, axis=0), perm)

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

    def sample_and_logq_full(self, encodings, noise, tape=None) -> ReducedPosteriorSample:
        return self.sample_and_logq_reduced(self.full_batch(), encodings, noise, tape)


def build_svi_baseline(graph: TemplateGraph, cfg) -> SviBaselineFamily:
    return SviBaselineFamily(graph, cfg)
