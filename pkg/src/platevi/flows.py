"""Conditional invertible transforms with tractable log-determinants.

Two families are provided, both parameterized in the sampling direction
(base sample u -> posterior sample theta in a single pass):

* ConditionalAffineFlow: theta = shift(ctx) + S(ctx) u with S diagonal or
  lower-triangular with positive diagonal.
* MaskedAutoregressiveFlow: a stack of masked dense layers where output
  coordinate k depends on input coordinates before k (orderings alternate
  between layers) plus the context, which feeds every layer unmasked.

Both initialize to the identity map: the final layer of every conditioner is
zero, and scales are realized as softplus(raw)/softplus(0) so raw = 0 gives
scale exactly 1 and log-determinant exactly 0.  The variational family
therefore starts at the prior.

Density evaluation of external points (the inverse direction) is out of
scope; reverse-KL training only needs sampling plus the density of the
flow's own samples.

Checkpoint format: a flat named-parameter list.  Header is
``PAVIWTS1`` + uint32 little-endian JSON length + JSON
``[{"name": str, "shape": [int, ...]}, ...]``; the payload is each
parameter's C-order data as little-endian float64, concatenated in header
order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Array, ContractError, Parameter

# same expression softplus() evaluates at 0, so identity init is bitwise exact
_SOFTPLUS0 = float(np.log1p(np.exp(-0.0)))


def _watch(param: Parameter, tape) -> Array:
    return tape.watch(param) if tape is not None else dc.constant(param.value)


def _uniform_init(rng: np.random.Generator, fan_out: int, shape) -> np.ndarray:
    # fan-out scaling keeps the backward signal to the inputs (in particular
    # to wide encoding contexts) independent of the context width
    bound = 1.0 / np.sqrt(max(fan_out, 1))
    return rng.uniform(-bound, bound, size=shape)


@dataclass(frozen=True)
class FlowContext:
    """Conditioning input: encoding row(s) first, then sampled parent values.

    The fixed layout (encoding columns before parent columns) is part of the
    checkpoint compatibility contract.
    """

    encoding: Array | None
    parent_values: list[Array]

    def build(self) -> Array:
        parts = []
        if self.encoding is not None:
            parts.append(self.encoding)
        parts.extend(self.parent_values)
        if not parts:
            raise ContractError("FlowContext: need an encoding or at least one parent")
        if len(parts) == 1:
            return parts[0]
        return dc.concat(parts, axis=1)


class Mlp:
    """Dense tanh network; the final layer is zero so the output starts at 0."""

    def __init__(self, name: str, in_dim: int, hidden: list[int], out_dim: int,
                 rng: np.random.Generator, zero_final: bool = True):
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weights: list[Parameter] = []
        self.biases: list[Parameter] = []
        dims = [in_dim] + list(hidden) + [out_dim]
        for k in range(len(dims) - 1):
            final = k == len(dims) - 2
            if final and zero_final:
                w = np.zeros((dims[k], dims[k + 1]))
                b = np.zeros(dims[k + 1])
            else:
                w = _uniform_init(rng, dims[k + 1], (dims[k], dims[k + 1]))
                b = _uniform_init(rng, dims[k + 1], (dims[k + 1],))
            self.weights.append(Parameter(f"{name}/w{k}", w))
            self.biases.append(Parameter(f"{name}/b{k}", b))

    def __call__(self, x: Array, tape=None) -> Array:
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = dc.add(dc.matmul(h, _watch(w, tape)), _watch(b, tape))
            if k != last:
                h = dc.tanh(h)
        return h

    def parameters(self) -> list[Parameter]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out


def _selector(width: int, cols) -> np.ndarray:
    sel = np.zeros((width, len(cols)))
    for j, c in enumerate(cols):
        sel[c, j] = 1.0
    return sel


def _positive_scale(raw: Array) -> Array:
    # softplus(0)/softplus(0) == 1.0 exactly, so zero raw means identity
    return dc.div(dc.softplus(raw), dc.constant(_SOFTPLUS0))


class ConditionalAffineFlow:
    """theta = shift(ctx) + S(ctx) u, S diagonal or lower-triangular."""

    def __init__(self, name: str, dim: int, ctx_dim: int, hidden=(32,),
                 triangular: bool = False, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.dim = dim
        self.ctx_dim = ctx_dim
        self.triangular = triangular
        n_off = dim * (dim - 1) // 2 if triangular else 0
        self.conditioner = Mlp(f"{name}/cond", ctx_dim, list(hidden), 2 * dim + n_off, rng)
        width = 2 * dim + n_off
        self._sel_shift = _selector(width, range(dim))
        self._sel_raw = _selector(width, range(dim, 2 * dim))
        self._off_pairs = [(i, j) for i in range(dim) for j in range(i)] if triangular else []
        self._sel_off = [
            _selector(width, [2 * dim + k]) for k in range(len(self._off_pairs))
        ]
        self._sel_u = [_selector(dim, [j]) for j in range(dim)]
        self._onehot_row = [np.eye(dim)[i : i + 1] for i in range(dim)]

    def forward(self, u: Array, ctx: Array, tape=None):
        if ctx.data.shape[-1] != self.ctx_dim:
            raise ContractError(
                f"{self.name}: context width {ctx.data.shape[-1]} != declared {self.ctx_dim}"
            )
        out = self.conditioner(ctx, tape)
        shift = dc.matmul(out, dc.constant(self._sel_shift))
        raw = dc.matmul(out, dc.constant(self._sel_raw))
        scale = _positive_scale(raw)
        theta = dc.add(shift, dc.mul(scale, u))
        if self.triangular:
            for k, (i, j) in enumerate(self._off_pairs):
                lij = dc.matmul(out, dc.constant(self._sel_off[k]))
                uj = dc.matmul(u, dc.constant(self._sel_u[j]))
                theta = dc.add(theta, dc.matmul(dc.mul(lij, uj), dc.constant(self._onehot_row[i])))
        logdet = dc.array_sum(dc.log(scale), axis=-1)
        return theta, logdet

    def parameters(self) -> list[Parameter]:
        return self.conditioner.parameters()


def _made_degrees(dim: int, hidden: list[int], reverse: bool) -> tuple[np.ndarray, list[np.ndarray]]:
    order = np.arange(dim)[::-1] if reverse else np.arange(dim)
    deg_in = np.empty(dim, dtype=np.int64)
    for pos, coord in enumerate(order):
        deg_in[coord] = pos + 1
    # dim 1 leaves no valid hidden degree: outputs then depend on ctx only
    hidden_degs = [
        np.zeros(h, dtype=np.int64) if dim == 1 else 1 + (np.arange(h) % (dim - 1))
        for h in hidden
    ]
    return deg_in, hidden_degs


class MaskedAutoregressiveFlow:
    """Stack of masked autoregressive layers, context fed to every layer.

    Each layer maps v -> v * s(v_<k, ctx) + m(v_<k, ctx); orderings reverse
    between consecutive layers.
    """

    def __init__(self, name: str, dim: int, ctx_dim: int, hidden=(32, 32),
                 n_layers: int = 2, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.dim = dim
        self.ctx_dim = ctx_dim
        self.hidden = list(hidden)
        self.layers = []
        for layer in range(n_layers):
            self.layers.append(
                _MadeLayer(f"{name}/made{layer}", dim, ctx_dim, self.hidden, reverse=layer % 2 == 1, rng=rng)
            )

    def forward(self, u: Array, ctx: Array, tape=None):
        if ctx.data.shape[-1] != self.ctx_dim:
            raise ContractError(
                f"{self.name}: context width {ctx.data.shape[-1]} != declared {self.ctx_dim}"
            )
        v = u
        logdet = None
        for layer in self.layers:
            v, ld = layer.forward(v, ctx, tape)
            logdet = ld if logdet is None else dc.add(logdet, ld)
        return v, logdet

    def parameters(self) -> list[Parameter]:
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out


class _MadeLayer:
    def __init__(self, name, dim, ctx_dim, hidden, reverse, rng):
        self.name = name
        self.dim = dim
        self.ctx_dim = ctx_dim
        deg_in, hidden_degs = _made_degrees(dim, hidden, reverse)
        # context inputs carry degree 0: visible to every hidden unit
        in_degs = np.concatenate([deg_in, np.zeros(ctx_dim, dtype=np.int64)])
        self.weights: list[Parameter] = []
        self.biases: list[Parameter] = []
        self.masks: list[np.ndarray] = []
        prev_deg = in_degs
        prev_width = dim + ctx_dim
        for k, (h, hdeg) in enumerate(zip(hidden, hidden_degs)):
            mask = (hdeg[None, :] >= prev_deg[:, None]).astype(np.float64)
            self.masks.append(mask)
            self.weights.append(Parameter(f"{name}/w{k}", _uniform_init(rng, h, (prev_width, h))))
            self.biases.append(Parameter(f"{name}/b{k}", _uniform_init(rng, h, (h,))))
            prev_deg, prev_width = hdeg, h
        # outputs: (m_k, raw_s_k) both carry coordinate k's degree; strict mask
        out_deg = np.concatenate([deg_in, deg_in])
        mask = (out_deg[None, :] > prev_deg[:, None]).astype(np.float64)
        self.masks.append(mask)
        self.weights.append(Parameter(f"{name}/wout", np.zeros((prev_width, 2 * dim))))
        self.biases.append(Parameter(f"{name}/bout", np.zeros(2 * dim)))
        self._sel_m = _selector(2 * dim, range(dim))
        self._sel_raw = _selector(2 * dim, range(dim, 2 * dim))

    def forward(self, v: Array, ctx: Array, tape=None):
        h = dc.concat([v, ctx], axis=1) if self.ctx_dim else v
        last = len(self.weights) - 1
        for k, (w, b, mask) in enumerate(zip(self.weights, self.biases, self.masks)):
            wm = dc.mul(_watch(w, tape), dc.constant(mask))
            h = dc.add(dc.matmul(h, wm), _watch(b, tape))
            if k != last:
                h = dc.tanh(h)
        m = dc.matmul(h, dc.constant(self._sel_m))
        raw = dc.matmul(h, dc.constant(self._sel_raw))
        s = _positive_scale(raw)
        out = dc.add(dc.mul(v, s), m)
        logdet = dc.array_sum(dc.log(s), axis=-1)
        return out, logdet

    def parameters(self) -> list[Parameter]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out


class ChainFlow:
    """Composition of flows applied in order; log-determinants add."""

    def __init__(self, flows):
        if not flows:
            raise ContractError("ChainFlow: needs at least one flow")
        self.flows = list(flows)
        self.dim = flows[0].dim
        self.ctx_dim = flows[0].ctx_dim
        for f in flows:
            if f.dim != self.dim or f.ctx_dim != self.ctx_dim:
                raise ContractError("ChainFlow: component dims/ctx widths differ")

    def forward(self, u: Array, ctx: Array, tape=None):
        v = u
        logdet = None
        for f in self.flows:
            v, ld = f.forward(v, ctx, tape)
            logdet = ld if logdet is None else dc.add(logdet, ld)
        return v, logdet

    def parameters(self) -> list[Parameter]:
        out = []
        for f in self.flows:
            out.extend(f.parameters())
        return out


def build_flow(name: str, kind: str, dim: int, ctx_dim: int, hidden=(32, 32),
               triangular: bool = False, rng: np.random.Generator | None = None):
    """Flow factory.

    kind "affine" is a single conditional affine block; kind "maf" is an
    affine block followed by a masked autoregressive stack (the experiment
    configuration used throughout).
    """
    if kind == "affine":
        return ConditionalAffineFlow(name, dim, ctx_dim, hidden=(32,), triangular=triangular, rng=rng)
    if kind == "maf":
        return ChainFlow([
            ConditionalAffineFlow(f"{name}/affine", dim, ctx_dim, hidden=(32,), triangular=triangular, rng=rng),
            MaskedAutoregressiveFlow(f"{name}/maf", dim, ctx_dim, hidden=hidden, rng=rng),
        ])
    raise ValueError(f"unknown flow kind {kind!r}; expected 'affine' or 'maf'")


def logq_of_sample(flow, u: Array, ctx: Array, base, tape=None):
    """log q of the sample produced from base draw u: base.log_prob(u) - logdet."""
    _, logdet = flow.forward(u, ctx, tape)
    return dc.sub(base.log_prob(u), logdet)


# -- checkpoint io -------------------------------------------------------------

_MAGIC = b"PAVIWTS1"


def save_params(path, params: list[Parameter]) -> None:
    header = [{"name": p.id, "shape": list(p.value.shape)} for p in params]
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in params:
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def load_params(path, params: list[Parameter]) -> None:
    """Load values into params; names and shapes must match the file exactly."""
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if len(header) != len(params):
            raise ValueError(f"{path}: checkpoint has {len(header)} params, expected {len(params)}")
        for entry, p in zip(header, params):
            if entry["name"] != p.id or tuple(entry["shape"]) != p.value.shape:
                raise ValueError(
                    f"{path}: mismatch at {entry['name']} {entry['shape']} vs {p.id} {p.value.shape}"
                )
            n = int(np.prod(entry["shape"])) if entry["shape"] else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(p.value.shape)
            p.value = data.astype(np.float64).copy()
