"""Frozen-capable layers built on :mod:`affinekit.autodiff`.

Layers carry a ``layer_id`` so adapters can be attached by name. Wrapped
layers are evaluated through a :class:`Dispatch` object that decides whether
the plain layer, an Affiner, or a baseline adapter runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


def kaiming_normal(rng: np.random.Generator, shape: tuple[int, int], fan_in: int, dtype=None) -> np.ndarray:
    """He init: N(0, 2 / fan_in), i.e. fan-in mode with ReLU gain."""
    std = math.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype or ad.default_dtype())


def _param(arr, trainable: bool) -> Tensor:
    return Tensor(arr, requires_grad=trainable)


@dataclass(eq=False)
class LinearLayer:
    """y = W x + b over the last axis; W is ``[m, n]``."""

    layer_id: str
    W: Tensor
    bias: Tensor

    @classmethod
    def create(cls, layer_id: str, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        if zero:
            w = np.zeros((n_out, n_in), dtype=ad.default_dtype())
        else:
            bound = 1.0 / math.sqrt(n_in)
            w = rng.uniform(-bound, bound, (n_out, n_in)).astype(ad.default_dtype())
        b = np.zeros(n_out, dtype=ad.default_dtype())
        return cls(layer_id, _param(w, True), _param(b, True))

    @property
    def m(self) -> int:
        return self.W.shape[0]

    @property
    def n(self) -> int:
        return self.W.shape[1]

    @property
    def frozen(self) -> bool:
        return not self.W.requires_grad

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self.W.requires_grad = not value
        self.bias.requires_grad = not value

    def check_input(self, x: Tensor) -> None:
        if x.shape[-1] != self.n:
            raise DimensionError(f"{self.layer_id}: input last dim {x.shape[-1]} != {self.n}")

    def base(self, x: Tensor) -> Tensor:
        """The weight term W x, without bias."""
        self.check_input(x)
        return ad.matmul(x, self.W.T)

    def branch_input(self, x: Tensor) -> Tensor:
        return x

    @property
    def branch_in_features(self) -> int:
        return self.n

    def parameters(self) -> dict[str, Tensor]:
        return {f"{self.layer_id}.W": self.W, f"{self.layer_id}.bias": self.bias}


@dataclass(eq=False)
class Conv2dLayer(LinearLayer):
    """Same-padded k×k convolution on channel-last ``[B, H, W, C]`` tensors.

    ``W`` is stored as ``[C_out, k*k*C_in]`` so it is a linear map on im2col
    patches. The low-rank adapter branch of a conv layer acts as a 1×1
    convolution on the raw input channels.
    """

    kernel: int = 3

    @classmethod
    def create_conv(cls, layer_id: str, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                    zero: bool = False):
        base = LinearLayer.create(layer_id, c_in * kernel * kernel, c_out, rng, zero=zero)
        return cls(layer_id, base.W, base.bias, kernel)

    @property
    def c_in(self) -> int:
        return self.n // (self.kernel * self.kernel)

    def check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[-1] != self.c_in:
            raise DimensionError(f"{self.layer_id}: expected [B,H,W,{self.c_in}] input, got {x.shape}")

    def base(self, x: Tensor) -> Tensor:
        self.check_input(x)
        cols = x if self.kernel == 1 else ad.im2col(x, self.kernel)
        return ad.matmul(cols, self.W.T)

    @property
    def branch_in_features(self) -> int:
        return self.c_in


def linear_forward(layer: LinearLayer, x: Tensor) -> Tensor:
    return layer.base(x) + layer.bias


@dataclass(eq=False)
class LayerNormParams:
    gain: Tensor
    bias: Tensor

    @classmethod
    def create(cls, d: int):
        return cls(_param(np.ones(d, dtype=ad.default_dtype()), True),
                   _param(np.zeros(d, dtype=ad.default_dtype()), True))

    def __call__(self, x: Tensor, eps: float = 1e-6) -> Tensor:
        return ad.layernorm(x, self.gain, self.bias, eps)


@dataclass(eq=False)
class EmbeddingTable:
    """Class embedding rows laid out as [W_1..W_N, W_uc, W_{N+2}..W_{N+M+1}]."""

    rows: Tensor
    n_base: int
    n_new: int = 0

    @classmethod
    def create(cls, n_base: int, d: int, rng: np.random.Generator):
        rows = (rng.standard_normal((n_base + 1, d)) * 0.02).astype(ad.default_dtype())
        return cls(_param(rows, True), n_base, 0)

    @property
    def uncond_index(self) -> int:
        return self.n_base

    @property
    def n_rows(self) -> int:
        return self.n_base + 1 + self.n_new

    def check_index(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.intp)
        if np.any(idx < 0) or np.any(idx >= self.n_rows):
            raise IndexError(f"class index out of range [0, {self.n_rows}): {idx}")
        return idx


def embed_lookup(table: EmbeddingTable, class_index) -> Tensor:
    idx = table.check_index(class_index)
    return ad.take(table.rows, idx, axis=0)


def extend_embedding(table: EmbeddingTable, m: int) -> EmbeddingTable:
    """Append ``m`` rows, each a copy of the unconditional row."""
    if m < 1:
        raise ValueError("extend_embedding needs m >= 1")
    uc = table.rows.data[table.uncond_index]
    new = np.concatenate([table.rows.data, np.repeat(uc[None, :], m, axis=0)], axis=0)
    return EmbeddingTable(Tensor(new, requires_grad=table.rows.requires_grad), table.n_base, table.n_new + m)


# -- adapter dispatch --------------------------------------------------------

@dataclass
class DispatchTrace:
    """Records every wrapped-layer evaluation as (layer_id, token count or None)."""

    calls: list[tuple[str, int | None]] = field(default_factory=list)

    def record(self, layer_id: str, x: Tensor, token_axis: int | None) -> None:
        self.calls.append((layer_id, None if token_axis is None else x.shape[token_axis]))

    def clear(self) -> None:
        self.calls.clear()


@dataclass
class Dispatch:
    """Routes a wrapped layer to its adapter entry, if any.

    ``entries`` maps layer_id to an adapter parameter object; ``apply`` is the
    function evaluating one (set by the affiner module to avoid a cycle).
    """

    entries: dict | None = None
    apply: Callable | None = None
    trace: DispatchTrace | None = None

    def __call__(self, layer: LinearLayer, x: Tensor, token_axis: int | None = None) -> Tensor:
        if self.trace is not None:
            self.trace.record(layer.layer_id, x, token_axis)
        entry = None if self.entries is None else self.entries.get(layer.layer_id)
        if entry is None:
            return linear_forward(layer, x)
        return self.apply(layer, entry, x)


# -- transformer block -------------------------------------------------------

@dataclass(eq=False)
class AttentionBlock:
    """adaLN-Zero pre-norm transformer block (DiT style)."""

    prefix: str
    q: LinearLayer
    k: LinearLayer
    v: LinearLayer
    out: LinearLayer
    mlp_fc1: LinearLayer
    mlp_fc2: LinearLayer
    adaln_mod: LinearLayer
    ln1: LayerNormParams
    ln2: LayerNormParams
    n_heads: int

    @classmethod
    def create(cls, prefix: str, d: int, n_heads: int, mlp_ratio: int, rng: np.random.Generator):
        if d % n_heads:
            raise DimensionError(f"hidden dim {d} not divisible by {n_heads} heads")
        hid = d * mlp_ratio
        mk = lambda name, i, o, **kw: LinearLayer.create(f"{prefix}.{name}", i, o, rng, **kw)  # noqa: E731
        return cls(
            prefix,
            q=mk("attn.q", d, d), k=mk("attn.k", d, d), v=mk("attn.v", d, d), out=mk("attn.out", d, d),
            mlp_fc1=mk("mlp.fc1", d, hid), mlp_fc2=mk("mlp.fc2", hid, d),
            adaln_mod=mk("adaln", d, 6 * d, zero=True),
            ln1=LayerNormParams.create(d), ln2=LayerNormParams.create(d),
            n_heads=n_heads,
        )

    @property
    def d(self) -> int:
        return self.q.n

    def wrapped_layers(self) -> list[LinearLayer]:
        return [self.q, self.k, self.v, self.out, self.mlp_fc1, self.mlp_fc2, self.adaln_mod]

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for layer in self.wrapped_layers():
            params.update(layer.parameters())
        for name, ln in (("ln1", self.ln1), ("ln2", self.ln2)):
            params[f"{self.prefix}.{name}.gain"] = ln.gain
            params[f"{self.prefix}.{name}.bias"] = ln.bias
        return params


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    B, T, d = x.shape
    shift = ad.expand(shift.reshape(B, 1, d), (B, T, d))
    scale = ad.expand(scale.reshape(B, 1, d), (B, T, d))
    return x * (scale + 1.0) + shift


def _gate(gate: Tensor, h: Tensor) -> Tensor:
    B, T, d = h.shape
    return ad.expand(gate.reshape(B, 1, d), (B, T, d)) * h


def multihead_attention(block: AttentionBlock, h: Tensor, dispatch: Dispatch) -> Tensor:
    B, T, d = h.shape
    nh = block.n_heads
    dh = d // nh

    def heads(t: Tensor) -> Tensor:
        return t.reshape(B, T, nh, dh).transpose(0, 2, 1, 3)

    q = heads(dispatch(block.q, h, 1))
    k = heads(dispatch(block.k, h, 1))
    v = heads(dispatch(block.v, h, 1))
    scores = ad.matmul(q, ad.swap_last(k)) * (1.0 / math.sqrt(dh))
    attn = ad.softmax_lastdim(scores)
    ctx = ad.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, T, d)
    return dispatch(block.out, ctx, 1)


def attention_forward(block: AttentionBlock, tokens: Tensor, cond_vec: Tensor,
                      dispatch: Dispatch | None = None) -> Tensor:
    """One block: tokens ``[B, T, d]`` (or ``[T, d]``), cond_vec ``[B, d]`` (or ``[d]``)."""
    dispatch = dispatch or Dispatch()
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = tokens.reshape(1, *tokens.shape)
        cond_vec = cond_vec.reshape(1, -1)
    B, T, d = tokens.shape
    if T < 1 or d != block.d:
        raise DimensionError(f"{block.prefix}: bad token shape {tokens.shape}")
    if cond_vec.shape != (B, d):
        raise DimensionError(f"{block.prefix}: cond shape {cond_vec.shape} != {(B, d)}")

    mod = dispatch(block.adaln_mod, ad.silu(cond_vec), None)
    chunks = [mod[:, i * d:(i + 1) * d] for i in range(6)]
    shift1, scale1, gate1, shift2, scale2, gate2 = chunks

    h = _modulate(block.ln1(tokens), shift1, scale1)
    x = tokens + _gate(gate1, multihead_attention(block, h, dispatch))
    h = _modulate(block.ln2(x), shift2, scale2)
    h = dispatch(block.mlp_fc2, ad.gelu(dispatch(block.mlp_fc1, h, 1)), 1)
    x = x + _gate(gate2, h)
    return x.reshape(T, d) if squeeze else x


# -- optimizer ---------------------------------------------------------------

class Adam:
    """Adam over an explicit parameter list; frozen tensors are never touched."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)
