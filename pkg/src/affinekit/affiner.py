"""Affiner adapters, LoRA / bias-only baselines, folding and parameter counting.

An Affiner wraps a frozen layer ``y = W x + b_hat`` as::

    y = (1 + a) * (W x) + s * W_up relu(W_down x) + b_hat + b

with ``a``, ``b`` per output channel, ``s`` a scalar gate, and the low-rank
branch Kaiming-initialised. ``a = b = s = 0`` at creation, so a fresh adapter
reproduces the frozen layer bit for bit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, NumericalError, Tensor
from .nn import LinearLayer, kaiming_normal, linear_forward

AFFINER_GROUPS = ("a", "b", "s", "W_down", "W_up")

# Ablation variants: which Affiner groups are trained.
VARIANTS = {
    "b-only": ("b",),
    "a-only": ("a",),
    "branch-only": ("s", "W_down", "W_up"),
    "full": AFFINER_GROUPS,
}


@dataclass(eq=False)
class AffinerParams:
    a: Tensor
    b: Tensor
    s: Tensor
    W_down: Tensor
    W_up: Tensor

    @property
    def d_rank(self) -> int:
        return self.W_down.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {g: getattr(self, g) for g in AFFINER_GROUPS}

    def set_trainable(self, groups=AFFINER_GROUPS) -> None:
        for g, t in self.tensors().items():
            t.requires_grad = g in groups


def affiner_init(m: int, n: int, d_rank: int, seed=None, rng: np.random.Generator | None = None,
                 dtype=None) -> AffinerParams:
    if min(m, n, d_rank) < 1:
        raise ValueError(f"affiner_init needs positive sizes, got m={m} n={n} d={d_rank}")
    if d_rank > min(m, n):
        warnings.warn(f"d_rank={d_rank} exceeds min(m, n)={min(m, n)}; the branch is redundant", stacklevel=2)
    rng = rng if rng is not None else np.random.default_rng(seed)
    dtype = dtype or ad.default_dtype()
    W_down = kaiming_normal(rng, (d_rank, n), fan_in=n, dtype=dtype)
    W_up = kaiming_normal(rng, (m, d_rank), fan_in=d_rank, dtype=dtype)
    return AffinerParams(
        a=Tensor(np.zeros(m, dtype=dtype), requires_grad=True),
        b=Tensor(np.zeros(m, dtype=dtype), requires_grad=True),
        s=Tensor(np.zeros((), dtype=dtype), requires_grad=True),
        W_down=Tensor(W_down, requires_grad=True),
        W_up=Tensor(W_up, requires_grad=True),
    )


def _check_shapes(layer: LinearLayer, p: AffinerParams) -> None:
    m, n = layer.m, layer.branch_in_features
    if p.a.shape != (m,) or p.b.shape != (m,) or p.W_up.shape[0] != m or p.W_down.shape[1] != n:
        raise DimensionError(
            f"{layer.layer_id}: adapter shapes a{p.a.shape} W_down{p.W_down.shape} W_up{p.W_up.shape} "
            f"do not fit layer m={m} n={n}")


def affiner_branch(p: AffinerParams, x: Tensor) -> Tensor:
    return ad.matmul(ad.relu(ad.matmul(x, p.W_down.T)), p.W_up.T)


def affiner_forward(layer: LinearLayer, p: AffinerParams, x: Tensor) -> Tensor:
    _check_shapes(layer, p)
    try:
        y = (p.a + 1.0) * layer.base(x) + p.s * affiner_branch(p, layer.branch_input(x))
        return y + layer.bias + p.b
    except NumericalError as exc:
        raise NumericalError(f"{layer.layer_id}: {exc}") from exc


# -- baselines ----------------------------------------------------------------

@dataclass(eq=False)
class LoraParams:
    """y = W x + b_hat + A (B x); B is zero-initialised."""

    A: Tensor
    B: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"A": self.A, "B": self.B}


@dataclass(eq=False)
class BiasOnlyParams:
    delta_b: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"delta_b": self.delta_b}


BaselineParams = LoraParams | BiasOnlyParams


def lora_init(m: int, n: int, rank: int, seed=None, rng=None, dtype=None) -> LoraParams:
    rng = rng if rng is not None else np.random.default_rng(seed)
    dtype = dtype or ad.default_dtype()
    A = kaiming_normal(rng, (m, rank), fan_in=rank, dtype=dtype)
    return LoraParams(Tensor(A, requires_grad=True), Tensor(np.zeros((rank, n), dtype=dtype), requires_grad=True))


def bias_only_init(m: int, dtype=None) -> BiasOnlyParams:
    return BiasOnlyParams(Tensor(np.zeros(m, dtype=dtype or ad.default_dtype()), requires_grad=True))


def baseline_forward(layer: LinearLayer, p, x: Tensor) -> Tensor:
    if isinstance(p, LoraParams):
        if p.A.shape[0] != layer.m or p.B.shape[1] != layer.branch_in_features:
            raise DimensionError(f"{layer.layer_id}: LoRA shapes {p.A.shape}/{p.B.shape} do not fit layer")
        delta = ad.matmul(ad.matmul(layer.branch_input(x), p.B.T), p.A.T)
        return layer.base(x) + layer.bias + delta
    if isinstance(p, BiasOnlyParams):
        if p.delta_b.shape != (layer.m,):
            raise DimensionError(f"{layer.layer_id}: bias shape {p.delta_b.shape} != ({layer.m},)")
        return layer.base(x) + layer.bias + p.delta_b
    raise TypeError(f"unknown baseline params {type(p).__name__}")


def apply_adapter(layer: LinearLayer, p, x: Tensor) -> Tensor:
    """Dispatch target used by backbones."""
    if isinstance(p, AffinerParams):
        return affiner_forward(layer, p, x)
    return baseline_forward(layer, p, x)


# -- folding ------------------------------------------------------------------

@dataclass
class FoldedAffiner:
    W: np.ndarray
    bias: np.ndarray
    s: np.ndarray
    W_up: np.ndarray
    W_down: np.ndarray

    def forward(self, x: np.ndarray, with_branch: bool = True) -> np.ndarray:
        y = x @ self.W.T + self.bias
        if with_branch:
            y = y + self.s * (np.maximum(x @ self.W_down.T, 0) @ self.W_up.T)
        return y


def fold_affine(layer: LinearLayer, p: AffinerParams) -> FoldedAffiner:
    """Merge the scale and shift into the frozen weights; the ReLU branch stays separate."""
    _check_shapes(layer, p)
    W_f = (1 + p.a.data)[:, None] * layer.W.data
    b_f = layer.bias.data + p.b.data
    return FoldedAffiner(W_f, b_f, p.s.data.copy(), p.W_up.data.copy(), p.W_down.data.copy())


# -- parameter counting --------------------------------------------------------

@dataclass(frozen=True)
class LayerRecord:
    layer_id: str
    m: int
    n: int
    wrapped: bool = True
    kind: str = "linear"  # "linear" | "conv"; attention layers are tagged by layer_id suffix

    @property
    def is_attention(self) -> bool:
        return ".attn." in self.layer_id


@dataclass
class ParamCountModel:
    layers: list[LayerRecord] = field(default_factory=list)

    def wrapped(self) -> list[LayerRecord]:
        return [r for r in self.layers if r.wrapped]


def layer_param_count(rec: LayerRecord, method: str, d_rank: int = 0, variant: str = "full") -> int:
    m, n = rec.m, rec.n
    if method == "affiner":
        groups = VARIANTS[variant]
        total = 0
        total += m if "a" in groups else 0
        total += m if "b" in groups else 0
        total += 1 if "s" in groups else 0
        total += d_rank * n if "W_down" in groups else 0
        total += d_rank * m if "W_up" in groups else 0
        return total
    if method == "lora":
        return d_rank * (m + n) if rec.is_attention else 0
    if method == "bias-only":
        return m
    if method == "branch":
        return d_rank * (m + n)
    raise ValueError(f"unknown method {method!r}")


def count_params(model: ParamCountModel, method: str = "affiner", d_rank: int = 0, variant: str = "full") -> int:
    """Closed-form adapter size.

    affiner: sum of 2m + 1 + d(m + n) over wrapped layers; lora(r): r(m + n)
    over attention projections; bias-only: m per wrapped layer; branch: the
    low-rank matrices alone.
    """
    return sum(layer_param_count(r, method, d_rank, variant) for r in model.wrapped())


def trainable_fraction(backbone_total: int, adapter_total: int) -> tuple[float, float]:
    """Percent of the combined model that trains, and percent relative to the backbone alone."""
    if backbone_total <= 0 or adapter_total < 0:
        raise ValueError("totals must be positive")
    return 100.0 * adapter_total / (backbone_total + adapter_total), 100.0 * adapter_total / backbone_total
