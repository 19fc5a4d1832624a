"""Toy diffusion denoisers: a DiT-style transformer and a small CNN UNet.

Both predict the noise added to an image batch ``[B, C, H, W]`` given an
integer timestep and class index. Layers that adapters may wrap are evaluated
through :class:`~affinekit.nn.Dispatch`; patch embedding, the final head, the
timestep MLP and the stem/output convolutions never are.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from . import autodiff as ad
from .affiner import LayerRecord, ParamCountModel, apply_adapter
from .autodiff import DimensionError, Tensor
from .config import ArchConfig
from .nn import (AttentionBlock, Conv2dLayer, Dispatch, DispatchTrace, EmbeddingTable, LayerNormParams,
                 LinearLayer, attention_forward, linear_forward)

if TYPE_CHECKING:
    from .registry import AdapterSet


class RegistryError(KeyError):
    pass


# -- masking -------------------------------------------------------------------

@dataclass(frozen=True)
class MaskPlan:
    ratio: float
    kept_indices: tuple[int, ...]
    n_tokens: int
    seed: int | None = None

    @property
    def dropped_indices(self) -> tuple[int, ...]:
        kept = set(self.kept_indices)
        return tuple(i for i in range(self.n_tokens) if i not in kept)


def make_mask(n_tokens: int, ratio: float, seed=None) -> MaskPlan:
    """Uniformly keep round((1 - ratio) * T) tokens (at least one)."""
    if not 0 <= ratio < 1:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    n_keep = max(1, int(math.floor((1 - ratio) * n_tokens + 0.5)))
    rng = np.random.default_rng(seed)
    kept = np.sort(rng.permutation(n_tokens)[:n_keep]) if n_keep < n_tokens else np.arange(n_tokens)
    return MaskPlan(float(ratio), tuple(int(i) for i in kept), n_tokens, seed)


# -- shared helpers --------------------------------------------------------------

def timestep_embedding(t: np.ndarray, dim: int, dtype) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb.astype(dtype)


def positional_embedding(n_tokens: int, dim: int, dtype) -> np.ndarray:
    return timestep_embedding(np.arange(n_tokens), dim, dtype)


def patchify(x: Tensor, p: int) -> Tensor:
    B, C, H, W = x.shape
    if H % p or W % p:
        raise DimensionError(f"image {H}x{W} not divisible by patch {p}")
    h, w = H // p, W // p
    return x.reshape(B, C, h, p, w, p).transpose(0, 2, 4, 1, 3, 5).reshape(B, h * w, C * p * p)


def unpatchify(tokens: Tensor, p: int, C: int, H: int, W: int) -> Tensor:
    B = tokens.shape[0]
    h, w = H // p, W // p
    return tokens.reshape(B, h, w, C, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(B, C, H, W)


def inject_condition(tokens: Tensor, cond_image, proj: Tensor, gate: Tensor, patch: int) -> Tensor:
    """tokens + gate * proj(patchified condition); identity while gate == 0."""
    cond = cond_image if isinstance(cond_image, Tensor) else Tensor(np.asarray(cond_image), dtype=tokens.dtype)
    if cond.ndim != 4 or cond.shape[2] % patch or cond.shape[3] % patch:
        raise DimensionError(f"condition image {cond.shape} does not tile into {patch}x{patch} patches")
    ctok = patchify(cond, patch)
    if ctok.shape[:2] != tokens.shape[:2]:
        raise DimensionError(f"condition grid {ctok.shape[:2]} does not match token grid {tokens.shape[:2]}")
    if proj.shape != (tokens.shape[-1], ctok.shape[-1]):
        raise DimensionError(f"condition projection {proj.shape} does not fit {ctok.shape[-1]} -> {tokens.shape[-1]}")
    return tokens + gate * ad.matmul(ctok, proj.T)


def _broadcast_batch(v, B: int, name: str) -> np.ndarray:
    arr = np.asarray(v)
    if arr.ndim == 0:
        return np.full(B, int(arr), dtype=np.intp)
    if arr.shape != (B,):
        raise DimensionError(f"{name} has shape {arr.shape}, expected ({B},)")
    return arr.astype(np.intp)


class Backbone:
    """Behaviour shared by both denoisers."""

    arch: ArchConfig
    class_table: EmbeddingTable
    time_fc1: LinearLayer
    time_fc2: LinearLayer

    def wrapped_layers(self) -> dict[str, LinearLayer]:
        raise NotImplementedError

    def parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def n_params(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def freeze(self, frozen: bool = True) -> None:
        for t in self.parameters().values():
            t.requires_grad = not frozen

    @property
    def frozen(self) -> bool:
        return not any(t.requires_grad for t in self.parameters().values())

    def fingerprint(self) -> bytes:
        h = hashlib.sha256()
        for name in sorted(self.parameters()):
            t = self.parameters()[name]
            h.update(name.encode())
            h.update(str(t.shape).encode())
            h.update(str(t.dtype).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.digest()

    def param_count_model(self) -> ParamCountModel:
        return ParamCountModel([LayerRecord(lid, layer.m, layer.branch_in_features, True,
                                            "conv" if isinstance(layer, Conv2dLayer) else "linear")
                                for lid, layer in self.wrapped_layers().items()])

    def _dispatch(self, adapters: "AdapterSet | None", trace: DispatchTrace | None) -> Dispatch:
        if adapters is None:
            return Dispatch(None, apply_adapter, trace)
        adapters.check_bound(self)
        return Dispatch(adapters.entries, apply_adapter, trace)

    def cond_vector(self, t: np.ndarray, class_index: np.ndarray, adapters: "AdapterSet | None") -> Tensor:
        dt = self.class_table.rows.dtype
        temb = Tensor(timestep_embedding(t, self.time_fc1.n, dt), dtype=dt)
        temb = linear_forward(self.time_fc2, ad.silu(linear_forward(self.time_fc1, temb)))
        rows = self.class_table.rows
        n_rows = self.class_table.n_rows
        if adapters is not None and adapters.new_class_rows is not None:
            rows = ad.concat([rows, adapters.new_class_rows], axis=0)
            n_rows += adapters.new_class_rows.shape[0]
        if np.any(class_index < 0) or np.any(class_index >= n_rows):
            raise IndexError(f"class index out of range [0, {n_rows}): {class_index}")
        return temb + ad.take(rows, class_index, axis=0)


class DiTBackbone(Backbone):
    def __init__(self, arch: ArchConfig, seed: int = 0):
        if arch.kind != "dit":
            raise ValueError("DiTBackbone needs a dit arch")
        self.arch = arch
        rng = np.random.default_rng(seed)
        d = arch.hidden
        self.patch_embed = LinearLayer.create("patch_embed", arch.patch_dim, d, rng)
        self.pos_embed = positional_embedding(arch.n_tokens, d, self.patch_embed.W.dtype)
        self.time_fc1 = LinearLayer.create("time.fc1", d, d, rng)
        self.time_fc2 = LinearLayer.create("time.fc2", d, d, rng)
        self.class_table = EmbeddingTable.create(arch.classes, d, rng)
        self.blocks = [AttentionBlock.create(f"block{i}", d, arch.heads, arch.mlp_ratio, rng)
                       for i in range(arch.depth)]
        self.final_ln = LayerNormParams.create(d)
        self.unpatch = LinearLayer.create("unpatch", d, arch.patch_dim, rng, zero=True)

    def wrapped_layers(self) -> dict[str, LinearLayer]:
        return {layer.layer_id: layer for blk in self.blocks for layer in blk.wrapped_layers()}

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for layer in (self.patch_embed, self.time_fc1, self.time_fc2):
            params.update(layer.parameters())
        params["class_table"] = self.class_table.rows
        for blk in self.blocks:
            params.update(blk.parameters())
        params["final_ln.gain"] = self.final_ln.gain
        params["final_ln.bias"] = self.final_ln.bias
        params.update(self.unpatch.parameters())
        return params

    def embed_tokens(self, x: Tensor) -> Tensor:
        return linear_forward(self.patch_embed, patchify(x, self.arch.patch)) + Tensor(self.pos_embed)

    def head(self, h: Tensor) -> Tensor:
        return linear_forward(self.unpatch, self.final_ln(h))

    def forward(self, x_t, t, class_index, cond_image=None, adapters=None, mask: MaskPlan | None = None,
                trace: DispatchTrace | None = None, return_tokens: bool = False) -> Tensor:
        a = self.arch
        x = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t), dtype=self.patch_embed.W.dtype)
        if x.ndim != 4 or x.shape[1:] != (a.channels, a.height, a.width):
            raise DimensionError(f"expected [B, {a.channels}, {a.height}, {a.width}] input, got {x.shape}")
        B = x.shape[0]
        t = _broadcast_batch(t, B, "t")
        class_index = _broadcast_batch(class_index, B, "class_index")
        dispatch = self._dispatch(adapters, trace)

        tokens = self.embed_tokens(x)
        if cond_image is not None:
            if adapters is None or adapters.cond_gate is None:
                raise RegistryError("a condition image needs an adapter set created with conditioning")
            tokens = inject_condition(tokens, cond_image, adapters.cond_proj, adapters.cond_gate, a.patch)
        c = self.cond_vector(t, class_index, adapters)

        if mask is not None:
            if mask.n_tokens != a.n_tokens:
                raise DimensionError(f"mask built for {mask.n_tokens} tokens, backbone has {a.n_tokens}")
            h = ad.take(tokens, mask.kept_indices, axis=1)
        else:
            h = tokens
        for blk in self.blocks:
            h = attention_forward(blk, h, c, dispatch)
        out = self.head(h)
        if mask is not None and mask.dropped_indices:
            dropped = self.head(ad.take(tokens, mask.dropped_indices, axis=1))
            order = np.argsort(np.array(mask.kept_indices + mask.dropped_indices))
            out = ad.take(ad.concat([out, dropped], axis=1), order, axis=1)
        if return_tokens:
            return out
        return unpatchify(out, a.patch, a.channels, a.height, a.width)

    def target_tokens(self, eps: np.ndarray) -> np.ndarray:
        return patchify(Tensor(eps, dtype=eps.dtype), self.arch.patch).data


# -- CNN -----------------------------------------------------------------------

@dataclass(eq=False)
class ResBlock:
    prefix: str
    ln1: LayerNormParams
    conv1: Conv2dLayer
    emb: LinearLayer
    ln2: LayerNormParams
    conv2: Conv2dLayer
    skip: Conv2dLayer | None

    @classmethod
    def create(cls, prefix: str, c_in: int, c_out: int, d_emb: int, rng):
        return cls(
            prefix,
            LayerNormParams.create(c_in),
            Conv2dLayer.create_conv(f"{prefix}.conv1", c_in, c_out, 3, rng),
            LinearLayer.create(f"{prefix}.emb", d_emb, 2 * c_out, rng),
            LayerNormParams.create(c_out),
            Conv2dLayer.create_conv(f"{prefix}.conv2", c_out, c_out, 3, rng, zero=True),
            Conv2dLayer.create_conv(f"{prefix}.skip", c_in, c_out, 1, rng) if c_in != c_out else None,
        )

    def wrapped_layers(self) -> list[LinearLayer]:
        return [l for l in (self.conv1, self.emb, self.conv2, self.skip) if l is not None]

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for layer in self.wrapped_layers():
            params.update(layer.parameters())
        for name, ln in (("ln1", self.ln1), ("ln2", self.ln2)):
            params[f"{self.prefix}.{name}.gain"] = ln.gain
            params[f"{self.prefix}.{name}.bias"] = ln.bias
        return params

    def __call__(self, x: Tensor, c: Tensor, dispatch: Dispatch) -> Tensor:
        B, H, W, _ = x.shape
        h = dispatch(self.conv1, ad.silu(self.ln1(x)))
        co = h.shape[-1]
        mod = dispatch(self.emb, ad.silu(c))
        scale = ad.expand(mod[:, :co].reshape(B, 1, 1, co), (B, H, W, co))
        shift = ad.expand(mod[:, co:].reshape(B, 1, 1, co), (B, H, W, co))
        h = h * (scale + 1.0) + shift
        h = dispatch(self.conv2, ad.silu(self.ln2(h)))
        base = dispatch(self.skip, x) if self.skip is not None else x
        return base + h


def _avgpool2(x: Tensor) -> Tensor:
    B, H, W, C = x.shape
    return x.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))


def _upsample2(x: Tensor) -> Tensor:
    B, H, W, C = x.shape
    y = ad.expand(x.reshape(B, H, 1, W, 1, C), (B, H, 2, W, 2, C))
    return y.reshape(B, 2 * H, 2 * W, C)


class CNNBackbone(Backbone):
    """Small UNet: ``depth`` down/up levels of residual blocks with a skip concat."""

    def __init__(self, arch: ArchConfig, seed: int = 0):
        if arch.kind != "cnn":
            raise ValueError("CNNBackbone needs a cnn arch")
        f = 2 ** arch.depth
        if arch.height % f or arch.width % f:
            raise DimensionError(f"image {arch.height}x{arch.width} not divisible by 2^{arch.depth}")
        self.arch = arch
        rng = np.random.default_rng(seed)
        ch, d = arch.hidden, arch.hidden
        self.conv_in = Conv2dLayer.create_conv("conv_in", arch.channels, ch, 3, rng)
        self.time_fc1 = LinearLayer.create("time.fc1", d, d, rng)
        self.time_fc2 = LinearLayer.create("time.fc2", d, d, rng)
        self.class_table = EmbeddingTable.create(arch.classes, d, rng)
        self.down = [ResBlock.create(f"down{i}", ch, ch, d, rng) for i in range(arch.depth)]
        self.mid = ResBlock.create("mid", ch, ch, d, rng)
        self.up = [ResBlock.create(f"up{i}", 2 * ch, ch, d, rng) for i in range(arch.depth)]
        self.out_ln = LayerNormParams.create(ch)
        self.conv_out = Conv2dLayer.create_conv("conv_out", ch, arch.channels, 3, rng, zero=True)

    def _blocks(self) -> list[ResBlock]:
        return [*self.down, self.mid, *self.up]

    def wrapped_layers(self) -> dict[str, LinearLayer]:
        return {layer.layer_id: layer for blk in self._blocks() for layer in blk.wrapped_layers()}

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for layer in (self.conv_in, self.time_fc1, self.time_fc2):
            params.update(layer.parameters())
        params["class_table"] = self.class_table.rows
        for blk in self._blocks():
            params.update(blk.parameters())
        params["out_ln.gain"] = self.out_ln.gain
        params["out_ln.bias"] = self.out_ln.bias
        params.update(self.conv_out.parameters())
        return params

    def forward(self, x_t, t, class_index, cond_image=None, adapters=None, mask=None, trace=None,
                return_tokens: bool = False) -> Tensor:
        a = self.arch
        if mask is not None:
            raise ValueError("token masking applies to transformer backbones only")
        if cond_image is not None:
            raise ValueError("condition injection applies to transformer backbones only")
        x = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t), dtype=self.conv_in.W.dtype)
        if x.ndim != 4 or x.shape[1:] != (a.channels, a.height, a.width):
            raise DimensionError(f"expected [B, {a.channels}, {a.height}, {a.width}] input, got {x.shape}")
        B = x.shape[0]
        t = _broadcast_batch(t, B, "t")
        class_index = _broadcast_batch(class_index, B, "class_index")
        dispatch = self._dispatch(adapters, trace)
        c = self.cond_vector(t, class_index, adapters)

        h = linear_forward(self.conv_in, x.transpose(0, 2, 3, 1))
        skips = []
        for blk in self.down:
            h = blk(h, c, dispatch)
            skips.append(h)
            h = _avgpool2(h)
        h = self.mid(h, c, dispatch)
        for blk in self.up:
            h = blk(ad.concat([_upsample2(h), skips.pop()], axis=-1), c, dispatch)
        out = linear_forward(self.conv_out, ad.silu(self.out_ln(h)))
        out = out.transpose(0, 3, 1, 2)
        if return_tokens:
            # one "token" per pixel so the training loss has the same layout as the DiT path
            return out.transpose(0, 2, 3, 1).reshape(B, a.height * a.width, a.channels)
        return out

    def target_tokens(self, eps: np.ndarray) -> np.ndarray:
        B, C, H, W = eps.shape
        return eps.transpose(0, 2, 3, 1).reshape(B, H * W, C)


def build_backbone(arch: ArchConfig, seed: int = 0) -> Backbone:
    return DiTBackbone(arch, seed) if arch.kind == "dit" else CNNBackbone(arch, seed)


def denoise_forward(backbone: Backbone, x_t, t, class_index, cond_image=None, adapters=None,
                    mask: MaskPlan | None = None, trace: DispatchTrace | None = None,
                    return_tokens: bool = False) -> Tensor:
    """Noise prediction with the same shape as ``x_t``."""
    return backbone.forward(x_t, t, class_index, cond_image=cond_image, adapters=adapters, mask=mask,
                            trace=trace, return_tokens=return_tokens)


def arch_param_count_model(arch: ArchConfig) -> ParamCountModel:
    """Wrapped-layer records derived from an arch description alone (no weights allocated)."""
    d = arch.hidden
    recs: list[LayerRecord] = []
    if arch.kind == "dit":
        hid = d * arch.mlp_ratio
        for i in range(arch.depth):
            p = f"block{i}"
            recs += [LayerRecord(f"{p}.attn.{n}", d, d) for n in ("q", "k", "v", "out")]
            recs += [LayerRecord(f"{p}.mlp.fc1", hid, d), LayerRecord(f"{p}.mlp.fc2", d, hid),
                     LayerRecord(f"{p}.adaln", 6 * d, d)]
        recs += [LayerRecord("patch_embed", d, arch.patch_dim, wrapped=False),
                 LayerRecord("unpatch", arch.patch_dim, d, wrapped=False)]
        return ParamCountModel(recs)
    ch = d

    def res(prefix, c_in, c_out):
        out = [LayerRecord(f"{prefix}.conv1", c_out, c_in, kind="conv"), LayerRecord(f"{prefix}.emb", 2 * c_out, d),
               LayerRecord(f"{prefix}.conv2", c_out, c_out, kind="conv")]
        if c_in != c_out:
            out.append(LayerRecord(f"{prefix}.skip", c_out, c_in, kind="conv"))
        return out

    for i in range(arch.depth):
        recs += res(f"down{i}", ch, ch)
    recs += res("mid", ch, ch)
    for i in range(arch.depth):
        recs += res(f"up{i}", 2 * ch, ch)
    return ParamCountModel(recs)
