import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affinekit.autodiff import DimensionError, Tensor
from affinekit.backbone import (RegistryError, arch_param_count_model, build_backbone, denoise_forward,
                                inject_condition, make_mask, patchify, unpatchify)
from affinekit.config import ArchConfig
from affinekit.nn import DispatchTrace
from affinekit.registry import create_adapter_set

TINY_DIT = ArchConfig("dit", 16, 2, 2, 2, 1, 4, 4, 3, 2)
TINY_CNN = ArchConfig("cnn", 4, 1, 1, 1, 1, 4, 4, 2)


def perturbed(arch, seed=0):
    """A backbone whose zero-initialised gates and heads are randomised."""
    bb = build_backbone(arch, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for t in bb.parameters().values():
        t.data = (t.data + 0.2 * rng.standard_normal(t.shape)).astype(t.dtype)
    bb.freeze(True)
    return bb


def random_inputs(bb, rng, B=3):
    a = bb.arch
    x = rng.standard_normal((B, a.channels, a.height, a.width)).astype(np.float32)
    t = rng.integers(0, 1000, size=B)
    y = rng.integers(0, a.classes + 1, size=B)
    return x, t, y


def test_make_mask_examples():
    plan = make_mask(4, 0.5, seed=0)
    assert len(plan.kept_indices) == 2
    assert list(plan.kept_indices) == sorted(plan.kept_indices)
    assert sorted(plan.kept_indices + plan.dropped_indices) == [0, 1, 2, 3]
    assert make_mask(4, 0.0).kept_indices == (0, 1, 2, 3)
    assert make_mask(4, 0.5, seed=7) == make_mask(4, 0.5, seed=7)
    with pytest.raises(ValueError):
        make_mask(4, 1.0)


@settings(max_examples=50, deadline=None)
@given(T=st.integers(1, 64), ratio=st.floats(0, 0.95), seed=st.integers(0, 1000))
def test_make_mask_counts(T, ratio, seed):
    plan = make_mask(T, ratio, seed)
    assert len(plan.kept_indices) == max(1, math.floor((1 - ratio) * T + 0.5))
    assert len(set(plan.kept_indices)) == len(plan.kept_indices)


def test_patchify_roundtrip():
    x = np.arange(2 * 3 * 4 * 6, dtype=np.float64).reshape(2, 3, 4, 6)
    tok = patchify(Tensor(x, dtype=np.float64), 2)
    assert tok.shape == (2, 6, 12)
    # first token holds the top-left 2x2 patch of each channel
    assert np.array_equal(tok.data[0, 0], x[0, :, :2, :2].reshape(-1))
    assert np.array_equal(unpatchify(tok, 2, 3, 4, 6).data, x)


def test_inject_condition_examples():
    tokens = Tensor(np.ones((1, 4, 2)), dtype=np.float64)
    cond = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    proj = Tensor(np.ones((2, 4)), dtype=np.float64)
    out = inject_condition(tokens, cond, proj, Tensor(np.float64(0.0)), 2)
    assert np.array_equal(out.data, tokens.data)
    out = inject_condition(tokens, cond, proj, Tensor(np.float64(1.0)), 2)
    # patch sums: [0+1+4+5, 2+3+6+7, 8+9+12+13, 10+11+14+15]
    assert np.array_equal(out.data[0, :, 0], 1 + np.array([10, 18, 42, 50]))
    with pytest.raises(DimensionError):
        inject_condition(tokens, np.zeros((1, 1, 4, 2)), proj, Tensor(np.float64(1.0)), 2)


@pytest.mark.parametrize("arch", [TINY_DIT, TINY_CNN], ids=["dit", "cnn"])
@pytest.mark.parametrize("method", ["affiner", "lora", "bias-only"])
def test_fresh_adapters_are_transparent(arch, method):
    bb = perturbed(arch)
    s = create_adapter_set(bb, "t", 2, with_classes=1, seed=3, method=method)
    rng = np.random.default_rng(0)
    for _ in range(10):
        x, t, y = random_inputs(bb, rng)
        ref = denoise_forward(bb, x, t, y).data
        assert ref.tobytes() == denoise_forward(bb, x, t, y, adapters=s).data.tobytes()


@pytest.mark.parametrize("arch", [TINY_DIT, TINY_CNN], ids=["dit", "cnn"])
def test_new_class_equals_unconditional(arch):
    bb = perturbed(arch, seed=1)
    s = create_adapter_set(bb, "t", 2, with_classes=2, seed=0)
    uc = bb.class_table.uncond_index
    x, t, _ = random_inputs(bb, np.random.default_rng(1))
    ref = denoise_forward(bb, x, t, uc, adapters=s).data.tobytes()
    assert denoise_forward(bb, x, t, uc + 1, adapters=s).data.tobytes() == ref
    assert denoise_forward(bb, x, t, uc + 2, adapters=s).data.tobytes() == ref
    with pytest.raises(IndexError):
        denoise_forward(bb, x, t, uc + 3, adapters=s)
    with pytest.raises(IndexError):
        denoise_forward(bb, x, t, uc + 1)


def test_masked_forward_processes_kept_tokens_only():
    bb = perturbed(TINY_DIT)
    x, t, y = random_inputs(bb, np.random.default_rng(2))
    plan = make_mask(TINY_DIT.n_tokens, 0.5, seed=1)
    trace = DispatchTrace()
    out = denoise_forward(bb, x, t, y, mask=plan, trace=trace)
    assert out.shape == x.shape
    counts = [n for lid, n in trace.calls if not lid.endswith("adaln")]
    assert counts and all(n == math.ceil(TINY_DIT.n_tokens / 2) for n in counts)
    assert len(trace.calls) == 7 * TINY_DIT.depth


def test_mask_rejected_by_cnn():
    bb = build_backbone(TINY_CNN)
    x, t, y = random_inputs(bb, np.random.default_rng(0))
    with pytest.raises(ValueError):
        denoise_forward(bb, x, t, y, mask=make_mask(16, 0.5, 0))


def test_condition_needs_conditioned_adapter_set():
    bb = perturbed(TINY_DIT)
    x, t, y = random_inputs(bb, np.random.default_rng(3))
    cond = np.ones_like(x)
    with pytest.raises(RegistryError):
        denoise_forward(bb, x, t, y, cond_image=cond)
    s = create_adapter_set(bb, "c", 2, with_cond=True)
    assert (denoise_forward(bb, x, t, y, cond_image=cond, adapters=s).data.tobytes()
            == denoise_forward(bb, x, t, y).data.tobytes())
    s.cond_gate.data[...] = 1.0
    assert not np.array_equal(denoise_forward(bb, x, t, y, cond_image=cond, adapters=s).data,
                              denoise_forward(bb, x, t, y).data)


def test_input_shape_checked():
    bb = build_backbone(TINY_DIT)
    with pytest.raises(DimensionError):
        denoise_forward(bb, np.zeros((1, 2, 4, 4)), 0, 0)


def test_fingerprint_detects_single_bit():
    bb = build_backbone(TINY_DIT)
    fp = bb.fingerprint()
    w = bb.blocks[0].q.W.data
    w.view(np.uint32)[0, 0] ^= 1
    assert bb.fingerprint() != fp


def test_wrapped_layer_set():
    bb = build_backbone(TINY_DIT)
    ids = set(bb.wrapped_layers())
    assert len(ids) == 7 * TINY_DIT.depth
    assert not any(k.startswith(("patch_embed", "unpatch", "time")) for k in ids)
    model = arch_param_count_model(TINY_DIT)
    assert [r.layer_id for r in model.wrapped()] == list(bb.wrapped_layers())


def test_frozen_backbone_has_no_gradients_after_adapter_backward():
    bb = perturbed(TINY_DIT)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        s = create_adapter_set(bb, "t", 2, with_classes=1)
    x, t, _ = random_inputs(bb, np.random.default_rng(4))
    out = denoise_forward(bb, x, t, bb.class_table.uncond_index + 1, adapters=s)
    (out * out).sum().backward()
    assert all(p.grad is None for p in bb.parameters().values())
    assert all(p.grad is not None for p in s.parameters())
