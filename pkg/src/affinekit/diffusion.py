"""Noise schedule, forward process, training step, and DDPM / DDIM samplers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalError, Tensor
from .backbone import Backbone, MaskPlan, make_mask


@dataclass
class DiffusionSchedule:
    """Linear beta schedule; timesteps are 0-based and ``alpha_bar(-1) == 1``."""

    T_train: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    betas: np.ndarray = field(init=False, repr=False)
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}")
        self.betas = np.linspace(self.beta_start, self.beta_end, self.T_train, dtype=np.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def alpha_bar(self, t) -> np.ndarray | float:
        t = np.asarray(t)
        if np.any(t < -1) or np.any(t >= self.T_train):
            raise IndexError(f"timestep out of range [-1, {self.T_train}): {t}")
        out = np.where(t < 0, 1.0, self.alpha_bars[np.clip(t, 0, None)])
        return float(out) if out.ndim == 0 else out


@dataclass
class SamplerConfig:
    kind: str = "ddim"
    steps: int = 100
    eta: float = 0.0
    guidance_weight: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("ddim", "ddpm"):
            raise ValueError(f"unknown sampler {self.kind!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.guidance_weight < 0:
            raise ValueError("guidance weight must be >= 0")


def _bcast(v: np.ndarray, x: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(v.shape + (1,) * (x.ndim - v.ndim))


def q_sample(x0: np.ndarray, t, eps: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if np.shape(eps) != np.shape(x0):
        raise ValueError(f"noise shape {np.shape(eps)} != data shape {np.shape(x0)}")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= schedule.T_train):
        raise IndexError(f"timestep out of range [0, {schedule.T_train}): {t}")
    ab = _bcast(schedule.alpha_bar(t), np.asarray(x0))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def q_sample_abar(x0, alpha_bar: float, eps):
    return math.sqrt(alpha_bar) * x0 + math.sqrt(1.0 - alpha_bar) * eps


def ddim_coefficients(ab_t: float, ab_prev: float, eta: float) -> tuple[float, float, float]:
    """(sqrt(abar_prev), direction coefficient, sigma) for one DDIM update."""
    if ab_t <= 0:
        raise ValueError(f"alpha_bar_t must be positive, got {ab_t}")
    sigma = eta * math.sqrt((1 - ab_prev) / (1 - ab_t)) * math.sqrt(1 - ab_t / ab_prev) if ab_t < 1 else 0.0
    return math.sqrt(ab_prev), math.sqrt(max(1 - ab_prev - sigma ** 2, 0.0)), sigma


def ddim_step_abar(x_t, eps_hat, ab_t: float, ab_prev: float, eta: float = 0.0, noise=None):
    c_prev, c_dir, sigma = ddim_coefficients(ab_t, ab_prev, eta)
    x0_pred = (x_t - math.sqrt(1 - ab_t) * eps_hat) / math.sqrt(ab_t)
    out = c_prev * x0_pred + c_dir * eps_hat
    if sigma > 0:
        if noise is None:
            raise ValueError("eta > 0 needs a noise sample")
        out = out + sigma * noise
    return out


def ddim_step(x_t, eps_hat, t: int, t_prev: int, schedule: DiffusionSchedule, eta: float = 0.0, noise=None):
    if t_prev >= t:
        raise ValueError(f"t_prev={t_prev} must precede t={t}")
    return ddim_step_abar(x_t, eps_hat, schedule.alpha_bar(t), schedule.alpha_bar(t_prev), eta, noise)


def ddpm_step(x_t, eps_hat, t: int, t_prev: int, schedule: DiffusionSchedule, noise=None):
    """Ancestral step using the posterior mean and variance beta_tilde.

    For strided sequences the effective beta is 1 - abar_t / abar_prev.
    """
    if t_prev >= t:
        raise ValueError(f"t_prev={t_prev} must precede t={t}")
    ab_t, ab_prev = schedule.alpha_bar(t), schedule.alpha_bar(t_prev)
    alpha = ab_t / ab_prev
    beta = 1 - alpha
    mean = (x_t - beta / math.sqrt(1 - ab_t) * eps_hat) / math.sqrt(alpha)
    var = (1 - ab_prev) / (1 - ab_t) * beta
    if var > 0:
        if noise is None:
            raise ValueError("ddpm step needs a noise sample")
        mean = mean + math.sqrt(var) * noise
    return mean


def timestep_sequence(T_train: int, steps: int) -> list[int]:
    """Uniform-stride subsequence, descending, always starting at T_train - 1."""
    if not 1 <= steps <= T_train:
        raise ValueError(f"steps must be in [1, {T_train}]")
    ts = np.floor(np.arange(steps) * (T_train / steps)).astype(int)
    ts = ts + (T_train - 1 - ts[-1])
    return [int(t) for t in ts[::-1]]


EpsFn = Callable[[np.ndarray, int], np.ndarray]


def sample_loop(eps_fn: EpsFn, shape, schedule: DiffusionSchedule, config: SamplerConfig,
                rng: np.random.Generator | None = None, x_T: np.ndarray | None = None,
                dtype=np.float64) -> np.ndarray:
    """Run a sampler from pure noise. ``eps_fn(x_t, t)`` returns the noise estimate."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    x = rng.standard_normal(shape).astype(dtype) if x_T is None else np.array(x_T, dtype=dtype)
    ts = timestep_sequence(schedule.T_train, config.steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else -1
        eps = np.asarray(eps_fn(x, t), dtype=np.float64)
        if config.kind == "ddim":
            noise = rng.standard_normal(shape) if config.eta > 0 and t_prev >= 0 else None
            x = ddim_step(x, eps, t, t_prev, schedule, config.eta, noise)
        else:
            noise = rng.standard_normal(shape) if t_prev >= 0 else None
            x = ddpm_step(x, eps, t, t_prev, schedule, noise)
        x = np.asarray(x, dtype=dtype)
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite sample at t={t}")
    return x


def model_eps_fn(backbone: Backbone, adapters, class_index, guidance_weight: float = 0.0, cond_image=None,
                 uncond_index: int | None = None, chunk: int = 256) -> EpsFn:
    """Wrap a backbone as an ``eps_fn``; guidance uses the unconditional row when w > 0.

    Rows are evaluated ``chunk`` at a time so large sample batches stay cache-sized.
    """
    uc = backbone.class_table.uncond_index if uncond_index is None else uncond_index

    def rows(v, sl, B):
        if v is None or np.ndim(v) == 0 or len(v) != B:
            return v
        return v[sl]

    def eval_chunk(x, t, sl, B):
        n = x.shape[0]
        cimg = rows(cond_image, sl, B)
        cond = backbone.forward(x, np.full(n, t), rows(class_index, sl, B), cond_image=cimg, adapters=adapters).data
        if guidance_weight <= 0:
            return cond
        unc = backbone.forward(x, np.full(n, t), uc, cond_image=cimg, adapters=adapters).data
        return unc + guidance_weight * (cond - unc)

    def fn(x: np.ndarray, t: int) -> np.ndarray:
        B = x.shape[0]
        if B <= chunk:
            return eval_chunk(x, t, slice(None), B)
        return np.concatenate([eval_chunk(x[i:i + chunk], t, slice(i, i + chunk), B) for i in range(0, B, chunk)])

    return fn


def sample(backbone: Backbone, adapters, config: SamplerConfig, class_index, n: int,
           schedule: DiffusionSchedule | None = None, cond_image=None) -> np.ndarray:
    """Draw ``n`` images ``[n, C, H, W]``; deterministic given ``config.seed`` when eta == 0."""
    schedule = schedule or DiffusionSchedule()
    a = backbone.arch
    shape = (n, a.channels, a.height, a.width)
    if n == 0:
        return np.zeros(shape, dtype=backbone.class_table.rows.dtype)
    fn = model_eps_fn(backbone, adapters, class_index, config.guidance_weight, cond_image)
    dt = backbone.class_table.rows.dtype
    return sample_loop(fn, shape, schedule, config, dtype=dt)


# -- training --------------------------------------------------------------------

@dataclass
class Batch:
    x0: np.ndarray
    class_index: np.ndarray
    cond: np.ndarray | None = None


def diffusion_loss(backbone: Backbone, adapters, batch: Batch, schedule: DiffusionSchedule,
                   rng: np.random.Generator, mask: MaskPlan | None = None) -> Tensor:
    """Mean squared noise error over kept tokens."""
    x0 = np.asarray(batch.x0)
    B = x0.shape[0]
    t = rng.integers(0, schedule.T_train, size=B)
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    x_t = q_sample(x0, t, eps, schedule).astype(x0.dtype)
    pred = backbone.forward(x_t, t, batch.class_index, cond_image=batch.cond, adapters=adapters, mask=mask,
                            return_tokens=True)
    target = backbone.target_tokens(eps)
    if mask is not None:
        idx = np.asarray(mask.kept_indices)
        pred = ad.take(pred, idx, axis=1)
        target = target[:, idx]
    diff = pred - Tensor(target, dtype=pred.dtype)
    return ad.square(diff).mean()


def train_step(backbone: Backbone, adapters, batch: Batch, schedule: DiffusionSchedule, optimizer,
               rng: np.random.Generator, mask_ratio: float = 0.0, step: int | None = None) -> float:
    """One optimizer step; only the optimizer's parameters move."""
    if adapters is not None and not backbone.frozen:
        raise RuntimeError("adapter training requires a frozen backbone")
    mask = None
    if mask_ratio > 0:
        n_tokens = getattr(backbone.arch, "n_tokens", None)
        mask = make_mask(n_tokens, mask_ratio, seed=int(rng.integers(2 ** 31)))
    optimizer.zero_grad()
    try:
        loss = diffusion_loss(backbone, adapters, batch, schedule, rng, mask)
    except NumericalError as exc:
        raise NumericalError(f"step {step}: {exc}") from exc
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalError(f"step {step}: non-finite loss {value}")
    loss.backward()
    optimizer.step()
    return value
