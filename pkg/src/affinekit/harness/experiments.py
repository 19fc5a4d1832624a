"""Pretraining, adaptation, evaluation and ablation runs.

These functions hold the experiment logic; :mod:`affinekit.harness.cli` only
handles files and arguments around them.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ..affiner import VARIANTS, count_params, layer_param_count, trainable_fraction
from ..autodiff import NumericalError
from ..backbone import Backbone, arch_param_count_model, build_backbone
from ..config import DIT_XL, POINTS_2D, ArchConfig, ConfigError, default_rank, dump_kv_text, parse_kv_text
from ..diffusion import Batch, DiffusionSchedule, SamplerConfig, sample, train_step
from ..nn import Adam
from ..registry import AdapterSet, create_adapter_set
from .data import ToyDataset
from .metrics import energy_distance, mmd_rbf, mode_coverage

log = logging.getLogger(__name__)

# Small image denoisers of comparable size for the backbone comparison.
IMAGE_DIT = ArchConfig(kind="dit", hidden=64, depth=2, heads=4, patch=4, channels=1, height=32, width=32, classes=1,
                       mlp_ratio=2)
IMAGE_CNN = ArchConfig(kind="cnn", hidden=16, depth=2, heads=1, patch=1, channels=1, height=32, width=32, classes=1)
ARCH_PRESETS = {"points": POINTS_2D, "dit-xl": DIT_XL, "image-dit": IMAGE_DIT, "image-cnn": IMAGE_CNN}


class DivergenceError(NumericalError):
    """Training produced a non-finite value; ``backbone`` holds the last good weights."""

    def __init__(self, message: str, backbone=None, step: int | None = None):
        super().__init__(message)
        self.backbone = backbone
        self.step = step


@dataclass
class RunConfig:
    command: str = "pretrain"
    arch: str = "points"
    dataset: str = "mixture-a"
    tasks: list = field(default_factory=lambda: ["mixture-b"])
    steps: int = 4000
    adapt_steps: int = 1500
    batch: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    n_seeds: int = 1
    d_rank: int = 0
    mask_ratio: float = 0.0
    method: str = "affiner"
    variant: str = "full"
    label_dropout: float = 0.2
    T_train: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    sampler: str = "ddim"
    sample_steps: int = 100
    eta: float = 0.0
    guidance: float = 0.0
    n_eval: int = 1000
    n_train: int = 20000
    image_size: int = 32
    count: int = 16
    variants: list = field(default_factory=lambda: ["b-only", "a-only", "branch-only", "full"])
    ranks: list = field(default_factory=lambda: [1, 4, 16, 64])
    checkpoint: str = ""
    adapter: str = ""
    out: str = "runs/out"

    @classmethod
    def from_dict(cls, values: dict, source: str = "<config>") -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}", source=source)
        values = dict(values)
        for key in ("tasks", "variants", "ranks"):
            if key in values and not isinstance(values[key], list):
                values[key] = [values[key]]
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        return cls.from_dict(parse_kv_text(path.read_text(), str(path)), str(path))

    def to_text(self) -> str:
        return dump_kv_text(asdict(self))

    def arch_config(self) -> ArchConfig:
        if self.arch in ("image-dit", "image-cnn"):
            return replace(ARCH_PRESETS[self.arch], height=self.image_size, width=self.image_size)
        if self.arch in ARCH_PRESETS:
            return ARCH_PRESETS[self.arch]
        return ArchConfig.load(self.arch)

    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule(self.T_train, self.beta_start, self.beta_end)

    def sampler_config(self, seed: int | None = None) -> SamplerConfig:
        return SamplerConfig(self.sampler, self.sample_steps, self.eta, self.guidance,
                             self.seed if seed is None else seed)

    @property
    def seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.n_seeds)]

    def rank_for(self, arch: ArchConfig) -> int:
        return self.d_rank or default_rank(arch.hidden)


def make_dataset(cfg: RunConfig, spec: str, seed_offset: int = 0) -> ToyDataset:
    return ToyDataset(spec, seed=1000 + seed_offset, n_train=cfg.n_train, n_eval=max(cfg.n_eval, 1000),
                      image_size=cfg.image_size)


def dataset_arch(arch: ArchConfig, data: ToyDataset) -> ArchConfig:
    c, h, w = data.sample_shape
    if (arch.channels, arch.height, arch.width) != (c, h, w):
        raise ConfigError(f"arch expects {arch.channels}x{arch.height}x{arch.width}, dataset gives {c}x{h}x{w}")
    return arch


# -- training loops ------------------------------------------------------------

def pretrain(cfg: RunConfig, data: ToyDataset | None = None, steps: int | None = None) -> tuple[Backbone, dict]:
    """Train every backbone parameter on the base dataset."""
    data = data or make_dataset(cfg, cfg.dataset)
    arch = dataset_arch(cfg.arch_config(), data)
    backbone = build_backbone(arch, seed=cfg.seed)
    steps = cfg.steps if steps is None else steps
    schedule = cfg.schedule()
    opt = Adam(backbone.parameters().values(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    rng = np.random.default_rng(cfg.seed + 1)
    uc = backbone.class_table.uncond_index
    params = backbone.parameters()
    last_good = {k: t.data.copy() for k, t in params.items()}
    losses = []
    t0 = time.perf_counter()
    for step in range(steps):
        x0, y, cond = data.batch(cfg.batch, rng)
        y = np.minimum(y, arch.classes - 1)
        drop = rng.random(len(y)) < cfg.label_dropout
        y = np.where(drop, uc, y)
        try:
            losses.append(train_step(backbone, None, Batch(x0, y), schedule, opt, rng, step=step))
        except NumericalError as exc:
            for k, t in params.items():
                t.data = last_good[k]
            backbone.freeze(True)
            raise DivergenceError(str(exc), backbone, step) from exc
        if step % 100 == 99:
            last_good = {k: t.data.copy() for k, t in params.items()}
        if step % 500 == 0:
            log.info("pretrain step %d loss %.4f", step, losses[-1])
    backbone.freeze(True)
    return backbone, {"losses": losses, "seconds": time.perf_counter() - t0, "steps": steps}


def new_adapter_set(cfg: RunConfig, backbone: Backbone, task: str, seed: int, variant: str | None = None,
                    method: str | None = None, d_rank: int | None = None, with_cond: bool = False) -> AdapterSet:
    method = method or cfg.method
    d_rank = d_rank or cfg.rank_for(backbone.arch)
    s = create_adapter_set(backbone, task, d_rank, with_classes=1, with_cond=with_cond, seed=seed, method=method)
    if method == "affiner":
        s.set_variant(variant or cfg.variant)
    return s


def adapt(cfg: RunConfig, backbone: Backbone, data: ToyDataset, adapters: AdapterSet, seed: int,
          steps: int | None = None, mask_ratio: float | None = None) -> dict:
    """Train only ``adapters`` on ``data`` with the new class row as label."""
    steps = cfg.adapt_steps if steps is None else steps
    mask_ratio = cfg.mask_ratio if mask_ratio is None else mask_ratio
    schedule = cfg.schedule()
    backbone.freeze(True)
    adapters.check_bound(backbone)
    opt = Adam(adapters.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    rng = np.random.default_rng(seed)
    label = new_class_index(backbone)
    losses = []
    t0 = time.perf_counter()
    for step in range(steps):
        x0, _, cond = data.batch(cfg.batch, rng)
        batch = Batch(x0, np.full(len(x0), label), cond if adapters.cond_gate is not None else None)
        losses.append(train_step(backbone, adapters, batch, schedule, opt, rng, mask_ratio, step=step))
    return {"losses": losses, "seconds": time.perf_counter() - t0, "steps": steps}


def new_class_index(backbone: Backbone) -> int:
    """Index of the first row appended after the unconditional row."""
    return backbone.class_table.uncond_index + 1


# -- evaluation ----------------------------------------------------------------

def generate(cfg: RunConfig, backbone: Backbone, adapters, class_index, n: int, seed: int,
             cond_image=None) -> np.ndarray:
    return sample(backbone, adapters, cfg.sampler_config(seed), class_index, n, cfg.schedule(), cond_image)


def evaluate(cfg: RunConfig, backbone: Backbone, adapters, class_index, data: ToyDataset, seed: int,
             n: int | None = None) -> dict:
    n = n or cfg.n_eval
    cond = data.eval_cond[:n] if (data.eval_cond is not None and adapters is not None
                                  and adapters.cond_gate is not None) else None
    xs = generate(cfg, backbone, adapters, class_index, n, seed, cond)
    target = data.eval_points(n)
    flat = xs.reshape(n, -1)
    report = {"energy_distance": energy_distance(flat, target), "mmd": mmd_rbf(flat, target), "n": n}
    if data.is_points:
        report["coverage"] = mode_coverage(flat, data.mixture.means, radius=0.3).tolist()
    return report


def adapter_report(backbone: Backbone, adapters: AdapterSet) -> dict:
    total = backbone.n_params()
    n = adapters.n_params()
    combined, relative = trainable_fraction(total, n)
    return {"backbone_params": total, "adapter_params": n, "trainable_pct": combined,
            "trainable_pct_of_backbone": relative}


# -- ablation and counting ----------------------------------------------------

REFERENCE_ABLATION_PARAMS = {"b-only": 0.48e6, "a-only": 0.48e6, "branch-only": 47.7e6, "full": 47.7e6}
REFERENCE_RANK_PARAMS = {1: 0.77e6, 4: 3.01e6, 16: 11.9e6, 64: 48.7e6}


def reference_count(variant: str = "full", d_rank: int = 64) -> int:
    return count_params(arch_param_count_model(DIT_XL), "affiner", d_rank, variant)


def ablate(cfg: RunConfig, backbone: Backbone, seeds=(0,)) -> list[dict]:
    """One row per (variant, rank) with equal budgets and seeds."""
    data = make_dataset(cfg, cfg.tasks[0], seed_offset=1)
    label = new_class_index(backbone)
    rows = []
    base_rank = cfg.rank_for(backbone.arch)
    plan = [(v, base_rank) for v in cfg.variants] + [("full", r) for r in cfg.ranks if r != base_rank]
    for variant, rank in plan:
        for seed in seeds:
            s = new_adapter_set(cfg, backbone, f"{variant}-d{rank}-s{seed}", seed, variant=variant, d_rank=rank)
            adapt(cfg, backbone, data, s, seed)
            metric = evaluate(cfg, backbone, s, label, data, seed=seed)
            rows.append({
                "variant": variant, "d_rank": rank, "seed": seed, "params": s.n_params(),
                # variant rows are counted at DiT-XL's own default rank
                "dit_xl_params": reference_count(variant, default_rank(DIT_XL.hidden) if rank == base_rank else rank),
                "reference_params": (REFERENCE_ABLATION_PARAMS.get(variant) if rank == base_rank
                                     else REFERENCE_RANK_PARAMS.get(rank)),
                "energy_distance": metric["energy_distance"], "mmd": metric["mmd"],
            })
    return rows


def count_table(arch: ArchConfig, d_rank: int, lora_rank: int | None = None) -> list[dict]:
    """Per-layer counts for every method, plus a totals row."""
    model = arch_param_count_model(arch)
    lora_rank = lora_rank or d_rank
    rows = []
    for rec in model.wrapped():
        rows.append({
            "layer_id": rec.layer_id, "m": rec.m, "n": rec.n,
            "affiner": layer_param_count(rec, "affiner", d_rank),
            "branch": layer_param_count(rec, "branch", d_rank),
            "lora": layer_param_count(rec, "lora", lora_rank),
            "bias_only": layer_param_count(rec, "bias-only"),
        })
    total = {"layer_id": "TOTAL", "m": "", "n": ""}
    for key in ("affiner", "branch", "lora", "bias_only"):
        total[key] = sum(r[key] for r in rows)
    rows.append(total)
    return rows


def compare_backbones(cfg: RunConfig, seeds=(0,)) -> list[dict]:
    """Same pretrain/adapt protocol on a transformer and a CNN of similar size.

    Reported only; which backbone adapts better is an empirical question.
    """
    rows = []
    base = make_dataset(cfg, cfg.dataset)
    task = make_dataset(cfg, cfg.tasks[0], seed_offset=1)
    for name in ("image-dit", "image-cnn"):
        run = RunConfig.from_dict({**asdict(cfg), "arch": name})
        bb, pre = pretrain(run, base)
        uc = bb.class_table.uncond_index
        for seed in seeds:
            frozen = evaluate(run, bb, None, uc, task, seed)
            s = new_adapter_set(run, bb, f"{name}-s{seed}", seed)
            adapt(run, bb, task, s, seed)
            adapted = evaluate(run, bb, s, new_class_index(bb), task, seed)
            rows.append({"backbone": name, "seed": seed, "backbone_params": bb.n_params(),
                         "adapter_params": s.n_params(), "frozen_energy_distance": frozen["energy_distance"],
                         "adapted_energy_distance": adapted["energy_distance"], "adapted_mmd": adapted["mmd"],
                         "pretrain_seconds": pre["seconds"]})
    return rows


__all__ = [
    "RunConfig", "pretrain", "adapt", "evaluate", "ablate", "count_table", "new_adapter_set",
    "new_class_index", "make_dataset", "adapter_report", "generate", "compare_backbones", "DivergenceError",
    "VARIANTS",
]
