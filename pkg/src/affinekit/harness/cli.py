"""Command line driver: ``affinekit {pretrain,adapt,sample,ablate,count,compare}``.

Every command reads an optional ``key = value`` run file (``--config``), applies
``--seed``/``--out``/``--set`` overrides, writes its outputs to the run
directory, and finishes with ``manifest.txt``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..autodiff import NumericalError
from ..backbone import build_backbone
from ..config import ConfigError, parse_value
from ..registry import (AdapterFileError, load_adapter, load_checkpoint, save_adapter, save_checkpoint)
from . import experiments as ex
from .outputs import scatter_image, tile_grid, write_csv, write_manifest, write_ppm

log = logging.getLogger("affinekit")


def _load_config(args) -> ex.RunConfig:
    values = asdict(ex.RunConfig.load(args.config)) if args.config else asdict(ex.RunConfig())
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}", source="--set")
        key, value = (p.strip() for p in item.split("=", 1))
        values[key] = parse_value(value)
    if args.seed is not None:
        values["seed"] = args.seed
    if args.out is not None:
        values["out"] = args.out
    values["command"] = args.command
    return ex.RunConfig.from_dict(values, args.config or "<defaults>")


def _need(path: str, what: str) -> str:
    if not path:
        raise ConfigError(f"{what} path is required (set it in the config or with --set)")
    return path


def cmd_pretrain(cfg: ex.RunConfig, out: Path) -> tuple[list[Path], dict]:
    data = ex.make_dataset(cfg, cfg.dataset)
    ckpt = out / "checkpoint.afnr"
    try:
        bb, report = ex.pretrain(cfg, data)
    except ex.DivergenceError as exc:
        save_checkpoint(exc.backbone, ckpt)
        log.error("diverged at step %s; last good weights written to %s", exc.step, ckpt)
        raise
    fp = save_checkpoint(bb, ckpt)
    files = [ckpt, write_csv(out / "losses.csv", [{"step": i, "loss": v} for i, v in enumerate(report["losses"])])]
    rows = []
    if cfg.n_eval:
        uc = bb.class_table.uncond_index
        init = build_backbone(bb.arch, cfg.seed)
        for label, model in (("untrained", init), ("trained", bb)):
            m = ex.evaluate(cfg, model, None, uc, data, cfg.seed)
            rows.append({"model": label, "energy_distance": m["energy_distance"], "mmd": m["mmd"]})
        files.append(write_csv(out / "metrics.csv", rows))
    print(f"checkpoint {ckpt} fingerprint {fp.hex()[:16]} params {bb.n_params()}")
    for r in rows:
        print(f"  {r['model']:>9}: energy distance {r['energy_distance']:.4f}")
    return files, {"fingerprint": fp.hex(), "seconds": round(report["seconds"], 2)}


def cmd_adapt(cfg: ex.RunConfig, out: Path) -> tuple[list[Path], dict]:
    bb = load_checkpoint(_need(cfg.checkpoint, "checkpoint"))
    bb.freeze(True)
    before = bb.fingerprint()
    files, rows = [], []
    for task in cfg.tasks:
        data = ex.make_dataset(cfg, task, seed_offset=1)
        s = ex.new_adapter_set(cfg, bb, task, cfg.seed)
        report = ex.adapt(cfg, bb, data, s, cfg.seed)
        path = out / f"{task.replace(':', '_')}.afnr"
        save_adapter(s, path)
        files += [path, write_csv(out / f"losses_{task.replace(':', '_')}.csv",
                                  [{"step": i, "loss": v} for i, v in enumerate(report["losses"])])]
        row = {"task": task, **ex.adapter_report(bb, s)}
        if cfg.n_eval:
            frozen = ex.evaluate(cfg, bb, None, bb.class_table.uncond_index, data, cfg.seed)
            adapted = ex.evaluate(cfg, bb, s, ex.new_class_index(bb), data, cfg.seed)
            row.update(frozen_energy_distance=frozen["energy_distance"],
                       adapted_energy_distance=adapted["energy_distance"], adapted_mmd=adapted["mmd"])
        rows.append(row)
        print(f"{task}: {s.n_params()} adapter params ({row['trainable_pct']:.3f}% trainable)"
              + (f", energy distance {row['frozen_energy_distance']:.4f} -> {row['adapted_energy_distance']:.4f}"
                 if cfg.n_eval else ""))
    after = bb.fingerprint()
    if after != before:
        raise RuntimeError("backbone changed during adaptation")
    files.append(write_csv(out / "metrics.csv", rows))
    return files, {"backbone_sha256_before": before.hex(), "backbone_sha256_after": after.hex()}


def cmd_sample(cfg: ex.RunConfig, out: Path) -> tuple[list[Path], dict]:
    bb = load_checkpoint(_need(cfg.checkpoint, "checkpoint"))
    s = load_adapter(cfg.adapter, bb) if cfg.adapter else None
    label = ex.new_class_index(bb) if s is not None and s.n_new_classes else bb.class_table.uncond_index
    if cfg.count == 0:
        return [], {"class_index": label, "count": 0}
    xs = ex.generate(cfg, bb, s, label, cfg.count, cfg.seed)
    files = []
    if bb.arch.channels == 1 and bb.arch.height * bb.arch.width == 2:
        pts = xs.reshape(len(xs), 2)
        files.append(write_csv(out / "points.csv", [{"x": float(p[0]), "y": float(p[1])} for p in pts]))
        files.append(write_ppm(out / "grid.ppm", scatter_image(pts)))
    else:
        for i, img in enumerate(xs):
            files.append(write_ppm(out / f"sample_{i:04d}.ppm", tile_grid(img[None], pad=0)))
        files.append(write_ppm(out / "grid.ppm", tile_grid(xs)))
    print(f"wrote {cfg.count} samples (class {label}) to {out}")
    return files, {"class_index": label, "count": cfg.count}


def cmd_ablate(cfg: ex.RunConfig, out: Path) -> tuple[list[Path], dict]:
    bb = load_checkpoint(_need(cfg.checkpoint, "checkpoint"))
    rows = ex.ablate(cfg, bb, seeds=cfg.seeds)
    for r in rows:
        print(f"{r['variant']:>11} d={r['d_rank']:<3} seed={r['seed']} params={r['params']:>7} "
              f"energy distance {r['energy_distance']:.4f}")
    return [write_csv(out / "ablation.csv", rows)], {}


def cmd_count(cfg: ex.RunConfig, out: Path) -> tuple[list[Path], dict]:
    arch = cfg.arch_config()
    d = cfg.rank_for(arch)
    rows = ex.count_table(arch, d)
    total = rows[-1]
    print(f"{len(rows) - 1} wrapped layers, d_rank {d}")
    for key in ("affiner", "branch", "lora", "bias_only"):
        print(f"  {key:>9}: {total[key]:>12,d}")
    return [write_csv(out / "count.csv", rows)], {"d_rank": d}


def cmd_compare(cfg: ex.RunConfig, out: Path) -> tuple[list[Path], dict]:
    rows = ex.compare_backbones(cfg, seeds=cfg.seeds)
    for r in rows:
        print(f"{r['backbone']:>9} seed={r['seed']} energy distance {r['frozen_energy_distance']:.3f} "
              f"-> {r['adapted_energy_distance']:.3f}")
    return [write_csv(out / "compare.csv", rows)], {}


COMMANDS = {"pretrain": cmd_pretrain, "adapt": cmd_adapt, "sample": cmd_sample, "ablate": cmd_ablate,
            "count": cmd_count, "compare": cmd_compare}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="affinekit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__name__.replace("cmd_", "") + " command")
        p.add_argument("--config", help="run file with key = value lines")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _load_config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text())
        files, extra = COMMANDS[args.command](cfg, out)
    except (ConfigError, AdapterFileError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    write_manifest(out, args.command, cfg.to_text(), cfg.seeds, [out / "config.txt", *files],
                   {**extra, "outputs": len(files)})
    return 0


if __name__ == "__main__":
    sys.exit(main())
