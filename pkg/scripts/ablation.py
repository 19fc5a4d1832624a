"""Variant and rank ablation on the 2D adaptation task, plus DiT-XL counts.

    python scripts/ablation.py --checkpoint runs/points/checkpoint.afnr --seeds 3
"""

import argparse
from pathlib import Path

from affinekit.harness import experiments as ex
from affinekit.harness.outputs import write_csv
from affinekit.registry import load_checkpoint


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--adapt-steps", type=int, default=1500)
    args = p.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    cfg = ex.RunConfig(adapt_steps=args.adapt_steps)
    bb = load_checkpoint(args.checkpoint)
    rows = ex.ablate(cfg, bb, seeds=range(args.seeds))
    write_csv(out / "ablation.csv", rows)
    print(f"{'variant':>11} {'d':>3} {'seed':>4} {'params':>8} {'DiT-XL':>12} {'reference':>10} {'energy':>8}")
    for r in rows:
        ref = f"{r['reference_params'] / 1e6:.2f}M" if r["reference_params"] else "-"
        print(f"{r['variant']:>11} {r['d_rank']:>3} {r['seed']:>4} {r['params']:>8} "
              f"{r['dit_xl_params'] / 1e6:>11.2f}M {ref:>10} {r['energy_distance']:>8.4f}")


if __name__ == "__main__":
    main()
