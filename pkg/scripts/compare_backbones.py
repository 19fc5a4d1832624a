"""Same pretrain/adapt protocol on the small DiT and CNN image denoisers (reported, not asserted).

    python scripts/compare_backbones.py --steps 300 --adapt-steps 200 --image-size 16
"""

import argparse
from pathlib import Path

from affinekit.harness import experiments as ex
from affinekit.harness.outputs import write_csv


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/compare")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--adapt-steps", type=int, default=200)
    p.add_argument("--image-size", type=int, default=16)
    p.add_argument("--n-eval", type=int, default=200)
    args = p.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = ex.RunConfig(dataset="images:disks", tasks=["images:rings"], steps=args.steps,
                       adapt_steps=args.adapt_steps, batch=32, n_train=2000, n_eval=args.n_eval,
                       image_size=args.image_size, sample_steps=50, d_rank=2)
    rows = ex.compare_backbones(cfg)
    write_csv(out / "compare.csv", rows)
    for r in rows:
        print(f"{r['backbone']:>9}: {r['backbone_params']:>8} params, adapter {r['adapter_params']:>6}, "
              f"energy distance {r['frozen_energy_distance']:.2f} -> {r['adapted_energy_distance']:.2f}")


if __name__ == "__main__":
    main()
