"""Adapter parameter counts for DiT-XL/2 next to the published reference figures."""

from affinekit.affiner import count_params
from affinekit.backbone import arch_param_count_model
from affinekit.config import DIT_XL
from affinekit.harness.experiments import REFERENCE_ABLATION_PARAMS, REFERENCE_RANK_PARAMS


def main():
    model = arch_param_count_model(DIT_XL)
    print(f"DiT-XL/2: {len(model.wrapped())} wrapped layers")
    rows = [("bias-only", count_params(model, "bias-only"), REFERENCE_ABLATION_PARAMS["b-only"])]
    for d, ref in REFERENCE_RANK_PARAMS.items():
        rows.append((f"branch d={d}", count_params(model, "branch", d), ref))
        rows.append((f"full d={d}", count_params(model, "affiner", d), ref))
    rows.append(("lora r=64", count_params(model, "lora", 64), None))
    for name, n, ref in rows:
        rel = f"{(n / ref - 1) * 100:+6.1f}%" if ref else ""
        print(f"{name:>14}: {n / 1e6:8.3f}M  reference {ref / 1e6 if ref else float('nan'):6.2f}M  {rel}")


if __name__ == "__main__":
    main()
