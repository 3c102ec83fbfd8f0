"""Initialise a micro MedNeXt, save it, and report parameter counts under a freeze plan."""

import argparse
from pathlib import Path

import numpy as np

from emednext.model import FreezePlan, MicroMedNeXt, ModelConfig, init_params, model_forward, param_groups, \
    plan_freeze, save_model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", type=Path)
    ap.add_argument("--base-channels", type=int, default=4)
    ap.add_argument("--stages", type=int, default=4)
    ap.add_argument("--unfreeze-k", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = ModelConfig(base_channels=args.base_channels, num_stages=args.stages)
    params = init_params(cfg, seed=args.seed)
    save_model(MicroMedNeXt(cfg, params), args.out)
    total = sum(v.size for v in params.values())
    print(f"saved {len(params)} tensors, {total} parameters to {args.out}")

    plan = FreezePlan(unfreeze_last_k_decoder_blocks=args.unfreeze_k)
    trainable, frac = plan_freeze(params, plan)
    print(f"freeze plan k={args.unfreeze_k}: {len(trainable)} trainable tensors, {100 * frac:.1f}% of parameters")
    for group, names in param_groups(trainable, plan).items():
        print(f"  {group:8s} lr x{plan.lr_multipliers.get(group, 1.0):<4} {len(names)} tensors")

    x = np.random.default_rng(args.seed).standard_normal((cfg.in_channels,) + (2 * cfg.divisor,) * 3)
    shapes = [o.shape for o in model_forward(x.astype(np.float32), cfg, params)]
    print("output shapes for input", x.shape, "->", shapes)


if __name__ == "__main__":
    main()
