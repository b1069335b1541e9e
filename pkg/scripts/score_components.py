"""Train one model and report how each score component separates knowns from unknowns.

Prints magnitude and AUROC for s_lg, s_ft and their combination at several
gamma values. Useful for seeing which term dominates the combined score.
"""
import argparse

import numpy as np

from medaf import experiment as ex
from medaf.metrics import auroc


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", default="medaf")
    p.add_argument("--gammas", default="0,0.005,0.01,0.05,0.5")
    p.add_argument("--out-dir", default="runs/score_components")
    args = p.parse_args()

    cfg = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig()
    cfg = cfg.replace(out_dir=args.out_dir, seed=args.seed, **ex.ablation_variants(cfg)[args.variant])
    split = ex.load_split(cfg)
    model = ex.train(cfg, split).model
    mode = cfg.ablation.fusion_mode
    k = ex.score_images(model, split.test_known.images, 0.0, mode)
    u = ex.score_images(model, split.test_unknown.images, 0.0, mode)

    for name in ("s_lg", "s_ft"):
        kv, uv = getattr(k, name), getattr(u, name)
        print(f"{name}: known mean {kv.mean():9.3f}  unknown mean {uv.mean():9.3f}  AUROC {auroc(kv, uv):.4f}")
    for g in (float(x) for x in args.gammas.split(",")):
        print(f"gamma={g:<6g} AUROC {auroc(k.s_lg + g * k.s_ft, u.s_lg + g * u.s_ft):.4f}")
    ratio = np.median(k.s_ft) / np.median(np.abs(k.s_lg))
    print(f"median s_ft / |s_lg| on knowns: {ratio:.1f}")


if __name__ == "__main__":
    main()
