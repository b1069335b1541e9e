"""Run the ablation grid over several seeds and print per-variant means.

    python3 scripts/ablation_table.py --seeds 0,1,2,3,4 --out-dir runs/ablation
"""
import argparse
import logging

import numpy as np

from medaf import experiment as ex


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON config (defaults when omitted)")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--variants", default="baseline,single_expert,no_diversity,mean_fusion,medaf")
    p.add_argument("--out-dir", default="runs/ablation")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig()
    cfg = cfg.replace(out_dir=args.out_dir)
    variants = args.variants.split(",")
    rows = ex.ablate(cfg, [int(s) for s in args.seeds.split(",")], variants, progress=logging.info)

    print(f"\n| variant | AUROC | closed-set acc | macro-F1 | CAM cosine |")
    print("|---|---|---|---|---|")
    for name in variants:
        sel = [r for r in rows if r.name == name]
        col = lambda attr: np.array([getattr(r, attr) for r in sel], dtype=float)
        cells = [f"{col(a).mean():.4f} ± {col(a).std():.4f}"
                 for a in ("auroc", "closed_set_accuracy", "macro_f1", "cam_cosine")]
        print(f"| {name} | " + " | ".join(cells) + " |")


if __name__ == "__main__":
    main()
