"""Expert-count sweep: full pipeline for N = 1..5, one table row per N."""
import argparse
import logging

from medaf import experiment as ex


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config")
    p.add_argument("--counts", default="1,2,3,4,5")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="runs/sweep")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig()
    cfg = cfg.replace(out_dir=args.out_dir, seed=args.seed)
    rows = ex.sweep_experts(cfg, [int(n) for n in args.counts.split(",")], progress=logging.info)
    print("\n| N | AUROC | closed-set acc | TNR@TPR95 | CAM cosine |")
    print("|---|---|---|---|---|")
    for r in rows:
        print(f"| {r.num_experts} | {r.auroc:.4f} | {r.closed_set_accuracy:.4f} | {r.tnr_at_tpr95:.4f} | "
              f"{r.cam_cosine:.4f} |")


if __name__ == "__main__":
    main()
