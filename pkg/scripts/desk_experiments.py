"""Desk-scale robust-overfitting and WA x augmentation experiment.

Trains the packaged desk configuration with each augmentation and seed, then
prints best and final validation robust accuracy for the live and averaged
weights. Run directories are reused when their resolved config is unchanged.

    python scripts/desk_experiments.py --augs pad_crop,cutmix --seeds 0,1,2
"""
import argparse
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from robustaug.cli import desk_config, read_csv, run_dir, run_training
from robustaug.config import RunConfig


def train_one(doc: dict) -> str:
    cfg = RunConfig.from_dict(doc)
    out = run_dir(cfg)
    if (out / "summary.csv").exists() and (out / "config.yaml").read_text() == cfg.dump():
        return str(out)
    return str(run_training(cfg))


def curves(out: Path) -> dict:
    _, header, rows = read_csv(out / "train_log.csv")
    return {h: np.array([float(r[i]) for r in rows]) for i, h in enumerate(header)}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--augs", default="pad_crop,cutmix")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--output-dir", default="runs/desk")
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args()
    base = desk_config().replace(output_dir=args.output_dir)
    jobs = {}
    for aug in args.augs.split(","):
        for seed in map(int, args.seeds.split(",")):
            cfg = base.replace(name=f"desk-{aug}", seed=seed, augment=[aug])
            jobs[aug, seed] = cfg.to_dict()
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            dirs = dict(zip(jobs, pool.map(train_one, jobs.values())))
    else:
        dirs = {k: train_one(doc) for k, doc in jobs.items()}

    print(f"{'run':<22}{'best':>8}{'final':>8}{'gap pp':>8}{'EMA fin':>9}{'train s':>9}")
    gaps = {}
    for (aug, seed), d in sorted(dirs.items()):
        c = curves(Path(d))
        r = c["robust_val_pgd40"]
        secs = float((Path(d) / "timing.log").read_text().split()[1])
        gaps.setdefault(aug, []).append(r.max() - r[-1])
        print(f"{aug + '-' + str(seed):<22}{100 * r.max():8.2f}{100 * r[-1]:8.2f}{100 * (r.max() - r[-1]):8.2f}"
              f"{100 * c['robust_val_ema'][-1]:9.2f}{secs:9.0f}")
    for aug, g in gaps.items():
        print(f"{aug}: mean best-final gap {100 * np.mean(g):.2f} pp")


if __name__ == "__main__":
    main()
