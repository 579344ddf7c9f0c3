"""Hits@1 and eval wall-clock against the number of candidates per source."""
import argparse

from seqalign.cli import Dataset, RunConfig, sweep
from seqalign.eval_bench import SyntheticParams, generate_synthetic, split_alignment
from seqalign.trainer import TrainerConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ks", default="1,2,5,10,20")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n", type=int, default=60)
    ap.add_argument("--episodes", type=int, default=200)
    args = ap.parse_args()

    task = generate_synthetic(SyntheticParams(n_entities=args.n), args.seed)
    train_set, valid, test = split_alignment(task.truth, [0.2, 0.1, 0.7], args.seed)
    data = Dataset(task.kg1, task.kg2, task.space, train_set, valid, test)
    cfg = RunConfig(trainer=TrainerConfig(episodes=args.episodes, step_size=1e-3), seed=args.seed).validate()
    print("k    hits@1  eval_ms  train_s")
    for row in sweep(data, cfg, "candidate_k", [int(k) for k in args.ks.split(",")]):
        print(f"{int(row['value']):<4d} {row['hits_at_1']:.3f}   {row['eval_seconds'] * 1e3:7.2f}  "
              f"{row['train_seconds']:.2f}")


if __name__ == "__main__":
    main()
