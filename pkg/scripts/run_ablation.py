#!/usr/bin/env python3
"""Compare aggregation-block schedules on a held-out toy split.

Trains three arms over several seeds — coarse-to-fine prototypes, no
prototype aggregation, and an equal-granularity stack — and reports
held-out CIDEr-D per seed with one-sided sign tests between arms.
"""

import argparse
import math

import numpy as np

from treecap.lexicon import Vocabulary
from treecap.model import CaptionModel, ModelConfig, schedule_from_counts
from treecap.prototypes import ClusterConfig, build_tree
from treecap.synthetic import ToyWorld, enumerate_dataset
from treecap.training import TrainConfig, evaluate_cider, train


def sign_test_p(wins: int, trials: int) -> float:
    return sum(math.comb(trials, i)
               for i in range(wins, trials + 1)) / 2 ** trials


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--epochs", type=int, default=80)
    args = parser.parse_args()

    world = ToyWorld(4, 3, feature_dim=64, noise_sigma=0.0, n_templates=1,
                     seed=0)
    full = enumerate_dataset(world)
    idx = np.random.default_rng(7).permutation(len(full))
    train_set = [full[i] for i in idx[:60]]
    holdout = [full[i] for i in idx[60:]]
    vocab = Vocabulary.build([c for s in full for c in s.captions],
                             min_occurrences=0)
    tree = build_tree(world.concept_embeddings, [12, 4], ClusterConfig(seed=0),
                      concept_tokens=world.concepts)

    arms = {"coarse-to-fine": [4, 12], "no-aggregation": [], "equal": [4, 4]}
    scores = {name: [] for name in arms}
    for seed in range(args.seeds):
        for name, counts in arms.items():
            schedule = schedule_from_counts(counts, tree) if counts else []
            model = CaptionModel(
                ModelConfig(vocab_size=len(vocab), d_model=64, heads=8,
                            d_ff=128, decoder_layers=2, max_len=12,
                            pa_schedule=schedule, prototype_mode="frozen",
                            seed=seed),
                tree if schedule else None)
            cfg = TrainConfig(xe_epochs=args.epochs, xe_batch_size=2,
                              base_lr_other=1e-3, patience=10_000, seed=seed)
            train(model, train_set, holdout[:4], vocab, cfg, stages=("xe",))
            score = evaluate_cider(model, holdout, vocab)
            scores[name].append(score)
            print(f"seed {seed} {name:>15}: {score:.4f}")

    print()
    for name, vals in scores.items():
        print(f"{name:>15}: mean {np.mean(vals):.4f} "
              f"scores {[round(v, 4) for v in vals]}")
    for a, b in (("coarse-to-fine", "no-aggregation"),
                 ("coarse-to-fine", "equal")):
        wins = sum(x > y for x, y in zip(scores[a], scores[b]))
        print(f"{a} > {b}: {wins}/{args.seeds} wins, "
              f"sign-test p = {sign_test_p(wins, args.seeds):.4f}")


if __name__ == "__main__":
    main()
