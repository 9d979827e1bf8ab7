#!/usr/bin/env python3
"""Drive the full CLI pipeline on a synthetic toy dataset.

Generates a world, builds the vocabulary and prototype tree, trains the XE
stage, fine-tunes with SCST, evaluates, and captions one validation image
with an attention dump. Everything lands under --workdir.
"""

import argparse
import json
import os
import sys

from treecap.cli import main as treecap_main


def run(argv):
    print("+ treecap " + " ".join(argv))
    code = treecap_main(argv)
    if code != 0:
        sys.exit(code)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="toy_run")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--xe-epochs", type=int, default=40)
    parser.add_argument("--rl-epochs", type=int, default=5)
    args = parser.parse_args()

    d = args.workdir
    os.makedirs(d, exist_ok=True)
    config = {
        "seed": args.seed,
        "out_dir": os.path.join(d, "data"),
        "captions_path": os.path.join(d, "data", "captions.txt"),
        "concepts_path": os.path.join(d, "data", "concepts.txt"),
        "embeddings_path": os.path.join(d, "data", "embeddings.bin"),
        "vocab_path": os.path.join(d, "vocab.tsv"),
        "tree_path": os.path.join(d, "tree.json"),
        "train_dir": os.path.join(d, "data", "train"),
        "val_dir": os.path.join(d, "data", "val"),
        "checkpoint_path": os.path.join(d, "model.ckpt"),
        "log_path": os.path.join(d, "train.log"),
        "min_occurrences": 0,
        "d_model": 64, "heads": 8, "d_ff": 128,
        "decoder_layers": 2, "max_len": 12,
        "level_sizes": "6,3", "pa_counts": "3,6",
        "toy_groups": 3, "toy_concepts_per_group": 2,
        "toy_grid": 4, "toy_noise": 0.0,
        "toy_train": 60, "toy_val": 16,
        "xe_epochs": args.xe_epochs, "xe_batch_size": 2,
        "base_lr_other": 1e-3,
        "rl_epochs": args.rl_epochs, "rl_batch_size": 10,
        "k_samples": 5, "patience": 3,
    }
    config_path = os.path.join(d, "run.json")
    with open(config_path, "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2)

    run(["gen-synthetic", "--config", config_path])
    run(["build-vocab", "--config", config_path])
    run(["build-tree", "--config", config_path])
    run(["train-xe", "--config", config_path])
    run(["train-rl", "--config", config_path])
    run(["eval", "--config", config_path,
         "--log_path", os.path.join(d, "eval.log")])
    run(["inspect-tree", "--config", config_path,
         "--dot", os.path.join(d, "tree.dot"), "--level", "1"])
    run(["generate", "--config", config_path,
         "--features", os.path.join(d, "data", "val", "00000.grid"),
         "--attention-dump", os.path.join(d, "attention.json")])
    print(f"artifacts under {d}/")


if __name__ == "__main__":
    main()
