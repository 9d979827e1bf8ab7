"""Command-line surface: reproducible experiments wired from config files.

Every command takes `--config run.json` plus `--key value` overrides for any
RunConfig field, and writes a manifest (config hash, seed, content hashes of
inputs and outputs) next to its primary output. Exit codes: 0 success,
2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NumericsError, Tensor
from .lexicon import (ConceptList, DataError, Vocabulary, load_embeddings,
                      word_tokens, write_embeddings_binary)
from .metrics import bleu, build_idf, corpus_cider_d
from .model import (CaptionModel, ConfigError, ModelConfig, ToyEncoderConfig,
                    greedy_decode, load_checkpoint, load_grid_features,
                    save_checkpoint, save_grid_features, schedule_from_counts)
from .prototypes import (ClusterConfig, ClusterError, build_tree,
                         nearest_concepts, tree_from_json, tree_to_dot,
                         tree_to_json)
from .synthetic import ToyWorld, gen_toy_dataset
from .training import TrainConfig, TrainingError, train


@dataclass
class RunConfig:
    """Complete experiment description; unknown keys are rejected."""

    # reproducibility
    seed: int = 0
    checked_mode: bool = False
    # paths
    captions_path: str = "captions.txt"
    vocab_path: str = "vocab.tsv"
    concepts_path: str = ""            # empty: all non-special vocab words
    embeddings_path: str = "embeddings.bin"
    tree_path: str = "tree.json"
    train_dir: str = "train"
    val_dir: str = "val"
    checkpoint_path: str = "model.ckpt"
    log_path: str = "train.log"
    # vocabulary
    min_occurrences: int = 5
    # clustering
    cluster_method: str = "kmeans"
    level_sizes: str = "2000,800"      # finest first, comma separated
    cluster_max_iters: int = 100
    cluster_tol: float = 1e-8
    cluster_n_init: int = 4
    # model
    d_model: int = 64
    heads: int = 8
    d_ff: int = 128
    decoder_layers: int = 2
    max_len: int = 20
    pa_counts: str = ""                # per-block prototype counts, coarse->fine
    prototype_mode: str = "trainable"
    use_toy_encoder: bool = False
    image_size: int = 16
    patch_size: int = 8
    encoder_blocks: int = 1
    # training
    xe_epochs: int = 20
    rl_epochs: int = 30
    xe_batch_size: int = 50
    rl_batch_size: int = 10
    base_lr_encoder: float = 4e-5
    base_lr_other: float = 4e-4
    rl_lr_encoder: float = 2e-6
    rl_lr_other: float = 2e-5
    k_samples: int = 5
    temperature: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    grad_clip: float = 0.0             # 0 disables clipping
    patience: int = 5
    # synthetic world
    toy_groups: int = 4
    toy_concepts_per_group: int = 3
    toy_grid: int = 4
    toy_noise: float = 0.1
    toy_templates: int = 1
    toy_train: int = 40
    toy_val: int = 16
    out_dir: str = "toy"

    @classmethod
    def from_file(cls, path: str | None, overrides: dict) -> "RunConfig":
        values = {}
        if path:
            try:
                with open(path, encoding="utf-8") as fh:
                    values = json.load(fh)
            except FileNotFoundError as exc:
                raise DataError(f"config file not found: {path}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path} is not valid JSON: {exc}")
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values.update({k: v for k, v in overrides.items() if v is not None})
        coerced = {}
        for k, v in values.items():
            ftype = known[k].type
            try:
                if ftype == "bool" and isinstance(v, str):
                    coerced[k] = v.lower() in ("1", "true", "yes")
                elif ftype == "int":
                    coerced[k] = int(v)
                elif ftype == "float":
                    coerced[k] = float(v)
                else:
                    coerced[k] = v
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for config key {k!r}: {v!r}") from exc
        return cls(**coerced)

    def level_size_list(self) -> list[int]:
        try:
            return [int(s) for s in self.level_sizes.split(",") if s.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad level_sizes {self.level_sizes!r}") from exc

    def pa_count_list(self) -> list[int]:
        try:
            return [int(s) for s in self.pa_counts.split(",") if s.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad pa_counts {self.pa_counts!r}") from exc


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(command: str, config: RunConfig, inputs: list, outputs: list,
                   manifest_path) -> None:
    doc = {
        "command": command,
        "config": dataclasses.asdict(config),
        "config_hash": hashlib.sha256(
            json.dumps(dataclasses.asdict(config), sort_keys=True).encode()
        ).hexdigest(),
        "seed": config.seed,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
    }
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require(path, producer: str):
    if not os.path.exists(path):
        raise DataError(f"missing prerequisite {path!r}; run `treecap {producer}` "
                        "first")
    return path


# -- dataset directory format ------------------------------------------------

def save_dataset(dirpath, samples) -> list[str]:
    os.makedirs(dirpath, exist_ok=True)
    written = []
    cap_path = os.path.join(dirpath, "captions.tsv")
    with open(cap_path, "w", encoding="utf-8") as fh:
        for i, s in enumerate(samples):
            grid_path = os.path.join(dirpath, f"{i:05d}.grid")
            n = s.features.shape[0]
            side = int(round(n ** 0.5))
            layout = (side, side) if side * side == n else None
            save_grid_features(grid_path, s.features, layout)
            written.append(grid_path)
            for cap in s.captions:
                fh.write(f"{i:05d}\t{cap}\n")
    written.append(cap_path)
    return written


@dataclass
class DiskSample:
    features: np.ndarray
    captions: list[str]


def load_dataset(dirpath) -> list[DiskSample]:
    cap_path = _require(os.path.join(dirpath, "captions.tsv"), "gen-synthetic")
    caps: dict[str, list[str]] = {}
    with open(cap_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise DataError(f"{cap_path}: malformed line {lineno + 1}")
            caps.setdefault(parts[0], []).append(parts[1])
    samples = []
    for sid in sorted(caps):
        feats, _ = load_grid_features(os.path.join(dirpath, f"{sid}.grid"))
        samples.append(DiskSample(features=feats, captions=caps[sid]))
    return samples


# -- command implementations ----------------------------------------------------

def cmd_gen_synthetic(config: RunConfig) -> None:
    world = ToyWorld(n_groups=config.toy_groups,
                     concepts_per_group=config.toy_concepts_per_group,
                     grid_h=config.toy_grid, grid_w=config.toy_grid,
                     feature_dim=config.d_model,
                     noise_sigma=config.toy_noise,
                     n_templates=config.toy_templates,
                     seed=config.seed)
    train_set, val_set = gen_toy_dataset(world, config.toy_train, config.toy_val)
    out = config.out_dir
    os.makedirs(out, exist_ok=True)
    outputs = save_dataset(os.path.join(out, "train"), train_set)
    outputs += save_dataset(os.path.join(out, "val"), val_set)

    corpus_path = os.path.join(out, "captions.txt")
    with open(corpus_path, "w", encoding="utf-8") as fh:
        for cap in world.corpus():
            fh.write(cap + "\n")
    concepts_path = os.path.join(out, "concepts.txt")
    ConceptList(world.concepts).save(concepts_path)
    emb_path = os.path.join(out, "embeddings.bin")
    write_embeddings_binary(emb_path, world.concepts, world.concept_embeddings)
    world_path = os.path.join(out, "world.json")
    with open(world_path, "w", encoding="utf-8") as fh:
        json.dump({"concepts": world.concepts,
                   "cell_of": world.cell_of.tolist(),
                   "group_of": world.group_of.tolist(),
                   "grid": [world.grid_h, world.grid_w]}, fh, indent=2)
    outputs += [corpus_path, concepts_path, emb_path, world_path]
    write_manifest("gen-synthetic", config, [], outputs,
                   os.path.join(out, "manifest.json"))
    print(f"wrote toy dataset under {out}/ "
          f"({config.toy_train} train / {config.toy_val} val samples)")


def cmd_build_vocab(config: RunConfig) -> None:
    path = _require(config.captions_path, "gen-synthetic")
    with open(path, encoding="utf-8") as fh:
        vocab = Vocabulary.build(fh, config.min_occurrences)
    vocab.save(config.vocab_path)
    write_manifest("build-vocab", config, [path], [config.vocab_path],
                   config.vocab_path + ".manifest.json")
    print(f"vocabulary of {len(vocab)} tokens -> {config.vocab_path}")


def _load_concepts(config: RunConfig) -> ConceptList:
    if config.concepts_path:
        return ConceptList.from_file(_require(config.concepts_path,
                                              "gen-synthetic"))
    vocab = Vocabulary.load(_require(config.vocab_path, "build-vocab"))
    return ConceptList.from_vocabulary(vocab)


def cmd_build_tree(config: RunConfig) -> None:
    concepts = _load_concepts(config)
    emb_path = _require(config.embeddings_path, "gen-synthetic")
    X, missing = load_embeddings(emb_path, concepts)
    if missing:
        print(f"warning: {len(missing)} concepts missing embeddings",
              file=sys.stderr)
    cluster = ClusterConfig(method=config.cluster_method, seed=config.seed,
                            max_iters=config.cluster_max_iters,
                            tol=config.cluster_tol,
                            n_init=config.cluster_n_init)
    tree = build_tree(X, config.level_size_list(), cluster,
                      concept_tokens=concepts.tokens)
    tree.meta["concept_embeddings"] = X
    with open(config.tree_path, "w", encoding="utf-8") as fh:
        fh.write(tree_to_json(tree))
    inputs = [emb_path] + ([config.concepts_path] if config.concepts_path
                           else [config.vocab_path])
    write_manifest("build-tree", config, inputs, [config.tree_path],
                   config.tree_path + ".manifest.json")
    print(f"tree with level sizes {tree.level_sizes} -> {config.tree_path}")


def _model_config(config: RunConfig, vocab_size: int, tree) -> ModelConfig:
    counts = config.pa_count_list()
    schedule = schedule_from_counts(counts, tree) if counts else []
    encoder = (ToyEncoderConfig(config.image_size, config.patch_size,
                                config.encoder_blocks)
               if config.use_toy_encoder else None)
    return ModelConfig(vocab_size=vocab_size, d_model=config.d_model,
                       heads=config.heads, d_ff=config.d_ff,
                       decoder_layers=config.decoder_layers,
                       max_len=config.max_len, pa_schedule=schedule,
                       prototype_mode=config.prototype_mode,
                       encoder=encoder, seed=config.seed)


def _train_config(config: RunConfig) -> TrainConfig:
    return TrainConfig(
        xe_epochs=config.xe_epochs, rl_epochs=config.rl_epochs,
        xe_batch_size=config.xe_batch_size, rl_batch_size=config.rl_batch_size,
        base_lr_encoder=config.base_lr_encoder,
        base_lr_other=config.base_lr_other,
        rl_lr_encoder=config.rl_lr_encoder, rl_lr_other=config.rl_lr_other,
        k_samples=config.k_samples, temperature=config.temperature,
        adam_beta1=config.adam_beta1, adam_beta2=config.adam_beta2,
        adam_eps=config.adam_eps,
        grad_clip=config.grad_clip or None,
        patience=config.patience, seed=config.seed)


def _read_tree(config: RunConfig):
    with open(_require(config.tree_path, "build-tree"), encoding="utf-8") as fh:
        return tree_from_json(fh.read())


def _load_tree(config: RunConfig):
    return _read_tree(config) if config.pa_count_list() else None


def _run_stage(config: RunConfig, stage: str) -> None:
    vocab = Vocabulary.load(_require(config.vocab_path, "build-vocab"))
    train_set = load_dataset(config.train_dir)
    val_set = load_dataset(config.val_dir)
    inputs = [config.vocab_path]
    if stage == "rl":
        # resume the architecture recorded in the warm-start checkpoint
        ckpt = _require(config.checkpoint_path, "train-xe")
        model_cfg, arrays, _ = load_checkpoint(ckpt)
        tree = _read_tree(config) if model_cfg.pa_schedule else None
        model = CaptionModel(model_cfg, tree)
        model.load_state(arrays)
        inputs.append(ckpt)
    else:
        tree = _load_tree(config)
        model = CaptionModel(_model_config(config, len(vocab), tree), tree)
    result = train(model, train_set, val_set, vocab, _train_config(config),
                   stages=(stage,), log_path=config.log_path,
                   checkpoint_path=config.checkpoint_path, quiet=False)
    write_manifest(f"train-{stage}", config, inputs,
                   [config.checkpoint_path, config.log_path],
                   config.checkpoint_path + f".{stage}.manifest.json")
    print(f"best val CIDEr-D {result.best_cider:.3f} "
          f"-> {config.checkpoint_path}")


def cmd_train_xe(config: RunConfig) -> None:
    _run_stage(config, "xe")


def cmd_train_rl(config: RunConfig) -> None:
    _run_stage(config, "rl")


def _load_model(config: RunConfig) -> tuple[CaptionModel, Vocabulary]:
    vocab = Vocabulary.load(_require(config.vocab_path, "build-vocab"))
    ckpt = _require(config.checkpoint_path, "train-xe")
    model_cfg, arrays, _ = load_checkpoint(ckpt)
    tree = _read_tree(config) if model_cfg.pa_schedule else None
    model = CaptionModel(model_cfg, tree)
    model.load_state(arrays)
    return model, vocab


def cmd_eval(config: RunConfig) -> None:
    model, vocab = _load_model(config)
    val_set = load_dataset(config.val_dir)
    cands, refs = [], []
    for s in val_set:
        cands.append(vocab.decode(greedy_decode(model, s.features)).split())
        refs.append([word_tokens(c) for c in s.captions])
    idf = build_idf(refs)
    cider_mean, per_image = corpus_cider_d(cands, refs, idf)
    bleu_score = bleu(cands, refs)
    report_path = config.log_path
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"metric": "cider_d", "corpus": cider_mean}) + "\n")
        fh.write(json.dumps({"metric": "bleu4", "corpus": bleu_score}) + "\n")
        for i, score in enumerate(per_image):
            fh.write(json.dumps({"metric": "cider_d", "image": i,
                                 "score": score}) + "\n")
    write_manifest("eval", config, [config.checkpoint_path, config.vocab_path],
                   [report_path], report_path + ".manifest.json")
    print(f"CIDEr-D {cider_mean:.3f}  BLEU-4 {bleu_score:.3f} -> {report_path}")


def cmd_generate(config: RunConfig, features_path: str,
                 attention_dump: str | None) -> None:
    model, vocab = _load_model(config)
    feats, layout = load_grid_features(_require(features_path, "gen-synthetic"))
    if feats.shape[1] != model.config.d_model:
        raise DataError(f"feature width {feats.shape[1]} does not match model "
                        f"width {model.config.d_model}")
    ids = greedy_decode(model, feats)
    print(vocab.decode(ids))
    if attention_dump:
        from .lexicon import BOS_ID
        with ad.no_grad():
            enhanced = model.aggregate(Tensor(feats[None]))
            model.decoder_logits(enhanced, np.array([[BOS_ID] + ids]),
                                 collect_attention=True)
        attn = model.last_cross_attention[0]  # (T, N), head-averaged
        doc = [{"word": vocab.id_to_token[tok],
                "attention": attn[t + 1].tolist(),
                "layout": layout}
               for t, tok in enumerate(ids)]
        with open(attention_dump, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
        write_manifest("generate", config, [features_path],
                       [attention_dump], attention_dump + ".manifest.json")


def cmd_inspect_tree(config: RunConfig, level: int | None, proto: int | None,
                     top_k: int, dot_path: str | None) -> None:
    with open(_require(config.tree_path, "build-tree"), encoding="utf-8") as fh:
        tree = tree_from_json(fh.read())
    print(f"levels: {tree.level_sizes} (finest first), "
          f"{len(tree.concept_members)} concepts, "
          f"method={tree.meta.get('method')}")
    if dot_path:
        with open(dot_path, "w", encoding="utf-8") as fh:
            fh.write(tree_to_dot(tree))
        write_manifest("inspect-tree", config, [config.tree_path], [dot_path],
                       dot_path + ".manifest.json")
        print(f"DOT export -> {dot_path}")
    if level is not None:
        protos = ([proto] if proto is not None
                  else range(tree.level_sizes[level - 1]))
        for p in protos:
            toks = nearest_concepts(tree, level, p, top_k)
            print(f"L{level}/{p}: {' '.join(toks)}")


# -- argument parsing -----------------------------------------------------------

_COMMANDS = ("build-vocab", "build-tree", "train-xe", "train-rl", "eval",
             "generate", "inspect-tree", "gen-synthetic")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="treecap",
        description="Hierarchical concept prototypes for caption training. "
                    "Every config key below can come from --config JSON or be "
                    "overridden with --<key> <value>.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name, help=f"{name} (see config keys)")
        p.add_argument("--config", help="JSON config file (RunConfig keys)")
        for f in dataclasses.fields(RunConfig):
            p.add_argument(f"--{f.name}", dest=f.name, default=None,
                           metavar="V",
                           help=f"config key {f.name} (default: {f.default!r})")
        if name == "generate":
            p.add_argument("--features", required=True,
                           help="grid-feature file to caption")
            p.add_argument("--attention-dump", default=None,
                           help="write per-word head-averaged cross-attention "
                                "JSON here")
        if name == "inspect-tree":
            p.add_argument("--level", type=int, default=None)
            p.add_argument("--proto", type=int, default=None)
            p.add_argument("--top-k", type=int, default=10)
            p.add_argument("--dot", default=None, help="write DOT export here")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {f.name: getattr(args, f.name)
                 for f in dataclasses.fields(RunConfig)}
    try:
        config = RunConfig.from_file(args.config, overrides)
        ad.set_checked_mode(config.checked_mode)
        if args.command == "gen-synthetic":
            cmd_gen_synthetic(config)
        elif args.command == "build-vocab":
            cmd_build_vocab(config)
        elif args.command == "build-tree":
            cmd_build_tree(config)
        elif args.command == "train-xe":
            cmd_train_xe(config)
        elif args.command == "train-rl":
            cmd_train_rl(config)
        elif args.command == "eval":
            cmd_eval(config)
        elif args.command == "generate":
            cmd_generate(config, args.features, args.attention_dump)
        elif args.command == "inspect-tree":
            cmd_inspect_tree(config, args.level, args.proto, args.top_k,
                             args.dot)
    except (ConfigError, ClusterError, TrainingError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
