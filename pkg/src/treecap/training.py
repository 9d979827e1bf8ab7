"""Two-stage optimization: teacher-forced cross-entropy, then self-critical
sequence training with a mean-of-samples baseline and CIDEr-D reward.

The XE stage follows the epoch-indexed lambda learning-rate schedule with
per-group base rates (encoder-like vs other); the RL stage uses fixed rates
and stops after `patience` consecutive epochs without a new best validation
CIDEr.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor, backward
from .lexicon import BOS_ID, EOS_ID, PAD_ID, Vocabulary
from .metrics import IdfTable, build_idf, cider_d, corpus_cider_d
from .model import CaptionModel, greedy_decode, save_checkpoint, sample_decode


class TrainingError(ValueError):
    pass


def lambda_lr(n: int, base_lr: float) -> float:
    """Epoch-indexed decay: warm ramp for 3 epochs, flat to 10, 0.2x to 12,
    then 0.04x."""
    if n < 1:
        raise TrainingError(f"epoch index must be >= 1, got {n}")
    if n <= 3:
        return n / 4.0 * base_lr
    if n <= 10:
        return base_lr
    if n <= 12:
        return 0.2 * base_lr
    return 0.2 * 0.2 * base_lr


@dataclass
class RlConfig:
    k: int = 5
    temperature: float = 1.0

    def __post_init__(self):
        if self.k < 2:
            raise TrainingError("SCST needs k >= 2 samples (mean baseline)")
        if self.temperature <= 0:
            raise TrainingError("temperature must be > 0")


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9


class Adam:
    """Adam with per-group learning rates and optional gradient clipping."""

    def __init__(self, named_params: dict[str, Parameter],
                 config: AdamConfig | None = None):
        self.params = dict(named_params)
        self.config = config or AdamConfig()
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, lr_by_group: dict[str, float],
             grad_clip: float | None = None) -> None:
        c = self.config
        self.t += 1
        for name, p in self.params.items():
            g = p.grad
            if grad_clip is not None:
                norm = float(np.sqrt((g * g).sum()))
                if norm > grad_clip:
                    g = g * (grad_clip / norm)
            self.m[name] = c.beta1 * self.m[name] + (1 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1 - c.beta2) * g * g
            m_hat = self.m[name] / (1 - c.beta1 ** self.t)
            v_hat = self.v[name] / (1 - c.beta2 ** self.t)
            p.data = p.data - lr_by_group[p.group] * m_hat / (np.sqrt(v_hat) + c.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {f"opt.m.{n}": v for n, v in self.m.items()}
        state.update({f"opt.v.{n}": v for n, v in self.v.items()})
        state["opt.t"] = np.array([float(self.t)])
        return state

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for n in self.params:
            self.m[n] = np.array(arrays[f"opt.m.{n}"])
            self.v[n] = np.array(arrays[f"opt.v.{n}"])
        self.t = int(arrays["opt.t"][0])


def pad_batch(sequences: Sequence[Sequence[int]]) -> np.ndarray:
    """<bos>-prefixed, <eos>-terminated, <pad>-filled id matrix."""
    t = max(len(s) for s in sequences) + 2
    out = np.full((len(sequences), t), PAD_ID, dtype=np.int64)
    for i, seq in enumerate(sequences):
        out[i, 0] = BOS_ID
        out[i, 1:1 + len(seq)] = seq
        out[i, 1 + len(seq)] = EOS_ID
    return out


def xe_step(model: CaptionModel, features: np.ndarray,
            captions: Sequence[Sequence[int]], optimizer: Adam,
            lr_by_group: dict[str, float],
            grad_clip: float | None = None) -> float:
    """One teacher-forced cross-entropy update; returns the loss value."""
    ids = pad_batch(captions)
    if np.all(ids[:, 1:] == PAD_ID):
        raise TrainingError("all-pad batch")
    enhanced = model.aggregate(Tensor(features))
    logits = model.decoder_logits(enhanced, ids[:, :-1])
    loss = ad.cross_entropy(logits, ids[:, 1:], pad_id=PAD_ID)
    model.zero_grad()
    backward(loss)
    optimizer.step(lr_by_group, grad_clip)
    return loss.item()


def scst_loss(model: CaptionModel, features: np.ndarray,
              sampled_ids: Sequence[Sequence[int]],
              rewards: Sequence[Sequence[float]],
              temperature: float = 1.0) -> Tensor:
    """Surrogate loss whose gradient is the SCST estimator.

    `sampled_ids[i]` holds the k sequences for image i (ids without <bos>,
    with terminal <eos> when emitted); `rewards[i]` their CIDEr-D scores.
    The baseline is the per-image mean reward; the total is averaged over
    images.
    """
    n_images = len(sampled_ids)
    k = len(sampled_ids[0])
    flat_seqs = [seq for group in sampled_ids for seq in group]
    ids = pad_batch(flat_seqs)
    # pad_batch appends an <eos> the model never sampled; score only the
    # tokens actually drawn (terminated samples already carry their <eos>)
    for i, seq in enumerate(flat_seqs):
        ids[i, len(seq) + 1] = PAD_ID
    feats = np.repeat(np.asarray(features), k, axis=0)
    enhanced = model.aggregate(Tensor(feats))
    logp_steps = model.generation_log_probs(enhanced, ids, temperature)
    mask = (ids[:, 1:] != PAD_ID).astype(np.float64)
    logp = (logp_steps * Tensor(mask)).sum(axis=1)

    weights = np.empty(n_images * k)
    for i, rs in enumerate(rewards):
        b = sum(rs) / k
        for j, r in enumerate(rs):
            weights[i * k + j] = -(r - b) / (k * n_images)
    return (logp * Tensor(weights)).sum()


def scst_step(model: CaptionModel, samples, vocab: Vocabulary, idf: IdfTable,
              rl_config: RlConfig, optimizer: Adam,
              lr_by_group: dict[str, float], rng: np.random.Generator,
              grad_clip: float | None = None) -> float:
    """One SCST update over a batch of (features, reference captions) samples.

    Returns the mean sampled reward.
    """
    sampled_ids: list[list[list[int]]] = []
    rewards: list[list[float]] = []
    for sample in samples:
        refs = [r for r in sample.captions]
        if not refs:
            raise TrainingError("SCST sample without references")
        ref_tokens = [vocab.decode(vocab.encode(r)).split() for r in refs]
        group_ids = []
        group_rewards = []
        for _ in range(rl_config.k):
            seq, _ = sample_decode(model, sample.features,
                                   temperature=rl_config.temperature, rng=rng)
            cand_tokens = vocab.decode(seq).split()
            group_ids.append(seq)
            group_rewards.append(cider_d(cand_tokens, ref_tokens, idf))
        sampled_ids.append(group_ids)
        rewards.append(group_rewards)

    features = np.stack([np.asarray(s.features) for s in samples])
    loss = scst_loss(model, features, sampled_ids, rewards,
                     rl_config.temperature)
    model.zero_grad()
    backward(loss)
    optimizer.step(lr_by_group, grad_clip)
    return float(np.mean([r for rs in rewards for r in rs]))


class CiderEarlyStopper:
    """Stop after `patience` consecutive epochs without a new best CIDEr."""

    def __init__(self, patience: int = 5):
        self.patience = patience
        self.best = -np.inf
        self.epochs_since_best = 0

    def update(self, cider: float) -> bool:
        if cider > self.best:
            self.best = cider
            self.epochs_since_best = 0
        else:
            self.epochs_since_best += 1
        return self.epochs_since_best >= self.patience


@dataclass
class TrainConfig:
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
    grad_clip: float | None = None
    patience: int = 5
    seed: int = 0


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    best_cider: float = -np.inf
    best_epoch: tuple[str, int] | None = None


def evaluate_cider(model: CaptionModel, dataset, vocab: Vocabulary,
                   idf: IdfTable | None = None) -> float:
    """Mean greedy-decode CIDEr-D over a dataset."""
    cands = []
    refs = []
    for sample in dataset:
        ids = greedy_decode(model, sample.features)
        cands.append(vocab.decode(ids).split())
        refs.append([vocab.decode(vocab.encode(r)).split()
                     for r in sample.captions])
    score, _ = corpus_cider_d(cands, refs, idf)
    return score


def greedy_accuracy(model: CaptionModel, dataset, vocab: Vocabulary) -> float:
    """Fraction of samples whose greedy caption exactly matches a reference."""
    hits = 0
    for sample in dataset:
        text = vocab.decode(greedy_decode(model, sample.features))
        if any(text == vocab.decode(vocab.encode(r)) for r in sample.captions):
            hits += 1
    return hits / len(dataset)


def train(model: CaptionModel, train_set, val_set, vocab: Vocabulary,
          config: TrainConfig, stages: Sequence[str] = ("xe", "rl"),
          log_path=None, checkpoint_path=None, resume=None,
          quiet: bool = True) -> TrainResult:
    """Run the requested stages; logs one record per epoch and checkpoints the
    best validation-CIDEr model when `checkpoint_path` is given."""
    for stage in stages:
        if stage not in ("xe", "rl"):
            raise TrainingError(f"unknown stage {stage!r}")

    optimizer = Adam(model.params, AdamConfig(config.adam_beta1,
                                              config.adam_beta2,
                                              config.adam_eps))
    rng = np.random.default_rng(config.seed)
    start_epoch = {"xe": 0, "rl": 0}
    if resume is not None:
        arrays, meta = resume
        model.load_state(arrays)
        optimizer.load_state(arrays)
        rng.bit_generator.state = meta["rng_state"]
        start_epoch = meta.get("start_epoch", start_epoch)

    val_idf = build_idf([[vocab.decode(vocab.encode(r)).split()
                          for r in s.captions] for s in val_set])
    train_idf = build_idf([[vocab.decode(vocab.encode(r)).split()
                            for r in s.captions] for s in train_set])
    rl_config = RlConfig(k=config.k_samples, temperature=config.temperature)

    result = TrainResult()
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None

    def record(stage, epoch, lr_by_group, value, val_cider, t0):
        rec = {"stage": stage, "epoch": epoch, "lr_by_group": lr_by_group,
               "loss_or_reward": value, "val_cider": val_cider,
               "wallclock": time.time() - t0}
        result.log.append(rec)
        if log_fh:
            log_fh.write(json.dumps(rec) + "\n")
            log_fh.flush()
        if not quiet:
            print(f"[{stage}] epoch {epoch}: {value:.4f} "
                  f"val_cider {val_cider:.3f}")

    def save_best(stage, epoch, val_cider):
        if val_cider > result.best_cider:
            result.best_cider = val_cider
            result.best_epoch = (stage, epoch)
            if checkpoint_path:
                _checkpoint(checkpoint_path, model, optimizer, rng,
                            {"xe": epoch if stage == "xe" else config.xe_epochs,
                             "rl": epoch if stage == "rl" else 0},
                            {"val_cider": val_cider, "stage": stage})

    def xe_pairs():
        pairs = []
        for sample in train_set:
            for ref in sample.captions:
                pairs.append((sample.features, vocab.encode(ref)))
        return pairs

    if "xe" in stages:
        pairs = xe_pairs()
        for epoch in range(start_epoch.get("xe", 0) + 1, config.xe_epochs + 1):
            t0 = time.time()
            lr = {"encoder": lambda_lr(epoch, config.base_lr_encoder),
                  "other": lambda_lr(epoch, config.base_lr_other)}
            order = rng.permutation(len(pairs))
            losses = []
            for lo in range(0, len(order), config.xe_batch_size):
                batch = [pairs[i] for i in order[lo:lo + config.xe_batch_size]]
                feats = np.stack([b[0] for b in batch])
                caps = [b[1] for b in batch]
                losses.append(xe_step(model, feats, caps, optimizer, lr,
                                      config.grad_clip))
            val = evaluate_cider(model, val_set, vocab, val_idf)
            record("xe", epoch, lr, float(np.mean(losses)), val, t0)
            save_best("xe", epoch, val)

    if "rl" in stages:
        lr = {"encoder": config.rl_lr_encoder, "other": config.rl_lr_other}
        stopper = CiderEarlyStopper(config.patience)
        stopper.best = result.best_cider if result.best_cider > -np.inf else -np.inf
        for epoch in range(start_epoch.get("rl", 0) + 1, config.rl_epochs + 1):
            t0 = time.time()
            order = rng.permutation(len(train_set))
            rewards = []
            for lo in range(0, len(order), config.rl_batch_size):
                batch = [train_set[i] for i in order[lo:lo + config.rl_batch_size]]
                rewards.append(scst_step(model, batch, vocab, train_idf,
                                         rl_config, optimizer, lr, rng,
                                         config.grad_clip))
            val = evaluate_cider(model, val_set, vocab, val_idf)
            record("rl", epoch, lr, float(np.mean(rewards)), val, t0)
            save_best("rl", epoch, val)
            if stopper.update(val):
                break

    if log_fh:
        log_fh.close()
    return result


def _checkpoint(path, model: CaptionModel, optimizer: Adam,
                rng: np.random.Generator, start_epoch: dict, extra: dict) -> None:
    arrays = model.state_arrays()
    arrays.update(optimizer.state_arrays())
    meta = {"rng_state": rng.bit_generator.state,
            "start_epoch": start_epoch, **extra}
    save_checkpoint(path, model.config, arrays, meta=meta, dtype="f8")
