"""Caption model: toy patch encoder, progressive cross-modal aggregation over
tree-structured prototypes, and a vanilla transformer decoder with greedy /
beam / sampled / ensemble decoding.

Grid features are the attention query; prototypes (projected once from
embedding width to model width by a shared linear map) are key and value.
Blocks run coarse to fine; an empty schedule is the identity (no aggregation).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .lexicon import BOS_ID, EOS_ID, PAD_ID
from .prototypes import PrototypeTree

_GRID_MAGIC = b"PTSNGRD1"
_CKPT_MAGIC = b"PTSNCKPT"
_NEG = -1e9


class ConfigError(ValueError):
    pass


@dataclass
class ToyEncoderConfig:
    image_size: int = 16          # square images, H == W
    patch_size: int = 8
    n_blocks: int = 1

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError("image size must be divisible by patch size")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    heads: int = 8
    d_ff: int = 128
    decoder_layers: int = 2
    max_len: int = 20
    pa_schedule: list[int] = field(default_factory=list)  # tree levels, coarse->fine
    prototype_mode: str = "trainable"
    d_emb: int = 0                # prototype embedding width; 0 when no PA
    encoder: ToyEncoderConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigError("d_model must be divisible by heads")
        if min(self.vocab_size, self.d_model, self.heads, self.d_ff,
               self.decoder_layers, self.max_len) < 1:
            raise ConfigError("all model sizes must be >= 1")
        if self.prototype_mode not in ("trainable", "frozen"):
            raise ConfigError(f"unknown prototype_mode {self.prototype_mode!r}")

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "encoder"}
        d["encoder"] = self.encoder.__dict__.copy() if self.encoder else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        enc = d.pop("encoder", None)
        return cls(encoder=ToyEncoderConfig(**enc) if enc else None, **d)


def validate_schedule(schedule: list[int], tree: PrototypeTree) -> None:
    """Coarse-to-fine: prototype counts along the schedule never decrease."""
    for lvl in schedule:
        if not 1 <= lvl <= tree.n_levels:
            raise ConfigError(f"schedule level {lvl} not in tree (1..{tree.n_levels})")
    counts = [tree.level_sizes[lvl - 1] for lvl in schedule]
    if any(b < a for a, b in zip(counts, counts[1:])):
        raise ConfigError(f"schedule is not coarse-to-fine: counts {counts}")


def schedule_from_counts(counts: list[int], tree: PrototypeTree) -> list[int]:
    """Map per-block prototype counts (e.g. [800, 2000]) to tree levels."""
    levels = []
    for c in counts:
        if c not in tree.level_sizes:
            raise ConfigError(f"no tree level with {c} prototypes "
                              f"(tree has {tree.level_sizes})")
        levels.append(tree.level_sizes.index(c) + 1)
    return levels


def _linear_init(rng, n_in, n_out, scale=0.02):
    return scale * rng.normal(size=(n_in, n_out))


class CaptionModel:
    """Parameter container plus forward passes; see module docstring."""

    def __init__(self, config: ModelConfig, tree: PrototypeTree | None = None):
        self.config = config
        self.params: dict[str, Parameter] = {}
        self.frozen: dict[str, Tensor] = {}
        rng = np.random.default_rng(config.seed)
        D, V = config.d_model, config.vocab_size

        if config.encoder is not None:
            enc = config.encoder
            patch_dim = enc.patch_size * enc.patch_size * 3
            self._add("enc.patch_w", _linear_init(rng, patch_dim, D), "encoder")
            self._add("enc.patch_b", np.zeros(D), "encoder")
            self._add("enc.pos", _linear_init(rng, enc.n_patches, D), "encoder")
            for b in range(enc.n_blocks):
                self._attn_params(rng, f"enc.{b}.self", "encoder")
                self._ffn_ln_params(rng, f"enc.{b}", "encoder")

        if config.pa_schedule:
            if tree is None:
                raise ConfigError("pa_schedule set but no prototype tree given")
            validate_schedule(config.pa_schedule, tree)
            if config.d_emb and config.d_emb != tree.centroids(1).shape[1]:
                raise ConfigError("d_emb does not match tree centroid width")
            d_emb = tree.centroids(1).shape[1]
            self.config.d_emb = d_emb
            self._add("proto.proj_w", _linear_init(rng, d_emb, D, 0.1))
            self._add("proto.proj_b", np.zeros(D))
            for lvl in sorted(set(config.pa_schedule)):
                cents = tree.centroids(lvl).copy()
                if config.prototype_mode == "trainable":
                    self._add(f"proto.L{lvl}", cents)
                else:
                    self.frozen[f"proto.L{lvl}"] = Tensor(cents)
            # small output-projection init keeps each aggregation block close
            # to a pass-through early in training, which avoids the stack
            # drowning out the visual signal before the decoder latches on
            for i in range(len(config.pa_schedule)):
                self._attn_params(rng, f"pa.{i}.cross", out_scale=0.1)
                self._ffn_ln_params(rng, f"pa.{i}", out_scale=0.1)

        self._add("dec.token_emb", _linear_init(rng, V, D))
        self._add("dec.pos_emb", _linear_init(rng, config.max_len, D))
        for layer in range(config.decoder_layers):
            self._attn_params(rng, f"dec.{layer}.self")
            self._attn_params(rng, f"dec.{layer}.cross")
            self._add(f"dec.{layer}.ln3_g", np.ones(D))
            self._add(f"dec.{layer}.ln3_b", np.zeros(D))
            self._ffn_ln_params(rng, f"dec.{layer}")
        self._add("dec.out_w", _linear_init(rng, D, V))
        self._add("dec.out_b", np.zeros(V))

        self._causal = {}
        self.last_cross_attention: np.ndarray | None = None

    # -- parameter plumbing -------------------------------------------------
    def _add(self, name, data, group="other"):
        self.params[name] = Parameter(np.asarray(data, dtype=np.float64), group)

    def _attn_params(self, rng, prefix, group="other", out_scale=1.0):
        D = self.config.d_model
        for w in ("wq", "wk", "wv"):
            self._add(f"{prefix}.{w}", _linear_init(rng, D, D), group)
        self._add(f"{prefix}.wo", out_scale * _linear_init(rng, D, D), group)
        self._add(f"{prefix}.bo", np.zeros(D), group)

    def _ffn_ln_params(self, rng, prefix, group="other", out_scale=1.0):
        D, F = self.config.d_model, self.config.d_ff
        self._add(f"{prefix}.ffn_w1", _linear_init(rng, D, F), group)
        self._add(f"{prefix}.ffn_b1", np.zeros(F), group)
        self._add(f"{prefix}.ffn_w2", out_scale * _linear_init(rng, F, D), group)
        self._add(f"{prefix}.ffn_b2", np.zeros(D), group)
        self._add(f"{prefix}.ln1_g", np.ones(D), group)
        self._add(f"{prefix}.ln1_b", np.zeros(D), group)
        self._add(f"{prefix}.ln2_g", np.ones(D), group)
        self._add(f"{prefix}.ln2_b", np.zeros(D), group)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def prototype_tensor(self, level: int) -> Tensor:
        name = f"proto.L{level}"
        return self.params.get(name) or self.frozen[name]

    # -- attention ------------------------------------------------------------
    def _split_heads(self, x: Tensor) -> Tensor:
        h = self.config.heads
        dh = self.config.d_model // h
        *lead, n, _ = x.shape
        x = x.reshape(tuple(lead) + (n, h, dh))
        return x.swapaxes(-2, -3)         # (..., h, n, dh)

    def _merge_heads(self, x: Tensor) -> Tensor:
        *lead, h, n, dh = x.shape
        return x.swapaxes(-2, -3).reshape(tuple(lead) + (n, h * dh))

    def _mha(self, prefix: str, queries: Tensor, keyvals: Tensor,
             mask: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
        """Returns (output, attention weights averaged over heads, as data)."""
        p = self.params
        dh = self.config.d_model // self.config.heads
        q = self._split_heads(queries @ p[f"{prefix}.wq"])
        k = self._split_heads(keyvals @ p[f"{prefix}.wk"])
        v = self._split_heads(keyvals @ p[f"{prefix}.wv"])
        scores = (q @ k.swapaxes(-1, -2)) * (dh ** -0.5)
        if mask is not None:
            scores = scores + Tensor(mask)
        attn = ad.softmax(scores, axis=-1)
        out = self._merge_heads(attn @ v)
        out = out @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]
        return out, attn.data.mean(axis=-3)

    def _ffn_block(self, prefix: str, x: Tensor, sub: Tensor) -> Tensor:
        """Post-LN residual pair: LN(x + sub) then LN(. + FFN(.))."""
        p = self.params
        h = ad.layer_norm(x + sub, p[f"{prefix}.ln1_g"], p[f"{prefix}.ln1_b"])
        ff = ad.feed_forward(h, p[f"{prefix}.ffn_w1"], p[f"{prefix}.ffn_b1"],
                             p[f"{prefix}.ffn_w2"], p[f"{prefix}.ffn_b2"])
        return ad.layer_norm(h + ff, p[f"{prefix}.ln2_g"], p[f"{prefix}.ln2_b"])

    # -- toy encoder ------------------------------------------------------------
    def encode_image(self, images) -> Tensor:
        """(B, H, W, 3) or (H, W, 3) raw values -> (B, N, D) grid features."""
        enc = self.config.encoder
        if enc is None:
            raise ConfigError("model has no toy encoder configured")
        arr = np.asarray(images, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        B, H, W, _ = arr.shape
        if H != enc.image_size or W != enc.image_size:
            raise ConfigError(f"image size {H}x{W} does not match config "
                              f"{enc.image_size}")
        P = enc.patch_size
        g = H // P
        patches = (arr.reshape(B, g, P, g, P, 3)
                   .transpose(0, 1, 3, 2, 4, 5)
                   .reshape(B, g * g, P * P * 3))
        p = self.params
        x = Tensor(patches) @ p["enc.patch_w"] + p["enc.patch_b"]
        x = x + p["enc.pos"]
        for b in range(enc.n_blocks):
            sub, _ = self._mha(f"enc.{b}.self", x, x)
            x = self._ffn_block(f"enc.{b}", x, sub)
        return x

    # -- progressive aggregation ---------------------------------------------
    def cma_block(self, index: int, grids: Tensor, protos: Tensor
                  ) -> tuple[Tensor, np.ndarray]:
        sub, weights = self._mha(f"pa.{index}.cross", grids, protos)
        return self._ffn_block(f"pa.{index}", grids, sub), weights

    def aggregate(self, grids: Tensor) -> Tensor:
        """Run the coarse-to-fine CMA stack; empty schedule is the identity."""
        if grids.shape[-1] != self.config.d_model:
            raise ConfigError(
                f"grid feature width {grids.shape[-1]} != d_model "
                f"{self.config.d_model}")
        p = self.params
        for i, lvl in enumerate(self.config.pa_schedule):
            protos = (self.prototype_tensor(lvl) @ p["proto.proj_w"]
                      + p["proto.proj_b"])
            grids, _ = self.cma_block(i, grids, protos)
        return grids

    # -- decoder ------------------------------------------------------------
    def _causal_mask(self, t: int) -> np.ndarray:
        if t not in self._causal:
            self._causal[t] = np.triu(np.full((t, t), _NEG), k=1)
        return self._causal[t]

    def decoder_logits(self, enhanced: Tensor, ids: np.ndarray,
                       collect_attention: bool = False) -> Tensor:
        """Teacher-forced logits (B, T, V); ids include the leading <bos>.

        With `collect_attention`, stores the last layer's head-averaged
        cross-attention (B, T, N_grid) in `self.last_cross_attention`.
        """
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        T = ids.shape[1]
        if T > self.config.max_len:
            raise ConfigError(f"sequence length {T} exceeds max_len "
                              f"{self.config.max_len}")
        p = self.params
        x = ad.take_rows(p["dec.token_emb"], ids) + Tensor(
            np.eye(self.config.max_len)[:T]) @ p["dec.pos_emb"]
        mask = self._causal_mask(T)
        self.last_cross_attention = None
        self.cross_attentions = []
        for layer in range(self.config.decoder_layers):
            sub, _ = self._mha(f"dec.{layer}.self", x, x, mask=mask)
            h = ad.layer_norm(x + sub, p[f"dec.{layer}.ln3_g"],
                              p[f"dec.{layer}.ln3_b"])
            cross, weights = self._mha(f"dec.{layer}.cross", h, enhanced)
            if collect_attention:
                self.cross_attentions.append(weights)
                self.last_cross_attention = weights
            x = self._ffn_block(f"dec.{layer}", h, cross)
        return x @ p["dec.out_w"] + p["dec.out_b"]

    def generation_log_probs(self, enhanced: Tensor, ids: np.ndarray,
                             temperature: float = 1.0) -> Tensor:
        """Per-step log-probabilities under the generation distribution.

        The generation distribution masks <pad> and <bos> (never emitted) and
        applies the temperature; `ids` includes the leading <bos>, and the
        returned tensor scores ids[t+1] at step t, shape (B, T-1).
        """
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        logits = self.decoder_logits(enhanced, ids[:, :-1])
        logits = logits * (1.0 / temperature) + Tensor(self._special_mask())
        return ad.gather_last(ad.log_softmax(logits, axis=-1), ids[:, 1:])

    def _special_mask(self) -> np.ndarray:
        m = np.zeros(self.config.vocab_size)
        m[PAD_ID] = _NEG
        m[BOS_ID] = _NEG
        return m

    # -- state --------------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {n: p.data for n, p in self.params.items()}
        state.update({f"frozen.{n}": t.data for n, t in self.frozen.items()})
        return state

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise ConfigError(f"checkpoint missing parameter {name!r}")
            if tuple(arrays[name].shape) != tuple(p.shape):
                raise ConfigError(
                    f"shape mismatch for {name!r}: checkpoint "
                    f"{arrays[name].shape} vs model {p.shape}")
            p.data = np.array(arrays[name], dtype=p.dtype)
        for name, t in self.frozen.items():
            key = f"frozen.{name}"
            if key in arrays:
                if tuple(arrays[key].shape) != tuple(t.shape):
                    raise ConfigError(f"shape mismatch for frozen {name!r}")
                t.data = np.array(arrays[key], dtype=t.dtype)


# -- decoding strategies ---------------------------------------------------------

def _as_batch(features) -> Tensor:
    arr = features.data if isinstance(features, Tensor) else np.asarray(features)
    if arr.ndim == 2:
        arr = arr[None]
    return Tensor(arr)


def _step_logprobs_fn(model: CaptionModel, features, temperature: float = 1.0):
    """Single-sample closure: prefix ids (with <bos>) -> next-token log-probs."""
    feats = _as_batch(features)
    mask = model._special_mask()
    with ad.no_grad():
        enhanced = model.aggregate(feats)

    def step(prefix: list[int]) -> np.ndarray:
        with ad.no_grad():
            logits = model.decoder_logits(enhanced, np.array([prefix]))
        z = logits.data[0, -1] / temperature + mask
        z = z - z.max()
        return z - np.log(np.exp(z).sum())

    return step


def greedy_decode(model: CaptionModel, features, max_len: int | None = None
                  ) -> list[int]:
    """Argmax decoding; returns emitted ids without <bos>/<eos>."""
    max_len = max_len or model.config.max_len
    step = _step_logprobs_fn(model, features)
    prefix = [BOS_ID]
    out = []
    while len(prefix) < max_len:
        nxt = int(step(prefix).argmax())
        if nxt == EOS_ID:
            break
        out.append(nxt)
        prefix.append(nxt)
    return out


def _sequence_score(logp_sum: float, length: int) -> float:
    # no length normalization: score is the total log-probability
    return logp_sum


def beam_decode(model: CaptionModel, features, beam: int,
                max_len: int | None = None) -> list[int]:
    """Beam search over total log-probability; beam=1 matches greedy."""
    if beam < 1:
        raise ConfigError("beam width must be >= 1")
    max_len = max_len or model.config.max_len
    step = _step_logprobs_fn(model, features)
    live = [([BOS_ID], 0.0)]
    done: list[tuple[list[int], float]] = []
    while live and len(live[0][0]) < max_len:
        candidates = []
        for prefix, score in live:
            lp = step(prefix)
            order = np.argsort(-lp)[:beam]
            for tok in order:
                candidates.append((prefix + [int(tok)], score + float(lp[tok])))
        candidates.sort(key=lambda c: -_sequence_score(c[1], len(c[0])))
        live = []
        for prefix, score in candidates:
            if prefix[-1] == EOS_ID:
                done.append((prefix, score))
            elif len(live) < beam:
                live.append((prefix, score))
            if len(done) >= beam and len(live) >= beam:
                break
    done.extend(live)
    # the greedy rollout is always a candidate, so the returned score can
    # never fall below it
    greedy_ids = greedy_decode(model, features, max_len)
    g_prefix = [BOS_ID] + greedy_ids + [EOS_ID]
    if len(g_prefix) <= max_len:
        g_score = 0.0
        for i in range(1, len(g_prefix)):
            g_score += float(step(g_prefix[:i])[g_prefix[i]])
        done.append((g_prefix, g_score))
    best = max(done, key=lambda c: _sequence_score(c[1], len(c[0])))
    ids = best[0][1:]
    return ids[:-1] if ids and ids[-1] == EOS_ID else ids


def sample_decode(model: CaptionModel, features, temperature: float = 1.0,
                  rng: np.random.Generator | None = None,
                  max_len: int | None = None) -> tuple[list[int], float]:
    """Ancestral sampling; returns (ids incl. terminal <eos> if emitted, logp).

    The log-probability is the sum of per-step log-softmax values at the
    sampled ids under the generation distribution (specials masked,
    temperature applied).
    """
    rng = rng or np.random.default_rng()
    max_len = max_len or model.config.max_len
    step = _step_logprobs_fn(model, features, temperature)
    prefix = [BOS_ID]
    logp = 0.0
    while len(prefix) < max_len:
        lp = step(prefix)
        tok = int(rng.choice(len(lp), p=np.exp(lp) / np.exp(lp).sum()))
        logp += float(lp[tok])
        prefix.append(tok)
        if tok == EOS_ID:
            break
    return prefix[1:], logp


def ensemble_decode(models: list[CaptionModel], features_per_model: list,
                    beam: int = 1, max_len: int | None = None) -> list[int]:
    """Average post-softmax next-token distributions across models, then decode."""
    if not models:
        raise ConfigError("empty ensemble")
    vocab_sizes = {m.config.vocab_size for m in models}
    if len(vocab_sizes) != 1:
        raise ConfigError("ensemble models must share a vocabulary")
    if beam < 1:
        raise ConfigError("beam width must be >= 1")
    max_len = max_len or min(m.config.max_len for m in models)
    steps = [_step_logprobs_fn(m, f) for m, f in zip(models, features_per_model)]

    def avg_step(prefix: list[int]) -> np.ndarray:
        probs = np.mean([np.exp(s(prefix)) for s in steps], axis=0)
        return np.log(np.maximum(probs, 1e-300))

    prefix = [BOS_ID]
    out = []
    while len(prefix) < max_len:
        nxt = int(avg_step(prefix).argmax())
        if nxt == EOS_ID:
            break
        out.append(nxt)
        prefix.append(nxt)
    return out


def averaged_distribution(models: list[CaptionModel], features_per_model: list,
                          prefix: list[int]) -> np.ndarray:
    """The ensemble's post-softmax next-token distribution for a prefix."""
    steps = [_step_logprobs_fn(m, f) for m, f in zip(models, features_per_model)]
    return np.mean([np.exp(s(prefix)) for s in steps], axis=0)


# -- file formats -----------------------------------------------------------------

def save_grid_features(path, features: np.ndarray,
                       layout: tuple[int, int] | None = None) -> None:
    features = np.asarray(features, dtype="<f4")
    n, d = features.shape
    h, w = layout if layout is not None else (0, 0)
    if layout is not None and h * w != n:
        raise ConfigError(f"layout {h}x{w} does not cover {n} grid positions")
    with open(path, "wb") as fh:
        fh.write(_GRID_MAGIC)
        fh.write(struct.pack("<IIII", n, d, h, w))
        fh.write(features.tobytes())


def load_grid_features(path) -> tuple[np.ndarray, tuple[int, int] | None]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _GRID_MAGIC:
        raise ConfigError(f"{path}: bad grid-feature magic")
    n, d, h, w = struct.unpack_from("<IIII", blob, 8)
    expected = 24 + 4 * n * d
    if len(blob) != expected:
        raise ConfigError(f"{path}: truncated grid-feature file")
    feats = np.frombuffer(blob, dtype="<f4", offset=24).reshape(n, d)
    return feats.astype(np.float64), (h, w) if h * w == n and n else None


def save_checkpoint(path, config: ModelConfig, arrays: dict[str, np.ndarray],
                    meta: dict | None = None, dtype: str = "f8") -> None:
    """Named-array checkpoint; dtype 'f8' keeps 64-bit runs bit-reproducible."""
    np_dtype = {"f4": "<f4", "f8": "<f8"}[dtype]
    names = [[n, list(arrays[n].shape)] for n in sorted(arrays)]
    header = json.dumps({"config": config.to_dict(), "names": names,
                         "dtype": dtype, "meta": meta or {}}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for n, _ in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype=np_dtype).tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _CKPT_MAGIC:
        raise ConfigError(f"{path}: bad checkpoint magic")
    (hlen,) = struct.unpack_from("<I", blob, 8)
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    np_dtype = {"f4": "<f4", "f8": "<f8"}[header["dtype"]]
    itemsize = np.dtype(np_dtype).itemsize
    off = 12 + hlen
    arrays = {}
    for name, shape in header["names"]:
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(
            blob, dtype=np_dtype, count=count, offset=off
        ).reshape(shape).astype(np.float64)
        off += count * itemsize
    return ModelConfig.from_dict(header["config"]), arrays, header["meta"]
