"""Vocabulary construction, caption tokenization, and word-embedding ingestion.

Captions are lowercased and stripped of characters outside [a-z0-9' -] before
counting. Words kept are those occurring strictly more than `min_occurrences`
times. Ids are assigned deterministically: the three specials first
(`<pad>`=0, `<bos>`=1, `<eos>`=2), then words by descending count with
alphabetical tie-break.
"""

from __future__ import annotations

import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
PAD_ID, BOS_ID, EOS_ID = 0, 1, 2
SPECIALS = (PAD, BOS, EOS)

_EMB_MAGIC = b"PTSNEMB1"

_DROP_RE = re.compile(r"[^a-z0-9' -]")
_WS_RE = re.compile(r"\s+")


class DataError(ValueError):
    """Malformed or missing input data."""


def normalize(text: str) -> str:
    """Lowercase, drop punctuation outside [a-z0-9' -], collapse whitespace."""
    text = _DROP_RE.sub("", text.lower().replace("\t", " "))
    return _WS_RE.sub(" ", text).strip()


def word_tokens(text: str) -> list[str]:
    norm = normalize(text)
    return norm.split(" ") if norm else []


@dataclass
class Vocabulary:
    id_to_token: list[str]
    token_to_id: dict[str, int]
    counts: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @classmethod
    def build(cls, corpus: Iterable[str], min_occurrences: int = 5) -> "Vocabulary":
        counts: Counter[str] = Counter()
        n_captions = 0
        for caption in corpus:
            n_captions += 1
            counts.update(word_tokens(caption))
        if n_captions == 0:
            raise DataError("cannot build a vocabulary from an empty corpus")
        kept = sorted(
            (t for t, c in counts.items() if c > min_occurrences),
            key=lambda t: (-counts[t], t),
        )
        id_to_token = list(SPECIALS) + kept
        return cls(
            id_to_token=id_to_token,
            token_to_id={t: i for i, t in enumerate(id_to_token)},
            counts={t: counts[t] for t in kept},
        )

    def encode(self, caption: str) -> list[int]:
        """Tokenize a caption to ids; out-of-vocabulary words are dropped."""
        return [self.token_to_id[w] for w in word_tokens(caption)
                if w in self.token_to_id]

    def decode(self, ids: Sequence[int]) -> str:
        """Ids back to text; special tokens are skipped."""
        return " ".join(self.id_to_token[i] for i in ids
                        if i >= len(SPECIALS))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, tok in enumerate(self.id_to_token):
                fh.write(f"{i}\t{tok}\t{self.counts.get(tok, 0)}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        id_to_token: list[str] = []
        counts: dict[str, int] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3:
                    raise DataError(f"{path}: malformed vocab line {lineno + 1}")
                idx, tok, cnt = int(parts[0]), parts[1], int(parts[2])
                if idx != len(id_to_token):
                    raise DataError(f"{path}: non-sequential id at line {lineno + 1}")
                id_to_token.append(tok)
                if tok not in SPECIALS:
                    counts[tok] = cnt
        if tuple(id_to_token[:3]) != SPECIALS:
            raise DataError(f"{path}: special tokens missing or misplaced")
        return cls(id_to_token, {t: i for i, t in enumerate(id_to_token)}, counts)


@dataclass
class ConceptList:
    """Ordered concept tokens; the rows of the embedding matrix follow this order."""

    tokens: list[str]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise DataError("duplicate concept tokens")
        for t in self.tokens:
            if t in SPECIALS:
                raise DataError(f"special token {t!r} cannot be a concept")

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_vocabulary(cls, vocab: Vocabulary) -> "ConceptList":
        """Fallback mode: every non-special vocabulary word is a concept."""
        return cls(tokens=vocab.id_to_token[len(SPECIALS):])

    @classmethod
    def from_file(cls, path) -> "ConceptList":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.strip() for line in fh if line.strip()]
        return cls(tokens=tokens)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for t in self.tokens:
                fh.write(t + "\n")


def _read_text_embeddings(path) -> dict[str, np.ndarray]:
    table: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                raise DataError(f"{path}: malformed embedding line {lineno + 1}")
            token = parts[0]
            try:
                vec = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError as exc:
                raise DataError(
                    f"{path}: malformed embedding line {lineno + 1}: {exc}") from exc
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise DataError(
                    f"{path}: inconsistent dimension at line {lineno + 1}")
            table[token] = vec
    return table


def _read_binary_embeddings(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _EMB_MAGIC:
        raise DataError(f"{path}: bad embedding magic")
    count, dim = struct.unpack_from("<II", blob, 8)
    off = 16
    tokens = []
    for _ in range(count):
        (tlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        tokens.append(blob[off:off + tlen].decode("utf-8"))
        off += tlen
    floats = np.frombuffer(blob, dtype="<f4", count=count * dim, offset=off)
    mat = floats.reshape(count, dim).astype(np.float64)
    return {t: mat[i] for i, t in enumerate(tokens)}


def load_embeddings(path, concepts: ConceptList,
                    max_miss_rate: float = 0.0) -> tuple[np.ndarray, list[str]]:
    """Read an embedding file and align rows to the concept order.

    Returns (matrix, missing). Missing concepts beyond `max_miss_rate` of the
    list raise; below it, their rows are zero and they are reported.
    """
    with open(path, "rb") as fh:
        head = fh.read(8)
    table = (_read_binary_embeddings(path) if head == _EMB_MAGIC
             else _read_text_embeddings(path))
    if not table:
        raise DataError(f"{path}: empty embedding file")
    dim = next(iter(table.values())).size
    mat = np.zeros((len(concepts), dim), dtype=np.float64)
    missing = []
    for i, tok in enumerate(concepts.tokens):
        vec = table.get(tok)
        if vec is None:
            missing.append(tok)
        else:
            if not np.all(np.isfinite(vec)):
                raise DataError(f"{path}: non-finite embedding for {tok!r}")
            mat[i] = vec
    if len(concepts) and len(missing) / len(concepts) > max_miss_rate:
        raise DataError(
            f"{path}: {len(missing)}/{len(concepts)} concepts missing "
            f"(first: {missing[:5]})")
    return mat, missing


def write_embeddings_text(path, tokens: Sequence[str], matrix: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tok, row in zip(tokens, matrix):
            fh.write(tok + " " + " ".join(repr(float(v)) for v in row) + "\n")


def write_embeddings_binary(path, tokens: Sequence[str], matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_EMB_MAGIC)
        fh.write(struct.pack("<II", matrix.shape[0], matrix.shape[1]))
        for tok in tokens:
            enc = tok.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
        fh.write(matrix.tobytes())
