"""Seeded generators for desk-scale verification data.

Two worlds live here:

* planted-hierarchy concept embeddings, where every point carries its true
  sub- and super-cluster label, so hierarchical clustering can be scored
  against ground truth;
* a deterministic toy captioning world, where each concept owns a disjoint
  set of grid cells and contributes a fixed signature vector, so attention
  maps and captions both have an unambiguous ground truth.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .lexicon import Vocabulary


@dataclass
class PlantedTreeSpec:
    n_super: int = 8
    n_sub_per_super: int = 5
    concepts_per_sub: int = 10
    d_emb: int = 16
    separation: float = 8.0
    seed: int = 0

    def __post_init__(self):
        if self.separation <= 0:
            raise ValueError("separation must be > 0")
        if min(self.n_super, self.n_sub_per_super, self.concepts_per_sub,
               self.d_emb) < 1:
            raise ValueError("all counts must be >= 1")


def gen_planted_embeddings(spec: PlantedTreeSpec
                           ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hierarchical Gaussian draw with known labels.

    Within-sub-cluster noise is N(0, I), whose RMS radius is sqrt(d_emb); the
    separation ratio is measured against that radius. Sub-centers within a
    super-cluster are rescaled so their minimum pairwise distance equals
    `separation * sqrt(d_emb)`, and super-centers so theirs equals 10x that.
    """
    rng = np.random.default_rng(spec.seed)
    d = spec.d_emb
    radius = float(np.sqrt(d))

    def spread(points: np.ndarray, target: float) -> np.ndarray:
        if len(points) < 2:
            return points
        dists = np.sqrt(((points[:, None] - points[None]) ** 2).sum(-1))
        min_d = dists[np.triu_indices(len(points), 1)].min()
        return points * (target / max(min_d, 1e-12))

    super_centers = spread(rng.normal(size=(spec.n_super, d)),
                           10.0 * spec.separation * radius)
    X = np.empty((spec.n_super * spec.n_sub_per_super * spec.concepts_per_sub, d))
    sub_labels = np.empty(len(X), dtype=np.int64)
    super_labels = np.empty(len(X), dtype=np.int64)
    row = 0
    for s in range(spec.n_super):
        offsets = spread(rng.normal(size=(spec.n_sub_per_super, d)),
                         spec.separation * radius)
        for b in range(spec.n_sub_per_super):
            center = super_centers[s] + offsets[b]
            pts = center + rng.normal(size=(spec.concepts_per_sub, d))
            X[row:row + spec.concepts_per_sub] = pts
            sub_labels[row:row + spec.concepts_per_sub] = s * spec.n_sub_per_super + b
            super_labels[row:row + spec.concepts_per_sub] = s
            row += spec.concepts_per_sub
    return X, sub_labels, super_labels


# -- toy captioning world ------------------------------------------------------

_TEMPLATES = [
    "a {} here",
    "there is a {} in view",
    "the picture shows a {}",
    "one can see a {}",
    "look at the {} now",
]


@dataclass
class ToyWorld:
    """Deterministic concept inventory with a known 2-level hierarchy.

    Concepts come in `n_groups` groups of `concepts_per_group`; each concept
    owns a disjoint set of `cells_per_concept` grid cells and a fixed
    signature vector added to those cells by the renderer. Caption templates
    join concept phrases with "and".
    """

    n_groups: int = 4
    concepts_per_group: int = 3
    grid_h: int = 4
    grid_w: int = 4
    cells_per_concept: int = 1
    feature_dim: int = 64
    d_emb: int = 16
    noise_sigma: float = 0.1          # fraction of signature norm
    signature_scale: float = 1.0      # concept signature strength
    anchor_scale: float = 0.0         # per-cell anchor strength (0: no anchors)
    n_templates: int = 1
    seed: int = 0

    concepts: list[str] = field(init=False)
    group_of: np.ndarray = field(init=False)
    cell_of: np.ndarray = field(init=False)
    signatures: np.ndarray = field(init=False)
    cell_anchors: np.ndarray = field(init=False)
    concept_embeddings: np.ndarray = field(init=False)

    def __post_init__(self):
        n = self.n_groups * self.concepts_per_group
        if n * self.cells_per_concept > self.grid_h * self.grid_w:
            raise ValueError("not enough grid cells for disjoint concept cells")
        if not 1 <= self.n_templates <= len(_TEMPLATES):
            raise ValueError(f"n_templates must be in 1..{len(_TEMPLATES)}")
        self.concepts = [f"obj{g}{chr(ord('a') + i)}"
                         for g in range(self.n_groups)
                         for i in range(self.concepts_per_group)]
        self.group_of = np.repeat(np.arange(self.n_groups), self.concepts_per_group)
        rng = np.random.default_rng(self.seed)
        cells = rng.permutation(self.grid_h * self.grid_w)
        self.cell_of = cells[:n * self.cells_per_concept].reshape(
            n, self.cells_per_concept)
        # planted 2-level structure in embedding space, for prototype trees
        group_centers = 8.0 * rng.normal(size=(self.n_groups, self.d_emb))
        self.concept_embeddings = (group_centers[self.group_of]
                                   + 4.0 * rng.normal(size=(n, self.d_emb)))
        # cell signatures are a fixed linear image of the embeddings, so
        # prototype centroids correspond to real feature-space directions
        lift = rng.normal(size=(self.d_emb, self.feature_dim)) / np.sqrt(self.d_emb)
        sigs = self.concept_embeddings @ lift
        self.signatures = 4.0 * sigs / np.linalg.norm(sigs, axis=1, keepdims=True)
        # optional fixed per-cell anchor so a cell stays recognizable even
        # when its concept signature is weak (signature_scale < 1)
        anchors = rng.normal(size=(self.n_cells, self.feature_dim))
        self.cell_anchors = (self.anchor_scale * 4.0 * anchors
                             / np.linalg.norm(anchors, axis=1, keepdims=True))

    @property
    def n_cells(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def n_concepts(self) -> int:
        return len(self.concepts)

    def render(self, concept_ids: Sequence[int],
               rng: np.random.Generator | None = None) -> np.ndarray:
        """Grid features (n_cells, feature_dim) for a set of concepts."""
        feats = self.cell_anchors.copy()
        for c in concept_ids:
            feats[self.cell_of[c]] += self.signature_scale * self.signatures[c]
        if rng is not None and self.noise_sigma > 0:
            # per-dim std such that the expected noise norm per cell is
            # noise_sigma x the signature norm (4.0)
            scale = self.noise_sigma * 4.0 / np.sqrt(self.feature_dim)
            feats += scale * rng.normal(size=feats.shape)
        return feats

    def caption(self, concept_ids: Sequence[int], template: int = 0) -> str:
        """Canonical caption: concepts in index order joined with "and"."""
        phrase = " and a ".join(self.concepts[c] for c in sorted(concept_ids))
        return _TEMPLATES[template].format(phrase)

    def captions(self, concept_ids: Sequence[int]) -> list[str]:
        return [self.caption(concept_ids, t) for t in range(self.n_templates)]

    def corpus(self) -> list[str]:
        """Every caption the grammar can emit (single- to triple-concept)."""
        out = []
        n = self.n_concepts
        sets = [[i] for i in range(n)]
        sets += [[i, j] for i in range(n) for j in range(i + 1, n)]
        sets += [[i, j, k] for i in range(n) for j in range(i + 1, n)
                 for k in range(j + 1, n)]
        for s in sets:
            out.extend(self.captions(s))
        return out

    def vocabulary(self) -> Vocabulary:
        # every grammar word occurs far more than once across the full corpus
        return Vocabulary.build(self.corpus(), min_occurrences=0)


@dataclass
class ToySample:
    features: np.ndarray            # (n_cells, feature_dim)
    captions: list[str]
    concept_ids: list[int]


def enumerate_dataset(world: ToyWorld, max_concepts: int = 3) -> list[ToySample]:
    """One noiseless sample per concept set of size 1..max_concepts.

    Covers the world's full support, so at noise_sigma 0 any sampled dataset
    over the same sets has bitwise-identical features.
    """
    samples = []
    for k in range(1, max_concepts + 1):
        for ids in itertools.combinations(range(world.n_concepts), k):
            ids = list(ids)
            samples.append(ToySample(features=world.render(ids, None),
                                     captions=world.captions(ids),
                                     concept_ids=ids))
    return samples


def single_concept_dataset(world: ToyWorld, repeats: int
                           ) -> tuple[list[ToySample], list[ToySample]]:
    """Noisy single-concept train renders plus one clean sample per concept.

    Useful for attention-map checks: with exactly one concept per image the
    only informative grid cells are that concept's own, so cross-attention
    has an unambiguous target.
    """
    rng = np.random.default_rng(world.seed + 10)
    train = [ToySample(features=world.render([c], rng),
                       captions=world.captions([c]), concept_ids=[c])
             for _ in range(repeats) for c in range(world.n_concepts)]
    val = [ToySample(features=world.render([c], None),
                     captions=world.captions([c]), concept_ids=[c])
           for c in range(world.n_concepts)]
    return train, val


def gen_toy_dataset(world: ToyWorld, n_train: int, n_val: int,
                    max_concepts: int = 3) -> tuple[list[ToySample], list[ToySample]]:
    """Seeded train/val split; each sample draws 1..max_concepts concepts."""

    def make(count: int, salt: int) -> list[ToySample]:
        samples = []
        for i in range(count):
            rng = np.random.default_rng(
                np.random.SeedSequence((world.seed, salt, i)))
            k = int(rng.integers(1, max_concepts + 1))
            ids = sorted(rng.choice(world.n_concepts, size=k, replace=False).tolist())
            feats = world.render(ids, rng if world.noise_sigma > 0 else None)
            samples.append(ToySample(features=feats, captions=world.captions(ids),
                                     concept_ids=ids))
        return samples

    return make(n_train, salt=1), make(n_val, salt=2)
