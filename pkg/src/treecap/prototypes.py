"""Hierarchical concept prototypes: k-means / diagonal-GMM clustering applied
level by level, coarser levels clustering the centroids of the level below.

Level 1 is the finest. All randomness flows through the config seed; runs are
bit-deterministic. k-means seeds with k-means++ and takes the best of
`n_init` restarts by distortion; empty clusters are repaired by stealing the
point farthest from its current centroid so cluster counts stay exact.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class ClusterError(ValueError):
    pass


@dataclass
class ClusterConfig:
    method: str = "kmeans"
    seed: int = 0
    max_iters: int = 100
    tol: float = 1e-8
    n_init: int = 4
    variance_floor: float = 1e-6
    weighted_levels: bool = False

    def __post_init__(self):
        if self.method not in ("kmeans", "gmm"):
            raise ClusterError(f"unknown clustering method {self.method!r}")
        if self.max_iters < 1:
            raise ClusterError("max_iters must be >= 1")
        if self.tol <= 0:
            raise ClusterError("tol must be > 0")


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    # (n, k) squared euclidean distances
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++: several d^2-proportional candidates per step, keep the
    one that most reduces potential. Scale-invariant given the same rng stream."""
    n = X.shape[0]
    trials = 2 + int(np.log(k)) if k > 1 else 1
    centers = np.empty((k, X.shape[1]), dtype=X.dtype)
    centers[0] = X[rng.integers(n)]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            cand_idx = rng.integers(n, size=trials)
        else:
            cand_idx = rng.choice(n, size=trials, p=d2 / total)
        best_pot, best_d2, best_c = np.inf, None, None
        for c in cand_idx:
            new_d2 = np.minimum(d2, ((X - X[c]) ** 2).sum(axis=1))
            pot = new_d2.sum()
            if pot < best_pot:
                best_pot, best_d2, best_c = pot, new_d2, c
        centers[j] = X[best_c]
        d2 = best_d2
    return centers


def _lloyd(X: np.ndarray, k: int, centers: np.ndarray,
           max_iters: int, tol: float) -> tuple[np.ndarray, np.ndarray, float]:
    centers = centers.copy()
    rows = np.arange(len(X))
    prev = np.inf
    assign = np.zeros(len(X), dtype=np.int64)
    for _ in range(max_iters):
        d2 = _sq_dists(X, centers)
        assign = d2.argmin(axis=1)
        # repair empty clusters by stealing the worst-fit point (keeps k exact,
        # but may bump distortion for this iteration)
        repaired = False
        for j in range(k):
            if not np.any(assign == j):
                worst = int(d2[rows, assign].argmax())
                assign[worst] = j
                repaired = True
        distortion = float(((X - centers[assign]) ** 2).sum())
        if not repaired and distortion > prev + 1e-9 * max(1.0, prev):
            raise ClusterError("distortion increased during Lloyd iteration")
        for j in range(k):
            centers[j] = X[assign == j].mean(axis=0)
        if prev - distortion <= tol * max(1.0, abs(prev)):
            prev = distortion
            break
        prev = distortion
    distortion = float(((X - centers[assign]) ** 2).sum())
    return centers, assign, distortion


def kmeans(X: np.ndarray, k: int,
           config: ClusterConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm, best of config.n_init k-means++ restarts."""
    config = config or ClusterConfig()
    X = np.asarray(X, dtype=np.float64)
    if k > X.shape[0]:
        raise ClusterError(f"k={k} exceeds number of points {X.shape[0]}")
    if not np.all(np.isfinite(X)):
        raise ClusterError("non-finite rows in clustering input")
    inits = []
    for i in range(max(1, config.n_init)):
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, i)))
        inits.append(_kmeans_pp(X, k, rng))
    # greedy seeding has little restart diversity on tiny inputs; there,
    # enumerate every k-subset of points as initial centers instead
    if math.comb(X.shape[0], k) <= 64:
        inits = [X[list(combo)] for combo in
                 itertools.combinations(range(X.shape[0]), k)]
    best = None
    for centers0 in inits:
        centers, assign, distortion = _lloyd(X, k, centers0,
                                             config.max_iters, config.tol)
        if best is None or distortion < best[2]:
            best = (centers, assign, distortion)
    return best[0], best[1]


def kmeans_distortion(X: np.ndarray, centers: np.ndarray,
                      assign: np.ndarray) -> float:
    return float(((np.asarray(X) - centers[assign]) ** 2).sum())


def gmm_fit(X: np.ndarray, k: int, config: ClusterConfig | None = None
            ) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Diagonal-covariance EM initialized from k-means.

    Returns (means, hard assignments by max responsibility, log-likelihoods).
    """
    config = config or ClusterConfig()
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if k > n:
        raise ClusterError(f"k={k} exceeds number of points {n}")
    means, assign = kmeans(X, k, config)
    var = np.empty((k, d))
    pi = np.empty(k)
    for j in range(k):
        members = X[assign == j]
        pi[j] = len(members) / n
        var[j] = members.var(axis=0) if len(members) > 1 else np.ones(d)
    var = np.maximum(var, config.variance_floor)
    pi = np.maximum(pi, 1e-12)
    pi /= pi.sum()

    log_liks: list[float] = []
    resp = None
    for _ in range(config.max_iters):
        # E step: log N(x | mu_j, diag var_j) + log pi_j
        log_p = -0.5 * (((X[:, None, :] - means[None]) ** 2 / var[None]).sum(axis=2)
                        + np.log(2 * np.pi * var).sum(axis=1)[None]) + np.log(pi)[None]
        m = log_p.max(axis=1, keepdims=True)
        log_norm = m[:, 0] + np.log(np.exp(log_p - m).sum(axis=1))
        log_liks.append(float(log_norm.sum()))
        resp = np.exp(log_p - log_norm[:, None])
        if len(log_liks) > 1 and abs(log_liks[-1] - log_liks[-2]) <= config.tol * max(
                1.0, abs(log_liks[-2])):
            break
        # M step
        nk = resp.sum(axis=0) + 1e-12
        means = (resp.T @ X) / nk[:, None]
        var = (resp.T @ (X ** 2)) / nk[:, None] - means ** 2
        var = np.maximum(var, config.variance_floor)
        pi = nk / nk.sum()
    return means, resp.argmax(axis=1), log_liks


def _cluster(X: np.ndarray, k: int, config: ClusterConfig
             ) -> tuple[np.ndarray, np.ndarray]:
    if config.method == "gmm":
        means, assign, _ = gmm_fit(X, k, config)
        return means, assign
    return kmeans(X, k, config)


@dataclass
class PrototypeLevel:
    centroids: np.ndarray
    # assignment of each level-(l-1) prototype to this level; None at level 1
    parent_of: np.ndarray | None = None


@dataclass
class PrototypeTree:
    levels: list[PrototypeLevel]                 # levels[0] is the finest
    concept_members: np.ndarray                  # concept -> level-1 prototype
    level_sizes: list[int]
    concept_tokens: list[str] | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def centroids(self, level: int) -> np.ndarray:
        """1-based level index, level 1 = finest."""
        return self.levels[level - 1].centroids

    def path_to_root(self, concept_index: int) -> list[int]:
        """Prototype index at each level from fine to coarse."""
        idx = int(self.concept_members[concept_index])
        path = [idx]
        for level in self.levels[1:]:
            idx = int(level.parent_of[idx])
            path.append(idx)
        return path


def build_tree(X: np.ndarray, level_sizes: Sequence[int],
               config: ClusterConfig | None = None,
               concept_tokens: Sequence[str] | None = None) -> PrototypeTree:
    """Cluster concept embeddings, then repeatedly cluster the centroids."""
    config = config or ClusterConfig()
    X = np.asarray(X, dtype=np.float64)
    level_sizes = [int(s) for s in level_sizes]
    if not level_sizes:
        raise ClusterError("level_sizes must name at least one level")
    if any(b >= a for a, b in zip(level_sizes, level_sizes[1:])):
        raise ClusterError(f"level sizes must strictly decrease: {level_sizes}")
    if level_sizes[-1] < 1:
        raise ClusterError("level sizes must be >= 1")
    if level_sizes[0] > X.shape[0]:
        raise ClusterError(
            f"finest level size {level_sizes[0]} exceeds {X.shape[0]} concepts")
    if concept_tokens is not None and len(concept_tokens) != X.shape[0]:
        raise ClusterError("concept token count does not match embedding rows")

    centroids, assign = _cluster(X, level_sizes[0], config)
    levels = [PrototypeLevel(centroids=centroids)]
    concept_members = assign
    for size in level_sizes[1:]:
        centroids, assign = _cluster(levels[-1].centroids, size, config)
        levels.append(PrototypeLevel(centroids=centroids, parent_of=assign))
    return PrototypeTree(
        levels=levels,
        concept_members=concept_members,
        level_sizes=level_sizes,
        concept_tokens=list(concept_tokens) if concept_tokens is not None else None,
        meta={"method": config.method, "seed": config.seed,
              "level_sizes": level_sizes},
    )


def nearest_concepts(tree: PrototypeTree, level: int, prototype_index: int,
                     top_k: int = 10) -> list[str]:
    """Concepts whose level-1 path reaches this prototype, nearest first.

    Returns tokens when the tree carries them, otherwise stringified indices.
    """
    if not 1 <= level <= tree.n_levels:
        raise IndexError(f"level {level} out of range 1..{tree.n_levels}")
    if not 0 <= prototype_index < tree.level_sizes[level - 1]:
        raise IndexError(f"prototype {prototype_index} out of range")
    members = [i for i in range(len(tree.concept_members))
               if tree.path_to_root(i)[level - 1] == prototype_index]
    center = tree.centroids(level)[prototype_index]
    emb = tree.meta.get("concept_embeddings")
    if emb is not None:
        emb = np.asarray(emb)
        members.sort(key=lambda i: float(((emb[i] - center) ** 2).sum()))
    members = members[:top_k]
    if tree.concept_tokens is not None:
        return [tree.concept_tokens[i] for i in members]
    return [str(i) for i in members]


def tree_to_json(tree: PrototypeTree) -> str:
    doc = {
        "levels": [
            {
                "size": int(level.centroids.shape[0]),
                "centroids": level.centroids.tolist(),
                "parent_of": None if level.parent_of is None
                else [int(p) for p in level.parent_of],
            }
            for level in tree.levels
        ],
        "concept_members": [int(m) for m in tree.concept_members],
        "meta": {
            "method": tree.meta.get("method"),
            "seed": tree.meta.get("seed"),
            "level_sizes": tree.level_sizes,
            "concept_tokens": tree.concept_tokens,
            "concept_embeddings": (
                np.asarray(tree.meta["concept_embeddings"]).tolist()
                if tree.meta.get("concept_embeddings") is not None else None),
        },
    }
    return json.dumps(doc)


def tree_from_json(text: str) -> PrototypeTree:
    doc = json.loads(text)
    if not doc.get("levels"):
        raise ClusterError("tree JSON has no levels")
    levels = [
        PrototypeLevel(
            centroids=np.array(entry["centroids"], dtype=np.float64),
            parent_of=(None if entry["parent_of"] is None
                       else np.array(entry["parent_of"], dtype=np.int64)),
        )
        for entry in doc["levels"]
    ]
    meta = doc.get("meta", {})
    extra = {"method": meta.get("method"), "seed": meta.get("seed")}
    if meta.get("concept_embeddings") is not None:
        extra["concept_embeddings"] = np.array(meta["concept_embeddings"])
    return PrototypeTree(
        levels=levels,
        concept_members=np.array(doc["concept_members"], dtype=np.int64),
        level_sizes=[lvl["size"] for lvl in doc["levels"]],
        concept_tokens=meta.get("concept_tokens"),
        meta=extra,
    )


def tree_to_dot(tree: PrototypeTree) -> str:
    """Structure-and-labels export for graph viewers."""
    if not tree.levels:
        raise ClusterError("cannot export a tree with no levels")
    lines = ["digraph prototype_tree {", "  rankdir=BT;"]
    for li, level in enumerate(tree.levels):
        for f in range(level.centroids.shape[0]):
            lines.append(f'  L{li + 1}_{f} [label="L{li + 1}/{f}" shape=box];')
    for ci in range(len(tree.concept_members)):
        tok = (tree.concept_tokens[ci] if tree.concept_tokens is not None
               else f"c{ci}")
        lines.append(f'  C{ci} [label="{tok}"];')
        lines.append(f"  C{ci} -> L1_{int(tree.concept_members[ci])};")
    for li, level in enumerate(tree.levels[1:], start=2):
        for child, parent in enumerate(level.parent_of):
            lines.append(f"  L{li - 1}_{child} -> L{li}_{int(parent)};")
    lines.append("}")
    return "\n".join(lines)
