"""Context construction.

A context is a group of samples with shared characteristics; every sample
belongs to exactly one. Three strategies are supported: k-means clusters
over input features, superclass maps (class id -> context id), and domain
tags. Proportions lambda_k are sample fractions counted over the dataset.

Context ids are 0-based throughout.
"""

import json
from dataclasses import dataclass, field

import numpy as np


def _squared_distances(x, centroids):
    # |x|^2 - 2 x.c + |c|^2; clip tiny negatives from cancellation
    d2 = (
        (x * x).sum(axis=1)[:, None]
        - 2.0 * x @ centroids.T
        + (centroids * centroids).sum(axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def kmeans_plusplus(x, k, rng):
    """k-means++ seeding: D^2-weighted sampling of k initial centroids."""
    n = x.shape[0]
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    centroids[0] = x[rng.integers(n)]
    d2 = _squared_distances(x, centroids[:1]).ravel()
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining points coincide with a chosen centroid
            centroids[i] = x[rng.integers(n)]
            continue
        probs = d2 / total
        centroids[i] = x[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, _squared_distances(x, centroids[i : i + 1]).ravel())
    return centroids


def nearest_centroid(x, centroids):
    """Index of the closest centroid for each row of x."""
    return np.argmin(_squared_distances(np.asarray(x, dtype=np.float64), centroids), axis=1)


def kmeans_fit(features, k, rng, max_iters=100):
    """Lloyd's algorithm with k-means++ seeding.

    Runs until the assignment reaches a fixpoint or max_iters update rounds.
    Empty clusters are reseeded at the point farthest from its assigned
    centroid. Deterministic given the rng. Returns (centroids[k,D], ids[n]).
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be (n, D), got shape {x.shape}")
    n = x.shape[0]
    if n < k:
        raise ValueError(f"insufficient data: n={n} < k={k}")
    centroids = kmeans_plusplus(x, k, rng)
    ids = _assign_with_reseed(x, centroids)
    for _ in range(int(max_iters)):
        for j in range(k):
            centroids[j] = x[ids == j].mean(axis=0)
        new_ids = _assign_with_reseed(x, centroids)
        if np.array_equal(new_ids, ids):
            break
        ids = new_ids
    return centroids, ids


def _assign_with_reseed(x, centroids):
    ids = nearest_centroid(x, centroids)
    empty = set(range(centroids.shape[0])) - set(np.unique(ids).tolist())
    while empty:
        d2 = _squared_distances(x, centroids)
        assigned = d2[np.arange(x.shape[0]), ids]
        j = int(np.argmax(assigned))
        centroids[empty.pop()] = x[j]
        ids = nearest_centroid(x, centroids)
        empty = set(range(centroids.shape[0])) - set(np.unique(ids).tolist())
    return ids


def kmeans_distortion(features, centroids, ids):
    """Sum of squared distances from each point to its assigned centroid."""
    x = np.asarray(features, dtype=np.float64)
    diff = x - centroids[ids]
    return float((diff * diff).sum())


def context_proportions(ids, n_contexts):
    """lambda_k = count(k) / n. Every context must have at least one member."""
    ids = np.asarray(ids)
    if ids.size == 0:
        raise ValueError("ids is empty")
    counts = np.bincount(ids, minlength=n_contexts)
    if counts.size > n_contexts:
        raise ValueError(f"id out of range: max id {ids.max()} >= K={n_contexts}")
    if (counts == 0).any():
        missing = np.flatnonzero(counts == 0).tolist()
        raise ValueError(f"contexts {missing} have no members; lambda_k must be > 0")
    return counts.astype(np.float64) / ids.size


def extract_features(x, mode):
    """Feature matrix for clustering: raw flatten or channel-mean pooling."""
    x = np.asarray(x, dtype=np.float64)
    if mode == "flat":
        return x.reshape(x.shape[0], -1)
    if mode == "channel_mean":
        if x.ndim < 3:
            return x.reshape(x.shape[0], -1)
        return x.reshape(x.shape[0], x.shape[1], -1).mean(axis=2)
    raise ValueError(f"unknown feature mode {mode!r}")


@dataclass
class ContextAssignment:
    """Frozen per-sample context labels with dataset proportions.

    Carries whatever the strategy needs to label new (e.g. test) samples:
    centroids for kmeans, the class map for superclasses, the tag table for
    domains.
    """

    n_contexts: int
    ids: np.ndarray
    lambdas: np.ndarray
    strategy: str
    centroids: np.ndarray | None = None
    feature_mode: str = "flat"
    class_map: dict = field(default=None)
    domain_to_id: dict = field(default=None)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.lambdas = np.asarray(self.lambdas, dtype=np.float64)
        if self.ids.min(initial=0) < 0 or self.ids.max(initial=0) >= self.n_contexts:
            raise ValueError("context id out of range")
        if abs(self.lambdas.sum() - 1.0) > 1e-12:
            raise ValueError("lambdas must sum to 1")

    def assign(self, dataset):
        """Context ids for new samples under the fitted strategy."""
        if self.strategy == "kmeans":
            feats = extract_features(dataset.x, self.feature_mode)
            return nearest_centroid(feats, self.centroids)
        if self.strategy == "superclass":
            return _map_classes(dataset.y, self.class_map)
        if self.strategy == "domain":
            return _map_domains(dataset.domains, self.domain_to_id)
        raise ValueError(f"unknown strategy {self.strategy!r}")


def _map_classes(labels, class_map):
    ids = np.empty(len(labels), dtype=np.int64)
    for i, label in enumerate(np.asarray(labels).tolist()):
        if int(label) not in class_map:
            raise ValueError(f"class {int(label)} missing from superclass map")
        ids[i] = class_map[int(label)]
    return ids


def _map_domains(tags, domain_to_id):
    if tags is None:
        raise ValueError("domain strategy requires per-sample domain tags")
    ids = np.empty(len(tags), dtype=np.int64)
    for i, tag in enumerate(tags):
        if tag not in domain_to_id:
            raise ValueError(f"unknown domain tag {tag!r}")
        ids[i] = domain_to_id[tag]
    return ids


def assign_contexts(
    dataset,
    strategy,
    n_contexts=None,
    rng=None,
    class_map=None,
    domains=None,
    feature_mode="flat",
    max_iters=100,
):
    """Build a ContextAssignment for a dataset under one strategy.

    kmeans needs (n_contexts, rng); superclass needs a class->context map;
    domain needs per-sample tags (argument or dataset.domains attribute).
    """
    if strategy == "kmeans":
        if n_contexts is None or rng is None:
            raise ValueError("kmeans strategy requires n_contexts and rng")
        feats = extract_features(dataset.x, feature_mode)
        centroids, ids = kmeans_fit(feats, n_contexts, rng, max_iters=max_iters)
        return ContextAssignment(
            n_contexts=n_contexts,
            ids=ids,
            lambdas=context_proportions(ids, n_contexts),
            strategy="kmeans",
            centroids=centroids,
            feature_mode=feature_mode,
        )
    if strategy == "superclass":
        if class_map is None:
            raise ValueError("superclass strategy requires a class map")
        class_map = {int(k): int(v) for k, v in class_map.items()}
        k = n_contexts if n_contexts is not None else max(class_map.values()) + 1
        ids = _map_classes(dataset.y, class_map)
        return ContextAssignment(
            n_contexts=k,
            ids=ids,
            lambdas=context_proportions(ids, k),
            strategy="superclass",
            class_map=class_map,
        )
    if strategy == "domain":
        tags = domains if domains is not None else getattr(dataset, "domains", None)
        if tags is None:
            raise ValueError("domain strategy requires per-sample domain tags")
        table = {tag: i for i, tag in enumerate(sorted(set(tags)))}
        ids = _map_domains(tags, table)
        return ContextAssignment(
            n_contexts=len(table),
            ids=ids,
            lambdas=context_proportions(ids, len(table)),
            strategy="domain",
            domain_to_id=table,
        )
    raise ValueError(f"unknown context strategy {strategy!r}")


def load_context_sidecar(path):
    """Read a superclass map or domain tag list from a JSON sidecar.

    Format: {"map": {"<class_id>": <context_id>, ...}} or
    {"domains": [<tag per sample>, ...]}.
    """
    with open(path) as fh:
        payload = json.load(fh)
    if "map" in payload:
        return {"class_map": {int(k): int(v) for k, v in payload["map"].items()}}
    if "domains" in payload:
        return {"domains": list(payload["domains"])}
    raise ValueError(f"sidecar {path} has neither 'map' nor 'domains'")
