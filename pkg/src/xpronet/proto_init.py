"""Prototype-matrix initialisation from per-category clusters of global features."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Sample, flip_image

PM_MAGIC = b"XPRO-PM-1\n"
CLUSTER_MEAN = "cluster-mean"
FALLBACK = "fallback"
FALLBACK_STD = 0.01


@dataclass
class GlobalFeatures:
    visual: np.ndarray
    flipped: np.ndarray
    text: np.ndarray


class ToyExtractor:
    """Fixed random projections standing in for pretrained global encoders.

    The visual branch projects the mean patch vector to ``visual_dim``; the
    textual branch projects bag-of-words counts to ``text_dim``.
    """

    def __init__(self, channels: int, vocab_size: int, visual_dim: int = 16, text_dim: int = 16, seed: int = 0):
        rng = np.random.default_rng([seed, 101])
        self.visual_proj = rng.normal(size=(channels, visual_dim)) / np.sqrt(channels)
        self.text_proj = rng.normal(size=(vocab_size, text_dim)) / np.sqrt(vocab_size)
        self.vocab_size = vocab_size

    def bag_of_words(self, report: Sequence[int]) -> np.ndarray:
        return np.bincount(np.asarray(report, dtype=np.int64), minlength=self.vocab_size)[: self.vocab_size].astype(np.float64)

    def __call__(self, sample: Sample) -> GlobalFeatures:
        image = np.asarray(sample.image)
        mean_patch = image.reshape(-1, image.shape[-1]).mean(axis=0)
        flipped = flip_image(image)
        mean_flipped = flipped.reshape(-1, image.shape[-1]).mean(axis=0)
        return GlobalFeatures(
            visual=mean_patch @ self.visual_proj,
            flipped=mean_flipped @ self.visual_proj,
            text=self.bag_of_words(sample.report) @ self.text_proj,
        )


def extract_global_features(sample: Sample, extractor: ToyExtractor) -> GlobalFeatures:
    return extractor(sample)


def build_class_feature_sets(samples: Sequence[Sample], extractor: ToyExtractor, n_labels: int) -> list[np.ndarray]:
    """Per category k, every concat(visual, text) and concat(flipped, text) of samples with y_k = 1."""
    sets: list[list[np.ndarray]] = [[] for _ in range(n_labels)]
    for s in samples:
        active = np.flatnonzero(s.labels)
        if not len(active):
            continue
        g = extractor(s)
        pair = (np.concatenate([g.visual, g.text]), np.concatenate([g.flipped, g.text]))
        for k in active:
            sets[k].extend(pair)
    dim = extractor.visual_proj.shape[1] + extractor.text_proj.shape[1]
    return [np.asarray(s, dtype=np.float64).reshape(-1, dim) for s in sets]


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    objective: float
    history: list[float] = field(default_factory=list)
    n_iter: int = 0


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = (
        np.sum(points * points, axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + np.sum(centroids * centroids, axis=1)[None, :]
    )
    return np.maximum(d, 0.0)


def _wcss(points, assignments, centroids) -> float:
    diff = points - centroids[assignments]
    return float(np.sum(diff * diff))


def kmeans_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centroids = [points[rng.integers(n)]]
    closest = np.sum((points - centroids[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centroids.append(points[idx])
        closest = np.minimum(closest, np.sum((points - points[idx]) ** 2, axis=1))
    return np.array(centroids, dtype=np.float64)


def kmeans(points, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6) -> KMeansResult:
    """Lloyd iterations from k-means++ seeding.

    Empty clusters are re-seeded to the point farthest from its own centroid.
    The within-cluster sum of squares is recorded after every update and must
    never increase.
    """
    points = np.asarray(points, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(points) == 0:
        raise ValueError("kmeans needs at least one point")
    if k > len(points):
        raise ValueError(f"k={k} exceeds the number of points ({len(points)})")
    rng = np.random.default_rng(seed)
    centroids = kmeans_plus_plus(points, k, rng)
    history: list[float] = []
    assignments = np.zeros(len(points), dtype=np.int64)
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        assignments = np.argmin(_sq_dists(points, centroids), axis=1)
        new = centroids.copy()
        counts = np.bincount(assignments, minlength=k)
        for j in range(k):
            if counts[j]:
                new[j] = points[assignments == j].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            own = np.sum((points - new[assignments]) ** 2, axis=1)
            taken: set[int] = set()
            for j in empty:
                order = np.argsort(-own, kind="stable")
                pick = next(int(i) for i in order if int(i) not in taken) if len(taken) < len(points) else int(order[0])
                taken.add(pick)
                new[j] = points[pick]
        objective = _wcss(points, assignments, new)
        if history and objective > history[-1] * (1.0 + 1e-12) + 1e-12:
            raise AssertionError(f"k-means objective increased: {history[-1]} -> {objective}")
        history.append(objective)
        shift = float(np.max(np.sqrt(np.sum((new - centroids) ** 2, axis=1))))
        centroids = new
        if shift < tol:
            break
    assignments = np.argmin(_sq_dists(points, centroids), axis=1)
    return KMeansResult(assignments, centroids, _wcss(points, assignments, centroids), history, n_iter)


@dataclass
class PrototypeMatrix:
    values: np.ndarray  # [N_labels, N_protos, D]
    provenance: np.ndarray  # [N_labels, N_protos] of str

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def cluster_mean_fraction(self) -> float:
        return float(np.mean(self.provenance == CLUSTER_MEAN))


def init_prototype_matrix(
    sets: Sequence[np.ndarray], n_protos: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6
) -> tuple[PrototypeMatrix, list[KMeansResult | None]]:
    """Cluster each category's feature set into ``n_protos`` groups and average them.

    Categories with no members get N(0, 0.01^2) rows; categories with fewer
    members than ``n_protos`` cycle their members with the same jitter. Both
    are tagged ``fallback``, as is any cluster left empty by k-means.
    """
    if n_protos < 1:
        raise ValueError("n_protos must be >= 1")
    dim = sets[0].shape[1]
    values = np.zeros((len(sets), n_protos, dim))
    provenance = np.full((len(sets), n_protos), FALLBACK, dtype=object)
    results: list[KMeansResult | None] = []
    for k, members in enumerate(sets):
        rng = np.random.default_rng([seed, k])
        if len(members) == 0:
            values[k] = rng.normal(scale=FALLBACK_STD, size=(n_protos, dim))
            results.append(None)
        elif len(members) < n_protos:
            idx = np.arange(n_protos) % len(members)
            values[k] = members[idx] + rng.normal(scale=FALLBACK_STD, size=(n_protos, dim))
            results.append(None)
        else:
            res = kmeans(members, n_protos, seed=int(rng.integers(2**31)), max_iter=max_iter, tol=tol)
            counts = np.bincount(res.assignments, minlength=n_protos)
            for i in range(n_protos):
                if counts[i]:
                    values[k, i] = members[res.assignments == i].mean(axis=0)
                    provenance[k, i] = CLUSTER_MEAN
                else:
                    values[k, i] = res.centroids[i]
            results.append(res)
    return PrototypeMatrix(values, provenance.astype(str)), results


def random_prototype_matrix(n_labels: int, n_protos: int, dim: int, seed: int, std: float = 0.02) -> PrototypeMatrix:
    rng = np.random.default_rng([seed, 211])
    values = rng.normal(scale=std, size=(n_labels, n_protos, dim))
    return PrototypeMatrix(values, np.full((n_labels, n_protos), FALLBACK))


def save_pm(path, values: np.ndarray) -> None:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 3:
        raise ValueError(f"prototype matrix must be 3-d, got shape {values.shape}")
    with open(path, "wb") as fh:
        fh.write(PM_MAGIC)
        fh.write(struct.pack("<3q", *values.shape))
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def load_pm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(PM_MAGIC):
        raise ValueError(f"{path}: not an XPRO-PM-1 file")
    pos = len(PM_MAGIC)
    dims = struct.unpack("<3q", raw[pos : pos + 24])
    data = np.frombuffer(raw[pos + 24 :], dtype="<f8")
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{path}: expected {int(np.prod(dims))} values, found {data.size}")
    return data.reshape(dims).astype(np.float64)


def export_pm_csv(path, values: np.ndarray) -> None:
    """One row per prototype: category, index, then the D coordinates."""
    values = np.asarray(values)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "i"] + [f"x{j}" for j in range(values.shape[2])])
        for k in range(values.shape[0]):
            for i in range(values.shape[1]):
                w.writerow([k, i] + [repr(float(v)) for v in values[k, i]])
