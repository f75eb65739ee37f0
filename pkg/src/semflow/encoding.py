"""PCA compression, k-means codebooks and VLAD aggregation."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .binio import FormatError, parse_int, read_header, read_payload, write_record

log = logging.getLogger(__name__)

PCA_DIM = 64
N_CLUSTERS = 256
VLAD_DIM = PCA_DIM * N_CLUSTERS  # 16,384


@dataclass
class PcaModel:
    mean: np.ndarray
    basis: np.ndarray  # (out_dim, in_dim), orthonormal rows
    explained_variance: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.basis.shape[1]

    @property
    def out_dim(self) -> int:
        return self.basis.shape[0]


def fit_pca(X: np.ndarray, out_dim: int = PCA_DIM) -> PcaModel:
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if n <= out_dim:
        raise ValueError(f"PCA to {out_dim} dims needs more than {out_dim} samples, got {n}")
    if d < out_dim:
        raise ValueError(f"cannot project {d}-dim descriptors to {out_dim} dims")
    mean = X.mean(axis=0)
    Xc = X - mean
    if not np.any(Xc):
        raise ValueError("PCA input has zero variance (all samples identical)")
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    basis = vt[:out_dim]
    # Sign convention: the largest-magnitude entry of each direction is positive.
    flip = np.sign(basis[np.arange(out_dim), np.abs(basis).argmax(axis=1)])
    basis = basis * flip[:, None]
    var = (s[:out_dim] ** 2) / (n - 1)
    return PcaModel(mean, basis, var)


def apply_pca(model: PcaModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.in_dim:
        raise ValueError(f"PCA expects {model.in_dim}-dim input, got {x.shape[-1]}")
    return (x - model.mean) @ model.basis.T


@dataclass
class Codebook:
    centers: np.ndarray  # (k, dim)
    inertia: list[float] = field(default_factory=list)
    iterations: int = 0
    seed: int = 0

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


def sq_distances(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(axis=1)[:, None] - 2.0 * X @ C.T + (C * C).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def nearest_center(X: np.ndarray, C: np.ndarray, chunk: int = 8192) -> tuple[np.ndarray, np.ndarray]:
    """Index and squared distance of the closest centre; ties go to the lower index."""
    idx = np.empty(len(X), dtype=np.int64)
    dist = np.empty(len(X))
    for s in range(0, len(X), chunk):
        d = sq_distances(X[s:s + chunk], C)
        idx[s:s + chunk] = d.argmin(axis=1)
        dist[s:s + chunk] = d[np.arange(len(d)), idx[s:s + chunk]]
    return idx, dist


def _canonical_order(X: np.ndarray) -> np.ndarray:
    return X[np.lexsort(X.T[::-1])]


def kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = sq_distances(X, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise ValueError(f"fewer than {k} distinct points; cannot seed {k} centres")
        i = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
        i = min(i, n - 1)
        while d2[i] <= 0:  # guard against landing on a zero-weight row at the boundary
            i = (i + 1) % n
        centers.append(X[i])
        d2 = np.minimum(d2, sq_distances(X, X[i][None])[:, 0])
    return np.array(centers)


def fit_kmeans(X: np.ndarray, k: int = N_CLUSTERS, seed: int = 0, max_iter: int = 100, tol: float = 1e-4) -> Codebook:
    """Lloyd's algorithm from k-means++ seeds.

    Rows are put into lexicographic order first, so the result does not
    depend on the order in which samples arrive. Stops when the relative
    inertia improvement drops below ``tol`` or after ``max_iter`` rounds.
    An empty cluster is re-seeded at the point farthest from its centre.
    """
    X = np.asarray(X, dtype=np.float64)
    if len(X) < k:
        raise ValueError(f"k-means with k={k} needs at least {k} samples, got {len(X)}")
    X = _canonical_order(X)
    rng = np.random.default_rng(seed)
    C = kmeans_pp(X, k, rng)
    history: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        labels, dist = nearest_center(X, C)
        inertia = float(dist.sum())
        history.append(inertia)
        if len(history) > 1:
            prev = history[-2]
            if prev <= 0 or (prev - inertia) / prev < tol:
                break
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(C)
        np.add.at(sums, labels, X)
        newC = C.copy()
        filled = counts > 0
        newC[filled] = sums[filled] / counts[filled, None]
        for j in np.flatnonzero(~filled):
            far = int(dist.argmax())
            newC[j] = X[far]
            dist[far] = 0.0
        C = newC
    if len(np.unique(C, axis=0)) < k:
        raise ValueError("k-means produced duplicate centres; input has too few distinct points")
    return Codebook(C, history, it, seed)


def normalize_vlad(v: np.ndarray) -> np.ndarray:
    """Signed square root, then unit L2 norm. The zero vector is returned unchanged."""
    v = np.sign(v) * np.sqrt(np.abs(v))
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def vlad_encode(descs: np.ndarray, codebook: Codebook, normalize: bool = True) -> np.ndarray:
    descs = np.asarray(descs, dtype=np.float64)
    out = np.zeros((codebook.k, codebook.dim))
    if len(descs) == 0:
        return out.ravel()
    if descs.shape[1] != codebook.dim:
        raise ValueError(f"descriptor dim {descs.shape[1]} does not match codebook dim {codebook.dim}")
    idx, _ = nearest_center(descs, codebook.centers)
    np.add.at(out, idx, descs - codebook.centers[idx])
    out = out.ravel()
    return normalize_vlad(out) if normalize else out


# -- model files ------------------------------------------------------------

def save_pca(model: PcaModel, path: str | os.PathLike, seed: int = 0) -> None:
    with open(path, "wb") as fh:
        payload = np.concatenate([model.mean, model.basis.ravel(), model.explained_variance])
        write_record(fh, "SFP1", [model.in_dim, model.out_dim, seed], payload)


def load_pca(path: str | os.PathLike) -> PcaModel:
    with open(path, "rb") as fh:
        head = read_header(fh, "SFP1", 3)
        if head is None:
            raise FormatError(f"empty PCA file: {path}")
        d, k = parse_int(head[0], "in_dim"), parse_int(head[1], "out_dim")
        raw = read_payload(fh, d + k * d + k).astype(np.float64)
    return PcaModel(raw[:d], raw[d:d + k * d].reshape(k, d), raw[d + k * d:])


def save_codebook(cb: Codebook, path: str | os.PathLike) -> None:
    final = cb.inertia[-1] if cb.inertia else 0.0
    with open(path, "wb") as fh:
        write_record(fh, "SFC1", [cb.k, cb.dim, cb.seed, cb.iterations, repr(final)], cb.centers.ravel())


def load_codebook(path: str | os.PathLike) -> Codebook:
    with open(path, "rb") as fh:
        head = read_header(fh, "SFC1", 5)
        if head is None:
            raise FormatError(f"empty codebook file: {path}")
        k, dim, seed, iters = (parse_int(x, n) for x, n in zip(head[:4], ("k", "dim", "seed", "iterations")))
        centers = read_payload(fh, k * dim).astype(np.float64).reshape(k, dim)
    return Codebook(centers, [float(head[4])], iters, seed)
