"""Prior analysis: PCA, descriptor importance (leave-one-out) and linear reconstruction.

All computations run in float64. Stacks are (H, W, K) arrays or
:class:`~multinex.guidance.GuidanceStack` objects.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .guidance import LUMINANCE_POOL, GuidanceStack, candidate_stack

DEFAULT_D = 3
DEFAULT_RIDGE = 1e-3
IMPORTANCE_HEADER = ("prior", "deltaE", "rankE", "deltaG", "rankG", "avg_rank")


def _stack_tensor(stack) -> np.ndarray:
    t = stack.tensor if isinstance(stack, GuidanceStack) else np.asarray(stack)
    if t.ndim != 3:
        raise ValueError(f"expected an (H, W, K) stack, got shape {t.shape}")
    return t.astype(np.float64)


# ----------------------------------------------------------------------- PCA

@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (K, K), column k is the k-th principal direction
    eigenvalues: np.ndarray

    @property
    def K(self) -> int:
        return self.mean.shape[0]

    def project(self, vectors, D: int | None = None) -> np.ndarray:
        D = self.K if D is None else D
        return (np.asarray(vectors, np.float64) - self.mean) @ self.components[:, :D]

    def reconstruct(self, scores) -> np.ndarray:
        D = scores.shape[-1]
        return scores @ self.components[:, :D].T + self.mean


def fit_pca(vectors) -> PcaModel:
    """PCA of the rows of an (N, K) matrix via the K x K covariance (1/N).

    Each component is signed so that its largest-magnitude entry is positive.
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"fit_pca expects an (N, K) matrix, got shape {X.shape}")
    N, K = X.shape
    if K < 1 or N < K:
        raise ValueError(f"fit_pca needs N >= K >= 1, got N={N}, K={K}")
    if not np.all(np.isfinite(X)):
        raise ValueError("fit_pca input contains non-finite values")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = (Xc.T @ Xc) / N
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals, kind="stable")[::-1]
    vals, vecs = vals[order], vecs[:, order]
    for k in range(K):
        if vecs[np.argmax(np.abs(vecs[:, k])), k] < 0:
            vecs[:, k] = -vecs[:, k]
    return PcaModel(mean, vecs, vals)


def stack_pca(stack) -> PcaModel:
    t = _stack_tensor(stack)
    return fit_pca(t.reshape(-1, t.shape[2]))


# ---------------------------------------------------------- importance maps

def gradient_map(channel) -> np.ndarray:
    """Sobel magnitude with replicated borders."""
    c = np.asarray(channel, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"gradient_map expects a single (H, W) channel, got shape {c.shape}")
    gx = ndimage.sobel(c, axis=1, mode="nearest")
    gy = ndimage.sobel(c, axis=0, mode="nearest")
    return np.sqrt(gx * gx + gy * gy)


def orthogonal_energy(stack, pca: PcaModel | None = None) -> np.ndarray:
    """Per-pixel norm of the centred pixel vector outside the first principal direction."""
    t = _stack_tensor(stack)
    H, W, K = t.shape
    if K < 2:
        raise ValueError("orthogonal energy needs at least two descriptors")
    pca = stack_pca(t) if pca is None else pca
    if pca.K != K:
        raise ValueError(f"PCA fitted on {pca.K} descriptors, stack has {K}")
    z = pca.project(t.reshape(-1, K))[:, 1:]
    return np.sqrt(np.sum(z * z, axis=1)).reshape(H, W)


def max_gradient(stack) -> np.ndarray:
    t = _stack_tensor(stack)
    g = gradient_map(t[:, :, 0])
    for k in range(1, t.shape[2]):
        g = np.maximum(g, gradient_map(t[:, :, k]))
    return g


@dataclass(frozen=True)
class DescriptorImportance:
    name: str
    delta_e: float
    delta_g: float
    map_e: np.ndarray
    map_g: np.ndarray
    rank_e: int
    rank_g: int
    avg_rank: float


@dataclass(frozen=True)
class ImportanceReport:
    rows: tuple[DescriptorImportance, ...]
    energy: np.ndarray  # E_K of the full pool
    gradient: np.ndarray  # G_K of the full pool

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(r.name for r in self.rows)

    def __getitem__(self, name) -> DescriptorImportance:
        return self.rows[self.names.index(name)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(IMPORTANCE_HEADER)
        for r in self.rows:
            w.writerow([r.name, repr(r.delta_e), r.rank_e, repr(r.delta_g), r.rank_g, repr(r.avg_rank)])
        return buf.getvalue()


def _ranks(values, names):
    # 1 = largest; ties broken by descriptor name so the ranks stay a permutation
    order = sorted(range(len(values)), key=lambda i: (-values[i], names[i]))
    ranks = [0] * len(values)
    for r, i in enumerate(order, start=1):
        ranks[i] = r
    return ranks


def descriptor_importance(img_or_stack, pool=LUMINANCE_POOL) -> ImportanceReport:
    """Leave-one-out unique contribution of each descriptor.

    ``img_or_stack`` is an RGB image (the descriptors named in ``pool`` are
    computed from it) or a ready :class:`GuidanceStack`, in which case
    ``pool`` is ignored. Rows follow the input order; the computation itself
    runs in name order, so permuting the pool permutes the rows and leaves
    every value unchanged.
    """
    if isinstance(img_or_stack, GuidanceStack):
        stack = img_or_stack
    else:
        stack = candidate_stack(img_or_stack, pool)
    names = stack.descriptor_names
    K = len(names)
    if K < 3:
        raise ValueError(f"descriptor importance needs a pool of at least 3 descriptors, got {K}")
    if len(set(names)) != K:
        raise ValueError("descriptor names in the pool must be unique")

    canon = sorted(names)
    t = _stack_tensor(stack)[:, :, [names.index(n) for n in canon]]
    grads = [gradient_map(t[:, :, k]) for k in range(K)]
    g_full = _max_of(grads)
    e_full = orthogonal_energy(t)

    maps = {}
    for k, name in enumerate(canon):
        keep = [j for j in range(K) if j != k]
        g_rest = _max_of([grads[j] for j in keep])
        e_rest = orthogonal_energy(t[:, :, keep])
        maps[name] = (np.maximum(0.0, e_full - e_rest), np.maximum(0.0, g_full - g_rest))

    de = [float(np.mean(maps[n][0])) for n in canon]
    dg = [float(np.mean(maps[n][1])) for n in canon]
    rank_e = dict(zip(canon, _ranks(de, canon)))
    rank_g = dict(zip(canon, _ranks(dg, canon)))
    rows = []
    for name in names:
        i = canon.index(name)
        rows.append(DescriptorImportance(
            name, de[i], dg[i], maps[name][0], maps[name][1],
            rank_e[name], rank_g[name], (rank_e[name] + rank_g[name]) / 2,
        ))
    return ImportanceReport(tuple(rows), e_full, g_full)


def _max_of(maps):
    out = maps[0]
    for m in maps[1:]:
        out = np.maximum(out, m)
    return out


# ------------------------------------------------------ linear reconstruction

def ridge_solve(Z, T, lam: float) -> np.ndarray:
    """W minimising ||Z W - T||^2 + lam ||W||^2."""
    if not lam > 0:
        raise ValueError(f"ridge parameter must be positive, got {lam}")
    Z = np.asarray(Z, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    A = Z.T @ Z + lam * np.eye(Z.shape[1])
    return np.linalg.solve(A, Z.T @ T)


@dataclass(frozen=True)
class LraResult:
    reconstruction: np.ndarray  # (H, W, C_t)
    weights: np.ndarray  # (D, C_t)
    target_mean: np.ndarray
    pca: PcaModel
    D: int
    ridge: float
    mse: tuple[float, ...]  # per target channel

    def report(self) -> dict:
        return {
            "D": self.D,
            "ridge": self.ridge,
            "mse": list(self.mse),
            "mean_mse": float(np.mean(self.mse)),
            "explained_variance": [float(v) for v in self.pca.eigenvalues[:self.D]],
            "weights": self.weights.tolist(),
        }


def lra(stack, target, D: int = DEFAULT_D, ridge: float = DEFAULT_RIDGE) -> LraResult:
    """Reconstruct ``target`` linearly from the top-``D`` principal scores of ``stack``."""
    t = _stack_tensor(stack)
    H, W, K = t.shape
    tgt = np.asarray(target, dtype=np.float64)
    if tgt.ndim == 2:
        tgt = tgt[:, :, None]
    if tgt.shape[:2] != (H, W):
        raise ValueError(f"target {tgt.shape} and stack {t.shape} differ in size")
    if not 1 <= D <= K:
        raise ValueError(f"D must satisfy 1 <= D <= K={K}, got {D}")
    pca = stack_pca(t)
    Z = pca.project(t.reshape(-1, K), D)
    T = tgt.reshape(H * W, -1)
    mu_t = T.mean(axis=0)
    Wt = ridge_solve(Z, T - mu_t, ridge)
    rec = Z @ Wt + mu_t
    mse = tuple(float(v) for v in np.mean((rec - T) ** 2, axis=0))
    return LraResult(rec.reshape(tgt.shape), Wt, mu_t, pca, D, ridge, mse)


# --------------------------------------------------------------- correlation

def collapse(m) -> np.ndarray:
    """Multi-channel map to a single channel by the per-pixel L2 norm."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 3:
        return np.sqrt(np.sum(m * m, axis=2))
    if m.ndim != 2:
        raise ValueError(f"expected an (H, W) or (H, W, C) map, got shape {m.shape}")
    return m


def correlation_matrix(maps: dict) -> tuple[tuple[str, ...], np.ndarray]:
    """Pearson correlation between flattened maps; constant maps give NaN off the diagonal."""
    names = tuple(maps)
    X = np.stack([collapse(maps[n]).ravel() for n in names])
    Xc = X - X.mean(axis=1, keepdims=True)
    norm = np.sqrt(np.sum(Xc * Xc, axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        R = (Xc @ Xc.T) / np.outer(norm, norm)
    np.fill_diagonal(R, 1.0)
    return names, np.clip(R, -1.0, 1.0)


def correlation_csv(names, R) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("",) + tuple(names))
    for n, row in zip(names, R):
        w.writerow([n] + [repr(float(v)) for v in row])
    return buf.getvalue()
