"""Dense float32 kernels: matmul, one-sided Jacobi SVD, projection similarity."""
from __future__ import annotations

import numpy as np

__all__ = [
    "LinalgError",
    "SVDConvergenceError",
    "as_matrix",
    "matmul",
    "svd",
    "cosine_similarity_flat",
    "mean_abs_column_cosine",
    "sign_align",
    "MAX_SVD_DIM",
]

MAX_SVD_DIM = 1024
_MAX_SWEEPS = 60
# rotate a column pair while |<a_p, a_q>| > _ROT_TOL * |a_p| * |a_q|
_ROT_TOL = 1e-13


class LinalgError(ValueError):
    pass


class SVDConvergenceError(LinalgError):
    def __init__(self, off_norm: float, sweeps: int):
        super().__init__(
            f"Jacobi SVD did not converge in {sweeps} sweeps (off-diagonal norm {off_norm:.3e})"
        )
        self.off_norm = off_norm
        self.sweeps = sweeps


def as_matrix(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float32)
    if A.ndim != 2:
        raise LinalgError(f"expected a 2-D matrix, got shape {A.shape}")
    return A


def matmul(A, B) -> np.ndarray:
    """float32 product accumulated in float64."""
    A = np.asarray(A)
    B = np.asarray(B)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise LinalgError(f"cannot multiply {A.shape} by {B.shape}")
    return (A.astype(np.float64) @ B.astype(np.float64)).astype(np.float32)


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """n-1 rounds of n/2 disjoint column pairs covering every pair once (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotate the rows of X (k x m) until they are mutually orthogonal.

    Returns (VT @ X, VT). Rows are used instead of columns so every gather
    in the round-robin sweep touches contiguous memory.
    """
    k, m = X.shape
    if k % 2:
        X = np.vstack([X, np.zeros((1, m))])
    kk = X.shape[0]
    VT = np.eye(kk)
    rounds = _round_robin(kk) if kk > 1 else []
    for _ in range(_MAX_SWEEPS):
        rotated = False
        for p, q in rounds:
            Xp, Xq = X[p], X[q]
            a = np.einsum("ij,ij->i", Xp, Xp)
            b = np.einsum("ij,ij->i", Xq, Xq)
            c = np.einsum("ij,ij->i", Xp, Xq)
            active = np.abs(c) > _ROT_TOL * np.sqrt(a * b)
            if not active.any():
                continue
            rotated = True
            zeta = (b - a) / (2.0 * np.where(active, c, 1.0))
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t[zeta == 0] = 1.0
            cs = 1.0 / np.sqrt(1.0 + t * t)
            sn = np.where(active, cs * t, 0.0)[:, None]
            cs = np.where(active, cs, 1.0)[:, None]
            X[p], X[q] = cs * Xp - sn * Xq, sn * Xp + cs * Xq
            Vp, Vq = VT[p], VT[q]
            VT[p], VT[q] = cs * Vp - sn * Vq, sn * Vp + cs * Vq
        if not rotated:
            return X[:k], VT[:k, :k]
    G = X @ X.T
    off = float(np.sqrt(max(np.sum(G * G) - np.sum(np.diag(G) ** 2), 0.0)))
    raise SVDConvergenceError(off, _MAX_SWEEPS)


def _complete_basis(U: np.ndarray, k: int) -> np.ndarray:
    """Replace columns k.. of U with an orthonormal completion of U[:, :k]."""
    m, n = U.shape
    basis = [U[:, j] for j in range(k)]
    candidates = iter(np.eye(m))
    while len(basis) < n:
        v = next(candidates).copy()
        for _ in range(2):
            for u in basis:
                v -= (u @ v) * u
        nv = np.linalg.norm(v)
        if nv > 1e-8:
            basis.append(v / nv)
    return np.stack(basis, axis=1)


def svd(A) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``A = U diag(sigma) V^T`` by one-sided Jacobi rotations.

    Returns U (m x k), sigma (k,), V (n x k) with k = min(m, n), sigma
    descending. The rotations act on the orientation with fewer columns.
    """
    A = as_matrix(A)
    m, n = A.shape
    if min(m, n) > MAX_SVD_DIM:
        raise LinalgError(f"min dimension {min(m, n)} exceeds {MAX_SVD_DIM}")
    if not np.all(np.isfinite(A)):
        raise LinalgError("svd input contains non-finite values")
    transposed = n > m
    work = (A.T if transposed else A).astype(np.float64)
    Q = None
    if work.shape[0] > work.shape[1]:
        # tall: rotate the small triangular factor instead
        Q, work = np.linalg.qr(work)
    X, VT = _jacobi(np.ascontiguousarray(work.T))
    sigma = np.linalg.norm(X, axis=1)
    order = np.argsort(-sigma, kind="stable")
    sigma, X, V = sigma[order], X[order], VT[order].T
    k = sigma.size
    r = int(np.sum(sigma > sigma[0] * 1e-13)) if k and sigma[0] > 0 else 0
    U = np.zeros((work.shape[0], k))
    U[:, :r] = (X[:r] / sigma[:r, None]).T
    if r < k:
        sigma[r:] = 0.0
        U = _complete_basis(U, r)
    if Q is not None:
        U = Q @ U
    if transposed:
        U, V = V, U
    return U.astype(np.float32), sigma.astype(np.float32), V.astype(np.float32)


def cosine_similarity_flat(A, B) -> float:
    A = np.asarray(A, np.float64)
    B = np.asarray(B, np.float64)
    if A.shape != B.shape:
        raise LinalgError(f"shape mismatch {A.shape} vs {B.shape}")
    na, nb = np.linalg.norm(A), np.linalg.norm(B)
    if na == 0.0 or nb == 0.0:
        raise LinalgError("cosine similarity of a zero matrix is undefined")
    return float(np.clip(np.sum(A * B) / (na * nb), -1.0, 1.0))


def mean_abs_column_cosine(A, B) -> float:
    """Alternative similarity: mean |cos| between matching columns."""
    A = np.asarray(A, np.float64)
    B = np.asarray(B, np.float64)
    if A.shape != B.shape:
        raise LinalgError(f"shape mismatch {A.shape} vs {B.shape}")
    na = np.linalg.norm(A, axis=0)
    nb = np.linalg.norm(B, axis=0)
    if np.any(na == 0) or np.any(nb == 0):
        raise LinalgError("column with zero norm")
    return float(np.mean(np.abs(np.sum(A * B, axis=0)) / (na * nb)))


def sign_align(P_ref, P_new) -> np.ndarray:
    """Flip columns of P_new whose inner product with P_ref is negative."""
    P_ref = np.asarray(P_ref)
    P_new = np.asarray(P_new)
    if P_ref.shape != P_new.shape:
        raise LinalgError(f"shape mismatch {P_ref.shape} vs {P_new.shape}")
    dots = np.einsum("ij,ij->j", P_ref.astype(np.float64), P_new.astype(np.float64))
    return np.where(dots < 0, -P_new, P_new).astype(P_new.dtype)
