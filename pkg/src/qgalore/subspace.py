"""Per-layer gradient subspace with INT4 projection and lazy SVD refresh."""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .linalg import (
    as_matrix,
    cosine_similarity_flat,
    matmul,
    mean_abs_column_cosine,
    sign_align,
    svd,
)
from .quant import QuantSpec, QuantizedTensor, dequantize, quantize

__all__ = [
    "Side",
    "SubspaceError",
    "ProjectionState",
    "projection_side",
    "default_rank",
    "compute_projection",
]


class SubspaceError(ValueError):
    pass


class Side(str, enum.Enum):
    LEFT = "left"    # P spans the column space, shape rows x r
    RIGHT = "right"  # P spans the row space, shape cols x r


def projection_side(shape: tuple[int, int]) -> Side:
    rows, cols = shape
    return Side.LEFT if rows <= cols else Side.RIGHT


def default_rank(shape: tuple[int, int]) -> int:
    """A quarter of the projected (smaller) dimension, at least 1."""
    return max(1, min(shape) // 4)


def compute_projection(G, rank: int) -> np.ndarray:
    G = as_matrix(G)
    if rank < 1 or rank > min(G.shape):
        raise SubspaceError(f"rank {rank} invalid for gradient of shape {G.shape}")
    if not np.any(G):
        raise SubspaceError("cannot compute a projection from an all-zero gradient")
    U, _, V = svd(G)
    basis = U if projection_side(G.shape) is Side.LEFT else V
    return np.ascontiguousarray(basis[:, :rank])


_SIMILARITY = {"flat": cosine_similarity_flat, "column": mean_abs_column_cosine}


@dataclass(eq=False)
class ProjectionState:
    """Projection matrix plus the bookkeeping for adaptive interval doubling."""

    rank: int
    base_interval: int = 200
    window: int = 3
    threshold: float = 0.4
    proj_bits: int | None = 4
    block_size: int = 256
    adaptive: bool = True
    interval_cap: int | None = None
    similarity: str = "flat"
    frozen: bool = False

    P_q: QuantizedTensor | None = None
    P_prev_dense: np.ndarray | None = None
    side: Side | None = None
    interval: int = 0
    history: deque = field(default_factory=deque)
    svd_count: int = 0
    last_update_step: int = 0
    last_similarity: float | None = None
    _P: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.rank < 1:
            raise SubspaceError(f"rank must be positive, got {self.rank}")
        if self.base_interval < 1 or self.window < 1:
            raise SubspaceError("base_interval and window must be positive")
        if self.similarity not in _SIMILARITY:
            raise SubspaceError(f"unknown similarity metric {self.similarity!r}")
        if self.interval == 0:
            self.interval = self.base_interval
        self.history = deque(self.history, maxlen=self.window)

    @classmethod
    def fixed(cls, P, side: Side | str, proj_bits: int | None = None) -> "ProjectionState":
        """A state that never recomputes; used to pin an exact projection."""
        P = as_matrix(P)
        state = cls(rank=P.shape[1], proj_bits=proj_bits, frozen=True)
        state._install(P, Side(side))
        return state

    @property
    def initialized(self) -> bool:
        return self.P_q is not None

    @property
    def quant_spec(self) -> QuantSpec:
        return QuantSpec(bits=self.proj_bits, block_size=self.block_size)

    def dense(self) -> np.ndarray:
        """Dequantized projection matrix as used for projecting."""
        if self._P is None:
            raise SubspaceError("projection state is not initialized")
        return self._P

    def _install(self, P: np.ndarray, side: Side) -> None:
        self.P_q = quantize(P, self.quant_spec)
        self._P = dequantize(self.P_q)
        self.P_prev_dense = P
        self.side = side

    def maybe_update(self, G, step: int) -> bool:
        if self.frozen:
            return False
        if self.initialized and step - self.last_update_step < self.interval:
            return False
        G = as_matrix(G)
        rank = min(self.rank, min(G.shape))
        P_new = compute_projection(G, rank)
        side = projection_side(G.shape)

        history = deque(self.history, maxlen=self.window)
        interval = self.interval
        sim = None
        if self.P_prev_dense is not None:
            aligned = sign_align(self.P_prev_dense, P_new)
            sim = _SIMILARITY[self.similarity](self.P_prev_dense, aligned)
            history.append(sim)
            if (
                self.adaptive
                and len(history) == self.window
                and all(h >= self.threshold for h in history)
            ):
                interval *= 2
                if self.interval_cap is not None:
                    interval = min(interval, self.interval_cap)
                history.clear()

        self._install(P_new, side)
        self.history = history
        self.interval = interval
        self.last_similarity = sim
        self.svd_count += 1
        self.last_update_step = step
        return True

    def _check_ready(self) -> np.ndarray:
        if not self.initialized:
            raise SubspaceError("projection state is not initialized")
        return self.dense()

    def project(self, G) -> np.ndarray:
        P = self._check_ready()
        G = as_matrix(G)
        if self.side is Side.LEFT:
            if G.shape[0] != P.shape[0]:
                raise SubspaceError(f"gradient {G.shape} incompatible with left projection {P.shape}")
            return matmul(P.T, G)
        if G.shape[1] != P.shape[0]:
            raise SubspaceError(f"gradient {G.shape} incompatible with right projection {P.shape}")
        return matmul(G, P)

    def project_back(self, N) -> np.ndarray:
        P = self._check_ready()
        N = as_matrix(N)
        if self.side is Side.LEFT:
            if N.shape[0] != P.shape[1]:
                raise SubspaceError(f"low-rank update {N.shape} incompatible with {P.shape}")
            return matmul(P, N)
        if N.shape[1] != P.shape[1]:
            raise SubspaceError(f"low-rank update {N.shape} incompatible with {P.shape}")
        return matmul(N, P.T)

    def projected_shape(self, shape: tuple[int, int]) -> tuple[int, int]:
        rows, cols = shape
        r = min(self.rank, rows, cols)
        return (r, cols) if projection_side(shape) is Side.LEFT else (rows, r)
