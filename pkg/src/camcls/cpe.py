"""Contrastive patch embedding loss.

From an image's G x G grid of C-dim embeddings, the two cells with the largest
CAM mass (u1, u2) and the two with the smallest (v1, v2) are selected. The
loss is two softmax cross-entropies over raw dot products: one pulls u1 and u2
together against the four u/v cross products, the other does the same for v1
and v2. No temperature and no normalisation are applied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cam import rank_cells
from .errors import ContractError, DimensionError, NonFiniteError
from .tensor import Tensor


@dataclass(frozen=True, eq=False)
class PatchSelection:
    u1: Tensor
    u2: Tensor
    v1: Tensor
    v2: Tensor
    indices: tuple  # ((i, j) for u1, u2, v1, v2)


def select_indices(cell_scores: np.ndarray) -> np.ndarray:
    """Flat indices of (u1, u2, v1, v2).

    The high picks come first in descending-score order with lower indices
    winning ties; the low picks are the tail of the same order, so higher
    indices win ties there.
    """
    flat = np.asarray(cell_scores).reshape(-1)
    if flat.size < 4:
        raise ContractError(f"need at least 4 cells, got {flat.size}")
    order = rank_cells(flat)
    return np.array([order[0], order[1], order[-1], order[-2]])


def select_patches(embedding_grid, cell_scores: np.ndarray) -> PatchSelection:
    """Pick the four contrast vectors from a (G*G, C) embedding grid."""
    emb = embedding_grid if isinstance(embedding_grid, Tensor) else Tensor(embedding_grid)
    scores = np.asarray(cell_scores)
    if emb.ndim != 2 or emb.shape[0] != scores.size:
        raise DimensionError(f"embedding grid {emb.shape} does not match {scores.size} scores")
    idx = select_indices(scores)
    g = scores.shape[-1] if scores.ndim == 2 else 1
    cells = tuple((int(k) // g, int(k) % g) for k in idx)
    return PatchSelection(emb[int(idx[0])], emb[int(idx[1])], emb[int(idx[2])],
                          emb[int(idx[3])], cells)


def select_patches_batch(embeddings: Tensor, cell_scores: np.ndarray) -> PatchSelection:
    """Batched selection: ``embeddings`` is (N, G*G, C), scores (N, G, G)."""
    n = embeddings.shape[0]
    idx = np.stack([select_indices(s) for s in np.asarray(cell_scores)])
    picked = embeddings[np.arange(n)[:, None], idx]  # N, 4, C
    g = cell_scores.shape[-1]
    cells = tuple(tuple((int(k) // g, int(k) % g) for k in row) for row in idx)
    return PatchSelection(picked[:, 0], picked[:, 1], picked[:, 2], picked[:, 3], cells)


def cpe_loss(sel: PatchSelection) -> Tensor:
    """Contrastive patch embedding loss; vectors may carry a leading batch axis."""
    for v in (sel.u1, sel.u2, sel.v1, sel.v2):
        if not np.isfinite(v.data).all():
            raise NonFiniteError("cpe_loss received non-finite embeddings")

    def dot(a: Tensor, b: Tensor) -> Tensor:
        return (a * b).sum(axis=-1)

    uu = dot(sel.u1, sel.u2)
    vv = dot(sel.v1, sel.v2)
    cross = [dot(sel.u1, sel.v1), dot(sel.u1, sel.v2), dot(sel.u2, sel.v1), dot(sel.u2, sel.v2)]
    pull_u = T.logsumexp(T.stack([uu] + cross, axis=-1), axis=-1) - uu
    pull_v = T.logsumexp(T.stack([vv] + cross, axis=-1), axis=-1) - vv
    return pull_u + pull_v
