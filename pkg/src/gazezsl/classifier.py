"""Cosine metric space for seen-class training and zero-shot prediction.

The global feature h(x) is projected into attribute space by a trainable
matrix V (C x K); class scores are scaled cosines ``sigma * cos(h'V, phi(y))``
against the class attribute vectors. Training minimizes softmax
cross-entropy of the scaled scores over the seen classes; at test time
prediction is an argmax over unseen classes (zero-shot) or over all classes
with the seen scores reduced by a calibration constant gamma (generalized
zero-shot), which trades seen-class accuracy for unseen-class accuracy.

A plain dot-product scorer is kept alongside the cosine one so the metric
space itself can be ablated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, NumericalError


@dataclass(frozen=True)
class ClassEmbeddings:
    """Class attribute matrix plus the seen/unseen split.

    ``matrix`` row r is phi(class_ids[r]); every class id appears exactly once
    and belongs to exactly one of ``seen`` / ``unseen``.
    """

    matrix: np.ndarray
    class_ids: tuple[int, ...]
    seen: frozenset[int]
    unseen: frozenset[int]

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.float64)
        ids = tuple(int(c) for c in self.class_ids)
        seen, unseen = frozenset(self.seen), frozenset(self.unseen)
        if m.ndim != 2 or m.shape[0] != len(ids):
            raise DimensionError(
                f"class matrix {m.shape} does not match {len(ids)} class ids")
        if not np.all(np.isfinite(m)):
            raise ValueError("class attribute matrix contains non-finite entries")
        if np.any(np.all(m == 0.0, axis=1)):
            raise ValueError("all-zero attribute row (cosine undefined)")
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate class ids")
        if seen & unseen:
            raise ValueError(f"classes in both partitions: {sorted(seen & unseen)}")
        if seen | unseen != set(ids):
            raise ValueError("seen/unseen partition does not cover the class ids")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "class_ids", ids)
        object.__setattr__(self, "seen", seen)
        object.__setattr__(self, "unseen", unseen)

    @property
    def num_attributes(self) -> int:
        return self.matrix.shape[1]

    def row_of(self, class_id: int) -> int:
        return self.class_ids.index(class_id)

    def subset(self, ids: tuple[int, ...]) -> np.ndarray:
        """Attribute rows for the given class ids, in the given order."""
        return self.matrix[[self.row_of(c) for c in ids]]

    # id-sorted orders make every downstream argmax tie break to the lowest
    # class index regardless of the matrix row layout

    @property
    def seen_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.seen))

    @property
    def unseen_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.unseen))


def _projected(h: Tensor, v: Tensor) -> Tensor:
    if h.values.ndim != 1 or v.values.ndim != 2 or h.shape[0] != v.shape[0]:
        raise DimensionError(f"projection: h {h.shape} vs V {v.shape}")
    return ad.matmul(ad.reshape(h, (1, h.shape[0])), v)  # 1 x K


def _unit_rows(phi: np.ndarray, zero_mode: str) -> np.ndarray:
    norms = np.linalg.norm(phi, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        if zero_mode == "strict":
            raise NumericalError("zero attribute vector: cosine undefined")
        return np.divide(phi, norms, out=np.zeros_like(phi), where=norms != 0.0)
    return phi / norms


def cosine_scores(h: Tensor, v: Tensor, phi: np.ndarray, sigma: float | Tensor,
                  zero_mode: str = "strict") -> Tensor:
    """Scaled cosine scores sigma * cos(h'V, phi(y)) for each attribute row of phi.

    ``zero_mode`` decides what a zero-norm vector means: "strict" raises,
    "lenient" scores it 0 (useful early in training when h'V can transiently
    collapse; the lenient branch is gradient-opaque).
    """
    if zero_mode not in ("strict", "lenient"):
        raise ValueError(f"unknown zero_mode {zero_mode!r}")
    phi = np.asarray(phi, dtype=np.float64)
    if phi.ndim != 2:
        raise DimensionError(f"expected a class x K attribute matrix, got {phi.shape}")
    u = _projected(h, v)
    if phi.shape[1] != u.shape[1]:
        raise DimensionError(f"attribute dim {phi.shape[1]} != projection dim {u.shape[1]}")
    unit = _unit_rows(phi, zero_mode)
    norm = float(np.linalg.norm(u.values))
    if norm == 0.0:
        if zero_mode == "strict":
            raise NumericalError("zero projected feature: cosine undefined")
        return ad.constant(np.zeros(phi.shape[0]))
    inv_norm = ad.reciprocal(ad.sqrt(ad.sum_all(ad.mul(u, u))))
    cos = ad.mul_scalar(ad.matmul(u, ad.constant(unit.T)), inv_norm)  # 1 x Y
    scaled = ad.mul_scalar(cos, sigma) if isinstance(sigma, Tensor) else ad.scale(cos, float(sigma))
    return ad.reshape(scaled, (phi.shape[0],))


def dot_scores(h: Tensor, v: Tensor, phi: np.ndarray) -> Tensor:
    """Unnormalized scores h'V . phi(y) — the metric-space ablation of the cosine."""
    phi = np.asarray(phi, dtype=np.float64)
    u = _projected(h, v)
    if phi.ndim != 2 or phi.shape[1] != u.shape[1]:
        raise DimensionError(f"attribute matrix {phi.shape} vs projection {u.shape}")
    return ad.reshape(ad.matmul(u, ad.constant(phi.T)), (phi.shape[0],))


def cls_loss(scores: Tensor, target: int) -> Tensor:
    """Softmax cross-entropy of the score vector at the target row."""
    if scores.values.ndim != 1:
        raise DimensionError(f"expected a score vector, got shape {scores.shape}")
    n = scores.shape[0]
    if not 0 <= target < n:
        raise ValueError(f"target {target} outside the {n} scored classes")
    probs = ad.softmax_rows(ad.reshape(scores, (1, n)))
    onehot = np.zeros((1, n))
    onehot[0, target] = 1.0
    return ad.scale(ad.sum_all(ad.mul(ad.log(probs), ad.constant(onehot))), -1.0)


def _eval_scores(h: np.ndarray, v: np.ndarray, phi: np.ndarray,
                 similarity: str) -> np.ndarray:
    """Prediction-time scores in plain numpy (no graph)."""
    u = h @ v
    if similarity == "dot":
        return phi @ u
    if similarity != "cosine":
        raise ValueError(f"unknown similarity {similarity!r}")
    norm = np.linalg.norm(u)
    if norm == 0.0:
        return np.zeros(phi.shape[0])
    unit = _unit_rows(phi, "lenient")
    return unit @ (u / norm)


def predict_zsl(h: np.ndarray, v: np.ndarray, embeddings: ClassEmbeddings,
                similarity: str = "cosine") -> int:
    """Most compatible unseen class; ties break to the lowest class index."""
    ids = embeddings.unseen_ids
    if not ids:
        raise ValueError("no unseen classes to predict over")
    scores = _eval_scores(h, v, embeddings.subset(ids), similarity)
    return ids[int(np.argmax(scores))]


def predict_gzsl(h: np.ndarray, v: np.ndarray, embeddings: ClassEmbeddings,
                 sigma: float, gamma: float, similarity: str = "cosine") -> int:
    """Argmax over all classes with seen scores reduced by gamma.

    gamma is on the same scale as the sigma-scaled scores, so gamma >= 2*sigma
    forces an unseen prediction.
    """
    if gamma < 0:
        raise ValueError(f"calibration gamma must be >= 0, got {gamma}")
    ids = tuple(sorted(embeddings.class_ids))
    scores = _eval_scores(h, v, embeddings.subset(ids), similarity)
    if similarity == "cosine":
        scores = sigma * scores
    penalty = np.array([gamma if c in embeddings.seen else 0.0 for c in ids])
    return ids[int(np.argmax(scores - penalty))]
