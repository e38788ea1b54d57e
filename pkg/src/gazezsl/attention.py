"""Attribute attention and gaze heads.

Given attribute queries ``E(e)`` (K x C) and a feature map ``f(x)``
(H x W x C), the attention op produces K per-attribute spatial distributions
``A(x)`` (H x W x K, each channel a softmax over the grid). Three heads
consume them:

* a distance loss that pulls each channel's mass toward its own peak,
* spatial max pooling into per-attribute response scores ``a(x)`` with a
  squared-error loss against the class attribute vector,
* a learnable 1x1-conv transition into D sigmoid gaze maps ``g(x)``, trained
  with pixel-wise binary cross-entropy after a one-to-one Hungarian matching
  of predicted channels to ground-truth channels (L1 cost), so the head never
  has to guess which gaze map is "first".

All ops are per-sample; the training loop averages over the batch. Argmax
locations and the channel matching are selections, not differentiable
quantities — gradients flow only through the selected terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .assignment import hungarian
from .autodiff import Tensor
from .errors import DimensionError


def attention(query: Tensor, key: Tensor) -> Tensor:
    """Per-attribute spatial attention A(x), shape H x W x K.

    Scores are the raw dot products query . cell (a K x HW matrix, no scaling
    factor), softmaxed per attribute row, then laid back onto the grid.
    """
    if query.values.ndim != 2 or key.values.ndim != 3:
        raise DimensionError(
            f"attention: expected K x C query and H x W x C key, got {query.shape} and {key.shape}")
    k, c = query.shape
    h, w, kc = key.shape
    if c != kc:
        raise DimensionError(f"attention: channel dims differ, query {query.shape} vs key {key.shape}")
    cells = ad.reshape(key, (h * w, c))
    scores = ad.matmul(query, ad.transpose(cells))        # K x HW
    return ad.reshape(ad.transpose(ad.softmax_rows(scores)), (h, w, k))


def peak_coordinates(maps: np.ndarray) -> np.ndarray:
    """Row-major-first argmax (i, j) of each channel of an H x W x K array."""
    h, w, k = maps.shape
    flat = np.argmax(maps.reshape(h * w, k), axis=0)
    return np.stack([flat // w, flat % w], axis=1)


def distance_loss(maps: Tensor) -> Tensor:
    """Mass-concentration penalty: sum_k sum_ij A[i,j,k] * ((i-i_k)^2 + (j-j_k)^2).

    (i_k, j_k) is the peak of channel k, treated as a constant — the penalty
    reshapes each distribution around its current peak rather than moving the
    peak itself.
    """
    if maps.values.ndim != 3:
        raise DimensionError(f"distance_loss: expected H x W x K, got shape {maps.shape}")
    h, w, k = maps.shape
    peaks = peak_coordinates(maps.values)
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coeff = ((ii[:, :, None] - peaks[:, 0]) ** 2 + (jj[:, :, None] - peaks[:, 1]) ** 2)
    return ad.sum_all(ad.mul(maps, ad.constant(coeff.astype(float))))


def localize_attributes(maps: Tensor) -> Tensor:
    """Attribute response scores a(x): the spatial max of each channel, shape (K,)."""
    return ad.global_max_pool(maps)


def mse_loss(scores: Tensor, target: np.ndarray) -> Tensor:
    """Squared Euclidean distance ||a(x) - phi(y)||^2 (a sum over K, not a mean)."""
    target = np.asarray(target, dtype=float)
    if scores.shape != target.shape:
        raise DimensionError(f"mse_loss: scores {scores.shape} vs target {target.shape}")
    diff = ad.sub(scores, ad.constant(target))
    return ad.sum_all(ad.mul(diff, diff))


@dataclass(frozen=True)
class TransitionParams:
    """Learnable 1x1 conv mixing K attention channels into D gaze channels."""

    kernel: Tensor  # 1 x 1 x K x D
    bias: Tensor    # (D,)


def init_transition_params(num_attributes: int, num_maps: int,
                           rng: np.random.Generator) -> TransitionParams:
    from .encoders import he_uniform
    kernel = he_uniform(rng, (1, 1, num_attributes, num_maps), num_attributes)
    return TransitionParams(ad.parameter(kernel), ad.parameter(np.zeros(num_maps)))


def attention_transition(maps: Tensor, params: TransitionParams) -> Tensor:
    """Gaze maps g(x) = sigmoid(1x1-conv(A(x))), shape H x W x D."""
    return ad.sigmoid(ad.add_bias(ad.conv2d(maps, params.kernel), params.bias))


def match_channels(predicted: np.ndarray, target: np.ndarray) -> tuple[int, ...]:
    """One-to-one channel pairing minimizing total L1 distance.

    Returns perm with perm[d] = index of the target channel assigned to
    predicted channel d.
    """
    d = predicted.shape[2]
    pred_flat = predicted.reshape(-1, d)
    targ_flat = target.reshape(-1, d)
    cost = np.abs(pred_flat[:, :, None] - targ_flat[:, None, :]).sum(axis=0)
    return hungarian(cost).permutation


def gaze_loss(predicted: Tensor, target: np.ndarray) -> Tensor:
    """Pixel-averaged BCE between g(x) and the matched ground-truth channels.

    The matching is recomputed per call from the current predictions; it is a
    selection, so gradients flow only through the BCE of the chosen pairing.
    """
    target = np.asarray(target, dtype=float)
    if predicted.values.ndim != 3 or predicted.shape != target.shape:
        raise DimensionError(
            f"gaze_loss: predicted {predicted.shape} vs target {target.shape}")
    h, w, d = predicted.shape
    perm = match_channels(predicted.values, target)
    aligned = ad.constant(target[:, :, list(perm)])
    ones = ad.constant(np.ones((h, w, d)))
    hit = ad.mul(aligned, ad.log(predicted))
    miss = ad.mul(ad.sub(ones, aligned), ad.log(ad.sub(ones, predicted)))
    return ad.scale(ad.sum_all(ad.add(hit, miss)), -1.0 / (d * h * w))
