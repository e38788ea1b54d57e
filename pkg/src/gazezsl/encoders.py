"""Image and word encoders.

The image side maps an ``H_img x W_img x ch`` image to a spatial feature map
``f(x)`` of shape ``H x W x C`` through a stack of strided conv+relu stages
(valid padding), plus a pooled global feature ``h(x)`` of shape ``(C,)``.
The word side maps K attribute word vectors (rows of a ``K x De`` matrix) to
K visual attribute queries ``E(e)`` of shape ``K x C`` with a one-hidden-layer
MLP applied row-wise.

Both encoders are pure functions of (input, params); parameters are plain
:class:`~gazezsl.autodiff.Tensor` leaves grouped in small frozen dataclasses
so the training loop can enumerate them in a stable order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class EncoderConfig:
    """Shape contract for both encoders.

    ``feature_channels`` (the C of the downstream attention/classifier math)
    is derived from the last stage width rather than stored, so it can never
    disagree with the conv stack.
    """

    input_size: tuple[int, int, int] = (32, 32, 3)
    stage_channels: tuple[int, ...] = (16, 32, 64)
    kernel: int = 2
    stride: int = 2
    word_dim: int = 50
    word_hidden: int = 64

    def __post_init__(self) -> None:
        if len(self.input_size) != 3 or any(s < 1 for s in self.input_size):
            raise ConfigError(f"input_size must be three positive ints, got {self.input_size}")
        if not self.stage_channels or any(c < 1 for c in self.stage_channels):
            raise ConfigError(f"stage_channels must be positive ints, got {self.stage_channels}")
        if self.kernel < 1 or self.stride < 1:
            raise ConfigError(f"kernel={self.kernel} and stride={self.stride} must be >= 1")
        if self.word_dim < 1 or self.word_hidden < 1:
            raise ConfigError("word_dim and word_hidden must be >= 1")
        h, w = self.feature_grid  # validates divisibility as a side effect
        if h < 2 or w < 2:
            raise ConfigError(
                f"feature grid {h}x{w} is too small; attention needs at least 2x2")

    @property
    def feature_channels(self) -> int:
        return self.stage_channels[-1]

    @property
    def feature_grid(self) -> tuple[int, int]:
        """Spatial size (H, W) of f(x), by the valid-conv recurrence."""
        h, w, _ = self.input_size
        for _ in self.stage_channels:
            if (h - self.kernel) % self.stride or (w - self.kernel) % self.stride:
                raise ConfigError(
                    f"stage input {h}x{w} with kernel {self.kernel} stride {self.stride} "
                    "does not tile evenly")
            h = (h - self.kernel) // self.stride + 1
            w = (w - self.kernel) // self.stride + 1
        return h, w


@dataclass(frozen=True)
class WordVectors:
    """K x De matrix of attribute word embeddings, one row per attribute."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] < 1:
            raise DimensionError(f"word vectors must be a K x De matrix with K >= 1, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("word vectors contain non-finite entries")
        object.__setattr__(self, "matrix", m)

    @property
    def count(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def random_word_vectors(count: int, dim: int, rng: np.random.Generator) -> WordVectors:
    """Seeded unit-norm stand-ins for averaged pretrained word embeddings."""
    m = rng.standard_normal((count, dim))
    return WordVectors(m / np.linalg.norm(m, axis=1, keepdims=True))


@dataclass(frozen=True)
class ImageEncoderParams:
    config: EncoderConfig
    kernels: tuple[Tensor, ...]  # stage s: kernel x kernel x c_in x c_out
    biases: tuple[Tensor, ...]   # stage s: (c_out,)


@dataclass(frozen=True)
class WordEncoderParams:
    hidden_w: Tensor  # De x word_hidden
    hidden_b: Tensor  # (word_hidden,)
    out_w: Tensor     # word_hidden x C
    out_b: Tensor     # (C,)


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...],
               fan_in: int) -> np.ndarray:
    """Fan-in-scaled uniform init; keeps activation variance roughly constant
    through the relu stages (a variance-halving init stalls deep stacks)."""
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def init_image_params(config: EncoderConfig, rng: np.random.Generator) -> ImageEncoderParams:
    kernels, biases = [], []
    c_in = config.input_size[2]
    k = config.kernel
    for c_out in config.stage_channels:
        kernels.append(ad.parameter(he_uniform(rng, (k, k, c_in, c_out), k * k * c_in)))
        biases.append(ad.parameter(np.zeros(c_out)))
        c_in = c_out
    return ImageEncoderParams(config, tuple(kernels), tuple(biases))


def init_word_params(config: EncoderConfig, rng: np.random.Generator) -> WordEncoderParams:
    de, hid, c = config.word_dim, config.word_hidden, config.feature_channels
    return WordEncoderParams(
        hidden_w=ad.parameter(he_uniform(rng, (de, hid), de)),
        hidden_b=ad.parameter(np.zeros(hid)),
        out_w=ad.parameter(he_uniform(rng, (hid, c), hid)),
        out_b=ad.parameter(np.zeros(c)),
    )


def encode_image(x: np.ndarray | Tensor, params: ImageEncoderParams) -> Tensor:
    """Feature map f(x): stack of valid strided conv + relu stages."""
    t = x if isinstance(x, Tensor) else ad.constant(x)
    expected = params.config.input_size
    if t.shape != expected:
        raise DimensionError(f"encode_image: input shape {t.shape} != configured {expected}")
    for kernel, bias in zip(params.kernels, params.biases):
        t = ad.relu(ad.add_bias(ad.conv2d(t, kernel, stride=params.config.stride), bias))
    return t


def pool_global(f: Tensor) -> Tensor:
    """Global feature h(x): spatial mean of the feature map, shape (C,)."""
    return ad.global_avg_pool(f)


def encode_words(words: WordVectors, params: WordEncoderParams) -> Tensor:
    """Attribute queries E(e): row-wise De -> hidden (relu) -> C, output K x C."""
    if words.dim != params.hidden_w.shape[0]:
        raise DimensionError(
            f"encode_words: word dim {words.dim} != weight rows {params.hidden_w.shape[0]}")
    hidden = ad.relu(ad.add_bias(ad.matmul(ad.constant(words.matrix), params.hidden_w),
                                 params.hidden_b))
    return ad.add_bias(ad.matmul(hidden, params.out_w), params.out_b)
