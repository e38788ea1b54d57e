"""Model parameters and the shared forward pass.

Bundles the image encoder, word encoder, semantic projection V, attention
transition, and (optionally) a learnable cosine scale into one object with a
stable name -> tensor mapping, so the optimizer, checkpoints, and tests all
enumerate parameters identically. The forward helpers return every
intermediate the losses and metrics need, computed on one shared graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import (
    TransitionParams,
    attention,
    attention_transition,
    init_transition_params,
    localize_attributes,
)
from .autodiff import Tensor
from .data import ZslDataset, load_checkpoint, save_checkpoint
from .encoders import (
    EncoderConfig,
    ImageEncoderParams,
    WordEncoderParams,
    WordVectors,
    encode_image,
    encode_words,
    init_image_params,
    init_word_params,
    pool_global,
)
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = EncoderConfig()
    num_attributes: int = 12
    gaze_channels: int = 3
    sigma: float = 20.0
    learnable_sigma: bool = False

    def __post_init__(self) -> None:
        if self.num_attributes < 1 or self.gaze_channels < 1:
            raise ConfigError("num_attributes and gaze_channels must be >= 1")
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")


def config_for(dataset: ZslDataset, encoder: EncoderConfig | None = None,
               sigma: float = 20.0, learnable_sigma: bool = False) -> ModelConfig:
    """Model shape contract implied by a dataset.

    When the dataset carries gaze channels, the conv stack is fitted so the
    feature grid lands exactly on the gaze grid (the gaze loss compares the
    two cell-for-cell), reusing the tail of the requested stage widths so the
    feature channel count is preserved.
    """
    k = dataset.embeddings.num_attributes
    d = dataset.gaze.shape[1] if dataset.gaze is not None else 1
    base = encoder if encoder is not None else EncoderConfig()
    stages = base.stage_channels
    if dataset.gaze is not None:
        hi, wi = dataset.images.shape[1:3]
        gh, gw = dataset.gaze.shape[2:]
        depth = 0
        h, w = hi, wi
        while (h, w) != (gh, gw) and h > gh and not (h - base.kernel) % base.stride:
            h = (h - base.kernel) // base.stride + 1
            w = (w - base.kernel) // base.stride + 1
            depth += 1
        if (h, w) != (gh, gw) or depth == 0:
            raise ConfigError(f"no {base.kernel}/{base.stride} conv stack maps "
                              f"{hi}x{wi} images onto the {gh}x{gw} gaze grid")
        if depth > len(stages):
            raise ConfigError(f"need {depth} stages to reach the gaze grid but only "
                              f"{len(stages)} stage widths are configured")
        stages = stages[-depth:]
    enc = EncoderConfig(input_size=dataset.images.shape[1:],
                        stage_channels=stages, kernel=base.kernel,
                        stride=base.stride, word_dim=dataset.word_vectors.dim,
                        word_hidden=base.word_hidden)
    return ModelConfig(encoder=enc, num_attributes=k, gaze_channels=d,
                       sigma=sigma, learnable_sigma=learnable_sigma)


class ModelParams:
    """All trainable tensors plus their momentum buffers."""

    def __init__(self, config: ModelConfig, image: ImageEncoderParams,
                 word: WordEncoderParams, projection: Tensor,
                 transition: TransitionParams, sigma: Tensor | None) -> None:
        self.config = config
        self.image = image
        self.word = word
        self.projection = projection
        self.transition = transition
        self.sigma = sigma
        self.momentum = {name: np.zeros(t.shape) for name, t in self.tensors().items()}

    def tensors(self) -> dict[str, Tensor]:
        """Stable name -> leaf tensor mapping (iteration order is fixed)."""
        out: dict[str, Tensor] = {}
        for s, (kernel, bias) in enumerate(zip(self.image.kernels, self.image.biases)):
            out[f"image.stage{s}.kernel"] = kernel
            out[f"image.stage{s}.bias"] = bias
        out["word.hidden_w"] = self.word.hidden_w
        out["word.hidden_b"] = self.word.hidden_b
        out["word.out_w"] = self.word.out_w
        out["word.out_b"] = self.word.out_b
        out["projection"] = self.projection
        out["transition.kernel"] = self.transition.kernel
        out["transition.bias"] = self.transition.bias
        if self.sigma is not None:
            out["sigma"] = self.sigma
        return out

    def zero_grad(self) -> None:
        for t in self.tensors().values():
            t.zero_grad()

    def sigma_factor(self) -> float | Tensor:
        return self.sigma if self.sigma is not None else self.config.sigma


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    c, k = config.encoder.feature_channels, config.num_attributes
    from .encoders import he_uniform
    projection = ad.parameter(he_uniform(rng, (c, k), c))
    sigma = ad.parameter(np.asarray(float(config.sigma))) if config.learnable_sigma else None
    return ModelParams(config,
                       init_image_params(config.encoder, rng),
                       init_word_params(config.encoder, rng),
                       projection,
                       init_transition_params(k, config.gaze_channels, rng),
                       sigma)


@dataclass(frozen=True)
class ForwardPass:
    """Intermediates of one sample: feature map, pooled feature, attention
    maps, attribute scores, and (if requested) gaze maps."""

    features: Tensor          # H x W x C
    pooled: Tensor            # (C,)
    maps: Tensor              # H x W x K
    attribute_scores: Tensor  # (K,)
    gaze: Tensor | None       # H x W x D


def attribute_queries(params: ModelParams, words: WordVectors) -> Tensor:
    return encode_words(words, params.word)


def forward(params: ModelParams, image: np.ndarray, queries: Tensor,
            with_gaze: bool = False) -> ForwardPass:
    """One sample through encoder, attention, and heads.

    ``queries`` is E(e) from :func:`attribute_queries`; it is passed in rather
    than recomputed so one evaluation is shared by a whole batch graph.
    """
    feats = encode_image(image, params.image)
    maps = attention(queries, feats)
    return ForwardPass(
        features=feats,
        pooled=pool_global(feats),
        maps=maps,
        attribute_scores=localize_attributes(maps),
        gaze=attention_transition(maps, params.transition) if with_gaze else None,
    )


def save_params(path, params: ModelParams, config_snapshot: dict, epoch: int) -> None:
    """Checkpoint the weights (optimizer state is deliberately not included)."""
    tensors = {name: t.values for name, t in params.tensors().items()}
    save_checkpoint(path, tensors, config_snapshot, epoch)


def load_params(path, config: ModelConfig) -> tuple[ModelParams, dict, int]:
    """Rebuild ModelParams from a checkpoint, validating every tensor shape."""
    arrays, snapshot, epoch = load_checkpoint(path)
    params = init_params(config, np.random.default_rng(0))
    template = params.tensors()
    if set(arrays) != set(template):
        missing = sorted(set(template) - set(arrays))
        extra = sorted(set(arrays) - set(template))
        raise DimensionError(f"checkpoint tensor set mismatch: missing {missing}, "
                             f"unexpected {extra}")
    for name, tensor in template.items():
        if arrays[name].shape != tensor.values.shape:
            raise DimensionError(f"tensor {name!r}: checkpoint shape "
                                 f"{arrays[name].shape} vs model {tensor.values.shape}")
        tensor.values[...] = arrays[name]
    return params, snapshot, epoch
