"""Loss assembly, SGD with momentum, and the episode training loop.

Each step samples M seen classes x N images, builds one loss graph over the
batch, and applies classic momentum SGD with L2 weight decay folded into the
gradient. The total loss is

    L = L_cls + lambda1 * L_dis + lambda2 * L_mse + lambda3 * L_gaze,

each term a batch mean; a term whose multiplier is zero is skipped outright
so ablations pay nothing for the heads they turn off. Training is
deterministic for a fixed seed: episodes come from a counter-based stream,
and batch accumulation order is fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .attention import distance_loss, gaze_loss, mse_loss
from .autodiff import Tensor
from .classifier import cls_loss, cosine_scores, dot_scores
from .data import Sample, ZslDataset, sample_episode
from .errors import ConfigError, NumericalError
from .model import ModelConfig, ModelParams, attribute_queries, config_for, forward, init_params


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and loss weights; defaults are the desk-scale preset."""

    lambda1: float = 0.2
    lambda2: float = 1.0
    lambda3: float = 0.1
    sigma: float = 20.0
    learnable_sigma: bool = False
    gamma: float = 0.7
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-5
    m: int = 16
    n: int = 2
    batches_per_epoch: int = 50
    epochs: int = 10
    seed: int = 0
    use_gaze: bool = True
    similarity: str = "cosine"
    precision: str = "float64"
    eval_each_epoch: bool = False

    def __post_init__(self) -> None:
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be nonnegative, got {self.gamma}")
        if self.lr < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("invalid optimizer constants")
        if self.m < 2 or self.n < 1:
            raise ConfigError(f"episodes need m >= 2 and n >= 1, got m={self.m} n={self.n}")
        if self.batches_per_epoch < 1 or self.epochs < 0:
            raise ConfigError("batches_per_epoch >= 1 and epochs >= 0 required")
        if self.similarity not in ("cosine", "dot"):
            raise ConfigError(f"unknown similarity {self.similarity!r}")
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if not self.use_gaze and self.lambda3 != 0.0:
            object.__setattr__(self, "lambda3", 0.0)


def _batch_mean(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return ad.scale(acc, 1.0 / len(terms))


def total_loss(batch: list[Sample], params: ModelParams, dataset: ZslDataset,
               cfg: TrainConfig) -> tuple[Tensor, dict[str, float]]:
    """One loss graph over the batch, plus the per-component breakdown."""
    emb = dataset.embeddings
    seen_ids = emb.seen_ids
    phi_seen = emb.subset(seen_ids)
    queries = attribute_queries(params, dataset.word_vectors)
    need_gaze = cfg.lambda3 > 0
    cls_terms, dis_terms, mse_terms, gaze_terms = [], [], [], []
    for sample in batch:
        if need_gaze and sample.gaze is None:
            raise ValueError(f"gaze loss requested but sample {sample.index} has no gaze maps")
        out = forward(params, sample.image, queries, with_gaze=need_gaze)
        if cfg.similarity == "dot":
            scores = dot_scores(out.pooled, params.projection, phi_seen)
        else:
            scores = cosine_scores(out.pooled, params.projection, phi_seen,
                                   params.sigma_factor(), zero_mode="lenient")
        cls_terms.append(cls_loss(scores, seen_ids.index(sample.label)))
        dis_terms.append(distance_loss(out.maps))
        mse_terms.append(mse_loss(out.attribute_scores, sample.phi))
        if need_gaze:
            gaze_terms.append(gaze_loss(out.gaze, sample.gaze))

    cls_mean = _batch_mean(cls_terms)
    dis_mean = _batch_mean(dis_terms)
    mse_mean = _batch_mean(mse_terms)
    total = cls_mean
    if cfg.lambda1 > 0:
        total = ad.add(total, ad.scale(dis_mean, cfg.lambda1))
    if cfg.lambda2 > 0:
        total = ad.add(total, ad.scale(mse_mean, cfg.lambda2))
    breakdown = {"cls": cls_mean.item(), "dis": dis_mean.item(),
                 "mse": mse_mean.item(), "gaze": 0.0}
    if need_gaze:
        gaze_mean = _batch_mean(gaze_terms)
        total = ad.add(total, ad.scale(gaze_mean, cfg.lambda3))
        breakdown["gaze"] = gaze_mean.item()
    breakdown["total"] = total.item()
    return total, breakdown


def sgd_step(params: ModelParams, cfg: TrainConfig) -> None:
    """v <- momentum*v + grad + weight_decay*w;  w <- w - lr*v.

    A parameter outside the current loss graph (gaze head during a non-gaze
    run) has no gradient; it still receives the L2 decay, like any zero-grad
    parameter under this update rule.
    """
    for name, tensor in params.tensors().items():
        grad = tensor.grad if tensor.grad is not None else np.zeros(tensor.shape)
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite gradient in {name!r}")
        buf = params.momentum[name]
        buf *= cfg.momentum
        buf += grad + cfg.weight_decay * tensor.values
        tensor.values -= cfg.lr * buf


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    total: float
    cls: float
    dis: float
    mse: float
    gaze: float
    val_t1: float | None = None


def train(dataset: ZslDataset, cfg: TrainConfig,
          model_config: ModelConfig | None = None,
          log_fn=None) -> tuple[ModelParams, list[EpochLog]]:
    """Episode training over the seen classes; deterministic for a fixed seed."""
    eligible = [c for c in dataset.embeddings.seen
                if len(dataset.train_indices_of(c)) >= cfg.n]
    if len(eligible) < cfg.m:
        raise ConfigError(f"dataset offers {len(eligible)} seen classes with >= "
                          f"{cfg.n} training images; episodes need {cfg.m}")
    if cfg.use_gaze and dataset.gaze is None:
        raise ConfigError("use_gaze=True but the dataset has no gaze channels")
    if model_config is None:
        model_config = config_for(dataset, sigma=cfg.sigma,
                                  learnable_sigma=cfg.learnable_sigma)
    if cfg.lambda3 > 0 and dataset.gaze is not None:
        grid = model_config.encoder.feature_grid
        if grid != dataset.gaze.shape[2:]:
            raise ConfigError(f"feature grid {grid} does not match the dataset "
                              f"gaze grid {dataset.gaze.shape[2:]}")
    ad.set_precision(cfg.precision)
    init_rng = np.random.Generator(np.random.Philox(key=[cfg.seed, 0]))
    episode_rng = np.random.Generator(np.random.Philox(key=[cfg.seed, 1]))
    params = init_params(model_config, init_rng)
    logs: list[EpochLog] = []
    for epoch in range(cfg.epochs):
        sums = {"total": 0.0, "cls": 0.0, "dis": 0.0, "mse": 0.0, "gaze": 0.0}
        for batch_idx in range(cfg.batches_per_epoch):
            batch = sample_episode(dataset, cfg.m, cfg.n, episode_rng,
                                   with_gaze=cfg.lambda3 > 0)
            loss, parts = total_loss(batch, params, dataset, cfg)
            if not np.isfinite(parts["total"]):
                raise NumericalError(
                    f"loss diverged at epoch {epoch} batch {batch_idx}: {parts}")
            params.zero_grad()
            loss.backward()
            sgd_step(params, cfg)
            for key in sums:
                sums[key] += parts[key]
        means = {k: v / cfg.batches_per_epoch for k, v in sums.items()}
        val_t1 = None
        if cfg.eval_each_epoch:
            from .metrics import evaluate
            report = evaluate(dataset, params, mode="zsl",
                              similarity=cfg.similarity, with_gaze=False)
            val_t1 = report.t1
        entry = EpochLog(epoch=epoch, total=means["total"], cls=means["cls"],
                         dis=means["dis"], mse=means["mse"], gaze=means["gaze"],
                         val_t1=val_t1)
        logs.append(entry)
        if log_fn is not None:
            log_fn(entry)
    return params, logs


def ablation_config(cfg: TrainConfig, row: str) -> TrainConfig:
    """Cumulative head ablations over the shared base configuration.

    ``baseline`` trains the dot-product classifier alone; ``mse`` adds the
    attribute-score loss; ``dis`` adds the concentration loss on top; ``cos``
    switches the classifier to the scaled cosine, giving the full model.
    """
    if row == "baseline":
        return replace(cfg, similarity="dot", lambda1=0.0, lambda2=0.0, lambda3=0.0,
                       use_gaze=False)
    if row == "mse":
        return replace(cfg, similarity="dot", lambda1=0.0, lambda3=0.0, use_gaze=False)
    if row == "dis":
        return replace(cfg, similarity="dot", lambda3=0.0, use_gaze=False)
    if row == "cos":
        return replace(cfg, similarity="cosine", lambda3=0.0, use_gaze=False)
    raise ConfigError(f"unknown ablation row {row!r}")
