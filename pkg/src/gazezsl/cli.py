"""Command-line entry point: dataset generation, training, evaluation, gaze
scoring, map visualization, and gradient verification.

Configuration is a plain key-value document with dotted sections::

    gen.num_seen = 20
    train.lr = 0.001
    encoder.stage_channels = 16, 32, 64

Unknown keys are rejected with their key path. Every command prints the hash
of its fully resolved configuration, so reruns are checkable at a glance.
Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.
File outputs are written to a ``.tmp`` path and renamed once complete.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import attention, attention_transition, distance_loss, gaze_loss, mse_loss
from .classifier import cls_loss, cosine_scores
from .data import (GenConfig, WordVectors, generate_synthetic, load_checkpoint,
                   load_dataset, save_dataset)
from .encoders import EncoderConfig, encode_image, encode_words, pool_global
from .errors import (ChecksumError, ConfigError, DimensionError, NumericalError,
                     TruncatedBlobError, VersionError)
from .metrics import evaluate, gaze_report, write_csv, write_json
from .model import (ModelConfig, attribute_queries, config_for, forward,
                    init_params, load_params, save_params)
from .training import EpochLog, TrainConfig, train

log = logging.getLogger("gazezsl")

_SECTIONS = {"gen": GenConfig, "encoder": EncoderConfig, "train": TrainConfig}


# --------------------------------------------------------------------------
# config document


def parse_config_text(text: str) -> dict[str, str]:
    """'section.key = value' lines -> {dotted key: raw value}; '#' comments."""
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'section.key = value', "
                              f"got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        section, dot, name = key.partition(".")
        if not dot or not name or "." in name:
            raise ConfigError(f"config line {lineno}: key {key!r} is not section.key")
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section in key {key!r} "
                              f"(sections: {', '.join(sorted(_SECTIONS))})")
        if name not in {f.name for f in dataclasses.fields(_SECTIONS[section])}:
            raise ConfigError(f"unknown config key {key!r}")
        entries[key] = value.strip()
    return entries


def _convert(key: str, value: str, default):
    try:
        if isinstance(default, bool):
            lowered = value.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            parts = value.replace("(", " ").replace(")", " ").replace(",", " ").split()
            return tuple(int(p) for p in parts)
        return value
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot read {value!r} "
                          f"as {type(default).__name__}") from exc


def build_section(section: str, entries: dict[str, str], **overrides):
    """Section dataclass from defaults + document entries + keyword overrides."""
    cls = _SECTIONS[section]
    defaults = cls()
    kwargs = {}
    for key, value in entries.items():
        sec, _, name = key.partition(".")
        if sec == section:
            kwargs[name] = _convert(key, value, getattr(defaults, name))
    kwargs.update(overrides)
    try:
        return replace(defaults, **kwargs) if kwargs else defaults
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} config: {exc}") from exc


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def config_document(sections: dict) -> str:
    """Canonical resolved-config text: sorted 'section.key = value' lines."""
    lines = []
    for section, obj in sections.items():
        if obj is None:
            continue
        for field in dataclasses.fields(obj):
            lines.append(f"{section}.{field.name} = "
                         f"{_format_value(getattr(obj, field.name))}")
    return "\n".join(sorted(lines)) + "\n"


def config_hash(document: str) -> str:
    return hashlib.sha256(document.encode()).hexdigest()[:12]


def _load_entries(config_path) -> dict[str, str]:
    if config_path is None:
        return {}
    return parse_config_text(Path(config_path).read_text())


def _write_atomic(path: Path, data: str | bytes) -> None:
    """Stage to .tmp, then rename: readers never observe a partial file."""
    tmp = path.parent / (path.name + ".tmp")
    if isinstance(data, bytes):
        tmp.write_bytes(data)
    else:
        tmp.write_text(data)
    os.replace(tmp, path)


# --------------------------------------------------------------------------
# checkpoint snapshot <-> model config


def _snapshot(gen: GenConfig | None, model_config: ModelConfig,
              train_cfg: TrainConfig) -> dict:
    return {
        "gen": dataclasses.asdict(gen) if gen is not None else None,
        "encoder": dataclasses.asdict(model_config.encoder),
        "train": dataclasses.asdict(train_cfg),
        "model": {"num_attributes": model_config.num_attributes,
                  "gaze_channels": model_config.gaze_channels,
                  "sigma": model_config.sigma,
                  "learnable_sigma": model_config.learnable_sigma},
    }


def model_config_from_snapshot(snapshot: dict) -> ModelConfig:
    try:
        enc = dict(snapshot["encoder"])
        enc["input_size"] = tuple(enc["input_size"])
        enc["stage_channels"] = tuple(enc["stage_channels"])
        model = snapshot["model"]
        return ModelConfig(encoder=EncoderConfig(**enc),
                           num_attributes=int(model["num_attributes"]),
                           gaze_channels=int(model["gaze_channels"]),
                           sigma=float(model["sigma"]),
                           learnable_sigma=bool(model["learnable_sigma"]))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"checkpoint config snapshot is unreadable: {exc}") from exc


def _snapshot_sections(snapshot: dict) -> dict:
    gen = snapshot.get("gen")
    sections = {
        "encoder": EncoderConfig(**{**snapshot["encoder"],
                                    "input_size": tuple(snapshot["encoder"]["input_size"]),
                                    "stage_channels": tuple(snapshot["encoder"]["stage_channels"])}),
        "train": TrainConfig(**snapshot["train"]),
    }
    if gen is not None:
        sections["gen"] = GenConfig(**{**gen, "image_size": tuple(gen["image_size"]),
                                       "gaze_grid": tuple(gen["gaze_grid"])})
    return sections


def _load_model(data_path, ckpt_path):
    dataset = load_dataset(data_path)
    _, snapshot, _ = load_checkpoint(ckpt_path)
    model_config = model_config_from_snapshot(snapshot)
    params, snapshot, epoch = load_params(ckpt_path, model_config)
    log.debug("loaded %d-image dataset and epoch-%d checkpoint", len(dataset.images), epoch)
    document = config_document(_snapshot_sections(snapshot))
    print(f"config {config_hash(document)}")
    return dataset, params, snapshot, epoch


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    entries = _load_entries(args.config)
    overrides = {} if args.seed is None else {"seed": args.seed}
    gen = build_section("gen", entries, **overrides)
    document = config_document({"gen": gen})
    print(f"config {config_hash(document)}")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"error: output directory {out} is not empty (use --force to overwrite)",
              file=sys.stderr)
        return 3
    dataset = generate_synthetic(gen)
    save_dataset(out, dataset)
    _write_atomic(out / "config.txt", document)
    emb = dataset.embeddings
    gaze_note = ("none" if dataset.gaze is None
                 else "x".join(str(s) for s in dataset.gaze.shape[1:]))
    print(f"dataset: {len(emb.seen)} seen + {len(emb.unseen)} unseen classes, "
          f"K={emb.matrix.shape[1]} attributes, {len(dataset.images)} images "
          f"({len(dataset.train_indices)} train / {len(dataset.test_indices)} test), "
          f"gaze {gaze_note}")
    print(f"wrote {out}")
    return 0


def cmd_train(args) -> int:
    entries = _load_entries(args.config)
    dataset = load_dataset(args.data)
    overrides = {"use_gaze": bool(args.gaze)}
    if args.seed is not None:
        overrides["seed"] = args.seed
    train_cfg = build_section("train", entries, **overrides)
    if args.gaze and dataset.gaze is None:
        print("error: --gaze given but the dataset has no gaze maps; the gaze-loss "
              "weight lambda3 is 0 when gaze ground truth is not available — rerun "
              "without --gaze or regenerate the dataset with gaze channels",
              file=sys.stderr)
        return 3
    train_cfg = replace(train_cfg, eval_each_epoch=True)
    encoder_base = (build_section("encoder", entries)
                    if any(key.startswith("encoder.") for key in entries) else None)
    model_config = config_for(dataset, encoder=encoder_base, sigma=train_cfg.sigma,
                              learnable_sigma=train_cfg.learnable_sigma)
    sections = {"encoder": model_config.encoder, "train": train_cfg}
    if dataset.gen_config is not None:
        sections["gen"] = dataset.gen_config
    document = config_document(sections)
    print(f"config {config_hash(document)}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    logs: list[EpochLog] = []

    def progress(entry: EpochLog) -> None:
        logs.append(entry)
        print(f"epoch {entry.epoch}: total={entry.total:.4f} cls={entry.cls:.4f} "
              f"dis={entry.dis:.4f} mse={entry.mse:.4f} gaze={entry.gaze:.4f} "
              f"val_t1={entry.val_t1:.3f}")

    params, _ = train(dataset, train_cfg, model_config=model_config, log_fn=progress)

    buffer = io.StringIO()
    writer = csv.writer(buffer)
    writer.writerow(["epoch", "total", "cls", "dis", "mse", "gaze", "val_t1"])
    for entry in logs:
        writer.writerow([entry.epoch, repr(entry.total), repr(entry.cls),
                         repr(entry.dis), repr(entry.mse), repr(entry.gaze),
                         "" if entry.val_t1 is None else repr(entry.val_t1)])
    _write_atomic(out / "training_log.csv", buffer.getvalue())
    _write_atomic(out / "config.txt", document)
    snapshot = _snapshot(dataset.gen_config, model_config, train_cfg)
    save_params(out / "checkpoint", params, snapshot, train_cfg.epochs)
    print(f"wrote {out / 'checkpoint'} and {out / 'training_log.csv'}")
    return 0


def _parse_sweep(spec: str) -> list[float]:
    try:
        lo, hi, step = (float(part) for part in spec.split(":"))
    except ValueError as exc:
        raise ConfigError(f"--gamma-sweep wants lo:hi:step, got {spec!r}") from exc
    if step <= 0 or hi < lo:
        raise ConfigError(f"--gamma-sweep needs step > 0 and hi >= lo, got {spec!r}")
    return [float(g) for g in np.arange(lo, hi + step / 2, step)]


def cmd_eval(args) -> int:
    dataset, params, snapshot, _ = _load_model(args.data, args.ckpt)
    similarity = snapshot["train"].get("similarity", "cosine")
    seed = int(snapshot["train"].get("seed", 0))
    if args.mode == "zsl":
        if args.gamma is not None or args.gamma_sweep is not None:
            print("note: zsl mode ignores gamma", file=sys.stderr)
        reports = [evaluate(dataset, params, mode="zsl", similarity=similarity,
                            with_gaze=False)]
    else:
        if args.gamma_sweep is not None:
            gammas = _parse_sweep(args.gamma_sweep)
        else:
            gammas = [args.gamma if args.gamma is not None
                      else float(snapshot["train"].get("gamma", 0.7))]
        reports = [evaluate(dataset, params, mode="gzsl", gamma=g,
                            similarity=similarity, with_gaze=False)
                   for g in gammas]
    buffer = io.StringIO()
    writer = csv.writer(buffer)
    writer.writerow(["metric", "value", "mode", "gamma", "sigma", "seed"])
    for report in reports:
        gamma = "" if report.gamma is None else report.gamma
        for name, value in report.metric_rows():
            writer.writerow([name, repr(value), report.mode, gamma, report.sigma, seed])
    sys.stdout.write(buffer.getvalue())
    if args.out is not None:
        out = Path(args.out)
        if out.suffix == ".json":
            write_json(out, reports, seed)
        else:
            write_csv(out, reports, seed)
        print(f"wrote {out}")
    return 0


def cmd_gaze_eval(args) -> int:
    dataset, params, _, _ = _load_model(args.data, args.ckpt)
    if dataset.gaze is None or not dataset.fixations:
        print("error: dataset has no gaze data; generate it with gaze channels "
              "(gen.gaze_channels > 0) to use gaze-eval", file=sys.stderr)
        return 3
    report = gaze_report(dataset, params)
    print("channel,auc,nss,images")
    total_pairs = 0
    for row in report["channels"]:
        auc_s = "" if row["auc"] is None else f"{row['auc']:.4f}"
        nss_s = "" if row["nss"] is None else f"{row['nss']:.4f}"
        print(f"{row['channel']},{auc_s},{nss_s},{row['images']}")
        total_pairs += row["images"]
    print(f"mean,{report['auc']:.4f},{report['nss']:.4f},{total_pairs}")
    return 0


def _write_pgm(path: Path, values: np.ndarray) -> None:
    """8-bit binary portable graymap, min-max scaled; constant maps go black."""
    lo, hi = float(values.min()), float(values.max())
    if hi > lo:
        scaled = np.round((values - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.zeros_like(values)
    h, w = values.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    _write_atomic(path, header + scaled.astype(np.uint8).tobytes())


def cmd_viz(args) -> int:
    dataset, params, _, _ = _load_model(args.data, args.ckpt)
    index = args.image
    if not 0 <= index < len(dataset.images):
        print(f"error: image index {index} outside 0..{len(dataset.images) - 1}",
              file=sys.stderr)
        return 3
    queries = attribute_queries(params, dataset.word_vectors)
    with ad.no_grad():
        out = forward(params, dataset.image(index), queries, with_gaze=True)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    maps = out.maps.values
    for k in range(maps.shape[2]):
        _write_pgm(out_dir / f"attention_{k:02d}.pgm", maps[:, :, k])
    gaze = out.gaze.values
    for d in range(gaze.shape[2]):
        _write_pgm(out_dir / f"gaze_{d:02d}.pgm", gaze[:, :, d])
    scores = out.attribute_scores.values.ravel()
    lines = ["attribute,score"]
    lines += [f"{k},{repr(float(s))}" for k, s in enumerate(scores)]
    _write_atomic(out_dir / "attributes.csv", "\n".join(lines) + "\n")
    print(f"wrote {maps.shape[2]} attention maps + {gaze.shape[2]} gaze maps "
          f"+ attributes.csv to {out_dir}")
    return 0


# --------------------------------------------------------------------------
# gradcheck


def _gradcheck_fixture():
    """Small deterministic model with every relu in its open region.

    A closed relu's exact-zero gradient reads as noise under central
    differences, so the harness initializes positive weights and inputs;
    the chain rule is identical either way.
    """
    encoder = EncoderConfig(input_size=(16, 16, 3), stage_channels=(3, 5),
                            kernel=2, stride=2, word_dim=8, word_hidden=6)
    k, d = 4, 2
    rng = np.random.Generator(np.random.Philox(key=[7, 0]))
    config = ModelConfig(encoder=encoder, num_attributes=k, gaze_channels=d, sigma=20.0)
    params = init_params(config, rng)
    for tensor in params.image.kernels:
        tensor.values[...] = np.abs(tensor.values) + 0.05
    for tensor in params.image.biases:
        tensor.values[...] = 0.5
    params.word.hidden_w.values[...] = np.abs(params.word.hidden_w.values) + 0.05
    params.word.hidden_b.values[...] = 0.5
    image = rng.uniform(0.1, 1.0, size=encoder.input_size)
    words = rng.uniform(0.1, 1.0, size=(k, encoder.word_dim))
    words = WordVectors(words / np.linalg.norm(words, axis=1, keepdims=True))
    phi = np.array([[1.0, 0.0, 1.0, 0.0],
                    [0.0, 1.0, 0.0, 1.0],
                    [1.0, 1.0, 0.0, 0.0]])
    gaze_target = rng.uniform(0.05, 0.95, size=(4, 4, d))
    return params, image, words, phi, gaze_target


def run_gradcheck(corrupt: bool = False, tolerance: float = 1e-5):
    """Finite-difference rows for each loss; returns (rows, all_passed).

    Each loss is checked against the parameters actually on its gradient
    path. The conv biases are covered by the classification row: the
    attention softmax cancels a uniform bias shift exactly (strided valid
    convolutions tile the input), so the attention-side losses carry no
    bias gradient to compare against.
    """
    ad.set_precision("float64")
    params, image, words, phi, gaze_target = _gradcheck_fixture()
    conv = list(params.image.kernels) + list(params.image.biases)
    word = [params.word.hidden_w, params.word.hidden_b,
            params.word.out_w, params.word.out_b]
    attention_side = list(params.image.kernels) + word

    def features():
        return encode_image(image, params.image)

    def maps():
        return attention(encode_words(words, params.word), features())

    def loss_cls():
        # sigma 4: at 20 the fixture's softmax saturates and every gradient
        # shrinks to the e^(-gap) scale, far below what the check can resolve
        scores = cosine_scores(pool_global(features()), params.projection, phi, 4.0)
        loss = cls_loss(scores, 1)
        if corrupt:
            # test hook: a detached copy of the first kernel leaks into the
            # value but not the gradient, which the check must flag
            leak = ad.sum_all(ad.constant(0.001 * params.image.kernels[0].values))
            loss = ad.add(loss, leak)
        return loss

    def loss_dis():
        return distance_loss(maps())

    def loss_mse():
        return mse_loss(ad.global_max_pool(maps()), phi[1])

    def loss_gaze():
        return gaze_loss(attention_transition(maps(), params.transition), gaze_target)

    rows = [
        ("cls", loss_cls, conv + [params.projection]),
        ("dis", loss_dis, attention_side),
        ("mse", loss_mse, attention_side),
        ("gaze", loss_gaze, attention_side
         + [params.transition.kernel, params.transition.bias]),
    ]
    results = []
    for name, loss_fn, leaves in rows:
        err = ad.finite_diff_check(loss_fn, leaves)
        results.append((name, err, len(leaves), err <= tolerance))
    return results, all(ok for _, _, _, ok in results)


def cmd_gradcheck(args) -> int:
    results, passed = run_gradcheck(corrupt=args.corrupt)
    print(f"{'loss':<6} {'max_rel_err':>12} {'leaves':>7} {'limit':>8} status")
    for name, err, leaves, ok in results:
        print(f"{name:<6} {err:>12.3e} {leaves:>7} {'1e-05':>8} "
              f"{'pass' if ok else 'FAIL'}")
    if not passed:
        print("gradient verification failed", file=sys.stderr)
        return 4
    return 0


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gazezsl",
        description="Gaze-guided attribute attention for zero-shot classification.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="key-value config document")
    p.add_argument("--seed", type=int, default=None, help="overrides gen.seed")
    p.add_argument("--force", action="store_true",
                   help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None, help="overrides train.seed")
    p.add_argument("--gaze", action="store_true",
                   help="turn the gaze loss on (otherwise its weight is 0)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="classification metrics for a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=("zsl", "gzsl"), default="zsl")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--gamma-sweep", default=None, metavar="LO:HI:STEP")
    p.add_argument("--out", default=None, help=".csv or .json report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gaze-eval", help="AUC/NSS of predicted gaze maps")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_gaze_eval)

    p = sub.add_parser("viz", help="write attention/gaze maps as P5 graymaps")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--corrupt", action="store_true",
                   help="self-test: corrupt one gradient and expect a failure")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("GAZEZSL_LOG", "WARNING").upper())
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (VersionError, ChecksumError, TruncatedBlobError, DimensionError,
            FileNotFoundError, NotADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, IndexError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
