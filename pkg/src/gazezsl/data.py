"""Synthetic attribute-grounded dataset, episode sampling, and persistence.

Every class is a random binary attribute vector; every image renders its
class's active attributes as solid colored blobs, one per attribute, each
confined to its own cell of a placement grid that coincides with the gaze
grid. Gaze ground truth is built from the blob centers of the D most
distinctive attributes (lowest document frequency across seen classes):
each center becomes a fixation point on the gaze grid and a Gaussian-blurred,
max-normalized heatmap channel. The generator keeps a ledger of every blob it
painted so tests can audit images against it.

Randomness is drawn from counter-based Philox streams keyed as
``[seed, stream]`` — stream 10 for class vectors, 11 for word vectors,
13 for train/test splits, ``1000 + i`` for image i — so generation is
reproducible image-by-image and order-independent. The color table has its
own seed so palettes can be varied without changing the data.

On-disk layout (dataset and checkpoint alike): a directory with a
``manifest.json`` and raw binary blobs of little-endian IEEE-754 floats in
row-major order, each protected by a CRC32 recorded in the manifest. Loading
distinguishes version mismatch, truncation, and corruption.
"""

from __future__ import annotations

import colorsys
import dataclasses
import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .classifier import ClassEmbeddings
from .encoders import WordVectors
from .errors import (
    ChecksumError,
    ConfigError,
    DimensionError,
    GenerationError,
    TruncatedBlobError,
    VersionError,
)

FORMAT_VERSION = 1

_STREAM_CLASSES = 10
_STREAM_WORDS = 11
_STREAM_COLORS = 12
_STREAM_SPLIT = 13
_STREAM_IMAGE_BASE = 1000


def _stream(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, stream]))


@dataclass(frozen=True)
class GenConfig:
    num_seen: int = 20
    num_unseen: int = 5
    num_attributes: int = 12
    images_per_class: int = 40
    image_size: tuple[int, int, int] = (32, 32, 3)
    blob_radius: int = 3
    color_seed: int = 7
    gaze_channels: int = 3
    gaze_grid: tuple[int, int] = (4, 4)
    blur_sigma: float = 1.0
    noise: float = 0.15
    word_dim: int = 50
    train_fraction: float = 0.8
    seed: int = 42

    def __post_init__(self) -> None:
        if self.num_seen < 2 or self.num_unseen < 1:
            raise ConfigError(f"need >=2 seen and >=1 unseen classes, "
                              f"got {self.num_seen}/{self.num_unseen}")
        if self.num_attributes < 2:
            raise ConfigError(f"need >=2 attributes, got {self.num_attributes}")
        if self.images_per_class < 2:
            raise ConfigError("need >=2 images per class to split train/test")
        hi, wi, ch = self.image_size
        gh, gw = self.gaze_grid
        if ch != 3:
            raise ConfigError(f"renderer paints RGB images, got {ch} channels")
        if gh < 2 or gw < 2 or hi % gh or wi % gw:
            raise ConfigError(f"gaze grid {self.gaze_grid} must be >=2x2 and "
                              f"divide the image size {(hi, wi)}")
        cell = min(hi // gh, wi // gw)
        if self.blob_radius < 1 or 2 * self.blob_radius + 1 > cell:
            raise ConfigError(f"blob radius {self.blob_radius} does not fit a "
                              f"{cell}px placement cell")
        if self.num_attributes > gh * gw:
            raise ConfigError(f"{self.num_attributes} attributes cannot occupy "
                              f"{gh * gw} distinct cells")
        if not 1 <= self.gaze_channels <= self.num_attributes:
            raise ConfigError(f"gaze_channels must be in [1, K], got {self.gaze_channels}")
        if self.blur_sigma <= 0:
            raise ConfigError(f"blur_sigma must be positive, got {self.blur_sigma}")
        if not 0 <= self.noise < 1:
            raise ConfigError(f"noise level must be in [0, 1), got {self.noise}")
        if not 0 < self.train_fraction < 1:
            raise ConfigError(f"train_fraction must be in (0, 1), got {self.train_fraction}")

    @property
    def num_classes(self) -> int:
        return self.num_seen + self.num_unseen


def attribute_colors(cfg: GenConfig) -> np.ndarray:
    """K x 3 palette of saturated, evenly spaced hues, order shuffled by color_seed."""
    k = cfg.num_attributes
    hues = _stream(cfg.color_seed, _STREAM_COLORS).permutation(k) / k
    return np.array([colorsys.hsv_to_rgb(h, 0.9, 0.9) for h in hues])


@dataclass(frozen=True)
class ZslDataset:
    """Images, labels, class attributes, splits, and optional gaze supervision.

    ``gaze`` is stored channel-first (N x D x H x W); use
    :meth:`gaze_channels_last` to feed the loss. ``fixations[i][d]`` lists the
    gaze-grid cells fixated in channel d of image i (possibly empty).
    ``blob_ledger[i]`` records every painted blob as (attribute, row, col) in
    pixel coordinates.
    """

    images: np.ndarray
    labels: np.ndarray
    embeddings: ClassEmbeddings
    word_vectors: WordVectors
    train_indices: tuple[int, ...]
    test_indices: tuple[int, ...]
    gaze: np.ndarray | None = None
    fixations: tuple | None = None
    gaze_attributes: tuple[int, ...] = ()
    blob_ledger: tuple = ()
    gen_config: GenConfig | None = None

    def __post_init__(self) -> None:
        n = self.images.shape[0]
        if self.images.ndim != 4 or self.labels.shape != (n,):
            raise DimensionError(f"images {self.images.shape} vs labels {self.labels.shape}")
        ids = set(self.embeddings.class_ids)
        if not set(self.labels.tolist()) <= ids:
            raise ValueError("labels outside the class id set")
        phi = self.embeddings.matrix
        if phi.min() < 0 or phi.max() > 1:
            raise ValueError("attribute matrix entries must lie in [0, 1]")
        indices = list(self.train_indices) + list(self.test_indices)
        if sorted(indices) != list(range(n)):
            raise ValueError("train/test indices must partition the images")
        train_labels = set(self.labels[list(self.train_indices)].tolist())
        if not train_labels <= self.embeddings.seen:
            raise ValueError("training indices include unseen-class images")
        if self.gaze is not None:
            if self.gaze.shape[0] != n:
                raise DimensionError(f"gaze {self.gaze.shape} vs {n} images")
            maxima = self.gaze.reshape(n, self.gaze.shape[1], -1).max(axis=2)
            nonempty = maxima > 0
            if not np.all(maxima[nonempty] == 1.0):
                raise ValueError("nonempty gaze channels must be max-normalized to 1")

    @property
    def num_images(self) -> int:
        return self.images.shape[0]

    def image(self, i: int) -> np.ndarray:
        return self.images[i].astype(np.float64)

    def gaze_channels_last(self, i: int) -> np.ndarray:
        if self.gaze is None:
            raise ValueError("dataset has no gaze channels")
        return self.gaze[i].transpose(1, 2, 0).astype(np.float64)

    def phi_of(self, class_id: int) -> np.ndarray:
        return self.embeddings.matrix[self.embeddings.row_of(class_id)]

    def train_indices_of(self, class_id: int) -> tuple[int, ...]:
        return tuple(i for i in self.train_indices if self.labels[i] == class_id)


def fixations_to_heatmap(points, grid: tuple[int, int], blur_sigma: float) -> np.ndarray:
    """Sum of unit Gaussians at the given (row, col) cells, rescaled to max 1."""
    if blur_sigma <= 0:
        raise ValueError(f"blur_sigma must be positive, got {blur_sigma}")
    h, w = grid
    heat = np.zeros((h, w))
    if not points:
        return heat
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    for r, c in points:
        if not (0 <= r < h and 0 <= c < w):
            raise ValueError(f"fixation ({r}, {c}) outside {h}x{w} grid")
        heat += np.exp(-((rows - r) ** 2 + (cols - c) ** 2) / (2 * blur_sigma**2))
    return heat / heat.max()


def _sample_attribute_matrix(cfg: GenConfig) -> np.ndarray:
    """Distinct nonzero binary rows, one per class; row order is class-id order."""
    if cfg.num_classes > 2**cfg.num_attributes - 1:
        raise GenerationError(f"{cfg.num_classes} distinct nonzero rows do not exist "
                              f"in {{0,1}}^{cfg.num_attributes}")
    rng = _stream(cfg.seed, _STREAM_CLASSES)
    rows: list[tuple[int, ...]] = []
    taken = set()
    for _ in range(cfg.num_classes):
        for attempt in range(1000):
            row = tuple(int(b) for b in rng.integers(0, 2, size=cfg.num_attributes))
            if any(row) and row not in taken:
                taken.add(row)
                rows.append(row)
                break
        else:
            raise GenerationError("could not sample a fresh attribute row in 1000 attempts")
    return np.array(rows, dtype=np.float64)


def _distinctive_attributes(phi_seen: np.ndarray, d: int) -> tuple[int, ...]:
    """The d attributes rarest across seen classes (ties to the lower index)."""
    frequency = (phi_seen > 0).sum(axis=0)
    return tuple(int(k) for k in np.argsort(frequency, kind="stable")[:d])


def _render_image(cfg: GenConfig, active: np.ndarray, colors: np.ndarray,
                  rng: np.random.Generator):
    """Noise background plus one solid color blob per active attribute.

    Blobs occupy distinct cells of the gaze grid, so they can never overlap
    and each blob's grid cell is its fixation point. Returns the image and
    the (attribute, row, col) ledger of painted centers.
    """
    hi, wi, _ = cfg.image_size
    gh, gw = cfg.gaze_grid
    cell_h, cell_w = hi // gh, wi // gw
    r = cfg.blob_radius
    img = rng.uniform(0.0, cfg.noise, size=cfg.image_size) if cfg.noise > 0 \
        else np.zeros(cfg.image_size)
    cells = rng.choice(gh * gw, size=len(active), replace=False)
    ledger = []
    yy, xx = np.meshgrid(np.arange(hi), np.arange(wi), indexing="ij")
    for attr, cell in zip(active, cells):
        ci, cj = int(cell) // gw, int(cell) % gw
        row = ci * cell_h + int(rng.integers(r, cell_h - r))
        col = cj * cell_w + int(rng.integers(r, cell_w - r))
        mask = (yy - row) ** 2 + (xx - col) ** 2 <= r**2
        img[mask] = colors[attr]
        ledger.append((int(attr), row, col))
    return img, tuple(ledger)


def generate_synthetic(cfg: GenConfig) -> ZslDataset:
    """Deterministic synthetic dataset; see the module docstring for the recipe."""
    phi = _sample_attribute_matrix(cfg)
    seen_ids = tuple(range(cfg.num_seen))
    unseen_ids = tuple(range(cfg.num_seen, cfg.num_classes))
    embeddings = ClassEmbeddings(phi, tuple(range(cfg.num_classes)),
                                 frozenset(seen_ids), frozenset(unseen_ids))
    word_rng = _stream(cfg.seed, _STREAM_WORDS)
    words = word_rng.standard_normal((cfg.num_attributes, cfg.word_dim))
    words /= np.linalg.norm(words, axis=1, keepdims=True)
    colors = attribute_colors(cfg)
    distinctive = _distinctive_attributes(phi[list(seen_ids)], cfg.gaze_channels)

    n = cfg.num_classes * cfg.images_per_class
    gh, gw = cfg.gaze_grid
    cell_h = cfg.image_size[0] // gh
    cell_w = cfg.image_size[1] // gw
    images = np.empty((n,) + cfg.image_size, dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    gaze = np.zeros((n, cfg.gaze_channels, gh, gw), dtype=np.float32)
    fixations = []
    ledgers = []
    for class_row in range(cfg.num_classes):
        active = np.flatnonzero(phi[class_row] > 0)
        for j in range(cfg.images_per_class):
            i = class_row * cfg.images_per_class + j
            rng = _stream(cfg.seed, _STREAM_IMAGE_BASE + i)
            img, ledger = _render_image(cfg, active, colors, rng)
            images[i] = img
            labels[i] = class_row
            ledgers.append(ledger)
            centers = {attr: (row, col) for attr, row, col in ledger}
            per_channel = []
            for attr in distinctive:
                points = []
                if attr in centers:
                    row, col = centers[attr]
                    points.append((row // cell_h, col // cell_w))
                per_channel.append(tuple(points))
                d = len(per_channel) - 1
                gaze[i, d] = fixations_to_heatmap(points, cfg.gaze_grid, cfg.blur_sigma)
            fixations.append(tuple(per_channel))

    split_rng = _stream(cfg.seed, _STREAM_SPLIT)
    train, test = [], []
    for class_row in range(cfg.num_classes):
        start = class_row * cfg.images_per_class
        order = start + split_rng.permutation(cfg.images_per_class)
        if class_row in seen_ids:
            n_train = int(round(cfg.train_fraction * cfg.images_per_class))
            n_train = max(1, min(cfg.images_per_class - 1, n_train))
            train.extend(order[:n_train].tolist())
            test.extend(order[n_train:].tolist())
        else:
            test.extend(order.tolist())

    return ZslDataset(images=images, labels=labels, embeddings=embeddings,
                      word_vectors=WordVectors(words),
                      train_indices=tuple(sorted(train)),
                      test_indices=tuple(sorted(test)),
                      gaze=gaze, fixations=tuple(fixations),
                      gaze_attributes=distinctive, blob_ledger=tuple(ledgers),
                      gen_config=cfg)


@dataclass(frozen=True)
class Sample:
    """One training example in loss-ready layout (gaze channels last)."""

    index: int
    image: np.ndarray
    label: int
    phi: np.ndarray
    gaze: np.ndarray | None


def sample_episode(dataset: ZslDataset, m: int, n: int,
                   rng: np.random.Generator, with_gaze: bool = True) -> list[Sample]:
    """M distinct seen classes x N distinct training images each."""
    if m < 1 or n < 1:
        raise ConfigError(f"episode needs m, n >= 1, got m={m} n={n}")
    eligible = [c for c in sorted(dataset.embeddings.seen)
                if len(dataset.train_indices_of(c)) >= n]
    if len(eligible) < m:
        raise ConfigError(f"only {len(eligible)} seen classes have >= {n} "
                          f"training images; episode needs {m}")
    classes = rng.choice(len(eligible), size=m, replace=False)
    batch = []
    for ci in classes:
        class_id = eligible[int(ci)]
        pool = dataset.train_indices_of(class_id)
        picks = rng.choice(len(pool), size=n, replace=False)
        for pi in picks:
            i = pool[int(pi)]
            gaze = dataset.gaze_channels_last(i) if with_gaze and dataset.gaze is not None else None
            batch.append(Sample(index=i, image=dataset.image(i), label=class_id,
                                phi=dataset.phi_of(class_id), gaze=gaze))
    return batch


# ---------------------------------------------------------------------------
# persistence


def _crc(raw: bytes) -> int:
    return zlib.crc32(raw) & 0xFFFFFFFF


def _write_manifest(path: Path, manifest: dict) -> None:
    path.joinpath("manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True))


def _read_manifest(path: Path, kind: str) -> dict:
    manifest = json.loads(Path(path).joinpath("manifest.json").read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"manifest version {version!r}, this code reads {FORMAT_VERSION}")
    if manifest.get("kind") != kind:
        raise VersionError(f"expected a {kind} directory, found {manifest.get('kind')!r}")
    return manifest


def _read_blob(path: Path, name: str, dtype: str, shape: tuple[int, ...],
               crc: int) -> np.ndarray:
    raw = path.joinpath(name).read_bytes()
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise TruncatedBlobError(f"{name}: {len(raw)} bytes, expected {expected}")
    if _crc(raw) != crc:
        raise ChecksumError(f"{name}: CRC32 mismatch")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def save_dataset(path, dataset: ZslDataset) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    images_raw = np.ascontiguousarray(dataset.images, dtype="<f4").tobytes()
    blobs = {"images.bin": images_raw}
    if dataset.gaze is not None:
        blobs["gaze.bin"] = np.ascontiguousarray(dataset.gaze, dtype="<f4").tobytes()
    emb = dataset.embeddings
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "dataset",
        "image_shape": list(dataset.images.shape),
        "gaze_shape": list(dataset.gaze.shape) if dataset.gaze is not None else None,
        "labels": dataset.labels.tolist(),
        "class_ids": list(emb.class_ids),
        "seen": sorted(emb.seen),
        "unseen": sorted(emb.unseen),
        "attributes": emb.matrix.tolist(),
        "word_vectors": dataset.word_vectors.matrix.tolist(),
        "train_indices": list(dataset.train_indices),
        "test_indices": list(dataset.test_indices),
        "fixations": [[list(map(list, ch)) for ch in per_image]
                      for per_image in dataset.fixations] if dataset.fixations else None,
        "gaze_attributes": list(dataset.gaze_attributes),
        "blob_ledger": [list(map(list, entry)) for entry in dataset.blob_ledger],
        "gen_config": dataclasses.asdict(dataset.gen_config) if dataset.gen_config else None,
        "crc32": {name: _crc(raw) for name, raw in blobs.items()},
    }
    for name, raw in blobs.items():
        path.joinpath(name).write_bytes(raw)
    _write_manifest(path, manifest)


def load_dataset(path) -> ZslDataset:
    path = Path(path)
    manifest = _read_manifest(path, "dataset")
    crcs = manifest["crc32"]
    images = _read_blob(path, "images.bin", "<f4", tuple(manifest["image_shape"]),
                        crcs["images.bin"])
    gaze = None
    if manifest["gaze_shape"] is not None:
        gaze = _read_blob(path, "gaze.bin", "<f4", tuple(manifest["gaze_shape"]),
                          crcs["gaze.bin"])
    emb = ClassEmbeddings(np.array(manifest["attributes"], dtype=np.float64),
                          tuple(manifest["class_ids"]),
                          frozenset(manifest["seen"]), frozenset(manifest["unseen"]))
    fixations = None
    if manifest["fixations"] is not None:
        fixations = tuple(tuple(tuple((r, c) for r, c in ch) for ch in per_image)
                          for per_image in manifest["fixations"])
    cfg = None
    if manifest["gen_config"] is not None:
        raw = dict(manifest["gen_config"])
        for key in ("image_size", "gaze_grid"):
            raw[key] = tuple(raw[key])
        cfg = GenConfig(**raw)
    return ZslDataset(images=images,
                      labels=np.array(manifest["labels"], dtype=np.int64),
                      embeddings=emb,
                      word_vectors=WordVectors(np.array(manifest["word_vectors"])),
                      train_indices=tuple(manifest["train_indices"]),
                      test_indices=tuple(manifest["test_indices"]),
                      gaze=gaze, fixations=fixations,
                      gaze_attributes=tuple(manifest["gaze_attributes"]),
                      blob_ledger=tuple(tuple((a, r, c) for a, r, c in entry)
                                        for entry in manifest["blob_ledger"]),
                      gen_config=cfg)


def save_checkpoint(path, tensors: dict, config: dict, epoch: int) -> None:
    """Persist named float64 tensors plus the config snapshot and epoch counter."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names, specs, parts = [], [], []
    for name, values in tensors.items():
        arr = np.ascontiguousarray(values, dtype="<f8")
        names.append(name)
        specs.append({"name": name, "shape": list(arr.shape)})
        parts.append(arr.tobytes())
    raw = b"".join(parts)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "checkpoint",
        "epoch": int(epoch),
        "config": config,
        "tensors": specs,
        "crc32": {"tensors.bin": _crc(raw)},
    }
    path.joinpath("tensors.bin").write_bytes(raw)
    _write_manifest(path, manifest)


def load_checkpoint(path) -> tuple[dict, dict, int]:
    """Returns (name -> float64 array, config snapshot, epoch)."""
    path = Path(path)
    manifest = _read_manifest(path, "checkpoint")
    raw = path.joinpath("tensors.bin").read_bytes()
    total = sum(int(np.prod(spec["shape"])) for spec in manifest["tensors"])
    if len(raw) != total * 8:
        raise TruncatedBlobError(f"tensors.bin: {len(raw)} bytes, expected {total * 8}")
    if _crc(raw) != manifest["crc32"]["tensors.bin"]:
        raise ChecksumError("tensors.bin: CRC32 mismatch")
    flat = np.frombuffer(raw, dtype="<f8")
    tensors, offset = {}, 0
    for spec in manifest["tensors"]:
        size = int(np.prod(spec["shape"]))
        tensors[spec["name"]] = flat[offset:offset + size].reshape(spec["shape"]).copy()
        offset += size
    return tensors, manifest["config"], manifest["epoch"]
