"""
Desk-Scale Datasets

A seeded synthetic texture benchmark, an IDX (MNIST container) reader and
writer, seeded splits, and an on-disk cache of IDX files with a YAML sidecar.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml  # pyright: ignore[reportMissingModuleSource]

from src.rng import STREAM_SPLIT, STREAM_SYNTH, NoiseStream

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
MAX_FREQUENCY_RETRIES = 64


class DatasetError(Exception):
    """Raised on invalid datasets, specs, or split requests."""

    pass


class IdxParseError(DatasetError):
    """
    Raised when an IDX file cannot be parsed.

    Attributes:
        path: Offending file
        offset: Byte offset at which parsing failed
    """

    def __init__(self, path: Union[str, Path], offset: int, message: str):
        self.path = Path(path)
        self.offset = offset
        super().__init__(f"{path} @ byte {offset}: {message}")


@dataclass(frozen=True)
class Dataset:
    """
    Immutable labeled image set.

    Attributes:
        images: (B, C, H, W) float64 in [0, 1]
        labels: (B,) int64 in [0, num_classes)
        id: Identifier carried into reports and cache file names
        num_classes: K
    """

    images: np.ndarray
    labels: np.ndarray
    id: str
    num_classes: int

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise DatasetError(f"Dataset '{self.id}': images must be (B, C, H, W), got {images.shape}")
        if labels.shape != (images.shape[0],):
            raise DatasetError(
                f"Dataset '{self.id}': {images.shape[0]} images but labels of shape {labels.shape}"
            )
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise DatasetError(f"Dataset '{self.id}': pixels outside [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DatasetError(f"Dataset '{self.id}': labels outside [0, {self.num_classes})")
        images.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices: Sequence[int], id: Optional[str] = None) -> "Dataset":
        index = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[index], self.labels[index], id or self.id, self.num_classes)


@dataclass(frozen=True)
class SynthSpec:
    """
    Synthetic texture benchmark parameters.

    Class c has template 0.5 + 0.35 * sin(2 pi (fx i / H + fy j / W) + phi_c)
    with distinct integer frequencies (fx, fy) in {1..4}^2.
    """

    num_classes: int = 4
    height: int = 16
    width: int = 16
    train_per_class: int = 500
    val_per_class: int = 100
    test_per_class: int = 250
    jitter: float = 0.08
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise DatasetError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_classes > 16:
            raise DatasetError("At most 16 distinct frequency pairs exist in {1..4}^2")
        if self.height < 1 or self.width < 1:
            raise DatasetError(f"Invalid image size {self.height}x{self.width}")
        if min(self.train_per_class, self.val_per_class, self.test_per_class) < 1:
            raise DatasetError("Samples per class must be >= 1 for every split")
        if self.jitter < 0:
            raise DatasetError(f"jitter must be >= 0, got {self.jitter}")

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)

    @property
    def id(self) -> str:
        return f"synth-k{self.num_classes}-{self.height}x{self.width}-s{self.seed}"


def class_templates(spec: SynthSpec) -> Tuple[np.ndarray, List[Tuple[int, int, float]]]:
    """
    Draw per-class frequencies and phases, and build the templates.

    Returns:
        (templates of shape (K, H, W), [(fx, fy, phi) per class])

    Raises:
        DatasetError: If distinct frequencies cannot be drawn within the retry budget
    """
    spec.validate()
    stream = NoiseStream(spec.seed, STREAM_SYNTH, 0)
    used = set()
    draws = []
    for c in range(spec.num_classes):
        for _ in range(MAX_FREQUENCY_RETRIES):
            fx, fy = (int(v) for v in stream.integers(1, 5, 2))
            phi = float(stream.uniform(1, 0.0, 2.0 * np.pi)[0])
            if (fx, fy) not in used:
                break
        else:
            raise DatasetError(
                f"Could not draw a distinct frequency pair for class {c} "
                f"in {MAX_FREQUENCY_RETRIES} attempts"
            )
        used.add((fx, fy))
        draws.append((fx, fy, phi))

    i = np.arange(spec.height).reshape(-1, 1) / spec.height
    j = np.arange(spec.width).reshape(1, -1) / spec.width
    templates = np.stack(
        [0.5 + 0.35 * np.sin(2.0 * np.pi * (fx * i + fy * j) + phi) for fx, fy, phi in draws]
    )
    return templates, draws


def generate_synth(spec: SynthSpec) -> Tuple[Dataset, Dataset, Dataset]:
    """
    Generate class-balanced (train, val, test) sets.

    Each sample is clamp(T_c + jitter * U(-1, 1), 0, 1); every split draws
    from its own stream.
    """
    templates, draws = class_templates(spec)
    logger.debug("Synthetic class frequencies/phases: %s", draws)

    splits = []
    for index, (name, per_class) in enumerate(
        (("train", spec.train_per_class), ("val", spec.val_per_class), ("test", spec.test_per_class))
    ):
        stream = NoiseStream(spec.seed, STREAM_SYNTH, index + 1)
        images = []
        for c in range(spec.num_classes):
            noise = stream.uniform((per_class, spec.height, spec.width), -1.0, 1.0)
            images.append(np.clip(templates[c] + spec.jitter * noise, 0.0, 1.0))
        labels = np.repeat(np.arange(spec.num_classes), per_class)
        splits.append(
            Dataset(
                np.concatenate(images)[:, None, :, :],
                labels,
                f"{spec.id}-{name}",
                spec.num_classes,
            )
        )
    return tuple(splits)


def _read_header(path: Path, payload: bytes, magic: int, dims: int) -> Tuple[int, ...]:
    header_len = 4 + 4 * dims
    if len(payload) < 4:
        raise IdxParseError(path, len(payload), "file too short for the magic number")
    found = int.from_bytes(payload[:4], "big")
    if found != magic:
        raise IdxParseError(path, 0, f"expected magic {magic:#010x}, found {found:#010x}")
    if len(payload) < header_len:
        raise IdxParseError(path, len(payload), "truncated header")
    return tuple(int(v) for v in np.frombuffer(payload[4:header_len], dtype=">u4"))


def _read_bytes(path: Path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def load_idx(
    images_path: Union[str, Path],
    labels_path: Union[str, Path],
    id: Optional[str] = None,
    num_classes: Optional[int] = None,
) -> Dataset:
    """
    Read an IDX image/label pair.

    Pixels are scaled by 1/255; images become (N, 1, rows, cols).

    Raises:
        IdxParseError: On a wrong magic number, truncation, or count mismatch
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    image_bytes = _read_bytes(images_path)
    label_bytes = _read_bytes(labels_path)

    count, rows, cols = _read_header(images_path, image_bytes, IMAGES_MAGIC, 3)
    (label_count,) = _read_header(labels_path, label_bytes, LABELS_MAGIC, 1)

    expected = 16 + count * rows * cols
    if len(image_bytes) < expected:
        raise IdxParseError(
            images_path, len(image_bytes), f"truncated payload, expected {expected} bytes"
        )
    if len(label_bytes) < 8 + label_count:
        raise IdxParseError(
            labels_path, len(label_bytes), f"truncated payload, expected {8 + label_count} bytes"
        )
    if label_count != count:
        raise IdxParseError(
            labels_path, 4, f"label count {label_count} does not match image count {count}"
        )

    pixels = np.frombuffer(image_bytes, dtype=np.uint8, count=count * rows * cols, offset=16)
    labels = np.frombuffer(label_bytes, dtype=np.uint8, count=count, offset=8).astype(np.int64)
    images = pixels.reshape(count, 1, rows, cols).astype(np.float64) / 255.0

    k = num_classes if num_classes is not None else max(2, int(labels.max()) + 1 if count else 2)
    return Dataset(images, labels, id or images_path.stem, k)


def write_idx(
    dataset: Dataset, images_path: Union[str, Path], labels_path: Union[str, Path]
) -> None:
    """
    Write a single-channel dataset as an IDX pair, quantizing pixels to 8 bits.

    Raises:
        DatasetError: On multi-channel images or labels above 255
    """
    count, channels, rows, cols = dataset.images.shape
    if channels != 1:
        raise DatasetError(f"IDX holds single-channel images, got {channels} channels")
    if dataset.num_classes > 256:
        raise DatasetError("IDX labels are single bytes")

    pixels = np.rint(dataset.images.reshape(count, rows, cols) * 255.0).astype(np.uint8)
    images_path, labels_path = Path(images_path), Path(labels_path)
    images_path.parent.mkdir(parents=True, exist_ok=True)
    labels_path.parent.mkdir(parents=True, exist_ok=True)
    with open(images_path, "wb") as f:
        f.write(np.array([IMAGES_MAGIC, count, rows, cols], dtype=">u4").tobytes())
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(np.array([LABELS_MAGIC, count], dtype=">u4").tobytes())
        f.write(dataset.labels.astype(np.uint8).tobytes())


def split(
    dataset: Dataset,
    fractions: Sequence[float],
    seed: int,
    stratify: bool = False,
) -> List[Dataset]:
    """
    Seeded permutation followed by contiguous slices.

    Each part gets floor(fraction * N) examples (or, when stratified,
    floor(fraction * N_c) of every class c), so class counts stay within one
    of proportional.

    Raises:
        DatasetError: If a fraction is not positive or they sum above 1
    """
    fractions = [float(f) for f in fractions]
    if not fractions or any(f <= 0 for f in fractions):
        raise DatasetError(f"Split fractions must be positive, got {fractions}")
    if sum(fractions) > 1.0 + 1e-12:
        raise DatasetError(f"Split fractions sum to {sum(fractions)} > 1")

    stream = NoiseStream(seed, STREAM_SPLIT)
    if stratify:
        groups = [
            np.flatnonzero(dataset.labels == c)[stream.child(c).permutation(int(n))]
            for c, n in enumerate(dataset.class_counts())
        ]
    else:
        groups = [stream.permutation(len(dataset))]

    parts: List[List[np.ndarray]] = [[] for _ in fractions]
    for group in groups:
        start = 0
        for index, fraction in enumerate(fractions):
            size = int(np.floor(fraction * len(group) + 1e-9))
            parts[index].append(group[start : start + size])
            start += size

    return [
        dataset.subset(np.concatenate(chunks), f"{dataset.id}-part{index}")
        for index, chunks in enumerate(parts)
    ]


def _cache_paths(directory: Path, dataset_id: str) -> Tuple[Path, Path, Path]:
    return (
        directory / f"{dataset_id}-images.idx",
        directory / f"{dataset_id}-labels.idx",
        directory / f"{dataset_id}.meta.yaml",
    )


def save_dataset_cache(
    dataset: Dataset,
    directory: Union[str, Path],
    metadata: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write the dataset as IDX files plus a ``<id>.meta.yaml`` sidecar."""
    directory = Path(directory)
    images_path, labels_path, meta_path = _cache_paths(directory, dataset.id)
    write_idx(dataset, images_path, labels_path)
    sidecar = {
        "id": dataset.id,
        "num_classes": dataset.num_classes,
        "count": len(dataset),
        "metadata": metadata or {},
    }
    with open(meta_path, "w", encoding="utf-8") as f:
        yaml.safe_dump(sidecar, f, sort_keys=True)
    logger.info("Cached dataset %s (%d examples) in %s", dataset.id, len(dataset), directory)
    return meta_path


def load_dataset_cache(directory: Union[str, Path], dataset_id: str) -> Optional[Dataset]:
    """Load a cached dataset, or None when the cache holds no entry for ``dataset_id``."""
    images_path, labels_path, meta_path = _cache_paths(Path(directory), dataset_id)
    if not meta_path.exists():
        return None
    with open(meta_path, "r", encoding="utf-8") as f:
        sidecar = yaml.safe_load(f) or {}
    return load_idx(images_path, labels_path, sidecar.get("id", dataset_id), sidecar.get("num_classes"))
