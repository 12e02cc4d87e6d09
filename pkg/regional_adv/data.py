"""
Desk-scale image data: CIFAR-10 binary records and a procedural fallback.

A CIFAR-10 binary record is 3073 bytes: one label byte followed by the 1024
red, 1024 green and 1024 blue pixel bytes of a 32×32 image. Images are held
as float arrays of shape N×3×32×32 with values k/255.
"""

import logging
import tarfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from regional_adv.network import Network
from regional_adv.utils import HTTPClient
from regional_adv.zoo import predict_dataset

logger = logging.getLogger(__name__)

IMAGE_SHAPE = (3, 32, 32)
PIXELS_PER_IMAGE = 3 * 32 * 32
RECORD_BYTES = 1 + PIXELS_PER_IMAGE
NUM_CLASSES = 10
CIFAR_ARCHIVE_DIR = "cifar-10-batches-bin"
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


class DatasetFormatError(ValueError):
    """Raised when image data violates the binary layout or value ranges."""


class InsufficientPoolError(ValueError):
    """Raised when too few images are classified correctly by every model."""


@dataclass(frozen=True)
class LabelledDataset:
    """
    Images in [0, 1] with labels in [0, 10).

    ``ids`` are stable image identifiers (row indices into the split the
    images were loaded from), preserved through :meth:`subset`.
    """

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    ids: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.images.ndim != 4 or self.images.shape[1:] != IMAGE_SHAPE:
            raise DatasetFormatError(
                f"images must be N×3×32×32, got shape {self.images.shape}"
            )
        if len(self.images) != len(self.labels):
            raise DatasetFormatError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if self.images.size and (
            not np.all(np.isfinite(self.images))
            or self.images.min() < 0
            or self.images.max() > 1
        ):
            raise DatasetFormatError("pixel values must be finite and within [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= 10):
            raise DatasetFormatError("labels must lie in [0, 10)")
        if self.ids is None:
            object.__setattr__(self, "ids", np.arange(len(self.labels)))

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices: Sequence[int] | np.ndarray) -> "LabelledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabelledDataset(
            images=self.images[indices],
            labels=self.labels[indices],
            split=self.split,
            ids=self.ids[indices],
        )

    def position_of(self, image_id: int) -> int:
        """Row holding ``image_id``."""
        matches = np.flatnonzero(self.ids == image_id)
        if matches.size == 0:
            raise KeyError(f"image id {image_id} not in the {self.split} split")
        return int(matches[0])


def decode_cifar_records(payload: bytes, split: str, source: str) -> LabelledDataset:
    if len(payload) % RECORD_BYTES:
        raise DatasetFormatError(
            f"truncated record: {source} holds {len(payload)} bytes, "
            f"not a multiple of {RECORD_BYTES}"
        )
    if not payload:
        raise DatasetFormatError(f"{source} holds no records")
    records = np.frombuffer(payload, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= NUM_CLASSES)
    if bad.size:
        raise DatasetFormatError(
            f"{source}: label {labels[bad[0]]} out of range at record {bad[0]}"
        )
    images = records[:, 1:].reshape(-1, *IMAGE_SHAPE) / 255.0
    return LabelledDataset(images=images, labels=labels, split=split)


def load_cifar_binary(path: Path, split: str = "test") -> LabelledDataset:
    """
    Load one CIFAR-10 binary batch file.

    Raises:
        DatasetFormatError: If the size is not a whole number of records
            ("truncated record") or a label byte exceeds 9.
    """
    path = Path(path)
    dataset = decode_cifar_records(path.read_bytes(), split, str(path))
    logger.info("Loaded %d %s images from %s", len(dataset), split, path)
    return dataset


def encode_cifar_records(dataset: LabelledDataset) -> bytes:
    pixels = np.rint(dataset.images * 255).astype(np.uint8).reshape(len(dataset), -1)
    labels = dataset.labels.astype(np.uint8)[:, np.newaxis]
    return np.hstack([labels, pixels]).tobytes()


def save_cifar_binary(dataset: LabelledDataset, path: Path) -> None:
    Path(path).write_bytes(encode_cifar_records(dataset))


def load_cifar_dir(directory: Path) -> tuple[LabelledDataset, LabelledDataset]:
    """
    Load the training batches present in ``directory`` and the test batch.

    Raises:
        FileNotFoundError: If no training batch or the test batch is missing.
    """
    directory = Path(directory)
    if (directory / CIFAR_ARCHIVE_DIR).is_dir():
        directory = directory / CIFAR_ARCHIVE_DIR
    train_files = [directory / name for name in CIFAR_TRAIN_FILES]
    train_files = [path for path in train_files if path.exists()]
    test_file = directory / CIFAR_TEST_FILE
    if not train_files or not test_file.exists():
        raise FileNotFoundError(
            f"{directory} lacks CIFAR-10 binary batches "
            f"({', '.join(CIFAR_TRAIN_FILES)}, {CIFAR_TEST_FILE})"
        )
    payload = b"".join(path.read_bytes() for path in train_files)
    train = decode_cifar_records(payload, "train", str(directory))
    test = load_cifar_binary(test_file, split="test")
    logger.info("Loaded %d training images from %s", len(train), directory)
    return train, test


def fetch_cifar(
    dest_dir: Path,
    url: str,
    max_retries: int = 3,
    retry_delay: float = 1.0,
    timeout: int = 60,
) -> Path:
    """
    Download the CIFAR-10 binary archive and extract its batch files.

    Returns:
        Directory holding the extracted ``*.bin`` files.
    """
    dest_dir = Path(dest_dir)
    target = dest_dir / CIFAR_ARCHIVE_DIR
    target.mkdir(parents=True, exist_ok=True)
    archive = dest_dir / "cifar-10-binary.tar.gz"
    if not archive.exists():
        HTTPClient.download(
            url,
            archive,
            max_retries=max_retries,
            retry_delay=retry_delay,
            timeout=timeout,
        )
    wanted = {*CIFAR_TRAIN_FILES, CIFAR_TEST_FILE}
    with tarfile.open(archive, "r:gz") as tar:
        for member in tar.getmembers():
            name = Path(member.name).name
            if not member.isfile() or name not in wanted:
                continue
            extracted = tar.extractfile(member)
            if extracted is not None:
                (target / name).write_bytes(extracted.read())
    logger.info("Extracted CIFAR-10 batches to %s", target)
    return target


# Class-defining shape predicates on centred coordinates (dy, dx) and radius r.
_SHAPES: tuple[Callable[[np.ndarray, np.ndarray, float], np.ndarray], ...] = (
    lambda dy, dx, r: dy**2 + dx**2 <= r**2,
    lambda dy, dx, r: np.maximum(abs(dy), abs(dx)) <= 0.8 * r,
    lambda dy, dx, r: (dy <= 0.7 * r) & (abs(dx) <= 0.6 * (dy + r)),
    lambda dy, dx, r: abs(dy) + abs(dx) <= r,
    lambda dy, dx, r: ((0.55 * r) ** 2 <= dy**2 + dx**2) & (dy**2 + dx**2 <= r**2),
    lambda dy, dx, r: ((abs(dy) <= 0.3 * r) & (abs(dx) <= r))
    | ((abs(dx) <= 0.3 * r) & (abs(dy) <= r)),
    lambda dy, dx, r: (abs(abs(dy) - abs(dx)) <= 1.5)
    & (np.maximum(abs(dy), abs(dx)) <= r),
    lambda dy, dx, r: (abs(dy) <= 0.3 * r) & (abs(dx) <= 1.2 * r),
    lambda dy, dx, r: (abs(dx) <= 0.3 * r) & (abs(dy) <= 1.2 * r),
    lambda dy, dx, r: (np.maximum(abs(dy), abs(dx)) >= 0.55 * r)
    & (np.maximum(abs(dy), abs(dx)) <= r),
)

_PALETTE = np.array(
    [
        [0.95, 0.15, 0.15],
        [0.15, 0.85, 0.20],
        [0.20, 0.35, 0.95],
        [0.95, 0.90, 0.15],
        [0.90, 0.20, 0.90],
        [0.15, 0.90, 0.90],
        [0.98, 0.55, 0.10],
        [0.95, 0.95, 0.95],
        [0.60, 0.30, 0.85],
        [0.65, 0.95, 0.35],
    ]
)


def generate_synthetic(n: int, seed: int, split: str = "train") -> LabelledDataset:
    """
    Ten procedural classes: a class-specific coloured shape at a jittered
    position and size on a dark noise background.

    Classes are balanced to within one image and pixels lie on the 1/255
    grid, so the result survives a CIFAR binary round trip unchanged.

    Raises:
        ValueError: If n < 10.
    """
    if n < NUM_CLASSES:
        raise ValueError(f"need at least {NUM_CLASSES} images, got {n}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % NUM_CLASSES
    rng.shuffle(labels)

    yy, xx = np.mgrid[0:32, 0:32].astype(np.float64)
    images = np.empty((n, *IMAGE_SHAPE))
    for i, label in enumerate(labels):
        background = rng.uniform(0.0, 0.35, size=IMAGE_SHAPE)
        colour = np.clip(_PALETTE[label] + rng.uniform(-0.08, 0.08, size=3), 0, 1)
        cy, cx = 16 + rng.integers(-5, 6, size=2)
        radius = rng.uniform(5.5, 8.0)
        inside = _SHAPES[label](yy - cy, xx - cx, radius)
        images[i] = np.where(inside, colour[:, None, None], background)

    images = np.floor(images * 255 + 0.5) / 255
    logger.info("Generated %d synthetic %s images (seed %d)", n, split, seed)
    return LabelledDataset(images=images, labels=labels.astype(np.int64), split=split)


def clean_correct_pool(data: LabelledDataset, models: Sequence[Network]) -> np.ndarray:
    """Row indices of images that every model classifies correctly."""
    correct = np.ones(len(data), dtype=bool)
    for model in models:
        correct &= predict_dataset(model, data) == data.labels
    return np.flatnonzero(correct)


def select_eval_images(
    data: LabelledDataset, models: Sequence[Network], n: int, seed: int
) -> LabelledDataset:
    """
    Draw n images, without replacement, from the clean-correct pool.

    Raises:
        InsufficientPoolError: If fewer than n images are correct for all models.
    """
    pool = clean_correct_pool(data, models)
    if n > len(pool):
        raise InsufficientPoolError(
            f"requested {n} evaluation images but the clean-correct pool "
            f"holds only {len(pool)}"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(pool, size=n, replace=False)
    logger.info("Selected %d of %d clean-correct images", n, len(pool))
    return data.subset(chosen)
