"""Task streams: per-object datasets sequenced for continual training.

A stream is an ordered list of :class:`Task` objects, each holding a
normal-only train split and a mixed test split with pixel masks.  Streams
come either from an MVTec-style directory tree or from the deterministic
synthetic generator used for desk-scale runs.
"""
from __future__ import annotations

import colorsys
import contextlib
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

NORMAL = "normal"
ANOMALOUS = "anomalous"
TRAIN = "train"
TEST = "test"

MVTEC_OBJECTS = (
    "bottle",
    "cable",
    "capsule",
    "hazelnut",
    "transistor",
    "metal_nut",
    "pill",
    "screw",
    "zipper",
    "toothbrush",
)

_IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")


class StreamConfigError(ValueError):
    """Raised when a stream definition points at missing or invalid data."""


class StreamIntegrityError(RuntimeError):
    """Raised when images and ground-truth masks do not line up."""


class Sample:
    """One image with its optional pixel mask and bookkeeping."""

    __slots__ = ("image", "mask", "label", "task_id", "split")

    def __init__(self, image, mask=None, label=NORMAL, task_id=0, split=TRAIN):
        image = np.asarray(image)
        if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
            raise ValueError(f"image must be an HxWx3 uint8 array, got {image.shape} {image.dtype}")
        if mask is not None:
            mask = (np.asarray(mask) != 0).astype(np.uint8)
            if mask.shape != image.shape[:2]:
                raise ValueError(f"mask shape {mask.shape} does not match image {image.shape[:2]}")
        if label not in (NORMAL, ANOMALOUS):
            raise ValueError(f"unknown label {label!r}")
        if split not in (TRAIN, TEST):
            raise ValueError(f"unknown split {split!r}")
        has_defect = mask is not None and bool(mask.any())
        if (label == ANOMALOUS) != has_defect:
            raise ValueError("anomalous samples need a nonempty mask; normal masks must be empty")
        if split == TRAIN and label != NORMAL:
            raise ValueError("train samples must be normal")
        if task_id < 0:
            raise ValueError("task_id must be >= 0")
        self.image = image
        self.mask = mask
        self.label = label
        self.task_id = int(task_id)
        self.split = split

    @property
    def is_anomalous(self) -> bool:
        return self.label == ANOMALOUS

    def full_mask(self) -> np.ndarray:
        if self.mask is None:
            return np.zeros(self.image.shape[:2], dtype=np.uint8)
        return self.mask

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        masks_equal = (self.mask is None and other.mask is None) or (
            self.mask is not None
            and other.mask is not None
            and np.array_equal(self.mask, other.mask)
        )
        return (
            self.label == other.label
            and self.task_id == other.task_id
            and self.split == other.split
            and np.array_equal(self.image, other.image)
            and masks_equal
        )

    def __hash__(self):
        return hash((self.task_id, self.split, self.label, self.image.tobytes()))

    def __repr__(self):
        return (
            f"Sample(task_id={self.task_id}, split={self.split!r}, label={self.label!r}, "
            f"shape={self.image.shape})"
        )


class Task:
    """One object category: its train and test samples.

    Split access goes through :meth:`samples` (or the ``train``/``test``
    properties) so that an attached access log can record which splits are
    read during each experiment phase.
    """

    def __init__(self, name: str, index: int, train: Sequence[Sample], test: Sequence[Sample]):
        train = list(train)
        test = list(test)
        if not train:
            raise ValueError(f"task {name!r} has an empty train split")
        if any(s.label != NORMAL for s in train):
            raise ValueError(f"task {name!r} has anomalous train samples")
        labels = {s.label for s in test}
        if labels != {NORMAL, ANOMALOUS}:
            raise ValueError(f"task {name!r} test split needs normal and anomalous samples")
        self.name = name
        self.index = int(index)
        self._splits = {TRAIN: train, TEST: test}
        self.access_log: Optional[AccessLog] = None

    def samples(self, split: str) -> list[Sample]:
        if split not in self._splits:
            raise ValueError(f"unknown split {split!r}")
        if self.access_log is not None:
            self.access_log.record(self.index, split)
        return self._splits[split]

    @property
    def train(self) -> list[Sample]:
        return self.samples(TRAIN)

    @property
    def test(self) -> list[Sample]:
        return self.samples(TEST)

    def __eq__(self, other):
        if not isinstance(other, Task):
            return NotImplemented
        return (
            self.name == other.name
            and self.index == other.index
            and self._splits[TRAIN] == other._splits[TRAIN]
            and self._splits[TEST] == other._splits[TEST]
        )

    def __repr__(self):
        return (
            f"Task({self.name!r}, index={self.index}, n_train={len(self._splits[TRAIN])}, "
            f"n_test={len(self._splits[TEST])})"
        )


class AccessLog:
    """Records (phase, task index, split) for every split read."""

    def __init__(self):
        self.phase = "idle"
        self.events: list[tuple[str, int, str]] = []

    def record(self, task_index: int, split: str) -> None:
        self.events.append((self.phase, task_index, split))

    @contextlib.contextmanager
    def during(self, phase: str):
        previous, self.phase = self.phase, phase
        try:
            yield self
        finally:
            self.phase = previous

    def reads(self, phase: str, split: str) -> list[int]:
        return [t for p, t, s in self.events if p == phase and s == split]


@dataclass
class TaskStream:
    tasks: list[Task]
    image_size: tuple[int, int]
    access_log: AccessLog = field(default_factory=AccessLog, compare=False, repr=False)

    def __post_init__(self):
        for i, task in enumerate(self.tasks):
            if task.index != i:
                raise ValueError(f"task indices must be 0..T-1 in order, got {task.index} at {i}")
            for s in task._splits[TRAIN] + task._splits[TEST]:
                if s.image.shape[:2] != tuple(self.image_size):
                    raise ValueError(f"sample of task {task.name!r} is not {self.image_size}")
            task.access_log = self.access_log

    def __len__(self):
        return len(self.tasks)

    def __iter__(self) -> Iterator[Task]:
        return iter(self.tasks)

    def __getitem__(self, i) -> Task:
        return self.tasks[i]

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.tasks]

    def digest(self) -> str:
        """SHA-256 over every sample's bytes, in stream order."""
        h = hashlib.sha256()
        for task in self.tasks:
            h.update(task.name.encode())
            for split in (TRAIN, TEST):
                for s in task._splits[split]:
                    h.update(split.encode())
                    h.update(s.label.encode())
                    h.update(s.image.tobytes())
                    if s.mask is not None:
                        h.update(s.mask.tobytes())
        return h.hexdigest()


# -- MVTec layout -----------------------------------------------------------


def _list_images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in _IMAGE_EXTS)


def _read_image(path: Path, size: tuple[int, int]) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8).copy()


def _read_mask(path: Path, size: tuple[int, int]) -> np.ndarray:
    with Image.open(path) as im:
        arr = (np.asarray(im.convert("L")) != 0).astype(np.uint8)
    if arr.shape != tuple(size):
        # nearest keeps labels binary
        arr = np.asarray(
            Image.fromarray(arr * 255).resize((size[1], size[0]), Image.NEAREST)
        )
        arr = (arr != 0).astype(np.uint8)
    return arr


def _load_category(root: Path, name: str, index: int, size: tuple[int, int]) -> Task:
    base = root / name
    if not base.is_dir():
        raise StreamConfigError(f"missing category directory: {base}")
    train_dir = base / "train" / "good"
    test_dir = base / "test"
    if not train_dir.is_dir() or not test_dir.is_dir():
        raise StreamConfigError(f"category {name!r} lacks train/good or test directories")

    train = [
        Sample(_read_image(p, size), None, NORMAL, index, TRAIN) for p in _list_images(train_dir)
    ]
    test = []
    for defect_dir in sorted(d for d in test_dir.iterdir() if d.is_dir()):
        images = _list_images(defect_dir)
        if defect_dir.name == "good":
            for p in images:
                img = _read_image(p, size)
                test.append(Sample(img, np.zeros(size, np.uint8), NORMAL, index, TEST))
            continue
        gt_dir = base / "ground_truth" / defect_dir.name
        masks = _list_images(gt_dir) if gt_dir.is_dir() else []
        if len(masks) != len(images):
            raise StreamIntegrityError(
                f"{name}/{defect_dir.name}: {len(images)} images but {len(masks)} masks"
            )
        for img_path, mask_path in zip(images, masks):
            mask = _read_mask(mask_path, size)
            label = ANOMALOUS if mask.any() else NORMAL
            test.append(Sample(_read_image(img_path, size), mask, label, index, TEST))
    return Task(name, index, train, test)


def load_mvtec_stream(root, categories: Sequence[str] = MVTEC_OBJECTS, image_size=(256, 256)) -> TaskStream:
    """Load one task per category, in the given order.

    Images are resized bilinearly and masks with nearest neighbour followed by
    re-binarisation, so both share ``image_size``.
    """
    root = Path(root)
    if not root.is_dir():
        raise StreamConfigError(f"dataset root does not exist: {root}")
    size = (int(image_size[0]), int(image_size[1]))
    tasks = [_load_category(root, name, i, size) for i, name in enumerate(categories)]
    return TaskStream(tasks, size)


def save_mvtec_layout(stream: TaskStream, root) -> Path:
    """Write a stream to disk in the MVTec directory layout."""
    root = Path(root)
    for task in stream.tasks:
        base = root / task.name
        (base / "train" / "good").mkdir(parents=True, exist_ok=True)
        (base / "test" / "good").mkdir(parents=True, exist_ok=True)
        (base / "test" / "defect").mkdir(parents=True, exist_ok=True)
        (base / "ground_truth" / "defect").mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(task._splits[TRAIN]):
            Image.fromarray(s.image).save(base / "train" / "good" / f"{i:03d}.png")
        n_good = n_bad = 0
        for s in task._splits[TEST]:
            if s.is_anomalous:
                Image.fromarray(s.image).save(base / "test" / "defect" / f"{n_bad:03d}.png")
                Image.fromarray(s.mask * 255).save(
                    base / "ground_truth" / "defect" / f"{n_bad:03d}_mask.png"
                )
                n_bad += 1
            else:
                Image.fromarray(s.image).save(base / "test" / "good" / f"{n_good:03d}.png")
                n_good += 1
    return root


# -- synthetic stream -------------------------------------------------------


def _task_colour(t: int, n_tasks: int, offset: float, rng: np.random.Generator) -> np.ndarray:
    # evenly spaced hue angles keep tasks (and their brightness-shifted defects) apart
    angle = (offset + (t + rng.uniform(-0.15, 0.15)) / n_tasks) % 1.0
    return 255.0 * np.array(colorsys.hsv_to_rgb(angle, rng.uniform(0.5, 0.65), rng.uniform(0.45, 0.55)))


def _task_pattern(rng: np.random.Generator, size: tuple[int, int], hue: np.ndarray):
    h, w = size
    freq = rng.uniform(2.0, 6.0)
    theta = rng.uniform(0, np.pi)
    amp = rng.uniform(50, 70)
    yy, xx = np.mgrid[0:h, 0:w]
    phase_field = 2 * np.pi * freq * (np.cos(theta) * xx / w + np.sin(theta) * yy / h)
    weights = rng.uniform(0.5, 1.0, size=3) * rng.choice([-1, 1], size=3)
    return hue, phase_field, amp, weights


def _render(hue, phase_field, amp, weights, rng, noise_std):
    shift = rng.uniform(0, 2 * np.pi)
    wave = np.sin(phase_field + shift)[..., None] * amp * weights
    noise = rng.normal(0, noise_std, size=phase_field.shape + (3,))
    return np.clip(hue + wave + noise, 0, 255).astype(np.uint8)


def _add_defect(image: np.ndarray, rng: np.random.Generator, shift: int):
    h, w = image.shape[:2]
    dh = int(rng.integers(max(2, h // 10), max(3, h // 4) + 1))
    dw = int(rng.integers(max(2, w // 10), max(3, w // 4) + 1))
    y0 = int(rng.integers(0, h - dh + 1))
    x0 = int(rng.integers(0, w - dw + 1))
    out = image.copy()
    patch = out[y0 : y0 + dh, x0 : x0 + dw].astype(np.int16)
    # one brightness direction for the whole patch (away from the nearer
    # bound); pixels that would clip go the other way, so every value moves
    # exactly `shift`
    direction = np.int16(1 if patch.mean() < 128 else -1)
    moved = patch + direction * shift
    clipped = (moved < 0) | (moved > 255)
    moved = np.where(clipped, patch - direction * shift, moved)
    out[y0 : y0 + dh, x0 : x0 + dw] = moved.astype(np.uint8)
    mask = np.zeros((h, w), np.uint8)
    mask[y0 : y0 + dh, x0 : x0 + dw] = 1
    return out, mask


def make_synthetic_stream(n_tasks=3, n_train=20, n_test=10, image_size=(64, 64), seed=0,
                          noise_std: float = 3.0, defect_shift: int = 96) -> TaskStream:
    """Deterministic toy stream with one distinct texture per task.

    Each task has its own base colour (hues evenly spaced around the colour
    wheel from a seeded offset) and oriented sinusoidal texture.  Half
    of the test images (rounded up, at least one) carry a rectangular defect
    whose pixels are shifted by ``defect_shift`` (64..128) intensity levels in
    every channel, with an exact mask.
    """
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    if n_train < 1:
        raise ValueError("n_train must be >= 1")
    if n_test < 2:
        raise ValueError("n_test must be >= 2 so that both classes appear in test")
    size = (int(image_size[0]), int(image_size[1]))
    if size[0] < 32 or size[1] < 32:
        raise ValueError("image_size must be at least 32x32")
    if not 64 <= defect_shift <= 128:
        raise ValueError("defect_shift must lie in [64, 128]")

    root = np.random.default_rng(seed)
    offset = root.uniform()
    tasks = []
    for t in range(n_tasks):
        rng = np.random.default_rng(root.integers(2**63))
        pattern = _task_pattern(rng, size, _task_colour(t, n_tasks, offset, rng))
        train = [Sample(_render(*pattern, rng, noise_std), None, NORMAL, t, TRAIN) for _ in range(n_train)]
        n_bad = (n_test + 1) // 2
        test = []
        for j in range(n_test):
            img = _render(*pattern, rng, noise_std)
            if j < n_bad:
                img, mask = _add_defect(img, rng, defect_shift)
                test.append(Sample(img, mask, ANOMALOUS, t, TEST))
            else:
                test.append(Sample(img, np.zeros(size, np.uint8), NORMAL, t, TEST))
        tasks.append(Task(f"synthetic_{t}", t, train, test))
    return TaskStream(tasks, size)


def batched(samples: Sequence, batch_size: int, seed: int) -> list[list]:
    """Seeded permutation of ``samples`` cut into batches (last one partial)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    samples = list(samples)
    if not samples:
        return []
    order = np.random.default_rng(seed).permutation(len(samples))
    return [[samples[i] for i in order[k : k + batch_size]] for k in range(0, len(order), batch_size)]


def iter_batches(task: Task, split: str, batch_size: int, seed: int) -> list[list[Sample]]:
    return batched(task.samples(split), batch_size, seed)


def stack_images(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples]) if samples else np.zeros((0, 0, 0, 3), np.uint8)


def stack_masks(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.full_mask() for s in samples])
