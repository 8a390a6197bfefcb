"""IDX ingestion, the synthetic subtle-lesion task, pad-crop augmentation and batching."""

from __future__ import annotations

import csv
import queue
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class MagicMismatch(IdxError):
    pass


class CountMismatch(IdxError):
    pass


class TruncatedPayload(IdxError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float64 in [0, 1]
    labels: np.ndarray  # [N] int64
    class_names: list[str] = field(default_factory=list)
    split: str = "train"
    lesions: np.ndarray | None = None  # [N, 4] (x0, y0, w, h); w == 0 when no lesion

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N, C, H, W], got {self.images.shape}")
        n = self.images.shape[0]
        if n == 0:
            raise ValueError("dataset is empty")
        if self.labels.shape != (n,):
            raise ValueError(f"{self.labels.shape[0]} labels for {n} images")
        if self.images.min() < 0 or self.images.max() > 1:
            raise ValueError("image values must lie in [0, 1]")
        if not self.class_names:
            self.class_names = [str(k) for k in range(int(self.labels.max()) + 1)]
        if self.labels.min() < 0 or self.labels.max() >= len(self.class_names):
            raise ValueError(f"labels must lie in [0, {len(self.class_names)})")

    def __len__(self):
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], list(self.class_names), split or self.split,
                       None if self.lesions is None else self.lesions[idx])


# -- IDX ------------------------------------------------------------------

def _read_header(buf: bytes, path, magic: int, ndims: int) -> tuple[int, ...]:
    if len(buf) < 4 + 4 * ndims:
        raise TruncatedPayload(f"{path}: header truncated ({len(buf)} bytes)")
    (found,) = struct.unpack_from(">I", buf, 0)
    if found != magic:
        raise MagicMismatch(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    return struct.unpack_from(f">{ndims}I", buf, 4)


def read_idx_images(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    n, rows, cols = _read_header(buf, path, IMAGE_MAGIC, 3)
    payload = buf[16:]
    need = n * rows * cols
    if len(payload) < need:
        raise TruncatedPayload(f"{path}: {len(payload)} pixel bytes, expected {need}")
    return np.frombuffer(payload, dtype=np.uint8, count=need).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (n,) = _read_header(buf, path, LABEL_MAGIC, 1)
    payload = buf[8:]
    if len(payload) < n:
        raise TruncatedPayload(f"{path}: {len(payload)} label bytes, expected {n}")
    return np.frombuffer(payload, dtype=np.uint8, count=n)


def load_idx(images_path, labels_path, class_names=None, split: str = "train") -> Dataset:
    """Decode an IDX image/label pair; u8 pixels are scaled by 1/255."""
    imgs = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if imgs.shape[0] != labels.shape[0]:
        raise CountMismatch(f"{imgs.shape[0]} images in {images_path} but {labels.shape[0]} labels in {labels_path}")
    images = imgs.astype(np.float64)[:, None] / 255.0
    return Dataset(images, labels.astype(np.int64), list(class_names or []), split)


def quantize(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


def write_idx(ds: Dataset, images_path, labels_path):
    """Write single-channel images as u8 (values rounded from [0, 1] x 255)."""
    if ds.images.shape[1] != 1:
        raise IdxError(f"IDX images are single-channel, got {ds.images.shape[1]} channels")
    n, _, h, w = ds.images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IMAGE_MAGIC, n, h, w) + quantize(ds.images[:, 0]).tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", LABEL_MAGIC, n) + ds.labels.astype(np.uint8).tobytes())


# -- on-disk dataset directory ------------------------------------------------

def write_lesion_csv(path, lesions: np.ndarray):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "x0", "y0", "w", "h"])
        for i, (x0, y0, pw, ph) in enumerate(lesions):
            if pw > 0:
                w.writerow([i, int(x0), int(y0), int(pw), int(ph)])


def read_lesion_csv(path, n: int) -> np.ndarray:
    out = np.zeros((n, 4), dtype=np.int64)
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out[int(row["index"])] = [int(row["x0"]), int(row["y0"]), int(row["w"]), int(row["h"])]
    return out


def save_dataset_dir(ds: Dataset, directory, prefix: str = "train", extra: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_idx(ds, d / f"{prefix}-images.idx", d / f"{prefix}-labels.idx")
    if ds.lesions is not None:
        write_lesion_csv(d / f"{prefix}-lesions.csv", ds.lesions)
    manifest = {
        "images": f"{prefix}-images.idx",
        "labels": f"{prefix}-labels.idx",
        "num_classes": str(ds.num_classes),
        "class_names": ",".join(ds.class_names),
        "split": ds.split,
    }
    if ds.lesions is not None:
        manifest["lesions"] = f"{prefix}-lesions.csv"
    manifest.update(extra or {})
    (d / f"{prefix}-manifest.txt").write_text("".join(f"{k} = {v}\n" for k, v in manifest.items()))
    return d


def read_kv(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line and "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def load_dataset_dir(directory, prefix: str = "train") -> Dataset:
    d = Path(directory)
    man = read_kv(d / f"{prefix}-manifest.txt")
    names = [s for s in man.get("class_names", "").split(",") if s]
    ds = load_idx(d / man["images"], d / man["labels"], names, man.get("split", prefix))
    if "lesions" in man:
        ds.lesions = read_lesion_csv(d / man["lesions"], len(ds))
    return ds


# -- synthetic subtle lesions -------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    size: int = 28
    patch: int = 6
    contrast: float = 0.08
    noise: float = 0.05
    texture_amp: float = 0.1
    task: str = "presence"  # "presence" (K=2) or "quadrant" (K=5)
    n: int = 2000
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.patch <= self.size:
            raise ValueError(f"lesion patch {self.patch} must fit inside a {self.size}px image")
        if self.contrast < 0:
            raise ValueError("lesion contrast must be >= 0")
        if self.task not in ("presence", "quadrant"):
            raise ValueError(f"unknown synthetic task {self.task!r}")
        if self.task == "quadrant" and self.patch > self.size // 2:
            raise ValueError("quadrant task needs the patch to fit inside one quadrant")

    @property
    def num_classes(self) -> int:
        return 2 if self.task == "presence" else 5


SYNTH_PRESETS = {
    "lesion28": SynthSpec(),
    "lesion28-quadrant": SynthSpec(task="quadrant"),
}


def _texture(rng: np.random.Generator, size: int, amp: float) -> np.ndarray:
    # sum of a few random low-frequency plane waves
    yy, xx = np.mgrid[0:size, 0:size] / size
    tex = np.zeros((size, size))
    for _ in range(3):
        fx, fy = rng.uniform(0.3, 1.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        tex += np.cos(2 * np.pi * (fx * xx + fy * yy) + phase)
    return 0.5 + amp * tex / 3.0


def synth_generate(spec: SynthSpec) -> Dataset:
    """Balanced synthetic set; lesion boxes are recorded in ``Dataset.lesions``."""
    rng = np.random.default_rng(spec.seed)
    k = spec.num_classes
    labels = np.arange(spec.n) % k
    rng.shuffle(labels)
    s, p = spec.size, spec.patch
    images = np.empty((spec.n, 1, s, s))
    lesions = np.zeros((spec.n, 4), dtype=np.int64)
    half = s // 2
    for i in range(spec.n):
        img = _texture(rng, s, spec.texture_amp) + rng.normal(0.0, spec.noise, size=(s, s))
        lab = labels[i]
        if lab > 0:
            if spec.task == "presence":
                x0, y0 = rng.integers(0, s - p + 1, size=2)
            else:
                qx, qy = (lab - 1) % 2, (lab - 1) // 2
                x0 = qx * half + rng.integers(0, half - p + 1)
                y0 = qy * half + rng.integers(0, half - p + 1)
            img[y0: y0 + p, x0: x0 + p] += spec.contrast
            lesions[i] = (x0, y0, p, p)
        images[i, 0] = np.clip(img, 0.0, 1.0)
    names = ["absent", "present"] if spec.task == "presence" else ["absent", "q0", "q1", "q2", "q3"]
    return Dataset(images, labels, names, "synthetic", lesions)


def lesion_mask(lesion, size: int) -> np.ndarray:
    """Boolean [size, size] mask of a lesion box (x0, y0, w, h)."""
    x0, y0, w, h = (int(v) for v in lesion)
    m = np.zeros((size, size), dtype=bool)
    m[y0: y0 + h, x0: x0 + w] = True
    return m


def upsample_nearest(a: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of a square [h, w] map to [size, size]."""
    h, w = a.shape
    rows = np.minimum((np.arange(size) * h) // size, h - 1)
    cols = np.minimum((np.arange(size) * w) // size, w - 1)
    return a[np.ix_(rows, cols)]


def split(ds: Dataset, val_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified deterministic train/val split."""
    rng = np.random.default_rng(seed)
    val_idx = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        rng.shuffle(idx)
        val_idx.extend(idx[: int(round(len(idx) * val_fraction))].tolist())
    val_mask = np.zeros(len(ds), dtype=bool)
    val_mask[val_idx] = True
    return ds.subset(np.flatnonzero(~val_mask), "train"), ds.subset(np.flatnonzero(val_mask), "val")


# -- augmentation / batching ---------------------------------------------------

def augment_pad_crop(x: np.ndarray, pad: int = 4, rng: np.random.Generator | None = None,
                     offset: tuple[int, int] | None = None) -> np.ndarray:
    """Zero-pad each side by ``pad`` and crop a random window of the original size.

    ``offset`` (row, col) into the padded image overrides the random draw.
    """
    if pad < 0:
        raise ValueError("pad must be >= 0")
    if pad == 0:
        return x.copy()
    _, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    if offset is None:
        rng = rng or np.random.default_rng()
        oy, ox = rng.integers(0, 2 * pad + 1, size=2)
    else:
        oy, ox = offset
    return xp[:, oy: oy + h, ox: ox + w]


def epoch_order(n: int, shuffle: bool, seed: int, epoch: int = 0) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(ds: Dataset, batch_size: int, shuffle: bool = True, seed: int = 0, epoch: int = 0,
            augment_pad: int = 0, prefetch: bool = False) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images, labels) batches; the last partial batch is kept.

    The permutation depends only on (seed, epoch).  With ``prefetch`` the next
    batch is assembled on one helper thread behind a queue of depth 2.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_order(len(ds), shuffle, seed, epoch)
    aug_rng = np.random.default_rng([seed, epoch, 1])

    def make(idx):
        x = ds.images[idx]
        if augment_pad:
            x = np.stack([augment_pad_crop(img, augment_pad, aug_rng) for img in x])
        return x, ds.labels[idx]

    chunks = [order[i: i + batch_size] for i in range(0, len(order), batch_size)]
    if not prefetch:
        for idx in chunks:
            yield make(idx)
        return
    q: queue.Queue = queue.Queue(maxsize=2)
    done = object()

    def worker():
        for idx in chunks:
            q.put(make(idx))
        q.put(done)

    threading.Thread(target=worker, daemon=True).start()
    while (item := q.get()) is not done:
        yield item
