"""Dataset manifests, image decoding and preprocessing, subject-level
splitting, batching and the synthetic MRI-slice generator."""
from __future__ import annotations

import csv
import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .tensor import DTYPE, Shape2D, TensorFileError, load_nt

LABELS = ("normal", "mci")
PLANES = ("frontal", "sagittal", "axial")
MANIFEST_HEADER = ("subject_id", "label", "plane", "image_path")


class DataError(ValueError):
    """Bad dataset input: manifest rows, image files, split parameters."""


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    label: str
    plane: str
    image_path: Path

    @property
    def label_index(self) -> int:
        return LABELS.index(self.label)


@dataclass
class DatasetManifest:
    records: List[SubjectRecord] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for r in self.records:
            key = (r.subject_id, r.plane)
            if key in seen:
                raise DataError(f"duplicate record for subject {r.subject_id!r}, plane {r.plane!r}")
            seen.add(key)

    def __len__(self):
        return len(self.records)

    def class_summary(self, by_subject: bool = True) -> Dict[str, int]:
        if by_subject:
            labels = dict(self.subject_labels())
            counts = Counter(labels.values())
        else:
            counts = Counter(r.label for r in self.records)
        return {lab: counts.get(lab, 0) for lab in LABELS}

    def subject_labels(self) -> Dict[str, str]:
        labels: Dict[str, str] = {}
        for r in self.records:
            if labels.setdefault(r.subject_id, r.label) != r.label:
                raise DataError(f"subject {r.subject_id!r} carries conflicting labels")
        return labels

    def subjects(self) -> List[str]:
        return list(self.subject_labels())

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update(f"{r.subject_id},{r.label},{r.plane},{r.image_path.name}\n".encode())
        return h.hexdigest()[:16]


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Parse a manifest CSV. Relative image paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    records = []
    seen = set()
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise DataError(f"{path}:1: expected header {','.join(MANIFEST_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            sid, label, plane, img = (c.strip() for c in row)
            if not sid:
                raise DataError(f"{path}:{lineno}: empty subject_id")
            if label.lower() not in LABELS:
                raise DataError(f"{path}:{lineno}: unknown label {label!r} (expected normal|mci)")
            if plane.lower() not in PLANES:
                raise DataError(f"{path}:{lineno}: unknown plane {plane!r} "
                                f"(expected frontal|sagittal|axial)")
            key = (sid, plane.lower())
            if key in seen:
                raise DataError(f"{path}:{lineno}: duplicate subject/plane {sid},{plane}")
            seen.add(key)
            img_path = Path(img)
            if not img_path.is_absolute():
                img_path = path.parent / img_path
            if check_files and not img_path.is_file():
                raise DataError(f"{path}:{lineno}: image not found: {img_path}")
            records.append(SubjectRecord(sid, label.lower(), plane.lower(), img_path))
    return DatasetManifest(records)


def write_manifest(m: DatasetManifest, path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in m.records:
            try:
                img = r.image_path.relative_to(path.parent)
            except ValueError:
                img = r.image_path
            w.writerow([r.subject_id, r.label, r.plane, img.as_posix()])


# -- images --------------------------------------------------------------

def _read_token(data: bytes, pos: int):
    n = len(data)
    while pos < n:
        if data[pos:pos + 1].isspace():
            pos += 1
        elif data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise DataError("truncated header")
    return data[start:pos], pos


def decode_netpbm(data: bytes) -> np.ndarray:
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"unsupported image magic {magic!r}")
    channels = 1 if magic == b"P5" else 3
    pos = 2
    values = []
    for _ in range(3):
        tok, pos = _read_token(data, pos)
        try:
            values.append(int(tok))
        except ValueError:
            raise DataError(f"bad header field {tok!r}") from None
    width, height, maxval = values
    if maxval != 255:
        raise DataError(f"maxval {maxval} unsupported (only 255)")
    if width < 1 or height < 1:
        raise DataError(f"bad image size {width}x{height}")
    pos += 1  # single whitespace byte after maxval
    need = width * height * channels
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise DataError(f"truncated payload: {len(payload)} of {need} bytes")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return (img.transpose(2, 0, 1)[None].astype(DTYPE)) / 255.0


def decode_image(path) -> np.ndarray:
    """Read a P5/P6 netpbm (scaled to [0, 1]) or ``.nt`` tensor as 1 x C x H x W."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from None
    if data[:4] == b"NTSR":
        try:
            t = load_nt(path)
        except TensorFileError as e:
            raise DataError(str(e)) from None
        if t.ndim == 2:
            t = t[None, None]
        elif t.ndim == 3:
            t = t[None]
        if t.ndim != 4 or t.shape[0] != 1:
            raise DataError(f"{path}: tensor shape {t.shape} is not an image")
        return t
    try:
        return decode_netpbm(data)
    except DataError as e:
        raise DataError(f"{path}: {e}") from None


def encode_pgm(pixels: np.ndarray) -> bytes:
    """Binary P5 bytes for an H x W uint8 array."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def _axis_weights(n_in: int, n_out: int):
    # align_corners=False sampling positions
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize_bilinear(img, target) -> np.ndarray:
    """Bilinear resize of the trailing H x W axes (half-pixel centres)."""
    th, tw = Shape2D.of(target)
    img = np.asarray(img, dtype=DTYPE)
    h, w = img.shape[-2:]
    if (h, w) == (th, tw):
        return img.copy()
    y0, y1, fy = _axis_weights(h, th)
    x0, x1, fx = _axis_weights(w, tw)
    rows = img[..., y0, :] * (1 - fy)[:, None] + img[..., y1, :] * fy[:, None]
    return rows[..., x0] * (1 - fx) + rows[..., x1] * fx


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    degenerate: bool = False

    @classmethod
    def identity(cls, channels=3) -> "NormStats":
        return cls(np.zeros(channels), np.ones(channels))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "degenerate": self.degenerate}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=DTYPE), np.asarray(d["std"], dtype=DTYPE),
                   bool(d.get("degenerate", False)))


def _to_rgb(img, input_size) -> np.ndarray:
    img = resize_bilinear(img, input_size)
    if img.shape[1] == 1:
        img = np.repeat(img, 3, axis=1)
    elif img.shape[1] != 3:
        raise DataError(f"expected 1 or 3 channels, got {img.shape[1]}")
    return img[0]


def to_network_input(img, input_size, stats: NormStats) -> np.ndarray:
    """Resize, replicate grey to RGB, standardize per channel -> 3 x H x W."""
    x = _to_rgb(img, input_size)
    return (x - stats.mean[:, None, None]) / stats.std[:, None, None]


def compute_norm_stats(images: np.ndarray) -> NormStats:
    """Per-channel mean/std of an N x 3 x H x W stack (training images only)."""
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    bad = ~(std > 0)
    if bad.any():
        std = np.where(bad, 1.0, std)
    return NormStats(mean, std, bool(bad.any()))


# -- split and batches ---------------------------------------------------

@dataclass
class SplitResult:
    train: DatasetManifest
    test: DatasetManifest
    seed: int
    fraction: float

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for part in (self.train, self.test):
            h.update(",".join(sorted(part.subjects())).encode())
            h.update(b"|")
        return h.hexdigest()[:16]


def _train_quota(counts: Dict[str, int], fraction: float) -> Dict[str, int]:
    # floor per class, then hand the overall floor's leftover to the largest remainders
    exact = {lab: fraction * n for lab, n in counts.items()}
    quota = {lab: math.floor(v + 1e-9) for lab, v in exact.items()}
    total = math.floor(fraction * sum(counts.values()) + 1e-9)
    by_remainder = sorted(counts, key=lambda lab: (-(exact[lab] - quota[lab]), LABELS.index(lab)))
    for lab in by_remainder:
        if sum(quota.values()) >= total:
            break
        if quota[lab] < counts[lab]:
            quota[lab] += 1
    return quota


def subject_split(m: DatasetManifest, fraction: float = 0.7, seed: int = 0) -> SplitResult:
    """Partition subjects (never individual slices) into train and test.

    Subjects are shuffled per class with one seeded generator and the first
    ``quota`` of each class go to train. Quotas are ``floor(fraction * n_class)``,
    topped up by largest remainder until they reach ``floor(fraction * n)``
    overall, so a class never receives more than its rounded-up share.
    """
    if not 0.0 < fraction < 1.0:
        raise DataError(f"split fraction must lie in (0, 1), got {fraction}")
    labels = m.subject_labels()
    rng = np.random.default_rng(seed)
    per_class = {lab: sorted(s for s, l in labels.items() if l == lab) for lab in LABELS}
    quota = _train_quota({lab: len(v) for lab, v in per_class.items()}, fraction)
    train_ids = set()
    for lab in LABELS:
        ids = per_class[lab]
        order = rng.permutation(len(ids))
        train_ids.update(ids[i] for i in order[:quota[lab]])
    train = [r for r in m.records if r.subject_id in train_ids]
    test = [r for r in m.records if r.subject_id not in train_ids]
    return SplitResult(DatasetManifest(train), DatasetManifest(test), seed, fraction)


@dataclass
class SliceDataset:
    """Preprocessed slices ready for the network."""
    x: np.ndarray
    labels: np.ndarray
    subject_ids: List[str]
    planes: List[str]
    stats: NormStats

    def __len__(self):
        return len(self.labels)

    def subject_labels(self) -> Dict[str, int]:
        return {s: int(l) for s, l in zip(self.subject_ids, self.labels)}


def load_images(m: DatasetManifest, input_size) -> np.ndarray:
    size = Shape2D.of(input_size)
    out = np.empty((len(m), 3, size.height, size.width), dtype=DTYPE)
    for i, r in enumerate(m.records):
        out[i] = _to_rgb(decode_image(r.image_path), size)
    return out


def prepare(m: DatasetManifest, input_size, stats: Optional[NormStats] = None) -> SliceDataset:
    """Decode and standardize every record. Without ``stats`` they are
    computed from ``m`` itself, which must then be the training split."""
    raw = load_images(m, input_size)
    if stats is None:
        stats = compute_norm_stats(raw) if len(m) else NormStats.identity()
    raw -= stats.mean[None, :, None, None]
    raw /= stats.std[None, :, None, None]
    return SliceDataset(raw, np.array([r.label_index for r in m.records], dtype=np.int64),
                        [r.subject_id for r in m.records], [r.plane for r in m.records], stats)


def batch_indices(n: int, batch_size: int, shuffle_seed: Optional[int] = 0,
                  epoch: int = 0) -> List[np.ndarray]:
    """Index arrays for one epoch, permuted by ``(shuffle_seed, epoch)``;
    ``shuffle_seed=None`` keeps manifest order. The last partial batch is kept."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if shuffle_seed is None:
        idx = np.arange(n)
    else:
        idx = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    return [idx[start:start + batch_size] for start in range(0, n, batch_size)]


def batches(ds: SliceDataset, batch_size: int, shuffle_seed: Optional[int] = 0,
            epoch: int = 0) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield ``(x, labels)`` batches in :func:`batch_indices` order."""
    for sel in batch_indices(len(ds), batch_size, shuffle_seed, epoch):
        yield ds.x[sel], ds.labels[sel]


# -- synthetic corpus ----------------------------------------------------

def synth_slice(rng: np.random.Generator, label: str, plane: str, size: int = 64) -> np.ndarray:
    """One grey slice: a smooth radial head-like gradient plus noise; MCI
    slices additionally carry a ring-shaped intensity deficit."""
    aspect = {"frontal": (1.0, 0.8), "sagittal": (0.8, 1.0), "axial": (0.9, 0.9)}[plane]
    yy, xx = np.mgrid[0:size, 0:size].astype(DTYPE)
    cy = size / 2 + rng.uniform(-2, 2)
    cx = size / 2 + rng.uniform(-2, 2)
    scale = size / 2 * rng.uniform(0.85, 0.95)
    r = np.hypot((yy - cy) / (scale * aspect[0]), (xx - cx) / (scale * aspect[1]))
    brightness = rng.uniform(190, 220)
    img = brightness * np.clip(1.0 - r ** 2, 0.0, 1.0) ** 0.5
    if label == "mci":
        radius = rng.uniform(0.4, 0.6)
        depth = rng.uniform(0.45, 0.6)
        img *= 1.0 - depth * np.exp(-((r - radius) / 0.09) ** 2)
    img += rng.normal(0.0, 6.0, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synth_dataset(n_per_class: int, seed: int, out_dir, size: int = 64) -> DatasetManifest:
    """Write a balanced synthetic corpus (three planes per subject) and its manifest."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    records = []
    k = 0
    for ci, label in enumerate(LABELS):
        for i in range(n_per_class):
            sid = f"sub-{k:04d}"
            k += 1
            for pi, plane in enumerate(PLANES):
                rng = np.random.default_rng([seed, ci, i, pi])
                p = img_dir / f"{sid}_{plane}.pgm"
                p.write_bytes(encode_pgm(synth_slice(rng, label, plane, size)))
                records.append(SubjectRecord(sid, label, plane, p))
    m = DatasetManifest(records)
    write_manifest(m, out_dir / "manifest.csv")
    return m
