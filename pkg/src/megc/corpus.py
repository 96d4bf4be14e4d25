"""Dataset manifests, face-crop preparation and class-balanced batching."""

from __future__ import annotations

import json
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

CROP_SIZE = 256
LABELS = ("live", "spoof")
SPOOF_TYPES = ("none", "print", "replay", "composite")
SPLITS = ("train", "dev", "test")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusRecord:
    path: str
    label: str
    spoof_type: str
    face_box: tuple[int, int, int, int]
    sample_id: str
    split: str = "train"
    video_id: str | None = None
    # already a 256x256 crop; face_box is then given in crop coordinates
    prepared: bool = False
    source_spoof_type: str | None = None

    def to_json(self) -> dict:
        d = {
            "path": self.path,
            "label": self.label,
            "spoof_type": self.spoof_type,
            "face_box": list(self.face_box),
            "sample_id": self.sample_id,
            "split": self.split,
        }
        if self.video_id is not None:
            d["video_id"] = self.video_id
        if self.prepared:
            d["prepared"] = True
        if self.source_spoof_type is not None:
            d["source_spoof_type"] = self.source_spoof_type
        return d


@dataclass(frozen=True)
class CorpusIndex:
    samples: tuple[CorpusRecord, ...]
    root: Path | None = None

    def resolve(self, record: CorpusRecord) -> Path:
        p = Path(record.path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def counts(self) -> dict[str, int]:
        c = Counter(r.label for r in self.samples)
        return {lab: c.get(lab, 0) for lab in LABELS}

    def by_label(self, label: str) -> list[CorpusRecord]:
        return [r for r in self.samples if r.label == label]

    def split(self, name: str) -> "CorpusIndex":
        return CorpusIndex(tuple(r for r in self.samples if r.split == name), self.root)

    def subset(self, records: Sequence[CorpusRecord]) -> "CorpusIndex":
        return CorpusIndex(tuple(records), self.root)


@dataclass
class FaceSample:
    """One prepared face crop.

    ``image`` is float32 H x W x 6 (RGB then HSV, all in [0, 1]).
    ``crop_box`` is the original face box mapped into crop pixels, which the
    boundary compositor and the default depth provider need.
    """

    image: np.ndarray
    label: str
    spoof_type: str
    source_id: str
    face_box: tuple[int, int, int, int]
    crop_box: tuple[float, float, float, float] = (64.0, 64.0, 128.0, 128.0)
    source_spoof_type: str | None = None
    video_id: str | None = None
    boundary_gt: np.ndarray | None = field(default=None, repr=False)
    paste_rect: tuple[int, int, int, int] | None = None
    moire_gt: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")
        if self.spoof_type not in SPOOF_TYPES:
            raise ValueError(f"unknown spoof_type {self.spoof_type!r}")
        if (self.label == "live") != (self.spoof_type == "none"):
            raise ValueError(f"label={self.label} inconsistent with spoof_type={self.spoof_type}")

    @property
    def rgb(self) -> np.ndarray:
        return self.image[..., :3]

    @property
    def is_live(self) -> bool:
        return self.label == "live"

    @property
    def label_index(self) -> int:
        return LABELS.index(self.label)


# -- manifest ---------------------------------------------------------------


def _parse_record(obj: dict, lineno: int) -> CorpusRecord:
    def bad(msg: str) -> ManifestError:
        return ManifestError(f"line {lineno}: {msg}")

    if not isinstance(obj, dict):
        raise bad("record is not an object")
    for key in ("path", "label", "spoof_type", "face_box"):
        if key not in obj:
            raise bad(f"missing field {key!r}")
    label = obj["label"]
    if label not in LABELS:
        raise bad(f"unknown label {label!r}")
    spoof_type = obj["spoof_type"]
    if spoof_type not in SPOOF_TYPES:
        raise bad(f"unknown spoof_type {spoof_type!r}")
    if (label == "live") != (spoof_type == "none"):
        raise bad(f"label {label!r} inconsistent with spoof_type {spoof_type!r}")
    box = obj["face_box"]
    if isinstance(box, str):
        box = box.split(",")
    try:
        box = tuple(int(v) for v in box)
    except (TypeError, ValueError):
        raise bad(f"face_box must be 4 integers, got {obj['face_box']!r}") from None
    if len(box) != 4:
        raise bad(f"face_box must be 4 integers, got {obj['face_box']!r}")
    split = obj.get("split", "train")
    if split not in SPLITS:
        raise bad(f"unknown split {split!r}")
    sample_id = str(obj.get("sample_id") or Path(obj["path"]).stem)
    return CorpusRecord(
        path=str(obj["path"]),
        label=label,
        spoof_type=spoof_type,
        face_box=box,
        sample_id=sample_id,
        split=split,
        video_id=obj.get("video_id"),
        prepared=bool(obj.get("prepared", False)),
        source_spoof_type=obj.get("source_spoof_type"),
    )


def load_manifest(path: str | Path, check_files: bool = True) -> CorpusIndex:
    """Parse a JSON-lines manifest. Relative image paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    records = []
    with path.open() as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"line {lineno}: malformed record ({e.msg})") from None
            records.append(_parse_record(obj, lineno))
    if not records:
        raise ManifestError("empty manifest")
    ids = Counter(r.sample_id for r in records)
    dup = [k for k, n in ids.items() if n > 1]
    if dup:
        raise ManifestError(f"duplicate sample_id {dup[0]!r}")
    index = CorpusIndex(tuple(records), path.parent)
    if check_files:
        for r in records:
            if not index.resolve(r).is_file():
                raise ManifestError(f"image not found for {r.sample_id}: {index.resolve(r)}")
    log.info("loaded %s: %s", path, index.counts())
    return index


def write_manifest(records: Sequence[CorpusRecord], path: str | Path) -> None:
    with Path(path).open("w") as f:
        for r in records:
            f.write(json.dumps(r.to_json()) + "\n")


# -- crop preparation -------------------------------------------------------


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Hexcone RGB->HSV on [0,1] floats, hue scaled to [0,1)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    v = maxc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def to_float_rgb(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim == 2:
        frame = np.repeat(frame[..., None], 3, axis=-1)
    frame = frame[..., :3]
    if np.issubdtype(frame.dtype, np.integer):
        return frame.astype(np.float32) / 255.0
    return np.clip(frame.astype(np.float32), 0.0, 1.0)


def expand_box(face_box, frame_w: int, frame_h: int, factor: float = 2.0) -> tuple[int, int, int, int]:
    """Scale a (x, y, w, h) box about its centre and clip it to the frame.

    Returns (x0, y0, x1, y1) with exclusive upper bounds.
    """
    x, y, w, h = face_box
    if w <= 0 or h <= 0:
        raise ValueError(f"zero-area face box {tuple(face_box)}")
    if x >= frame_w or y >= frame_h or x + w <= 0 or y + h <= 0:
        raise ValueError(f"face box {tuple(face_box)} lies outside the {frame_w}x{frame_h} frame")
    cx, cy = x + w / 2.0, y + h / 2.0
    hw, hh = w * factor / 2.0, h * factor / 2.0
    x0 = max(0, int(round(cx - hw)))
    y0 = max(0, int(round(cy - hh)))
    x1 = min(frame_w, int(round(cx + hw)))
    y1 = min(frame_h, int(round(cy + hh)))
    return x0, y0, x1, y1


def resize_rgb(rgb: np.ndarray, size: int = CROP_SIZE) -> np.ndarray:
    chans = [
        np.asarray(Image.fromarray(rgb[..., c].astype(np.float32), mode="F").resize((size, size), Image.BILINEAR))
        for c in range(3)
    ]
    return np.clip(np.stack(chans, axis=-1), 0.0, 1.0)


def stack_hsv(rgb: np.ndarray) -> np.ndarray:
    return np.concatenate([rgb, rgb_to_hsv(rgb)], axis=-1).astype(np.float32)


def prepare_face_crop(frame: np.ndarray, face_box) -> tuple[np.ndarray, tuple[float, float, float, float]]:
    """Expand ``face_box`` by +100% about its centre, crop, resize to 256x256 and append HSV.

    Returns the 256x256x6 image and the original face box in crop coordinates.
    """
    rgb = to_float_rgb(frame)
    fh, fw = rgb.shape[:2]
    x0, y0, x1, y1 = expand_box(face_box, fw, fh)
    crop = rgb[y0:y1, x0:x1]
    sx, sy = CROP_SIZE / (x1 - x0), CROP_SIZE / (y1 - y0)
    x, y, w, h = face_box
    crop_box = ((x - x0) * sx, (y - y0) * sy, w * sx, h * sy)
    return stack_hsv(resize_rgb(crop)), crop_box


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def load_sample(index: CorpusIndex, record: CorpusRecord) -> FaceSample:
    frame = read_image(index.resolve(record))
    if record.prepared:
        rgb = to_float_rgb(frame)
        if rgb.shape[:2] != (CROP_SIZE, CROP_SIZE):
            rgb = resize_rgb(rgb)
        image = stack_hsv(rgb)
        crop_box = tuple(float(v) for v in record.face_box)
    else:
        image, crop_box = prepare_face_crop(frame, record.face_box)
    return FaceSample(
        image=image,
        label=record.label,
        spoof_type=record.spoof_type,
        source_id=record.sample_id,
        face_box=record.face_box,
        crop_box=crop_box,
        source_spoof_type=record.source_spoof_type,
        video_id=record.video_id,
    )


class SampleCache:
    """Memoizes prepared crops by sample id; prepared crops never change."""

    def __init__(self, index: CorpusIndex, workers: int = 0):
        self.index = index
        self.workers = workers
        self._cache: dict[str, FaceSample] = {}

    def get(self, record: CorpusRecord) -> FaceSample:
        s = self._cache.get(record.sample_id)
        if s is None:
            s = self._cache[record.sample_id] = load_sample(self.index, record)
        return s

    def get_many(self, records: Sequence[CorpusRecord]) -> list[FaceSample]:
        if self.workers > 1:
            # map() keeps input order, so the stream is identical to the serial one
            with ThreadPoolExecutor(self.workers) as pool:
                return list(pool.map(self.get, records))
        return [self.get(r) for r in records]

    def add(self, sample: FaceSample) -> None:
        self._cache[sample.source_id] = sample


# -- batching ---------------------------------------------------------------


def _epoch_order(n: int, n_target: int, rng: np.random.Generator) -> np.ndarray:
    order = rng.permutation(n)
    if n_target > n:
        order = np.concatenate([order, rng.choice(n, size=n_target - n, replace=True)])
    return order


def balanced_batch_records(
    index: CorpusIndex, batch_size: int, seed: int, epoch: int = 0
) -> list[list[CorpusRecord]]:
    """All batches of one epoch, each with batch_size/2 live and batch_size/2 spoof records.

    The epoch length is set by the majority class; the minority class (and
    any ragged tail) is topped up by sampling with replacement.
    """
    if batch_size <= 0 or batch_size % 2:
        raise ValueError(f"batch_size must be a positive even integer, got {batch_size}")
    live, spoof = index.by_label("live"), index.by_label("spoof")
    if not live or not spoof:
        raise ValueError(f"need both classes to balance batches, got {index.counts()}")
    half = batch_size // 2
    n_batches = -(-max(len(live), len(spoof)) // half)
    rng = np.random.default_rng([seed, epoch])
    live_order = _epoch_order(len(live), n_batches * half, rng)
    spoof_order = _epoch_order(len(spoof), n_batches * half, rng)
    batches = []
    for b in range(n_batches):
        sl = slice(b * half, (b + 1) * half)
        batch = [live[i] for i in live_order[sl]] + [spoof[i] for i in spoof_order[sl]]
        batches.append(batch)
    return batches


def balanced_batches(
    index: CorpusIndex,
    batch_size: int,
    seed: int,
    epochs: int | None = 1,
    cache: SampleCache | None = None,
) -> Iterator[list[FaceSample]]:
    """Stream FaceSample batches; ``epochs=None`` streams forever."""
    cache = cache or SampleCache(index)
    epoch = 0
    while epochs is None or epoch < epochs:
        for batch in balanced_batch_records(index, batch_size, seed, epoch):
            yield cache.get_many(batch)
        epoch += 1


def with_image(sample: FaceSample, image: np.ndarray, **changes) -> FaceSample:
    return replace(sample, image=image, **changes)
