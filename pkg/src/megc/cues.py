"""Synthetic supervision: gratings, moire patterns, boundary composites, map bundles."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

from .corpus import CROP_SIZE, FaceSample, stack_hsv

MAP_SIZE = 32
CUES = ("depth", "reflection", "moire", "boundary")

MapProvider = Callable[[FaceSample], np.ndarray]


class CueError(ValueError):
    pass


@dataclass(frozen=True)
class GratingSpec:
    frequency: float  # cycles / pixel
    orientation: float = 0.0  # radians, [0, pi)
    phase: float = 0.0
    amplitude: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.frequency < 0.5:
            raise CueError(f"grating frequency {self.frequency} must lie in (0, 0.5) cycles/px (aliasing)")
        if not 0.0 < self.amplitude <= 1.0:
            raise CueError(f"grating amplitude {self.amplitude} must lie in (0, 1]")
        if not 0.0 <= self.orientation < math.pi:
            raise CueError(f"grating orientation {self.orientation} must lie in [0, pi)")

    @property
    def wavevector(self) -> np.ndarray:
        return self.frequency * np.array([math.cos(self.orientation), math.sin(self.orientation)])


def generate_grating(spec: GratingSpec, width: int, height: int) -> np.ndarray:
    """A * 0.5 * (1 + cos(2*pi*f*(x cos t + y sin t) + phase)) on a height x width grid."""
    if width < 8 or height < 8:
        raise CueError(f"grating size must be at least 8x8, got {width}x{height}")
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    arg = 2 * np.pi * spec.frequency * (x * math.cos(spec.orientation) + y * math.sin(spec.orientation))
    return spec.amplitude * 0.5 * (1.0 + np.cos(arg + spec.phase))


def _wrap(k: np.ndarray) -> np.ndarray:
    return (k + 0.5) % 1.0 - 0.5


def _beat_and_sum(spec_a: GratingSpec, spec_b: GratingSpec) -> tuple[float, float]:
    # cos is even, so k and -k describe the same fringe; the beat is the shorter combination
    d = np.linalg.norm(spec_a.wavevector - spec_b.wavevector)
    s = np.linalg.norm(spec_a.wavevector + spec_b.wavevector)
    if d <= s:
        return float(d), float(np.linalg.norm(_wrap(spec_a.wavevector + spec_b.wavevector)))
    return float(s), float(np.linalg.norm(_wrap(spec_a.wavevector - spec_b.wavevector)))


def beat_frequency(spec_a: GratingSpec, spec_b: GratingSpec) -> float:
    """Magnitude of the beat wavevector, in cycles/px."""
    return _beat_and_sum(spec_a, spec_b)[0]


def _orientation_gap(a: float, b: float) -> float:
    d = abs(a - b) % math.pi
    return min(d, math.pi - d)


def _rescale01(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def synthesize_moire_pattern(spec_a: GratingSpec, spec_b: GratingSpec, size=(CROP_SIZE, CROP_SIZE)) -> np.ndarray:
    """Multiply two similar gratings and keep only the low-frequency beat.

    An ideal radial low-pass with its cutoff midway between the beat and the
    lower carrier frequency isolates the beat; the result is min-max rescaled
    to [0, 1] (all zeros when the beat vanishes).
    """
    if abs(spec_a.frequency - spec_b.frequency) > 0.1 or _orientation_gap(spec_a.orientation, spec_b.orientation) > 0.2:
        raise CueError("fringes not similar: need |df| <= 0.1 and |dtheta| <= 0.2 rad")
    beat, summed = _beat_and_sum(spec_a, spec_b)
    carrier = min(spec_a.frequency, spec_b.frequency)
    if beat >= carrier:
        raise CueError(f"fringes not similar: beat {beat:.4f} is not below carrier {carrier:.4f}")
    h, w = size
    if beat <= 1e-12:
        # no beat: the ideal filtered product is a constant, leakage aside
        return np.zeros((h, w))
    cutoff = 0.5 * (beat + carrier)
    if summed <= cutoff:
        raise CueError(f"sum frequency aliases to {summed:.4f}, inside the beat passband")
    product = generate_grating(spec_a, w, h) * generate_grating(spec_b, w, h)
    spectrum = np.fft.fft2(product)
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    spectrum[np.hypot(fx, fy) > cutoff] = 0.0
    return _rescale01(np.real(np.fft.ifft2(spectrum)))


def downsample_area(a: np.ndarray, out: int = MAP_SIZE) -> np.ndarray:
    """Block-mean downsample of a square map whose side is a multiple of ``out``."""
    h, w = a.shape
    if h % out or w % out:
        raise CueError(f"map of shape {a.shape} is not divisible into {out}x{out} blocks")
    return a.reshape(out, h // out, out, w // out).mean(axis=(1, 3))


def composite_moire(live: FaceSample, moire_map: np.ndarray, alpha: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    """Blend a zero-mean moire pattern into a live crop.

    Returns the 256x256x6 moire image and the 32x32 moire ground truth.
    """
    if not live.is_live:
        raise CueError("composite_moire needs a live sample")
    if not 0.0 < alpha <= 1.0:
        raise CueError(f"alpha must lie in (0, 1], got {alpha}")
    moire_map = np.asarray(moire_map, dtype=np.float64)
    if moire_map.shape != live.image.shape[:2]:
        raise CueError(f"moire map shape {moire_map.shape} does not match image {live.image.shape[:2]}")
    if np.ptp(moire_map) == 0:
        centred = np.zeros_like(moire_map)
    else:
        centred = moire_map - moire_map.mean()
    rgb = np.clip(live.rgb.astype(np.float64) + alpha * centred[..., None], 0.0, 1.0)
    gt = _rescale01(downsample_area(moire_map))
    return stack_hsv(rgb), gt.astype(np.float32)


# -- boundary composites ----------------------------------------------------


@dataclass(frozen=True)
class PasteGeometry:
    """Target rectangle (x0, y0, x1, y1) in the live crop, exclusive upper bounds.

    With a seed, the rectangle is jittered in scale by [0.9, 1.1] about its
    centre and translated by up to +-8 px; without one it is used as-is.
    """

    x0: int
    y0: int
    x1: int
    y1: int
    seed: int | None = None
    scale_jitter: tuple[float, float] = (0.9, 1.1)
    max_shift: int = 8

    def realize(self, size: int = CROP_SIZE) -> tuple[int, int, int, int]:
        x0, y0, x1, y1 = self.x0, self.y0, self.x1, self.y1
        if self.seed is not None:
            rng = np.random.default_rng(self.seed)
            s = rng.uniform(*self.scale_jitter)
            dx, dy = rng.integers(-self.max_shift, self.max_shift + 1, size=2)
            cx, cy = (x0 + x1) / 2 + dx, (y0 + y1) / 2 + dy
            hw, hh = (x1 - x0) * s / 2, (y1 - y0) * s / 2
            x0, x1 = int(round(cx - hw)), int(round(cx + hw))
            y0, y1 = int(round(cy - hh)), int(round(cy + hh))
        x0, y0 = max(0, x0), max(0, y0)
        x1, y1 = min(size, x1), min(size, y1)
        if x1 <= x0 or y1 <= y0:
            raise CueError(f"degenerate paste region ({x0},{y0})-({x1},{y1})")
        return x0, y0, x1, y1


def rect_mask(rect: tuple[int, int, int, int], size: int = CROP_SIZE) -> np.ndarray:
    x0, y0, x1, y1 = rect
    mask = np.zeros((size, size), dtype=bool)
    mask[y0:y1, x0:x1] = True
    return mask


def majority_downsample(mask: np.ndarray, out: int = MAP_SIZE) -> np.ndarray:
    """1 where strictly more than half of a block is set, else 0."""
    h, w = mask.shape
    bh, bw = h // out, w // out
    counts = mask.reshape(out, bh, out, bw).sum(axis=(1, 3))
    return (2 * counts > bh * bw).astype(np.float32)


def _resize_rgb_to(rgb: np.ndarray, w: int, h: int) -> np.ndarray:
    chans = [np.asarray(Image.fromarray(rgb[..., c].astype(np.float32), mode="F").resize((w, h), Image.BILINEAR)) for c in range(3)]
    return np.clip(np.stack(chans, axis=-1), 0.0, 1.0)


def composite_boundary(live: FaceSample, spoof: FaceSample, geometry: PasteGeometry) -> tuple[FaceSample, np.ndarray]:
    """Cut the spoof face region out and paste it over the live crop.

    Returns the composite sample (spoof_type="composite") and its 32x32
    boundary map: 1 on cells whose 8x8 block is mostly inside the paste.
    """
    if not live.is_live:
        raise CueError("composite_boundary: first sample must be live")
    if spoof.is_live:
        raise CueError("composite_boundary: second sample must be a spoof")
    size = live.image.shape[0]
    x0, y0, x1, y1 = geometry.realize(size)

    bx, by, bw, bh = spoof.crop_box
    sx0, sy0 = max(0, int(math.floor(bx))), max(0, int(math.floor(by)))
    sx1, sy1 = min(size, int(math.ceil(bx + bw))), min(size, int(math.ceil(by + bh)))
    if sx1 <= sx0 or sy1 <= sy0:
        raise CueError("degenerate spoof face region")
    patch = _resize_rgb_to(spoof.rgb[sy0:sy1, sx0:sx1], x1 - x0, y1 - y0)

    rgb = live.rgb.astype(np.float32).copy()
    rgb[y0:y1, x0:x1] = patch
    boundary = majority_downsample(rect_mask((x0, y0, x1, y1), size))
    source = spoof.source_spoof_type if spoof.spoof_type == "composite" else spoof.spoof_type
    composite = FaceSample(
        image=stack_hsv(rgb),
        label="spoof",
        spoof_type="composite",
        source_id=f"{live.source_id}+{spoof.source_id}",
        face_box=live.face_box,
        crop_box=(float(x0), float(y0), float(x1 - x0), float(y1 - y0)),
        source_spoof_type=source,
        boundary_gt=boundary,
        paste_rect=(x0, y0, x1, y1),
    )
    return composite, boundary


def inherit_moire(spoof_map: np.ndarray, spoof_box, paste_rect, size: int = CROP_SIZE) -> np.ndarray:
    """Carry a spoof's moire map into a composite: the spoof face region lands in the paste rect.

    Each composite cell inside the paste takes the nearest spoof cell; cells outside are 0.
    """
    n = spoof_map.shape[0]
    cell = size / n
    x0, y0, x1, y1 = paste_rect
    bx, by, bw, bh = spoof_box
    c = (np.arange(n) + 0.5) * cell
    u, v = (c - x0) / (x1 - x0), (c - y0) / (y1 - y0)
    inside = ((u >= 0) & (u < 1))[None, :] & ((v >= 0) & (v < 1))[:, None]
    sx = np.clip(((bx + u * bw) / cell).astype(int), 0, n - 1)
    sy = np.clip(((by + v * bh) / cell).astype(int), 0, n - 1)
    out = spoof_map[sy[:, None], sx[None, :]]
    return np.where(inside, out, 0.0).astype(np.float32)


def random_paste_geometry(rng: np.random.Generator, size: int = CROP_SIZE) -> PasteGeometry:
    """A paste rectangle covering roughly the central face area, with a jitter seed."""
    w = int(rng.integers(size // 3, (2 * size) // 3))
    h = int(rng.integers(size // 3, (2 * size) // 3))
    cx = int(rng.integers(size // 3, (2 * size) // 3))
    cy = int(rng.integers(size // 3, (2 * size) // 3))
    return PasteGeometry(cx - w // 2, cy - h // 2, cx + (w + 1) // 2, cy + (h + 1) // 2, seed=int(rng.integers(2**31)))


# -- supervision bundles ----------------------------------------------------


@dataclass(frozen=True)
class Validity:
    depth: bool = True
    reflection: bool = True
    moire: bool = True
    boundary: bool = True

    def as_tuple(self) -> tuple[bool, bool, bool, bool]:
        return (self.depth, self.reflection, self.moire, self.boundary)


def validity_for(label: str, spoof_type: str, source_spoof_type: str | None = None) -> Validity:
    """Which cue losses a sample participates in; a pure function of its category."""
    if label == "live":
        return Validity(True, True, True, True)
    if spoof_type == "print":
        return Validity(True, True, False, False)
    if spoof_type == "replay":
        return Validity(True, True, True, False)
    if spoof_type == "composite":
        if source_spoof_type not in ("print", "replay"):
            raise CueError(f"composite needs a print/replay source, got {source_spoof_type!r}")
        return Validity(True, True, source_spoof_type == "replay", True)
    raise CueError(f"unknown category label={label!r} spoof_type={spoof_type!r}")


@dataclass
class SupervisionBundle:
    depth_gt: np.ndarray
    reflection_gt: np.ndarray
    moire_gt: np.ndarray
    boundary_gt: np.ndarray
    validity: Validity

    def maps(self) -> dict[str, np.ndarray]:
        return {
            "depth": self.depth_gt,
            "reflection": self.reflection_gt,
            "moire": self.moire_gt,
            "boundary": self.boundary_gt,
        }


def _zeros() -> np.ndarray:
    return np.zeros((MAP_SIZE, MAP_SIZE), dtype=np.float32)


def _checked(cue: str, m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float32)
    if m.shape != (MAP_SIZE, MAP_SIZE):
        raise CueError(f"{cue} provider returned shape {m.shape}, expected {MAP_SIZE}x{MAP_SIZE}")
    return np.clip(m, 0.0, 1.0)


def supervision_for_sample(
    sample: FaceSample,
    depth_provider: MapProvider | None,
    reflection_provider: MapProvider | None,
    moire_provider: MapProvider | None,
    boundary_provider: MapProvider | None = None,
) -> SupervisionBundle:
    validity = validity_for(sample.label, sample.spoof_type, sample.source_spoof_type)

    def need(cue: str, provider):
        if provider is None:
            raise CueError(f"no {cue} provider registered for {sample.label}/{sample.spoof_type} sample {sample.source_id}")
        return _checked(cue, provider(sample))

    if sample.is_live:
        return SupervisionBundle(need("depth", depth_provider), _zeros(), _zeros(), _zeros(), validity)

    reflection = need("reflection", reflection_provider)
    if not validity.moire:
        moire = _zeros()
    elif sample.moire_gt is not None:
        moire = _checked("moire", sample.moire_gt)
    else:
        moire = need("moire", moire_provider)
    if sample.spoof_type == "composite":
        if sample.boundary_gt is not None:
            boundary = sample.boundary_gt.astype(np.float32)
        else:
            boundary = need("boundary", boundary_provider)
        boundary = (boundary >= 0.5).astype(np.float32)
    else:
        boundary = _zeros()
    return SupervisionBundle(_zeros(), reflection, moire, boundary, validity)


# -- default providers ------------------------------------------------------


def dome_depth(sample: FaceSample) -> np.ndarray:
    """Raised-cosine dome over the face box for live samples, zeros for spoofs."""
    if not sample.is_live:
        return _zeros()
    scale = MAP_SIZE / sample.image.shape[0]
    bx, by, bw, bh = (v * scale for v in sample.crop_box)
    c = np.arange(MAP_SIZE) + 0.5
    u = (c - (bx + bw / 2)) / (bw / 2)
    v = (c - (by + bh / 2)) / (bh / 2)
    fu = np.where(np.abs(u) <= 1, 0.5 * (1 + np.cos(np.pi * u)), 0.0)
    fv = np.where(np.abs(v) <= 1, 0.5 * (1 + np.cos(np.pi * v)), 0.0)
    dome = fv[:, None] * fu[None, :]
    peak = dome.max()
    return (dome / peak if peak > 0 else dome).astype(np.float32)


def zero_map(sample: FaceSample) -> np.ndarray:
    return _zeros()


# -- map files --------------------------------------------------------------


def cue_path(directory: str | Path, sample_id: str, cue: str) -> Path:
    return Path(directory) / f"{sample_id}.{cue}.png"


def save_map(m: np.ndarray, path: str | Path, binary: bool = False) -> None:
    m = np.clip(np.asarray(m, dtype=np.float64), 0.0, 1.0)
    if binary:
        Image.fromarray(np.where(m >= 0.5, 255, 0).astype(np.uint8), mode="L").save(path)
    else:
        Image.fromarray(np.round(m * 65535).astype(np.uint16)).save(path)


def load_map(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        a = np.asarray(im)
    if a.dtype == np.uint8:
        return (a.astype(np.float32) / 255.0)
    return (a.astype(np.float64) / 65535.0).astype(np.float32)


class FileMapProvider:
    """Reads <sample_id>.<cue>.png from a directory; optionally falls back to another provider."""

    def __init__(self, directory: str | Path, cue: str, fallback: MapProvider | None = None):
        self.directory = Path(directory)
        self.cue = cue
        self.fallback = fallback

    def __call__(self, sample: FaceSample) -> np.ndarray:
        p = cue_path(self.directory, sample.source_id, self.cue)
        if p.is_file():
            return load_map(p)
        if self.fallback is not None:
            return self.fallback(sample)
        raise CueError(f"missing {self.cue} map for {sample.source_id}: {p}")


@dataclass
class SupervisionSource:
    """Provider registry plus a per-sample bundle cache."""

    depth: MapProvider | None = dome_depth
    reflection: MapProvider | None = zero_map
    moire: MapProvider | None = None
    boundary: MapProvider | None = None

    def __post_init__(self):
        self._cache: dict[str, SupervisionBundle] = {}

    def bundle(self, sample: FaceSample) -> SupervisionBundle:
        b = self._cache.get(sample.source_id)
        if b is None:
            b = supervision_for_sample(sample, self.depth, self.reflection, self.moire, self.boundary)
            self._cache[sample.source_id] = b
        return b

    def with_providers(self, **providers: MapProvider | None) -> "SupervisionSource":
        return replace(self, **providers)


def providers_from_dir(cue_dir: str | Path | None, moire_fallback: MapProvider | None = None) -> SupervisionSource:
    """Default desk-scale providers, overridden by any map files present in ``cue_dir``."""
    if cue_dir is None:
        return SupervisionSource(moire=moire_fallback)
    return SupervisionSource(
        depth=FileMapProvider(cue_dir, "depth", dome_depth),
        reflection=FileMapProvider(cue_dir, "reflection", zero_map),
        moire=FileMapProvider(cue_dir, "moire", moire_fallback),
        boundary=FileMapProvider(cue_dir, "boundary"),
    )


def stack_bundles(bundles: list[SupervisionBundle]) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    maps = {c: np.stack([b.maps()[c] for b in bundles]) for c in CUES}
    valid = {c: np.array([getattr(b.validity, c) for b in bundles]) for c in CUES}
    return maps, valid


def random_grating_pair(
    rng: np.random.Generator,
    f_range=(0.15, 0.35),
    max_df: float = 0.05,
    max_dtheta: float = 0.2,
    beat_range: tuple[float, float] = (2.0 / 256, 1.0 / 32),
):
    """Draw two similar gratings whose beat lies in ``beat_range`` (cycles/px).

    The default keeps at least two FFT bins at 256 px and at least four
    32x32 map cells per beat period.
    """
    while True:
        fa = rng.uniform(*f_range)
        fb = float(np.clip(fa + rng.uniform(-max_df, max_df), 0.01, 0.49))
        ta = rng.uniform(0, math.pi - max_dtheta)
        tb = ta + rng.uniform(-max_dtheta, max_dtheta) * 0.99
        tb = tb % math.pi
        a = GratingSpec(fa, ta, rng.uniform(0, 2 * math.pi))
        b = GratingSpec(fb, tb, rng.uniform(0, 2 * math.pi))
        beat = beat_frequency(a, b)
        if beat_range[0] <= beat <= beat_range[1] and beat < 0.5 * min(fa, fb):
            return a, b
