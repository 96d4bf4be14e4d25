"""Synthetic toy corpora: drawn faces, printed-photo and screen-replay attacks.

Only meant for smoke tests and demos; nothing here resembles real data.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFilter

from .corpus import CorpusRecord, write_manifest
from .cues import random_grating_pair, synthesize_moire_pattern

FRAME = 320


def _face(rng: np.random.Generator, size: int, palette: int) -> Image.Image:
    bg = tuple(int(v) for v in rng.integers(40, 200, size=3))
    im = Image.new("RGB", (size, size), bg)
    d = ImageDraw.Draw(im)
    skins = [(224, 172, 140), (198, 134, 100), (241, 194, 160), (160, 110, 80)]
    skin = np.array(skins[(palette + int(rng.integers(2))) % len(skins)]) + rng.integers(-15, 16, size=3)
    skin = tuple(int(v) for v in np.clip(skin, 0, 255))
    m = size // 8
    d.ellipse([m, m // 2, size - m, size - m // 2], fill=skin)
    ey = int(size * 0.4)
    for ex in (int(size * 0.35), int(size * 0.65)):
        d.ellipse([ex - size // 14, ey - size // 24, ex + size // 14, ey + size // 24], fill=(30, 30, 40))
    d.rectangle([int(size * 0.38), int(size * 0.72), int(size * 0.62), int(size * 0.76)], fill=(120, 40, 50))
    return im.filter(ImageFilter.GaussianBlur(1.5))


def _frame(rng: np.random.Generator, palette: int):
    a = np.zeros((FRAME, FRAME, 3), np.float32)
    c0, c1 = rng.uniform(0.2, 0.8, size=3), rng.uniform(0.2, 0.8, size=3)
    t = np.linspace(0, 1, FRAME)[:, None, None]
    a[:] = c0 * (1 - t) + c1 * t
    fw = int(rng.integers(100, 130))
    x = int(rng.integers(FRAME // 2 - fw // 2 - 20, FRAME // 2 - fw // 2 + 20))
    y = int(rng.integers(FRAME // 2 - fw // 2 - 20, FRAME // 2 - fw // 2 + 20))
    return a, (x, y, fw, fw)


def render_sample(kind: str, rng: np.random.Generator, palette: int = 0) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """A FRAMExFRAMEx3 uint8 frame and its face box for kind in {live, print, replay}."""
    frame, box = _frame(rng, palette)
    x, y, w, h = box
    face = np.asarray(_face(rng, w, palette), np.float32) / 255.0
    if kind == "live":
        frame[y : y + h, x : x + w] = face
        # mild shading keeps live faces looking three-dimensional
        yy, xx = np.mgrid[0:h, 0:w] / w - 0.5
        frame[y : y + h, x : x + w] *= (1.0 - 0.4 * (xx**2 + yy**2))[..., None]
    else:
        pad = int(w * 0.3)
        x0, y0, x1, y1 = max(0, x - pad), max(0, y - pad), min(FRAME, x + w + pad), min(FRAME, y + h + pad)
        if kind == "print":
            frame[y0:y1, x0:x1] = 0.93
            gray = face.mean(axis=-1, keepdims=True)
            face = 0.5 * face + 0.5 * gray
            face = face + rng.normal(0, 0.04, size=face.shape).astype(np.float32)
            frame[y : y + h, x : x + w] = face
        elif kind == "replay":
            frame[y0:y1, x0:x1] = 0.05
            inner = 4
            frame[y0 + inner : y1 - inner, x0 + inner : x1 - inner] = 0.25
            frame[y : y + h, x : x + w] = 0.85 * face + 0.1
            a, b = random_grating_pair(rng)
            pattern = synthesize_moire_pattern(a, b, (y1 - y0, x1 - x0))
            frame[y0:y1, x0:x1] += 0.25 * (pattern - pattern.mean())[..., None]
        else:
            raise ValueError(f"unknown kind {kind!r}")
    return (np.clip(frame, 0, 1) * 255).astype(np.uint8), box


def make_toy_corpus(
    out_dir: str | Path,
    n_live: int = 8,
    n_print: int = 4,
    n_replay: int = 4,
    seed: int = 0,
    palette: int = 0,
    prefix: str = "toy",
    dev_every: int = 0,
) -> Path:
    """Write frames plus ``manifest.jsonl`` into ``out_dir``; returns the manifest path.

    With ``dev_every=k`` every k-th sample of each kind goes to the dev split.
    """
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for kind, n in (("live", n_live), ("print", n_print), ("replay", n_replay)):
        for i in range(n):
            frame, box = render_sample(kind, rng, palette)
            sid = f"{prefix}_{kind}_{i:03d}"
            rel = f"frames/{sid}.png"
            Image.fromarray(frame).save(out / rel)
            split = "dev" if dev_every and i % dev_every == dev_every - 1 else "train"
            records.append(
                CorpusRecord(
                    path=rel,
                    label="live" if kind == "live" else "spoof",
                    spoof_type="none" if kind == "live" else kind,
                    face_box=box,
                    sample_id=sid,
                    split=split,
                )
            )
    manifest = out / "manifest.jsonl"
    write_manifest(records, manifest)
    return manifest
