"""Spoof scoring, EER threshold selection, HTER, cross-dataset protocol and cue ablations."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .corpus import CorpusIndex, CorpusRecord, FaceSample, SampleCache
from .cues import SupervisionSource
from .model import MEGCNet
from .trainer import TrainConfig, Trainer, images_to_tensor

log = logging.getLogger(__name__)

ABLATABLE = ("reflection", "moire", "boundary")


@dataclass
class EvalReport:
    far: float
    frr: float
    hter: float
    threshold: float
    n_live: int
    n_spoof: int

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        return (
            f"{'threshold':>10} {'FAR':>8} {'FRR':>8} {'HTER':>8} {'#live':>6} {'#spoof':>6}\n"
            f"{self.threshold:>10.4f} {self.far:>8.4f} {self.frr:>8.4f} {self.hter:>8.4f} {self.n_live:>6d} {self.n_spoof:>6d}"
        )


# -- scoring ----------------------------------------------------------------


@torch.no_grad()
def score_samples(model: MEGCNet, samples: Sequence[FaceSample], batch_size: int = 8) -> list[tuple[str, float]]:
    """Softmax spoof probability per sample, higher = more spoof-like."""
    model.eval()
    out = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        logits, _ = model(images_to_tensor(chunk))
        probs = torch.softmax(logits.double(), dim=1)[:, 1]
        out.extend((s.source_id, float(p)) for s, p in zip(chunk, probs))
    return out


@torch.no_grad()
def predict_maps(model: MEGCNet, samples: Sequence[FaceSample], batch_size: int = 8) -> list[dict[str, np.ndarray]]:
    model.eval()
    out = []
    for i in range(0, len(samples), batch_size):
        _, maps = model(images_to_tensor(samples[i : i + batch_size]))
        for j in range(len(samples[i : i + batch_size])):
            out.append({c: m[j].numpy() for c, m in maps.items()})
    return out


def aggregate_by_video(scores: Iterable[tuple[str, float]], video_of: dict[str, str | None]) -> list[tuple[str, float]]:
    """Mean score per video id; samples without one stay as they are."""
    groups: dict[str, list[float]] = {}
    order = []
    for sid, s in scores:
        key = video_of.get(sid) or sid
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(s)
    return [(k, float(np.mean(groups[k]))) for k in order]


# -- metrics ----------------------------------------------------------------


def error_rates(live: np.ndarray, spoof: np.ndarray, threshold: float) -> tuple[float, float]:
    """(FAR, FRR) under the rule score >= threshold => spoof."""
    frr = float(np.mean(live >= threshold))
    far = float(np.mean(spoof < threshold))
    return far, frr


def compute_hter(live_scores: Sequence[float], spoof_scores: Sequence[float], threshold: float) -> EvalReport:
    live, spoof = np.asarray(live_scores, float), np.asarray(spoof_scores, float)
    if live.size == 0 or spoof.size == 0:
        raise ValueError("compute_hter needs at least one live and one spoof score")
    far, frr = error_rates(live, spoof, threshold)
    return EvalReport(far, frr, (far + frr) / 2, float(threshold), int(live.size), int(spoof.size))


def select_threshold(live_scores: Sequence[float], spoof_scores: Sequence[float]) -> float:
    """Threshold at the EER point of the dev scores.

    FAR and FRR are constant on the intervals (s_{k-1}, s_k] between
    consecutive distinct scores. The interval(s) minimising |FAR - FRR| win;
    among a contiguous run of winners the midpoint of the run is returned
    (the first run if several are disjoint). Open ends are closed at the
    extreme scores.
    """
    live, spoof = np.asarray(live_scores, float), np.asarray(spoof_scores, float)
    if live.size == 0 or spoof.size == 0:
        raise ValueError("select_threshold needs both live and spoof scores")
    s = np.unique(np.concatenate([live, spoof]))
    # candidate k covers (s[k-1], s[k]]; k = len(s) is everything above the max
    cand = np.append(s, np.inf)
    frr = (live[None, :] >= cand[:, None]).mean(axis=1)
    far = (spoof[None, :] < cand[:, None]).mean(axis=1)
    gap = np.abs(far - frr)
    best = np.flatnonzero(gap == gap.min())
    run_end = best[0]
    while run_end + 1 in best:
        run_end += 1
    lo_k, hi_k = best[0], run_end
    lo = s[lo_k - 1] if lo_k > 0 else s[0]
    hi = s[hi_k] if hi_k < len(s) else np.nextafter(s[-1], np.inf)
    t = 0.5 * (lo + hi)
    if lo_k > 0 and t <= lo:
        t = hi
    return float(t)


def equal_error_rate(live_scores, spoof_scores) -> float:
    t = select_threshold(live_scores, spoof_scores)
    return compute_hter(live_scores, spoof_scores, t).hter


# -- protocol ---------------------------------------------------------------


def dev_split(index: CorpusIndex, fraction: float = 0.2) -> tuple[CorpusIndex, CorpusIndex]:
    """(train, dev): the manifest's dev split if it has one, else a hash-of-id split.

    Synthetic composites are training material and never enter a hashed dev split.
    """
    dev = [r for r in index.samples if r.split == "dev"]
    if dev:
        return index.subset([r for r in index.samples if r.split != "dev"]), index.subset(dev)
    buckets = int(round(1 / fraction))

    def is_dev(r: CorpusRecord) -> bool:
        if r.spoof_type == "composite":
            return False
        return int(hashlib.sha1(r.sample_id.encode()).hexdigest(), 16) % buckets == 0

    return (
        index.subset([r for r in index.samples if not is_dev(r)]),
        index.subset([r for r in index.samples if is_dev(r)]),
    )


def split_scores(scores: Sequence[tuple[str, float]], labels: dict[str, str]) -> tuple[list[float], list[float]]:
    live = [s for sid, s in scores if labels[sid] == "live"]
    spoof = [s for sid, s in scores if labels[sid] == "spoof"]
    return live, spoof


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class ProtocolResult:
    report: EvalReport
    manifest: dict
    trainer: Trainer = field(repr=False)


def _score_index(model: MEGCNet, index: CorpusIndex, video_level: bool, cache: SampleCache | None = None):
    cache = cache or SampleCache(index)
    samples = [cache.get(r) for r in index.samples]
    scores = score_samples(model, samples)
    labels = {r.sample_id: r.label for r in index.samples}
    if video_level:
        video_of = {r.sample_id: r.video_id for r in index.samples}
        scores = aggregate_by_video(scores, video_of)
        for r in index.samples:
            labels.setdefault(r.video_id or r.sample_id, r.label)
    return scores, labels, samples


def run_protocol(
    train_index: CorpusIndex,
    test_index: CorpusIndex,
    source: SupervisionSource,
    config: TrainConfig,
    ablation: Iterable[str] = (),
    run_dir: str | Path | None = None,
    video_level: bool = False,
    test_source: str = "target",
) -> ProtocolResult:
    """Train on the source corpus (minus its dev split) with the given cue branches removed,
    fix the threshold at the dev EER point and report HTER on the target corpus."""
    ablation = tuple(sorted(set(ablation)))
    if "depth" in ablation:
        raise ValueError("the depth cue cannot be ablated")
    bad = set(ablation) - set(ABLATABLE)
    if bad:
        raise ValueError(f"unknown cues to ablate: {sorted(bad)}")
    cfg_dict = config.to_dict()
    cfg_dict["drop"] = list(ablation)
    config = TrainConfig.from_dict({**cfg_dict, "weights": config.weights})

    train_part, dev_part = dev_split(train_index)
    if not dev_part.by_label("live") or not dev_part.by_label("spoof"):
        raise ValueError(f"dev split needs both classes, got {dev_part.counts()}")
    run_dir = Path(run_dir) if run_dir is not None else None
    trainer = Trainer(train_part, source, config, run_dir)
    result = trainer.run()
    model = result.model

    dev_scores, dev_labels, _ = _score_index(model, dev_part, video_level, trainer.cache)
    threshold = select_threshold(*split_scores(dev_scores, dev_labels))
    test_scores, test_labels, _ = _score_index(model, test_index, video_level)
    report = compute_hter(*split_scores(test_scores, test_labels), threshold)
    manifest = {
        "config_hash": config_hash(config.to_dict()),
        "config": config.to_dict(),
        "seed": config.seed,
        "ablation": list(ablation),
        "checkpoint": str(result.checkpoint) if result.checkpoint else None,
        "checkpoint_sha256": result.digest,
        "train_samples": len(train_part.samples),
        "dev_samples": len(dev_part.samples),
        "test_samples": len(test_index.samples),
        "test_corpus": test_source,
        "report": report.to_dict(),
    }
    if run_dir is not None:
        (run_dir / "report.json").write_text(json.dumps(manifest, indent=2))
        with (run_dir / "scores.jsonl").open("w") as f:
            for sid, s in test_scores:
                f.write(json.dumps({"id": sid, "score": s, "label": test_labels[sid]}) + "\n")
    return ProtocolResult(report, manifest, trainer)


def dump_map_grid(model: MEGCNet, samples: Sequence[FaceSample], path: str | Path, upscale: int = 4) -> None:
    """One row per sample: RGB crop thumbnail followed by each predicted map."""
    from PIL import Image

    maps = predict_maps(model, samples)
    tile = 32 * upscale
    cues = list(model.cues)
    grid = np.zeros((tile * len(samples), tile * (1 + len(cues)), 3), np.uint8)
    for i, (s, m) in enumerate(zip(samples, maps)):
        thumb = Image.fromarray((s.rgb * 255).astype(np.uint8)).resize((tile, tile))
        grid[i * tile : (i + 1) * tile, :tile] = np.asarray(thumb)
        for j, c in enumerate(cues, start=1):
            cell = np.kron(m[c], np.ones((upscale, upscale)))
            grid[i * tile : (i + 1) * tile, j * tile : (j + 1) * tile] = (cell[..., None] * 255).astype(np.uint8)
    Image.fromarray(grid).save(path)
