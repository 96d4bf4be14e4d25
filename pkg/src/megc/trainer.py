"""End-to-end MEGC training: balanced batches, composites, masked multi-cue loss, checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import check_compatible, load_checkpoint, save_checkpoint
from .corpus import CorpusIndex, CorpusRecord, FaceSample, SampleCache, balanced_batch_records
from .cues import CUES, CueError, SupervisionSource, composite_boundary, inherit_moire, random_paste_geometry, validity_for, zero_map
from .losses import LossBreakdown, LossWeights, compute_losses
from .model import BackboneConfig, MEGCNet, build_megc

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int | None = None  # overrides epochs when set
    epochs: int = 1
    batch_size: int = 8
    lr: float = 1e-4
    lr_schedule: str = "cosine"  # or "constant"
    weight_decay: float = 0.0
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    desk_scale: bool = True
    drop: tuple[str, ...] = ()
    composite_fraction: float = 0.25
    composite_mode: str = "offline"  # or "online"
    composite_pool: int = 16
    pixel_mean: bool = False
    normalize_by_valid: bool = False
    keep_epoch_checkpoints: bool = False
    workers: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights.from_dict(self.weights)
        self.drop = tuple(self.drop)
        if self.batch_size <= 0 or self.batch_size % 2:
            raise ValueError(f"batch_size must be a positive even integer, got {self.batch_size}")
        if not 0.0 <= self.composite_fraction <= 1.0:
            raise ValueError(f"composite_fraction must lie in [0, 1], got {self.composite_fraction}")
        if self.composite_mode not in ("offline", "online"):
            raise ValueError(f"composite_mode must be offline or online, got {self.composite_mode!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        bad = set(self.drop) - {"reflection", "moire", "boundary"}
        if bad:
            raise ValueError(f"only reflection, moire and boundary can be dropped, got {sorted(bad)}")

    def model_config(self) -> BackboneConfig:
        return BackboneConfig.preset(desk_scale=self.desk_scale, drop=self.drop)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = {"mu": self.weights.mu, "lambda": self.weights.lam}
        d["drop"] = list(self.drop)
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainConfig":
        d = dict(d or {})
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    model: MEGCNet
    history: list[dict]
    checkpoint: Path | None
    digest: str | None


def images_to_tensor(samples: Sequence[FaceSample]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32)).permute(0, 3, 1, 2).contiguous()


def batch_targets(samples: Sequence[FaceSample], source: SupervisionSource):
    bundles = [source.bundle(s) for s in samples]
    gts = {c: torch.from_numpy(np.stack([b.maps()[c] for b in bundles])) for c in CUES}
    valid = {c: torch.tensor([getattr(b.validity, c) for b in bundles]) for c in CUES}
    labels = torch.tensor([s.label_index for s in samples])
    return labels, gts, valid, bundles


def check_batch_rules(samples: Sequence[FaceSample], bundles) -> None:
    """Per-step guards: class balance and the cue validity rules."""
    n_live = sum(s.is_live for s in samples)
    if 2 * n_live != len(samples):
        raise TrainingError(f"unbalanced batch: {n_live} live of {len(samples)}")
    for s, b in zip(samples, bundles):
        if b.validity != validity_for(s.label, s.spoof_type, s.source_spoof_type):
            raise TrainingError(f"validity mismatch for {s.source_id}")
        if s.is_live and (b.moire_gt.max() > 0 or b.boundary_gt.max() > 0 or b.reflection_gt.max() > 0):
            raise TrainingError(f"live sample {s.source_id} has a nonzero spoof-cue map")
        replay_like = s.spoof_type == "replay" or (s.spoof_type == "composite" and s.source_spoof_type == "replay")
        if not s.is_live and not replay_like and b.validity.moire:
            raise TrainingError(f"non-replay spoof {s.source_id} would train the moire branch")


class Trainer:
    def __init__(
        self,
        index: CorpusIndex,
        source: SupervisionSource,
        config: TrainConfig,
        run_dir: str | Path | None = None,
        cache: SampleCache | None = None,
    ):
        self.config = config
        # a dropped cue has no branch and no loss term, so it needs no real maps
        dropped = {c: zero_map for c in config.drop}
        self.source = source.with_providers(**dropped) if dropped else source
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.cache = cache or SampleCache(index, workers=config.workers)
        composites = [r for r in index.samples if r.spoof_type == "composite"]
        self.index = index.subset([r for r in index.samples if r.spoof_type != "composite"])
        if not self.index.by_label("live") or not self.index.by_label("spoof"):
            raise TrainingError(f"training corpus needs live and spoof samples, got {self.index.counts()}")
        self.steps_per_epoch = len(balanced_batch_records(self.index, config.batch_size, config.seed, 0))
        self.total_steps = config.steps if config.steps is not None else config.epochs * self.steps_per_epoch

        torch.manual_seed(config.seed)
        self.model = build_megc(config.model_config())
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
        total = max(1, self.total_steps)
        if config.lr_schedule == "cosine":
            fn = lambda step: 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))
        else:
            fn = lambda step: 1.0
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(self.optimizer, fn)
        self.step = 0
        self.history: list[dict] = []
        self._epoch_batches: dict[int, list[list[CorpusRecord]]] = {}
        self.pool = self._build_pool(composites)
        self._resolve_supervision()

    # -- data --------------------------------------------------------------

    def _build_pool(self, composite_records: list[CorpusRecord]) -> list[FaceSample]:
        cfg = self.config
        if cfg.composite_fraction == 0 or "boundary" in cfg.drop:
            return []
        if composite_records:
            return [self.cache.get(r) for r in composite_records]
        if cfg.composite_mode == "online":
            return []
        rng = np.random.default_rng([cfg.seed, 2])
        live, spoof = self.index.by_label("live"), self.index.by_label("spoof")
        pool = []
        for k in range(cfg.composite_pool):
            comp = self._make_composite(live, spoof, rng, f"pool_{k:04d}")
            pool.append(comp)
        return pool

    def _make_composite(self, live, spoof, rng, sid: str) -> FaceSample:
        lv = self.cache.get(live[int(rng.integers(len(live)))])
        sp = self.cache.get(spoof[int(rng.integers(len(spoof)))])
        comp, _ = composite_boundary(lv, sp, random_paste_geometry(rng))
        comp.source_id = sid
        if validity_for(comp.label, comp.spoof_type, comp.source_spoof_type).moire and "moire" not in self.config.drop:
            try:
                src_map = self.source.bundle(sp).moire_gt
            except CueError as e:
                raise TrainingError(f"unresolved supervision: {e}") from e
            comp.moire_gt = inherit_moire(src_map, sp.crop_box, comp.paste_rect)
        return comp

    def _resolve_supervision(self) -> None:
        try:
            for r in self.index.samples:
                self.source.bundle(self.cache.get(r))
            for s in self.pool:
                self.source.bundle(s)
        except CueError as e:
            raise TrainingError(f"unresolved supervision: {e}") from e

    def batch_at(self, step: int) -> list[FaceSample]:
        cfg = self.config
        epoch, b = divmod(step, self.steps_per_epoch)
        if epoch not in self._epoch_batches:
            self._epoch_batches = {epoch: balanced_batch_records(self.index, cfg.batch_size, cfg.seed, epoch)}
        samples = self.cache.get_many(self._epoch_batches[epoch][b])
        half = cfg.batch_size // 2
        n_comp = int(round(cfg.composite_fraction * half))
        online = cfg.composite_mode == "online" and not self.pool
        if n_comp and (self.pool or online) and "boundary" not in cfg.drop:
            rng = np.random.default_rng([cfg.seed, 1, step])
            slots = half + rng.choice(half, size=n_comp, replace=False)
            for j, slot in enumerate(sorted(slots)):
                if online:
                    live, spoof = self.index.by_label("live"), self.index.by_label("spoof")
                    samples[slot] = self._make_composite(live, spoof, rng, f"online_s{step}_{j}")
                else:
                    samples[slot] = self.pool[int(rng.integers(len(self.pool)))]
        return samples

    # -- optimisation ------------------------------------------------------

    def losses(self, samples: Sequence[FaceSample]) -> tuple[LossBreakdown, torch.Tensor, torch.Tensor]:
        labels, gts, valid, bundles = batch_targets(samples, self.source)
        check_batch_rules(samples, bundles)
        logits, maps = self.model(images_to_tensor(samples))
        cfg = self.config
        breakdown = compute_losses(logits, labels, maps, gts, valid, cfg.weights, cfg.pixel_mean, cfg.normalize_by_valid)
        return breakdown, logits, labels

    def train_step(self) -> dict:
        samples = self.batch_at(self.step)
        self.model.train()
        breakdown, logits, labels = self.losses(samples)
        if not torch.isfinite(breakdown.l_overall):
            self._dump_nan(samples, breakdown)
        self.optimizer.zero_grad()
        breakdown.l_overall.backward()
        self.optimizer.step()
        lr = self.optimizer.param_groups[0]["lr"]
        self.scheduler.step()
        acc = float((logits.argmax(1) == labels).float().mean())
        rec = {"step": self.step, "epoch": self.step // self.steps_per_epoch, "lr": lr, **breakdown.as_record(), "acc": acc}
        self.history.append(rec)
        self.step += 1
        if self.run_dir is not None:
            with (self.run_dir / "train_log.jsonl").open("a") as f:
                f.write(json.dumps(rec) + "\n")
        return rec

    def _dump_nan(self, samples, breakdown) -> None:
        dump = {"step": self.step, "batch": [s.source_id for s in samples], "losses": breakdown.as_record()}
        if self.run_dir is not None:
            (self.run_dir / "nan_dump.json").write_text(json.dumps(dump, indent=2))
        raise FloatingPointError(f"non-finite loss at step {self.step}; batch ids {dump['batch']}")

    def run(self, stop_after: int | None = None) -> TrainResult:
        """Train up to the configured total, or until ``stop_after`` total steps."""
        end = self.total_steps if stop_after is None else min(stop_after, self.total_steps)
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            if self.step == 0:
                # a fresh run replaces any log left by an earlier one
                (self.run_dir / "train_log.jsonl").unlink(missing_ok=True)
        ckpt, digest = None, None
        while self.step < end:
            self.train_step()
            if self.step % self.steps_per_epoch == 0 or self.step == end:
                ckpt, digest = self.save()
        if ckpt is None and self.run_dir is not None:
            ckpt, digest = self.save()
        return TrainResult(self.model, self.history, ckpt, digest)

    # -- checkpoints -------------------------------------------------------

    def save(self, path: str | Path | None = None) -> tuple[Path | None, str | None]:
        if path is None:
            if self.run_dir is None:
                return None, None
            if self.config.keep_epoch_checkpoints:
                epoch = (self.step - 1) // self.steps_per_epoch
                self._write(self.run_dir / f"ckpt_epoch{epoch:04d}.pt")
            path = self.run_dir / "last.pt"
        path = Path(path)
        return path, self._write(path)

    def _write(self, path: Path) -> str:
        return save_checkpoint(
            path,
            "megc",
            self.model,
            self.model.cfg.to_dict(),
            train_config=self.config.to_dict(),
            optimizer=self.optimizer.state_dict(),
            scheduler=self.scheduler.state_dict(),
            step=self.step,
            history=self.history,
        )

    def load_state(self, payload: dict) -> None:
        check_compatible(self.model, payload)
        self.model.load_state_dict(payload["state"])
        self.optimizer.load_state_dict(payload["optimizer"])
        self.scheduler.load_state_dict(payload["scheduler"])
        self.step = int(payload["step"])
        self.history = list(payload["history"])


def train_megc(
    index: CorpusIndex,
    source: SupervisionSource,
    config: TrainConfig,
    run_dir: str | Path | None = None,
    stop_after: int | None = None,
    cache: SampleCache | None = None,
) -> TrainResult:
    trainer = Trainer(index, source, config, run_dir, cache)
    return trainer.run(stop_after)


def resume(
    checkpoint: str | Path,
    index: CorpusIndex,
    source: SupervisionSource,
    config: TrainConfig,
    run_dir: str | Path | None = None,
    stop_after: int | None = None,
    cache: SampleCache | None = None,
) -> TrainResult:
    """Continue a run from ``checkpoint``; model and optimizer state are restored, history appends."""
    payload = load_checkpoint(checkpoint, kind="megc")
    trainer = Trainer(index, source, config, run_dir, cache)
    trainer.load_state(payload)
    return trainer.run(stop_after)


def load_model(checkpoint: str | Path) -> MEGCNet:
    payload = load_checkpoint(checkpoint, kind="megc")
    model = MEGCNet(BackboneConfig.from_dict(payload["config"]))
    check_compatible(model, payload)
    model.load_state_dict(payload["state"])
    model.eval()
    return model


@torch.no_grad()
def train_accuracy(model: MEGCNet, samples: Sequence[FaceSample], batch_size: int = 8) -> float:
    model.eval()
    correct = 0
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        logits = model(images_to_tensor(chunk))[0]
        labels = torch.tensor([s.label_index for s in chunk])
        correct += int((logits.argmax(1) == labels).sum())
    return correct / len(samples)


def smoothed(values: Sequence[float], window: int = 10) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v.copy()
    return np.convolve(v, np.ones(window) / window, mode="valid")
