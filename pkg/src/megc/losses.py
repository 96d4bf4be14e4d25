"""Auxiliary map losses, the binary classification loss and the weighted total."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

AUX_CUES = ("depth", "reflection", "moire", "boundary")


@dataclass(frozen=True)
class LossWeights:
    mu: float = 10.0
    lam: float = 0.1

    def __post_init__(self):
        if self.mu < 0 or self.lam < 0:
            raise ValueError(f"loss weights must be non-negative, got mu={self.mu}, lambda={self.lam}")

    @classmethod
    def from_dict(cls, d: dict | None) -> "LossWeights":
        d = d or {}
        return cls(mu=float(d.get("mu", 10.0)), lam=float(d.get("lambda", d.get("lam", 0.1))))


def map_mse_loss(
    pred: torch.Tensor,
    gt: torch.Tensor,
    validity: torch.Tensor,
    pixel_mean: bool = False,
    normalize_by_valid: bool = False,
) -> torch.Tensor:
    """(1/N) * sum over valid i of ||pred_i - gt_i||^2, the norm summing all pixels.

    Masked samples contribute nothing to the value or the gradient; N stays the
    full batch size unless ``normalize_by_valid``. With no valid sample the
    result is an exact zero that is still attached to ``pred``.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {tuple(pred.shape)} != gt shape {tuple(gt.shape)}")
    validity = torch.as_tensor(validity, dtype=torch.bool, device=pred.device)
    n = pred.shape[0]
    if validity.shape != (n,) or n < 1:
        raise ValueError(f"validity shape {tuple(validity.shape)} does not match batch size {n}")
    sq = (pred - gt).pow(2).flatten(1)
    per_sample = sq.mean(1) if pixel_mean else sq.sum(1)
    per_sample = torch.where(validity, per_sample, torch.zeros_like(per_sample))
    denom = n
    if normalize_by_valid:
        denom = max(int(validity.sum()), 1)
    return per_sample.sum() / denom


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy; label 0 = live, 1 = spoof."""
    if logits.ndim != 2 or logits.shape[1] != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"expected logits (N, 2) and labels (N,), got {tuple(logits.shape)}, {tuple(labels.shape)}")
    if logits.shape[0] == 0:
        raise ValueError("empty batch")
    return F.cross_entropy(logits, labels.long())


@dataclass
class LossBreakdown:
    """Per-component losses; absent components (ablated cues) are None."""

    l_cls: torch.Tensor | float
    l_d: torch.Tensor | float | None
    l_r: torch.Tensor | float | None
    l_m: torch.Tensor | float | None
    l_b: torch.Tensor | float | None
    l_overall: torch.Tensor | float
    counts: dict[str, int] = field(default_factory=dict)

    def aux_sum(self):
        total = 0.0
        for v in (self.l_d, self.l_r, self.l_b, self.l_m):
            if v is not None:
                total = total + v
        return total

    def as_record(self) -> dict:
        def f(v):
            if v is None:
                return None
            return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)

        rec = {k: f(getattr(self, k)) for k in ("l_cls", "l_d", "l_r", "l_m", "l_b", "l_overall")}
        rec["counts"] = dict(self.counts)
        return rec


def overall_loss(
    l_cls,
    l_d=None,
    l_r=None,
    l_m=None,
    l_b=None,
    weights: LossWeights = LossWeights(),
    counts: dict[str, int] | None = None,
) -> LossBreakdown:
    """mu * l_cls + lambda * (l_d + l_r + l_b + l_m); None terms are absent."""
    aux = 0.0
    for v in (l_d, l_r, l_b, l_m):
        if v is not None:
            aux = aux + v
    total = weights.mu * l_cls + weights.lam * aux
    return LossBreakdown(l_cls, l_d, l_r, l_m, l_b, total, dict(counts or {}))


def compute_losses(
    logits: torch.Tensor,
    labels: torch.Tensor,
    preds: dict[str, torch.Tensor],
    gts: dict[str, torch.Tensor],
    valid: dict[str, torch.Tensor],
    weights: LossWeights = LossWeights(),
    pixel_mean: bool = False,
    normalize_by_valid: bool = False,
) -> LossBreakdown:
    """Full objective for one batch. Cues missing from ``preds`` are treated as ablated."""
    terms = {}
    counts = {}
    for cue in AUX_CUES:
        if cue not in preds:
            terms[cue] = None
            continue
        terms[cue] = map_mse_loss(preds[cue], gts[cue], valid[cue], pixel_mean, normalize_by_valid)
        counts[cue] = int(torch.as_tensor(valid[cue]).sum())
    return overall_loss(
        classification_loss(logits, labels),
        terms["depth"],
        terms["reflection"],
        terms["moire"],
        terms["boundary"],
        weights,
        counts,
    )
