"""Moire-map extraction: frozen demoire backbone, residual, adaptation and refinement convs."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import CROP_SIZE, FaceSample
from .cues import MAP_SIZE, composite_moire, random_grating_pair, synthesize_moire_pattern

log = logging.getLogger(__name__)


class IdentityDemoire(nn.Module):
    """demoire(x) = x; the residual is then identically zero."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x


class SmallDemoire(nn.Module):
    """Encoder-decoder with three downsampling stages predicting the moire layer to remove."""

    def __init__(self, width: int = 8):
        super().__init__()
        w = width
        self.enc = nn.ModuleList(
            [
                nn.Conv2d(3, w, 3, stride=2, padding=1),
                nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
                nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1),
            ]
        )
        self.dec = nn.ModuleList(
            [
                nn.Conv2d(4 * w, 2 * w, 3, padding=1),
                nn.Conv2d(2 * w, w, 3, padding=1),
                nn.Conv2d(w, w, 3, padding=1),
            ]
        )
        self.out = nn.Conv2d(w, 3, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        for conv in self.enc:
            h = F.relu(conv(h))
        for conv in self.dec:
            h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
            h = F.relu(conv(h))
        return x - self.out(h)


DEMOIRE_BACKBONES: dict[str, Callable[["MoireNetConfig"], nn.Module]] = {
    "identity": lambda cfg: IdentityDemoire(),
    "small": lambda cfg: SmallDemoire(cfg.backbone_width),
}


def register_backbone(name: str, factory: Callable[["MoireNetConfig"], nn.Module]) -> None:
    DEMOIRE_BACKBONES[name] = factory


@dataclass
class MoireNetConfig:
    demoire_backbone: str = "small"
    backbone_width: int = 8
    adapt_widths: tuple[int, int] = (8, 8)
    refine_width: int = 16
    freeze_backbone: bool = True
    output_size: int = MAP_SIZE
    # feed the downsampled input to the refinement stage next to the residual
    concat_input: bool = False

    def __post_init__(self):
        self.adapt_widths = tuple(int(w) for w in self.adapt_widths)
        if len(self.adapt_widths) != 2:
            raise ValueError("the adaptation stage has exactly two convolutions")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adapt_widths"] = list(self.adapt_widths)
        return d


class MoireNet(nn.Module):
    def __init__(self, cfg: MoireNetConfig):
        super().__init__()
        if cfg.demoire_backbone not in DEMOIRE_BACKBONES:
            raise KeyError(f"unknown demoire backbone {cfg.demoire_backbone!r}; known: {sorted(DEMOIRE_BACKBONES)}")
        self.cfg = cfg
        self.demoire = DEMOIRE_BACKBONES[cfg.demoire_backbone](cfg)
        a1, a2 = cfg.adapt_widths
        # bias-free so a zero residual stays zero; linear output keeps the residual's sign
        self.adapt = nn.Sequential(
            nn.Conv2d(3, a1, 3, padding=1, bias=False),
            nn.ReLU(),
            nn.Conv2d(a1, a2, 3, padding=1, bias=False),
        )
        rin = a2 + (6 if cfg.concat_input else 0)
        self.refine = nn.Sequential(
            nn.Conv2d(rin, cfg.refine_width, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(cfg.refine_width, 1, 3, padding=1),
        )
        self.set_frozen(cfg.freeze_backbone)

    def set_frozen(self, frozen: bool) -> None:
        self.cfg.freeze_backbone = frozen
        for p in self.demoire.parameters():
            p.requires_grad_(not frozen)

    def residual(self, x: torch.Tensor) -> torch.Tensor:
        rgb = x[:, :3]
        return rgb - self.demoire(rgb)

    def pre_refinement(self, x: torch.Tensor, residual: torch.Tensor | None = None) -> torch.Tensor:
        if residual is None:
            residual = self.residual(x)
        return F.adaptive_avg_pool2d(self.adapt(residual), self.cfg.output_size)

    def forward(self, x: torch.Tensor, residual: torch.Tensor | None = None) -> torch.Tensor:
        h = self.pre_refinement(x, residual)
        if self.cfg.concat_input:
            h = torch.cat([h, F.adaptive_avg_pool2d(x, self.cfg.output_size)], dim=1)
        return torch.sigmoid(self.refine(h)).squeeze(1)


def build_moire_net(cfg: MoireNetConfig | None = None, seed: int | None = None) -> MoireNet:
    if seed is not None:
        torch.manual_seed(seed)
    return MoireNet(cfg or MoireNetConfig())


def learnable_conv_count(net: MoireNet) -> dict[str, list[tuple[int, int]]]:
    """Kernel sizes of the convolutions in the adaptation and refinement stages."""
    return {
        stage: [m.kernel_size for m in getattr(net, stage).modules() if isinstance(m, nn.Conv2d)]
        for stage in ("adapt", "refine")
    }


# -- synthetic pairs --------------------------------------------------------


@dataclass
class MoirePair:
    image: np.ndarray  # 256x256x6
    moire_gt: np.ndarray  # 32x32
    clean_rgb: np.ndarray  # 256x256x3, the image before blending


def make_moire_pairs(
    live: Sequence[FaceSample],
    n: int,
    seed: int = 0,
    alpha: float = 0.3,
    clean_fraction: float = 0.25,
) -> list[MoirePair]:
    """Blend random grating-pair moire into live crops; a fraction stay clean with a zero map."""
    if not live:
        raise ValueError("need at least one live sample to build moire pairs")
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        s = live[int(rng.integers(len(live)))]
        if rng.random() < clean_fraction:
            pairs.append(MoirePair(s.image.copy(), np.zeros((MAP_SIZE, MAP_SIZE), np.float32), s.rgb.copy()))
            continue
        a, b = random_grating_pair(rng)
        pattern = synthesize_moire_pattern(a, b, s.image.shape[:2])
        image, gt = composite_moire(s, pattern, alpha)
        pairs.append(MoirePair(image, gt, s.rgb.copy()))
    return pairs


def _to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(images).astype(np.float32)).permute(0, 3, 1, 2).contiguous()


def _batches(n: int, batch_size: int, steps: int, rng: np.random.Generator):
    order = np.array([], dtype=int)
    for _ in range(steps):
        if len(order) < batch_size:
            order = np.concatenate([order, rng.permutation(n)])
        idx, order = order[:batch_size], order[batch_size:]
        yield idx


def pretrain_demoire(
    net: MoireNet,
    pairs: Sequence[MoirePair],
    steps: int = 400,
    batch_size: int = 8,
    lr: float = 3e-3,
    seed: int = 0,
    patch: int | None = 128,
) -> list[float]:
    """Fit the demoire backbone to recover clean images, then freeze it.

    The backbone is fully convolutional, so it is fitted on random
    ``patch``-sized crops (whole images when ``patch`` is None).
    """
    if not pairs:
        raise ValueError("empty pair stream")
    params = list(net.demoire.parameters())
    if not params:
        net.set_frozen(True)
        return []
    net.set_frozen(False)
    torch.manual_seed(seed)
    opt = torch.optim.Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    history = []
    for idx in _batches(len(pairs), batch_size, steps, rng):
        xs, ys = [], []
        for i in idx:
            img, clean = pairs[i].image[..., :3], pairs[i].clean_rgb
            if patch is not None and patch < img.shape[0]:
                y0, x0 = rng.integers(0, img.shape[0] - patch + 1, size=2)
                img, clean = img[y0 : y0 + patch, x0 : x0 + patch], clean[y0 : y0 + patch, x0 : x0 + patch]
            xs.append(img)
            ys.append(clean)
        loss = F.mse_loss(net.demoire(_to_tensor(xs)), _to_tensor(ys))
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
    net.set_frozen(True)
    return history


def train_moire_net(
    net: MoireNet,
    pairs: Sequence[MoirePair],
    steps: int = 200,
    batch_size: int = 8,
    lr: float = 1e-3,
    seed: int = 0,
) -> list[float]:
    """Minimize per-pixel MSE between predicted and ground-truth 32x32 maps; returns loss history."""
    if not pairs:
        raise ValueError("empty pair stream")
    torch.manual_seed(seed)
    params = [p for p in net.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    residuals = None
    if net.cfg.freeze_backbone:
        # a frozen backbone makes each pair's residual a constant
        net.demoire.eval()
        with torch.no_grad():
            residuals = torch.cat([net.residual(_to_tensor([p.image])) for p in pairs])
    history = []
    for idx in _batches(len(pairs), batch_size, steps, rng):
        x = _to_tensor([pairs[i].image for i in idx])
        y = torch.from_numpy(np.stack([pairs[i].moire_gt for i in idx]))
        res = residuals[torch.from_numpy(idx)] if residuals is not None else None
        loss = F.mse_loss(net(x, res), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
    log.info("moire net: loss %.4f -> %.4f over %d steps", history[0], history[-1], len(history))
    return history


@torch.no_grad()
def extract_moire_map(net: MoireNet, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.shape != (CROP_SIZE, CROP_SIZE, 6):
        raise ValueError(f"expected a {CROP_SIZE}x{CROP_SIZE}x6 crop, got {image.shape}")
    net.eval()
    out = net(_to_tensor([image]))[0]
    return out.clamp(0.0, 1.0).numpy().astype(np.float32)


class MoireNetProvider:
    """Map provider labelling spoof crops with a trained moire net."""

    def __init__(self, net: MoireNet):
        self.net = net

    def __call__(self, sample: FaceSample) -> np.ndarray:
        return extract_moire_map(self.net, sample.image)
