"""The multi-cue network: shared backbone, four map branches, fusion, classifier."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .losses import AUX_CUES

SPOOF_CUES = ("reflection", "moire", "boundary")
STAGES = ("conv1", "conv2", "conv3", "conv4", "conv5", "conv6")
STAGE_STRIDES = (2, 2, 1, 2, 2, 2)

# Stage widths follow the 128/196/128 pattern of the reference backbone; the
# widths the figure leaves unreadable are defaults.
FULL_WIDTHS = (64, 128, 128, 196, 128, 128)


@dataclass
class BackboneConfig:
    widths: tuple[int, ...] = FULL_WIDTHS
    convs_per_stage: int = 2
    in_channels: int = 6
    input_size: int = 256
    mafe_size: int = 64
    map_size: int = 32
    mfe_size: int = 16
    branch_width: int = 64
    classifier_width: int = 128
    cues: tuple[str, ...] = AUX_CUES
    desk_scale: bool = False

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.cues = tuple(self.cues)
        if len(self.widths) != len(STAGES):
            raise ValueError(f"need {len(STAGES)} stage widths, got {len(self.widths)}")
        if "depth" not in self.cues:
            raise ValueError("the depth branch cannot be removed; it anchors the fusion")
        unknown = set(self.cues) - set(AUX_CUES)
        if unknown:
            raise ValueError(f"unknown cues {sorted(unknown)}")
        # keep canonical order so parameter names do not depend on the caller
        self.cues = tuple(c for c in AUX_CUES if c in self.cues)
        if self.mafe_size % self.map_size:
            raise ValueError("mafe_size must be a multiple of map_size")

    @classmethod
    def preset(cls, desk_scale: bool = True, drop: tuple[str, ...] | list[str] = (), **overrides) -> "BackboneConfig":
        if desk_scale:
            base = dict(
                widths=tuple(max(1, w // 4) for w in FULL_WIDTHS),
                convs_per_stage=1,
                branch_width=16,
                classifier_width=32,
                desk_scale=True,
            )
        else:
            base = {}
        base["cues"] = tuple(c for c in AUX_CUES if c not in set(drop))
        base.update(overrides)
        return cls(**base)

    @classmethod
    def tiny(cls, **overrides) -> "BackboneConfig":
        """8x8 input and 2-channel stages, for finite-difference checks."""
        base = dict(
            widths=(2,) * 6,
            convs_per_stage=1,
            input_size=8,
            mafe_size=8,
            map_size=4,
            mfe_size=2,
            branch_width=2,
            classifier_width=2,
            desk_scale=True,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["cues"] = list(self.cues)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)


def conv_bn_relu(cin: int, cout: int, stride: int = 1) -> list[nn.Module]:
    return [nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU()]


def _stage(cin: int, cout: int, stride: int, n: int) -> nn.Sequential:
    layers = conv_bn_relu(cin, cout, stride)
    for _ in range(n - 1):
        layers += conv_bn_relu(cout, cout)
    return nn.Sequential(*layers)


def resize(x: torch.Tensor, size: int) -> torch.Tensor:
    if x.shape[-1] == size and x.shape[-2] == size:
        return x
    return F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cin = cfg.in_channels
        for name, w, s in zip(STAGES, cfg.widths, STAGE_STRIDES):
            self.add_module(name, _stage(cin, w, s, cfg.convs_per_stage))
            cin = w

    def forward(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        feats = {}
        for name in STAGES:
            x = getattr(self, name)(x)
            feats[name] = x
        return {k: feats[k] for k in ("conv3", "conv4", "conv5", "conv6")}


class CueBranch(nn.Module):
    """Feature extractor (feeds fusion) followed by a map head (feeds only the loss)."""

    def __init__(self, cin: int, width: int, stride: int):
        super().__init__()
        self.extractor = nn.Sequential(*conv_bn_relu(cin, width, stride), *conv_bn_relu(width, width))
        self.head = nn.Conv2d(width, 1, 3, padding=1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feat = self.extractor(x)
        return feat, torch.sigmoid(self.head(feat)).squeeze(1)


class MEGCNet(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        w = dict(zip(STAGES, cfg.widths))
        self.backbone = Backbone(cfg)
        self.mafe_channels = w["conv3"] + w["conv4"] + w["conv5"]
        stride = cfg.mafe_size // cfg.map_size
        self.branches = nn.ModuleDict({c: CueBranch(self.mafe_channels, cfg.branch_width, stride) for c in cfg.cues})
        spoof_cues = [c for c in SPOOF_CUES if c in cfg.cues]
        self.spoof_proj = nn.Conv2d(len(spoof_cues) * cfg.branch_width, cfg.branch_width, 1, bias=False) if spoof_cues else None
        self.mfe_channels = cfg.branch_width + w["conv3"] + w["conv4"] + w["conv5"] + w["conv6"]
        cw = cfg.classifier_width
        self.classifier = nn.Sequential(
            *conv_bn_relu(self.mfe_channels, cw),
            *conv_bn_relu(cw, cw, stride=2),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(cw, 2),
        )

    @property
    def cues(self) -> tuple[str, ...]:
        return self.cfg.cues

    def check_input(self, x: torch.Tensor) -> None:
        s, c = self.cfg.input_size, self.cfg.in_channels
        if x.ndim != 4 or x.shape[1] != c or x.shape[2] != s or x.shape[3] != s:
            raise ValueError(f"expected input (N, {c}, {s}, {s}), got {tuple(x.shape)}")

    def backbone_forward(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        self.check_input(x)
        return self.backbone(x)

    def mafe_forward(self, feats: dict[str, torch.Tensor]) -> tuple[dict[str, torch.Tensor], dict[str, torch.Tensor]]:
        """Returns (32x32 maps, branch features) keyed by cue."""
        missing = [k for k in ("conv3", "conv4", "conv5") if k not in feats]
        if missing:
            raise ValueError(f"missing backbone stages {missing}")
        s = self.cfg.mafe_size
        x = torch.cat([resize(feats[k], s) for k in ("conv3", "conv4", "conv5")], dim=1)
        maps, aux = {}, {}
        for cue, branch in self.branches.items():
            aux[cue], maps[cue] = branch(x)
        return maps, aux

    def spoof_features(self, aux: dict[str, torch.Tensor]) -> torch.Tensor | None:
        if self.spoof_proj is None:
            return None
        s = self.cfg.mfe_size
        x = torch.cat([resize(aux[c], s) for c in SPOOF_CUES if c in self.cues], dim=1)
        return self.spoof_proj(x)

    def mfe_forward(self, feats: dict[str, torch.Tensor], aux: dict[str, torch.Tensor]) -> torch.Tensor:
        s = self.cfg.mfe_size
        depth = resize(aux["depth"], s)
        spoof = self.spoof_features(aux)
        if spoof is not None:
            if spoof.shape != depth.shape:
                raise ValueError(f"spoofing features {tuple(spoof.shape)} do not match depth {tuple(depth.shape)}")
            diff = depth - spoof
        else:
            diff = depth
        backbone = [resize(feats[k], s) for k in ("conv3", "conv4", "conv5", "conv6")]
        return torch.cat([diff] + backbone, dim=1)

    def classify(self, fused: torch.Tensor) -> torch.Tensor:
        return self.classifier(fused)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
        feats = self.backbone_forward(x)
        maps, aux = self.mafe_forward(feats)
        logits = self.classify(self.mfe_forward(feats, aux))
        return logits, maps

    def head_parameters(self, cue: str) -> list[nn.Parameter]:
        """Parameters of a branch's map-output layer, which only the map loss reaches."""
        return list(self.branches[cue].head.parameters())

    def summary(self, batch: int = 1) -> list[tuple[str, tuple[int, ...], int]]:
        """(name, output shape, parameter count) per stage on a dummy input."""
        x = torch.zeros(batch, self.cfg.in_channels, self.cfg.input_size, self.cfg.input_size)
        rows = []
        with torch.no_grad():
            h = x
            for name in STAGES:
                mod = getattr(self.backbone, name)
                h = mod(h)
                rows.append((f"backbone.{name}", tuple(h.shape), n_params(mod)))
            feats = self.backbone(x)
            maps, aux = self.mafe_forward(feats)
            for cue in self.cues:
                rows.append((f"branches.{cue}", tuple(maps[cue].shape), n_params(self.branches[cue])))
            fused = self.mfe_forward(feats, aux)
            proj = n_params(self.spoof_proj) if self.spoof_proj is not None else 0
            rows.append(("mfe", tuple(fused.shape), proj))
            rows.append(("classifier", tuple(self.classify(fused).shape), n_params(self.classifier)))
        return rows


def n_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def stage_widths(model: MEGCNet) -> dict[str, int]:
    """Output channels of every backbone stage, read off the modules themselves."""
    out = {}
    for name in STAGES:
        convs = [m for m in getattr(model.backbone, name).modules() if isinstance(m, nn.Conv2d)]
        out[name] = convs[-1].out_channels
    return out


def build_megc(cfg: BackboneConfig, seed: int | None = None) -> MEGCNet:
    if seed is not None:
        torch.manual_seed(seed)
    return MEGCNet(cfg)
