"""UNet and DeepLabv3 networks with segmentation and binary-classification heads."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ValidationError

ARCHS = ("unet", "deeplabv3")
TASKS = ("classify", "segment")
SEGMENT_CLASSES = ("background", "tumor", "edema", "healthy")


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "unet"
    task: str = "segment"
    in_channels: int = 1
    base_channels: int = 32
    depth: int = 4
    num_classes: int | None = None  # 1 for classify, 4 for segment
    atrous_rates: tuple[int, ...] = (6, 12, 18)
    input_side: int = 256
    # residual blocks per backbone stage (DeepLabv3 only)
    backbone_blocks: tuple[int, ...] = (3, 4, 23, 3)

    def __post_init__(self):
        if self.num_classes is None:
            object.__setattr__(self, "num_classes", 1 if self.task == "classify" else len(SEGMENT_CLASSES))
        object.__setattr__(self, "atrous_rates", tuple(int(r) for r in self.atrous_rates))
        object.__setattr__(self, "backbone_blocks", tuple(int(b) for b in self.backbone_blocks))
        self.validate()

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise ConfigurationError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.task not in TASKS:
            raise ConfigurationError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.in_channels < 1 or self.base_channels < 1 or self.depth < 1:
            raise ConfigurationError("in_channels, base_channels and depth must be >= 1")
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")
        if self.task == "classify" and self.num_classes != 1:
            raise ConfigurationError("classify task emits exactly 1 logit (num_classes=1)")
        if any(b >= a for a, b in zip(self.atrous_rates[1:], self.atrous_rates)):
            raise ConfigurationError(f"atrous_rates must be strictly increasing, got {self.atrous_rates}")
        if self.arch == "unet" and self.input_side % (2 ** self.depth):
            raise ConfigurationError(
                f"input_side {self.input_side} not divisible by 2**depth = {2 ** self.depth}")
        if self.arch == "deeplabv3":
            if len(self.backbone_blocks) != 4 or min(self.backbone_blocks) < 1:
                raise ConfigurationError("backbone_blocks must list 4 positive block counts")
            if self.input_side % 16:
                raise ConfigurationError(f"input_side {self.input_side} not divisible by output stride 16")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        for key in ("atrous_rates", "backbone_blocks"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _init_weights(module: nn.Module) -> None:
    # fan-in scaled (He) init, zero biases
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class Net(nn.Module):
    """Common base: keeps the spec and the number of epochs trained so far."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.trained_epochs = 0


class DoubleConv(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.ReLU(inplace=True),
        )


class UNet(Net):
    def __init__(self, spec: ModelSpec):
        super().__init__(spec)
        widths = [spec.base_channels * 2 ** i for i in range(spec.depth + 1)]
        self.down = nn.ModuleList()
        cin = spec.in_channels
        for w in widths[:-1]:
            self.down.append(DoubleConv(cin, w))
            cin = w
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = DoubleConv(widths[-2], widths[-1])
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for w in reversed(widths[:-1]):
            self.up.append(nn.ConvTranspose2d(2 * w, w, 2, stride=2))
            self.dec.append(DoubleConv(2 * w, w))
        if spec.task == "segment":
            self.head = nn.Conv2d(widths[0], spec.num_classes, 1)
        else:
            self.head = nn.Linear(widths[0], 1)

    def forward(self, x):
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = dec(torch.cat([skip, up(x)], dim=1))
        if self.spec.task == "segment":
            return self.head(x)
        return self.head(x.mean(dim=(2, 3)))


class Bottleneck(nn.Module):
    """1x1 reduce, 3x3 (possibly atrous), 1x1 expand, plus shortcut."""

    expansion = 4

    def __init__(self, cin, width, stride=1, dilation=1):
        super().__init__()
        cout = width * self.expansion
        self.conv1 = nn.Conv2d(cin, width, 1)
        self.conv2 = nn.Conv2d(width, width, 3, stride=stride, padding=dilation, dilation=dilation)
        self.conv3 = nn.Conv2d(width, cout, 1)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride=stride)

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        out = self.conv3(F.relu(self.conv2(F.relu(self.conv1(x)))))
        return F.relu(out + identity)


class ASPP(nn.Module):
    def __init__(self, cin, cout, rates):
        super().__init__()
        self.branches = nn.ModuleList([nn.Conv2d(cin, cout, 1)])
        for r in rates:
            self.branches.append(nn.Conv2d(cin, cout, 3, padding=r, dilation=r))
        self.pool_conv = nn.Conv2d(cin, cout, 1)
        self.fuse = nn.Conv2d(cout * (len(rates) + 2), cout, 1)

    @property
    def num_branches(self) -> int:
        return len(self.branches) + 1

    def forward(self, x):
        outs = [F.relu(b(x)) for b in self.branches]
        pooled = F.relu(self.pool_conv(x.mean(dim=(2, 3), keepdim=True)))
        outs.append(pooled.expand(-1, -1, x.shape[2], x.shape[3]))
        return F.relu(self.fuse(torch.cat(outs, dim=1)))


class DeepLabV3(Net):
    """Residual backbone at output stride 16, ASPP, upsample, 1x1 classifier."""

    def __init__(self, spec: ModelSpec):
        super().__init__(spec)
        w = 2 * spec.base_channels
        aspp_ch = 8 * spec.base_channels
        # stride 4 after the stem
        self.stem = nn.Sequential(
            nn.Conv2d(spec.in_channels, w, 7, stride=2, padding=3),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        widths = [w, 2 * w, 4 * w, 8 * w]
        strides = [1, 2, 2, 1]
        dilations = [1, 1, 1, 2]
        stages = []
        cin = w
        for width, s, d, n in zip(widths, strides, dilations, spec.backbone_blocks):
            blocks = [Bottleneck(cin, width, stride=s, dilation=d)]
            cin = width * Bottleneck.expansion
            blocks += [Bottleneck(cin, width, dilation=d) for _ in range(n - 1)]
            stages.append(nn.Sequential(*blocks))
        self.backbone = nn.Sequential(*stages)
        self.aspp = ASPP(cin, aspp_ch, spec.atrous_rates)
        if spec.task == "segment":
            self.head = nn.Conv2d(aspp_ch, spec.num_classes, 1)
        else:
            self.head = nn.Linear(aspp_ch, 1)

    def forward(self, x):
        size = x.shape[2:]
        feats = self.aspp(self.backbone(self.stem(x)))
        if self.spec.task == "classify":
            return self.head(feats.mean(dim=(2, 3)))
        feats = F.interpolate(feats, size=size, mode="bilinear", align_corners=False)
        return self.head(feats)


def _seeded_build(cls, spec: ModelSpec, seed: int) -> Net:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = cls(spec)
        _init_weights(model)
    # no normalization layers: damp residual branches so activations stay O(1) with depth
    blocks = [m for m in model.modules() if isinstance(m, Bottleneck)]
    with torch.no_grad():
        for b in blocks:
            b.conv3.weight.mul_(len(blocks) ** -0.5)
    return model.eval()


def build_unet(spec: ModelSpec, seed: int = 0) -> UNet:
    if spec.arch != "unet":
        raise ConfigurationError(f"build_unet called with arch={spec.arch!r}")
    return _seeded_build(UNet, spec, seed)


def build_deeplabv3(spec: ModelSpec, seed: int = 0) -> DeepLabV3:
    if spec.arch != "deeplabv3":
        raise ConfigurationError(f"build_deeplabv3 called with arch={spec.arch!r}")
    if not spec.atrous_rates:
        raise ConfigurationError("atrous_rates must not be empty")
    return _seeded_build(DeepLabV3, spec, seed)


def build_model(spec: ModelSpec, seed: int = 0) -> Net:
    return build_unet(spec, seed) if spec.arch == "unet" else build_deeplabv3(spec, seed)


def expected_input_shape(model: Net, n: int) -> tuple[int, ...]:
    s = model.spec
    return (n, s.in_channels, s.input_side, s.input_side)


def check_batch(model: Net, batch: torch.Tensor) -> None:
    if batch.ndim != 4 or tuple(batch.shape[1:]) != expected_input_shape(model, 1)[1:]:
        raise ValidationError(
            f"batch shape mismatch: expected (N, {', '.join(map(str, expected_input_shape(model, 1)[1:]))}),"
            f" got {tuple(batch.shape)}")
    if not torch.isfinite(batch).all():
        raise ValidationError("batch contains non-finite values")


def forward(model: Net, batch) -> torch.Tensor:
    """Inference-mode logits: (N, 1) for classify, (N, C, S, S) for segment."""
    if isinstance(batch, np.ndarray):
        batch = torch.from_numpy(batch)
    dtype = next(model.parameters()).dtype
    batch = batch.to(dtype)
    check_batch(model, batch)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(batch)
    model.train(was_training)
    return out


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
