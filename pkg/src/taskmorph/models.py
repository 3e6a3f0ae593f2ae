"""Model construction: backbones with split points, per-task feature
transform modules with grouped crossed attention, task heads, and the
reconstruction decoder used by the attack harness.

All builders are plain functions returning torch modules; callers own
seeding (``torch.manual_seed``) and device placement.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import torch
from torch import nn

from .errors import ConfigurationError

_KNOWN_BLOCK_KINDS = ("conv",)


class Crossing(Enum):
    CROSS = "cross"
    STRAIGHT = "straight"


class TaskKind(Enum):
    CLASSIFICATION = "classification"
    SEGMENTATION = "segmentation"
    DENSE_REGRESSION = "dense_regression"


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    channels: int
    stride: int

    def __post_init__(self):
        if self.kind not in _KNOWN_BLOCK_KINDS:
            raise ConfigurationError(f"unknown block kind {self.kind!r}")
        if self.channels < 1 or self.stride < 1:
            raise ConfigurationError(f"channels and stride must be >= 1, got {self}")


@dataclass(frozen=True)
class BackboneSpec:
    blocks: tuple[BlockSpec, ...]
    split_index: int
    input_shape: tuple[int, int, int]

    def __post_init__(self):
        blocks = tuple(
            b if isinstance(b, BlockSpec) else BlockSpec(*b) for b in self.blocks
        )
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if len(self.blocks) < 2:
            raise ConfigurationError("backbone needs at least 2 blocks to split")
        if not 0 < self.split_index < len(self.blocks):
            raise ConfigurationError(
                f"split_index {self.split_index} outside valid range "
                f"[1, {len(self.blocks) - 1}]"
            )
        if len(self.input_shape) != 3:
            raise ConfigurationError(f"input_shape must be (C, H, W), got {self.input_shape}")

    def feature_shape(self, upto: int | None = None) -> tuple[int, int, int]:
        """Output shape after the first ``upto`` blocks (default: all)."""
        upto = len(self.blocks) if upto is None else upto
        _, h, w = self.input_shape
        ch = self.input_shape[0]
        for b in self.blocks[:upto]:
            h = (h + 2 - 3) // b.stride + 1
            w = (w + 2 - 3) // b.stride + 1
            ch = b.channels
        return (ch, h, w)

    @property
    def split_shape(self) -> tuple[int, int, int]:
        return self.feature_shape(self.split_index)


def _norm_groups(channels: int) -> int:
    for g in (8, 4):
        if channels % g == 0:
            return g
    return 1


def _conv_block(in_ch: int, out_ch: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1),
        nn.GroupNorm(_norm_groups(out_ch), out_ch),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    """Stack of conv-norm-rectifier blocks addressable by index."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        blocks = []
        in_ch = spec.input_shape[0]
        for b in spec.blocks:
            blocks.append(_conv_block(in_ch, b.channels, b.stride))
            in_ch = b.channels
        self.blocks = nn.ModuleList(blocks)
        self.out_channels = in_ch

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        return x


def build_backbone(spec: BackboneSpec) -> Backbone:
    return Backbone(spec)


def split_backbone(backbone: Backbone, split_index: int | None = None) -> tuple[nn.Sequential, nn.Sequential]:
    """Producer and consumer halves that share the backbone's block modules,
    so composing them is exactly the unsplit forward pass."""
    idx = backbone.spec.split_index if split_index is None else split_index
    n = len(backbone.blocks)
    if not 0 < idx < n:
        raise ConfigurationError(f"split_index {idx} outside valid range [1, {n - 1}]")
    producer = nn.Sequential(*list(backbone.blocks)[:idx])
    consumer = nn.Sequential(*list(backbone.blocks)[idx:])
    return producer, consumer


def build_split_backbone(spec: BackboneSpec) -> tuple[nn.Sequential, nn.Sequential]:
    return split_backbone(build_backbone(spec))


# ---------------------------------------------------------------------------
# grouped crossed-attention feature transform
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetamorphConfig:
    k: int = 2
    reduction_ratio: int = 4
    crossing: Crossing = Crossing.CROSS

    def __post_init__(self):
        if self.k < 1:
            raise ConfigurationError(f"k must be >= 1, got {self.k}")
        if self.reduction_ratio < 1:
            raise ConfigurationError(
                f"reduction_ratio must be >= 1, got {self.reduction_ratio}"
            )


class MetamorphModule(nn.Module):
    """Shape-preserving per-task feature transform.

    The input is split channel-wise into ``k`` groups. Each group produces a
    gating vector via global average pooling, a 1x1 convolution, a linear
    bottleneck with a rectifier, a linear expansion, and a sigmoid. Under
    CROSS the gate of group i scales group (i+1) mod k; under STRAIGHT each
    group gates itself. A final bare 1x1 convolution mixes the regrouped
    channels.
    """

    def __init__(self, channels: int, config: MetamorphConfig = MetamorphConfig()):
        super().__init__()
        if channels % config.k != 0:
            raise ConfigurationError(
                f"channel count {channels} not divisible by k={config.k}"
            )
        group = channels // config.k
        bottleneck = channels // (config.k * config.reduction_ratio)
        if bottleneck < 1:
            raise ConfigurationError(
                f"bottleneck width {channels}/({config.k}*{config.reduction_ratio}) < 1; "
                "lower reduction_ratio"
            )
        self.config = config
        self.channels = channels
        self.group = group
        self.squeeze = nn.ModuleList(
            nn.Conv2d(group, group, kernel_size=1) for _ in range(config.k)
        )
        self.reduce = nn.ModuleList(
            nn.Linear(group, bottleneck) for _ in range(config.k)
        )
        self.expand = nn.ModuleList(
            nn.Linear(bottleneck, group) for _ in range(config.k)
        )
        self.mix = nn.Conv2d(channels, channels, kernel_size=1)

    def attention(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Per-group gating vectors in (0, 1), shaped (N, channels/k)."""
        parts = torch.chunk(x, self.config.k, dim=1)
        gates = []
        for i, part in enumerate(parts):
            pooled = part.mean(dim=(2, 3), keepdim=True)
            squeezed = self.squeeze[i](pooled).flatten(1)
            hidden = torch.relu(self.reduce[i](squeezed))
            gates.append(torch.sigmoid(self.expand[i](hidden)))
        return gates

    def forward(self, x: torch.Tensor, attention_override=None) -> torch.Tensor:
        out, _, _ = self.forward_detailed(x, attention_override)
        return out

    def forward_detailed(
        self, x: torch.Tensor, attention_override=None
    ) -> tuple[torch.Tensor, torch.Tensor, list[torch.Tensor]]:
        """Forward pass exposing the pre-mix gated tensor and the gates.

        ``attention_override`` replaces computed gates per group; entries may
        be None (keep computed), a scalar, or a tensor broadcastable to
        (N, channels/k). Intended for ablation and unit checks.
        """
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        if x.shape[1] != self.channels:
            raise ConfigurationError(
                f"expected {self.channels} channels, got {x.shape[1]}"
            )
        parts = torch.chunk(x, self.config.k, dim=1)
        gates = self.attention(x)
        if attention_override is not None:
            if len(attention_override) != self.config.k:
                raise ConfigurationError(
                    f"attention_override needs {self.config.k} entries"
                )
            gates = [
                g if o is None else torch.as_tensor(o, dtype=x.dtype).expand_as(g)
                for g, o in zip(gates, attention_override)
            ]
        scaled = list(parts)
        for i, gate in enumerate(gates):
            target = (i + 1) % self.config.k if self.config.crossing is Crossing.CROSS else i
            scaled[target] = parts[target] * gate[:, :, None, None]
        gated = torch.cat(scaled, dim=1)
        out = self.mix(gated)
        if squeeze:
            return out[0], gated[0], gates
        return out, gated, gates


def build_metamorph(config: MetamorphConfig, channels: int) -> MetamorphModule:
    return MetamorphModule(channels, config)


# ---------------------------------------------------------------------------
# decoder and task heads
# ---------------------------------------------------------------------------


def _upsampling_stack(
    in_ch: int, in_spatial: tuple[int, int], out_spatial: tuple[int, int]
) -> tuple[list[nn.Module], int]:
    h, w = in_spatial
    out_h, out_w = out_spatial
    if h > out_h or w > out_w:
        raise ConfigurationError(
            f"feature spatial size {in_spatial} exceeds output {out_spatial}"
        )
    layers: list[nn.Module] = []
    ch = in_ch
    while h * 2 <= out_h and w * 2 <= out_w:
        next_ch = max(ch // 2, 16)
        layers.append(nn.Upsample(scale_factor=2, mode="nearest"))
        layers.append(nn.Conv2d(ch, next_ch, kernel_size=3, padding=1))
        layers.append(nn.GroupNorm(_norm_groups(next_ch), next_ch))
        layers.append(nn.ReLU(inplace=True))
        ch = next_ch
        h, w = h * 2, w * 2
    if (h, w) != (out_h, out_w):
        layers.append(nn.Upsample(size=(out_h, out_w), mode="nearest"))
    return layers, ch


def build_decoder(
    feature_shape: tuple[int, int, int], output_shape: tuple[int, int, int]
) -> nn.Sequential:
    """Upsampling network mapping feature maps back to image space.

    Used only by the reconstruction attack harness; the sigmoid keeps the
    output in the [0, 1] range of the synthetic images.
    """
    c, h, w = feature_shape
    out_c, out_h, out_w = output_shape
    layers, ch = _upsampling_stack(c, (h, w), (out_h, out_w))
    if not layers:
        mid = max(ch // 2, 16)
        layers = [
            nn.Conv2d(ch, mid, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
        ]
        ch = mid
    layers.append(nn.Conv2d(ch, out_c, kernel_size=3, padding=1))
    layers.append(nn.Sigmoid())
    return nn.Sequential(*layers)


class ClassificationHead(nn.Module):
    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(in_channels, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(x.mean(dim=(2, 3)))


class DenseHead(nn.Module):
    """Upsampling head emitting per-pixel outputs at the input resolution."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        feature_spatial: tuple[int, int],
        output_spatial: tuple[int, int],
        positive: bool = False,
    ):
        super().__init__()
        layers, ch = _upsampling_stack(in_channels, feature_spatial, output_spatial)
        layers.append(nn.Conv2d(ch, out_channels, kernel_size=3, padding=1))
        self.stack = nn.Sequential(*layers)
        self.positive = positive

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.stack(x)
        return nn.functional.softplus(out) if self.positive else out


def build_task_head(
    kind: TaskKind,
    in_channels: int,
    out_dim: int,
    feature_spatial: tuple[int, int] | None = None,
    output_spatial: tuple[int, int] | None = None,
) -> nn.Module:
    """Head for one task: ``out_dim`` is the class count for classification
    and segmentation, the channel count for dense regression."""
    if kind is TaskKind.CLASSIFICATION:
        return ClassificationHead(in_channels, out_dim)
    if feature_spatial is None or output_spatial is None:
        raise ConfigurationError(f"{kind.value} head needs feature and output spatial sizes")
    positive = kind is TaskKind.DENSE_REGRESSION
    return DenseHead(in_channels, out_dim, feature_spatial, output_spatial, positive)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_vector(module: nn.Module) -> torch.Tensor:
    """All parameters flattened into one detached float32 vector."""
    return torch.cat([p.detach().reshape(-1).to(torch.float32) for p in module.parameters()])
