"""Multi-scale convolution with kernels shared across resized copies of the input."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import BatchNorm2D, Conv2D, Module, bilinear_resize, channel_scale, resize_extent
from .tensor import Parameter, Tensor, concat, relu

DEFAULT_SCALES = ((0.5, 0.5), (0.75, 0.75), (1.0, 1.0))
DEFAULT_KERNEL_GROUPS = ((2, 8), (3, 10))


@dataclass(frozen=True)
class MSConvConfig:
    scales: tuple = DEFAULT_SCALES
    kernel_groups: tuple = DEFAULT_KERNEL_GROUPS
    use_norm: bool = True
    use_scale_weights: bool = True

    def __post_init__(self):
        scales = tuple(_as_pair(s) for s in self.scales)
        groups = tuple((int(k), int(c)) for k, c in self.kernel_groups)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "kernel_groups", groups)
        if not scales:
            raise ValueError("MSConvConfig: at least one scale is required")
        for h, w in scales:
            if h != w:
                raise ValueError(f"MSConvConfig: anisotropic scale ({h}, {w}) is not supported")
            if not 0.25 <= h <= 2.0:
                raise ValueError(f"MSConvConfig: scale {h} outside [1/4, 2]")
        if not groups or any(k < 1 or c < 1 for k, c in groups):
            raise ValueError(f"MSConvConfig: invalid kernel groups {groups}")

    @property
    def channels(self) -> int:
        return sum(c for _, c in self.kernel_groups)


def _as_pair(s):
    if isinstance(s, (int, float)):
        return (float(s), float(s))
    h, w = s
    return (float(h), float(w))


def receptive_field_count(config: MSConvConfig) -> int:
    """Distinct receptive fields: one per (scale, kernel size) pair."""
    return len(config.scales) * len(config.kernel_groups)


class MSConvLayer(Module):
    """Resize -> shared conv -> per-scale batch norm -> scalar weight -> relu.

    Output channels of all kernel groups are concatenated in group order.
    Group ``k`` uses padding ``(k - 1) // 2``; when kernel sizes of mixed
    parity give extents that differ by one, trailing rows and columns are
    cropped to the smallest extent before concatenation.
    """

    def __init__(self, in_channels: int, config: MSConvConfig, rng: np.random.Generator):
        self.config = config
        self.kernels = [Conv2D(in_channels, c, k, rng, padding=(k - 1) // 2, bias=not config.use_norm)
                        for k, c in config.kernel_groups]
        n, m = config.channels, len(config.scales)
        self.norms = [BatchNorm2D(n) for _ in range(m)] if config.use_norm else []
        self.scale_weights = Parameter(np.ones((m, n))) if config.use_scale_weights else None

    @property
    def channels(self) -> int:
        return self.config.channels

    def output_extent(self, h: int, w: int, scale) -> tuple[int, int]:
        rh, rw = resize_extent(h, scale[0]), resize_extent(w, scale[1])
        sizes = [(rh + 2 * ((k - 1) // 2) - k + 1, rw + 2 * ((k - 1) // 2) - k + 1)
                 for k, _ in self.config.kernel_groups]
        return min(s[0] for s in sizes), min(s[1] for s in sizes)

    def __call__(self, x: Tensor) -> list[Tensor]:
        _, _, h, w = x.shape
        kmax = max(k for k, _ in self.config.kernel_groups)
        outs = []
        for i, sc in enumerate(self.config.scales):
            rh, rw = resize_extent(h, sc[0]), resize_extent(w, sc[1])
            if min(rh, rw) < kmax:
                raise ValueError(f"msconv: scale {sc[0]} resizes {h}x{w} to {rh}x{rw}, "
                                 f"smaller than kernel size {kmax}")
            xr = x if sc == (1.0, 1.0) else bilinear_resize(x, sc[0], sc[1])
            oh, ow = self.output_extent(h, w, sc)
            parts = []
            for conv in self.kernels:
                y = conv(xr)
                if y.shape[2] != oh or y.shape[3] != ow:
                    y = y[:, :, :oh, :ow]
                parts.append(y)
            y = parts[0] if len(parts) == 1 else concat(parts, axis=1)
            if self.norms:
                y = self.norms[i](y)
            if self.scale_weights is not None:
                y = channel_scale(y, self.scale_weights[i])
            outs.append(relu(y))
        return outs

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())


def expected_parameter_count(in_channels: int, config: MSConvConfig) -> int:
    """Closed-form count used to audit :class:`MSConvLayer`."""
    n, m = config.channels, len(config.scales)
    total = sum(k * k * in_channels * c + (0 if config.use_norm else c) for k, c in config.kernel_groups)
    if config.use_norm:
        total += 2 * m * n
    if config.use_scale_weights:
        total += m * n
    return total
