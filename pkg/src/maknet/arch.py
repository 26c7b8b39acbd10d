"""MAKNet architecture: mixed-asymmetric-kernel convolutions, mixed pooling,
global concatenate pooling, channel/spatial attention, score propagation,
densely connected blocks, and builders for the full network plus a matched
plain-convolution twin for parameter comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as F
from .nn import (
    BatchNorm2d,
    Conv2d,
    Dropout,
    Linear,
    Mish,
    Module,
    ModuleList,
    Parameter,
)
from .tensor import ShapeError, Tensor
from .tensor import _accum, _col2im, _im2col, _pad_nchw, _result

__all__ = [
    "MakConvSpec",
    "DenseBlockSpec",
    "ModelConfig",
    "MakConv",
    "MixPool",
    "gcp",
    "Gcp",
    "Cbam",
    "Spl",
    "DenseBlock",
    "MakNet",
    "build_maknet",
    "build_plain_baseline",
    "count_params",
    "param_report",
    "makconv_weight_count",
    "default_num_layers",
]


@dataclass(frozen=True)
class MakConvSpec:
    """One mixed-kernel conv layer: four equal output-channel groups with
    kernel shapes k x k, 1 x k, k x 1 and 1 x 1, each reading the full input."""

    in_channels: int
    out_channels: int
    k: int

    def __post_init__(self):
        if self.out_channels % 4 != 0:
            raise ShapeError(
                "makconv", "out_channels", "divisible by 4", self.out_channels
            )
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"makconv: k must be odd and >= 1, got {self.k}")


def makconv_weight_count(in_channels: int, out_channels: int, k: int) -> int:
    """Closed form: (out/4) * in * (k^2 + 2k + 1) weights, bias excluded."""
    return (out_channels // 4) * in_channels * (k * k + 2 * k + 1)


class MakConv(Module):
    """Four parallel convolutions over the full input, concatenated along
    channels. Per-group padding keeps every group at the input's H x W.

    The forward pass embeds the four kernel groups into one zero-masked
    k x k kernel so a single patch extraction and GEMM serve all groups;
    the masked taps contribute exact zeros, so outputs and gradients match
    the four separate convolutions.
    """

    def __init__(self, spec: MakConvSpec, rng, dtype=np.float64):
        super().__init__()
        self.spec = spec
        g = spec.out_channels // 4
        k = spec.k
        p = k // 2
        cin = spec.in_channels
        self.kxk = Conv2d(cin, g, (k, k), padding=(p, p), rng=rng, dtype=dtype)
        self.onexk = Conv2d(cin, g, (1, k), padding=(0, p), rng=rng, dtype=dtype)
        self.kxone = Conv2d(cin, g, (k, 1), padding=(p, 0), rng=rng, dtype=dtype)
        self.onexone = Conv2d(cin, g, (1, 1), padding=(0, 0), rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.spec.in_channels:
            raise ShapeError(
                "makconv", "in_channels", self.spec.in_channels, x.shape[1]
            )
        return _mixed_conv(x, self.kxk, self.onexk, self.kxone, self.onexone,
                           self.spec.k)


def _mixed_conv(x, c_kxk, c_1xk, c_kx1, c_1x1, k):
    n, ic, h, w = x.shape
    g = c_kxk.weight.shape[0]
    oc = 4 * g
    p = k // 2
    big = np.zeros((oc, ic, k, k), dtype=x.dtype)
    big[:g] = c_kxk.weight.data
    big[g : 2 * g, :, p, :] = c_1xk.weight.data[:, :, 0, :]
    big[2 * g : 3 * g, :, :, p] = c_kx1.weight.data[:, :, :, 0]
    big[3 * g :, :, p, p] = c_1x1.weight.data[:, :, 0, 0]
    bias = np.concatenate(
        [c.bias.data for c in (c_kxk, c_1xk, c_kx1, c_1x1)]
    )
    cols = _im2col(_pad_nchw(x.data, p, p), k, k, 1, 1, h, w)
    out2 = big.reshape(oc, -1) @ cols
    out2 += bias[:, None]
    out = np.ascontiguousarray(out2.reshape(oc, n, h, w).transpose(1, 0, 2, 3))

    weights = (c_kxk.weight, c_1xk.weight, c_kx1.weight, c_1x1.weight)
    biases = (c_kxk.bias, c_1xk.bias, c_kx1.bias, c_1x1.bias)

    def backward(gr):
        g2 = gr.transpose(1, 0, 2, 3).reshape(oc, n * h * w)
        gb = g2.sum(axis=1)
        for i, b in enumerate(biases):
            _accum(b, gb[i * g : (i + 1) * g])
        if any(wt.requires_grad for wt in weights):
            cols_b = _im2col(_pad_nchw(x.data, p, p), k, k, 1, 1, h, w)
            gw = (g2 @ cols_b.T).reshape(oc, ic, k, k)
            _accum(weights[0], gw[:g])
            _accum(weights[1], gw[g : 2 * g, :, p : p + 1, :])
            _accum(weights[2], gw[2 * g : 3 * g, :, :, p : p + 1])
            _accum(weights[3], gw[3 * g :, :, p : p + 1, p : p + 1])
        if x.requires_grad:
            gcols = big.reshape(oc, -1).T @ g2
            _accum(x, _col2im(gcols, n, ic, h, w, k, k, 1, 1, h, w, p, p))

    return _result(out, (x, *weights, *biases), backward)


class MixPool(Module):
    """Elementwise mean of 2x2/stride-2 max and average pooling."""

    def forward(self, x: Tensor) -> Tensor:
        _, _, h, w = x.shape
        if h % 2 != 0 or w % 2 != 0:
            raise ShapeError("mixpool", "spatial_dims", "even H and W", (h, w))
        mx = F.maxpool2d(x, (2, 2), (2, 2))
        av = F.avgpool2d(x, (2, 2), (2, 2))
        return (mx + av) * 0.5


def gcp(x: Tensor) -> Tensor:
    """Global concatenate pooling: [max per channel || mean per channel]."""
    n, c = x.shape[0], x.shape[1]
    flat = F.reshape(x, (n, c, -1))
    return F.concat([F.amax(flat, axis=2), F.tmean(flat, axis=2)], axis=1)


class Gcp(Module):
    def forward(self, x: Tensor) -> Tensor:
        return gcp(x)


class Cbam(Module):
    """Channel gate from pooled descriptors through a shared bottleneck MLP,
    then a spatial gate from channel-wise avg/max maps through a 7x7 conv."""

    def __init__(self, channels: int, reduction: int = 16, spatial_kernel: int = 7,
                 rng=None, dtype=np.float64):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = Linear(channels, hidden, rng=rng, dtype=dtype)
        self.fc2 = Linear(hidden, channels, rng=rng, dtype=dtype)
        p = spatial_kernel // 2
        self.spatial = Conv2d(2, 1, spatial_kernel, padding=(p, p), rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        n, c = x.shape[0], x.shape[1]
        flat = F.reshape(x, (n, c, -1))
        avg_desc = self.fc2(F.relu(self.fc1(F.tmean(flat, axis=2))))
        max_desc = self.fc2(F.relu(self.fc1(F.amax(flat, axis=2))))
        channel_gate = F.sigmoid(avg_desc + max_desc)
        xc = x * F.reshape(channel_gate, (n, c, 1, 1))

        ch_avg = F.tmean(xc, axis=1, keepdims=True)
        ch_max = F.amax(xc, axis=1, keepdims=True)
        spatial_gate = F.sigmoid(self.spatial(F.concat([ch_avg, ch_max], axis=1)))
        return xc * spatial_gate


class Spl(Module):
    """Score propagation: logits @ M^T with M identity-initialized, so the
    layer starts as a no-op and learns label relations jointly."""

    def __init__(self, num_labels: int, dtype=np.float64):
        super().__init__()
        self.matrix = Parameter(np.eye(num_labels, dtype=dtype))

    def forward(self, logits: Tensor) -> Tensor:
        if logits.shape[-1] != self.matrix.shape[0]:
            raise ShapeError(
                "spl", "num_labels", self.matrix.shape[0], logits.shape[-1]
            )
        return F.linear(logits, self.matrix)


@dataclass(frozen=True)
class DenseBlockSpec:
    in_channels: int
    growth: int
    num_layers: int
    out_channels: int

    def __post_init__(self):
        if self.num_layers not in (3, 6):
            raise ValueError(
                f"dense block layers must be 3 or 6, got {self.num_layers}"
            )


def default_num_layers(in_channels: int, out_channels: int) -> int:
    """Depth rule: 6 when the block widens its features, else 3."""
    return 6 if out_channels > in_channels else 3


class _ConvUnit(Module):
    """conv -> batchnorm -> mish, with either a mixed or a plain kernel."""

    def __init__(self, cin, cout, k, mixed, rng, dtype):
        super().__init__()
        if mixed:
            self.conv = MakConv(MakConvSpec(cin, cout, k), rng=rng, dtype=dtype)
        else:
            p = k // 2
            self.conv = Conv2d(cin, cout, (k, k), padding=(p, p), rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)
        self.act = Mish()

    def forward(self, x: Tensor) -> Tensor:
        return self.act(self.bn(self.conv(x)))


class DenseBlock(Module):
    """Densely connected conv layers: layer i consumes the concatenation of
    the block input and all previous layer outputs. A 1x1 transition conv
    (plus batchnorm and mish) compresses to out_channels, then CBAM refines."""

    def __init__(self, spec: DenseBlockSpec, k: int, mixed: bool, rng,
                 cbam_reduction: int = 16, dtype=np.float64):
        super().__init__()
        self.spec = spec
        self.layers = ModuleList(
            _ConvUnit(spec.in_channels + i * spec.growth, spec.growth, k, mixed, rng, dtype)
            for i in range(spec.num_layers)
        )
        concat_ch = spec.in_channels + spec.num_layers * spec.growth
        self.transition = Conv2d(concat_ch, spec.out_channels, (1, 1), rng=rng, dtype=dtype)
        self.transition_bn = BatchNorm2d(spec.out_channels, dtype=dtype)
        self.transition_act = Mish()
        self.attention = Cbam(spec.out_channels, cbam_reduction, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        feats = [x]
        for layer in self.layers:
            inp = feats[0] if len(feats) == 1 else F.concat(feats, axis=1)
            feats.append(layer(inp))
        merged = F.concat(feats, axis=1)
        t = self.transition_act(self.transition_bn(self.transition(merged)))
        return self.attention(t)


@dataclass(frozen=True)
class ModelConfig:
    """Reference "desk" configuration; widths are deliberately small so the
    whole pipeline runs on a single CPU core."""

    input_size: int = 64
    in_channels: int = 3
    stem_channels: int = 16
    stem_stride: int = 1
    k: int = 3
    growth: int = 16
    block_layers: tuple[int, ...] = (3, 3, 6)
    block_channels: tuple[int, ...] = (24, 32, 48)
    num_labels: int = 12
    dropout: float = 0.5
    cbam_reduction: int = 16
    dtype: str = "float64"

    def __post_init__(self):
        if len(self.block_layers) != len(self.block_channels):
            raise ValueError("block_layers and block_channels must align")
        if self.num_labels < 1:
            raise ValueError("num_labels must be >= 1")

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def block_specs(self) -> list[DenseBlockSpec]:
        specs = []
        cin = self.stem_channels
        for layers, cout in zip(self.block_layers, self.block_channels):
            specs.append(DenseBlockSpec(cin, self.growth, layers, cout))
            cin = cout
        return specs


class MakNet(Module):
    """stem conv -> [dense block, mixpool] x B -> GCP -> dropout -> linear
    classifier -> score propagation. ``forward`` returns pre-sigmoid logits;
    ``scores`` applies the final sigmoid."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, mixed: bool = True):
        super().__init__()
        self.config = config
        self.mixed = mixed
        dtype = config.np_dtype()
        p = config.k // 2
        s = config.stem_stride
        self.stem = Conv2d(config.in_channels, config.stem_channels,
                           (config.k, config.k), stride=(s, s), padding=(p, p),
                           rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm2d(config.stem_channels, dtype=dtype)
        self.stem_act = Mish()
        self.blocks = ModuleList(
            DenseBlock(spec, config.k, mixed, rng, config.cbam_reduction, dtype)
            for spec in config.block_specs()
        )
        self.pools = ModuleList(MixPool() for _ in config.block_specs())
        self.gcp = Gcp()
        self.dropout = Dropout(config.dropout)
        self.classifier = Linear(2 * config.block_channels[-1], config.num_labels,
                                 rng=rng, dtype=dtype)
        self.spl = Spl(config.num_labels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = self.stem_act(self.stem_bn(self.stem(x)))
        for block, pool in zip(self.blocks, self.pools):
            h = pool(block(h))
        h = self.dropout(self.gcp(h))
        return self.spl(self.classifier(h))

    def scores(self, x: Tensor) -> Tensor:
        return F.sigmoid(self.forward(x))

    def set_noise_rng(self, rng: np.random.Generator | None) -> None:
        for m in self.modules():
            if isinstance(m, Dropout):
                m.rng = rng

    def set_dropout_p(self, p: float) -> None:
        for m in self.modules():
            if isinstance(m, Dropout):
                m.p = p


def build_maknet(config: ModelConfig, seed: int = 0) -> MakNet:
    """Construct the mixed-kernel network with seeded initialization."""
    return MakNet(config, np.random.default_rng([seed, 0x4D41]), mixed=True)


def build_plain_baseline(config: ModelConfig, seed: int = 0) -> MakNet:
    """Same topology and channel plan with standard k x k convolutions in
    place of every mixed-kernel layer."""
    return MakNet(config, np.random.default_rng([seed, 0x4D41]), mixed=False)


def count_params(model: Module) -> tuple[int, list[tuple[str, int]]]:
    """Exact trainable-scalar count, grouped by owning layer."""
    per_layer: dict[str, int] = {}
    total = 0
    for name, p in model.named_parameters():
        layer = name.rpartition(".")[0] or name
        per_layer[layer] = per_layer.get(layer, 0) + p.size
        total += p.size
    return total, list(per_layer.items())


def param_report(model: Module) -> str:
    """Line-delimited `layer_name<TAB>count` report plus a total line."""
    total, layers = count_params(model)
    lines = [f"{name}\t{count}" for name, count in layers]
    lines.append(f"total\t{total}")
    return "\n".join(lines) + "\n"
