"""Sclera segmentation backends: FCN8 on a VGG-16 trunk, SegNet, and a pix2pix cGAN.

All three consume an RGB image at their fixed input size and produce a
per-pixel sclera probability through :func:`segment`.
"""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .architectures import scaled as _scaled
from .architectures import segnet_spec
from .dataset import INPUT_SIZES, SegmenterKind, as_kind
from .errors import InputShapeError
from .modelspec import LayerSpec, ModelSpec, ModelSpecError, trace

__all__ = [
    "SegmenterKind", "FCN8", "SegNet", "UNetGenerator", "PatchDiscriminator", "Pix2Pix",
    "build_fcn8", "build_segnet", "build_pix2pix", "build_segmenter", "segnet_spec",
    "model_spec", "segment", "segment_batch", "binarize", "images_to_tensor",
    "masks_to_target", "index_maxpool", "index_unpool",
]


def _check_input(x: torch.Tensor, size: tuple[int, int], channels: int, name: str) -> None:
    w, h = size
    if x.dim() != 4 or x.shape[1] != channels or x.shape[2] != h or x.shape[3] != w:
        raise InputShapeError(
            f"{name} expects N x {channels} x {h} x {w} input, got {tuple(x.shape)}")


def _he_init(module: nn.Module) -> None:
    for m in module.modules():
        if any(p.is_meta for p in m.parameters(recurse=False)):
            continue
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def _conv_bn_relu(cin: int, cout: int, batch_norm: bool = True) -> nn.Sequential:
    if not batch_norm:
        return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=True))
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout),
                         nn.ReLU(inplace=True))


# --------------------------------------------------------------------------
# index pooling

def index_maxpool(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """2x2/2 max-pool (ceil mode) returning flat argmax indices per window."""
    return F.max_pool2d(x, 2, 2, ceil_mode=True, return_indices=True)


def index_unpool(x: torch.Tensor, indices: torch.Tensor, size) -> torch.Tensor:
    """Scatter pooled values back to their argmax positions; zeros elsewhere.

    ``indices`` are flat offsets into each ``H x W`` plane of the pre-pool
    tensor, as returned by :func:`index_maxpool`.
    """
    h, w = tuple(size)[-2:]
    n, c = x.shape[:2]
    out = x.new_zeros((n, c, h * w))
    out = out.scatter(2, indices.flatten(2), x.flatten(2))
    return out.view(n, c, h, w)


class IndexPool(nn.Module):
    def forward(self, x):
        return index_maxpool(x)


class IndexUnpool(nn.Module):
    def forward(self, x, indices, size):
        return index_unpool(x, indices, size)


# --------------------------------------------------------------------------
# SegNet

class SegNet(nn.Module):
    """Encoder/decoder whose decoders upsample with the encoder's pooling indices."""

    def __init__(self, input_size=(320, 240), in_channels: int = 3, width_divisor: int = 1,
                 classes: int = 2, batch_norm: bool = True):
        super().__init__()
        self.input_size = tuple(input_size)
        self.in_channels = in_channels
        spec = segnet_spec(input_size, in_channels, width_divisor, classes)
        layers = []
        cin = in_channels
        for row in spec.layers:
            if row.kind == "max":
                layers.append(IndexPool())
            elif row.kind == "up":
                layers.append(IndexUnpool())
            elif row.index == len(spec.layers):
                layers.append(nn.Conv2d(cin, row.filters, 3, padding=1))
            else:
                layers.append(_conv_bn_relu(cin, row.filters, batch_norm))
                cin = row.filters
        self.layers = nn.ModuleList(layers)
        _he_init(self)

    def table_layers(self):
        return list(self.layers)

    def forward(self, x, record: list | None = None):
        """Per-pixel class logits. ``record`` collects ``(indices, pre-pool size)`` per pool."""
        _check_input(x, self.input_size, self.in_channels, "SegNet")
        stack = []
        for layer in self.layers:
            if isinstance(layer, IndexPool):
                size = x.shape
                x, idx = layer(x)
                stack.append((idx, size))
                if record is not None:
                    record.append((idx, size))
            elif isinstance(layer, IndexUnpool):
                idx, size = stack.pop()
                x = layer(x, idx, size)
            else:
                x = layer(x)
        return x


def build_segnet(input_size=(320, 240), width_divisor: int = 1, seed: int | None = None,
                 batch_norm: bool = True) -> SegNet:
    if seed is not None:
        torch.manual_seed(seed)
    return SegNet(input_size, 3, width_divisor, 2, batch_norm)


# --------------------------------------------------------------------------
# FCN8

_VGG16 = ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512))


def _bilinear_kernel(channels: int, k: int) -> torch.Tensor:
    factor = (k + 1) // 2
    center = factor - 1 if k % 2 == 1 else factor - 0.5
    og = np.ogrid[:k, :k]
    filt = (1 - abs(og[0] - center) / factor) * (1 - abs(og[1] - center) / factor)
    weight = np.zeros((channels, channels, k, k), dtype=np.float32)
    weight[range(channels), range(channels)] = filt
    return torch.from_numpy(weight)


class _Up(nn.ConvTranspose2d):
    """Learnable upsampling initialised to bilinear interpolation."""

    def __init__(self, channels: int, factor: int):
        k = 2 * factor
        super().__init__(channels, channels, k, stride=factor, padding=factor // 2, bias=False)
        with torch.no_grad():
            self.weight.copy_(_bilinear_kernel(channels, k))


class FCN8(nn.Module):
    """VGG-16 convolutional trunk, two 1x1 score convolutions, FCN8 fusion of pool3/4/5."""

    def __init__(self, input_size=(320, 240), in_channels: int = 3, width_divisor: int = 1,
                 classes: int = 2, hidden: int = 4096, batch_norm: bool = True):
        super().__init__()
        self.input_size = tuple(input_size)
        self.in_channels = in_channels
        blocks = []
        cin = in_channels
        for widths in _VGG16:
            convs = []
            for f in widths:
                f = _scaled(f, width_divisor)
                convs.append(_conv_bn_relu(cin, f, batch_norm))
                cin = f
            blocks.append(nn.ModuleList(convs))
        self.blocks = nn.ModuleList(blocks)
        self.pools = nn.ModuleList(nn.MaxPool2d(2, 2, ceil_mode=True) for _ in _VGG16)
        hidden = _scaled(hidden, width_divisor)
        c3, c4 = _scaled(256, width_divisor), _scaled(512, width_divisor)
        self.fc6 = nn.Conv2d(cin, hidden, 1)
        self.fc7 = nn.Conv2d(hidden, classes, 1)
        self.score_pool4 = nn.Conv2d(c4, classes, 1)
        self.score_pool3 = nn.Conv2d(c3, classes, 1)
        self.up2 = _Up(classes, 2)
        self.up2b = _Up(classes, 2)
        self.up8 = _Up(classes, 8)
        _he_init(self)
        for m in (self.score_pool4, self.score_pool3):
            if m.weight.is_meta:
                continue
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)

    def table_layers(self):
        layers = []
        for convs, pool in zip(self.blocks, self.pools):
            layers.extend(convs)
            layers.append(pool)
        return layers + [self.fc6, self.fc7, self.up2, self.score_pool4, self.up2b,
                         self.score_pool3, self.up8]

    def forward(self, x, record: dict | None = None):
        _check_input(x, self.input_size, self.in_channels, "FCN8")
        h, w = x.shape[-2:]
        pooled = []
        for convs, pool in zip(self.blocks, self.pools):
            for conv in convs:
                x = conv(x)
            x = pool(x)
            pooled.append(x)
        pool3, pool4, pool5 = pooled[2:]
        coarse = self.fc7(F.relu(self.fc6(pool5)))
        if record is not None:
            record["coarse"] = coarse
        s4 = self.score_pool4(pool4)
        fused = self.up2(coarse)[..., :s4.shape[-2], :s4.shape[-1]] + s4
        s3 = self.score_pool3(pool3)
        fused = self.up2b(fused)[..., :s3.shape[-2], :s3.shape[-1]] + s3
        return self.up8(fused)[..., :h, :w]


def build_fcn8(input_size=(320, 240), width_divisor: int = 1, seed: int | None = None,
               hidden: int = 4096, batch_norm: bool = True) -> FCN8:
    if seed is not None:
        torch.manual_seed(seed)
    return FCN8(input_size, 3, width_divisor, 2, hidden, batch_norm)


# --------------------------------------------------------------------------
# pix2pix

def _gan_init(module: nn.Module) -> None:
    """N(0, 0.02) convolutions, N(1, 0.02) batch-norm scales."""
    for m in module.modules():
        if any(p.is_meta for p in m.parameters(recurse=False)):
            continue
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.normal_(m.weight, 1.0, 0.02)
            nn.init.zeros_(m.bias)

class _Down(nn.Sequential):
    def __init__(self, cin, cout, norm=True):
        layers = [nn.Conv2d(cin, cout, 4, 2, 1, bias=not norm)]
        if norm:
            layers.append(nn.BatchNorm2d(cout))
        layers.append(nn.LeakyReLU(0.2, inplace=True))
        super().__init__(*layers)


class _UpBlock(nn.Sequential):
    def __init__(self, cin, cout, dropout=False):
        layers = [nn.ConvTranspose2d(cin, cout, 4, 2, 1, bias=False), nn.BatchNorm2d(cout)]
        if dropout:
            layers.append(nn.Dropout(0.5))
        layers.append(nn.ReLU(inplace=True))
        super().__init__(*layers)


class UNetGenerator(nn.Module):
    """U-Net generator: stride-2 4x4 convolutions down to 1x1, mirrored with skips, tanh output."""

    def __init__(self, input_size: int = 256, in_channels: int = 3, out_channels: int = 3,
                 ngf: int = 64):
        super().__init__()
        depth = int(round(math.log2(input_size)))
        if 2 ** depth != input_size or depth < 2:
            raise ModelSpecError(f"U-Net input size must be a power of two, got {input_size}")
        self.input_size = (input_size, input_size)
        self.in_channels = in_channels
        widths = [ngf * min(2 ** i, 8) for i in range(depth)]
        downs = []
        cin = in_channels
        for i, wd in enumerate(widths):
            # no norm on the outermost and innermost encoder layers
            downs.append(_Down(cin, wd, norm=0 < i < depth - 1))
            cin = wd
        self.downs = nn.ModuleList(downs)
        ups = []
        for i in range(depth - 1, 0, -1):
            cin = widths[i] if i == depth - 1 else 2 * widths[i]
            ups.append(_UpBlock(cin, widths[i - 1], dropout=i >= depth - 3))
        self.ups = nn.ModuleList(ups)
        self.out = nn.Sequential(nn.ConvTranspose2d(2 * widths[0], out_channels, 4, 2, 1),
                                 nn.Tanh())
        _gan_init(self)

    def table_layers(self):
        return list(self.downs) + list(self.ups) + [self.out]

    def forward(self, x):
        _check_input(x, self.input_size, self.in_channels, "U-Net generator")
        skips = []
        for down in self.downs:
            x = down(x)
            skips.append(x)
        skips.pop()
        for up in self.ups:
            x = torch.cat([up(x), skips.pop()], dim=1)
        return self.out(x)


class PatchDiscriminator(nn.Module):
    """70x70 PatchGAN over the channel-concatenated (image, mask) pair; emits logits."""

    def __init__(self, in_channels: int = 6, ndf: int = 64, n_layers: int = 3):
        super().__init__()
        layers = [nn.Sequential(nn.Conv2d(in_channels, ndf, 4, 2, 1), nn.LeakyReLU(0.2, True))]
        mult = 1
        for n in range(1, n_layers + 1):
            prev, mult = mult, min(2 ** n, 8)
            stride = 2 if n < n_layers else 1
            layers.append(nn.Sequential(nn.Conv2d(ndf * prev, ndf * mult, 4, stride, 1, bias=False),
                                        nn.BatchNorm2d(ndf * mult), nn.LeakyReLU(0.2, True)))
        layers.append(nn.Conv2d(ndf * mult, 1, 4, 1, 1))
        self.layers = nn.ModuleList(layers)
        self.in_channels = in_channels
        _gan_init(self)

    def table_layers(self):
        return list(self.layers)

    def forward(self, x, y=None):
        if y is not None:
            x = torch.cat([x, y], dim=1)
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise InputShapeError(f"discriminator expects {self.in_channels} channels, got {tuple(x.shape)}")
        for layer in self.layers:
            x = layer(x)
        return x


class Pix2Pix(nn.Module):
    """Holds the generator/discriminator pair so both travel in one checkpoint."""

    def __init__(self, input_size: int = 256, width_divisor: int = 1):
        super().__init__()
        base = _scaled(64, width_divisor)
        self.generator = UNetGenerator(input_size, 3, 3, base)
        self.discriminator = PatchDiscriminator(6, base)
        self.input_size = self.generator.input_size
        self.in_channels = 3

    def table_layers(self):
        return self.generator.table_layers()

    def forward(self, x):
        return self.generator(x)


def build_pix2pix(input_size: int = 256, width_divisor: int = 1, seed: int | None = None
                  ) -> tuple[UNetGenerator, PatchDiscriminator]:
    if seed is not None:
        torch.manual_seed(seed)
    pair = Pix2Pix(input_size, width_divisor)
    return pair.generator, pair.discriminator


def build_segmenter(kind: SegmenterKind | str, width_divisor: int = 1, input_size=None,
                    seed: int | None = None) -> nn.Module:
    """Network for ``kind``; the GAN comes back as a :class:`Pix2Pix` pair."""
    kind = as_kind(kind)
    size = tuple(input_size or INPUT_SIZES[kind])
    if seed is not None:
        torch.manual_seed(seed)
    if kind is SegmenterKind.FCN8:
        return FCN8(size, 3, width_divisor)
    if kind is SegmenterKind.SEGNET:
        return SegNet(size, 3, width_divisor)
    if size[0] != size[1]:
        raise ModelSpecError("the GAN generator needs a square input")
    return Pix2Pix(size[0], width_divisor)


# --------------------------------------------------------------------------
# layer tables

def _rows_for(modules) -> list[LayerSpec]:
    rows = []
    for i, m in enumerate(modules):
        conv = next((c for c in m.modules() if isinstance(c, (nn.Conv2d, nn.ConvTranspose2d))), None)
        if isinstance(m, (nn.MaxPool2d, IndexPool)):
            rows.append(LayerSpec(i, "max", None, 2, 2))
        elif isinstance(m, _Up):
            rows.append(LayerSpec(i, "up", m.out_channels, m.kernel_size[0], m.stride[0]))
        elif isinstance(conv, nn.ConvTranspose2d):
            rows.append(LayerSpec(i, "deconv", conv.out_channels, conv.kernel_size[0], conv.stride[0]))
        elif conv is not None:
            rows.append(LayerSpec(i, "conv", conv.out_channels, conv.kernel_size[0], conv.stride[0]))
        else:
            raise ModelSpecError(f"no table row for {type(m).__name__}")
    return rows


def model_spec(net: nn.Module) -> ModelSpec:
    """Traced layer table for any of the segmenters."""
    w, h = net.input_size
    if isinstance(net, SegNet):
        expected = segnet_spec(net.input_size, net.in_channels,
                               _width_divisor(net), 2)
        traced = trace(net, (w, h, net.in_channels), expected)
        if traced != expected:
            raise ModelSpecError("SegNet module does not reproduce its layer table")
        return traced
    name = "FCN8" if isinstance(net, FCN8) else "pix2pix U-Net generator"
    rows = _rows_for(net.table_layers())
    return trace(net, (w, h, net.in_channels), ModelSpec(name, tuple(rows)))


def _width_divisor(net: SegNet) -> int:
    first = net.layers[0][0]
    return 64 // first.out_channels


def discriminator_spec(disc: PatchDiscriminator, input_size=(256, 256)) -> ModelSpec:
    rows = _rows_for(disc.table_layers())
    return trace(disc, (input_size[0], input_size[1], disc.in_channels),
                 ModelSpec("PatchGAN discriminator", tuple(rows)))


# --------------------------------------------------------------------------
# inference

def images_to_tensor(kind: SegmenterKind | str, images) -> torch.Tensor:
    """uint8 ``(N, H, W, 3)`` (or one ``(H, W, 3)``) -> float NCHW; GAN inputs land in [-1, 1]."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    t = torch.from_numpy(arr.transpose(0, 3, 1, 2).copy()) / 255.0
    if as_kind(kind) is SegmenterKind.GAN:
        t = t * 2.0 - 1.0
    return t


def masks_to_target(kind: SegmenterKind | str, masks) -> torch.Tensor:
    """Boolean masks -> class indices ``(N, H, W)`` or, for the GAN, ``(N, 3, H, W)`` in {-1, 1}."""
    m = np.asarray(masks, dtype=bool)
    if as_kind(kind) is SegmenterKind.GAN:
        if m.ndim == 3:  # (N, H, W)
            m = np.repeat(m[..., None], 3, axis=-1)
        if m.ndim == 3 + 1 and m.shape[-1] == 1:
            m = np.repeat(m, 3, axis=-1)
        t = torch.from_numpy(m.transpose(0, 3, 1, 2).astype(np.float32))
        return t * 2.0 - 1.0
    if m.ndim == 4:
        m = m[..., 0]
    return torch.from_numpy(m.astype(np.int64))


def _net_for(kind: SegmenterKind, net: nn.Module) -> nn.Module:
    if kind is SegmenterKind.GAN and isinstance(net, Pix2Pix):
        return net.generator
    return net


def probabilities(kind: SegmenterKind | str, output: torch.Tensor) -> torch.Tensor:
    """Network output -> sclera probability ``(N, H, W)``."""
    if as_kind(kind) is SegmenterKind.GAN:
        return ((output.mean(dim=1) + 1.0) / 2.0).clamp(0.0, 1.0)
    return torch.softmax(output, dim=1)[:, 1]


def segment_batch(kind: SegmenterKind | str, net: nn.Module, images) -> np.ndarray:
    kind = as_kind(kind)
    model = _net_for(kind, net)
    x = images_to_tensor(kind, images)
    w, h = getattr(model, "input_size", INPUT_SIZES[kind])
    if x.shape[-2:] != (h, w):
        raise InputShapeError(f"{kind.value} expects {w}x{h} images, got {x.shape[-1]}x{x.shape[-2]}")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            prob = probabilities(kind, model(x))
    finally:
        model.train(was_training)
    return prob.cpu().numpy().astype(np.float64)


def segment(kind: SegmenterKind | str, net: nn.Module, image: np.ndarray) -> np.ndarray:
    """Sclera probability map at the network resolution of ``kind``."""
    return segment_batch(kind, net, np.asarray(image)[None])[0]


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return np.asarray(prob) >= threshold
