"""Truncated ResNet-18 encoder, modified ASPP decoder, and the U-Net baseline."""

from __future__ import annotations

from typing import List, Sequence

from .. import autodiff as ad
from ..autodiff import Tensor
from .layers import BatchNorm2d, Conv2d, ConvBN, Module, Sequential, _affine_inplace, _fused_inference


def _w(channels: int, width: float) -> int:
    return max(1, int(round(channels * width)))


class BasicBlock(Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, stride, 1)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, 1, 1)
        self.bn2 = BatchNorm2d(cout)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = Sequential(Conv2d(cin, cout, 1, stride, 0), BatchNorm2d(cout))

    def _shortcut(self, x: Tensor) -> Tensor:
        if self.downsample is None:
            return x
        conv, bn = self.downsample[0], self.downsample[1]
        if _fused_inference(bn):
            return Tensor(_affine_inplace(conv(x).data, bn, relu=False))
        return bn(conv(x))

    def forward(self, x: Tensor) -> Tensor:
        if _fused_inference(self.bn1):
            y = _affine_inplace(self.conv1(x).data, self.bn1, relu=True)
            y = self.conv2(Tensor(y)).data
            return Tensor(_affine_inplace(y, self.bn2, relu=True, residual=self._shortcut(x).data))
        y = ad.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return ad.relu(ad.add(y, self._shortcut(x)))


class ResNetEncoder(Module):
    """ResNet-18 without its last residual stage and classifier; output stride 16."""

    def __init__(self, in_channels: int = 3, width: float = 1.0):
        super().__init__()
        c1, c2, c3 = _w(64, width), _w(128, width), _w(256, width)
        self.conv1 = Conv2d(in_channels, c1, 7, 2, 3)
        self.bn1 = BatchNorm2d(c1)
        self.layer1 = Sequential(BasicBlock(c1, c1, 1), BasicBlock(c1, c1, 1))
        self.layer2 = Sequential(BasicBlock(c1, c2, 2), BasicBlock(c2, c2, 1))
        self.layer3 = Sequential(BasicBlock(c2, c3, 2), BasicBlock(c3, c3, 1))
        self.out_channels = c3

    def forward(self, x: Tensor) -> Tensor:
        if _fused_inference(self.bn1):
            y = Tensor(_affine_inplace(self.conv1(x).data, self.bn1, relu=True))
        else:
            y = ad.relu(self.bn1(self.conv1(x)))
        y = ad.max_pool2d(y, 3, 2, 1)
        y = self.layer1(y)
        y = self.layer2(y)
        return self.layer3(y)


class ASPPPooling(Module):
    """2x2 average pool, 1x1 conv, bilinear x2 back to the input grid."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.proj = ConvBN(cin, cout, 1)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        y = self.proj(ad.avg_pool2d(x, 2, 2))
        return ad.bilinear_resize(y, h, w)


class ASPPDecoder(Module):
    def __init__(self, cin: int, num_classes: int, rates: Sequence[int], width: float = 1.0,
                 pool_branch: bool = True):
        super().__init__()
        c = _w(256, width)
        self.branch0 = ConvBN(cin, c, 1)
        self.atrous = Sequential(*[ConvBN(cin, c, 3, 1, r, r) for r in rates])
        self.pool = ASPPPooling(cin, c) if pool_branch else None
        n_branches = 1 + len(rates) + (1 if pool_branch else 0)
        self.project = ConvBN(n_branches * c, c, 1)
        self.refine = ConvBN(c, c, 3, 1, 1)
        self.classifier = Conv2d(c, num_classes, 1, bias=True)

    def forward(self, x: Tensor) -> Tensor:
        feats: List[Tensor] = [self.branch0(x)]
        feats.extend(m(x) for m in self.atrous)
        if self.pool is not None:
            feats.append(self.pool(x))
        y = self.project(ad.concat(feats, axis=1))
        return self.classifier(self.refine(y))


class DoubleConv(Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.c1 = ConvBN(cin, cout, 3, 1, 1)
        self.c2 = ConvBN(cout, cout, 3, 1, 1)

    def forward(self, x: Tensor) -> Tensor:
        return self.c2(self.c1(x))


class UNet(Module):
    """Four-level U-Net: max-pool contraction, bilinear expansion, skip concatenation."""

    def __init__(self, in_channels: int, num_classes: int, filters: Sequence[int] = (16, 32, 32, 32)):
        super().__init__()
        f = list(filters)
        self.inc = DoubleConv(in_channels, f[0])
        self.down = Sequential(*[DoubleConv(a, b) for a, b in zip(f[:-1], f[1:])])
        self.bridge = DoubleConv(f[-1], f[-1])
        ups = []
        skips = f[::-1]                      # channels of the skip tensors, deepest first
        cur = f[-1]
        for s in skips:
            ups.append(DoubleConv(cur + s, s))
            cur = s
        self.up = Sequential(*ups)
        self.classifier = Conv2d(f[0], num_classes, 1, bias=True)

    def forward(self, x: Tensor) -> Tensor:
        skips = [self.inc(x)]
        y = skips[0]
        for block in self.down:
            y = block(ad.max_pool2d(y, 2, 2))
            skips.append(y)
        y = self.bridge(ad.max_pool2d(y, 2, 2))
        for block, skip in zip(self.up, reversed(skips)):
            y = ad.bilinear_resize(y, skip.shape[2], skip.shape[3])
            y = block(ad.concat([y, skip], axis=1))
        return self.classifier(y)
