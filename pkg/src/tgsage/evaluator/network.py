"""Genome to torch module translation.

Layered genomes become a DAG of conv layers where multi-input layers
concatenate their inputs on the channel axis after average pooling them to
the smallest spatial size among the inputs.  Cell genomes become a stem
conv followed by stacks of repeated cells with stride-2 reductions between
stacks.  Both expose each representational layer (layer or cell outputs)
for activation capture.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from ..space import INPUT, CellGenome, Genome, LayeredCnnGenome, SpaceError, validate

BN_MOMENTUM = 0.01  # torch convention: running = 0.99 * running + 0.01 * batch


class BuildError(SpaceError):
    pass


def _conv_out(size: int, stride: int) -> int:
    return (size + stride - 1) // stride  # same padding


class LayeredNet(nn.Module):
    def __init__(self, genome: LayeredCnnGenome, input_shape: tuple[int, int, int], num_classes: int):
        super().__init__()
        problems = validate(genome)
        if problems:
            raise BuildError("invalid genome: " + "; ".join(problems))
        channels, h, w = input_shape
        shapes = {INPUT: (channels, h, w)}
        self.sources: list[list[int]] = []
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        self.acts: list[str] = []
        for idx, layer in enumerate(genome.layers, start=1):
            srcs = genome.inputs_of(idx)
            in_ch = sum(shapes[s][0] for s in srcs)
            in_h = min(shapes[s][1] for s in srcs)
            in_w = min(shapes[s][2] for s in srcs)
            if in_h < layer.stride or in_w < layer.stride:
                raise BuildError(
                    f"layer {idx}: spatial size {in_h}x{in_w} underflows under stride {layer.stride}"
                )
            self.sources.append(srcs)
            self.convs.append(
                nn.Conv2d(
                    in_ch,
                    layer.filters,
                    (layer.kernel_h, layer.kernel_w),
                    stride=layer.stride,
                    padding=(layer.kernel_h // 2, layer.kernel_w // 2),
                )
            )
            if layer.normalization == "batchnorm":
                self.norms.append(nn.BatchNorm2d(layer.filters, momentum=BN_MOMENTUM))
            else:
                self.norms.append(nn.Identity())
            self.acts.append(layer.activation)
            shapes[idx] = (layer.filters, _conv_out(in_h, layer.stride), _conv_out(in_w, layer.stride))
        self.shapes = shapes
        self.layer_names = [f"layer{i}" for i in range(1, genome.num_layers + 1)]
        self.head = nn.Linear(shapes[genome.num_layers][0], num_classes)

    def forward(self, x: torch.Tensor, capture: bool = False):
        outs = {INPUT: x}
        for idx, (srcs, conv, norm, act) in enumerate(zip(self.sources, self.convs, self.norms, self.acts), start=1):
            parts = [outs[s] for s in srcs]
            if len(parts) > 1:
                th = min(p.shape[2] for p in parts)
                tw = min(p.shape[3] for p in parts)
                parts = [p if p.shape[2:] == (th, tw) else F.adaptive_avg_pool2d(p, (th, tw)) for p in parts]
                z = torch.cat(parts, dim=1)
            else:
                z = parts[0]
            z = norm(conv(z))
            if act == "relu":
                z = F.relu(z)
            outs[idx] = z
        logits = self.head(outs[len(self.convs)].mean(dim=(2, 3)))
        if capture:
            return logits, [outs[i] for i in range(1, len(self.convs) + 1)]
        return logits


# ---------------------------------------------------------------------------
# cells


class _ReluConvBn(nn.Sequential):
    def __init__(self, c_in, c_out, kernel, stride=1, padding=0, dilation=1):
        super().__init__(
            nn.ReLU(),
            nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=padding, dilation=dilation, bias=False),
            nn.BatchNorm2d(c_out, momentum=BN_MOMENTUM),
        )


class _SepConv(nn.Sequential):
    def __init__(self, c, k):
        super().__init__(
            nn.ReLU(),
            nn.Conv2d(c, c, k, padding=k // 2, groups=c, bias=False),
            nn.Conv2d(c, c, 1, bias=False),
            nn.BatchNorm2d(c, momentum=BN_MOMENTUM),
        )


def make_op(name: str, c: int) -> nn.Module:
    if name == "identity":
        return nn.Identity()
    if name == "avgpool3x3":
        return nn.AvgPool2d(3, stride=1, padding=1, count_include_pad=False)
    if name == "maxpool3x3":
        return nn.MaxPool2d(3, stride=1, padding=1)
    if name == "dilatedconv3x3":
        return _ReluConvBn(c, c, 3, padding=2, dilation=2)
    if name == "conv1x7_7x1":
        return nn.Sequential(
            nn.ReLU(),
            nn.Conv2d(c, c, (1, 7), padding=(0, 3), bias=False),
            nn.Conv2d(c, c, (7, 1), padding=(3, 0), bias=False),
            nn.BatchNorm2d(c, momentum=BN_MOMENTUM),
        )
    if name.startswith("sepconv"):
        return _SepConv(c, int(name[len("sepconv")]))
    raise BuildError(f"unknown cell operation {name!r}")


class Cell(nn.Module):
    def __init__(self, genome: CellGenome, c_in1: int, c_in2: int, c: int):
        super().__init__()
        self.pre1 = _ReluConvBn(c_in1, c, 1)
        self.pre2 = _ReluConvBn(c_in2, c, 1)
        self.blocks = genome.blocks
        self.ops = nn.ModuleList()
        for block in genome.blocks:
            self.ops.append(nn.ModuleList([make_op(block.op_a, c), make_op(block.op_b, c)]))
        self.sources = genome.output_sources()
        self.out_channels = c * len(self.sources)

    def forward(self, x1, x2):
        states = [self.pre1(x1), self.pre2(x2)]
        for block, (op_a, op_b) in zip(self.blocks, self.ops):
            states.append(op_a(states[block.input_a]) + op_b(states[block.input_b]))
        return torch.cat([states[i] for i in self.sources], dim=1)


class _Reduction(nn.Module):
    """Stride-2 1x1 conv + BN applied to both cell inputs at a stack boundary."""

    def __init__(self, c1, c2, c_out):
        super().__init__()
        self.red1 = _ReluConvBn(c1, c_out, 1, stride=2)
        self.red2 = _ReluConvBn(c2, c_out, 1, stride=2)

    def forward(self, x1, x2):
        return self.red1(x1), self.red2(x2)


@dataclass(frozen=True)
class CellLayout:
    stacks: int = 3
    repeats: int = 1  # N cells per stack
    filters: int = 16  # F for the first stack, doubled at every reduction


class CellNet(nn.Module):
    def __init__(self, genome: CellGenome, input_shape, num_classes: int, layout: CellLayout = CellLayout()):
        super().__init__()
        problems = validate(genome)
        if problems:
            raise BuildError("invalid genome: " + "; ".join(problems))
        channels, h, w = input_shape
        self.stem = nn.Sequential(
            nn.Conv2d(channels, layout.filters, 3, padding=1, bias=False),
            nn.BatchNorm2d(layout.filters, momentum=BN_MOMENTUM),
        )
        self.stages = nn.ModuleList()
        self.layer_names = []
        c1 = c2 = layout.filters
        for s in range(layout.stacks):
            c = layout.filters * 2**s
            red = None
            if s > 0:
                if h < 2 or w < 2:
                    raise BuildError(f"reduction before stack {s + 1}: spatial size {h}x{w} underflows")
                red = _Reduction(c1, c2, c)
                c1 = c2 = c
                h, w = _conv_out(h, 2), _conv_out(w, 2)
            cells = nn.ModuleList()
            for r in range(layout.repeats):
                cell = Cell(genome, c1, c2, c)
                cells.append(cell)
                c1, c2 = c2, cell.out_channels
                self.layer_names.append(f"stack{s + 1}.cell{r + 1}")
            self.stages.append(nn.ModuleDict({"cells": cells, **({"reduce": red} if red is not None else {})}))
        self.head = nn.Linear(c2, num_classes)

    def forward(self, x, capture: bool = False):
        x = self.stem(x)
        x1 = x2 = x
        captured = []
        for stage in self.stages:
            if "reduce" in stage:
                x1, x2 = stage["reduce"](x1, x2)
            for cell in stage["cells"]:
                x1, x2 = x2, cell(x1, x2)
                captured.append(x2)
        logits = self.head(F.relu(x2).mean(dim=(2, 3)))
        if capture:
            return logits, captured
        return logits


def build_network(
    genome: Genome,
    input_shape: tuple[int, int, int],
    num_classes: int,
    layout: CellLayout | None = None,
) -> nn.Module:
    """Executable network for ``genome``; raises :class:`BuildError` on spatial underflow."""
    if isinstance(genome, LayeredCnnGenome):
        return LayeredNet(genome, tuple(input_shape), num_classes)
    if isinstance(genome, CellGenome):
        return CellNet(genome, tuple(input_shape), num_classes, layout or CellLayout())
    raise BuildError(f"unsupported genome type {type(genome).__name__}")
