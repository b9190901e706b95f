"""Reference networks: a VGG-style conv stack and a ResNet-style basic-block net."""

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import tensor as T
from .block import Branch, DyRepBlock, Stage, iter_blocks
from .layers import AvgPool2d, BatchNorm2d, Conv2d, ConvBN, Identity, Linear
from .rng import stream

FAMILIES = ("vgg_like", "resnet_like")


@dataclass
class ModelSpec:
    family: str = "vgg_like"
    widths: List[int] = field(default_factory=lambda: [16, 32, 64])
    blocks: List[int] = field(default_factory=lambda: [1, 1, 1])
    num_classes: int = 10
    input_shape: Tuple[int, int, int] = (3, 32, 32)
    kernel_size: int = 3

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        self.blocks = [int(b) for b in self.blocks]
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be positive, got {self.widths}")
        if len(self.blocks) != len(self.widths) or any(b < 1 for b in self.blocks):
            raise ValueError(f"blocks {self.blocks} must be positive, one per width {self.widths}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


VGG16_CIFAR = ModelSpec("vgg_like", [64, 128, 256, 512, 512], [2, 2, 3, 3, 3], 10, (3, 32, 32))


def _convbn(c_in, c_out, k, stride, name, dtype):
    return ConvBN(Conv2d(c_in, c_out, k, stride, None, False, f"{name}.conv", dtype),
                  BatchNorm2d(c_out, f"{name}.bn", dtype=dtype))


class VGGCell:
    slots = ("unit",)

    def __init__(self, unit):
        self.unit = unit

    def forward(self, x, mode, update_stats):
        return T.relu(self.unit(x, mode, update_stats))

    def to_structure(self):
        return {"type": "vgg_cell", "unit": _unit_structure(self.unit)}


class BasicBlock:
    """Two ``K x K`` conv-BN units with an identity or 1x1-projection shortcut."""

    slots = ("conv1", "conv2", "shortcut")

    def __init__(self, conv1, conv2, shortcut=None):
        self.conv1 = conv1
        self.conv2 = conv2
        self.shortcut = shortcut

    def forward(self, x, mode, update_stats):
        h = T.relu(self.conv1(x, mode, update_stats))
        h = self.conv2(h, mode, update_stats)
        skip = x if self.shortcut is None else self.shortcut(x, mode, update_stats)
        return T.relu(T.add(h, skip))

    def to_structure(self):
        return {
            "type": "basic_block",
            "conv1": _unit_structure(self.conv1),
            "conv2": _unit_structure(self.conv2),
            "shortcut": None if self.shortcut is None else _unit_structure(self.shortcut),
        }


class Network:
    """Cells of conv units, global average pool, then a dense classifier."""

    def __init__(self, spec: ModelSpec, cells, fc: Linear, dtype=np.float64):
        self.spec = spec
        self.cells = cells
        self.fc = fc
        self.dtype = np.dtype(dtype)

    def named_units(self):
        """Yield ``(owner, attribute, unit)`` for every network-level conv unit."""
        for cell in self.cells:
            for attr in cell.slots:
                unit = getattr(cell, attr)
                if unit is not None:
                    yield cell, attr, unit

    def forward(self, x, mode="eval", update_stats=True):
        if not isinstance(x, T.Tensor):
            x = T.Tensor(np.asarray(x, dtype=self.dtype))
        for cell in self.cells:
            x = cell.forward(x, mode, update_stats)
        return self.fc(T.global_avg_pool(x))

    __call__ = forward

    def predict_logits(self, x, batch_size=256):
        outs = []
        with T.no_grad():
            for i in range(0, len(x), batch_size):
                outs.append(self.forward(x[i : i + batch_size], "eval").data)
        return np.concatenate(outs, axis=0)

    def parameters(self):
        out = []
        for _, _, unit in self.named_units():
            out += unit.parameters()
        return out + self.fc.parameters()

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def batchnorms(self):
        for _, _, unit in self.named_units():
            if isinstance(unit, ConvBN):
                yield unit.bn
            else:
                yield from unit.batchnorms()

    def buffers(self):
        out = {}
        for bn in self.batchnorms():
            out.update(bn.buffers())
        return out

    def blocks(self):
        return list(iter_blocks(self))

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def convs(self):
        for _, _, unit in self.named_units():
            yield from _unit_convs(unit)

    def flops(self):
        """Multiply-accumulates per sample, from the most recent forward's shapes."""
        return int(sum(c.macs() for c in self.convs()) + self.fc.macs())

    def to_structure(self):
        return {
            "spec": self.spec.to_dict(),
            "dtype": self.dtype.str,
            "cells": [c.to_structure() for c in self.cells],
            "fc": {"name": self.fc.name, "in": self.fc.weight.shape[1], "out": self.fc.weight.shape[0]},
        }

    def state_arrays(self):
        arrays = {p.name: p.data for p in self.parameters()}
        arrays.update(self.buffers())
        return arrays

    def load_state_arrays(self, arrays):
        for p in self.parameters():
            if p.name not in arrays:
                raise KeyError(f"missing parameter array {p.name}")
            p.data[...] = arrays[p.name]
        for name, buf in self.buffers().items():
            if name not in arrays:
                raise KeyError(f"missing buffer array {name}")
            buf[...] = arrays[name]


def _unit_convs(unit):
    if isinstance(unit, ConvBN):
        yield unit.conv
    elif isinstance(unit, DyRepBlock):
        yield unit.original
        for br in unit.branches:
            for st in br.stages:
                if isinstance(st.op, Conv2d):
                    yield st.op
                elif isinstance(st.op, DyRepBlock):
                    yield from _unit_convs(st.op)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def build_model(spec: ModelSpec, seed=0, dtype=np.float64) -> Network:
    """Build and randomly initialise a network; every ``K x K`` conv is a rep target."""
    k = spec.kernel_size
    c_in = spec.input_shape[0]
    cells = []
    if spec.family == "vgg_like":
        for s, (width, n) in enumerate(zip(spec.widths, spec.blocks)):
            for b in range(n):
                stride = 2 if (s > 0 and b == 0) else 1
                cells.append(VGGCell(_convbn(c_in, width, k, stride, f"s{s}.b{b}", dtype)))
                c_in = width
    else:
        cells.append(VGGCell(_convbn(c_in, spec.widths[0], k, 1, "stem", dtype)))
        c_in = spec.widths[0]
        for s, (width, n) in enumerate(zip(spec.widths, spec.blocks)):
            for b in range(n):
                stride = 2 if (s > 0 and b == 0) else 1
                name = f"s{s}.b{b}"
                shortcut = None
                if stride != 1 or c_in != width:
                    shortcut = _convbn(c_in, width, 1, stride, f"{name}.down", dtype)
                cells.append(BasicBlock(_convbn(c_in, width, k, stride, f"{name}.c1", dtype),
                                        _convbn(width, width, k, 1, f"{name}.c2", dtype), shortcut))
                c_in = width
    fc = Linear(c_in, spec.num_classes, "fc", dtype)
    net = Network(spec, cells, fc, dtype)
    for conv in net.convs():
        conv.reset_parameters(stream(seed, "model_init", conv.name))
    fc.reset_parameters(stream(seed, "model_init", "fc"))
    return net


# ---------------------------------------------------------------------------
# structure (de)serialisation
# ---------------------------------------------------------------------------


def _unit_structure(unit):
    return unit.to_structure()


def _op_from_structure(s, dtype):
    kind = s["type"]
    if kind == "conv":
        return Conv2d.from_structure(s, dtype)
    if kind == "avg":
        return AvgPool2d.from_structure(s)
    if kind == "identity":
        return Identity.from_structure(s)
    if kind == "block":
        return _block_from_structure(s, dtype)
    raise ValueError(f"unknown op type {kind!r}")


def _block_from_structure(s, dtype):
    original = Conv2d.from_structure(s["original"], dtype)
    obn = None if s["original_bn"] is None else BatchNorm2d.from_structure(s["original_bn"], dtype)
    branches = []
    for b in s["branches"]:
        stages = [Stage(_op_from_structure(st["op"], dtype), BatchNorm2d.from_structure(st["bn"], dtype))
                  for st in b["stages"]]
        branches.append(Branch(b["kind"], stages, tuple(b["pre_pad"]), b["id"]))
    return DyRepBlock(original, obn, branches, s["depth"])


def unit_from_structure(s, dtype):
    if s["type"] == "convbn":
        return ConvBN.from_structure(s, dtype)
    if s["type"] == "block":
        return _block_from_structure(s, dtype)
    raise ValueError(f"unknown unit type {s['type']!r}")


def network_from_structure(s) -> Network:
    """Rebuild a network skeleton (zero weights) from :meth:`Network.to_structure`."""
    dtype = np.dtype(s["dtype"])
    spec = ModelSpec(**s["spec"])
    cells = []
    for c in s["cells"]:
        if c["type"] == "vgg_cell":
            cells.append(VGGCell(unit_from_structure(c["unit"], dtype)))
        elif c["type"] == "basic_block":
            sc = None if c["shortcut"] is None else unit_from_structure(c["shortcut"], dtype)
            cells.append(BasicBlock(unit_from_structure(c["conv1"], dtype),
                                    unit_from_structure(c["conv2"], dtype), sc))
        else:
            raise ValueError(f"unknown cell type {c['type']!r}")
    fc = Linear(s["fc"]["in"], s["fc"]["out"], s["fc"]["name"], dtype)
    return Network(spec, cells, fc, dtype)
