"""Multi-branch blocks: an original conv plus parallel OP-BN branches summed together."""

from dataclasses import dataclass
from enum import Enum
from typing import List, Optional

import numpy as np

from . import tensor as T
from .layers import AvgPool2d, BatchNorm2d, Conv2d, ConvBN, Identity


class BranchKind(str, Enum):
    KXK = "kxk"
    CONV1X1 = "1x1"
    CONV1X1_KXK = "1x1_kxk"
    CONV1X1_AVG = "1x1_avg"
    CONV1XK = "1xk"
    CONVKX1 = "kx1"
    RESIDUAL = "residual"


ALL_KINDS = tuple(BranchKind)


@dataclass
class Stage:
    op: object  # Conv2d | AvgPool2d | Identity | DyRepBlock
    bn: BatchNorm2d


class Branch:
    """Ordered OP-BN stages.

    ``pre_pad`` zero-pads (positive) or crops (negative) the block input
    before stage 0.
    """

    def __init__(self, kind: BranchKind, stages: List[Stage], pre_pad=(0, 0), id=""):
        if not stages:
            raise ValueError("a branch needs at least one stage")
        self.kind = BranchKind(kind)
        self.stages = stages
        self.pre_pad = tuple(pre_pad)
        self.id = id
        self.importance: Optional[float] = None

    @property
    def final_bn(self) -> BatchNorm2d:
        return self.stages[-1].bn

    def batchnorms(self):
        for st in self.stages:
            if isinstance(st.op, DyRepBlock):
                yield from st.op.batchnorms()
            yield st.bn

    def parameters(self):
        out = []
        for st in self.stages:
            out += st.op.parameters()
            out += st.bn.parameters()
        return out

    def forward(self, x, mode="eval", update_stats=True):
        if self.pre_pad != (0, 0):
            x = T.pad2d(x, self.pre_pad)
        for st in self.stages:
            x = st.bn(st.op(x, mode, update_stats), mode, update_stats)
        return x

    __call__ = forward

    def to_structure(self):
        return {
            "kind": self.kind.value,
            "id": self.id,
            "pre_pad": list(self.pre_pad),
            "stages": [{"op": st.op.to_structure(), "bn": st.bn.to_structure()} for st in self.stages],
        }


class DyRepBlock:
    """Original ``K x K`` conv (optionally followed by its own BN) plus branches.

    Output is ``orig(x) + sum(branch(x))``. A block built inside a branch has
    no ``original_bn``: the stage BN after it plays that role.
    """

    kind = "block"

    def __init__(self, original: Conv2d, original_bn: Optional[BatchNorm2d] = None,
                 branches: Optional[List[Branch]] = None, depth=0):
        kh, kw = original.kernel_size
        if kh != kw or kh % 2 == 0:
            raise ValueError(f"block needs an odd square original kernel, got {(kh, kw)}")
        self.original = original
        self.original_bn = original_bn
        self.branches: List[Branch] = list(branches or [])
        self.target_K = kh
        self.depth = depth
        # Set by calibration: run branches with batch statistics, original in eval.
        self.calibrating = False

    @property
    def id(self):
        return self.original.name

    @property
    def in_channels(self):
        return self.original.in_channels

    @property
    def out_channels(self):
        return self.original.out_channels

    @property
    def stride(self):
        return self.original.stride

    @property
    def padding(self):
        return self.original.padding

    @property
    def last_out_hw(self):
        return self.original.last_out_hw

    def batchnorms(self):
        if self.original_bn is not None:
            yield self.original_bn
        for br in self.branches:
            yield from br.batchnorms()

    def parameters(self):
        out = list(self.original.parameters())
        if self.original_bn is not None:
            out += self.original_bn.parameters()
        for br in self.branches:
            out += br.parameters()
        return out

    def forward(self, x, mode="eval", update_stats=True):
        y = self.original(x, mode, update_stats)
        if self.original_bn is not None:
            y = self.original_bn(y, mode, update_stats)
        if not self.branches:
            return y
        bmode = "train" if self.calibrating else mode
        outs = [br(x, bmode, update_stats) for br in self.branches]
        for o in outs:
            if o.shape != y.shape:
                raise ValueError(f"block {self.id}: branch output {o.shape} != original output {y.shape}")
        return T.add(y, *outs)

    __call__ = forward

    def to_structure(self):
        return {
            "type": "block",
            "depth": self.depth,
            "original": self.original.to_structure(),
            "original_bn": None if self.original_bn is None else self.original_bn.to_structure(),
            "branches": [br.to_structure() for br in self.branches],
        }


def build_branch(kind, in_channels, out_channels, K, stride, block_id, padding=None,
                 dtype=np.float64, gamma_init=1.0, eps=1e-5, momentum=0.1):
    """Build an untrained branch of ``kind`` matching a ``K x K`` conv.

    ``padding`` is the original conv's symmetric padding (default ``(K-1)//2``).
    Branch geometry is laid out for "same" padding and shifted by the
    difference, cropping the input when the original pads less. Conv weights
    start at zero; the final BN gets ``gamma_init``.
    """
    kind = BranchKind(kind)
    p = (K - 1) // 2
    q = p if padding is None else int(padding)
    d = q - p
    bid = f"{block_id}/{kind.value}"
    C, D = in_channels, out_channels

    def conv(i, c_in, c_out, k, s, pad):
        return Conv2d(c_in, c_out, k, s, pad, bias=False, name=f"{bid}.{i}.op", dtype=dtype)

    def bn(i, c):
        return BatchNorm2d(c, f"{bid}.{i}.bn", eps, momentum, dtype)

    def split(v):
        # non-negative part goes to the conv, negative part is a crop
        return (v, 0) if v >= 0 else (0, v)

    pre_pad = (0, 0)
    if kind is BranchKind.KXK:
        stages = [Stage(conv(0, C, D, K, stride, (q, q)), bn(0, D))]
    elif kind is BranchKind.CONV1X1:
        own, crop = split(d)
        pre_pad = (crop, crop)
        stages = [Stage(conv(0, C, D, 1, stride, (own, own)), bn(0, D))]
    elif kind is BranchKind.CONV1X1_KXK:
        pre_pad = (q, q)
        stages = [Stage(conv(0, C, C, 1, 1, (0, 0)), bn(0, C)),
                  Stage(conv(1, C, D, K, stride, (0, 0)), bn(1, D))]
    elif kind is BranchKind.CONV1X1_AVG:
        pre_pad = (q, q)
        stages = [Stage(conv(0, C, D, 1, 1, (0, 0)), bn(0, D)),
                  Stage(AvgPool2d(D, K, stride, 0), bn(1, D))]
    elif kind is BranchKind.CONV1XK:
        own, crop = split(d)
        pre_pad = (crop, 0)
        stages = [Stage(conv(0, C, D, (1, K), stride, (own, q)), bn(0, D))]
    elif kind is BranchKind.CONVKX1:
        own, crop = split(d)
        pre_pad = (0, crop)
        stages = [Stage(conv(0, C, D, (K, 1), stride, (q, own)), bn(0, D))]
    else:
        if C != D or stride != 1:
            raise ValueError(
                f"residual branch needs in == out channels and stride 1, got {C}->{D}, stride {stride}"
            )
        pre_pad = (d, d)
        stages = [Stage(Identity(C), bn(0, D))]
    branch = Branch(kind, stages, pre_pad, bid)
    branch.final_bn.gamma.data[...] = gamma_init
    return branch


def residual_allowed(in_channels, out_channels, stride):
    return in_channels == out_channels and stride == 1


# ---------------------------------------------------------------------------
# traversal
# ---------------------------------------------------------------------------


@dataclass
class RepTarget:
    id: str
    kind: str  # "standalone" | "branch"
    depth: int
    owner: object
    attr: str
    conv: Conv2d
    bn: Optional[BatchNorm2d]


def _is_square_target(conv):
    kh, kw = conv.kernel_size
    return kh == kw and kh > 1


def iter_blocks(model):
    """Pre-order walk over every live block, outer before nested."""
    for _, _, unit in model.named_units():
        if isinstance(unit, DyRepBlock):
            yield from _walk_block(unit)


def _walk_block(block):
    yield block
    for br in block.branches:
        for st in br.stages:
            if isinstance(st.op, DyRepBlock):
                yield from _walk_block(st.op)


def _branch_targets(block, max_rep_depth):
    depth = block.depth + 1
    for br in block.branches:
        for st in br.stages:
            if isinstance(st.op, DyRepBlock):
                yield from _branch_targets(st.op, max_rep_depth)
            elif isinstance(st.op, Conv2d) and _is_square_target(st.op) and depth < max_rep_depth:
                yield RepTarget(st.op.name, "branch", depth, st, "op", st.op, None)


def enumerate_rep_targets(model, max_rep_depth=2):
    """Every conv with a square kernel ``K > 1`` that may still be expanded.

    Standalone (network-level) convs always qualify; a conv inside a branch
    qualifies while its depth is below ``max_rep_depth``. Already expanded
    convs are block originals and are not listed.
    """
    out = []
    for owner, attr, unit in model.named_units():
        if isinstance(unit, ConvBN):
            if _is_square_target(unit.conv):
                out.append(RepTarget(unit.id, "standalone", 0, owner, attr, unit.conv, unit.bn))
        elif isinstance(unit, DyRepBlock):
            out.extend(_branch_targets(unit, max_rep_depth))
    return out


def find_target(model, target_id, max_rep_depth=None):
    """Locate a target by id; ``max_rep_depth=None`` lists depth-capped convs too."""
    cap = 10**9 if max_rep_depth is None else max_rep_depth
    for t in enumerate_rep_targets(model, cap):
        if t.id == target_id:
            return t
    raise KeyError(f"no rep target with id {target_id!r}")
