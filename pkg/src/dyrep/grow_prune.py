"""Function-preserving structural moves: grow a conv into a block, drop branches."""

from dataclasses import dataclass, field
from typing import Iterable, Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .block import (ALL_KINDS, BranchKind, DyRepBlock, build_branch, find_target,
                    iter_blocks, residual_allowed)
from .layers import ConvBN
from .rep import branch_to_conv, merge_parallel
from .rng import stream
from .tensor import ConvParams


class ExpansionError(ValueError):
    pass


@dataclass
class GrowConfig:
    gamma_init: float = 0.01
    calib_batches: int = 20
    branch_kinds: Tuple[str, ...] = tuple(k.value for k in ALL_KINDS)
    max_rep_depth: int = 2

    def __post_init__(self):
        self.branch_kinds = tuple(BranchKind(k).value for k in self.branch_kinds)
        if self.gamma_init <= 0:
            raise ValueError("gamma_init must be positive")
        if self.calib_batches < 1:
            raise ValueError("calib_batches must be at least 1")
        if self.max_rep_depth < 1:
            raise ValueError("max_rep_depth must be at least 1")


@dataclass
class DepConfig:
    lam: float = 0.02

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("dep lambda must be positive")


def absorb(block: DyRepBlock, delta: ConvParams, sign: float):
    """Add ``sign * delta`` to the eval-mode function of the block's original path.

    With an original BN (eval map ``a * y + c``) the weight change is divided
    by ``a`` and the bias change goes into ``beta``; otherwise both land on
    the conv directly.
    """
    conv = block.original
    p = conv.params()
    if delta.weight.shape != p.weight.shape or delta.stride != p.stride or delta.padding != p.padding:
        raise ValueError(
            f"block {block.id}: cannot absorb conv {delta.weight.shape}/p{delta.padding} into "
            f"{p.weight.shape}/p{p.padding}"
        )
    if block.original_bn is None:
        conv.weight.data[...] = p.weight + sign * delta.weight
        conv.ensure_bias().data[...] = p.bias + sign * delta.bias
        return
    bn = block.original_bn
    a, _ = bn.params().scale_shift()
    if np.any(np.abs(a) < 1e-12):
        raise ValueError(f"block {block.id}: original BN scale is zero; cannot absorb weights")
    conv.weight.data[...] = p.weight + sign * delta.weight / a[:, None, None, None]
    bn.beta.data[...] = bn.beta.data.astype(np.float64) + sign * delta.bias


def _calibrate(model, block, batches: Iterator, n_batches):
    """Forward-only passes that update branch BN statistics of ``block``."""
    block.calibrating = True
    try:
        with T.no_grad():
            for i in range(n_batches):
                try:
                    xb = next(batches)
                except StopIteration:
                    raise ExpansionError(
                        f"calibration stream exhausted after {i} of {n_batches} batches"
                    ) from None
                model.forward(xb, "eval")
    finally:
        block.calibrating = False
    for br in block.branches:
        for bn in br.batchnorms():
            bn.calibrated = True


def expand(model, target_id, cfg: GrowConfig, calib_stream: Iterable, seed=0):
    """Replace conv ``target_id`` by a block of freshly initialised branches.

    Branch BNs are calibrated on ``cfg.calib_batches`` batches, then the
    collapsed branches are subtracted from the original conv so the model's
    eval-mode function is unchanged. Returns the new block.
    """
    target = find_target(model, target_id)
    if target.depth >= cfg.max_rep_depth:
        raise ExpansionError(f"{target_id}: depth {target.depth} reached max_rep_depth {cfg.max_rep_depth}")
    conv = target.conv
    K = conv.kernel_size[0]
    block = DyRepBlock(conv, target.bn, [], target.depth)
    for kind in ALL_KINDS:
        if kind.value not in cfg.branch_kinds:
            continue
        if kind is BranchKind.RESIDUAL and not residual_allowed(conv.in_channels, conv.out_channels, conv.stride):
            continue
        br = build_branch(kind, conv.in_channels, conv.out_channels, K, conv.stride, block.id,
                          padding=conv.padding[0], dtype=conv.dtype, gamma_init=cfg.gamma_init)
        for i, st in enumerate(br.stages):
            if hasattr(st.op, "reset_parameters"):
                st.op.reset_parameters(stream(seed, "branch_init", br.id, i))
            # initial statistics are placeholders until calibration
            st.bn.calibrated = False
        block.branches.append(br)

    original_unit = getattr(target.owner, target.attr)
    setattr(target.owner, target.attr, block)
    try:
        _calibrate(model, block, iter(calib_stream), cfg.calib_batches)
    except Exception:
        setattr(target.owner, target.attr, original_unit)
        raise
    if block.branches:
        total = merge_parallel([branch_to_conv(br, K) for br in block.branches], K)
        absorb(block, total, -1.0)
    return block


def branch_importance(branch) -> float:
    """Mean absolute ``gamma`` of the branch's last BN."""
    g = np.abs(branch.final_bn.gamma.data.astype(np.float64))
    s = float(g.sum() / g.size)
    branch.importance = s
    return s


def dep_select(block: DyRepBlock, cfg: DepConfig) -> List[int]:
    """Indices of branches to cut: ``s_j < mean`` once ``std(s) > lambda``."""
    if len(block.branches) < 2:
        return []
    s = np.array([branch_importance(b) for b in block.branches])
    if np.std(s) <= cfg.lam:
        return []
    mean = s.mean()
    return [j for j, v in enumerate(s) if v < mean]


def remove_branch(block: DyRepBlock, index: int):
    """Fold branch ``index`` into the original conv and delete it."""
    if not 0 <= index < len(block.branches):
        raise IndexError(f"block {block.id} has {len(block.branches)} branches, no index {index}")
    br = block.branches[index]
    absorb(block, branch_to_conv(br, block.target_K), +1.0)
    del block.branches[index]
    return br


def dep_pass(model, cfg: DepConfig):
    """Run the cut rule on every live block; returns ``(block_id, kind, s_j)`` per removal."""
    removed = []
    for block in list(iter_blocks(model)):
        if not any(b is block for b in iter_blocks(model)):
            continue
        local = []
        for j in sorted(dep_select(block, cfg), reverse=True):
            br = block.branches[j]
            local.append((block.id, br.kind.value, br.importance))
            remove_branch(block, j)
        removed.extend(reversed(local))
    return removed
