"""Equivalence transforms that reduce any branch or block to one conv.

Every function here is pure over :class:`ConvParams` / :class:`BnParams`
values and exact in eval mode (batch norm using running statistics).
"""

from typing import Sequence

import numpy as np

from .block import Branch, DyRepBlock
from .layers import AvgPool2d, Conv2d, Identity
from .tensor import BnParams, ConvParams


class CalibrationError(ValueError):
    """A branch BN holds initial statistics that were never calibrated."""


def fuse_conv_bn(conv: ConvParams, bn: BnParams) -> ConvParams:
    """Fold eval-mode BN into the preceding conv's weight and bias."""
    if bn.num_channels != conv.out_channels:
        raise ValueError(
            f"cannot fuse BN with {bn.num_channels} channels into conv with {conv.out_channels} outputs"
        )
    sigma = np.sqrt(bn.running_var + bn.eps)
    scale = bn.gamma / sigma
    weight = conv.weight * scale[:, None, None, None]
    bias = (conv.bias - bn.running_mean) * scale + bn.beta
    return ConvParams(weight, bias, conv.stride, conv.padding)


def pad_kernel(conv: ConvParams, target_K: int) -> ConvParams:
    """Center-pad a ``kh x kw`` kernel to ``target_K x target_K``.

    Padding grows by the same amount so the function is unchanged. A conv
    whose padding does not line up with the centered kernel is rejected.
    """
    kh, kw = conv.kernel_size
    if kh > target_K or kw > target_K:
        raise ValueError(f"kernel {(kh, kw)} larger than target {target_K}")
    dh, dw = (target_K - kh) // 2, (target_K - kw) // 2
    if (target_K - kh) % 2 or (target_K - kw) % 2:
        raise ValueError(f"kernel {(kh, kw)} can not be centered in {target_K}")
    if dh == 0 and dw == 0:
        return conv
    weight = np.pad(conv.weight, ((0, 0), (0, 0), (dh, dh), (dw, dw)))
    ph, pw = conv.padding
    return ConvParams(weight, conv.bias, conv.stride, (ph + dh, pw + dw))


def merge_parallel(convs: Sequence[ConvParams], target_K: int) -> ConvParams:
    """Additivity: sum same-configured convs after padding them to ``target_K``."""
    if not convs:
        raise ValueError("merge_parallel needs at least one conv")
    padded = [pad_kernel(c, target_K) for c in convs]
    ref = padded[0]
    for c in padded[1:]:
        if (c.weight.shape != ref.weight.shape or c.stride != ref.stride
                or c.padding != ref.padding):
            raise ValueError(
                f"incompatible parallel convs: {c.weight.shape}/s{c.stride}/p{c.padding} vs "
                f"{ref.weight.shape}/s{ref.stride}/p{ref.padding}"
            )
    if len(padded) == 1:
        return ref
    weight = np.zeros_like(ref.weight)
    bias = np.zeros_like(ref.bias)
    for c in padded:
        weight += c.weight
        bias += c.bias
    return ConvParams(weight, bias, ref.stride, ref.padding)


def merge_sequential(first: ConvParams, second: ConvParams) -> ConvParams:
    """Compose a 1x1 stride-1 conv followed by any unpadded conv into one conv.

    Any spatial padding must be applied to the input of ``first``; the sum
    inherits ``first.padding``.
    """
    if first.kernel_size != (1, 1) or first.stride != 1:
        raise ValueError(f"first stage must be a 1x1 stride-1 conv, got {first.kernel_size}/s{first.stride}")
    if second.padding != (0, 0):
        raise ValueError("second stage must be unpadded; pad the input of the first stage instead")
    if second.in_channels != first.out_channels:
        raise ValueError(
            f"channel mismatch: first outputs {first.out_channels}, second expects {second.in_channels}"
        )
    mix = first.weight[:, :, 0, 0]  # (M, C)
    weight = np.einsum("dmij,mc->dcij", second.weight, mix)
    bias = second.bias + np.einsum("dmij,m->d", second.weight, first.bias)
    return ConvParams(weight, bias, second.stride, first.padding)


def avgpool_to_conv(channels: int, K: int, stride: int = 1, padding=0) -> ConvParams:
    if K % 2 == 0:
        raise ValueError(f"average pool kernel must be odd, got {K}")
    weight = np.zeros((channels, channels, K, K))
    idx = np.arange(channels)
    weight[idx, idx] = 1.0 / (K * K)
    return ConvParams(weight, None, stride, padding)


def identity_to_conv(channels: int, target_K: int = 1, in_channels=None) -> ConvParams:
    if in_channels is not None and in_channels != channels:
        raise ValueError(f"identity needs in == out channels, got {in_channels} -> {channels}")
    if target_K % 2 == 0:
        raise ValueError(f"target kernel must be odd, got {target_K}")
    weight = np.zeros((channels, channels, target_K, target_K))
    c = target_K // 2
    idx = np.arange(channels)
    weight[idx, idx, c, c] = 1.0
    p = (target_K - 1) // 2
    return ConvParams(weight, None, 1, (p, p))


def _stage_conv(op) -> ConvParams:
    if isinstance(op, DyRepBlock):
        return collapse_block(op)
    if isinstance(op, Conv2d):
        return op.params()
    if isinstance(op, AvgPool2d):
        return avgpool_to_conv(op.channels, op.kernel_size, op.stride, op.padding)
    if isinstance(op, Identity):
        return identity_to_conv(op.channels)
    raise TypeError(f"unsupported stage op {type(op).__name__}")


def branch_to_conv(branch: Branch, target_K: int) -> ConvParams:
    """Collapse one branch (stages fused and chained) into a ``target_K`` conv."""
    acc = None
    for st in branch.stages:
        bn = st.bn.params()
        if not bn.calibrated:
            raise CalibrationError(
                f"branch {branch.id}: BN {st.bn.name} still has initial statistics; "
                "run calibration batches before collapsing"
            )
        fused = fuse_conv_bn(_stage_conv(st.op), bn)
        acc = fused if acc is None else merge_sequential(acc, fused)
    kh, kw = acc.kernel_size
    if kh > target_K or kw > target_K or (target_K - kh) % 2 or (target_K - kw) % 2:
        raise ValueError(f"branch {branch.id}: kernel {(kh, kw)} can not be centered in {target_K}")
    dh, dw = (target_K - kh) // 2, (target_K - kw) // 2
    # A crop in pre_pad may leave the intermediate padding negative; the
    # centered kernel padding brings it back to the block's padding.
    ph = acc.padding[0] + branch.pre_pad[0] + dh
    pw = acc.padding[1] + branch.pre_pad[1] + dw
    weight = np.pad(acc.weight, ((0, 0), (0, 0), (dh, dh), (dw, dw)))
    return ConvParams(weight, acc.bias, acc.stride, (ph, pw))


def original_conv(block: DyRepBlock) -> ConvParams:
    """The original path (conv, then its BN if present) as one conv."""
    conv = block.original.params()
    if block.original_bn is not None:
        conv = fuse_conv_bn(conv, block.original_bn.params())
    return conv


def collapse_block(block: DyRepBlock) -> ConvParams:
    """Original path plus every branch, nested blocks first, as one conv."""
    K = block.target_K
    convs = [original_conv(block)] + [branch_to_conv(br, K) for br in block.branches]
    return merge_parallel(convs, K)
