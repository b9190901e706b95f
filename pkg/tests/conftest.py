import numpy as np
import pytest

from dyrep.data import synthetic_dataset
from dyrep.grow_prune import GrowConfig, expand
from dyrep.layers import BatchNorm2d
from dyrep.models import ModelSpec, build_model
from dyrep.rng import stream

TINY_SHAPE = (3, 12, 12)


def tiny_spec(family="vgg_like", widths=(8, 16), blocks=(1, 1)):
    return ModelSpec(family, list(widths), list(blocks), 10, TINY_SHAPE)


def randomize_bn(bn: BatchNorm2d, rng):
    """Non-trivial eval statistics so fused maps are not near identity."""
    c = bn.num_channels
    bn.gamma.data[...] = rng.uniform(0.5, 1.5, c)
    bn.beta.data[...] = rng.normal(0, 0.3, c)
    bn.running_mean[...] = rng.normal(0, 0.3, c)
    bn.running_var[...] = rng.uniform(0.5, 2.0, c)


def randomize_model(model, seed=0):
    rng = stream(seed, "test_randomize")
    for bn in model.batchnorms():
        randomize_bn(bn, rng)
    return model


def batch_stream(data, batch_size=32, seed=0):
    rng = stream(seed, "test_batches")
    while True:
        idx = rng.choice(len(data), batch_size, replace=False)
        yield data.images[idx]


@pytest.fixture
def tiny_data():
    return synthetic_dataset(0, 128, 10, TINY_SHAPE, 2.0, "train")


@pytest.fixture
def tiny_test_data():
    return synthetic_dataset(0, 64, 10, TINY_SHAPE, 2.0, "test")


@pytest.fixture
def tiny_model():
    return randomize_model(build_model(tiny_spec(), seed=0))


def expanded(model, data, target="s0.b0.conv", calib_batches=4, **grow):
    cfg = GrowConfig(calib_batches=calib_batches, **grow)
    return expand(model, target, cfg, batch_stream(data), seed=1)


def perturb_branches(block, seed=0, scale=0.3):
    """Move branch weights and BN affine params away from their silent init."""
    rng = stream(seed, "perturb", block.id)
    for br in block.branches:
        for p in br.parameters():
            p.data[...] = p.data + rng.normal(0, scale, p.shape)


def max_abs(a, b):
    return float(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)).max())


def random_branch(rng, kind, dtype=np.float64, fan_in_scaled=False):
    """A branch of ``kind`` with random geometry, weights and eval statistics.

    Weights are N(0, 0.5) draws, or N(0, 1/fan_in) with ``fan_in_scaled``
    so activations stay O(1) as in a trained network.
    Returns ``(branch, K, x)`` where ``x`` is a matching random input.
    """
    from dyrep.block import BranchKind, build_branch
    from dyrep.layers import Conv2d

    kind = BranchKind(kind)
    K = int(rng.choice([3, 5]))
    C = int(rng.integers(1, 5))
    residual = kind is BranchKind.RESIDUAL
    D = C if residual else int(rng.integers(1, 5))
    stride = 1 if residual else int(rng.integers(1, 3))
    padding = int(rng.integers(0, (K - 1) // 2 + 1))
    br = build_branch(kind, C, D, K, stride, "t", padding=padding, dtype=dtype)
    for st in br.stages:
        if isinstance(st.op, Conv2d):
            shape = st.op.weight.shape
            std = 1 / np.sqrt(np.prod(shape[1:])) if fan_in_scaled else 0.5
            st.op.weight.data[...] = rng.normal(0, std, shape)
        randomize_bn(st.bn, rng)
    size = int(rng.integers(K, K + 5))
    x = rng.normal(size=(int(rng.integers(1, 3)), C, size, size + int(rng.integers(0, 2)))).astype(dtype)
    return br, K, x


# ---------------------------------------------------------------------------
# acceptance report: one line per criterion at the end of the run
# ---------------------------------------------------------------------------

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
