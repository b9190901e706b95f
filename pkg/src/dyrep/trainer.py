"""Training with periodic grow/prune steps, deployment, checkpoints and export."""

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .block import DyRepBlock, enumerate_rep_targets, iter_blocks
from .data import Dataset, augment, epoch_order, iterate_batches
from .grow_prune import DepConfig, GrowConfig, dep_pass, expand
from .layers import BatchNorm2d, Conv2d, ConvBN
from .models import Network, network_from_structure
from .rep import collapse_block
from .rng import stream
from .saliency import (METRICS, SaliencyLedger, compute_scores, ledger_metrics, select_target,
                       write_score_rows)
from .serialization import ContainerError, canonical_json, read_container, write_container

log = logging.getLogger(__name__)

PRECISIONS = {"single": np.float32, "double": np.float64}


class TrainingDiverged(RuntimeError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


@dataclass
class TrainConfig:
    epochs: int = 40
    t: int = 5
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    seed: int = 0
    metric: str = "synflow"
    synflow_abs: bool = False
    precision: str = "double"
    augment: bool = False
    dyrep: bool = True
    eval_batch_size: int = 500
    grow: GrowConfig = field(default_factory=GrowConfig)
    dep: DepConfig = field(default_factory=DepConfig)

    def __post_init__(self):
        if isinstance(self.grow, dict):
            self.grow = GrowConfig(**self.grow)
        if isinstance(self.dep, dict):
            self.dep = DepConfig(**self.dep)
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.t < 1:
            raise ValueError("update interval t must be at least 1")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be 'single' or 'double', got {self.precision!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")

    @property
    def dtype(self):
        return np.dtype(PRECISIONS[self.precision])

    def to_dict(self):
        d = asdict(self)
        d["grow"]["branch_kinds"] = list(self.grow.branch_kinds)
        return d


def config_hash(obj):
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


def cosine_lr(epoch, total_epochs, lr0):
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def sgd_step(params, grads, lr, momentum, weight_decay, velocity):
    """``v <- m v + (g + wd * theta)``; ``theta <- theta - lr * v``; updates in place."""
    for p, g in zip(params, grads):
        d = np.asarray(g, dtype=np.float64) + weight_decay * p.data.astype(np.float64)
        v = velocity.get(p.name)
        v = d if v is None else momentum * v + d
        velocity[p.name] = v
        p.data[...] = p.data.astype(np.float64) - lr * v


class SGD:
    """Momentum SGD keyed by parameter name; new parameters start with zero momentum."""

    def __init__(self, lr=0.1, momentum=0.9, weight_decay=1e-4):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, params, lr=None):
        live = [p for p in params if p.grad is not None]
        sgd_step(live, [p.grad for p in live], self.lr if lr is None else lr,
                 self.momentum, self.weight_decay, self.velocity)

    def prune(self, params):
        names = {p.name for p in params}
        self.velocity = {k: v for k, v in self.velocity.items() if k in names}


# ---------------------------------------------------------------------------
# evaluation and deployment
# ---------------------------------------------------------------------------


def evaluate(model, data: Dataset, batch_size=500):
    """Eval-mode ``(top-1 accuracy, mean cross-entropy)``."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = model.predict_logits(data.images.astype(model.dtype), batch_size)
    logp = T.log_softmax(logits)
    loss = float(-logp[np.arange(len(data)), data.labels].mean())
    acc = float((logits.argmax(axis=1) == data.labels).mean())
    return acc, loss


def _deploy_unit(block: DyRepBlock):
    fused = collapse_block(block)
    orig = block.original
    has_bias = orig.bias is not None
    conv = Conv2d(orig.in_channels, orig.out_channels, orig.kernel_size, orig.stride, orig.padding,
                  has_bias, orig.name, orig.dtype)
    if block.original_bn is None:
        conv.set_params(fused)
        return conv
    bn = copy.deepcopy(block.original_bn)
    a, c = bn.params().scale_shift()
    conv.weight.data[...] = fused.weight / a[:, None, None, None]
    if has_bias:
        conv.bias.data[...] = (fused.bias - c) / a
    else:
        bn.beta.data[...] = fused.bias + bn.running_mean * a
    return ConvBN(conv, bn)


def deploy(model: Network) -> Network:
    """Copy of ``model`` with every block collapsed back to its original unit."""
    out = copy.deepcopy(model)
    for owner, attr, unit in list(out.named_units()):
        if isinstance(unit, DyRepBlock):
            setattr(owner, attr, _deploy_unit(unit))
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    model: Network
    optimizer: SGD
    epoch: int = 0  # completed epochs
    step: int = 0
    ledgers: Dict[str, SaliencyLedger] = field(default_factory=dict)


class RunLogger:
    """Line-delimited metrics/structure logs and the score CSV under ``run_dir``."""

    def __init__(self, run_dir=None):
        self.run_dir = None if run_dir is None else Path(run_dir)
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)

    def _append(self, name, row):
        if self.run_dir is not None:
            with (self.run_dir / name).open("a") as fh:
                fh.write(canonical_json(row) + "\n")

    def metrics(self, row):
        self._append("metrics.jsonl", row)

    def structure(self, row):
        self._append("structure.jsonl", row)

    def scores(self, interval, ledgers, chosen):
        if self.run_dir is not None:
            write_score_rows(self.run_dir / "scores.csv", interval, ledgers, chosen)


def _param_grads(params):
    return [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]


def _grasp_hvp(model, xb, yb, params, grads, rel_step=1e-3):
    """Finite-difference Hessian-gradient product over all parameters."""
    from .saliency import hvp_finite_difference

    saved = [p.data.copy() for p in params]
    sizes = [p.size for p in params]
    theta = np.concatenate([p.data.astype(np.float64).ravel() for p in params])
    g = np.concatenate([np.asarray(gr, dtype=np.float64).ravel() for gr in grads])

    def grad_fn(vec):
        off = 0
        for p, n in zip(params, sizes):
            p.data[...] = vec[off : off + n].reshape(p.shape)
            p.grad = None
            off += n
        loss = T.cross_entropy(model.forward(xb, "train", update_stats=False), yb)
        loss.backward()
        return np.concatenate([np.asarray(gr, dtype=np.float64).ravel() for gr in _param_grads(params)])

    try:
        hvp = hvp_finite_difference(grad_fn, theta, g, rel_step)
    finally:
        for p, s, gr in zip(params, saved, grads):
            p.data[...] = s
            p.grad = gr
    out, off = {}, 0
    for p, n in zip(params, sizes):
        out[p.name] = hvp[off : off + n]
        off += n
    return out


def calibration_stream(data: Dataset, batch_size, seed, epoch, dtype):
    """Endless shuffled training batches for BN calibration."""
    rng = stream(seed, "calib", epoch)
    while True:
        order = rng.permutation(len(data))
        for idx in iterate_batches(len(data), batch_size, order):
            yield data.images[idx].astype(dtype)


def _target_ids(model, cfg):
    return [t.id for t in enumerate_rep_targets(model, cfg.grow.max_rep_depth)]


def new_state(model, cfg: TrainConfig):
    opt = SGD(cfg.lr, cfg.momentum, cfg.weight_decay)
    ids = _target_ids(model, cfg)
    ledgers = {m: SaliencyLedger(m, ids) for m in ledger_metrics(cfg.metric)} if cfg.dyrep else {}
    return TrainState(model, opt, 0, 0, ledgers)


def _score_iteration(state, cfg, targets, xb, yb):
    params = state.model.parameters()
    need_hvp = any(m == "grasp" for m in state.ledgers)
    hvp = _grasp_hvp(state.model, xb, yb, params, _param_grads(params)) if need_hvp else None
    for m, led in state.ledgers.items():
        scores = {}
        for t in targets:
            ps = t.conv.parameters()
            theta = [p.data for p in ps]
            grads = [p.grad if p.grad is not None else np.zeros(p.shape) for p in ps]
            h = None if hvp is None else [hvp[p.name] for p in ps]
            scores[t.id] = compute_scores(m, theta, grads, t.id, cfg.seed, state.step, h, cfg.synflow_abs)
        led.add(scores)
        led.step()


def _structural_update(state, cfg, data, epoch, logger):
    model = state.model
    events = []
    interval = epoch // cfg.t
    chosen = select_target(state.ledgers, cfg.metric)
    if state.ledgers and all(led.iterations > 0 for led in state.ledgers.values()):
        logger.scores(interval, state.ledgers, chosen)
    if chosen is not None:
        before = model.num_parameters()
        calib = calibration_stream(data, cfg.batch_size, cfg.seed, epoch, model.dtype)
        block = expand(model, chosen, cfg.grow, calib, cfg.seed)
        events.append({"epoch": epoch, "event": "expand", "op_id": chosen,
                       "kinds": [b.kind.value for b in block.branches],
                       "s": [float(np.abs(b.final_bn.gamma.data).mean()) for b in block.branches],
                       "params_before": before, "params_after": model.num_parameters()})
    before = model.num_parameters()
    removed = dep_pass(model, cfg.dep)
    by_block: Dict[str, list] = {}
    for block_id, kind, s in removed:
        by_block.setdefault(block_id, []).append((kind, s))
    for block_id, items in by_block.items():
        events.append({"epoch": epoch, "event": "remove", "op_id": block_id,
                       "kinds": [k for k, _ in items], "s": [s for _, s in items],
                       "params_before": before, "params_after": model.num_parameters()})
    for ev in events:
        logger.structure(ev)
    state.optimizer.prune(model.parameters())
    ids = _target_ids(model, cfg)
    for led in state.ledgers.values():
        led.reset(ids)
    return events


def train(model: Network, data: Dataset, cfg: TrainConfig, test_data: Optional[Dataset] = None,
          run_dir=None, state: Optional[TrainState] = None, stop_epoch=None, checkpoint_every=0,
          on_step=None):
    """Run (or resume) training; returns ``(state, history)``.

    Each epoch runs SGD over shuffled batches, accumulating saliency scores
    for every rep target. Every ``cfg.t`` epochs the top-scoring conv is
    expanded and the branch cut rule runs over all blocks. ``stop_epoch``
    halts early (for checkpoint/resume); the schedule still spans
    ``cfg.epochs``. ``on_step(state, loss)`` is called after every update.
    """
    logger = RunLogger(run_dir)
    if state is None:
        state = new_state(model, cfg)
    model = state.model
    dtype = model.dtype
    last = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    history = []
    for epoch in range(state.epoch, last):
        e = epoch + 1
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr)
        order = epoch_order(cfg.seed, epoch, len(data))
        aug_rng = stream(cfg.seed, "augment", epoch)
        targets = enumerate_rep_targets(model, cfg.grow.max_rep_depth) if state.ledgers else []
        losses = []
        for idx in iterate_batches(len(data), cfg.batch_size, order):
            xb = data.images[idx]
            if cfg.augment:
                xb = augment(xb, aug_rng)
            xb = T.Tensor(xb.astype(dtype))
            yb = data.labels[idx]
            params = model.parameters()
            for p in params:
                p.grad = None
            loss = T.cross_entropy(model.forward(xb, "train"), yb)
            lval = float(loss.data)
            if not np.isfinite(lval):
                state.epoch = epoch
                if run_dir is not None:
                    save_checkpoint(Path(run_dir) / "diverged.ckpt", state, cfg)
                raise TrainingDiverged(f"non-finite loss {lval} at epoch {e}, step {state.step}", state)
            loss.backward()
            if state.ledgers:
                _score_iteration(state, cfg, targets, xb, yb)
            state.optimizer.step(params, lr)
            state.step += 1
            losses.append(lval)
            if on_step is not None:
                on_step(state, lval)

        events = []
        if cfg.dyrep and e % cfg.t == 0:
            events = _structural_update(state, cfg, data, e, logger)
        state.epoch = e
        row = {"epoch": e, "lr": lr, "train_loss": float(np.mean(losses)),
               "eval_accuracy": None, "eval_loss": None}
        if test_data is not None:
            row["eval_accuracy"], row["eval_loss"] = evaluate(model, test_data, cfg.eval_batch_size)
        row.update(params=model.num_parameters(), flops=model.flops(),
                   blocks=len(model.blocks()), events=[f"{ev['event']}:{ev['op_id']}" for ev in events])
        logger.metrics(row)
        history.append(row)
        log.info("epoch %d loss %.4f acc %s params %d", e, row["train_loss"], row["eval_accuracy"], row["params"])
        if run_dir is not None and checkpoint_every and e % checkpoint_every == 0:
            save_checkpoint(Path(run_dir) / "checkpoints" / f"epoch{e:04d}.ckpt", state, cfg)
    return state, history


# ---------------------------------------------------------------------------
# checkpoints, export, verification
# ---------------------------------------------------------------------------


def _probe_input(block, dtype=np.float64):
    size = max(7, block.target_K + 2)
    x = stream(0, "probe", block.id).normal(size=(2, block.in_channels, size, size))
    return x.astype(dtype)


def _block_eval(block, x):
    with T.no_grad():
        return block(T.Tensor(x), "eval").data.astype(np.float64)


def save_checkpoint(path, state: TrainState, cfg: TrainConfig, extra_meta=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    model = state.model
    cfg_dict = cfg.to_dict()
    arrays = {f"model/{k}": v for k, v in model.state_arrays().items()}
    arrays.update({f"optim/{k}": v for k, v in state.optimizer.velocity.items()})
    for block in iter_blocks(model):
        arrays[f"probe/{block.id}"] = _block_eval(block, _probe_input(block, model.dtype))
    meta = {
        "structure": model.to_structure(),
        "epoch": state.epoch,
        "step": state.step,
        "ledgers": {m: led.state() for m, led in state.ledgers.items()},
        "config": cfg_dict,
        "config_hash": config_hash(cfg_dict),
        "rng": {"seed": cfg.seed, "epoch": state.epoch, "step": state.step},
        "optimizer": {"lr": state.optimizer.lr, "momentum": state.optimizer.momentum,
                      "weight_decay": state.optimizer.weight_decay},
    }
    if extra_meta:
        meta.update(extra_meta)
    write_container(path, "checkpoint", meta, arrays)


def load_checkpoint(path):
    """Return ``(state, cfg, meta, probes)`` from a checkpoint file."""
    meta, arrays = read_container(path, "checkpoint")
    try:
        model = network_from_structure(meta["structure"])
        cfg = TrainConfig(**meta["config"])
        opt_meta = meta["optimizer"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ContainerError("structure", f"cannot rebuild model or config: {exc}") from None
    try:
        model.load_state_arrays({k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")})
    except KeyError as exc:
        raise ContainerError("arrays", str(exc)) from None
    opt = SGD(opt_meta["lr"], opt_meta["momentum"], opt_meta["weight_decay"])
    opt.velocity = {k[len("optim/"):]: v.astype(np.float64) for k, v in arrays.items() if k.startswith("optim/")}
    ledgers = {m: SaliencyLedger.from_state(s) for m, s in meta["ledgers"].items()}
    probes = {k[len("probe/"):]: v for k, v in arrays.items() if k.startswith("probe/")}
    state = TrainState(model, opt, meta["epoch"], meta["step"], ledgers)
    return state, cfg, meta, probes


def export_inference(model: Network, path):
    """Deploy ``model`` and write it as float32 arrays plus its structure."""
    deployed = deploy(model)
    write_container(path, "inference", {"structure": deployed.to_structure()},
                    deployed.state_arrays(), dtype="<f4")
    return deployed


def load_inference(path) -> Network:
    meta, arrays = read_container(path, "inference")
    try:
        model = network_from_structure(meta["structure"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ContainerError("structure", f"cannot rebuild model: {exc}") from None
    model.load_state_arrays(arrays)
    return model


def default_tolerance(dtype):
    return 1e-8 if np.dtype(dtype) == np.float64 else 1e-4


def verify_model(model: Network, probes=None, tol=None, n_inputs=3, seed=0):
    """Max deviation between each block and its collapsed conv (and the recorded probe).

    Returns ``[(block_id, deviation, ok)]``; non-finite deviations fail.
    """
    tol = default_tolerance(model.dtype) if tol is None else tol
    results = []
    for block in iter_blocks(model):
        conv = collapse_block(block)
        dev = 0.0
        rng = stream(seed, "verify", block.id)
        size = max(7, block.target_K + 2)
        for _ in range(n_inputs):
            x = rng.normal(size=(2, block.in_channels, size, size)).astype(model.dtype)
            d = np.abs(_block_eval(block, x) - conv.apply(x)).max()
            dev = max(dev, d) if np.isfinite(d) else float("inf")
        if probes is not None and block.id in probes:
            x = _probe_input(block, model.dtype)
            ref = probes[block.id]
            out = _block_eval(block, x)
            d = np.abs(out - ref).max() if out.shape == ref.shape else float("inf")
            dev = max(dev, d) if np.isfinite(d) else float("inf")
        results.append((block.id, float(dev), bool(np.isfinite(dev) and dev <= tol)))
    return results
