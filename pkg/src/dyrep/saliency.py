"""Gradient-based operation scores and their per-interval ledger."""

import csv
from collections import Counter
from typing import Callable, Dict, Iterable, List, Optional

import numpy as np

from .rng import stream

METRICS = ("random", "grad_norm", "snip", "grasp", "synflow", "vote")
BASE_METRICS = ("random", "grad_norm", "snip", "grasp", "synflow")


class UnsupportedMetric(RuntimeError):
    pass


def _flat(arrays):
    if isinstance(arrays, np.ndarray):
        return arrays.astype(np.float64).ravel()
    parts = [np.asarray(a, dtype=np.float64).ravel() for a in arrays]
    return np.concatenate(parts) if parts else np.zeros(0)


def _check(theta, grads):
    if grads is None or (not isinstance(grads, np.ndarray) and any(g is None for g in grads)):
        raise ValueError("missing gradient for scored parameters; run backward first")
    t, g = _flat(theta), _flat(grads)
    if t.shape != g.shape:
        raise ValueError(f"parameter/gradient size mismatch: {t.shape} vs {g.shape}")
    return t, g


def score_synflow(theta, grads, absolute=False):
    """Sum of ``grad * theta`` over the op's parameters (signed unless ``absolute``)."""
    t, g = _check(theta, grads)
    prod = g * t
    return float(np.abs(prod).sum() if absolute else prod.sum())


def score_snip(theta, grads):
    t, g = _check(theta, grads)
    return float(np.abs(g * t).sum())


def score_grad_norm(theta, grads):
    _, g = _check(theta, grads)
    return float(np.sqrt(np.dot(g, g)))


def score_grasp(theta, grads, hvp):
    """``-sum((H g) * theta)`` given the Hessian-gradient product ``hvp``."""
    if hvp is None:
        raise UnsupportedMetric("grasp needs a Hessian-vector product for the same loss")
    t, _ = _check(theta, grads)
    h = _flat(hvp)
    if h.shape != t.shape:
        raise ValueError(f"hvp size {h.shape} does not match parameters {t.shape}")
    return float(-(h * t).sum())


def score_random(op_id, seed, step=0):
    return float(stream(seed, "random_score", op_id, step).random())


def hvp_finite_difference(grad_fn: Callable[[np.ndarray], np.ndarray], theta, g, rel_step=1e-3):
    """Central difference ``[grad(theta + e g) - grad(theta - e g)] / 2e``.

    ``e = rel_step * |theta| / |g|``; a zero gradient gives a zero product.
    """
    theta = np.asarray(theta, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    gn = np.linalg.norm(g)
    if gn == 0.0:
        return np.zeros_like(theta)
    tn = np.linalg.norm(theta)
    eps = rel_step * (tn if tn > 0 else 1.0) / gn
    return (np.asarray(grad_fn(theta + eps * g)) - np.asarray(grad_fn(theta - eps * g))) / (2 * eps)


def compute_scores(metric, theta, grads, op_id=None, seed=0, step=0, hvp=None, synflow_abs=False):
    if metric == "synflow":
        return score_synflow(theta, grads, synflow_abs)
    if metric == "snip":
        return score_snip(theta, grads)
    if metric == "grad_norm":
        return score_grad_norm(theta, grads)
    if metric == "grasp":
        return score_grasp(theta, grads, hvp)
    if metric == "random":
        return score_random(op_id, seed, step)
    raise ValueError(f"unknown metric {metric!r}")


class SaliencyLedger:
    """Running sums of per-iteration operation scores for one metric."""

    def __init__(self, metric: str, ids: Iterable[str] = ()):
        if metric not in BASE_METRICS:
            raise ValueError(f"ledger metric must be one of {BASE_METRICS}, got {metric!r}")
        self.metric = metric
        self.sums: Dict[str, float] = {i: 0.0 for i in ids}
        self.iterations = 0

    def add(self, scores: Dict[str, float]):
        for k, v in scores.items():
            self.sums[k] = self.sums.get(k, 0.0) + float(v)

    def step(self):
        self.iterations += 1

    def averaged(self) -> Dict[str, float]:
        if self.iterations < 1:
            raise ValueError("ledger has no iterations to average")
        return {k: v / self.iterations for k, v in self.sums.items()}

    def reset(self, ids: Iterable[str] = ()):
        self.sums = {i: 0.0 for i in ids}
        self.iterations = 0

    def state(self):
        return {"metric": self.metric, "iterations": self.iterations, "sums": dict(self.sums)}

    @classmethod
    def from_state(cls, s):
        led = cls(s["metric"])
        led.sums = {k: float(v) for k, v in s["sums"].items()}
        led.iterations = int(s["iterations"])
        return led


def argmax_id(scores: Dict[str, float]) -> Optional[str]:
    """Highest score; ties go to the lexicographically lowest id."""
    best = None
    for k in sorted(scores):
        if best is None or scores[k] > scores[best]:
            best = k
    return best


def select_target(ledgers, metric="synflow") -> Optional[str]:
    """Pick the op to expand, or ``None`` when nothing is scored.

    ``ledgers`` is a single ledger, or a ``{metric: ledger}`` mapping. For
    ``metric="vote"`` each base metric nominates its argmax and the most
    nominated id wins (ties to the lowest id).
    """
    if isinstance(ledgers, SaliencyLedger):
        ledgers = {ledgers.metric: ledgers}
    if metric != "vote":
        led = ledgers[metric]
        if not led.sums or led.iterations < 1:
            return None
        return argmax_id(led.averaged())
    nominees = []
    for m in BASE_METRICS:
        led = ledgers.get(m)
        if led is None or not led.sums or led.iterations < 1:
            continue
        nominees.append(argmax_id(led.averaged()))
    return vote(nominees)


def vote(nominees: List[str]) -> Optional[str]:
    if not nominees:
        return None
    counts = Counter(nominees)
    top = max(counts.values())
    return min(k for k, c in counts.items() if c == top)


def ledger_metrics(metric):
    return BASE_METRICS if metric == "vote" else (metric,)


def write_score_rows(path, interval, ledgers, chosen):
    """Append one row per target per metric: interval, op_id, metric, score, chosen."""
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["interval", "op_id", "metric", "score", "chosen"])
        for m, led in ledgers.items():
            avg = led.averaged()
            for op_id in sorted(avg):
                w.writerow([interval, op_id, m, repr(avg[op_id]), int(op_id == chosen)])
