import csv

import numpy as np
import pytest
from scipy import stats
from hypothesis import given, settings
from hypothesis import strategies as st

from dyrep.saliency import (BASE_METRICS, SaliencyLedger, UnsupportedMetric, argmax_id, compute_scores,
                            hvp_finite_difference, score_grad_norm, score_grasp, score_random, score_snip,
                            score_synflow, select_target, vote, write_score_rows)

RNG = np.random.default_rng(11)


def _pair(shapes=((3, 2, 3, 3), (3,))):
    theta = [RNG.normal(size=s) for s in shapes]
    grads = [RNG.normal(size=s) for s in shapes]
    return theta, grads


def _loop_sum(f, theta, grads):
    total = 0.0
    for t, g in zip(theta, grads):
        for a, b in zip(t.ravel(), g.ravel()):
            total += f(a, b)
    return total


def test_two_parameter_closed_forms():
    theta, grads = [np.array([2.0, -1.0])], [np.array([0.5, 3.0])]
    assert score_synflow(theta, grads) == -2.0
    assert score_snip(theta, grads) == 4.0
    assert score_grad_norm(theta, [np.array([3.0, 4.0])]) == 5.0


def test_zero_gradients_and_zero_parameters():
    theta, grads = _pair()
    zeros = [np.zeros_like(g) for g in grads]
    assert score_synflow(theta, zeros) == 0.0 and score_snip(theta, zeros) == 0.0
    assert score_grad_norm(theta, zeros) == 0.0
    assert score_grasp(theta, grads, zeros) == 0.0
    null = [np.zeros_like(t) for t in theta]
    assert score_synflow(null, grads) == 0.0 and score_snip(null, grads) == 0.0
    assert score_grad_norm(null, grads) == score_grad_norm(theta, grads)


def test_grasp_is_odd_in_theta():
    theta, grads = _pair()
    hvp = [RNG.normal(size=t.shape) for t in theta]
    assert score_grasp([-t for t in theta], grads, hvp) == -score_grasp(theta, grads, hvp)


def test_synflow_signed_and_absolute_match_elementwise_sum():
    theta, grads = _pair()
    flat = np.concatenate([(g * t).ravel() for t, g in zip(theta, grads)])
    assert score_synflow(theta, grads) == float(flat.sum())
    assert score_synflow(theta, grads, absolute=True) == float(np.abs(flat).sum())
    assert score_synflow(theta, grads) == pytest.approx(_loop_sum(lambda a, b: a * b, theta, grads), rel=1e-13)


def test_snip_matches_elementwise_sum():
    theta, grads = _pair()
    flat = np.concatenate([np.abs(g * t).ravel() for t, g in zip(theta, grads)])
    assert score_snip(theta, grads) == float(flat.sum())
    assert score_snip(theta, grads) == pytest.approx(_loop_sum(lambda a, b: abs(a * b), theta, grads), rel=1e-13)


def test_grad_norm_matches_elementwise_sum():
    theta, grads = _pair()
    flat = np.concatenate([g.ravel() for g in grads])
    assert score_grad_norm(theta, grads) == float(np.sqrt(np.dot(flat, flat)))
    assert score_grad_norm(theta, grads) == pytest.approx(_loop_sum(lambda a, b: b * b, theta, grads) ** 0.5,
                                                          rel=1e-13)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 30), seed=st.integers(0, 2**31 - 1))
def test_grasp_matches_quadratic_oracle(n, seed):
    # L = 1/2 t'At + b't: g = At + b and Hg = A g exactly
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(n, n))
    A = M @ M.T + n * np.eye(n)
    b = rng.normal(size=n)
    theta = rng.normal(size=n)
    grad_fn = lambda t: A @ t + b
    g = grad_fn(theta)
    hvp = hvp_finite_difference(grad_fn, theta, g)
    exact = -(A @ g) @ theta
    assert abs(score_grasp(theta, g, hvp) - exact) <= 1e-8 * max(abs(exact), 1e-300)


def test_hvp_of_zero_gradient_is_zero():
    assert np.array_equal(hvp_finite_difference(lambda t: t * 0, np.ones(3), np.zeros(3)), np.zeros(3))


def test_grasp_needs_hvp():
    theta, grads = _pair()
    with pytest.raises(UnsupportedMetric, match="Hessian"):
        compute_scores("grasp", theta, grads)


def test_missing_gradient_is_an_error():
    with pytest.raises(ValueError, match="backward"):
        score_snip([np.ones(2)], [None])


def test_random_score_is_seeded_per_op_and_step():
    assert score_random("a", 0, 3) == score_random("a", 0, 3)
    assert score_random("a", 0, 3) != score_random("a", 0, 4)
    assert score_random("a", 0, 3) != score_random("b", 0, 3)
    assert 0.0 <= score_random("a", 1) < 1.0


def test_random_scores_are_uniform():
    draws = [score_random("op", 0, step) for step in range(10_000)]
    assert stats.kstest(draws, "uniform").pvalue > 1e-3


def test_unknown_metric():
    with pytest.raises(ValueError, match="unknown metric"):
        compute_scores("fisher", *_pair())


# ---------------------------------------------------------------------------
# ledger and selection
# ---------------------------------------------------------------------------


def test_ledger_averages_over_iterations_and_resets():
    led = SaliencyLedger("snip", ["a", "b"])
    for s in ({"a": 1.0, "b": 4.0}, {"a": 3.0, "b": 0.0}):
        led.add(s)
        led.step()
    assert led.averaged() == {"a": 2.0, "b": 2.0}
    led.reset(["c"])
    assert led.sums == {"c": 0.0} and led.iterations == 0
    with pytest.raises(ValueError, match="no iterations"):
        led.averaged()


def test_ledger_state_round_trip():
    led = SaliencyLedger("synflow", ["x"])
    led.add({"x": -0.5})
    led.step()
    clone = SaliencyLedger.from_state(led.state())
    assert clone.state() == led.state()


def test_argmax_ties_go_to_lowest_id():
    assert argmax_id({"b": 1.0, "a": 1.0, "c": 0.5}) == "a"
    assert argmax_id({}) is None


def test_vote_majority_then_lowest_id():
    assert vote(["b", "a", "b"]) == "b"
    assert vote(["c", "a", "b"]) == "a"
    assert vote([]) is None


def test_vote_majority_wins():
    assert vote(["a", "b", "a", "c", "a"]) == "a"


def _ledger(scores, metric="synflow"):
    led = SaliencyLedger(metric, list(scores))
    led.add(scores)
    led.step()
    return led


def test_select_target_closed_forms():
    assert select_target(_ledger({"only": -3.0}), "synflow") == "only"
    assert select_target(_ledger({"a": 1.0, "b": 2.0, "c": 0.5}), "synflow") == "b"


@settings(max_examples=50, deadline=None)
@given(scores=st.dictionaries(st.sampled_from(list("abcdef")), st.floats(-100, 100), min_size=1),
       shift=st.floats(-100, 100), scale=st.floats(0.01, 100))
def test_select_target_invariant_to_shift_and_scale(scores, shift, scale):
    # distinct values only: affine maps can merge near-ties in floating point
    vals = sorted(scores.values())
    if any(b - a < 1e-6 for a, b in zip(vals, vals[1:])):
        return
    moved = {k: v * scale + shift for k, v in scores.items()}
    assert select_target(_ledger(moved), "synflow") == select_target(_ledger(scores), "synflow")


def test_select_target_empty_or_unscored():
    assert select_target(SaliencyLedger("synflow", []), "synflow") is None
    assert select_target(SaliencyLedger("synflow", ["a"]), "synflow") is None


def test_select_target_vote_uses_base_metric_argmaxes():
    ledgers = {}
    winners = {"random": "b", "grad_norm": "a", "snip": "b", "grasp": "c", "synflow": "a"}
    for m in BASE_METRICS:
        led = SaliencyLedger(m, ["a", "b", "c"])
        led.add({k: (1.0 if k == winners[m] else 0.0) for k in "abc"})
        led.step()
        ledgers[m] = led
    assert select_target(ledgers, "vote") == "a"  # a and b both get two votes


@settings(max_examples=50, deadline=None)
@given(scores=st.dictionaries(st.sampled_from(list("abcdefg")), st.floats(-1e3, 1e3), min_size=1),
       iters=st.integers(1, 5))
def test_select_target_is_brute_force_argmax(scores, iters):
    led = SaliencyLedger("synflow", scores)
    for _ in range(iters):
        led.add(scores)
        led.step()
    avg = led.averaged()
    best = max(avg.values())
    assert select_target(led, "synflow") == min(k for k, v in avg.items() if v == best)


def test_score_rows_mark_the_chosen_target(tmp_path):
    led = SaliencyLedger("snip", ["a", "b"])
    led.add({"a": 1.0, "b": 2.0})
    led.step()
    path = tmp_path / "scores.csv"
    write_score_rows(path, 1, {"snip": led}, "b")
    write_score_rows(path, 2, {"snip": led}, "b")
    rows = list(csv.DictReader(path.open()))
    assert [(r["interval"], r["op_id"], r["chosen"]) for r in rows] == [
        ("1", "a", "0"), ("1", "b", "1"), ("2", "a", "0"), ("2", "b", "1")]
    assert float(rows[1]["score"]) == 2.0
