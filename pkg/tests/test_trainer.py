import json

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from dyrep import tensor as T
from dyrep.block import iter_blocks
from dyrep.data import Dataset, epoch_order, iterate_batches, synthetic_dataset
from dyrep.grow_prune import GrowConfig
from dyrep.models import build_model
from dyrep.serialization import ContainerError, read_container, write_container
from dyrep.trainer import (SGD, TrainConfig, TrainingDiverged, _grasp_hvp, cosine_lr, deploy, evaluate,
                           export_inference, load_checkpoint, load_inference, new_state, save_checkpoint,
                           sgd_step, train, verify_model)

from conftest import TINY_SHAPE, expanded, max_abs, perturb_branches, randomize_model, tiny_spec


def _p(a, name="p"):
    return T.Tensor(np.array(a, dtype=np.float64), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# SGD and schedule
# ---------------------------------------------------------------------------


def test_sgd_zero_grad_zero_decay_is_identity():
    p = _p([1.0, -2.0])
    sgd_step([p], [np.zeros(2)], 0.1, 0.9, 0.0, {})
    assert np.array_equal(p.data, [1.0, -2.0])


def test_sgd_first_step_closed_form():
    p = _p([1.0, -2.0])
    g = np.array([0.5, 0.25])
    sgd_step([p], [g], 0.1, 0.9, 1e-2, {})
    assert np.allclose(p.data, np.array([1.0, -2.0]) - 0.1 * (g + 1e-2 * np.array([1.0, -2.0])), rtol=0, atol=1e-15)


def test_sgd_three_step_recurrence():
    lr, m, wd = 0.05, 0.9, 1e-3
    theta = np.array([0.3, -1.1, 2.0])
    grads = [np.array([0.1, 0.2, -0.3]), np.array([-0.5, 0.0, 0.4]), np.array([0.05, -0.05, 0.5])]
    p, vel = _p(theta), {}
    for g in grads:
        sgd_step([p], [g], lr, m, wd, vel)
    # written out by hand
    t, v = theta.copy(), np.zeros(3)
    for g in grads:
        v = m * v + (g + wd * t)
        t = t - lr * v
    assert max_abs(p.data, t) <= 1e-12


def test_sgd_matches_torch_optimizer():
    theta = np.random.default_rng(0).normal(size=5)
    tp = torch.tensor(theta.copy(), requires_grad=True)
    opt = torch.optim.SGD([tp], lr=0.1, momentum=0.9, weight_decay=1e-4)
    p, vel = _p(theta), {}
    for k in range(4):
        g = np.random.default_rng(k + 1).normal(size=5)
        tp.grad = torch.tensor(g)
        opt.step()
        sgd_step([p], [g], 0.1, 0.9, 1e-4, vel)
    assert max_abs(p.data, tp.detach().numpy()) <= 1e-15


def test_new_parameters_start_with_zero_momentum_and_stale_ones_are_pruned():
    opt = SGD(0.1, 0.9, 0.0)
    a = _p([1.0], "a")
    a.grad = np.array([1.0])
    opt.step([a])
    b = _p([1.0], "b")
    a.grad, b.grad = np.array([1.0]), np.array([1.0])
    opt.step([a, b])
    assert a.data[0] == pytest.approx(1 - 0.1 - 0.1 * 1.9)
    assert b.data[0] == pytest.approx(1 - 0.1)
    opt.prune([b])
    assert set(opt.velocity) == {"b"}


def test_cosine_lr_endpoints():
    assert cosine_lr(0, 40, 0.1) == 0.1
    assert cosine_lr(40, 40, 0.1) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(20, 40, 0.1) == pytest.approx(0.05, abs=1e-17)


def test_train_config_validation():
    with pytest.raises(ValueError, match="interval"):
        TrainConfig(t=0)
    with pytest.raises(ValueError, match="epochs"):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError, match="metric"):
        TrainConfig(metric="fisher")
    with pytest.raises(ValueError, match="precision"):
        TrainConfig(precision="half")


# ---------------------------------------------------------------------------
# reference loop oracle
# ---------------------------------------------------------------------------


def _torch_forward(params, model, x):
    h = torch.tensor(x)
    for cell in model.cells:
        conv, bn = cell.unit.conv, cell.unit.bn
        h = F.conv2d(h, params[conv.weight.name], None, conv.stride, conv.padding)
        h = F.batch_norm(h, None, None, params[bn.gamma.name], params[bn.beta.name], True, 0.0, bn.eps)
        h = F.relu(h)
    return F.linear(h.mean(dim=(2, 3)), params["fc.weight"], params["fc.bias"])


def test_training_matches_reference_loop():
    data = synthetic_dataset(1, 96, 10, TINY_SHAPE, 1.0)
    cfg = TrainConfig(epochs=2, batch_size=32, dyrep=False, seed=4)
    model = build_model(tiny_spec(), seed=4)
    params = {n: torch.tensor(p.data.copy(), requires_grad=True) for n, p in model.named_parameters().items()}
    opt = torch.optim.SGD(list(params.values()), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    ref_losses = []
    for epoch in range(cfg.epochs):
        for group in opt.param_groups:
            group["lr"] = cfg.lr * 0.5 * (1 + np.cos(np.pi * epoch / cfg.epochs))
        for idx in iterate_batches(len(data), cfg.batch_size, epoch_order(cfg.seed, epoch, len(data))):
            opt.zero_grad()
            loss = F.cross_entropy(_torch_forward(params, model, data.images[idx]), torch.tensor(data.labels[idx]))
            loss.backward()
            opt.step()
            ref_losses.append(loss.item())

    losses = []
    state, _ = train(model, data, cfg, on_step=lambda s, loss: losses.append(loss))
    assert len(losses) == len(ref_losses) == 6
    assert max(abs(a - b) for a, b in zip(losses, ref_losses)) <= 1e-10
    for name, p in state.model.named_parameters().items():
        assert max_abs(p.data, params[name].detach().numpy()) <= 1e-10, name


def test_grasp_hvp_matches_exact_hessian_product_and_restores_weights(tiny_data):
    model = build_model(tiny_spec(), seed=0)
    xb, yb = T.Tensor(tiny_data.images[:32]), tiny_data.labels[:32]
    params = model.parameters()
    loss = T.cross_entropy(model.forward(xb, "train", update_stats=False), yb)
    loss.backward()
    grads = [p.grad.copy() for p in params]
    saved = [p.data.copy() for p in params]
    hvp = _grasp_hvp(model, xb, yb, params, [p.grad for p in params])
    assert all(np.array_equal(p.data, s) for p, s in zip(params, saved))
    assert all(np.array_equal(p.grad, g) for p, g in zip(params, grads))
    fine = _grasp_hvp(model, xb, yb, params, [p.grad for p in params], rel_step=1e-6)

    names = list(model.named_parameters())
    x_t, y_t = tiny_data.images[:32], torch.tensor(yb)

    def torch_loss(vec):
        tp, off = {}, 0
        for n, s in zip(names, saved):
            tp[n] = torch.tensor(vec[off:off + s.size].reshape(s.shape), requires_grad=True)
            off += s.size
        return F.cross_entropy(_torch_forward(tp, model, x_t), y_t), tp

    def torch_grad(vec):
        tl, tp = torch_loss(vec)
        return torch.cat([g.reshape(-1) for g in torch.autograd.grad(tl, list(tp.values()))]).numpy()

    theta = np.concatenate([s.ravel() for s in saved])
    g = np.concatenate([gr.ravel() for gr in grads])
    ours = np.concatenate([hvp[n].ravel() for n in names])
    ours_fine = np.concatenate([fine[n].ravel() for n in names])

    # same central-difference scheme, gradients from torch
    eps = 1e-3 * np.linalg.norm(theta) / np.linalg.norm(g)
    ref_fd = (torch_grad(theta + eps * g) - torch_grad(theta - eps * g)) / (2 * eps)
    assert np.linalg.norm(ours - ref_fd) / np.linalg.norm(ref_fd) < 1e-8

    # exact second-order product; only a small step stays clear of ReLU kinks
    tl, tp = torch_loss(theta)
    tg = torch.autograd.grad(tl, list(tp.values()), create_graph=True)
    exact = torch.autograd.grad(tg, list(tp.values()), grad_outputs=[t.detach() for t in tg])
    ref = np.concatenate([e.numpy().ravel() for e in exact])
    assert np.linalg.norm(ours_fine - ref) / np.linalg.norm(ref) < 1e-6


# ---------------------------------------------------------------------------
# structural schedule
# ---------------------------------------------------------------------------


def _small_cfg(**kw):
    base = dict(epochs=4, t=2, batch_size=32, grow=GrowConfig(calib_batches=3))
    base.update(kw)
    return TrainConfig(**base)


def test_interval_beyond_run_length_is_plain_sgd(tiny_data):
    plain = build_model(tiny_spec(), seed=2)
    dyrep = build_model(tiny_spec(), seed=2)
    l_plain, l_dyrep = [], []
    s1, h1 = train(plain, tiny_data, _small_cfg(epochs=3, t=4, dyrep=False), on_step=lambda s, l: l_plain.append(l))
    s2, h2 = train(dyrep, tiny_data, _small_cfg(epochs=3, t=4, dyrep=True), on_step=lambda s, l: l_dyrep.append(l))
    assert l_plain == l_dyrep
    assert all(r["events"] == [] for r in h2)
    a, b = s1.model.state_arrays(), s2.model.state_arrays()
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_four_epochs_interval_two_gives_two_rep_events(tiny_data, tmp_path):
    _, hist = train(build_model(tiny_spec()), tiny_data, _small_cfg(), run_dir=tmp_path)
    lines = [json.loads(l) for l in (tmp_path / "structure.jsonl").read_text().splitlines()]
    reps = [e for e in lines if e["event"] == "expand"]
    assert [e["epoch"] for e in reps] == [2, 4]
    assert len((tmp_path / "metrics.jsonl").read_text().splitlines()) == 4
    for e in reps:
        assert e["params_after"] > e["params_before"]
        assert e["s"] == [pytest.approx(0.01)] * len(e["kinds"])


@pytest.mark.parametrize("metric", ["random", "grad_norm", "snip", "grasp", "vote"])
def test_every_metric_drives_training(metric, tiny_data, tmp_path):
    state, hist = train(build_model(tiny_spec()), tiny_data, _small_cfg(epochs=2, t=2, metric=metric),
                        run_dir=tmp_path)
    assert len(state.model.blocks()) == 1
    rows = (tmp_path / "scores.csv").read_text().splitlines()
    n_metrics = 5 if metric == "vote" else 1
    assert len(rows) == 1 + 2 * n_metrics  # header + 2 targets per metric


def test_divergence_aborts_with_diagnostic_checkpoint(tiny_data, tmp_path):
    with pytest.raises(TrainingDiverged, match="non-finite"):
        with np.errstate(all="ignore"):
            train(build_model(tiny_spec()), tiny_data, _small_cfg(lr=1e300, dyrep=False), run_dir=tmp_path)
    state, _, meta, _ = load_checkpoint(tmp_path / "diverged.ckpt")
    assert meta["epoch"] == state.epoch


# ---------------------------------------------------------------------------
# deploy
# ---------------------------------------------------------------------------


def test_deploy_never_expanded_is_structurally_identical(tiny_model):
    d = deploy(tiny_model)
    assert d.to_structure() == tiny_model.to_structure()
    x = np.random.default_rng(0).normal(size=(4, *TINY_SHAPE))
    assert np.array_equal(d.predict_logits(x), tiny_model.predict_logits(x))


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-10), (np.float32, 1e-6)])
def test_deploy_expanded_model(dtype, tol, tiny_data):
    original = randomize_model(build_model(tiny_spec(), dtype=dtype))
    structure = original.to_structure()
    model = randomize_model(build_model(tiny_spec(), dtype=dtype))
    data = tiny_data.astype(dtype)
    for target in ("s0.b0.conv", "s1.b0.conv"):
        perturb_branches(expanded(model, data, target))
    expanded(model, data, "s0.b0.conv/kxk.0.op")
    d = deploy(model)
    assert d.num_parameters() == original.num_parameters()
    assert d.to_structure() == structure
    assert max_abs(d.predict_logits(data.images), model.predict_logits(data.images)) <= tol
    assert len(model.blocks()) == 3  # deploy works on a copy


def test_export_round_trip_and_determinism(tiny_data, tmp_path):
    model = randomize_model(build_model(tiny_spec()))
    perturb_branches(expanded(model, tiny_data, "s1.b0.conv"))
    export_inference(model, tmp_path / "a.dyrep")
    export_inference(model, tmp_path / "b.dyrep")
    assert (tmp_path / "a.dyrep").read_bytes() == (tmp_path / "b.dyrep").read_bytes()
    meta, arrays = read_container(tmp_path / "a.dyrep", "inference")
    assert all(a.dtype == np.dtype("<f4") for a in arrays.values())
    loaded = load_inference(tmp_path / "a.dyrep")
    deployed = deploy(model)
    assert loaded.to_structure() == deployed.to_structure()
    assert max_abs(loaded.predict_logits(tiny_data.images), deployed.predict_logits(tiny_data.images)) < 1e-5
    assert evaluate(loaded, tiny_data)[0] == evaluate(deployed, tiny_data)[0]


# ---------------------------------------------------------------------------
# checkpoints and verification
# ---------------------------------------------------------------------------


def test_checkpoint_resume_is_bit_identical(tiny_data, tmp_path):
    cfg = _small_cfg(epochs=4, t=1, metric="vote")
    full, _ = train(build_model(tiny_spec(), seed=5), tiny_data, cfg)

    first, _ = train(build_model(tiny_spec(), seed=5), tiny_data, cfg, stop_epoch=2)
    save_checkpoint(tmp_path / "mid.ckpt", first, cfg)
    state, cfg2, meta, _ = load_checkpoint(tmp_path / "mid.ckpt")
    assert cfg2 == cfg and meta["epoch"] == 2
    resumed, _ = train(state.model, tiny_data, cfg2, state=state)

    a, b = full.model.state_arrays(), resumed.model.state_arrays()
    assert full.model.to_structure() == resumed.model.to_structure()
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    assert full.optimizer.velocity.keys() == resumed.optimizer.velocity.keys()
    save_checkpoint(tmp_path / "x.ckpt", full, cfg)
    save_checkpoint(tmp_path / "y.ckpt", resumed, cfg)
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()


def test_verify_passes_fresh_and_fails_corrupted_branch(tiny_data, tmp_path):
    state, _ = train(build_model(tiny_spec()), tiny_data, _small_cfg(epochs=2, t=1))
    cfg = _small_cfg(epochs=2, t=1)
    save_checkpoint(tmp_path / "c.ckpt", state, cfg)
    _, _, _, probes = load_checkpoint(tmp_path / "c.ckpt")
    results = verify_model(load_checkpoint(tmp_path / "c.ckpt")[0].model, probes)
    assert results and all(ok for _, _, ok in results)

    meta, arrays = read_container(tmp_path / "c.ckpt", "checkpoint")
    name = next(k for k in sorted(arrays) if k.endswith("conv/1x1.0.op.weight") and "/kxk" not in k)
    block_id = name[len("model/"):].split("/")[0]
    arrays[name] = arrays[name] + 0.5
    write_container(tmp_path / "bad.ckpt", "checkpoint", meta, arrays)
    bad_state, _, _, probes = load_checkpoint(tmp_path / "bad.ckpt")
    failed = [b for b, _, ok in verify_model(bad_state.model, probes) if not ok]
    assert failed == [block_id]


def test_plain_model_verifies_vacuously(tiny_model):
    assert verify_model(tiny_model) == []


def test_corrupt_checkpoint_names_section(tiny_data, tmp_path):
    state = new_state(build_model(tiny_spec()), _small_cfg())
    save_checkpoint(tmp_path / "c.ckpt", state, _small_cfg())
    raw = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[:-200])
    with pytest.raises(ContainerError) as err:
        load_checkpoint(tmp_path / "trunc.ckpt")
    assert err.value.section.startswith("array:")
    (tmp_path / "v2.ckpt").write_bytes(raw.replace(b"checkpoint 1.0", b"checkpoint 2.0", 1))
    with pytest.raises(ContainerError, match="major version 2") as err:
        load_checkpoint(tmp_path / "v2.ckpt")
    assert err.value.section == "version"
    (tmp_path / "junk.ckpt").write_bytes(b"hello")
    with pytest.raises(ContainerError) as err:
        load_checkpoint(tmp_path / "junk.ckpt")
    assert err.value.section == "magic"
