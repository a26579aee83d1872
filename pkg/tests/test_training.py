import math

import numpy as np
import pytest
import torch

from flowad import metrics as mt
from flowad import scenario as sc
from flowad import training as tr
from flowad.unrolled import ModelParams

DESK = sc.PRESETS["desk"]


@pytest.fixture(scope="module")
def scenarios():
    return sc.generate_dataset(DESK, 4, 31)


def cfg(**kw):
    base = dict(n_steps=4, i0=1, i1=3, batch_size=2, K_sub=2, eval_every=2)
    base.update(kw)
    return tr.TrainConfig(**base)


# ---- config and schedules --------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(n_steps=10, i0=5, i1=5)
    with pytest.raises(ValueError):
        tr.TrainConfig(n_steps=10, i0=2, i1=11)
    with pytest.raises(ValueError):
        tr.TrainConfig(gradient="magic")
    with pytest.raises(ValueError):
        tr.TrainConfig(K_sub=0)
    tr.TrainConfig(n_steps=0)


def test_beta_schedule():
    c = tr.TrainConfig(n_steps=20000, i0=5000, i1=11000)
    assert tr.beta_schedule(0, c) == 10.0
    assert tr.beta_schedule(5000, c) == 10.0
    assert tr.beta_schedule(11000, c) == 100.0
    assert tr.beta_schedule(19999, c) == 100.0
    assert tr.beta_schedule(8000, c) == pytest.approx(math.sqrt(1000.0), rel=1e-12)
    vals = [tr.beta_schedule(i, c) for i in range(0, 20000, 37)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert tr.beta_schedule(5001, c) == pytest.approx(10.0, rel=1e-3)
    assert tr.beta_schedule(10999, c) == pytest.approx(100.0, rel=1e-3)


def test_lr_and_wd_schedules():
    c = tr.TrainConfig(n_steps=600, i0=100, i1=300)
    assert tr.lr_schedule(0, c) == 0.01
    assert tr.lr_schedule(99, c) == 0.01
    assert tr.lr_schedule(100, c) == 0.01 * 0.25
    assert tr.lr_schedule(599, c) == pytest.approx(0.01 * 0.25**5)
    assert len({tr.lr_schedule(i, c) for i in range(600)}) == 6
    assert tr.wd_schedule(0, c) == 0.05 and tr.wd_schedule(419, c) == 0.05
    assert tr.wd_schedule(420, c) == 0.01


# ---- optimizer ------------------------------------------------------------------------


def test_adamw_pure_decay():
    theta, _ = tr.adamw_step(tr.OptimizerState.zeros(1), np.array([1.0]), np.array([0.0]), 0.01, 0.01)
    assert theta[0] == pytest.approx(0.9999, abs=1e-15)
    rng = np.random.default_rng(0)
    th = rng.standard_normal(20)
    new, _ = tr.adamw_step(tr.OptimizerState.zeros(20), th, np.zeros(20), 0.1, 0.5)
    assert np.all(np.abs(new) < np.abs(th))


def test_adamw_first_step_hand():
    lr, wd, eps = 0.01, 0.1, 1e-8
    theta, opt = tr.adamw_step(tr.OptimizerState.zeros(1), np.array([2.0]), np.array([1.0]), lr, wd)
    assert theta[0] == pytest.approx(2.0 - lr / (1 + eps) - lr * wd * 2.0, abs=1e-15)
    assert opt.step == 1 and opt.m[0] == pytest.approx(0.1) and opt.v[0] == pytest.approx(0.001)
    with pytest.raises(ValueError):
        tr.adamw_step(opt, np.zeros(2), np.zeros(2), lr, wd)


@pytest.mark.parametrize("wd", [0.0, 0.05])
def test_adamw_matches_torch_optimizer(wd):
    rng = np.random.default_rng(1)
    theta = rng.standard_normal(6)
    ref = torch.tensor(theta.copy(), requires_grad=True)
    topt = torch.optim.AdamW([ref], lr=0.02, betas=(0.9, 0.999), eps=1e-8, weight_decay=wd)
    opt = tr.OptimizerState.zeros(6)
    for _ in range(25):
        g = rng.standard_normal(6) if wd else np.full(6, 0.3)
        ref.grad = torch.tensor(g)
        topt.step()
        theta, opt = tr.adamw_step(opt, theta, g, 0.02, wd)
    np.testing.assert_allclose(theta, ref.detach().numpy(), rtol=1e-12, atol=1e-14)


def test_optimizer_sidecar_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    opt = tr.OptimizerState(rng.standard_normal(5), rng.random(5), 17)
    opt.save(tmp_path / "opt.json")
    back = tr.OptimizerState.load(tmp_path / "opt.json")
    assert np.array_equal(back.m, opt.m) and np.array_equal(back.v, opt.v) and back.step == 17


# ---- finite differences ---------------------------------------------------------------------


def test_grad_estimate_quadratic():
    rng = np.random.default_rng(3)
    theta = rng.standard_normal(30) * 3
    f = lambda th: 0.5 * float(th @ th)
    g = tr.grad_estimate(f, theta, 1e-4)
    np.testing.assert_allclose(g, theta, rtol=1e-6, atol=1e-8)
    assert np.array_equal(g, tr.grad_estimate(f, theta, 1e-4))


def test_grad_estimate_richardson_ratio():
    theta = np.array([0.7, -1.3, 2.1, 0.4])
    f = lambda th: 0.5 * float(th @ th) + 0.25 * float(np.sum(th**4))
    exact = theta + theta**3
    e1 = np.abs(tr.grad_estimate(f, theta, 1e-2) - exact)
    e2 = np.abs(tr.grad_estimate(f, theta, 5e-3) - exact)
    ratio = e1 / e2
    assert np.all(np.abs(ratio - 4.0) <= 0.8)


def test_grad_estimate_saturation_guard():
    stats = tr.FDStats()
    f = lambda th: math.inf if th[0] > 0.5 else float(th[1] ** 2)
    g = tr.grad_estimate(f, np.array([0.5, 1.0]), 1e-3, stats)
    assert g[0] == 0.0 and stats.saturated == 1 and stats.evaluations == 4
    assert g[1] == pytest.approx(2.0, rel=1e-6)


# ---- loss --------------------------------------------------------------------------------


def test_loss_suppressed_model_is_half(scenarios):
    m = ModelParams.create(2, m_bias=1e12)
    batch = tr.Batch.build(scenarios[:2], R_cpd=4)
    assert tr.loss(m, batch, 10.0, 3) == -0.5


def test_loss_k1_equals_full_soft_auc(scenarios):
    m = ModelParams.create(2)
    batch = tr.Batch.build(scenarios[:2], R_cpd=4)
    from flowad.unrolled import forward
    vals = []
    for s, init in zip(batch.scenarios, batch.inits):
        A = forward(s.observation, m, init=init).A
        vals.append(-mt.soft_auc(mt.normalize_scores(A), s.truth, 10.0))
    assert tr.loss(m, batch, 10.0, 1) == pytest.approx(math.fsum(vals) / 2, rel=1e-12)


def test_perfect_scores_loss_tends_to_minus_one():
    truth = np.zeros(50)
    truth[:5] = 1
    scores = torch.tensor(truth * 0.9 + 0.05, dtype=torch.float64)
    vals = [-float(mt.subsampled_soft_auc(scores, truth, b, 2)) for b in (1.0, 10.0, 100.0)]
    assert vals[0] > vals[1] > vals[2] and vals[2] == pytest.approx(-1.0, abs=1e-15)


def test_loss_skips_scenarios_without_anomalies(scenarios, caplog):
    empty = sc.Scenario(**{**scenarios[0].__dict__, "A": np.zeros_like(scenarios[0].A)})
    m = ModelParams.create(2)
    with_empty = tr.Batch.build([scenarios[0], empty], R_cpd=4)
    alone = tr.Batch.build([scenarios[0]], R_cpd=4)
    assert tr.loss(m, with_empty, 10.0, 2) == tr.loss(m, alone, 10.0, 2)
    _, g1 = tr.loss_and_grad(m, with_empty, 10.0, 2)
    _, g2 = tr.loss_and_grad(m, alone, 10.0, 2)
    assert np.array_equal(g1, g2)
    assert "skipping" in caplog.text
    with pytest.raises(ValueError):
        tr.loss(m, tr.Batch.build([empty], R_cpd=4), 10.0, 2)


def test_autograd_matches_finite_differences(scenarios):
    m = ModelParams.create(2, lam=0.5, mu=0.05)
    rng = np.random.default_rng(4)
    theta = m.flatten() + 0.05 * rng.standard_normal(m.size)
    batch = tr.Batch.build(scenarios[:1], R_cpd=4)
    value, grad = tr.loss_and_grad(m, batch, 10.0, 2, theta)
    assert value == pytest.approx(tr.loss(m, batch, 10.0, 2, theta), rel=1e-12)
    # small step: larger probes straddle soft-threshold kinks of the forward pass
    fd = tr.grad_estimate(lambda th: tr.loss(m, batch, 10.0, 2, th), theta, 1e-6)
    np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-7 * np.abs(fd).max())


# ---- training --------------------------------------------------------------------------------


def test_train_zero_steps_returns_initial(scenarios):
    m = ModelParams.create(2)
    res = tr.train(scenarios, m, tr.TrainConfig(n_steps=0))
    assert np.array_equal(res.params.flatten(), m.flatten()) and res.history == []


def test_train_deterministic_and_history(scenarios):
    m = ModelParams.create(2)
    c = cfg(seed=5)
    a = tr.train(scenarios[:3], m, c, val_set=scenarios[3:])
    b = tr.train(scenarios[:3], m, c, val_set=scenarios[3:])
    assert a.history == b.history
    assert np.array_equal(a.params.flatten(), b.params.flatten())
    assert [r["step"] for r in a.history] == [0, 1, 2, 3, 4]
    assert a.history[0]["val_auc"] is not None and a.history[1]["val_auc"] is None
    assert a.history[2]["val_auc"] is not None and a.history[4]["val_auc"] is not None
    assert not np.array_equal(a.params.flatten(), m.flatten())


def test_train_noop_optimizer_constant_loss(scenarios):
    m = ModelParams.create(2)
    c = cfg(lr0=1e-300, wd0=0.0, wd1=0.0, beta0=20.0, beta1=20.0, batch_size=3, n_steps=3, i0=0, i1=3)
    res = tr.train(scenarios[:3], m, c)
    losses = [r["loss"] for r in res.history]
    assert losses[0] == losses[1] == losses[2]


def test_train_fd_backend_runs(scenarios):
    m = ModelParams.create(1, adaptive=False)
    res = tr.train(scenarios[:2], m, cfg(gradient="fd", n_steps=2, i0=0, i1=2))
    assert len(res.history) == 2 and res.optimizer.step == 2


def test_history_tsv(tmp_path):
    tr.write_history_tsv(tmp_path / "h.tsv", [{"step": 0, "loss": None, "val_auc": 0.5},
                                              {"step": 1, "loss": -0.25, "val_auc": None}], header="# x")
    assert (tmp_path / "h.tsv").read_text().splitlines() == ["# x", "step\tloss\tval_auc", "0\t\t0.5", "1\t-0.25\t"]


def test_fold_indices():
    assert [f.tolist() for f in tr.fold_indices(4, 2)] == [[0, 1], [2, 3]]
    folds = tr.fold_indices(250, 5)
    assert [f.size for f in folds] == [50] * 5 and folds[1][0] == 50
    with pytest.raises(ValueError):
        tr.fold_indices(3, 4)
    with pytest.raises(ValueError):
        tr.fold_indices(3, 1)


def test_cross_validate(scenarios):
    m = ModelParams.create(1, adaptive=False)
    res = tr.cross_validate(scenarios, m, cfg(n_steps=1, i0=0, i1=1), 2)
    assert len(res.folds) == 2
    aucs = [a for _, a in res.folds]
    assert res.mean == pytest.approx(np.mean(aucs)) and res.sd == pytest.approx(np.std(aucs, ddof=1))


# ---- grid search and classical baselines ------------------------------------------------


def test_grid_single_point(scenarios):
    g = tr.grid_search(scenarios[:2], 2, [-1.0], [-2.0])
    assert g.best == (-1.0, -2.0, 0.0) and g.grid.shape == (1, 1, 1)
    expect = np.mean([tr.classical_auc(s, "tbsca-aug", math.exp(-1), math.exp(-2), 1.0, 2) for s in scenarios[:2]])
    assert g.best_auc == pytest.approx(expect, rel=1e-14)


def test_grid_ties_go_to_smallest(scenarios, monkeypatch):
    monkeypatch.setattr(tr, "classical_auc", lambda *a, **k: 0.7)
    g = tr.grid_search(scenarios[:1], 2, [1.0, -3.0, 0.0], [2.0, -1.0])
    assert g.best == (-3.0, -1.0, 0.0)
    assert g.grid.shape == (3, 2, 1) and np.all(g.grid == 0.7)


def test_classical_auc_trace_and_errors(scenarios):
    s = scenarios[0]
    trace = tr.classical_auc(s, "tbsca", 1.0, 0.1, 1.0, 3, trace=True)
    assert len(trace) == 3 and trace[-1] == tr.classical_auc(s, "tbsca", 1.0, 0.1, 1.0, 3)
    with pytest.raises(ValueError):
        tr.classical_auc(s, "pca", 1.0, 0.1, 1.0, 3)
