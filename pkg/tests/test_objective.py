"""Regression loss, auxiliary representation loss, stop-gradient placement and the training objective."""

import numpy as np
import pytest

from builders import random_batch, random_model
from geomae import tensor as T
from geomae.errors import ContractError, DimensionError
from geomae.objective import (LossConfig, mae_aux_loss, objective_graph, regression_loss,
                              total_loss, training_objective)
from geomae.stafn import ModelConfig, StafnModel, forward, represent
from geomae.tensor import GradTape, StopGradientReplay, Tensor
from oracles import central_difference, rel_error

CFG = ModelConfig(n_nodes=4, d_in=2, n_in=3, n_out=2, d_model=8, n_heads=2, mlp_hidden=8)


def test_regression_examples():
    y_hat, y = Tensor([1.0, 2.0]), np.array([1.0, 4.0])
    assert regression_loss(y_hat, y, "L1").item() == 1.0
    assert regression_loss(y_hat, y, "L2").item() == 2.0
    assert regression_loss(y_hat, y_hat.data, "L1").item() == 0.0
    with pytest.raises(DimensionError):
        regression_loss(y_hat, np.zeros(3))
    with pytest.raises(ContractError):
        regression_loss(y_hat, y, "L3")


def test_regression_target_mask_excludes_entries():
    rng = np.random.default_rng(0)
    y_hat = Tensor(rng.normal(size=(3, 4)))
    y = rng.normal(size=(3, 4))
    mask = (rng.random((3, 4)) < 0.4).astype(np.uint8)
    base = regression_loss(y_hat, y, "L1", mask).item()
    keep = mask == 0
    assert base == pytest.approx(np.abs(y_hat.data - y)[keep].mean(), rel=1e-14)
    for _ in range(20):
        y2 = np.where(mask == 1, rng.normal(size=y.shape) * 1e3, y)
        assert regression_loss(y_hat, y2, "L1", mask).item() == base


def test_aux_loss_zero_for_identical_variants():
    h = Tensor(np.random.default_rng(1).normal(size=(2, 3, 4)))
    assert mae_aux_loss(h, [h, h, h], 0.25).item() == 0.0


def test_aux_loss_single_shifted_variant():
    rng = np.random.default_rng(2)
    h = rng.normal(size=(2, 3, 4))
    delta = rng.normal(size=h.shape)
    for phi in (0.0, 0.25, 1.3):
        got = mae_aux_loss(Tensor(h), [Tensor(h + delta)], phi).item()
        assert got == pytest.approx((1 + phi) * np.mean(delta**2), rel=1e-13)


def test_aux_loss_gradient_paths():
    rng = np.random.default_rng(3)
    hb = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    hv = [Tensor(rng.normal(size=(2, 3)), requires_grad=True) for _ in range(2)]
    with GradTape() as tape:
        loss = mae_aux_loss(hb, hv, 0.0)
    grads = T.backward(loss, tape, wrt=[hb, *hv])
    assert np.all(grads[hb].data == 0.0)
    for h in hv:
        np.testing.assert_allclose(grads[h].data, 2 * (h.data - hb.data) / h.size / 2, rtol=1e-13)
    phi = 0.4
    with GradTape() as tape:
        loss = mae_aux_loss(hb, hv, phi)
    grads = T.backward(loss, tape, wrt=[hb, *hv])
    want = sum(phi * 2 * (hb.data - h.data) / hb.size for h in hv) / 2
    np.testing.assert_allclose(grads[hb].data, want, rtol=1e-13)


def test_aux_loss_symmetric_in_variants_and_nonnegative():
    rng = np.random.default_rng(4)
    hb = Tensor(rng.normal(size=(3, 2)))
    hv = [Tensor(rng.normal(size=(3, 2))) for _ in range(4)]
    a = mae_aux_loss(hb, hv, 0.25).item()
    for _ in range(5):
        order = rng.permutation(4)
        assert mae_aux_loss(hb, [hv[i] for i in order], 0.25).item() == pytest.approx(a, rel=1e-14)
    assert a >= 0


def test_aux_loss_errors():
    h = Tensor(np.ones((2, 2)))
    with pytest.raises(ContractError):
        mae_aux_loss(h, [], 0.25)
    with pytest.raises(DimensionError):
        mae_aux_loss(h, [Tensor(np.ones((2, 3)))], 0.25)


def test_total_loss_examples():
    assert total_loss(Tensor(1.0), Tensor(2.0), 0.0).item() == 1.0
    assert total_loss(Tensor(1.0), Tensor(2.0), 0.75).item() == 2.5


def test_loss_config_validation():
    for bad in (dict(phi=-1), dict(lam=-0.1), dict(k=0), dict(regression_norm="huber")):
        with pytest.raises(ContractError):
            LossConfig(**bad)


def test_lambda_zero_matches_pure_regression_gradients():
    model = random_model(CFG, 5, scale=0.4)
    batch = random_batch(CFG, 3, np.random.default_rng(5))
    res = training_objective(batch, model, LossConfig(lam=0.0, k=3))
    with GradTape() as tape:
        loss = regression_loss(forward(batch.base, model), batch.y, "L1", batch.target_mask)
    grads = T.backward(loss, tape, wrt=model.params.values())
    assert res.loss == loss.item()
    for name, p in model.params.items():
        assert np.array_equal(res.grads[name], grads[p].data), name


def test_default_loss_settings_give_finite_loss_and_full_gradients():
    model = random_model(CFG, 6, scale=0.4)
    batch = random_batch(CFG, 4, np.random.default_rng(6))
    res = training_objective(batch, model, LossConfig(phi=0.25, lam=0.75, k=4))
    assert np.isfinite(res.loss) and res.l_mae > 0
    for name, g in res.grads.items():
        assert np.isfinite(g).all() and np.any(g != 0), name


def test_doubling_lambda_doubles_the_auxiliary_share():
    model = random_model(CFG, 7, scale=0.4)
    batch = random_batch(CFG, 2, np.random.default_rng(7))
    a = training_objective(batch, model, LossConfig(lam=0.5, k=2))
    b = training_objective(batch, model, LossConfig(lam=1.0, k=2))
    assert a.l_reg == b.l_reg and a.l_mae == b.l_mae
    assert (b.loss - b.l_reg) == pytest.approx(2 * (a.loss - a.l_reg), rel=1e-12)


def test_variant_count_must_match_k():
    model = random_model(CFG, 8)
    batch = random_batch(CFG, 2, np.random.default_rng(8))
    with pytest.raises(ContractError):
        objective_graph(batch, model, LossConfig(k=3))


def test_batched_variant_forward_matches_separate_forwards():
    model = random_model(CFG, 9, scale=0.4)
    batch = random_batch(CFG, 2, np.random.default_rng(9))
    cfg = LossConfig(phi=0.25, lam=0.75, k=2)
    loss, l_reg, l_mae = objective_graph(batch, model, cfg)
    hb = represent(batch.base, model)
    hv = [represent(v, model) for v in batch.variants]
    want_mae = mae_aux_loss(hb, hv, 0.25).item()
    want_reg = regression_loss(forward(batch.base, model), batch.y, "L1", batch.target_mask).item()
    assert l_mae.item() == pytest.approx(want_mae, rel=1e-12)
    assert l_reg.item() == pytest.approx(want_reg, rel=1e-12)


def frozen_copy(model: StafnModel) -> StafnModel:
    return StafnModel(model.config, {k: Tensor(v.data) for k, v in model.params.items()})


def test_with_phi_zero_detached_variants_give_exactly_zero_parameter_gradient():
    model = random_model(CFG, 10, scale=0.4)
    batch = random_batch(CFG, 2, np.random.default_rng(10))
    const = frozen_copy(model)
    with GradTape() as tape:
        hb = represent(batch.base, model)
        hv = [represent(v, const) for v in batch.variants]
        loss = mae_aux_loss(hb, hv, 0.0)
    grads = T.backward(loss, tape, wrt=model.params.values())
    assert loss.item() > 0
    for p in model.params.values():
        assert np.all(grads[p].data == 0.0)


def test_phi_branch_gradient_matches_finite_differences():
    cfg = ModelConfig(n_nodes=3, d_in=1, n_in=2, n_out=2, d_model=4, n_heads=2, mlp_hidden=4)
    model = random_model(cfg, 11, scale=0.4)
    batch = random_batch(cfg, 2, np.random.default_rng(11), batch=1)
    const = frozen_copy(model)
    hv = [represent(v, const) for v in batch.variants]

    def graph(m):
        return mae_aux_loss(represent(batch.base, m), hv, 0.6)

    with GradTape() as tape:
        loss = graph(model)
    grads = T.backward(loss, tape, wrt=model.params.values())
    arrays = {k: v.data.copy() for k, v in model.params.items()}
    with StopGradientReplay() as replay:
        graph(model)

        def f(arrs):
            replay.freeze()
            m = StafnModel(cfg, {k: Tensor(v) for k, v in arrs.items()})
            return graph(m).item()

        numeric = central_difference(f, arrays, 1e-5)  # 1e-4 leaves ~2e-4 truncation error here
    nonzero = 0
    for name, p in model.params.items():
        assert rel_error(grads[p].data, numeric[name]) < 1e-4, name
        nonzero += int(np.any(grads[p].data != 0))
    assert nonzero > len(model.params) // 2
