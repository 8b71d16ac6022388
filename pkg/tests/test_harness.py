"""Configuration, optimizer, checkpoints, training loop and the experiment grid."""

import math

import numpy as np
import pytest

from geomae.data import synth_generate
from geomae.errors import ContractError, SchemaError
from geomae.harness import Checkpoint, Trainer, load_config, parse_config_text
from geomae.harness.config import AdamWConfig, diff
from geomae.harness.experiments import (VARIANT_LABELS, ResultRow, ablation_checks, evaluate_grid, evaluate_model,
                                        format_table, read_rows, report, summarize, variant_config, write_rows)
from geomae.harness.optim import AdamWState, adamw_step
from geomae.harness.trainer import split_dataset
from geomae.tensor import Tensor

TINY = {
    "model.d_model": 8, "model.n_heads": 2, "model.mlp_hidden": 8,
    "data.n_in": 4, "data.n_out": 3, "data.train_stride": 2,
    "loss.k": 2, "train.batch_size": 8, "train.max_batches": 3, "train.epochs": 2,
    "optim.lr": 2e-3, "eval.seeds": 2,
}


@pytest.fixture(scope="module")
def dataset():
    return synth_generate(4, 240, 2, seed=3)


@pytest.fixture(scope="module")
def config():
    return load_config("desk").with_values(**TINY)


# config


def test_shipped_presets():
    desk = load_config("desk")
    assert (desk.model.d_model, desk.loss.k, desk.optim.lr) == (16, 2, 2e-3)
    full = load_config("full")
    assert (full.model.n_blocks, full.model.d_model, full.model.n_heads) == (4, 512, 8)
    assert (full.loss.k, full.loss.phi, full.loss.lam) == (4, 0.25, 0.75)
    assert (full.optim.lr, full.optim.weight_decay) == (2e-4, 1e-3)
    assert (full.data.n_in, full.data.n_out) == (12, 12)


def test_config_text_round_trip(config):
    assert parse_config_text(config.to_text()) == config
    assert parse_config_text(config.to_text()).digest() == config.digest()


def test_config_parsing_and_errors():
    cfg = parse_config_text("# c\nmodel.residual = false\nmask.train_rate_range = 0.3, 0.6  # trailing\n")
    assert cfg.model.residual is False and cfg.mask.train_rate_range == (0.3, 0.6)
    for bad in ("model.d_model 3", "nope.key = 1", "model.d_model = x", "model.residual = maybe",
                "optim.lr = 0", "train.epochs = 0"):
        with pytest.raises(ContractError):
            parse_config_text(bad)
    with pytest.raises(ContractError):
        load_config("/nonexistent/file.cfg")


# optimizer


def test_adamw_single_scalar_step():
    p = {"w": Tensor(np.array([1.0]), requires_grad=True)}
    hyper = AdamWConfig(lr=0.1, weight_decay=0.01)
    state = AdamWState()
    adamw_step(p, {"w": np.array([0.5])}, state, hyper)
    m_hat, v_hat = 0.5, 0.25
    want = 1.0 * (1 - 0.1 * 0.01) - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert p["w"].data[0] == pytest.approx(want, rel=1e-14)
    assert state.step == 1


def test_adamw_decay_is_decoupled_from_gradient_scale():
    hyper = AdamWConfig(lr=0.01, weight_decay=0.5)
    p = {"w": Tensor(np.array([2.0, -3.0]), requires_grad=True)}
    adamw_step(p, {"w": np.zeros(2)}, AdamWState(), hyper)
    np.testing.assert_allclose(p["w"].data, [2.0 * 0.995, -3.0 * 0.995], rtol=1e-15)


def test_adamw_matches_loop_reference_over_steps():
    rng = np.random.default_rng(0)
    hyper = AdamWConfig(lr=0.05, weight_decay=0.1)
    theta = rng.normal(size=3)
    p = {"w": Tensor(theta.copy(), requires_grad=True)}
    state = AdamWState()
    ref, m, v = theta.tolist(), [0.0] * 3, [0.0] * 3
    for t in range(1, 6):
        g = rng.normal(size=3)
        adamw_step(p, {"w": g}, state, hyper)
        for i in range(3):
            m[i] = 0.9 * m[i] + 0.1 * g[i]
            v[i] = 0.999 * v[i] + 0.001 * g[i] ** 2
            step = (m[i] / (1 - 0.9**t)) / (math.sqrt(v[i] / (1 - 0.999**t)) + 1e-8)
            ref[i] = ref[i] * (1 - 0.05 * 0.1) - 0.05 * step
    np.testing.assert_allclose(p["w"].data, ref, rtol=1e-13)


# training


@pytest.fixture(scope="module")
def trained(config, dataset):
    trainer = Trainer(config, split_dataset(config, dataset))
    return trainer.fit()


def test_training_history_shape(trained):
    h = trained.history
    assert [r["epoch"] for r in h] == [0, 1, 2]
    assert len(h[1]["losses"]) == 3
    assert all(math.isfinite(r["val_mae"]) for r in h)
    assert h[1]["train_loss"] == pytest.approx(np.mean(h[1]["losses"]))


def test_best_checkpoint_tracks_lowest_validation(trained):
    ck = trained.checkpoint
    vals = [r["val_mae"] for r in trained.history[1:]]
    assert ck.best_val == min(vals)
    assert ck.best_epoch == 1 + int(np.argmin(vals))


def test_checkpoint_bytes_round_trip(trained, tmp_path):
    blob = trained.checkpoint.to_bytes()
    assert blob[:8] == b"GMAECKPT"
    back = Checkpoint.from_bytes(blob)
    assert back.to_bytes() == blob
    path = tmp_path / "c.ckpt"
    back.save(path)
    assert Checkpoint.load(path).to_bytes() == blob


def test_checkpoint_rejects_garbage():
    with pytest.raises(ContractError):
        Checkpoint.from_bytes(b"NOTACKPT" + bytes(20))
    with pytest.raises(ContractError):
        Checkpoint.from_bytes(b"GMA")


def test_training_is_deterministic(config, dataset, trained):
    again = Trainer(config, split_dataset(config, dataset)).fit()
    assert again.history == trained.history
    assert again.checkpoint.to_bytes() == trained.checkpoint.to_bytes()


def test_seed_changes_the_run(config, dataset, trained):
    other = Trainer(config.with_values(**{"train.seed": 1}), split_dataset(config, dataset)).fit(epochs=1)
    assert other.history[1]["losses"] != trained.history[1]["losses"]


def test_resume_continues_bit_identically(config, dataset):
    data = split_dataset(config, dataset)
    full = Trainer(config, data).fit(epochs=2)
    first = Trainer(config, data).fit(epochs=1)
    ck = Checkpoint.from_bytes(first.checkpoint.to_bytes())
    resumed = Trainer.resume(ck, data).fit(epochs=2)
    assert resumed.history == full.history
    assert resumed.checkpoint.to_bytes() == full.checkpoint.to_bytes()


def test_lambda_zero_skips_variants(config, dataset):
    cfg = config.with_values(**{"loss.lam": 0.0})
    trainer = Trainer(cfg, split_dataset(cfg, dataset))
    batch = trainer.training_batch(np.arange(4))
    assert batch.variants == ()
    rec = trainer.run_epoch()
    assert rec["train_aux"] == 0.0 and rec["train_loss"] == rec["train_reg"]


def test_training_masks_cover_organic_gaps(config, dataset):
    trainer = Trainer(config, split_dataset(config, dataset))
    idx = np.arange(8)
    arr = trainer.data.train.arrays(idx)
    batch = trainer.training_batch(idx)
    organic = arr["m"] == 1
    assert organic.any()
    # organic gaps hold a 0 placeholder; every one must be replaced by a random fill
    assert np.all(batch.base.x_hat[organic] != 0.0)
    for j in range(len(idx)):
        h = batch.base.hint[j]
        assert np.all(h[organic[j]] == h.min())  # missing entries take the low hint value
    for v in batch.variants:
        assert v.x_hat.shape == batch.base.x_hat.shape


def test_fixed_mask_variant_trains_at_half_rate(config, dataset):
    cfg = variant_config(config, "fm")
    trainer = Trainer(cfg, split_dataset(cfg, dataset))
    rng = np.random.default_rng(0)
    rates = [trainer.train_spec.draw((4, 4, 2), rng)[2] for _ in range(50)]
    assert set(rates) == {0.5}


def test_variant_configs_differ_only_in_their_switch(config):
    assert variant_config(config, "full") == config
    assert set(diff(config, variant_config(config, "fm"))) == {"mask.train_rate_range"}
    assert set(diff(config, variant_config(config, "nm"))) == {"preprocess.sigma", "preprocess.hint_mode"}
    d01 = diff(config, variant_config(config, "01"))
    assert d01["preprocess.hint_mode"][1] == "binary" and d01["preprocess.sigma"][1] == 0.0
    with pytest.raises(ContractError):
        variant_config(config, "xx")


def test_nm_and_01_inputs_differ_only_in_hint(config, dataset):
    idx = np.arange(6)
    nm = Trainer(variant_config(config, "nm"), split_dataset(config, dataset)).training_batch(idx)
    zo = Trainer(variant_config(config, "01"), split_dataset(config, dataset)).training_batch(idx)
    np.testing.assert_array_equal(nm.base.x_hat, zo.base.x_hat)
    np.testing.assert_array_equal(nm.base.hint, 0.0)
    assert set(np.unique(zo.base.hint)) == {0.0, 1.0}


# evaluation grid and reports


def test_grid_has_one_row_per_scenario_and_metric(trained, dataset):
    rows = evaluate_grid(trained.checkpoint, dataset, ("point", "block"), (0.25, 0.5, 0.75, 0.9), (0,))
    assert len(rows) == 2 * 4 * 1 * 3
    assert {r.scenario for r in rows} == {"GeoMAE"}
    assert all(math.isfinite(r.value) for r in rows)


def test_grid_is_deterministic_and_seed_sensitive(trained, dataset):
    a = evaluate_grid(trained.checkpoint, dataset, ("point",), (0.5,), (0, 1))
    b = evaluate_grid(trained.checkpoint, dataset, ("point",), (0.5,), (0, 1))
    assert a == b
    assert a[0].value != a[3].value


def test_extreme_rates_score_finitely(config, dataset):
    trainer = Trainer(config, split_dataset(config, dataset))
    rows = evaluate_model(trainer.model, trainer.data, config, "x", ("point",), (0.0, 1.0), (0,))
    assert all(math.isfinite(r.value) for r in rows)


def test_result_rows_round_trip_and_schema(tmp_path):
    rows = [ResultRow("GeoMAE", "point", 0.25, 0, "mae", 1.5), ResultRow("GeoMAE", "point", 0.25, 1, "mae", 2.5)]
    path = tmp_path / "r.csv"
    write_rows(path, rows)
    assert read_rows(path) == rows
    path.write_text("a,b\n")
    with pytest.raises(SchemaError):
        read_rows(path)
    path.write_text("scenario,pattern,rate,seed,metric,value\nG,point,x,0,mae,1\n")
    with pytest.raises(SchemaError, match=":2:"):
        read_rows(path)


def test_summary_and_table_format():
    rows = [ResultRow("G", "point", 0.5, s, "mae", v) for s, v in enumerate((1.0, 3.0))]
    assert summarize(rows)[("G", "point", 0.5, "mae")] == (2.0, 1.0, 2)
    table = format_table(rows)
    assert "2.0000 ± 1.0000" in table
    assert table.splitlines()[0].split()[:4] == ["scenario", "pattern", "rate", "mae"]


def _ablation_rows(values):
    rows = []
    for variant, by_rate in values.items():
        for rate, mae in by_rate.items():
            for seed in range(3):
                rows.append(ResultRow(VARIANT_LABELS[variant], "point", rate, seed, "mae", mae + 0.01 * seed))
    return rows


def test_ablation_checks_pass_and_fail():
    good = _ablation_rows({"full": {0.5: 2.0, 0.9: 3.0}, "01": {0.9: 3.5}, "nm": {0.9: 4.0},
                           "fm": {0.5: 1.9, 0.9: 3.2}})
    checks = ablation_checks(good)
    assert len(checks) == 3 and all(c.holds for c in checks)
    bad = _ablation_rows({"full": {0.9: 3.0}, "01": {0.9: 5.0}, "nm": {0.9: 4.0}})
    assert [c.holds for c in ablation_checks(bad)] == [True, False]


def test_report_writes_table_and_plots(tmp_path):
    rows = _ablation_rows({"full": {0.5: 2.0, 0.9: 3.0}, "nm": {0.5: 2.5, 0.9: 4.0}})
    text = report(rows, tmp_path, plots=True)
    assert (tmp_path / "table.txt").read_text() == text
    assert (tmp_path / "mae_point.png").stat().st_size > 0
    assert "GeoMAE-NM" in text
