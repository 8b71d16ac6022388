"""Random models, inputs and batches shared by the tests."""

from __future__ import annotations

import numpy as np

from geomae.masking import MaskSpec, gen_point, make_augmented
from geomae.objective import TrainingBatch
from geomae.preprocess import ReadingWindow, preprocess_sample
from geomae.stafn import (ModelConfig, ModelInputs, StafnModel, calendar_features, forecast_attention,
                          parameter_shapes, spatial_attention, temporal_attention)
from geomae.tensor import Tensor

import oracles as O


def random_model(cfg: ModelConfig, seed: int = 0, scale: float = 0.5) -> StafnModel:
    """Model with every parameter (gains and biases included) drawn at random."""
    rng = np.random.default_rng(seed)
    params = {name: Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True, name=name)
              for name, shape in parameter_shapes(cfg).items()}
    return StafnModel(cfg, params)


def random_calendar(cfg: ModelConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    start = np.datetime64("2021-03-04T05:00") + np.timedelta64(int(rng.integers(0, 5000)), "h")
    cal = calendar_features(start + np.arange(cfg.n_in + cfg.n_out) * np.timedelta64(1, "h"))
    return cal[: cfg.n_in], cal[cfg.n_in :]


def random_inputs(cfg: ModelConfig, rng, batch=None) -> ModelInputs:
    cal_his, cal_fur = random_calendar(cfg, rng)
    lead = () if batch is None else (batch,)
    if batch is not None:
        cal_his = np.broadcast_to(cal_his, (batch,) + cal_his.shape).copy()
        cal_fur = np.broadcast_to(cal_fur, (batch,) + cal_fur.shape).copy()
    shape = lead + (cfg.n_nodes, cfg.n_in, cfg.d_in)
    return ModelInputs(rng.normal(size=shape), rng.normal(size=shape), cal_his, cal_fur)


def random_batch(cfg: ModelConfig, k: int, rng, batch: int = 2, rate: float = 0.3,
                 target_rate: float = 0.2) -> TrainingBatch:
    """Masked base samples, k augmented variants each, targets with some missing ground truth."""
    shape = (cfg.n_nodes, cfg.n_in, cfg.d_in)
    xs, hs, vx, vh, his, fur = [], [], [[] for _ in range(k)], [[] for _ in range(k)], [], []
    for _ in range(batch):
        w = ReadingWindow(rng.normal(size=shape), gen_point(shape, rate, rng))
        x_hat, hint = preprocess_sample(w, 0.2, rng)
        xs.append(x_hat)
        hs.append(hint)
        for i, v in enumerate(make_augmented(w, k, MaskSpec(rate_range=(0.1, 0.5)), 0.2, rng)):
            vx[i].append(v.x_hat)
            vh[i].append(v.hint)
        ch, cf = random_calendar(cfg, rng)
        his.append(ch)
        fur.append(cf)
    cal_his, cal_fur = np.stack(his), np.stack(fur)
    base = ModelInputs(np.stack(xs), np.stack(hs), cal_his, cal_fur)
    variants = tuple(ModelInputs(np.stack(vx[i]), np.stack(vh[i]), cal_his, cal_fur) for i in range(k))
    y_shape = (batch, cfg.n_out, cfg.n_nodes, cfg.d_out)
    y = rng.normal(size=y_shape)
    y_mask = (rng.random(y_shape) < target_rate).astype(np.uint8)
    return TrainingBatch(base, y, y_mask, variants)


def oracle_check(kind: str, cfg: ModelConfig, seed: int, tol: float = 1e-10) -> None:
    """Compare one attention module against the scalar-loop oracle on a random instance."""
    rng = np.random.default_rng(seed)
    model = random_model(cfg, seed)
    p = model.sub("enc0.spatial") if kind != "forecast" else model.sub("dec0.forecast")
    if kind == "temporal":
        p = model.sub("enc0.temporal")
    pl = {k: v.data.tolist() for k, v in p.items()}
    steps = int(rng.integers(1, 5))
    nodes = int(rng.integers(1, 5))
    h = rng.normal(size=(steps, nodes, cfg.d_model))
    if kind == "spatial":
        got = spatial_attention(Tensor(h), p, cfg).data
        want = O.spatial(h.tolist(), pl, cfg)
    elif kind == "temporal":
        got = temporal_attention(Tensor(h), p, cfg).data
        want = O.temporal(h.tolist(), pl, cfg)
    else:
        his = rng.normal(size=(int(rng.integers(1, 5)), nodes, cfg.d_model))
        got = forecast_attention(Tensor(h), Tensor(his), p, cfg).data
        want = O.forecast(h.tolist(), his.tolist(), pl, cfg)
    np.testing.assert_allclose(got, np.array(want), rtol=0, atol=tol)
