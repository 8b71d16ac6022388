"""Multi-task loss: masked regression plus the masked-representation auxiliary term."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .stafn import ModelInputs, StafnModel, decode_future, encode_history, predict
from .tensor import GradTape, Tensor


@dataclass(frozen=True)
class LossConfig:
    phi: float = 0.25
    lam: float = 0.75
    k: int = 4
    regression_norm: str = "L1"

    def __post_init__(self):
        if self.phi < 0 or self.lam < 0:
            raise ContractError(f"phi and lambda must be >= 0, got phi={self.phi}, lambda={self.lam}")
        if self.k < 1:
            raise ContractError(f"k must be >= 1, got {self.k}")
        if self.regression_norm not in ("L1", "L2"):
            raise ContractError(f"regression_norm must be L1 or L2, got {self.regression_norm!r}")


def regression_loss(y_hat: Tensor, y, norm: str = "L1", target_mask=None) -> Tensor:
    """Mean absolute (L1) or squared (L2) error over entries not flagged in ``target_mask``."""
    y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=y_hat.dtype))
    if y_hat.shape != y.shape:
        raise DimensionError(f"prediction {y_hat.shape} and target {y.shape} differ in shape")
    diff = y_hat - y
    if norm == "L1":
        err = T.abs(diff)
    elif norm == "L2":
        err = T.square(diff)
    else:
        raise ContractError(f"unknown regression norm {norm!r}")
    if target_mask is None:
        return T.mean(err)
    keep = 1.0 - np.asarray(target_mask, dtype=y_hat.dtype)
    if keep.shape != y.shape:
        raise DimensionError(f"target mask {keep.shape} does not match target {y.shape}")
    count = float(keep.sum())
    return T.scale(T.sum(err * keep), 1.0 / max(count, 1.0))


def _mse(a: Tensor, b: Tensor) -> Tensor:
    return T.mean(T.square(a - b))


def mae_aux_loss(h_base: Tensor, h_variants: Sequence[Tensor], phi: float) -> Tensor:
    """``(1/k) sum_i [ MSE(h_i, sg(h_base)) + phi * MSE(h_base, sg(h_i)) ]``.

    ``sg`` is :func:`~geomae.tensor.stop_gradient`.
    """
    if not h_variants:
        raise ContractError("mae_aux_loss needs at least one variant")
    if phi < 0:
        raise ContractError(f"phi must be >= 0, got {phi}")
    for h in h_variants:
        if h.shape != h_base.shape:
            raise DimensionError(f"variant representation {h.shape} differs from base {h_base.shape}")
    target = T.stop_gradient(h_base)
    terms = []
    for h in h_variants:
        terms.append(_mse(h, target) + T.scale(_mse(h_base, T.stop_gradient(h)), phi))
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return T.scale(total, 1.0 / len(h_variants))


def total_loss(l_reg: Tensor, l_mae: Tensor, lam: float) -> Tensor:
    return l_reg + T.scale(l_mae, lam)


@dataclass(frozen=True)
class TrainingBatch:
    """Base inputs and targets plus k augmented input sets.

    ``y`` and ``target_mask`` are ``[batch, n_out, nodes, d_out]`` (model
    layout); ``variants[i]`` holds the i-th augmented copy of every sample.
    """

    base: ModelInputs
    y: np.ndarray
    target_mask: np.ndarray
    variants: tuple[ModelInputs, ...] = ()


@dataclass
class ObjectiveResult:
    loss: float
    l_reg: float
    l_mae: float
    grads: dict[str, np.ndarray]


def objective_graph(batch: TrainingBatch, model: StafnModel, cfg: LossConfig) -> tuple[Tensor, Tensor, Tensor | None]:
    """Build ``(L_tot, L_reg, L_MAE)``; variants are skipped entirely when lambda is 0."""
    use_aux = cfg.lam > 0 and len(batch.variants) > 0
    if use_aux and len(batch.variants) != cfg.k:
        raise ContractError(f"batch carries {len(batch.variants)} variants, config expects k={cfg.k}")
    inputs = ModelInputs.stack([batch.base, *batch.variants]) if use_aux else batch.base
    h_his = encode_history(inputs.x_hat, inputs.hint, inputs.cal_his, model)
    h_fur = decode_future(h_his, inputs.cal_fur, model)
    b = batch.base.batch_size
    if use_aux:
        parts = T.split(h_fur, len(batch.variants) + 1, axis=0)
        h_base, h_vars = parts[0], parts[1:]
    else:
        h_base, h_vars = h_fur, []
    y_hat = predict(h_base, model)
    if y_hat.shape[0] != b:
        raise DimensionError("prediction batch size does not match base batch")
    l_reg = regression_loss(y_hat, batch.y, cfg.regression_norm, batch.target_mask)
    if not use_aux:
        return l_reg, l_reg, None
    l_mae = mae_aux_loss(h_base, h_vars, cfg.phi)
    return total_loss(l_reg, l_mae, cfg.lam), l_reg, l_mae


def training_objective(batch: TrainingBatch, model: StafnModel, cfg: LossConfig) -> ObjectiveResult:
    """Evaluate the total loss and its gradient for every model parameter."""
    with GradTape() as tape:
        loss, l_reg, l_mae = objective_graph(batch, model, cfg)
    grads = T.backward(loss, tape, wrt=model.params.values())
    return ObjectiveResult(
        loss=loss.item(),
        l_reg=l_reg.item(),
        l_mae=l_mae.item() if l_mae is not None else 0.0,
        grads={name: grads[p].data for name, p in model.params.items()},
    )
