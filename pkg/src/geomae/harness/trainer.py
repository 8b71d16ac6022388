"""Training loop: fresh masks per epoch, augmented variants, AdamW, early stopping."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..data import SplitData, SplitPlan, StationDataset, WindowSet, split
from ..errors import DivergenceError, NonFiniteError
from ..masking import MaskSpec, compose, derive_rng, generate, make_augmented
from ..metrics import evaluate
from ..objective import TrainingBatch, training_objective
from ..preprocess import ReadingWindow, destandardize, preprocess_sample
from ..stafn import ModelInputs, StafnModel, forward
from .checkpoint import Checkpoint
from .config import TrainConfig
from .optim import AdamWState, adamw_step

log = logging.getLogger(__name__)

# keys separating the independent random streams derived from the run seed
STREAM_TRAIN = 1
STREAM_VAL = 2
STREAM_EVAL = 3


def split_dataset(config: TrainConfig, dataset: StationDataset) -> SplitData:
    plan = SplitPlan.by_fraction(dataset.timestamps, config.data.split_fractions)
    d = config.data
    return split(dataset, plan, d.n_in, d.n_out, d.train_stride, d.eval_stride or d.n_out)


def corrupt_inputs(windows: WindowSet, indices, masks: list[np.ndarray], rngs: list[np.random.Generator],
                   sigma: float, hint_mode: str) -> ModelInputs:
    """Compose organic and extra masks, impute and hint every window in ``indices``."""
    arr = windows.arrays(indices)
    x_hat = np.empty_like(arr["x"])
    hint = np.empty_like(arr["x"])
    for j in range(len(indices)):
        m = compose(arr["m"][j], masks[j])
        x_hat[j], hint[j] = preprocess_sample(ReadingWindow(arr["x"][j], m), sigma, rngs[j], hint_mode)
    return ModelInputs(x_hat, hint, arr["cal_his"], arr["cal_fur"])


def predict_raw(model: StafnModel, inputs: ModelInputs, target_stats, batch_size: int = 64) -> np.ndarray:
    """Predictions in raw target units, ``[B, n_out, nodes, d_out]``."""
    outs = []
    n = inputs.x_hat.shape[0]
    for lo in range(0, n, batch_size):
        sl = slice(lo, lo + batch_size)
        part = ModelInputs(inputs.x_hat[sl], inputs.hint[sl], inputs.cal_his[sl], inputs.cal_fur[sl])
        outs.append(forward(part, model).data)
    return destandardize(np.concatenate(outs), target_stats)


def raw_targets(windows: WindowSet, indices, target_stats) -> tuple[np.ndarray, np.ndarray]:
    arr = windows.arrays(indices)
    return destandardize(arr["y"], target_stats), arr["y_mask"]


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]

    def best_model(self) -> StafnModel:
        return model_from_checkpoint(self.checkpoint, best=True)


def model_from_checkpoint(ckpt: Checkpoint, best: bool = True) -> StafnModel:
    model = StafnModel.init(ckpt.model_config, seed=0)
    model.load_arrays(ckpt.best_params if best else ckpt.params)
    return model


class Trainer:
    """Stateful training run; one epoch at a time, resumable from a checkpoint."""

    def __init__(self, config: TrainConfig, data: SplitData, out_dir: Path | None = None):
        self.config = config
        self.data = data
        self.out_dir = Path(out_dir) if out_dir else None
        n_nodes, d_in = data.train.x_std.shape[0], data.train.x_std.shape[2]
        self.model_config = config.model_config(n_nodes, d_in, len(data.target_index))
        seed = config.train.seed
        self.model = StafnModel.init(self.model_config, seed=seed)
        self.optim = AdamWState()
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, STREAM_TRAIN]))
        self.epoch = 0
        self.best_val = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0
        self.best_arrays = {k: v.copy() for k, v in self.model.arrays().items()}
        self.history: list[dict] = []
        self.train_spec: MaskSpec = config.mask.train_spec()
        self.aug_spec: MaskSpec = config.mask.aug_spec()
        self._val_inputs = self._frozen_validation_inputs()

    # batches

    def training_batch(self, indices: np.ndarray) -> TrainingBatch:
        cfg = self.config
        windows = self.data.train
        arr = windows.arrays(indices)
        b = len(indices)
        x_hat = np.empty_like(arr["x"])
        hint = np.empty_like(arr["x"])
        k = cfg.loss.k if cfg.loss.lam > 0 else 0
        var_x = np.empty((k,) + arr["x"].shape)
        var_h = np.empty((k,) + arr["x"].shape)
        sigma, mode = cfg.preprocess.sigma, cfg.preprocess.hint_mode
        for j, idx in enumerate(indices):
            rng = derive_rng(cfg.train.seed, STREAM_TRAIN, self.epoch, int(idx))
            extra, _, _ = self.train_spec.draw(arr["m"][j].shape, rng)
            m = compose(arr["m"][j], extra)
            base = ReadingWindow(arr["x"][j], m)
            x_hat[j], hint[j] = preprocess_sample(base, sigma, rng, mode)
            if k:
                aug = make_augmented(base, k, self.aug_spec, sigma, rng, mode)
                for i, variant in enumerate(aug):
                    var_x[i, j], var_h[i, j] = variant.x_hat, variant.hint
        dtype = self.model_config.dtype
        base_inputs = ModelInputs(x_hat.astype(dtype), hint.astype(dtype), arr["cal_his"], arr["cal_fur"])
        variants = tuple(
            ModelInputs(var_x[i].astype(dtype), var_h[i].astype(dtype), arr["cal_his"], arr["cal_fur"]) for i in range(k)
        )
        assert base_inputs.batch_size == b
        return TrainingBatch(base_inputs, arr["y"].astype(dtype), arr["y_mask"], variants)

    def _frozen_validation_inputs(self) -> ModelInputs:
        cfg = self.config
        windows = self.data.val
        idx = np.arange(len(windows))
        rates = cfg.train.val_rates
        shape = (windows.x_std.shape[0], windows.n_in, windows.x_std.shape[2])
        masks, rngs = [], []
        for i in idx:
            rng = derive_rng(cfg.train.seed, STREAM_VAL, int(i))
            rate = rates[i % len(rates)]
            masks.append(generate(cfg.train.val_pattern, shape, rate, rng, cfg.mask.block_min_len,
                                  cfg.mask.block_max_len or None))
            rngs.append(rng)
        return corrupt_inputs(windows, idx, masks, rngs, cfg.preprocess.sigma, cfg.preprocess.hint_mode)

    # loop

    def validate(self) -> float:
        """Raw-unit MAE on the validation windows under the frozen masks."""
        idx = np.arange(len(self.data.val))
        y, ym = raw_targets(self.data.val, idx, self.data.target_stats)
        y_hat = predict_raw(self.model, self._val_inputs, self.data.target_stats, self.config.eval.batch_size)
        return evaluate(y_hat, y, ym).mae

    def run_epoch(self) -> dict:
        cfg = self.config
        if self.epoch == 0 and not self.history:
            self.history.append({"epoch": 0, "val_mae": self.validate(), "losses": []})
        self.epoch += 1
        order = self.rng.permutation(len(self.data.train))
        bs = cfg.train.batch_size
        batches = [order[i : i + bs] for i in range(0, len(order), bs)]
        if cfg.train.max_batches:
            batches = batches[: cfg.train.max_batches]
        losses, regs, auxes = [], [], []
        for step, indices in enumerate(batches):
            batch = self.training_batch(indices)
            try:
                res = training_objective(batch, self.model, cfg.loss)
                if not math.isfinite(res.loss):
                    raise NonFiniteError(f"loss {res.loss}")
                adamw_step(self.model.params, res.grads, self.optim, cfg.optim)
            except NonFiniteError as exc:
                self._dump_divergence(step, losses, exc)
                raise DivergenceError(f"non-finite values at epoch {self.epoch}, step {step}: {exc}") from exc
            losses.append(res.loss)
            regs.append(res.l_reg)
            auxes.append(res.l_mae)
        val_mae = self.validate()
        improved = val_mae < self.best_val
        if improved:
            self.best_val = val_mae
            self.best_epoch = self.epoch
            self.bad_epochs = 0
            self.best_arrays = {k: v.copy() for k, v in self.model.arrays().items()}
        else:
            self.bad_epochs += 1
        record = {
            "epoch": self.epoch,
            "train_loss": float(np.mean(losses)),
            "train_reg": float(np.mean(regs)),
            "train_aux": float(np.mean(auxes)),
            "val_mae": val_mae,
            "losses": losses,
        }
        self.history.append(record)
        log.info("epoch %d loss %.5f val_mae %.4f%s", self.epoch, record["train_loss"], val_mae,
                 " *" if improved else "")
        return record

    def fit(self, epochs: int | None = None) -> TrainResult:
        total = epochs if epochs is not None else self.config.train.epochs
        while self.epoch < total:
            self.run_epoch()
            if self.out_dir:
                self.checkpoint().save(self.out_dir / "last.ckpt")
            if self.bad_epochs >= self.config.train.patience:
                log.info("early stop at epoch %d (best %d)", self.epoch, self.best_epoch)
                break
        return TrainResult(self.checkpoint(), self.history)

    def _dump_divergence(self, step: int, losses: list[float], exc: Exception) -> None:
        info = {"epoch": self.epoch, "step": step, "recent_losses": losses[-10:], "error": str(exc),
                "param_abs_max": {k: float(np.abs(v).max()) for k, v in self.model.arrays().items()}}
        log.error("training diverged: %s", json.dumps(info))
        if self.out_dir:
            (self.out_dir / "divergence.json").write_text(json.dumps(info, indent=2))

    # persistence

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config=self.config,
            model_config=self.model_config,
            params={k: v.copy() for k, v in self.model.arrays().items()},
            best_params={k: v.copy() for k, v in self.best_arrays.items()},
            adam_m={k: v.copy() for k, v in self.optim.m.items()},
            adam_v={k: v.copy() for k, v in self.optim.v.items()},
            adam_step=self.optim.step,
            stats=self.data.stats,
            target_index=list(self.data.target_index),
            epoch=self.epoch,
            rng_state=self.rng.bit_generator.state,
            best_val=self.best_val,
            best_epoch=self.best_epoch,
            bad_epochs=self.bad_epochs,
            history=[dict(h) for h in self.history],
        )

    @classmethod
    def resume(cls, ckpt: Checkpoint, data: SplitData, out_dir: Path | None = None) -> Trainer:
        trainer = cls(ckpt.config, data, out_dir)
        trainer.model.load_arrays(ckpt.params)
        trainer.optim = AdamWState(ckpt.adam_step, {k: v.copy() for k, v in ckpt.adam_m.items()},
                                   {k: v.copy() for k, v in ckpt.adam_v.items()})
        trainer.rng.bit_generator.state = ckpt.rng_state
        trainer.epoch = ckpt.epoch
        trainer.best_val = ckpt.best_val
        trainer.best_epoch = ckpt.best_epoch
        trainer.bad_epochs = ckpt.bad_epochs
        trainer.best_arrays = {k: v.copy() for k, v in ckpt.best_params.items()}
        trainer.history = [dict(h) for h in ckpt.history]
        return trainer


def train(config: TrainConfig, dataset: StationDataset, out_dir=None) -> TrainResult:
    """Train on the chronological split of ``dataset``; keeps the best-validation weights."""
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    return Trainer(config, split_dataset(config, dataset), out_dir).fit()
