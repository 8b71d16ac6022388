"""Spatio-temporal attention forecasting network.

Hidden representations are laid out ``[..., time, node, d_model]``; any
leading axes are batch axes.  Readings and hints enter as
``[..., node, time, d_in]`` and predictions leave as
``[..., n_out, node, d_out]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

# (name, period) of each calendar feature; month and day are shifted to start at 0
CALENDAR_FEATURES = (("month", 12), ("day", 31), ("hour", 24), ("weekday", 7))
N_CALENDAR = 2 * len(CALENDAR_FEATURES)


@dataclass(frozen=True)
class ModelConfig:
    n_nodes: int = 8
    d_in: int = 4
    d_out: int = 1
    n_in: int = 12
    n_out: int = 12
    n_blocks: int = 1
    d_model: int = 16
    n_heads: int = 2
    mlp_hidden: int = 32
    residual: bool = True
    layer_norm: bool = True
    nonlinearity: str = "gelu"
    scale_by_model_dim: bool = False
    fusion: str = "mlp"
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("n_nodes", "d_in", "d_out", "n_in", "n_out", "d_model", "n_heads", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_blocks < 0:
            raise ContractError(f"n_blocks must be >= 0, got {self.n_blocks}")
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise ContractError(f"d_model must be even, got {self.d_model}")
        if self.fusion not in ("mlp", "sum"):
            raise ContractError(f"unknown fusion {self.fusion!r}")
        if self.dtype not in ("float64", "float32"):
            raise ContractError(f"unsupported dtype {self.dtype!r}")
        T.nonlinearity(self.nonlinearity)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def calendar_features(timestamps) -> np.ndarray:
    """Raw sin/cos calendar encoding, ``[..., 8]`` for datetime64 input ``[...]``.

    Channel pairs are (sin, cos) of month, day-of-month, hour and weekday.
    """
    ts = np.asarray(timestamps, dtype="datetime64[m]")
    days = ts.astype("datetime64[D]")
    months = ts.astype("datetime64[M]")
    month = months.astype(np.int64) % 12
    day = (days - months.astype("datetime64[D]")).astype(np.int64)
    hour = (ts - days.astype("datetime64[m]")).astype(np.int64) / 60.0
    weekday = (days.astype(np.int64) + 3) % 7  # 1970-01-01 was a Thursday; Monday = 0
    out = np.empty(ts.shape + (N_CALENDAR,))
    for i, (value, (_, period)) in enumerate(zip((month, day, hour, weekday), CALENDAR_FEATURES)):
        angle = 2.0 * np.pi * value / period
        out[..., 2 * i] = np.sin(angle)
        out[..., 2 * i + 1] = np.cos(angle)
    return out


class StafnModel:
    """Learnable state of the network: a flat ``name -> Tensor`` parameter map."""

    def __init__(self, config: ModelConfig, params: Mapping[str, Tensor]):
        self.config = config
        self.params = dict(params)
        expected = parameter_shapes(config)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ContractError(f"parameter names mismatch; missing={missing} extra={extra}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {self.params[name].shape}")

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> StafnModel:
        rng = np.random.default_rng(seed)
        dtype = np.dtype(config.dtype)
        params = {}
        for name, shape in parameter_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf in ("b", "b1", "b2"):
                value = np.zeros(shape)
            elif leaf == "g":
                value = np.ones(shape)
            elif name == "node_emb":
                value = rng.normal(0.0, 0.1, size=shape)
            else:
                limit = math.sqrt(6.0 / (shape[0] + shape[1]))
                value = rng.uniform(-limit, limit, size=shape)
            params[name] = Tensor(value.astype(dtype), requires_grad=True, name=name)
        return cls(config, params)

    def sub(self, prefix: str) -> dict[str, Tensor]:
        """Parameters under ``prefix.`` with the prefix stripped."""
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            p.assign(arrays[name])

    def copy(self) -> StafnModel:
        params = {k: Tensor(v.data, requires_grad=True, name=k) for k, v in self.params.items()}
        return StafnModel(self.config, params)


def _attention_shapes(prefix: str, cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.d_model
    shapes = {f"{prefix}.{w}": (d, d) for w in ("wq", "wk", "wv")}
    shapes.update(_mlp_shapes(prefix, cfg))
    return shapes


def _mlp_shapes(prefix: str, cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.d_model, cfg.mlp_hidden
    shapes = {f"{prefix}.mlp.w1": (d, h), f"{prefix}.mlp.b1": (h,), f"{prefix}.mlp.w2": (h, d), f"{prefix}.mlp.b2": (d,)}
    if cfg.layer_norm:
        for ln in ("ln1", "ln2"):
            shapes[f"{prefix}.{ln}.g"] = (d,)
            shapes[f"{prefix}.{ln}.b"] = (d,)
    return shapes


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name and shape of every parameter; a pure function of the config."""
    d = cfg.d_model
    shapes = {
        "in_proj.w": (2 * cfg.d_in, d),
        "in_proj.b": (d,),
        "time_proj.w": (N_CALENDAR, d),
        "node_emb": (cfg.n_nodes, d),
    }
    for i in range(cfg.n_blocks):
        shapes.update(_attention_shapes(f"enc{i}.spatial", cfg))
        shapes.update(_attention_shapes(f"enc{i}.temporal", cfg))
        if cfg.fusion == "mlp":
            shapes.update(_mlp_shapes(f"enc{i}.fusion", cfg))
        shapes.update(_attention_shapes(f"dec{i}.forecast", cfg))
        shapes.update(_attention_shapes(f"dec{i}.spatial", cfg))
    shapes["head.w"] = (d, cfg.d_out)
    shapes["head.b"] = (cfg.d_out,)
    return shapes


# building blocks


def _mlp(z: Tensor, p: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    act = T.nonlinearity(cfg.nonlinearity)
    hidden = act(T.matmul(z, p["mlp.w1"]) + p["mlp.b1"])
    return T.matmul(hidden, p["mlp.w2"]) + p["mlp.b2"]


def _position_wise(z: Tensor, p: Mapping[str, Tensor], cfg: ModelConfig, skip: Tensor | None) -> Tensor:
    """Residual/norm wrapper: ``z`` is the mixing output, ``skip`` the block input."""
    if cfg.residual and skip is not None:
        z = z + skip
    if cfg.layer_norm:
        z = T.layer_norm(z, p["ln1.g"], p["ln1.b"])
    out = _mlp(z, p, cfg)
    if cfg.residual:
        out = out + z
    if cfg.layer_norm:
        out = T.layer_norm(out, p["ln2.g"], p["ln2.b"])
    return out


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, length, d = x.shape
    x = T.reshape(x, (*lead, length, n_heads, d // n_heads))
    return T.swapaxes(x, -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    x = T.swapaxes(x, -2, -3)
    *lead, length, n_heads, dh = x.shape
    return T.reshape(x, (*lead, length, n_heads * dh))


def attend(q_src: Tensor, kv_src: Tensor, p: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Multi-head scaled dot-product attention along the second-to-last axis.

    ``q_src`` is ``[..., Lq, d]`` and ``kv_src`` is ``[..., Lk, d]``; returns
    the concatenated head outputs ``[..., Lq, d]`` before the MLP.
    """
    q = _split_heads(T.matmul(q_src, p["wq"]), cfg.n_heads)
    k = _split_heads(T.matmul(kv_src, p["wk"]), cfg.n_heads)
    v = _split_heads(T.matmul(kv_src, p["wv"]), cfg.n_heads)
    denom = cfg.d_model if cfg.scale_by_model_dim else cfg.d_head
    scores = T.scale(T.matmul(q, T.transpose_last_two(k)), 1.0 / math.sqrt(denom))
    return _merge_heads(T.matmul(T.softmax_last(scores), v))


def attention_weights(q_src: Tensor, kv_src: Tensor, p: Mapping[str, Tensor], cfg: ModelConfig) -> np.ndarray:
    """Softmax weights ``[..., heads, Lq, Lk]`` used by :func:`attend`; for inspection."""
    q = _split_heads(T.matmul(q_src, p["wq"]), cfg.n_heads)
    k = _split_heads(T.matmul(kv_src, p["wk"]), cfg.n_heads)
    denom = cfg.d_model if cfg.scale_by_model_dim else cfg.d_head
    return T.softmax_last(T.scale(T.matmul(q, T.transpose_last_two(k)), 1.0 / math.sqrt(denom))).data


def _check_hidden(h: Tensor, cfg: ModelConfig, what: str) -> None:
    if h.ndim < 3 or h.shape[-1] != cfg.d_model:
        raise DimensionError(f"{what}: expected [..., time, node, {cfg.d_model}], got {h.shape}")


def spatial_attention(h: Tensor, p: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Self-attention over nodes, independently at every time step."""
    _check_hidden(h, cfg, "spatial_attention")
    return _position_wise(attend(h, h, p, cfg), p, cfg, h)


def temporal_attention(h: Tensor, p: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Self-attention over time steps, independently for every node."""
    _check_hidden(h, cfg, "temporal_attention")
    hn = T.swapaxes(h, -2, -3)
    return T.swapaxes(_position_wise(attend(hn, hn, p, cfg), p, cfg, hn), -2, -3)


def forecast_attention(h_fur: Tensor, h_his: Tensor, p: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Horizon queries attend to encoded history keys/values, per node."""
    _check_hidden(h_fur, cfg, "forecast_attention")
    _check_hidden(h_his, cfg, "forecast_attention")
    if h_fur.shape[-2] != h_his.shape[-2] or h_fur.shape[:-3] != h_his.shape[:-3]:
        raise DimensionError(f"forecast_attention: node/batch extents differ, {h_fur.shape} vs {h_his.shape}")
    qn = T.swapaxes(h_fur, -2, -3)
    kvn = T.swapaxes(h_his, -2, -3)
    return T.swapaxes(_position_wise(attend(qn, kvn, p, cfg), p, cfg, qn), -2, -3)


def temporal_encoding(calendar: np.ndarray, model: StafnModel) -> Tensor:
    """Project raw calendar features ``[..., steps, 8]`` to ``[..., steps, d_model]``."""
    calendar = np.asarray(calendar, dtype=model.config.dtype)
    if calendar.shape[-1] != N_CALENDAR:
        raise DimensionError(f"calendar features need trailing extent {N_CALENDAR}, got {calendar.shape}")
    return T.matmul(Tensor(calendar), model.params["time_proj.w"])


def _broadcast_encodings(enc_t: Tensor, model: StafnModel) -> Tensor:
    # [..., steps, d] -> [..., steps, 1, d] plus node embedding [nodes, d]
    *lead, steps, d = enc_t.shape
    return T.reshape(enc_t, (*lead, steps, 1, d)) + model.params["node_emb"]


def encode_history(x_hat, hint, cal_his, model: StafnModel) -> Tensor:
    """Encoder stack; returns ``[..., n_in, nodes, d_model]``."""
    cfg = model.config
    x_hat = x_hat if isinstance(x_hat, Tensor) else Tensor(np.asarray(x_hat, dtype=cfg.dtype))
    hint = hint if isinstance(hint, Tensor) else Tensor(np.asarray(hint, dtype=cfg.dtype))
    if x_hat.shape != hint.shape or x_hat.shape[-3:] != (cfg.n_nodes, x_hat.shape[-2], cfg.d_in):
        raise DimensionError(f"encode_history: readings {x_hat.shape} / hint {hint.shape} incompatible with config")
    inputs = T.swapaxes(T.concat_last([x_hat, hint]), -2, -3)  # [..., time, node, 2*d_in]
    h = T.matmul(inputs, model.params["in_proj.w"]) + model.params["in_proj.b"]
    enc = _broadcast_encodings(temporal_encoding(cal_his, model), model)
    h = h + enc
    for i in range(cfg.n_blocks):
        if i > 0:
            h = h + enc
        s = spatial_attention(h, model.sub(f"enc{i}.spatial"), cfg)
        t = temporal_attention(h, model.sub(f"enc{i}.temporal"), cfg)
        h = s + t
        if cfg.fusion == "mlp":
            h = _position_wise(h, model.sub(f"enc{i}.fusion"), cfg, None)
    return h


def decode_future(h_his: Tensor, cal_fur, model: StafnModel) -> Tensor:
    """Decoder stack; returns ``[..., n_out, nodes, d_model]``."""
    cfg = model.config
    h = _broadcast_encodings(temporal_encoding(cal_fur, model), model)
    lead = h_his.shape[:-3]
    if h.shape[:-3] != lead:
        h = h + Tensor(np.zeros(lead + h.shape[-3:], dtype=cfg.dtype))
    for i in range(cfg.n_blocks):
        h = forecast_attention(h, h_his, model.sub(f"dec{i}.forecast"), cfg)
        h = spatial_attention(h, model.sub(f"dec{i}.spatial"), cfg)
    return h


def predict(h_fur: Tensor, model: StafnModel) -> Tensor:
    """Affine read-out ``[..., n_out, nodes, d_model] -> [..., n_out, nodes, d_out]``."""
    return T.matmul(h_fur, model.params["head.w"]) + model.params["head.b"]


@dataclass(frozen=True)
class ModelInputs:
    """Preprocessed model inputs; arrays may carry leading batch axes.

    ``x_hat`` and ``hint`` are ``[..., nodes, n_in, d_in]``; the calendar
    arrays are ``[..., steps, 8]`` (see :func:`calendar_features`).
    """

    x_hat: np.ndarray
    hint: np.ndarray
    cal_his: np.ndarray
    cal_fur: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.x_hat.shape[0] if self.x_hat.ndim == 4 else 1

    @staticmethod
    def stack(items: list[ModelInputs]) -> ModelInputs:
        return ModelInputs(*(np.concatenate([getattr(it, f) for it in items]) for f in ("x_hat", "hint", "cal_his", "cal_fur")))


def represent(inputs: ModelInputs, model: StafnModel) -> Tensor:
    """Decoder output representation ``H_fur``."""
    h_his = encode_history(inputs.x_hat, inputs.hint, inputs.cal_his, model)
    return decode_future(h_his, inputs.cal_fur, model)


def forward(inputs: ModelInputs, model: StafnModel) -> Tensor:
    return predict(represent(inputs, model), model)


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
