"""Experiment configuration and its flat ``section.key = value`` text format.

Example::

    # comments start with '#'
    model.d_model = 16
    loss.lam = 0.75
    mask.train_rate_range = 0.25, 0.9

Unlisted keys keep their defaults.  Tuples are comma separated and booleans
are ``true``/``false``.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

from ..errors import ContractError
from ..masking import MaskSpec
from ..objective import LossConfig
from ..stafn import ModelConfig


@dataclass(frozen=True)
class ModelSettings:
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


@dataclass(frozen=True)
class DataSettings:
    n_in: int = 12
    n_out: int = 12
    train_stride: int = 1
    eval_stride: int = 0  # 0 means n_out
    split_fractions: tuple[float, ...] = (0.6, 0.2, 0.2)


@dataclass(frozen=True)
class PreprocessSettings:
    sigma: float = 0.2
    hint_mode: str = "hint"


@dataclass(frozen=True)
class MaskSettings:
    train_pattern: str = "mixed"
    train_rate_range: tuple[float, ...] = (0.25, 0.90)
    aug_pattern: str = "mixed"
    aug_rate_range: tuple[float, ...] = (0.10, 0.50)
    mix_point: float = 1 / 3
    mix_row: float = 1 / 3
    mix_column: float = 1 / 3
    mix_block: float = 0.0
    block_min_len: int = 2
    block_max_len: int = 0  # 0 means n_in

    def _spec(self, pattern: str, rate_range) -> MaskSpec:
        weights = {"point": self.mix_point, "row": self.mix_row, "column": self.mix_column, "block": self.mix_block}
        weights = {k: v for k, v in weights.items() if v > 0}
        return MaskSpec(
            pattern=pattern,
            rate_range=tuple(rate_range),
            mix_weights=weights,
            min_len=self.block_min_len,
            max_len=self.block_max_len or None,
        )

    def train_spec(self) -> MaskSpec:
        return self._spec(self.train_pattern, self.train_rate_range)

    def aug_spec(self) -> MaskSpec:
        return self._spec(self.aug_pattern, self.aug_rate_range)


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 2e-4
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ContractError(f"learning rate must be positive, got {self.lr}")


@dataclass(frozen=True)
class LoopSettings:
    batch_size: int = 32
    epochs: int = 30
    patience: int = 10
    seed: int = 0
    max_batches: int = 0  # 0 means the full training set every epoch
    val_pattern: str = "point"
    val_rates: tuple[float, ...] = (0.25, 0.5, 0.75, 0.9)

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class EvalSettings:
    patterns: tuple[str, ...] = ("point", "block")
    rates: tuple[float, ...] = (0.25, 0.5, 0.75, 0.9)
    seeds: int = 3
    batch_size: int = 64


@dataclass(frozen=True)
class SynthSettings:
    n_nodes: int = 8
    steps: int = 2000
    d_in: int = 4
    seed: int = 0
    noise: float = 0.1
    organic_rate: float = 0.05


@dataclass(frozen=True)
class TrainConfig:
    model: ModelSettings = field(default_factory=ModelSettings)
    data: DataSettings = field(default_factory=DataSettings)
    preprocess: PreprocessSettings = field(default_factory=PreprocessSettings)
    loss: LossConfig = field(default_factory=LossConfig)
    mask: MaskSettings = field(default_factory=MaskSettings)
    optim: AdamWConfig = field(default_factory=AdamWConfig)
    train: LoopSettings = field(default_factory=LoopSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    synth: SynthSettings = field(default_factory=SynthSettings)

    def model_config(self, n_nodes: int, d_in: int, d_out: int) -> ModelConfig:
        m = self.model
        return ModelConfig(
            n_nodes=n_nodes, d_in=d_in, d_out=d_out, n_in=self.data.n_in, n_out=self.data.n_out,
            n_blocks=m.n_blocks, d_model=m.d_model, n_heads=m.n_heads, mlp_hidden=m.mlp_hidden,
            residual=m.residual, layer_norm=m.layer_norm, nonlinearity=m.nonlinearity,
            scale_by_model_dim=m.scale_by_model_dim, fusion=m.fusion, dtype=m.dtype,
        )

    def with_values(self, **flat) -> TrainConfig:
        """Copy with ``section__key=value`` or ``{"section.key": value}`` overrides."""
        return from_flat({**to_flat(self), **{k.replace("__", "."): v for k, v in flat.items()}})

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in to_flat(self).items())

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def to_flat(cfg: TrainConfig) -> dict[str, object]:
    out = {}
    for sec in fields(cfg):
        section = getattr(cfg, sec.name)
        for f in fields(section):
            out[f"{sec.name}.{f.name}"] = getattr(section, f.name)
    return out


def from_flat(flat: dict[str, object]) -> TrainConfig:
    defaults = TrainConfig()
    known = to_flat(defaults)
    unknown = sorted(set(flat) - set(known))
    if unknown:
        raise ContractError(f"unknown config keys: {unknown}")
    sections = {}
    for sec in fields(defaults):
        section = getattr(defaults, sec.name)
        kwargs = {}
        for f in fields(section):
            key = f"{sec.name}.{f.name}"
            if key in flat:
                kwargs[f.name] = _coerce(flat[key], getattr(section, f.name), key)
        try:
            sections[sec.name] = replace(section, **kwargs)
        except (TypeError, ValueError) as exc:
            raise ContractError(f"invalid [{sec.name}] settings: {exc}") from None
    return TrainConfig(**sections)


def diff(a: TrainConfig, b: TrainConfig) -> dict[str, tuple[object, object]]:
    fa, fb = to_flat(a), to_flat(b)
    return {k: (fa[k], fb[k]) for k in fa if fa[k] != fb[k]}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(value, default, key: str):
    if not isinstance(value, str):
        if isinstance(default, tuple):
            return tuple(value)
        return value
    text = value.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(f"expected true/false, got {text!r}")
            return text.lower() == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [s.strip() for s in text.split(",") if s.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(s) for s in items)
    except ValueError as exc:
        raise ContractError(f"{key}: {exc}") from None
    return text


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    flat = to_flat(base or TrainConfig())
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in flat:
            raise ContractError(f"config line {lineno}: unknown key {key!r}")
        flat[key] = value
    return from_flat(flat)


BUILTIN_CONFIGS = ("desk", "full")


def load_config(name_or_path: str | Path | None) -> TrainConfig:
    """Load a config file, or a shipped preset by name (``desk`` or ``full``)."""
    if name_or_path is None:
        name_or_path = "desk"
    if str(name_or_path) in BUILTIN_CONFIGS:
        text = resources.files("geomae.configs").joinpath(f"{name_or_path}.cfg").read_text()
    else:
        path = Path(name_or_path)
        if not path.exists():
            raise ContractError(f"config file {path} does not exist")
        text = path.read_text()
    return parse_config_text(text)


def dataclass_dict(obj) -> dict:
    return dataclasses.asdict(obj)
