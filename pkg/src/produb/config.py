"""Training/model configuration and the layered key-value config file.

Precedence is CLI overrides > config file > defaults. Config files are
plain text, one `key = value` per line, `#` starts a comment.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

from .errors import InvalidArgumentError

STAGE_PRETRAIN = "pretrain"
STAGE_ADAPT = "adapt"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters shared by both stages."""

    d_m: int = 128
    n_head: int = 4
    n_phonemes: int = 32
    n_mels: int = 80
    decoder_blocks: int = 3
    predictor_hidden: int = 128
    diffusion_steps: int = 50
    # beta_end chosen so the terminal cumulative alpha is < 0.01
    beta_start: float = 1e-4
    beta_end: float = 0.2

    def __post_init__(self):
        if self.d_m % self.n_head != 0:
            raise InvalidArgumentError(
                f"n_head={self.n_head} must divide d_m={self.d_m}"
            )


@dataclass
class TrainConfig:
    """One training run. Optimizer defaults follow the reference recipe."""

    stage: str = STAGE_PRETRAIN
    epochs: int = 20
    lr: float = 0.00625
    adam_betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-9
    loss_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 0.2)
    seed: int = 0
    batch_size: int = 8
    d_m: int = 128
    n_head: int = 4
    n_phonemes: int = 32
    diffusion_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.2

    def __post_init__(self):
        if self.stage not in (STAGE_PRETRAIN, STAGE_ADAPT):
            raise InvalidArgumentError(f"unknown stage {self.stage!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidArgumentError("epochs must be >= 0 and batch_size >= 1")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d_m=self.d_m,
            n_head=self.n_head,
            n_phonemes=self.n_phonemes,
            diffusion_steps=self.diffusion_steps,
            beta_start=self.beta_start,
            beta_end=self.beta_end,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        kwargs = dict(obj)
        if "adam_betas" in kwargs:
            kwargs["adam_betas"] = tuple(kwargs["adam_betas"])
        if "loss_weights" in kwargs:
            kwargs["loss_weights"] = tuple(kwargs["loss_weights"])
        known = {f.name for f in fields(cls)}
        unknown = set(kwargs) - known
        if unknown:
            raise InvalidArgumentError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kwargs)


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in ("adam_betas", "loss_weights"):
        return tuple(float(v) for v in raw.split(","))
    if key == "stage":
        return raw
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        raise InvalidArgumentError(f"cannot parse config value {key} = {raw!r}")


def read_config_file(path) -> dict:
    """Parse a `key = value` config file into a dict of typed values."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgumentError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        values[key.strip()] = _parse_value(key.strip(), raw)
    return values


def load_train_config(config_path=None, overrides: dict | None = None) -> TrainConfig:
    """Layer defaults, an optional config file, and CLI overrides."""
    merged: dict = {}
    if config_path is not None:
        merged.update(read_config_file(config_path))
    if overrides:
        merged.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(merged)
