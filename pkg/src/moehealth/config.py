"""Model and training configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .errors import ConfigError

ABLATION_MODES = ("none", "no_missing_indicator", "no_specialization", "no_dynamic_gating", "top1")


@dataclass
class ModelConfig:
    d_h: int = 32
    static_dim: int = 8
    series_dim: int = 12
    vocab_size: int = 256
    image_dim: int = 64
    rnn_hidden: int = 32
    static_hidden: int = 16
    token_dim: int = 32
    image_hidden: int = 64
    gate_hidden: int = 64
    expert_hidden: int = 64
    # one e_absent vector for every modality instead of one per modality
    shared_missing: bool = False

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.type == "int" and (not isinstance(v, int) or v < 1):
                raise ConfigError(f"model.{f.name} must be a positive integer, got {v!r}")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    alpha: float = 0.01
    k: int = 2
    pretrain_epochs: int = 5
    seed: int = 0
    ablation_mode: str = "none"
    # modalities the model is allowed to see; the rest are treated as absent
    modalities: str = "ETI"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.ablation_mode not in ABLATION_MODES:
            raise ConfigError(f"unknown ablation mode {self.ablation_mode!r}; expected one of {ABLATION_MODES}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        for name in ("batch_size", "max_epochs", "patience", "k"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if not isinstance(self.pretrain_epochs, int) or self.pretrain_epochs < 0:
            raise ConfigError("pretrain_epochs must be a non-negative integer")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")
        if not self.modalities or any(c not in "ETI" for c in self.modalities):
            raise ConfigError(f"modalities must be a nonempty subset of 'ETI', got {self.modalities!r}")
        self.modalities = "".join(c for c in "ETI" if c in self.modalities)
        self.model.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig(**d.pop("model", {}))
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        cfg = cls(model=model, **d)
        cfg.validate()
        return cfg


def apply_ablation(config: TrainConfig) -> TrainConfig:
    """Return a copy of ``config`` wired for its ablation mode.

    ``top1`` becomes ``k = 1``; ``no_specialization`` disables pretraining.
    ``no_missing_indicator`` and ``no_dynamic_gating`` are honoured by the
    model at forward time.
    """
    config.validate()
    cfg = dataclasses.replace(config, model=dataclasses.replace(config.model))
    if cfg.ablation_mode == "top1":
        cfg.k = 1
    elif cfg.ablation_mode == "no_specialization":
        cfg.pretrain_epochs = 0
    return cfg
