"""
Fusion configuration and the shipped gradient-fusion presets.
"""
from dataclasses import asdict, dataclass, replace
from typing import Any, Dict, Literal, Optional, Tuple

from core.errors import ConfigError
from fusion.attribution import SCORE_KINDS

Variant = Literal["hf_linear", "kf_linear", "kf_gradient"]
VARIANTS = ("hf_linear", "kf_linear", "kf_gradient")

# Settings 1 and 2 for gradient fusion
GRADIENT_PRESETS: Dict[str, Dict[str, Any]] = {
    "setting1": {
        "variant": "kf_gradient",
        "optimizer": "adam", "lr": 1e-3, "epochs": 100,
        "last_optimizer": "adam", "last_lr": 1e-3, "last_epochs": 100,
        "weight_decay": 1e-4, "epsilon": 1.0, "batch_size": 32, "val_split": 0.1,
        "normalize_activations": False, "head_weights": True,
    },
    "setting2": {
        "variant": "kf_gradient",
        "optimizer": "sgd", "lr": 1e-4, "epochs": 50,
        "last_optimizer": "adam", "last_lr": 1e-3, "last_epochs": 100,
        "weight_decay": 1e-4, "epsilon": 0.1, "batch_size": 32, "val_split": 0.1,
        "normalize_activations": False, "head_weights": True,
    },
}


@dataclass(frozen=True)
class FusionConfig:
    """Everything that controls one fusion run."""
    variant: str = "kf_linear"
    widths: Optional[Tuple[int, ...]] = None
    score_kind: str = "uniform"
    boundary: str = "preactivation"
    hf_cost_mode: str = "exact"
    # K-means
    kmeans_restarts: int = 5
    kmeans_max_iters: int = 100
    kmeans_tol: float = 1e-10
    local_search_rounds: int = 0
    normalize_activations: bool = False
    normalize_scores: bool = False
    # gradient variant, first n-1 levels
    optimizer: str = "adam"
    lr: float = 1e-3
    epochs: int = 100
    # gradient variant, output level
    last_optimizer: str = "adam"
    last_lr: float = 1e-3
    last_epochs: int = 100
    weight_decay: float = 1e-4
    epsilon: float = 1.0
    batch_size: int = 32
    val_split: float = 0.1
    patience: int = 10
    head_weights: bool = False
    attribution_steps: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {', '.join(VARIANTS)}, got {self.variant!r}")
        if self.score_kind not in SCORE_KINDS:
            raise ConfigError(f"score_kind must be one of {', '.join(SCORE_KINDS)}, got {self.score_kind!r}")
        if self.boundary not in ("preactivation", "postactivation"):
            raise ConfigError(f"boundary must be preactivation or postactivation, got {self.boundary!r}")
        if self.variant != "kf_gradient" and self.boundary != "preactivation":
            raise ConfigError("linear variants need preactivation boundaries")
        if self.hf_cost_mode not in ("exact", "heuristic"):
            raise ConfigError(f"hf_cost_mode must be exact or heuristic, got {self.hf_cost_mode!r}")
        if self.widths is not None:
            widths = tuple(int(w) for w in self.widths)
            if any(w < 1 for w in widths):
                raise ConfigError(f"fused widths must be positive, got {widths}")
            object.__setattr__(self, "widths", widths)
        for name in ("optimizer", "last_optimizer"):
            if getattr(self, name) not in ("sgd", "adam"):
                raise ConfigError(f"{name} must be sgd or adam")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be nonnegative")
        if not 0 <= self.val_split < 1:
            raise ConfigError("val_split must be in [0, 1)")
        if min(self.kmeans_restarts, self.kmeans_max_iters, self.batch_size, self.attribution_steps) < 1:
            raise ConfigError("restarts, iteration caps, batch size and attribution steps must be positive")
        if self.epochs < 0 or self.last_epochs < 0 or self.patience < 1:
            raise ConfigError("epochs must be nonnegative and patience positive")

    @classmethod
    def from_mapping(cls, mapping: Dict[str, Any]) -> "FusionConfig":
        """
        Build from a config section. A 'preset' key (setting1 / setting2)
        is expanded first; explicit keys override it. Unknown keys are errors.
        """
        mapping = dict(mapping or {})
        preset = mapping.pop("preset", None)
        values: Dict[str, Any] = {}
        if preset is not None:
            if preset not in GRADIENT_PRESETS:
                raise ConfigError(f"unknown preset {preset!r}; expected {', '.join(GRADIENT_PRESETS)}")
            values.update(GRADIENT_PRESETS[preset])
        unknown = set(mapping) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown fusion keys: {', '.join(sorted(unknown))}")
        values.update(mapping)
        if values.get("widths") is not None:
            values["widths"] = tuple(values["widths"])
        try:
            return cls(**values)
        except TypeError as e:
            raise ConfigError(f"malformed fusion config: {e}") from e

    def with_overrides(self, **changes) -> "FusionConfig":
        return replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload["widths"] = list(self.widths) if self.widths is not None else None
        return payload
