"""
Run manifests and fusion presets loaded from YAML documents.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml

from core.errors import ConfigError
from utils.logger import setup_logger

logger = setup_logger(__name__)

DATASET_KEYS = {
    "kind", "n_classes", "dim", "per_class", "spread", "center_scale", "test_fraction",
    "train_images", "train_labels", "test_images", "test_labels",
}
SPLIT_KEYS = {"regime", "n_models", "alpha_min", "min_max_ratio"}
SPLIT_REGIMES = ("dirichlet", "sharded", "full", "duplicate")
MODEL_KEYS = {"hidden", "activation"}
KD_KEYS = {"epochs", "lr", "batch_size"}
BASELINES = ("vanilla", "ensemble", "kd")
TOP_KEYS = {
    "name", "seeds", "dataset", "split", "model", "training", "fusion", "baselines", "kd",
    "fusion_samples", "finetune_epochs", "out_dir",
}


def _section(payload: Dict[str, Any], key: str, allowed: Optional[set] = None) -> Dict[str, Any]:
    value = payload.get(key) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"manifest section '{key}' must be a mapping")
    if allowed is not None:
        unknown = set(value) - allowed
        if unknown:
            raise ConfigError(f"unknown keys in '{key}': {', '.join(sorted(unknown))}")
    return dict(value)


@dataclass
class RunManifest:
    """Everything one experiment needs: data, split, architecture, training and fusion runs."""
    name: str
    seeds: List[int]
    dataset: Dict[str, Any]
    split: Dict[str, Any]
    model: Dict[str, Any]
    training: Dict[str, Any] = field(default_factory=dict)
    fusion: List[Dict[str, Any]] = field(default_factory=list)
    baselines: List[str] = field(default_factory=list)
    kd: Dict[str, Any] = field(default_factory=dict)
    fusion_samples: Optional[int] = None
    finetune_epochs: int = 0
    out_dir: Optional[str] = None

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("manifest needs at least one seed")
        self.seeds = [int(s) for s in self.seeds]
        if self.dataset.get("kind", "synthetic") not in ("synthetic", "idx"):
            raise ConfigError(f"dataset kind must be synthetic or idx, got {self.dataset.get('kind')!r}")
        if self.split.get("regime") not in SPLIT_REGIMES:
            raise ConfigError(f"split regime must be one of {', '.join(SPLIT_REGIMES)}, got {self.split.get('regime')!r}")
        if int(self.split.get("n_models", 0)) < 1:
            raise ConfigError("split.n_models must be at least 1")
        if not self.model.get("hidden"):
            raise ConfigError("model.hidden must list at least one hidden width")
        unknown = set(self.baselines) - set(BASELINES)
        if unknown:
            raise ConfigError(f"unknown baselines: {', '.join(sorted(unknown))}")
        names = [run.get("name") for run in self.fusion]
        if any(not n for n in names) or len(set(names)) != len(names):
            raise ConfigError("every fusion run needs a unique name")
        if self.fusion_samples is not None and int(self.fusion_samples) < 1:
            raise ConfigError("fusion_samples must be positive")
        if int(self.finetune_epochs) < 0:
            raise ConfigError("finetune_epochs must be nonnegative")

    @classmethod
    def from_mapping(cls, payload: Dict[str, Any]) -> "RunManifest":
        if not isinstance(payload, dict):
            raise ConfigError("manifest must be a YAML mapping")
        unknown = set(payload) - TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown manifest keys: {', '.join(sorted(unknown))}")
        if "name" not in payload or "seeds" not in payload:
            raise ConfigError("manifest needs 'name' and 'seeds'")

        fusion = payload.get("fusion") or []
        if not isinstance(fusion, list) or not all(isinstance(run, dict) for run in fusion):
            raise ConfigError("manifest 'fusion' must be a list of mappings")
        seeds = payload["seeds"]
        if not isinstance(seeds, list):
            raise ConfigError("manifest 'seeds' must be a list")

        return cls(
            name=str(payload["name"]),
            seeds=seeds,
            dataset=_section(payload, "dataset", DATASET_KEYS),
            split=_section(payload, "split", SPLIT_KEYS),
            model=_section(payload, "model", MODEL_KEYS),
            training=_section(payload, "training"),
            fusion=[dict(run) for run in fusion],
            baselines=list(payload.get("baselines") or []),
            kd=_section(payload, "kd", KD_KEYS),
            fusion_samples=payload.get("fusion_samples"),
            finetune_epochs=int(payload.get("finetune_epochs") or 0),
            out_dir=payload.get("out_dir"),
        )


class ManifestLoader:
    """Loads run manifests and presets from the docs directory."""

    def __init__(self, docs_path: Path):
        """
        Initialize manifest loader.

        Args:
            docs_path: Path to the docs directory containing presets/ and manifests/
        """
        self.docs_path = Path(docs_path)

    @staticmethod
    def _read_yaml(path: Path) -> Any:
        with open(path, encoding='utf-8') as f:
            return yaml.safe_load(f)

    def resolve(self, name_or_path: Union[str, Path], folder: str) -> Path:
        """A path as given, or docs/<folder>/<name>.yml for a bare name."""
        path = Path(name_or_path)
        if path.exists():
            return path
        candidate = self.docs_path / folder / f"{path.stem}.yml"
        if candidate.exists():
            return candidate
        raise FileNotFoundError(f"no such {folder[:-1]}: {name_or_path}")

    def load_manifest(self, name_or_path: Union[str, Path]) -> RunManifest:
        path = self.resolve(name_or_path, "manifests")
        logger.info("Loading manifest from %s", path)
        manifest = RunManifest.from_mapping(self._read_yaml(path))
        logger.info("Manifest '%s' loaded: %d seeds, %d fusion runs",
                    manifest.name, len(manifest.seeds), len(manifest.fusion))
        return manifest

    def load_preset(self, name_or_path: Union[str, Path]) -> Dict[str, Any]:
        """Fusion config mapping from a preset file."""
        path = self.resolve(name_or_path, "presets")
        payload = self._read_yaml(path) or {}
        if not isinstance(payload, dict):
            raise ConfigError(f"{path}: preset must be a mapping")
        logger.debug("Loaded preset %s", path.name)
        return payload

    def list_manifests(self) -> List[str]:
        """Names of all shipped manifests."""
        return sorted(p.stem for p in (self.docs_path / "manifests").glob("*.yml"))
