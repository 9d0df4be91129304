"""
Analysis outputs: weight-space interpolation curves and method comparison
reports aggregated over seeds.
"""
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np
import pandas as pd

from core.data import Dataset
from core.errors import InvalidArgumentError, ShapeMismatchError
from core.network import ModelSpec
from core.training import evaluate
from utils.logger import setup_logger

logger = setup_logger(__name__)

BASE_PREFIX = "base"


@dataclass
class InterpolationCurve:
    """Loss and accuracy of (1 - lambda) A + lambda B on a uniform lambda grid."""
    lambdas: np.ndarray
    losses: np.ndarray
    accuracies: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"lambda": self.lambdas, "loss": self.losses, "accuracy": self.accuracies})

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        logger.info("Interpolation curve (%d points) written to %s", self.lambdas.size, path)
        return path

    def barrier(self) -> float:
        """Largest interior loss above the straight line between the endpoint losses."""
        line = (1 - self.lambdas) * self.losses[0] + self.lambdas * self.losses[-1]
        return float(np.max(self.losses - line))


def lerp_models(A: ModelSpec, B: ModelSpec, lam: float) -> ModelSpec:
    """Model with parameters (1 - lam) A + lam B."""
    if A.architecture() != B.architecture():
        raise ShapeMismatchError("interpolation needs identical architectures")
    if lam == 0:
        return A
    if lam == 1:
        return B
    mixed = [(1 - lam) * a + lam * b for a, b in zip(A.parameters(), B.parameters())]
    return A.with_parameters(mixed)


def interpolation_curve(A: ModelSpec, B: ModelSpec, dataset: Dataset, points: int = 11) -> InterpolationCurve:
    """
    Evaluate the straight segment between two models in weight space.

    Args:
        A: Model at lambda = 0
        B: Model at lambda = 1
        dataset: Labelled evaluation data
        points: Grid size, at least 2

    Returns:
        InterpolationCurve whose endpoints equal evaluate(A) and evaluate(B)
    """
    if points < 2:
        raise InvalidArgumentError(f"points must be at least 2, got {points}")
    if A.architecture() != B.architecture():
        raise ShapeMismatchError("interpolation needs identical architectures")

    lambdas = np.linspace(0.0, 1.0, points)
    losses, accuracies = [], []
    for lam in lambdas:
        accuracy, loss = evaluate(lerp_models(A, B, float(lam)), dataset)
        accuracies.append(accuracy)
        losses.append(loss)
    return InterpolationCurve(lambdas, np.array(losses), np.array(accuracies))


class Run(NamedTuple):
    """One evaluated method: a model, a list of models (ensemble) or None (not applicable)."""
    method: str
    model: Any
    seed: int = 0


def evaluate_run(model: Any, dataset: Dataset) -> Dict[str, float]:
    """Accuracy and loss of a model or, for a list of models, of their ensemble."""
    if model is None:
        return {"accuracy": float("nan"), "loss": float("nan")}
    if isinstance(model, (list, tuple)):
        from fusion.baselines import ensemble_predict

        probs = ensemble_predict(model, dataset.features)
        picked = probs[np.arange(len(dataset)), dataset.labels]
        return {
            "accuracy": float(np.mean(np.argmax(probs, axis=1) == dataset.labels)),
            "loss": float(-np.mean(np.log(np.maximum(picked, 1e-300)))),
        }
    accuracy, loss = evaluate(model, dataset)
    return {"accuracy": accuracy, "loss": loss}


def _rank_bases(rows: pd.DataFrame) -> pd.DataFrame:
    """Rename base rows to base_1, base_2, ... by descending accuracy within each seed."""
    rows = rows.copy()
    is_base = rows["method"].str.startswith(BASE_PREFIX)
    for _, group in rows[is_base].groupby("seed"):
        ordered = group.sort_values("accuracy", ascending=False, kind="stable")
        for rank, index in enumerate(ordered.index, start=1):
            rows.loc[index, "method"] = f"{BASE_PREFIX}_{rank}"
    return rows


@dataclass
class ComparisonReport:
    """Per-seed results and their mean / sample standard deviation per method."""
    rows: pd.DataFrame
    summary: pd.DataFrame

    def to_dict(self) -> Dict[str, Any]:
        def clean(frame: pd.DataFrame) -> List[Dict[str, Any]]:
            records = frame.to_dict(orient="records")
            return [{k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in r.items()}
                    for r in records]
        return {"rows": clean(self.rows), "summary": clean(self.summary)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        """Aligned table of accuracy and loss as mean ± std (N/A when not applicable)."""
        def cell(mean: float, std: float, scale: float, digits: int) -> str:
            if np.isnan(mean):
                return "N/A"
            return f"{scale * mean:.{digits}f} ± {scale * std:.{digits}f}"

        table = pd.DataFrame({
            "method": self.summary["method"],
            "accuracy (%)": [cell(m, s, 100.0, 1) for m, s in
                             zip(self.summary["accuracy_mean"], self.summary["accuracy_std"])],
            "loss": [cell(m, s, 1.0, 4) for m, s in zip(self.summary["loss_mean"], self.summary["loss_std"])],
            "seeds": self.summary["n_seeds"],
        })
        return table.to_string(index=False)


def aggregate(rows: pd.DataFrame) -> pd.DataFrame:
    """
    Mean and sample standard deviation per method, in first-appearance
    order with ranked base models first. A single seed has std 0.
    """
    order = list(dict.fromkeys(rows["method"]))
    order = sorted((m for m in order if m.startswith(BASE_PREFIX)), key=lambda m: (len(m), m)) + \
        [m for m in order if not m.startswith(BASE_PREFIX)]

    summary = []
    for method in order:
        group = rows[rows["method"] == method]
        entry = {"method": method, "n_seeds": int(len(group))}
        for metric in ("accuracy", "loss"):
            values = group[metric].to_numpy(dtype=np.float64)
            if np.any(np.isnan(values)):
                entry[f"{metric}_mean"] = entry[f"{metric}_std"] = float("nan")
                continue
            entry[f"{metric}_mean"] = float(np.mean(values))
            entry[f"{metric}_std"] = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
        summary.append(entry)
    return pd.DataFrame(summary, columns=["method", "accuracy_mean", "accuracy_std",
                                          "loss_mean", "loss_std", "n_seeds"])


def comparison_report(runs: Sequence[Union[Run, tuple]], test_set: Optional[Dataset] = None,
                      results: Optional[pd.DataFrame] = None) -> ComparisonReport:
    """
    Evaluate every run on the test set and build the comparison report.

    Methods whose name starts with 'base' are ranked by accuracy within
    each seed before averaging across seeds.

    Args:
        runs: (method, model or list of models or None, seed) entries
        test_set: Labelled evaluation data
        results: Already evaluated per-seed rows (method, seed, accuracy, loss) to include

    Returns:
        ComparisonReport
    """
    records = []
    for run in runs:
        run = Run(*run)
        if test_set is None:
            raise InvalidArgumentError("a test set is needed to evaluate runs")
        records.append({"method": run.method, "seed": int(run.seed), **evaluate_run(run.model, test_set)})
    frames = [pd.DataFrame(records, columns=["method", "seed", "accuracy", "loss"])]
    if results is not None:
        frames.append(results[["method", "seed", "accuracy", "loss"]])
    rows = pd.concat(frames, ignore_index=True)
    if rows.empty:
        raise InvalidArgumentError("comparison report needs at least one run")

    rows = _rank_bases(rows)
    report = ComparisonReport(rows, aggregate(rows))
    logger.info("Comparison report: %d methods over %d rows", len(report.summary), len(rows))
    return report
