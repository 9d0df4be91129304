import pandas as pd
import pytest

from nimf import main

pytestmark = pytest.mark.slow

FUSED = ("hf_linear", "kf_linear", "kf_gradient")


def _seed_means(out_dir):
    rows = pd.read_csv(out_dir / "comparison.csv")
    return rows, rows.groupby("method")["accuracy"].mean()


def test_noniid_two_way_experiment(tmp_path):
    assert main(["experiment", "--manifest", "noniid-2way", "--out", str(tmp_path)]) == 0
    rows, means = _seed_means(tmp_path)
    assert set(rows["seed"]) == {0, 1, 2, 3, 4}
    best = means["base_1"]

    assert means["vanilla"] <= best - 0.30
    for method in ("hf_linear", "kf_linear"):
        assert means[method] >= best - 0.05
    for method in FUSED:
        assert means[method] >= means["vanilla"] + 0.30
        assert means["ensemble"] >= means[method]
    assert means["kd"] >= means["vanilla"]

    for seed in range(5):
        for i in range(2):
            assert (tmp_path / f"seed{seed}" / f"base_{i}.uniform.scores.csv").exists()


def test_full_dataset_experiment_with_finetuning(tmp_path):
    assert main(["experiment", "--manifest", "full-2way", "--out", str(tmp_path)]) == 0
    rows, means = _seed_means(tmp_path)
    assert set(rows["seed"]) == {0, 1, 2}
    best = means["base_1"]

    for method in FUSED:
        assert f"{method}+ft" in means.index
    for method in ("hf_linear", "kf_linear"):
        assert means[f"{method}+ft"] >= best - 0.05
    assert means["vanilla"] < best
