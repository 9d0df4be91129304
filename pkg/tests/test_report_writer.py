import json

import pandas as pd
from openpyxl import load_workbook

from core.metrics import comparison_report
from core.report_writer import ReportWriter


def _report():
    rows = pd.DataFrame([
        {"method": "base_a", "seed": 0, "accuracy": 0.8, "loss": 0.5},
        {"method": "kf_linear", "seed": 0, "accuracy": 0.85, "loss": 0.45},
        {"method": "hf_linear", "seed": 0, "accuracy": float("nan"), "loss": float("nan")},
    ])
    return comparison_report([], results=rows)


def test_write_comparison_writes_every_format(tmp_path):
    paths = ReportWriter.write_comparison(_report(), tmp_path, stem="cmp")
    assert set(paths) == {"json", "csv", "txt", "xlsx"}
    assert all(p.exists() for p in paths.values())

    payload = json.loads(paths["json"].read_text())
    assert [row["method"] for row in payload["summary"]] == ["base_1", "kf_linear", "hf_linear"]
    assert "N/A" in paths["txt"].read_text()
    assert len(pd.read_csv(paths["csv"])) == 3
    assert load_workbook(paths["xlsx"]).sheetnames == ["summary", "per_seed"]


def test_write_table_by_suffix(tmp_path):
    frame = pd.DataFrame({"method": ["a", "b"], "accuracy": [0.5, 0.75]})
    csv = ReportWriter.write_table(frame, tmp_path / "out" / "t.csv")
    assert pd.read_csv(csv).equals(frame)
    records = json.loads(ReportWriter.write_table(frame, tmp_path / "t.json").read_text())
    assert records[1] == {"method": "b", "accuracy": 0.75}
    xlsx = ReportWriter.write_table(frame, tmp_path / "t.xlsx")
    assert pd.read_excel(xlsx, sheet_name="results")["accuracy"].tolist() == [0.5, 0.75]


def test_write_table_handles_an_empty_frame(tmp_path):
    empty = pd.DataFrame(columns=["model_id", "level", "neuron", "cluster", "score"])
    csv = ReportWriter.write_table(empty, tmp_path / "clusters.csv")
    assert csv.read_text().strip() == "model_id,level,neuron,cluster,score"
    xlsx = ReportWriter.write_table(empty, tmp_path / "clusters.xlsx")
    assert pd.read_excel(xlsx, sheet_name="results").columns.tolist() == list(empty.columns)
