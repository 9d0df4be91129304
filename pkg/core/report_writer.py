"""
Report file generation: CSV, JSON, aligned text and Excel workbooks.
"""
import io
from pathlib import Path
from typing import Dict, Union

import pandas as pd

from core.metrics import ComparisonReport
from utils.logger import setup_logger

logger = setup_logger(__name__)


class ReportWriter:
    """Writes result tables and comparison reports to disk."""

    @staticmethod
    def create_excel_buffer(sheets: Dict[str, pd.DataFrame]) -> io.BytesIO:
        """
        Create an Excel workbook in memory, one sheet per DataFrame.

        Args:
            sheets: Sheet name -> DataFrame

        Returns:
            BytesIO buffer containing the workbook

        Raises:
            Exception: If Excel creation fails
        """
        logger.info("Creating Excel workbook with %d sheets", len(sheets))

        try:
            excel_buffer = io.BytesIO()
            with pd.ExcelWriter(excel_buffer, engine='openpyxl') as writer:
                for name, df in sheets.items():
                    df.to_excel(writer, index=False, sheet_name=name[:31])
            excel_buffer.seek(0)
            return excel_buffer

        except Exception as e:
            logger.error("Failed to create Excel workbook: %s", str(e))
            raise

    @staticmethod
    def write_table(df: pd.DataFrame, path: Union[str, Path]) -> Path:
        """Write a DataFrame as .csv, .json or .xlsx depending on the suffix."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.suffix == ".xlsx":
            path.write_bytes(ReportWriter.create_excel_buffer({"results": df}).getvalue())
        elif path.suffix == ".json":
            path.write_text(df.to_json(orient="records", indent=2), encoding="utf-8")
        else:
            df.to_csv(path, index=False)
        logger.info("Wrote %s (%d rows, %d columns)", path, len(df), len(df.columns))
        return path

    @staticmethod
    def write_comparison(report: ComparisonReport, out_dir: Union[str, Path],
                         stem: str = "comparison") -> Dict[str, Path]:
        """
        Write a comparison report as JSON, CSV, aligned text and xlsx.

        Returns:
            Format -> written path
        """
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "json": out_dir / f"{stem}.json",
            "csv": out_dir / f"{stem}.csv",
            "txt": out_dir / f"{stem}.txt",
            "xlsx": out_dir / f"{stem}.xlsx",
        }
        paths["json"].write_text(report.to_json(), encoding="utf-8")
        report.rows.to_csv(paths["csv"], index=False)
        paths["txt"].write_text(report.to_text() + "\n", encoding="utf-8")
        workbook = ReportWriter.create_excel_buffer({"summary": report.summary, "per_seed": report.rows})
        paths["xlsx"].write_bytes(workbook.getvalue())
        logger.info("Comparison report written to %s", out_dir)
        return paths
