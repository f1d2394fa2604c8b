"""
utils/table_exporter.py

Reusable utility class for preparing and writing the result tables of the project
(analysis tables, deanonymization records, scenario summaries) from a pandas DataFrame.

This class provides methods for:
- Checking that required columns are present
- Renaming and reordering columns
- Rounding float columns for display
- Stamping the CSV schema version
- Rendering aligned text and writing CSV / NDJSON files

Example:
    from utils.table_exporter import TableExporter
    exporter = TableExporter(df).require_columns(["M", "p_success"]).round_columns(3)
    print(exporter.to_text())
    exporter.write_csv(out_dir / "success.csv")

"""

import pathlib
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import pandas as pd

SCHEMA_VERSION = 1


class TableExporter:
    def __init__(self, df: pd.DataFrame):
        """
        Initialize the TableExporter with a DataFrame.

        Parameters:
            df (pd.DataFrame): The table to be exported.
        """
        self.df = df

    @classmethod
    def from_records(cls, records: Iterable[Mapping], columns: Optional[Sequence[str]] = None) -> "TableExporter":
        """Build from a list of dicts; `columns` fixes the column order for empty inputs too."""
        rows = list(records)
        if columns is None:
            return cls(pd.DataFrame(rows))
        return cls(pd.DataFrame(rows, columns=list(columns)))

    def get_dataframe(self) -> pd.DataFrame:
        return self.df

    def require_columns(self, columns: Sequence[str]) -> "TableExporter":
        """
        Check that every listed column is present.

        Raises:
            ValueError: If a column is not found in the DataFrame.
        """
        for column in columns:
            if column not in self.df.columns:
                raise ValueError(f"Column '{column}' not found in the DataFrame.")
        return self

    def rename_columns(self, column_mapping: Dict[str, str]) -> "TableExporter":
        """
        Rename columns based on a provided mapping.

        Raises:
            ValueError: If a specified column is not found in the DataFrame.
        """
        self.require_columns(list(column_mapping))
        self.df = self.df.rename(columns=column_mapping)
        return self

    def reorder_columns(self, columns: List[str]) -> "TableExporter":
        """
        Reorder (and select) columns.

        Raises:
            ValueError: If a specified column is not found in the DataFrame.
        """
        self.require_columns(columns)
        self.df = self.df[columns]
        return self

    def round_columns(self, digits: int, columns: Optional[List[str]] = None) -> "TableExporter":
        """Round float columns (all of them when `columns` is None)."""
        if columns is None:
            columns = self.df.select_dtypes(include=["float"]).columns.tolist()
        self.require_columns(columns)
        self.df = self.df.copy()
        self.df[columns] = self.df[columns].round(digits)
        return self

    def with_schema_version(self, version: int = SCHEMA_VERSION) -> "TableExporter":
        """Prepend a constant `schema_version` column."""
        self.df = self.df.copy()
        if "schema_version" in self.df.columns:
            self.df = self.df.drop(columns=["schema_version"])
        self.df.insert(0, "schema_version", version)
        return self

    def to_text(self, float_format: str = "{:.4g}") -> str:
        """Aligned plain-text rendering without the index."""
        if self.df.empty:
            return "(empty table)"
        return self.df.to_string(index=False, float_format=lambda v: float_format.format(v))

    def write_csv(self, path: pathlib.Path) -> pathlib.Path:
        path = pathlib.Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.df.to_csv(path, index=False)
        return path

    def write_ndjson(self, path: pathlib.Path) -> pathlib.Path:
        """Newline-delimited JSON, one record per row."""
        path = pathlib.Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if self.df.empty:
            path.write_text("")
        else:
            self.df.to_json(path, orient="records", lines=True)
        return path
