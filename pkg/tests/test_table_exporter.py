import tempfile
import pathlib
import unittest

import pandas as pd

from utils.table_exporter import SCHEMA_VERSION, TableExporter


class TestTableExporter(unittest.TestCase):

    def setUp(self):
        # Small result table with a float column to round
        data = {
            'M': [1, 2, 3],
            'p_success': [0.7212091, 0.3552494, 0.1122571],
            'label': ['a', 'b', 'c'],
        }
        self.df = pd.DataFrame(data)
        self.exporter = TableExporter(self.df)

    def test_require_columns_missing(self):
        with self.assertRaises(ValueError):
            self.exporter.require_columns(['M', 'missing'])

    def test_rename_columns(self):
        self.exporter.rename_columns({'M': 'tuple_size'})
        self.assertIn('tuple_size', self.exporter.get_dataframe().columns)
        self.assertNotIn('M', self.exporter.get_dataframe().columns)

    def test_reorder_columns(self):
        self.exporter.reorder_columns(['label', 'M'])
        self.assertEqual(list(self.exporter.get_dataframe().columns), ['label', 'M'])

    def test_round_columns(self):
        self.exporter.round_columns(3)
        self.assertEqual(self.exporter.get_dataframe()['p_success'].tolist(), [0.721, 0.355, 0.112])
        # the source frame is left alone
        self.assertAlmostEqual(self.df['p_success'][0], 0.7212091)

    def test_schema_version_is_first_column(self):
        df = self.exporter.with_schema_version().with_schema_version().get_dataframe()
        self.assertEqual(df.columns[0], 'schema_version')
        self.assertEqual(list(df.columns).count('schema_version'), 1)
        self.assertTrue((df['schema_version'] == SCHEMA_VERSION).all())

    def test_from_records_empty_keeps_columns(self):
        exporter = TableExporter.from_records([], columns=['seed', 'tx_id'])
        self.assertEqual(list(exporter.get_dataframe().columns), ['seed', 'tx_id'])
        self.assertEqual(exporter.to_text(), '(empty table)')

    def test_write_csv_and_ndjson(self):
        with tempfile.TemporaryDirectory() as tmp:
            csv_path = self.exporter.write_csv(pathlib.Path(tmp) / 'nested' / 'table.csv')
            self.assertTrue(pd.read_csv(csv_path).equals(self.df))
            nd_path = self.exporter.write_ndjson(pathlib.Path(tmp) / 'table.ndjson')
            self.assertEqual(len(nd_path.read_text().strip().splitlines()), 3)


if __name__ == '__main__':
    unittest.main()
