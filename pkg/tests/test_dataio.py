import numpy as np
import pytest

from rerand.dataio import DataError, read_matrix, read_table, write_curve_csv


def write(tmp_path, text, name="d.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestReadTable:
    def test_round_trip(self, tmp_path):
        path = write(tmp_path, "a,b\n1,2\n3,4.5\n")
        x, names = read_matrix(path)
        assert names == ["a", "b"]
        assert np.array_equal(x, [[1, 2], [3, 4.5]])

    def test_column_subset_and_blank_lines(self, tmp_path):
        path = write(tmp_path, "a,b,c\n1,2,3\n\n4,5,6\n")
        x, _ = read_matrix(path, ["c", "a"])
        assert np.array_equal(x, [[3, 1], [6, 4]])

    def test_missing_value_located(self, tmp_path):
        path = write(tmp_path, "a,b\n1,2\n3,\n")
        with pytest.raises(DataError, match=r"line 3, column 'b'"):
            read_matrix(path)

    def test_non_numeric_located(self, tmp_path):
        path = write(tmp_path, "a,b\n1,x\n")
        with pytest.raises(DataError, match=r"'x' at line 2, column 'b'"):
            read_matrix(path)

    def test_non_finite(self, tmp_path):
        with pytest.raises(DataError, match="non-finite"):
            read_matrix(write(tmp_path, "a\ninf\n"))

    def test_ragged(self, tmp_path):
        with pytest.raises(DataError, match="line 3 has 1 fields, expected 2"):
            read_table(write(tmp_path, "a,b\n1,2\n3\n"))

    def test_empty_and_header_only(self, tmp_path):
        with pytest.raises(DataError, match="empty"):
            read_table(write(tmp_path, ""))
        with pytest.raises(DataError, match="no data rows"):
            read_table(write(tmp_path, "a,b\n", "h.csv"))

    def test_unknown_column(self, tmp_path):
        with pytest.raises(DataError, match="no column named 'z'"):
            read_matrix(write(tmp_path, "a\n1\n"), ["z"])

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="cannot read"):
            read_table(tmp_path / "nope.csv")

    def test_text_column(self, tmp_path):
        table = read_table(write(tmp_path, "arm\ntreatment\ncontrol\n"))
        assert table.text("arm") == ["treatment", "control"]


def test_curve_csv_full_precision(tmp_path):
    path = tmp_path / "c.csv"
    write_curve_csv(path, [(1 / 3, 0.1, 0.0)])
    lines = path.read_text().splitlines()
    assert lines[0] == "p_a,value,stderr"
    assert float(lines[1].split(",")[0]) == 1 / 3
