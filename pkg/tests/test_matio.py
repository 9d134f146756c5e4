import json

import pandas as pd
import pytest
from numpy.testing import assert_array_equal

from models.results import SimulationRecord
from models.tables import AbundanceTable, Kernel, KernelProvenance, ResponseVector, SquareMatrix
from utils.errors import DomainError, IoError, NotPSDError, ParseError, SchemaError
from utils.matio_utils import align, load_records, load_table, save_records, save_summary, save_table


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


class TestLoadTable:
    def test_abundance_round_trip_is_exact(self, tmp_path, rng):
        X = AbundanceTable(["s1", "s2", "s3"], ["A", "B"], rng.standard_normal((3, 2)) / 3.0)
        path = str(tmp_path / "x.csv")
        save_table(X, path)
        loaded = load_table(path, "abundance")
        assert loaded.sample_ids == X.sample_ids and loaded.taxon_ids == X.taxon_ids
        assert_array_equal(loaded.values, X.values)

    def test_kernel_keeps_provenance(self, tmp_path):
        K = Kernel(["a", "b"], [[2.0, 1.0], [1.0, 2.0]], KernelProvenance.EDGE)
        path = str(tmp_path / "k.csv")
        save_table(K, path, comments={'note': 'test'})
        loaded = load_table(path, "kernel")
        assert loaded.provenance is KernelProvenance.EDGE
        assert_array_equal(loaded.values, K.values)

    def test_indefinite_kernel_is_rejected(self, tmp_path):
        path = _write(tmp_path / "k.csv", "id,a,b\na,1,2\nb,2,1\n")
        with pytest.raises(NotPSDError):
            load_table(path, "kernel")

    def test_response(self, tmp_path):
        path = _write(tmp_path / "y.csv", "# comment line\nsample_id,y\ns1,1.5\ns2,-2\n")
        y = load_table(path, "response")
        assert y.sample_ids == ("s1", "s2")
        assert_array_equal(y.values, [1.5, -2.0])

    def test_non_numeric_cell_position(self, tmp_path):
        path = _write(tmp_path / "bad.csv", "sample_id,A,B\ns1,1,2\ns2,x,3\n")
        with pytest.raises(ParseError, match="row 2, col 1"):
            load_table(path, "abundance")

    def test_non_finite_cell(self, tmp_path):
        path = _write(tmp_path / "bad.csv", "sample_id,A,B\ns1,1,inf\ns2,1,3\n")
        with pytest.raises(ParseError, match="row 1, col 2"):
            load_table(path, "abundance")

    def test_short_row(self, tmp_path):
        path = _write(tmp_path / "short.csv", "sample_id,A,B\ns1,1,2\ns2,1\n")
        with pytest.raises(ParseError, match="row 2, col 2"):
            load_table(path, "abundance")

    def test_long_row(self, tmp_path):
        path = _write(tmp_path / "long.csv", "sample_id,A,B\ns1,1,2\ns2,1,2,3\n")
        with pytest.raises(ParseError):
            load_table(path, "abundance")

    def test_square_matrix_ids_must_match(self, tmp_path):
        path = _write(tmp_path / "d.csv", "id,a,b\na,0,1\nc,1,0\n")
        with pytest.raises(SchemaError):
            load_table(path, "distance")

    def test_asymmetric_matrix(self, tmp_path):
        path = _write(tmp_path / "d.csv", "id,a,b\na,0,1\nb,2,0\n")
        with pytest.raises(DomainError):
            load_table(path, "distance")

    def test_duplicate_ids(self, tmp_path):
        path = _write(tmp_path / "dup.csv", "sample_id,A,A\ns1,1,2\ns2,1,3\n")
        with pytest.raises(SchemaError):
            load_table(path, "abundance")

    def test_response_needs_one_column(self, tmp_path):
        path = _write(tmp_path / "y.csv", "sample_id,y,z\ns1,1,2\ns2,1,3\n")
        with pytest.raises(SchemaError):
            load_table(path, "response")

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoError):
            load_table(str(tmp_path / "absent.csv"), "abundance")

    def test_unknown_kind(self, tmp_path):
        with pytest.raises(SchemaError):
            load_table(str(tmp_path / "x.csv"), "matrix")

    def test_distance(self, tmp_path):
        path = _write(tmp_path / "d.csv", "id,a,b\na,0,4\nb,4,0\n")
        D = load_table(path, "distance")
        assert isinstance(D, SquareMatrix) and not isinstance(D, Kernel)


def test_align_reorders_response(toy_table):
    y = ResponseVector(["s3", "s1", "s4", "s2"], [3.0, 1.0, 4.0, 2.0])
    assert_array_equal(align(toy_table, y).values, [1.0, 2.0, 3.0, 4.0])
    with pytest.raises(SchemaError):
        align(toy_table, ResponseVector(["s1", "s2", "s3", "s9"], [1.0, 2.0, 3.0, 4.0]))


def _records():
    return [
        SimulationRecord("dpcoa", 0, 0.5, 0.0, 10, "kpr", "cv_1se", 0.25, 1.5, "psse", 0.01),
        SimulationRecord("unifrac", 1, 0.2, 0.25, None, "lasso", "cv_min", None, 2.0 / 3.0, "hpsse", 1e-3),
    ]


class TestRecords:
    def test_round_trip_with_config_line(self, tmp_path):
        path = str(tmp_path / "records.jsonl")
        save_records(_records(), path, config={'seed': 7})
        lines = (tmp_path / "records.jsonl").read_text(encoding="utf-8").splitlines()
        assert json.loads(lines[0]) == {'config': {'seed': 7}}
        assert load_records(path) == _records()

    def test_invalid_line(self, tmp_path):
        path = _write(tmp_path / "records.jsonl", '{"config": {}}\nnot json\n')
        with pytest.raises(ParseError, match="row 2"):
            load_records(path)

    def test_summary_has_comment_header(self, tmp_path):
        path = str(tmp_path / "summary.csv")
        save_summary(pd.DataFrame({'method': ["kpr"], 'pred_mean': [0.1]}), path, {'config': '{}'})
        text = (tmp_path / "summary.csv").read_text(encoding="utf-8")
        assert text.startswith("# config: {}\n")
        frame = pd.read_csv(path, comment="#")
        assert frame['pred_mean'].tolist() == [0.1]
