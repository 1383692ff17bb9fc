import numpy as np
import pandas as pd
import pytest

from data import extract_targets, has_target, infer_schema, load_csv, load_schema, split_train_val
from exceptions import DataError, InvalidArgumentError, SchemaError
from models import Task
from preprocess import ColumnKind, DatasetSchema


class TestLoadCsv:

    def test_reads_header_and_rows(self, sample_files, sample_frame):
        csv_path, _ = sample_files
        frame = load_csv(csv_path)
        assert list(frame.columns) == list(sample_frame.columns)
        assert len(frame) == len(sample_frame)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_csv(tmp_path / "nope.csv")

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("", encoding="utf-8")
        with pytest.raises(DataError):
            load_csv(path)


class TestLoadSchema:
    """YAML schema files."""

    def test_valid(self, sample_files):
        _, schema_path = sample_files
        schema = load_schema(schema_path)
        assert schema.target == "label"
        assert schema.categorical == ["city"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(SchemaError):
            load_schema(tmp_path / "schema.yaml")

    def test_not_a_mapping(self, tmp_path):
        path = tmp_path / "schema.yaml"
        path.write_text("- a\n- b\n", encoding="utf-8")
        with pytest.raises(SchemaError, match="mapping"):
            load_schema(path)

    def test_invalid_yaml(self, tmp_path):
        path = tmp_path / "schema.yaml"
        path.write_text("a: [unclosed\n", encoding="utf-8")
        with pytest.raises(SchemaError):
            load_schema(path)

    def test_two_targets(self, tmp_path):
        path = tmp_path / "schema.yaml"
        path.write_text("a: target\nb: target\nc: numeric\n", encoding="utf-8")
        with pytest.raises(SchemaError, match="invalid schema"):
            load_schema(path)

    def test_exit_code_is_data_class(self, tmp_path):
        with pytest.raises(SchemaError) as info:
            load_schema(tmp_path / "absent.yaml")
        assert info.value.exit_code == 2


class TestInferSchema:

    def test_kinds_from_dtypes(self, sample_frame):
        schema = infer_schema(sample_frame, "label")
        assert schema.columns == {
            "age": ColumnKind.NUMERIC,
            "income": ColumnKind.NUMERIC,
            "city": ColumnKind.CATEGORICAL,
            "label": ColumnKind.TARGET,
        }

    def test_unknown_target(self, sample_frame):
        with pytest.raises(SchemaError):
            infer_schema(sample_frame, "outcome")


class TestExtractTargets:

    @pytest.fixture
    def schema(self, sample_schema_dict):
        return DatasetSchema(columns=sample_schema_dict)

    def test_binary(self, sample_frame, schema):
        y = extract_targets(sample_frame, schema, Task.BINARY)
        assert y.dtype == np.float64
        assert set(np.unique(y)) <= {0.0, 1.0}

    def test_binary_rejects_other_values(self, sample_frame, schema):
        frame = sample_frame.assign(label=sample_frame["label"] * 2)
        with pytest.raises(DataError, match="0 or 1"):
            extract_targets(frame, schema, Task.BINARY)

    def test_regression_accepts_any_real(self, sample_frame, schema):
        frame = sample_frame.assign(label=np.linspace(-3, 3, len(sample_frame)))
        assert extract_targets(frame, schema, Task.REGRESSION)[0] == -3.0

    def test_missing_values(self, sample_frame, schema):
        frame = sample_frame.assign(label=sample_frame["label"].astype(float))
        frame.loc[4, "label"] = np.nan
        with pytest.raises(DataError, match="missing"):
            extract_targets(frame, schema, Task.REGRESSION)

    def test_absent_column(self, sample_frame, schema):
        assert not has_target(sample_frame.drop(columns=["label"]), schema)
        with pytest.raises(SchemaError):
            extract_targets(sample_frame.drop(columns=["label"]), schema, Task.REGRESSION)


class TestSplitTrainVal:
    """Seeded split into train and validation rows."""

    def test_sizes_and_disjointness(self, sample_frame):
        y = sample_frame["label"].to_numpy(float)
        train, val, y_train, y_val = split_train_val(sample_frame.assign(row=range(200)), y, 0.25, 0, True)
        assert len(train) == 150
        assert len(val) == 50
        assert set(train["row"]).isdisjoint(val["row"])
        assert y_train.shape == (150,)
        assert np.array_equal(y_val, val["label"].to_numpy(float))

    def test_stratified_keeps_class_balance(self, sample_frame):
        y = sample_frame["label"].to_numpy(float)
        _, _, y_train, y_val = split_train_val(sample_frame, y, 0.25, 0, True)
        assert abs(y_train.mean() - y_val.mean()) < 0.03

    def test_seed_is_reproducible(self, sample_frame):
        a = split_train_val(sample_frame, None, 0.2, 5, False)
        b = split_train_val(sample_frame, None, 0.2, 5, False)
        pd.testing.assert_frame_equal(a[1], b[1])
        assert a[2] is None and a[3] is None

    @pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1])
    def test_fraction_out_of_range(self, sample_frame, fraction):
        with pytest.raises(InvalidArgumentError):
            split_train_val(sample_frame, None, fraction, 0, False)

    def test_single_row(self, sample_frame):
        with pytest.raises(DataError):
            split_train_val(sample_frame.iloc[:1], None, 0.5, 0, False)
