import numpy as np
import pytest

from mcgrad_lab.config import SplitSpec
from mcgrad_lab.dataset import (
    augment_with_score,
    encode_frame,
    load_csv,
    load_schema,
    read_frame,
    save_schema,
    split_indices,
    train_valid_split,
)
from mcgrad_lab.errors import (
    DataError,
    DegenerateSplit,
    EmptyFile,
    LengthMismatch,
    MissingLabelColumn,
    SchemaMismatch,
    ScoreOutOfRange,
    UnparseableLabel,
)
from mcgrad_lab.models import SCORE_COLUMN, Dataset


def _write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def _make_dataset(n=10, d=2, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(features=rng.normal(size=(n, d)), labels=rng.integers(0, 2, n))


def test_load_csv_infers_numeric_and_categorical(tmp_path):
    path = _write(tmp_path, "age,city,label\n30,Oslo,1\n,Rome,0\n50,Oslo,true\n40,,FALSE\n")
    data, schema = load_csv(path, "label")
    assert schema.feature_names == ["age", "city=Oslo", "city=Rome", "city=__missing__"]
    assert data.labels.tolist() == [1.0, 0.0, 1.0, 0.0]
    # missing numeric imputed with the column mean
    assert data.features[1, 0] == pytest.approx(40.0)
    assert data.features[:, 1:].tolist() == [[1, 0, 0], [0, 1, 0], [1, 0, 0], [0, 0, 1]]


def test_schema_round_trip_and_unknown_levels(tmp_path):
    train = _write(tmp_path, "x,c,label\n1,a,0\n2,b,1\n")
    _, schema = load_csv(train, "label")
    schema_path = tmp_path / "schema.json"
    save_schema(schema, schema_path)
    loaded = load_schema(schema_path)
    assert loaded.feature_names == schema.feature_names
    other = _write(tmp_path, "x,c,label\n3,z,1\n", "other.csv")
    data, _ = load_csv(other, "label", schema=loaded)
    assert data.features.tolist() == [[3.0, 0.0, 0.0]]


def test_unparseable_label_reports_row(tmp_path):
    path = _write(tmp_path, "x,label\n1,0\n2,maybe\n")
    with pytest.raises(UnparseableLabel) as info:
        load_csv(path, "label")
    assert info.value.row == 1


def test_missing_label_column(tmp_path):
    path = _write(tmp_path, "x,y\n1,0\n")
    with pytest.raises(MissingLabelColumn):
        load_csv(path, "label")


@pytest.mark.parametrize("text", ["", "x,label\n"])
def test_empty_files(tmp_path, text):
    with pytest.raises(EmptyFile):
        load_csv(_write(tmp_path, text), "label")


def test_schema_mismatch_in_both_directions(tmp_path):
    _, schema = load_csv(_write(tmp_path, "x,label\n1,0\n2,1\n"), "label")
    with pytest.raises(SchemaMismatch):
        load_csv(_write(tmp_path, "x,extra,label\n1,2,0\n", "b.csv"), "label", schema=schema)
    with pytest.raises(SchemaMismatch):
        load_csv(_write(tmp_path, "other,label\n1,0\n", "c.csv"), "label", schema=schema)


def test_encode_without_labels_for_scoring(tmp_path):
    frame = read_frame(_write(tmp_path, "x\n1\n2\n"))
    data, _ = encode_frame(frame, "label", require_labels=False)
    assert data.labels.tolist() == [0.0, 0.0]


def test_split_indices_is_seeded_partition():
    train, valid = split_indices(100, SplitSpec(valid_fraction=0.2, seed=7))
    assert len(valid) == 20 and len(train) == 80
    assert set(train).isdisjoint(valid)
    assert sorted(np.concatenate([train, valid]).tolist()) == list(range(100))
    again = split_indices(100, SplitSpec(valid_fraction=0.2, seed=7))
    assert np.array_equal(train, again[0]) and np.array_equal(valid, again[1])


def test_split_keeps_both_parts_nonempty():
    train, valid = split_indices(2, SplitSpec(valid_fraction=0.01))
    assert len(train) == 1 and len(valid) == 1
    with pytest.raises(DegenerateSplit):
        split_indices(1, SplitSpec())


def test_train_valid_split_takes_rows():
    data = _make_dataset(n=20)
    train, valid = train_valid_split(data, SplitSpec(valid_fraction=0.25, seed=1))
    assert train.n == 15 and valid.n == 5
    assert train.feature_names == data.feature_names


def test_augment_with_score_appends_then_replaces():
    data = _make_dataset(n=4)
    first = augment_with_score(data, np.full(4, 0.25))
    assert first.d == 3
    assert first.feature_names[-1] == SCORE_COLUMN
    second = augment_with_score(first, np.full(4, 0.75))
    assert second.d == 3
    assert np.all(second.features[:, -1] == 0.75)


def test_augment_with_score_validates_input():
    data = _make_dataset(n=4)
    with pytest.raises(LengthMismatch):
        augment_with_score(data, np.zeros(3))
    with pytest.raises(ScoreOutOfRange):
        augment_with_score(data, np.array([0.1, 0.2, 1.2, 0.3]))


def test_infinite_cells_are_imputed_like_missing(tmp_path):
    path = _write(tmp_path, "x,label\n1.0,0\ninf,1\n2.0,1\n-inf,0\n")
    data, schema = load_csv(path, "label")
    assert np.isfinite(data.features).all()
    assert schema.columns[0].fill == pytest.approx(1.5)
    assert data.features[:, 0].tolist() == [1.0, 1.5, 2.0, 1.5]


def test_dataset_rejects_infinite_features():
    with pytest.raises(DataError, match="b"):
        Dataset(features=np.array([[0.0, np.inf], [1.0, 2.0]]), labels=[0, 1], feature_names=["a", "b"])
    # NaN stays allowed as a missing marker
    Dataset(features=np.array([[np.nan], [1.0]]), labels=[0, 1])
