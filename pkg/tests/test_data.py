import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raaf.data import (
    DatasetConfig, Recording, apply_label_map, builtin_config, load_dataset, load_recording, loso_splits,
    make_windows, map_labels, read_cache, subsample_labeled, write_cache,
)
from raaf.exceptions import ConfigError, DataError
from raaf.frames import build_frame
from raaf.synthetic import synthetic_dataset_config, synthetic_stream, write_synthetic_recording


def small_config(**overrides):
    d = {
        "name": "tiny",
        "sampling_rate": 10.0,
        "label_column": 1,
        "timestamp_column": 0,
        "class_names": ["a", "b"],
        "rows": [
            {"label": "r1", "columns": [2, 3, 4]},
            {"label": "r2", "columns": [5, 6, "zero"]},
            {"label": "r3", "columns": [8, 9, 10]},
        ],
        "labels": {"1": "a", "2": "b", "0": "discard"},
    }
    d.update(overrides)
    return DatasetConfig.from_dict(d)


GOLDEN = """\
0.0 1 1 2 3 4 5 99 7 8 9
0.1 1 -1 -2 -3 -4 -5 99 -7 -8 -9
0.2 2 0.5 0.25 0.125 1e3 2e-3 99 0 0 1
"""


def test_golden_three_line_file(tmp_path):
    path = tmp_path / "rec.txt"
    path.write_text(GOLDEN)
    rec = load_recording(path, small_config(), "s1")
    expected = np.array([
        [[1, 2, 3], [4, 5, 0], [7, 8, 9]],
        [[-1, -2, -3], [-4, -5, 0], [-7, -8, -9]],
        [[0.5, 0.25, 0.125], [1000, 0.002, 0], [0, 0, 1]],
    ], dtype=float)
    assert np.array_equal(rec.snapshots, expected)
    assert rec.raw_labels.tolist() == [1, 1, 2]
    assert rec.timestamps.tolist() == [0.0, 0.1, 0.2]
    assert rec.rows_in == 3 and rec.rows_dropped == 0


def test_nan_in_mapped_column_drops_row(tmp_path):
    path = tmp_path / "rec.txt"
    path.write_text(GOLDEN.replace("-5 99", "NaN 99"))
    rec = load_recording(path, small_config())
    assert rec.rows_dropped == 1 and len(rec) == 2


def test_nan_in_unmapped_column_is_kept(tmp_path):
    path = tmp_path / "rec.txt"
    path.write_text(GOLDEN.replace(" 99 ", " NaN ", 1))
    rec = load_recording(path, small_config())
    assert rec.rows_dropped == 0 and len(rec) == 3


def test_unreadable_file(tmp_path):
    with pytest.raises(DataError):
        load_recording(tmp_path / "missing.txt", small_config())


def test_column_beyond_line_width(tmp_path):
    path = tmp_path / "rec.txt"
    path.write_text("0.0 1 1 2 3\n")
    with pytest.raises(DataError, match="column"):
        load_recording(path, small_config())


def test_non_numeric_token(tmp_path):
    path = tmp_path / "rec.txt"
    path.write_text(GOLDEN.replace("0.125", "abc"))
    with pytest.raises(DataError):
        load_recording(path, small_config())


def test_thirteen_triples_from_builtin_layout(tmp_path):
    config = builtin_config("pamap2")
    line = " ".join(["1.0", "4"] + [str(float(k)) for k in range(2, 54)])
    path = tmp_path / "subject.dat"
    path.write_text(line + "\n" + line + "\n")
    rec = load_recording(path, config, "101")
    assert rec.snapshots.shape == (2, 13, 3)
    assert rec.snapshots[0, 0].tolist() == [3.0, 20.0, 37.0]  # three IMU temperatures
    assert rec.snapshots[0, 1].tolist() == [4.0, 5.0, 6.0]  # hand acceleration, 16 g range
    assert build_frame(rec.snapshots[0]).shape == (79, 9)


def test_builtin_layouts_are_valid():
    pamap = builtin_config("pamap2")
    assert len(pamap.rows) == 13 and pamap.n_classes == 6 and len(pamap.files) == 9
    used = {c for r in pamap.rows for c in r.columns}
    assert 2 not in used  # heart rate excluded
    mhealth = builtin_config("mhealth")
    assert len(mhealth.rows) == 9 and mhealth.rows[1].columns == (3, 4, "zero")
    assert mhealth.sampling_rate == 50.0 and pamap.sampling_rate == 100.0


def test_unknown_builtin():
    with pytest.raises(ConfigError):
        builtin_config("mars")


def test_even_row_count_rejected():
    rows = [{"label": f"r{k}", "columns": [k, k, k]} for k in range(4)]
    with pytest.raises(ConfigError, match="odd"):
        small_config(rows=rows)


def test_row_needs_three_columns():
    with pytest.raises(ConfigError):
        small_config(rows=[{"label": "r", "columns": [1, 2]}] * 3)


def test_label_must_target_known_class():
    with pytest.raises(ConfigError):
        small_config(labels={"1": "zzz"})


def test_config_file_round_trip(tmp_path):
    path = tmp_path / "cfg.toml"
    path.write_text(
        'name = "t"\nsampling_rate = 20.0\nlabel_column = 0\nclass_names = ["x"]\n'
        '[[rows]]\nlabel = "a"\ncolumns = [1, 2, 3]\n[[rows]]\nlabel = "b"\ncolumns = [4, 5, 6]\n'
        '[[rows]]\nlabel = "c"\ncolumns = [7, 8, "zero"]\n[labels]\n"1" = "x"\n'
    )
    cfg = DatasetConfig.load(path)
    assert cfg.row_labels == ["a", "b", "c"] and cfg.timestamp_column is None
    with pytest.raises(ConfigError):
        DatasetConfig.load(tmp_path / "nope.toml")


# ---------------------------------------------------------------- labels


def test_sitting_and_standing_share_a_class():
    config = builtin_config("pamap2")
    classes, keep = map_labels([2, 3, 1, 0], config)
    assert classes[0] == classes[1] != classes[2]
    assert keep.tolist() == [True, True, True, False]


def test_discarded_rows_are_removed():
    rec = Recording("s", 10.0, np.arange(5) / 10, np.array([1, 0, 0, 2, 1]), np.zeros((5, 3, 3)))
    mapped = apply_label_map(rec, small_config())
    assert mapped.labels.tolist() == [0, 1, 0] and mapped.rows_discarded == 2


def test_unmapped_id_is_an_error():
    with pytest.raises(DataError, match="42"):
        map_labels([1, 42], small_config())


def test_class_histogram_on_synthetic_stream():
    config = builtin_config("pamap2")
    ids = [1] * 5 + [2] * 3 + [3] * 4 + [4] * 6 + [5] * 2 + [6] * 7 + [7] * 1 + [12] * 2 + [0] * 9
    classes, keep = map_labels(ids, config)
    hist = np.bincount(classes[keep], minlength=6)
    assert hist.tolist() == [5, 7, 6, 2, 7, 3]


def test_ingest_accounting(tmp_path):
    rng = np.random.default_rng(0)
    labels = np.array([1] * 30 + [99] * 10 + [2] * 30)
    snaps = synthetic_stream(3, labels % 3, rng)
    snaps[5, 1, 1] = np.nan
    path = tmp_path / "s1.txt"
    write_synthetic_recording(path, snaps, labels, 50.0)
    config = DatasetConfig.from_dict(synthetic_dataset_config(3, 3, [(path, "s1")]))
    rec = apply_label_map(load_recording(path, config, "s1"), config)
    assert rec.rows_in == len(rec) + rec.rows_dropped + rec.rows_discarded
    assert (rec.rows_dropped, rec.rows_discarded) == (1, 10)


# ---------------------------------------------------------------- windows


def recording(labels, rate=10.0, timestamps=None):
    n = len(labels)
    ts = np.arange(n) / rate if timestamps is None else np.asarray(timestamps, dtype=float)
    snaps = np.arange(n * 9, dtype=float).reshape(n, 3, 3)
    return Recording("subj", rate, ts, np.asarray(labels), snaps, np.asarray(labels))


def test_ten_samples_window_four_stride_two():
    wins = make_windows(recording([0] * 10), 4, 2, 2)
    assert len(wins) == 4
    assert all(w.snapshots.shape == (4, 3, 3) and w.subject_id == "subj" for w in wins)


def test_label_flip_windows_dropped():
    labels = [0] * 6 + [1] * 6
    wins = make_windows(recording(labels), 4, 1, 2)
    starts = [int(w.snapshots[0, 0, 0] // 9) for w in wins]
    assert all(not (s <= 5 < s + 3) for s in starts)
    assert len(wins) == 3 + 3
    assert {w.label for w in wins} == {0, 1}


def test_time_gap_windows_dropped():
    ts = np.concatenate([np.arange(6), np.arange(10, 16)]) / 10.0
    wins = make_windows(recording([0] * 12, timestamps=ts), 4, 1, 2)
    assert len(wins) == 6


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 80), st.integers(2, 20), st.integers(1, 10))
def test_window_count_closed_form(L, W, S):
    wins = make_windows(recording([3] * L), W, S, 2)
    expected = (L - W) // S + 1 if L >= W else 0
    assert len(wins) == expected


def test_window_shorter_than_frames():
    with pytest.raises(ConfigError):
        make_windows(recording([0] * 10), 3, 1, 5)


# ---------------------------------------------------------------- splits


def test_nine_subjects_nine_splits():
    splits = loso_splits([str(s) for s in range(101, 110)])
    assert len(splits) == 9
    for sp in splits:
        assert sp.test == (sp.held_out,) and not set(sp.train) & set(sp.test)
        assert set(sp.train) | set(sp.test) == {str(s) for s in range(101, 110)}


def test_two_subjects_mirrored():
    a, b = loso_splits(["x", "y"])
    assert (a.train, a.test, b.train, b.test) == (("y",), ("x",), ("x",), ("y",))


def test_fewer_than_two_subjects():
    with pytest.raises(DataError):
        loso_splits(["only"])


def test_each_sample_in_n_minus_one_train_sets():
    subjects = np.array(["a", "b", "c", "a", "d", "b", "c", "c"])
    splits = loso_splits(sorted(set(subjects)))
    train_count = np.zeros(len(subjects), int)
    test_count = np.zeros(len(subjects), int)
    for sp in splits:
        train_count += np.isin(subjects, sp.train)
        test_count += np.isin(subjects, sp.test)
    assert np.all(train_count == len(splits) - 1) and np.all(test_count == 1)


def test_splits_deterministic():
    assert loso_splits(["b", "a", "c"]) == loso_splits(["b", "a", "c"])


# ---------------------------------------------------------------- subsampling


def test_full_size_is_identity():
    y = np.random.default_rng(0).integers(0, 4, size=57)
    assert np.array_equal(subsample_labeled(y, 57, 3), np.arange(57))


def test_same_seed_same_subset():
    y = np.random.default_rng(1).integers(0, 4, size=300)
    assert np.array_equal(subsample_labeled(y, 100, 7), subsample_labeled(y, 100, 7))
    assert not np.array_equal(subsample_labeled(y, 100, 7), subsample_labeled(y, 100, 8))


def test_thousand_from_pool_is_proportional():
    rng = np.random.default_rng(2)
    y = rng.choice(6, size=5000, p=[0.3, 0.25, 0.2, 0.1, 0.1, 0.05])
    pick = subsample_labeled(y, 1000, 0)
    assert len(pick) == 1000 == len(set(pick.tolist()))
    got = np.bincount(y[pick], minlength=6)
    share = np.bincount(y, minlength=6) * 1000 / len(y)
    assert np.all(np.abs(got - share) <= 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 200))
def test_smaller_subsets_nested(seed, total):
    y = np.random.default_rng(seed).integers(0, 3, size=total)
    sizes = sorted({total // 4, total // 2, total})
    subsets = [set(subsample_labeled(y, n, seed).tolist()) for n in sizes]
    assert all(a <= b for a, b in zip(subsets, subsets[1:]))


def test_subsample_too_large():
    with pytest.raises(DataError):
        subsample_labeled(np.zeros(5, int), 6, 0)


# ---------------------------------------------------------------- dataset assembly


@pytest.fixture
def raw_dataset(tmp_path):
    rng = np.random.default_rng(3)
    files = []
    for subject in ("1", "2"):
        labels = np.repeat([0, 1, 2, 99, 1], 60)
        path = tmp_path / f"subject{subject}.txt"
        write_synthetic_recording(path, synthetic_stream(5, labels % 3, rng), labels, 50.0)
        files.append((path.name, subject))
    return DatasetConfig.from_dict(synthetic_dataset_config(5, 3, files)), tmp_path


def test_load_dataset_and_cache_round_trip(raw_dataset, tmp_path):
    config, data_dir = raw_dataset
    ds, counters = load_dataset(config, data_dir, n_frames=5)
    assert ds.X.shape[1:] == (5, 11, 9)
    assert set(ds.subjects) == {"1", "2"}
    for _, _, rows_in, used, dropped, discarded in counters:
        assert rows_in == used + dropped + discarded == 300
    write_cache(ds, tmp_path / "cache", len(config.rows))
    again = read_cache(tmp_path / "cache")
    assert again.X.tobytes() == ds.X.tobytes()
    assert np.array_equal(again.y, ds.y) and np.array_equal(again.subjects, ds.subjects)
    assert again.row_groups == ds.row_groups
    manifest = (tmp_path / "cache" / "manifest.csv").read_text().splitlines()
    assert manifest[0] == "subject,label,frame_count,file,block" and len(manifest) == len(ds.y) + 1


def test_stacked_dataset(raw_dataset):
    config, data_dir = raw_dataset
    ds, _ = load_dataset(config, data_dir, n_frames=5, stacked=True)
    assert ds.X.shape[2:] == (5, 3)


def test_normalization_is_fit_on_train_split_only(raw_dataset):
    config, data_dir = raw_dataset
    ds, _ = load_dataset(config, data_dir, n_frames=5)
    train = np.flatnonzero(ds.subjects == "1")
    test = np.flatnonzero(ds.subjects == "2")
    Xtr, Xte = ds.normalized_split(train, test)
    first = ds.layout.source_row
    assert np.abs(Xtr.mean(axis=(0, 1))[np.argmax(first == 0)]).max() < 1e-10
    assert np.abs(Xte.mean(axis=(0, 1))).max() > 1e-3
