"""Raw recording ingestion, label mapping, windowing and LOSO splits.

Dataset layouts are described by TOML files (see ``raaf/configs``)::

    name = "pamap2"
    sampling_rate = 100.0
    label_column = 1
    timestamp_column = 0          # omit to use line index / sampling_rate
    class_names = ["lying", ...]

    [[rows]]                      # one tri-axis row per entry, in order
    label = "hand_acc16"
    modality = "acc16_hand"       # optional grouping for involvement tables
    columns = [4, 5, 6]           # 0-based; "zero" inserts a constant 0

    [labels]                      # raw activity id -> class name or "discard"
    "1" = "lying"

    [[files]]
    path = "Protocol/subject101.dat"
    subject = "101"
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import ConfigError, DataError
from .frames import FrameLayout, Sample, read_frame_dumps, segment_means, write_frame_dump

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

DISCARD = "discard"
ZERO = "zero"


@dataclass
class RowSpec:
    label: str
    columns: tuple  # three entries: int column index or "zero"
    modality: str | None = None

    def __post_init__(self):
        self.columns = tuple(self.columns)
        if len(self.columns) != 3:
            raise ConfigError(f"row {self.label!r} must map exactly 3 columns, got {self.columns}")
        for c in self.columns:
            if not (c == ZERO or (isinstance(c, int) and c >= 0)):
                raise ConfigError(f"row {self.label!r}: column {c!r} must be a non-negative index or 'zero'")


@dataclass
class DatasetConfig:
    name: str
    sampling_rate: float
    label_column: int
    rows: list[RowSpec]
    labels: dict[int, str]
    class_names: list[str]
    files: list[tuple[str, str]] = field(default_factory=list)
    timestamp_column: int | None = None
    window_seconds: float = 2.0
    overlap: float = 0.5
    require_odd_rows: bool = True

    def __post_init__(self):
        labels = [r.label for r in self.rows]
        if len(set(labels)) != len(labels):
            raise ConfigError("row labels must be unique")
        if self.require_odd_rows and (len(self.rows) < 3 or len(self.rows) % 2 == 0):
            raise ConfigError(
                f"{self.name}: {len(self.rows)} tri-axis rows configured; the frame walk needs an odd "
                "number >= 3 so that every pair of rows becomes adjacent"
            )
        for raw, target in self.labels.items():
            if target != DISCARD and target not in self.class_names:
                raise ConfigError(f"label {raw} maps to unknown class {target!r}")
        if self.sampling_rate <= 0:
            raise ConfigError("sampling_rate must be positive")
        if not 0 <= self.overlap < 1:
            raise ConfigError("overlap must lie in [0, 1)")

    @property
    def row_labels(self) -> list[str]:
        return [r.label for r in self.rows]

    @property
    def modality_of(self) -> dict[str, str]:
        return {r.label: r.modality or r.label for r in self.rows}

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def window_len(self) -> int:
        return int(round(self.window_seconds * self.sampling_rate))

    @property
    def stride(self) -> int:
        return max(1, int(round(self.window_len * (1.0 - self.overlap))))

    @property
    def class_index(self) -> dict[int, int | None]:
        return {raw: (None if t == DISCARD else self.class_names.index(t)) for raw, t in self.labels.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        try:
            rows = [RowSpec(r["label"], r["columns"], r.get("modality")) for r in d["rows"]]
            labels = {int(k): str(v) for k, v in d["labels"].items()}
            files = [(f["path"], str(f["subject"])) for f in d.get("files", [])]
            return cls(
                name=d["name"],
                sampling_rate=float(d["sampling_rate"]),
                label_column=int(d["label_column"]),
                rows=rows,
                labels=labels,
                class_names=list(d["class_names"]),
                files=files,
                timestamp_column=d.get("timestamp_column"),
                window_seconds=float(d.get("window_seconds", 2.0)),
                overlap=float(d.get("overlap", 0.5)),
                require_odd_rows=bool(d.get("require_odd_rows", True)),
            )
        except KeyError as exc:
            raise ConfigError(f"dataset config missing key {exc}") from exc

    @classmethod
    def load(cls, path) -> "DatasetConfig":
        try:
            with open(path, "rb") as fh:
                return cls.from_dict(tomllib.load(fh))
        except OSError as exc:
            raise ConfigError(f"cannot read dataset config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc


def builtin_config(name: str) -> DatasetConfig:
    """Shipped default layout for ``pamap2`` or ``mhealth``."""
    try:
        text = resources.files("raaf.configs").joinpath(f"{name.lower()}.toml").read_text()
    except FileNotFoundError as exc:
        raise ConfigError(f"no built-in dataset config named {name!r}") from exc
    return DatasetConfig.from_dict(tomllib.loads(text))


# --------------------------------------------------------------------------
# recordings


@dataclass
class Recording:
    subject_id: str
    sampling_rate: float
    timestamps: np.ndarray  # (n,)
    raw_labels: np.ndarray  # (n,) int
    snapshots: np.ndarray  # (n, N_r, 3)
    labels: np.ndarray | None = None  # class indices after map_labels
    rows_in: int = 0
    rows_dropped: int = 0
    rows_discarded: int = 0

    def __len__(self):
        return len(self.timestamps)


def load_recording(path, config: DatasetConfig, subject_id: str = "") -> Recording:
    """Parse one whitespace-separated text recording.

    Rows with a non-finite value in any mapped channel (or in the label)
    are dropped and counted in ``rows_dropped``.
    """
    try:
        table = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    n, width = table.shape if table.size else (0, 0)
    used_cols = [c for r in config.rows for c in r.columns if c != ZERO] + [config.label_column]
    if config.timestamp_column is not None:
        used_cols.append(config.timestamp_column)
    if n and max(used_cols) >= width:
        raise DataError(f"{path}: column {max(used_cols)} requested but lines have {width} columns")

    snaps = np.zeros((n, len(config.rows), 3))
    for k, row in enumerate(config.rows):
        for a, c in enumerate(row.columns):
            if c != ZERO:
                snaps[:, k, a] = table[:, c]
    raw = table[:, config.label_column] if n else np.zeros(0)
    if config.timestamp_column is not None:
        ts = table[:, config.timestamp_column]
    else:
        ts = np.arange(n) / config.sampling_rate
    ok = np.all(np.isfinite(snaps), axis=(1, 2)) & np.isfinite(raw) & np.isfinite(ts)
    return Recording(
        subject_id=str(subject_id),
        sampling_rate=config.sampling_rate,
        timestamps=ts[ok],
        raw_labels=raw[ok].astype(np.int64),
        snapshots=snaps[ok],
        rows_in=n,
        rows_dropped=int(n - ok.sum()),
    )


def map_labels(raw_ids, config: DatasetConfig) -> tuple[np.ndarray, np.ndarray]:
    """Class index per row (-1 for discarded ids) and the keep mask.

    Raises ``DataError`` for ids the label map does not mention.
    """
    raw_ids = np.asarray(raw_ids, dtype=np.int64)
    table = config.class_index
    unknown = sorted(set(np.unique(raw_ids).tolist()) - set(table))
    if unknown:
        raise DataError(f"activity ids {unknown} are not in the label map of {config.name!r}")
    classes = np.array([-1 if table[int(r)] is None else table[int(r)] for r in raw_ids], dtype=np.int64)
    return classes, classes >= 0


def apply_label_map(rec: Recording, config: DatasetConfig) -> Recording:
    classes, keep = map_labels(rec.raw_labels, config)
    return Recording(
        rec.subject_id, rec.sampling_rate, rec.timestamps[keep], rec.raw_labels[keep], rec.snapshots[keep],
        classes[keep], rec.rows_in, rec.rows_dropped, int((~keep).sum()),
    )


@dataclass
class LabeledWindow:
    snapshots: np.ndarray  # (L, N_r, 3)
    label: int
    subject_id: str


def window_starts(n: int, window_len: int, stride: int) -> range:
    if n < window_len:
        return range(0)
    return range(0, n - window_len + 1, stride)


def make_windows(rec: Recording, window_len: int, stride: int, n_frames: int) -> list[LabeledWindow]:
    """Sliding windows over a label-mapped recording.

    Windows that straddle a label change or a time gap (from dropped or
    discarded rows) are skipped.
    """
    if window_len < n_frames:
        raise ConfigError(f"window of {window_len} snapshots cannot hold {n_frames} frames")
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    labels = rec.labels if rec.labels is not None else rec.raw_labels
    n = len(labels)
    if n == 0:
        return []
    label_change = np.concatenate([[0], np.cumsum(labels[1:] != labels[:-1])])
    gap = np.diff(rec.timestamps) > 1.5 / rec.sampling_rate
    gap_count = np.concatenate([[0], np.cumsum(gap)])
    out = []
    for s in window_starts(n, window_len, stride):
        e = s + window_len - 1
        if label_change[e] != label_change[s] or gap_count[e] != gap_count[s]:
            continue
        out.append(LabeledWindow(rec.snapshots[s : e + 1], int(labels[s]), rec.subject_id))
    return out


@dataclass(frozen=True)
class LosoSplit:
    held_out: str
    train: tuple[str, ...]
    test: tuple[str, ...]


def loso_splits(subjects: Sequence[str]) -> list[LosoSplit]:
    subjects = list(dict.fromkeys(str(s) for s in subjects))
    if len(subjects) < 2:
        raise DataError(f"leave-one-subject-out needs at least 2 subjects, got {len(subjects)}")
    return [LosoSplit(s, tuple(o for o in subjects if o != s), (s,)) for s in subjects]


def subsample_labeled(labels, n: int, seed: int) -> np.ndarray:
    """Sorted indices of a class-stratified random subset of size ``n``.

    Items are ranked once per seed: within each class by a random
    permutation, across classes by ``(rank + 0.5) / class_size``. Taking the
    first ``n`` therefore gives near-proportional class counts, and smaller
    subsets are always contained in larger ones.
    """
    labels = np.asarray(labels)
    total = len(labels)
    if n > total:
        raise DataError(f"requested {n} labeled samples but only {total} are available")
    if n < 0:
        raise ConfigError("subset size must be non-negative")
    rng = np.random.Generator(np.random.PCG64(seed))
    keys = np.empty(total)
    cls_of = np.empty(total, dtype=np.int64)
    for k, c in enumerate(np.unique(labels)):
        idx = np.flatnonzero(labels == c)
        perm = rng.permutation(len(idx))
        keys[idx[perm]] = (np.arange(len(idx)) + 0.5) / len(idx)
        cls_of[idx] = k
    order = np.lexsort((cls_of, keys))
    return np.sort(order[:n])


# --------------------------------------------------------------------------
# dataset assembly and the frame cache


def recording_to_samples(rec: Recording, config: DatasetConfig, n_frames: int, layout: FrameLayout) -> list[Sample]:
    wins = make_windows(rec, config.window_len, config.stride, n_frames)
    return [Sample(layout.apply(segment_means(w.snapshots, n_frames)), w.label, w.subject_id) for w in wins]


def load_dataset(config: DatasetConfig, data_dir, n_frames: int, stacked: bool = False, subjects=None):
    """Ingest every configured file and return a ``FrameDataset`` and ingest counters."""
    from .training import FrameDataset

    data_dir = Path(data_dir)
    n_rows = len(config.rows)
    layout = FrameLayout.stacked(n_rows) if stacked else FrameLayout.for_rows(n_rows)
    samples: list[Sample] = []
    counters = []
    wanted = None if subjects is None else set(map(str, subjects))
    for rel, subject in config.files:
        if wanted is not None and subject not in wanted:
            continue
        rec = apply_label_map(load_recording(data_dir / rel, config, subject), config)
        counters.append((subject, rel, rec.rows_in, len(rec), rec.rows_dropped, rec.rows_discarded))
        samples.extend(recording_to_samples(rec, config, n_frames, layout))
    if not samples:
        raise DataError(f"no samples produced from {data_dir}")
    ds = FrameDataset(
        np.stack([s.frames for s in samples]),
        np.array([s.label for s in samples]),
        np.array([s.subject_id for s in samples]),
        config.n_classes, list(config.class_names), layout, config.row_labels, config.modality_of,
    )
    return ds, counters


def write_cache(dataset, out_dir, n_rows: int):
    """Per-subject frame dumps plus ``manifest.csv`` (subject, label, frame_count, file, block)."""
    import json

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["subject,label,frame_count,file,block"]
    for subject in sorted(set(dataset.subjects)):
        idx = np.flatnonzero(dataset.subjects == subject)
        fname = f"frames_{subject}.txt"
        with open(out_dir / fname, "w") as fh:
            for block, i in enumerate(idx):
                write_frame_dump(fh, dataset.X[i], n_rows)
                lines.append(f"{subject},{int(dataset.y[i])},{dataset.X.shape[1]},{fname},{block}")
    (out_dir / "manifest.csv").write_text("\n".join(lines) + "\n")
    meta = {
        "n_rows": n_rows,
        "n_classes": dataset.n_classes,
        "class_names": dataset.class_names,
        "row_labels": dataset.row_labels,
        "modality_of": dataset.modality_of,
        "stacked": bool(dataset.layout is not None and dataset.layout.shape[1] == 3),
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2))


def read_cache(cache_dir):
    """Inverse of ``write_cache``."""
    import csv
    import json

    from .training import FrameDataset

    cache_dir = Path(cache_dir)
    try:
        meta = json.loads((cache_dir / "meta.json").read_text())
        with open(cache_dir / "manifest.csv", newline="") as fh:
            manifest = list(csv.DictReader(fh))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read frame cache {cache_dir}: {exc}") from exc
    blocks: dict[str, list[np.ndarray]] = {}
    for fname in dict.fromkeys(row["file"] for row in manifest):
        with open(cache_dir / fname) as fh:
            blocks[fname] = [frames for _, frames in read_frame_dumps(fh)]
    X = np.stack([blocks[row["file"]][int(row["block"])] for row in manifest])
    layout = FrameLayout.stacked(meta["n_rows"]) if meta.get("stacked") else FrameLayout.for_rows(meta["n_rows"])
    return FrameDataset(
        X, np.array([int(r["label"]) for r in manifest]), np.array([r["subject"] for r in manifest]),
        meta["n_classes"], meta["class_names"], layout, meta["row_labels"], meta["modality_of"],
    )
