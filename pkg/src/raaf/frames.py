"""Sequence-to-frame transformation for stacked tri-axis sensor rows.

A snapshot is an ``(N_r, 3)`` array: one tri-axis reading per
(body location, modality) row. ``build_frame`` reorders the rows along a
walk that makes every pair of rows vertically adjacent at least once, then
widens each row to nine columns so that every pair of axes sits side by side.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .exceptions import ConfigError, DataError

FRAME_WIDTH = 9

# column -> source axis, for odd and even 1-based output rows
ODD_TEMPLATE = (0, 1, 2, 0, 1, 2, 0, 1, 2)
EVEN_TEMPLATE = (0, 1, 2, 1, 2, 0, 2, 0, 1)


@lru_cache(maxsize=None)
def _permutation(n_rows: int) -> tuple[int, ...]:
    i, j = 1, 2
    seq = [1]
    used: set[tuple[int, int]] = set()
    while i != j:
        if j > n_rows:
            j = 1
        elif (min(i, j), max(i, j)) not in used:
            used.add((min(i, j), max(i, j)))
            seq.append(j)
            i = j
            j = i + 1
        else:
            j += 1
    return tuple(seq)


def build_permutation(n_rows: int) -> list[int]:
    """Greedy pair-adjacency walk over rows ``1..n_rows`` (1-based).

    Starting at row 1, repeatedly step to the smallest row ``j > i``
    (wrapping past ``n_rows`` to 1) whose pair with the current row has not
    been used yet. The walk ends when no unused pair is left from the
    current row. For odd ``n_rows`` every unordered pair ends up adjacent
    exactly once, so the result has ``n_rows * (n_rows - 1) / 2 + 1`` entries.

    >>> build_permutation(3)
    [1, 2, 3, 1]
    """
    if isinstance(n_rows, bool) or not isinstance(n_rows, (int, np.integer)):
        raise ConfigError(f"number of rows must be an integer, got {n_rows!r}")
    if n_rows < 3 or n_rows % 2 == 0:
        raise ConfigError(
            f"number of rows must be odd and >= 3 (got {n_rows}): the adjacency walk only "
            "makes every pair of rows adjacent when each row has an even number of partners"
        )
    return list(_permutation(int(n_rows)))


def frame_height(n_rows: int) -> int:
    return n_rows * (n_rows - 1) // 2 + 1


def expand_row(row, sequence_number: int) -> np.ndarray:
    """Widen one tri-axis row to nine values.

    Odd (1-based) positions repeat ``x, y, z`` three times; even positions
    use the rotated pattern ``x, y, z, y, z, x, z, x, y``.
    """
    row = np.asarray(row, dtype=np.float64)
    if row.shape != (3,):
        raise DataError(f"expected a tri-axis row, got shape {row.shape}")
    template = ODD_TEMPLATE if sequence_number % 2 == 1 else EVEN_TEMPLATE
    return row[list(template)]


@dataclass(frozen=True)
class FrameLayout:
    """Where every cell of an activity frame comes from.

    ``source_row[r]`` is the 0-based snapshot row copied into frame row ``r``;
    ``source_axis[r, c]`` is the axis of that row found in column ``c``.
    """

    n_rows: int
    source_row: np.ndarray = field(repr=False)
    source_axis: np.ndarray = field(repr=False)

    @classmethod
    def for_rows(cls, n_rows: int) -> "FrameLayout":
        seq = np.asarray(build_permutation(n_rows)) - 1
        axes = np.array(
            [ODD_TEMPLATE if (r + 1) % 2 == 1 else EVEN_TEMPLATE for r in range(len(seq))],
            dtype=np.intp,
        )
        return cls(n_rows, seq, axes)

    @classmethod
    def stacked(cls, n_rows: int) -> "FrameLayout":
        """Layout of the plain stacked input (no permutation, no expansion)."""
        if n_rows < 1:
            raise ConfigError("need at least one row")
        return cls(n_rows, np.arange(n_rows), np.tile(np.arange(3), (n_rows, 1)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.source_axis.shape

    def apply(self, snapshots) -> np.ndarray:
        """Map ``(..., N_r, 3)`` snapshots to ``(..., height, width)`` frames."""
        snapshots = np.asarray(snapshots, dtype=np.float64)
        if snapshots.shape[-2:] != (self.n_rows, 3):
            raise DataError(f"expected snapshots of shape (..., {self.n_rows}, 3), got {snapshots.shape}")
        return snapshots[..., self.source_row[:, None], self.source_axis]


def build_frame(snapshot) -> np.ndarray:
    """Activity frame of shape ``(N_r (N_r - 1) / 2 + 1, 9)`` for one snapshot."""
    snapshot = np.asarray(snapshot, dtype=np.float64)
    if snapshot.ndim != 2 or snapshot.shape[1] != 3:
        raise DataError(f"snapshot must be (N_r, 3), got {snapshot.shape}")
    return FrameLayout.for_rows(snapshot.shape[0]).apply(snapshot)


def segment_means(window, n_frames: int) -> np.ndarray:
    """Split a window into ``n_frames`` contiguous segments and average each.

    Segments have ``len(window) // n_frames`` snapshots; leftover snapshots
    join the last segment.
    """
    window = np.asarray(window, dtype=np.float64)
    length = window.shape[0]
    if n_frames < 1:
        raise ConfigError("frame count must be >= 1")
    if length < n_frames:
        raise DataError(f"window of {length} snapshots is shorter than {n_frames} frames")
    step = length // n_frames
    bounds = [k * step for k in range(n_frames)] + [length]
    return np.stack([window[bounds[k] : bounds[k + 1]].mean(axis=0) for k in range(n_frames)])


@dataclass
class Sample:
    frames: np.ndarray  # (F, height, width)
    label: int
    subject_id: str

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3:
            raise DataError(f"frames must be (F, height, width), got {self.frames.shape}")
        if self.label < 0:
            raise DataError(f"label must be non-negative, got {self.label}")


def window_to_sample(window, n_frames: int, label: int, subject_id: str, layout: FrameLayout | None = None) -> Sample:
    """Turn a time-ordered ``(L, N_r, 3)`` window into a sample of ``n_frames`` frames."""
    means = segment_means(window, n_frames)
    layout = layout or FrameLayout.for_rows(means.shape[1])
    return Sample(layout.apply(means), int(label), str(subject_id))


# --------------------------------------------------------------------------
# per-channel standardization


@dataclass
class ChannelStats:
    """Mean and standard deviation per (row label, axis), fitted on training data."""

    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]

    MIN_STD = 1e-8

    @classmethod
    def fit(cls, snapshots, row_labels: Sequence[str]) -> "ChannelStats":
        snapshots = np.asarray(snapshots, dtype=np.float64)
        if snapshots.shape[-2:] != (len(row_labels), 3):
            raise DataError(f"snapshots {snapshots.shape} do not match {len(row_labels)} row labels")
        flat = snapshots.reshape(-1, len(row_labels), 3)
        mu = flat.mean(axis=0)
        sd = flat.std(axis=0)
        return cls(
            {lab: mu[k] for k, lab in enumerate(row_labels)},
            {lab: sd[k] for k, lab in enumerate(row_labels)},
        )

    @classmethod
    def fit_frames(cls, frames, layout: FrameLayout, row_labels: Sequence[str]) -> "ChannelStats":
        """Fit from frames; duplicated rows are exact copies so moments are unchanged."""
        frames = np.asarray(frames, dtype=np.float64)
        first = _first_occurrences(layout)
        snaps = np.empty((*frames.shape[:-2], layout.n_rows, 3))
        for k, (r, cols) in enumerate(first):
            snaps[..., k, :] = frames[..., r, cols]
        return cls.fit(snaps, row_labels)

    def _arrays(self, row_labels):
        missing = [lab for lab in row_labels if lab not in self.mean]
        if missing:
            raise ConfigError(f"normalization statistics missing row labels {missing}")
        mu = np.stack([self.mean[lab] for lab in row_labels])
        sd = np.stack([self.std[lab] for lab in row_labels])
        scale = np.where(sd < self.MIN_STD, 1.0, sd)
        return mu, scale

    def normalize_snapshots(self, snapshots, row_labels: Sequence[str]) -> np.ndarray:
        mu, scale = self._arrays(row_labels)
        return (np.asarray(snapshots, dtype=np.float64) - mu) / scale

    def to_dict(self) -> dict:
        return {lab: {"mean": self.mean[lab].tolist(), "std": self.std[lab].tolist()} for lab in self.mean}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelStats":
        return cls(
            {k: np.asarray(v["mean"], dtype=np.float64) for k, v in d.items()},
            {k: np.asarray(v["std"], dtype=np.float64) for k, v in d.items()},
        )


def _first_occurrences(layout: FrameLayout):
    """For each snapshot row, a frame row holding it and the columns giving axes x, y, z."""
    out = []
    for k in range(layout.n_rows):
        r = int(np.flatnonzero(layout.source_row == k)[0])
        cols = [int(np.flatnonzero(layout.source_axis[r] == a)[0]) for a in range(3)]
        out.append((r, cols))
    return out


def normalize(frames, stats: ChannelStats, layout: FrameLayout, row_labels: Sequence[str]) -> np.ndarray:
    """Standardize every frame cell with the statistics of its source channel.

    Channels whose training std is below ``1e-8`` are only centered.
    """
    if len(row_labels) != layout.n_rows:
        raise ConfigError(f"{len(row_labels)} row labels for a {layout.n_rows}-row layout")
    mu, scale = stats._arrays(row_labels)
    rows = layout.source_row[:, None]
    return (np.asarray(frames, dtype=np.float64) - mu[rows, layout.source_axis]) / scale[rows, layout.source_axis]


# --------------------------------------------------------------------------
# text dump: header "N_r F height width", then F * height rows of floats


def write_frame_dump(fh, frames, n_rows: int) -> None:
    """Append one sample's frames to an open text stream."""
    frames = np.asarray(frames, dtype=np.float64)
    n_frames, height, width = frames.shape
    fh.write(f"{n_rows} {n_frames} {height} {width}\n")
    for row in frames.reshape(-1, width):
        fh.write(" ".join(repr(float(v)) for v in row))
        fh.write("\n")


def read_frame_dumps(fh):
    """Yield ``(n_rows, frames)`` for every block in a dump stream."""
    while True:
        header = fh.readline()
        if not header:
            return
        if not header.strip():
            continue
        try:
            n_rows, n_frames, height, width = (int(tok) for tok in header.split())
        except ValueError as exc:
            raise DataError(f"bad frame dump header {header.strip()!r}") from exc
        rows = [fh.readline() for _ in range(n_frames * height)]
        try:
            values = np.array([[float(tok) for tok in line.split()] for line in rows], dtype=np.float64)
        except ValueError as exc:
            raise DataError("non-numeric value in frame dump") from exc
        if values.shape != (n_frames * height, width):
            raise DataError(f"frame dump block has shape {values.shape}, header says {(n_frames * height, width)}")
        yield n_rows, values.reshape(n_frames, height, width)
