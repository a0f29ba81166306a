"""Synthetic data: the salient-quadrant benchmark and fake sensor recordings."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .exceptions import ConfigError


def quadrant_slices(frame_shape, quadrant: int):
    """Row and column slices of quadrant 0..3 (row-major: TL, TR, BL, BR)."""
    H, W = frame_shape
    rh, cw = H // 2, W // 2
    rows = slice(0, rh) if quadrant < 2 else slice(H - rh, H)
    cols = slice(0, cw) if quadrant % 2 == 0 else slice(W - cw, W)
    return rows, cols


def salient_quadrant(n_samples: int = 50, n_classes: int = 2, frame_shape=(37, 9), n_frames: int = 5,
                     patch=(6, 3), amplitude: float = 3.0, noise: float = 1.0, quadrants=None, seed: int = 0):
    """Frames of Gaussian noise with one bright patch; the class is the patch's quadrant.

    Class ``c`` places a ``patch``-sized block of ``+amplitude`` at a random
    position inside quadrant ``quadrants[c]`` (default: classes 0 and 1 use
    the top-left and bottom-right quadrants). The patch sits at the same
    place in every frame of a sample. Labels are balanced.
    Returns ``X`` of shape ``(n, F, H, W)`` and ``y``.
    """
    if quadrants is None:
        quadrants = (0, 3, 1, 2)[:n_classes]
    if len(quadrants) < n_classes:
        raise ConfigError(f"{n_classes} classes but only {len(quadrants)} quadrants given")
    rng = np.random.Generator(np.random.PCG64(seed))
    H, W = frame_shape
    X = rng.normal(0.0, noise, size=(n_samples, n_frames, H, W))
    y = np.arange(n_samples) % n_classes
    rng.shuffle(y)
    ph, pw = patch
    for i, c in enumerate(y):
        rows, cols = quadrant_slices(frame_shape, quadrants[c])
        r0 = rng.integers(rows.start, rows.stop - ph + 1)
        c0 = rng.integers(cols.start, cols.stop - pw + 1)
        X[i, :, r0 : r0 + ph, c0 : c0 + pw] += amplitude
    return X, y


def synthetic_stream(n_rows: int, labels, rng: np.random.Generator, noise: float = 0.3) -> np.ndarray:
    """Snapshots ``(len(labels), n_rows, 3)`` whose mean level depends on the label."""
    labels = np.asarray(labels)
    base = rng.normal(0.0, 1.0, size=(int(labels.max()) + 1, n_rows, 3))
    return base[labels] + rng.normal(0.0, noise, size=(len(labels), n_rows, 3))


def write_synthetic_recording(path, snapshots, labels, sampling_rate: float = 50.0, with_timestamp: bool = True):
    """Write a whitespace-separated recording: [timestamp] label then the 3*N_r channels."""
    snapshots = np.asarray(snapshots)
    n = len(labels)
    cols = [np.asarray(labels, dtype=np.float64)[:, None], snapshots.reshape(n, -1)]
    if with_timestamp:
        cols.insert(0, (np.arange(n) / sampling_rate)[:, None])
    np.savetxt(Path(path), np.hstack(cols), fmt="%.10g")


def synthetic_dataset_config(n_rows: int, n_classes: int, files, sampling_rate: float = 50.0,
                             window_seconds: float = 1.0, overlap: float = 0.5) -> dict:
    """Dataset config dict matching ``write_synthetic_recording`` output (with timestamps)."""
    names = [f"c{k}" for k in range(n_classes)]
    return {
        "name": "synthetic",
        "sampling_rate": sampling_rate,
        "timestamp_column": 0,
        "label_column": 1,
        "window_seconds": window_seconds,
        "overlap": overlap,
        "class_names": names,
        "rows": [{"label": f"row{k}", "modality": f"mod{k // 2}", "columns": [2 + 3 * k, 3 + 3 * k, 4 + 3 * k]}
                 for k in range(n_rows)],
        "labels": {str(k): names[k] for k in range(n_classes)} | {"99": "discard"},
        "files": [{"path": str(p), "subject": str(s)} for p, s in files],
    }


def salient_quadrant_dataset(n_samples: int = 50, n_subjects: int = 2, seed: int = 0, **kwargs):
    """``salient_quadrant`` samples wrapped as a ``FrameDataset``.

    Samples are dealt to ``n_subjects`` pseudo-subjects in turn; frame rows
    are grouped into an ``upper`` and a ``lower`` half for involvement tables.
    """
    from .training import FrameDataset

    X, y = salient_quadrant(n_samples, seed=seed, **kwargs)
    n_classes = kwargs.get("n_classes", 2)
    H = X.shape[2]
    groups = ["upper"] * (H // 2) + ["lower"] * (H - H // 2)
    subjects = np.array([f"s{k % n_subjects + 1}" for k in range(n_samples)])
    return FrameDataset(X, y, subjects, n_classes, [f"quadrant{q}" for q in range(n_classes)],
                        normalize=False, groups=groups)


# model and data settings of the salient-quadrant learning benchmark
BENCHMARK_DATA = dict(n_frames=2, amplitude=1.5, patch=(4, 2), noise=1.0)
BENCHMARK_MODEL = dict(n_glimpses=4, n_copies=4, conv_channels=(4, 4), glimpse_window=(5, 3), n_scales=1,
                       dim_what=64, dim_g=64, hidden_attention=64, hidden_frame=64)
BENCHMARK_TRAIN = dict(lr=0.01, batch_size=10, micro_batch=10, validation_fraction=0.0, early_stopping=False)


def salient_benchmark(seed: int = 0, max_epochs: int = 200, target: float = 0.95, ablations=("random",)):
    """Train with REINFORCE until ``target`` train accuracy, then give each ablation the same epochs.

    Ablations: ``"random"`` draws every glimpse location uniformly (the
    location head is never used); ``"frozen"`` keeps the location policy but
    never updates it. Accuracies are measured after training on the 50
    training samples with a fixed evaluation seed.
    """
    from . import kernel
    from .model import ModelConfig
    from .training import TrainConfig, accuracy, fit_network

    X, y = salient_quadrant(50, seed=seed, **BENCHMARK_DATA)
    shape = X.shape[2:]

    def run(location_mode, reinforce, epochs, stop):
        mc = ModelConfig(frame_shape=shape, n_classes=2, n_frames=X.shape[1], location_mode=location_mode,
                         **BENCHMARK_MODEL)
        tc = TrainConfig(epochs=epochs, seed=seed, reinforce=reinforce, target_train_accuracy=stop, **BENCHMARK_TRAIN)
        fit = fit_network(X, y, mc, tc)
        return fit, accuracy(fit.net, X, y, kernel.make_rng(seed + 7))

    fit, acc = run("policy", True, max_epochs, target)
    budget = len(fit.history)
    out = {"epochs": budget, "reinforce": acc, "reached_target": fit.history[-1].accuracy >= target}
    for name in ablations:
        mode, rl = ("random", False) if name == "random" else ("policy", False)
        out[name] = run(mode, rl, budget, None)[1]
    return out
