"""Hybrid supervised + REINFORCE training, evaluation and LOSO harness."""

from __future__ import annotations

import json
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import kernel
from .data import loso_splits, subsample_labeled
from .exceptions import ConfigError, DataError, NumericError
from .frames import ChannelStats, FrameLayout, normalize
from .glimpse import location_to_pixel
from .model import ModelConfig, RAAFNetwork

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    grad_clip: float = 5.0
    epochs: int = 100
    batch_size: int = 32
    micro_batch: int = 4
    seed: int = 0
    reinforce: bool = True
    baseline: bool = True
    baseline_decay: float = 0.9
    action_weight: float = 1.0
    reinforce_weight: float = 1.0
    validation_fraction: float = 0.1
    patience: int = 10
    early_stopping: bool = True
    target_train_accuracy: float | None = None

    def __post_init__(self):
        for name in ("lr", "epochs", "batch_size", "micro_batch", "grad_clip"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.momentum < 1 or not 0 <= self.baseline_decay < 1:
            raise ConfigError("momentum and baseline_decay must lie in [0, 1)")
        if not 0 <= self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys {sorted(unknown)}")
        return cls(**d)


def reward(predictions, labels) -> np.ndarray:
    """1 for every copy whose terminal prediction is correct, else 0."""
    return (np.asarray(predictions) == np.asarray(labels)).astype(np.float64)


class MovingAverageBaseline:
    """Exponential moving average of the mean batch reward."""

    def __init__(self, decay: float = 0.9, enabled: bool = True):
        self.decay = decay
        self.enabled = enabled
        self.value = 0.0

    def __call__(self) -> float:
        return self.value if self.enabled else 0.0

    def update(self, mean_reward: float):
        if self.enabled:
            self.value = self.decay * self.value + (1.0 - self.decay) * float(mean_reward)


def reinforce_grad(net: RAAFNetwork, result, rewards, baseline: float = 0.0, scale: float = 1.0):
    """Accumulate the Monte Carlo policy gradient for every copy in ``result``.

    ``rewards`` has shape (B, M). The contribution of copy ``i`` is its
    summed log-density score times ``R_i - baseline``, scaled by ``1/M`` and
    averaged over samples; it flows through the location head into the
    attention LSTM.
    """
    if result.cache is None or result.loc_raw is None:
        raise DataError("episode traces need locations and a forward cache")
    adv = np.asarray(rewards, dtype=np.float64) - baseline
    net.backward(result, np.zeros(result.n_samples, dtype=np.intp), advantages=adv, classification=False,
                 action_weight=0.0, scale=scale)


# --------------------------------------------------------------------------
# training


@dataclass
class EpochMetrics:
    epoch: int
    loss: float  # cross-entropy of the final class scores
    accuracy: float
    mean_reward: float
    objective: float = 0.0  # full training objective incl. action and policy terms
    val_accuracy: float | None = None


def _param_norms(net):
    return {p.name: float(np.linalg.norm(p.value)) for p in net.params}


def train_epoch(net: RAAFNetwork, X, y, config: TrainConfig, rng: np.random.Generator,
                baseline: MovingAverageBaseline, epoch: int = 0) -> EpochMetrics:
    """One pass over ``(X, y)`` in shuffled batches with one optimizer step per batch."""
    n = len(y)
    order = rng.permutation(n)
    use_rl = config.reinforce and net.config.location_mode == "policy"
    total_loss = 0.0
    total_objective = 0.0
    correct = 0
    reward_sum = 0.0
    n_rewards = 0
    for start in range(0, n, config.batch_size):
        batch = order[start : start + config.batch_size]
        net.zero_grad()
        b = baseline()
        batch_rewards = []
        for ms in range(0, len(batch), config.micro_batch):
            idx = batch[ms : ms + config.micro_batch]
            scale = len(idx) / len(batch)
            try:
                res = net.forward(X[idx], rng)
            except NumericError as exc:
                raise NumericError(
                    f"{exc} at epoch {epoch}, batch {start // config.batch_size}; parameter norms {_param_norms(net)}"
                ) from exc
            R = reward(res.copy_predictions, y[idx][:, None])
            ce = net.classification_loss(res, y[idx], 0.0)
            loss = net.classification_loss(res, y[idx], config.action_weight)
            adv = None
            if use_rl:
                adv = R - b
                loss += config.reinforce_weight * net.reinforce_loss(res, adv)
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}; "
                    f"parameter norms {_param_norms(net)}"
                )
            net.backward(res, y[idx], advantages=adv, action_weight=config.action_weight,
                         reinforce_weight=config.reinforce_weight, scale=scale)
            total_loss += ce * len(idx)
            total_objective += loss * len(idx)
            correct += int(np.sum(res.predictions == y[idx]))
            batch_rewards.append(R)
        try:
            kernel.sgd_momentum_step(net.params, config.lr, config.momentum, config.grad_clip)
        except NumericError as exc:
            raise NumericError(f"{exc} (epoch {epoch}, batch {start // config.batch_size})") from exc
        R_all = np.concatenate(batch_rewards, axis=0)
        baseline.update(R_all.mean())
        reward_sum += R_all.sum()
        n_rewards += R_all.size
    return EpochMetrics(epoch, total_loss / n, correct / n, float(reward_sum / max(n_rewards, 1)), total_objective / n)


def predict_proba(net: RAAFNetwork, X, rng: np.random.Generator, batch: int = 8, greedy: bool | None = None):
    greedy = net.config.greedy_eval if greedy is None else greedy
    out = []
    for s in range(0, len(X), batch):
        out.append(net.forward(X[s : s + batch], rng, greedy=greedy, keep_cache=False).mean_probs)
    return np.concatenate(out, axis=0) if out else np.zeros((0, net.config.n_classes))


def accuracy(net, X, y, rng, batch: int = 8) -> float:
    return float(np.mean(np.argmax(predict_proba(net, X, rng, batch), axis=1) == y))


@dataclass
class FitResult:
    net: RAAFNetwork
    history: list[EpochMetrics]
    best_epoch: int


def fit_network(X, y, model_config: ModelConfig, config: TrainConfig, X_val=None, y_val=None,
                callback: Callable[[EpochMetrics], None] | None = None) -> FitResult:
    """Train a fresh network; fully determined by ``config.seed``.

    With validation data and early stopping the parameters of the best
    validation epoch are restored at the end.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    if len(y) == 0:
        raise DataError("empty training set")
    net = RAAFNetwork(model_config, seed=config.seed)
    rng = kernel.make_rng(config.seed + 1)
    eval_seed = config.seed + 2
    baseline = MovingAverageBaseline(config.baseline_decay, config.baseline)
    history: list[EpochMetrics] = []
    best = (-1.0, 0, None)
    stale = 0
    for epoch in range(1, config.epochs + 1):
        metrics = train_epoch(net, X, y, config, rng, baseline, epoch)
        if X_val is not None and len(y_val):
            metrics.val_accuracy = accuracy(net, X_val, y_val, kernel.make_rng(eval_seed))
        history.append(metrics)
        log.info("epoch %d loss %.4f acc %.3f reward %.3f val %s", epoch, metrics.loss, metrics.accuracy,
                 metrics.mean_reward, metrics.val_accuracy)
        if callback is not None:
            callback(metrics)
        if metrics.val_accuracy is not None:
            if metrics.val_accuracy > best[0]:
                best = (metrics.val_accuracy, epoch, net.state_dict())
                stale = 0
            else:
                stale += 1
            if config.early_stopping and stale >= config.patience:
                break
        if config.target_train_accuracy is not None and metrics.accuracy >= config.target_train_accuracy:
            break
    best_epoch = history[-1].epoch
    if best[2] is not None and config.early_stopping:
        net.load_state_dict(best[2])
        best_epoch = best[1]
    return FitResult(net, history, best_epoch)


# --------------------------------------------------------------------------
# evaluation


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, cols = predicted

    @classmethod
    def from_predictions(cls, y_true, y_pred, n_classes: int) -> "ConfusionMatrix":
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(y_true), np.asarray(y_pred)), 1)
        return cls(counts)

    @property
    def accuracy(self) -> float:
        total = self.counts.sum()
        return float(np.trace(self.counts) / total) if total else 0.0

    def to_csv(self, class_names: Sequence[str] | None = None) -> str:
        C = self.counts.shape[0]
        names = list(class_names) if class_names is not None else [str(k) for k in range(C)]
        lines = ["true\\pred," + ",".join(names)]
        for k in range(C):
            lines.append(names[k] + "," + ",".join(str(int(v)) for v in self.counts[k]))
        return "\n".join(lines) + "\n"


@dataclass
class GlimpseHeatmap:
    """Glimpse-center visit counts per true class over the frame grid."""

    counts: np.ndarray  # (C, H, W)
    window: tuple[int, int]
    n_scales: int

    @property
    def total(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def add(self, loc_used, label: int):
        H, W = self.counts.shape[1:]
        pix = location_to_pixel(loc_used.reshape(-1, 2), H, W)
        np.add.at(self.counts[label], (pix[:, 0], pix[:, 1]), 1)

    def to_csv(self, label: int | None = None) -> str:
        grid = self.total if label is None else self.counts[label]
        return "\n".join(",".join(str(int(v)) for v in row) for row in grid) + "\n"


def export_modality_involvement(heatmap: GlimpseHeatmap, row_groups: Sequence[str], label: int | None = None) -> dict[str, float]:
    """Percentage of glimpse centers falling on each modality's frame rows.

    ``row_groups[r]`` names the modality of frame row ``r``; duplicated rows
    carry the name of the snapshot row they were copied from.
    """
    grid = heatmap.total if label is None else heatmap.counts[label]
    if len(row_groups) != grid.shape[0]:
        raise ConfigError(f"{len(row_groups)} row groups for a frame with {grid.shape[0]} rows")
    per_row = grid.sum(axis=1).astype(np.float64)
    total = per_row.sum()
    out: dict[str, float] = {}
    for name in dict.fromkeys(row_groups):
        mask = np.array([g == name for g in row_groups])
        out[name] = 100.0 * per_row[mask].sum() / total if total else 0.0
    return out


def row_groups_for(layout: FrameLayout, row_labels: Sequence[str], modality_of: dict[str, str] | None = None) -> list[str]:
    modality_of = modality_of or {}
    return [modality_of.get(row_labels[k], row_labels[k]) for k in layout.source_row]


@dataclass
class EvalReport:
    accuracy: float
    confusion: ConfusionMatrix
    heatmap: GlimpseHeatmap
    latency_mean: float
    latency_p95: float
    n_samples: int
    predictions: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)


def evaluate(net: RAAFNetwork, X, y, rng: np.random.Generator, greedy: bool | None = None) -> EvalReport:
    """Classify every sample separately, timing each forward pass."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    if len(y) == 0:
        raise DataError("empty test set")
    cfg = net.config
    greedy = cfg.greedy_eval if greedy is None else greedy
    heatmap = GlimpseHeatmap(np.zeros((cfg.n_classes, *cfg.frame_shape), dtype=np.int64), cfg.glimpse_window, cfg.n_scales)
    preds = np.empty(len(y), dtype=np.intp)
    latencies = np.empty(len(y))
    for k in range(len(y)):
        t0 = time.perf_counter()
        res = net.forward(X[k : k + 1], rng, greedy=greedy, keep_cache=False)
        latencies[k] = time.perf_counter() - t0
        preds[k] = res.predictions[0]
        heatmap.add(res.loc_used, int(y[k]))
    confusion = ConfusionMatrix.from_predictions(y, preds, cfg.n_classes)
    direct = float(np.mean(preds == y))
    return EvalReport(direct, confusion, heatmap, float(latencies.mean()), float(np.percentile(latencies, 95)),
                      len(y), preds, y)


def check_accounting(report: EvalReport, n_copies: int, n_glimpses: int, n_frames: int,
                     row_groups: Sequence[str] | None = None):
    """Assert the bookkeeping identities every evaluation must satisfy."""
    counts = report.confusion.counts
    class_counts = np.bincount(report.labels, minlength=counts.shape[0])
    if not np.array_equal(counts.sum(axis=1), class_counts):
        raise AssertionError("confusion matrix row sums differ from per-class test counts")
    if report.confusion.accuracy != report.accuracy:
        raise AssertionError("trace/total accuracy differs from accumulated accuracy")
    expected = report.n_samples * n_copies * n_glimpses * n_frames
    if int(report.heatmap.counts.sum()) != expected:
        raise AssertionError(f"heatmap holds {int(report.heatmap.counts.sum())} visits, expected {expected}")
    if row_groups is not None:
        total = sum(export_modality_involvement(report.heatmap, row_groups).values())
        if abs(total - 100.0) > 0.1:
            raise AssertionError(f"modality involvement sums to {total}")


# --------------------------------------------------------------------------
# LOSO


@dataclass
class FrameDataset:
    """Samples as frames plus everything needed for normalization and reporting."""

    X: np.ndarray  # (n, F, H, W), unnormalized
    y: np.ndarray
    subjects: np.ndarray
    n_classes: int
    class_names: list[str] | None = None
    layout: FrameLayout | None = None
    row_labels: list[str] | None = None
    modality_of: dict[str, str] | None = None
    normalize: bool = True
    groups: list[str] | None = None  # explicit per-frame-row group names

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.intp)
        self.subjects = np.asarray(self.subjects).astype(str)
        if not (len(self.X) == len(self.y) == len(self.subjects)):
            raise DataError("X, y and subjects must have equal length")

    @property
    def row_groups(self) -> list[str] | None:
        if self.groups is not None:
            return list(self.groups)
        if self.layout is None or self.row_labels is None:
            return None
        return row_groups_for(self.layout, self.row_labels, self.modality_of)

    def normalized_split(self, train_idx, test_idx):
        Xtr, Xte = self.X[train_idx], self.X[test_idx]
        if self.normalize and self.layout is not None and self.row_labels is not None:
            stats = ChannelStats.fit_frames(Xtr, self.layout, self.row_labels)
            Xtr = normalize(Xtr, stats, self.layout, self.row_labels)
            Xte = normalize(Xte, stats, self.layout, self.row_labels)
        return Xtr, Xte


def fold_seed(base_seed: int, subject: str) -> int:
    """Per-fold seed that depends only on the held-out subject, not on fold order."""
    return (int(base_seed) * 1_000_003 + zlib.crc32(str(subject).encode())) % (2**63)


@dataclass
class FoldResult:
    subject: str
    n_train: int
    n_test: int
    accuracy: float
    report: EvalReport = field(repr=False)
    best_epoch: int = 0


@dataclass
class LosoReport:
    folds: list[FoldResult]

    @property
    def mean_accuracy(self) -> float:
        """Unweighted mean of per-fold accuracies."""
        return float(np.mean([f.accuracy for f in self.folds]))

    def to_csv(self) -> str:
        lines = ["subject,n_train,n_test,accuracy,latency_mean_s,latency_p95_s,best_epoch"]
        for f in self.folds:
            lines.append(f"{f.subject},{f.n_train},{f.n_test},{f.accuracy!r},{f.report.latency_mean!r},"
                         f"{f.report.latency_p95!r},{f.best_epoch}")
        lines.append(f"mean,,,{self.mean_accuracy!r},,,")
        return "\n".join(lines) + "\n"


def _split_validation(train_idx, fraction, rng):
    if fraction <= 0 or len(train_idx) < 10:
        return train_idx, train_idx[:0]
    perm = rng.permutation(len(train_idx))
    n_val = max(1, int(round(fraction * len(train_idx))))
    return np.sort(train_idx[perm[n_val:]]), np.sort(train_idx[perm[:n_val]])


def run_fold(dataset: FrameDataset, held_out: str, model_config: ModelConfig, config: TrainConfig,
             train_subset: Callable[[np.ndarray], np.ndarray] | None = None,
             out_dir: Path | None = None) -> FoldResult:
    """Train on every subject except ``held_out`` and evaluate on it."""
    train_idx = np.flatnonzero(dataset.subjects != held_out)
    test_idx = np.flatnonzero(dataset.subjects == held_out)
    if set(dataset.subjects[train_idx]) & set(dataset.subjects[test_idx]):
        raise AssertionError("subject leakage between train and test")
    if train_subset is not None:
        train_idx = train_subset(train_idx)
    seed = fold_seed(config.seed, held_out)
    fold_cfg = TrainConfig.from_dict({**config.to_dict(), "seed": seed})
    fit_idx, val_idx = _split_validation(train_idx, config.validation_fraction, kernel.make_rng(seed))
    Xfit, Xval = dataset.normalized_split(fit_idx, val_idx)
    _, Xte = dataset.normalized_split(fit_idx, test_idx)
    test_digest = zlib.crc32(Xte.tobytes())
    fit = fit_network(Xfit, dataset.y[fit_idx], model_config, fold_cfg,
                      Xval if len(val_idx) else None, dataset.y[val_idx] if len(val_idx) else None)
    report = evaluate(fit.net, Xte, dataset.y[test_idx], kernel.make_rng(seed + 3))
    if zlib.crc32(Xte.tobytes()) != test_digest:
        raise AssertionError("test data changed during training")
    check_accounting(report, model_config.n_copies, model_config.n_glimpses, model_config.n_frames, dataset.row_groups)
    result = FoldResult(held_out, len(fit_idx), len(test_idx), report.accuracy, report, fit.best_epoch)
    if out_dir is not None:
        write_fold_artifacts(Path(out_dir) / f"fold_{held_out}", result, fit, dataset)
    return result


def run_loso(dataset: FrameDataset, model_config: ModelConfig, config: TrainConfig,
             out_dir: Path | None = None, subjects: Sequence[str] | None = None,
             train_subset: Callable[[np.ndarray], np.ndarray] | None = None) -> LosoReport:
    splits = loso_splits(sorted(set(dataset.subjects)))
    if subjects is not None:
        splits = [s for s in splits if s.held_out in set(map(str, subjects))]
    folds = [run_fold(dataset, s.held_out, model_config, config, train_subset, out_dir) for s in splits]
    report = LosoReport(folds)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "loso.csv").write_text(report.to_csv())
        echo_config(out_dir, model_config, config)
    return report


def sweep_labeled_data(dataset: FrameDataset, model_config: ModelConfig, config: TrainConfig,
                       sizes: Sequence[int], out_dir: Path | None = None,
                       subjects: Sequence[str] | None = None) -> list[tuple[int, LosoReport]]:
    """Repeat LOSO with nested, class-stratified subsets of each training split."""
    sizes = list(sizes)
    if sizes != sorted(sizes):
        raise ConfigError("sweep sizes must be ascending")
    rows = []
    for size in sizes:
        def subset(train_idx, size=size):
            n = min(size, len(train_idx))
            pick = subsample_labeled(dataset.y[train_idx], n, config.seed)
            return train_idx[pick]

        rep = run_loso(dataset, model_config, config, None, subjects, subset)
        rows.append((size, rep))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        lines = ["n_labeled,mean_accuracy"] + [f"{s},{r.mean_accuracy!r}" for s, r in rows]
        (out_dir / "sweep.csv").write_text("\n".join(lines) + "\n")
        echo_config(out_dir, model_config, config)
    return rows


def echo_config(out_dir: Path, model_config: ModelConfig, config: TrainConfig):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps({"model": model_config.to_dict(), "train": config.to_dict()}, indent=2, sort_keys=True)
    )


def write_fold_artifacts(fold_dir: Path, result: FoldResult, fit: FitResult, dataset: FrameDataset):
    fold_dir.mkdir(parents=True, exist_ok=True)
    rep = result.report
    (fold_dir / "confusion.csv").write_text(rep.confusion.to_csv(dataset.class_names))
    (fold_dir / "heatmap.csv").write_text(rep.heatmap.to_csv())
    lines = ["epoch,loss,accuracy,mean_reward,val_accuracy"]
    for m in fit.history:
        lines.append(f"{m.epoch},{m.loss!r},{m.accuracy!r},{m.mean_reward!r},{'' if m.val_accuracy is None else repr(m.val_accuracy)}")
    (fold_dir / "history.csv").write_text("\n".join(lines) + "\n")
    groups = dataset.row_groups
    if groups is not None:
        write_involvement(fold_dir / "involvement.csv", rep.heatmap, groups, dataset.class_names)
    fit.net.save(fold_dir / "model.raaf")


def write_involvement(path: Path, heatmap: GlimpseHeatmap, groups, class_names=None):
    names = list(dict.fromkeys(groups))
    lines = ["activity," + ",".join(names)]
    overall = export_modality_involvement(heatmap, groups)
    lines.append("all," + ",".join(f"{overall[n]:.2f}" for n in names))
    for c in range(heatmap.counts.shape[0]):
        if heatmap.counts[c].sum() == 0:
            continue
        share = export_modality_involvement(heatmap, groups, c)
        label = class_names[c] if class_names else str(c)
        lines.append(f"{label}," + ",".join(f"{share[n]:.2f}" for n in names))
    path.write_text("\n".join(lines) + "\n")
