"""Activity frames versus plain stacked rows on the same recordings and budget."""

from __future__ import annotations

from dataclasses import dataclass

from .data import DatasetConfig, load_dataset, subsample_labeled
from .model import ModelConfig
from .training import TrainConfig, run_loso

# reduced model used for the directional comparison; both layouts share it
ABLATION_MODEL = dict(n_glimpses=6, n_copies=4, conv_channels=(4, 4), n_scales=2, dim_what=64, dim_g=64,
                      hidden_attention=64, hidden_frame=64)
ABLATION_TRAIN = dict(epochs=15, lr=0.01, batch_size=32, micro_batch=32, validation_fraction=0.0,
                      early_stopping=False)


@dataclass
class LayoutComparison:
    activity: float
    stacked: float
    n_samples: int

    @property
    def activity_wins(self) -> bool:
        return self.activity > self.stacked


def compare_layouts(config: DatasetConfig, data_dir, subjects, n_frames: int = 5, max_train: int | None = 600,
                    seed: int = 0, model=None, train=None) -> LayoutComparison:
    """LOSO mean accuracy over ``subjects`` for activity frames and for stacked rows.

    Stacked samples are only three columns wide, so their encoder skips the
    second pooling stage. Training sets are capped at ``max_train`` samples
    with the class-stratified nested subsampler.
    """
    model = {**ABLATION_MODEL, **(model or {})}
    train = TrainConfig(**{**ABLATION_TRAIN, "seed": seed, **(train or {})})
    scores = {}
    n = 0
    for stacked in (False, True):
        ds, _ = load_dataset(config, data_dir, n_frames, stacked=stacked, subjects=subjects)
        n = len(ds.y)
        extra = {"pool_stages": (True, False)} if stacked else {}
        mc = ModelConfig(frame_shape=ds.X.shape[2:], n_classes=ds.n_classes, n_frames=n_frames, **model, **extra)

        def cap(idx, ds=ds):
            if max_train is None or len(idx) <= max_train:
                return idx
            return idx[subsample_labeled(ds.y[idx], max_train, seed)]

        scores[stacked] = run_loso(ds, mc, train, train_subset=cap).mean_accuracy
    return LayoutComparison(scores[False], scores[True], n)
