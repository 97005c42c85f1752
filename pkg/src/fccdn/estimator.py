"""scikit-learn style wrapper around network, training and inference."""
from typing import Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import AugmentationConfig, ChannelStats, PairDataset, compute_stats
from .inference import evaluate_segmentation, predict
from .metrics import ConfusionCounts, MetricsReport, accumulate, compute_metrics
from .network import NetworkConfig, build_model
from .training import Trainer, TrainConfig, model_from_checkpoint, save_checkpoint, seed_everything, validate
from .validation import attach_labels, check_pairs


class ChangeDetector(BaseEstimator):
    """Bitemporal change detector with pseudolabel segmentation branches.

    ``X`` is a sequence of :class:`~fccdn.data.ImagePair` or an 8-bit array of
    shape ``(n, 2, H, W, C)``; ``y`` holds binary change maps ``(n, H, W)``.

    Parameters mirror :class:`NetworkConfig` and :class:`TrainConfig`. With
    ``augment`` the training pairs go through the random augmentation pipeline.

    Example
    -------
    >>> det = ChangeDetector(width_multiplier=0.25, max_steps=200)  # doctest: +SKIP
    >>> det.fit(X_train, y_train, eval_set=(X_val, y_val)).score(X_test, y_test)  # doctest: +SKIP
    """

    def __init__(
        self,
        backbone: str = "ded",
        width_multiplier: float = 1.0,
        use_nl_fpn: bool = True,
        use_dfm: bool = True,
        use_ssl_heads: bool = True,
        num_seg_classes: int = 1,
        stage_depths: Tuple[int, ...] = (3, 4, 6, 7),
        loss_variant: str = "binary_ssl",
        learning_rate: float = 0.002,
        weight_decay: float = 0.001,
        batch_size: int = 8,
        max_epochs: int = 300,
        max_steps: Optional[int] = None,
        validation_start_epoch: int = 30,
        plateau_patience_epochs: int = 10,
        plateau_factor: float = 0.3,
        augment: bool = True,
        random_state: int = 0,
    ):
        self.backbone = backbone
        self.width_multiplier = width_multiplier
        self.use_nl_fpn = use_nl_fpn
        self.use_dfm = use_dfm
        self.use_ssl_heads = use_ssl_heads
        self.num_seg_classes = num_seg_classes
        self.stage_depths = stage_depths
        self.loss_variant = loss_variant
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.max_steps = max_steps
        self.validation_start_epoch = validation_start_epoch
        self.plateau_patience_epochs = plateau_patience_epochs
        self.plateau_factor = plateau_factor
        self.augment = augment
        self.random_state = random_state

    def _network_config(self, channels: int) -> NetworkConfig:
        return NetworkConfig(
            backbone=self.backbone, width_multiplier=self.width_multiplier, use_nl_fpn=self.use_nl_fpn,
            use_dfm=self.use_dfm, use_ssl_heads=self.use_ssl_heads, num_seg_classes=self.num_seg_classes,
            input_channels=channels, stage_depths=tuple(self.stage_depths),
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, weight_decay=self.weight_decay, batch_size=self.batch_size,
            max_epochs=self.max_epochs, max_steps=self.max_steps,
            validation_start_epoch=self.validation_start_epoch,
            plateau_patience_epochs=self.plateau_patience_epochs, plateau_factor=self.plateau_factor,
            loss_variant=self.loss_variant, seed=self.random_state,
        )

    def fit(self, X, y, eval_set: Optional[Tuple] = None, seg_labels: Optional[Sequence] = None,
            run_dir=None) -> "ChangeDetector":
        """Train on ``(X, y)``; ``eval_set=(X_val, y_val)`` drives the plateau schedule.

        ``seg_labels=(labels_t1, labels_t2)`` supplies changed-area class maps
        for ``loss_variant="multiclass_ssl"``.
        """
        pairs = attach_labels(check_pairs(X), y, seg_labels)
        seed_everything(self.random_state)
        self.stats_ = compute_stats(pairs)
        self.n_features_in_ = pairs[0].t1.shape[-1]
        self.model_ = build_model(self._network_config(self.n_features_in_), self.random_state)
        aug = AugmentationConfig(rng_seed=self.random_state) if self.augment else None
        train = PairDataset(pairs, self.stats_, aug, seed=self.random_state)
        val = None
        if eval_set is not None:
            val = PairDataset(attach_labels(check_pairs(eval_set[0]), eval_set[1]), self.stats_)
        validator = None if val is not None else (lambda trainer, epoch: _train_metrics(trainer, train))
        trainer = Trainer(self.model_, self._train_config(), train, val, run_dir=run_dir, validator=validator)
        self.train_state_ = trainer.fit()
        self.model_.eval()
        return self

    def predict_scores(self, X) -> list:
        check_is_fitted(self, "model_")
        return [predict(self.model_, p, self.stats_) for p in check_pairs(X)]

    def predict_proba(self, X) -> np.ndarray:
        """Change probabilities ``(n, H, W)``."""
        return np.stack([p.change_score for p in self.predict_scores(X)])

    def predict(self, X) -> np.ndarray:
        """Binary change masks ``(n, H, W)``, threshold 0.5."""
        return (self.predict_proba(X) >= 0.5).astype(np.uint8)

    def transform(self, X) -> np.ndarray:
        """Bitemporal segmentation masks ``(n, 2, H, W)`` from the auxiliary branches."""
        preds = self.predict_scores(X)
        return np.stack([np.stack(p.seg_masks()) for p in preds]).astype(np.int64)

    def score(self, X, y) -> float:
        """F1 of the change masks."""
        return self.report(X, y).f1

    def report(self, X, y) -> MetricsReport:
        counts = ConfusionCounts()
        for pred, truth in zip(self.predict(X), y):
            counts = accumulate(pred.astype(bool), np.asarray(truth).astype(bool), counts)
        return compute_metrics(counts)

    def segmentation_report(self, pairs) -> MetricsReport:
        check_is_fitted(self, "model_")
        return evaluate_segmentation(self.model_, check_pairs(pairs), self.stats_)

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_)
        self.stats_.save(str(path) + ".stats")

    @classmethod
    def load(cls, path) -> "ChangeDetector":
        model, _ = model_from_checkpoint(path)
        c = model.cfg
        det = cls(backbone=c.backbone, width_multiplier=c.width_multiplier, use_nl_fpn=c.use_nl_fpn,
                  use_dfm=c.use_dfm, use_ssl_heads=c.use_ssl_heads, num_seg_classes=c.num_seg_classes,
                  stage_depths=c.stage_depths)
        det.model_ = model
        det.stats_ = ChannelStats.load(str(path) + ".stats")
        det.n_features_in_ = c.input_channels
        return det


def _train_metrics(trainer: Trainer, train: PairDataset) -> MetricsReport:
    plain = PairDataset(train.pairs, train.stats)
    return validate(trainer.model, plain, trainer.cfg.batch_size)
