"""Estimator-style wrappers around the functional training and inference core.

``fit`` takes a :class:`PyramidDataset` (or a path to one) instead of a
feature matrix; ``predict`` returns one mask per patch at the finest level.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .autodiff.optim import LrSchedule
from .core import (
    BaselineState,
    PatchSampler,
    TrainSettings,
    TrainState,
    ZoomConfig,
    baseline_predict,
    baseline_train_step,
    evaluate,
    infer_patch,
    load_batch,
    project_mask,
    split_refs,
    train_step,
)
from .metrics import mean_iou, relative_time, table_row
from .nets import PolicyNetConfig, SegNetConfig, flop_count
from .validation import check_dataset, check_refs


class _PyramidSegmenter(BaseEstimator):
    def _settings(self) -> TrainSettings:
        return TrainSettings(
            self.level, self.patch_size, self.batch_size, self.stratify, self.test_fraction, self.split_seed,
            self.random_state,
        )

    def _schedule(self) -> LrSchedule:
        return LrSchedule(self.lr, self.lr_factor, self.lr_period)

    def _seg_config(self) -> SegNetConfig:
        return SegNetConfig(widths=tuple(self.seg_widths), input_size=(self.patch_size, self.patch_size))

    def _refs(self, ds, refs, split):
        if refs is None:
            return split_refs(ds, self.level, self.patch_size, split, self.test_fraction, self.split_seed)
        return check_refs(ds, refs)

    def _fit_loop(self, ds, step_fn):
        sampler = PatchSampler(
            ds, self.level, self.patch_size, "train", self.stratify,
            test_fraction=self.test_fraction, seed=self.split_seed,
        )
        self.history_ = []
        while self.state_.step < self.steps:
            rep = step_fn(sampler.draw(self.state_.rng, self.batch_size))
            if self.verbose and self.state_.step % 100 == 0:
                print(rep.log_record())
            self.history_.append(rep.log_record())
        self.n_steps_ = self.state_.step
        return self

    def _predict_one(self, ds, ref):
        raise NotImplementedError

    def predict(self, ds, refs=None):
        """Masks for ``refs`` (default: the test split) at the finest level."""
        check_is_fitted(self, "state_")
        ds = check_dataset(ds)
        out = []
        for ref in self._refs(ds, refs, "test"):
            mask, level, _ = self._predict_one(ds, ref)
            out.append(project_mask(mask, level, ds.levels - 1, ds.rate))
        return out

    def evaluate(self, ds, refs=None):
        """Per-class and mean IOU plus relative inference time."""
        check_is_fitted(self, "state_")
        ds = check_dataset(ds)
        acc, ledger = evaluate(lambda r: self._predict_one(ds, r), ds, self._refs(ds, refs, "test"))
        row = table_row(acc)
        row["relative_time"] = relative_time(ledger, self.policy_ratio_)
        return row

    def score(self, ds, refs=None) -> float:
        """Mean IOU on ``refs`` (default: the test split)."""
        check_is_fitted(self, "state_")
        ds = check_dataset(ds)
        acc, _ = evaluate(lambda r: self._predict_one(ds, r), ds, self._refs(ds, refs, "test"))
        return mean_iou(acc)


class RAZNSegmenter(_PyramidSegmenter):
    """Zoom policy plus one segmentation net per magnification."""

    def __init__(
        self,
        steps=5000,
        batch_size=8,
        lr=0.002,
        lr_factor=0.1,
        lr_period=5000,
        alpha=0.8,
        rate=2,
        reward_sign="as-written",
        patch_size=64,
        level=0,
        stratify=0.5,
        test_fraction=0.25,
        split_seed=0,
        seg_widths=(8, 16, 32, 64),
        policy_widths=(8, 16, 32, 64),
        random_state=0,
        verbose=False,
    ):
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.lr_factor = lr_factor
        self.lr_period = lr_period
        self.alpha = alpha
        self.rate = rate
        self.reward_sign = reward_sign
        self.patch_size = patch_size
        self.level = level
        self.stratify = stratify
        self.test_fraction = test_fraction
        self.split_seed = split_seed
        self.seg_widths = seg_widths
        self.policy_widths = policy_widths
        self.random_state = random_state
        self.verbose = verbose

    def fit(self, ds, y=None):
        ds = check_dataset(ds)
        seg = self._seg_config()
        pol = PolicyNetConfig(widths=tuple(self.policy_widths), input_size=(self.patch_size, self.patch_size))
        zoom = ZoomConfig(1, self.rate, self.alpha, self.reward_sign)
        self.state_ = TrainState.create(seg, pol, zoom, self._schedule(), self._settings())
        self.policy_ratio_ = flop_count(seg, pol).ratio
        return self._fit_loop(ds, lambda refs: train_step(self.state_, load_batch(ds, refs, self.rate)))

    def _predict_one(self, ds, ref):
        res = infer_patch(self.state_, ds, ref)
        return res.mask, res.level, res.record

    def decision_function(self, ds, refs=None) -> np.ndarray:
        """Bounded zoom probability for each patch."""
        check_is_fitted(self, "state_")
        ds = check_dataset(ds)
        return np.array([infer_patch(self.state_, ds, r).record.p_tilde[0] for r in self._refs(ds, refs, "test")])


class ScaleBaselineSegmenter(_PyramidSegmenter):
    """Single segmentation net at one scale (``scale1``, ``scale2``) or trained on both (``ms``)."""

    def __init__(
        self,
        kind="scale1",
        steps=5000,
        batch_size=8,
        lr=0.002,
        lr_factor=0.1,
        lr_period=5000,
        rate=2,
        source="pyramid",
        patch_size=64,
        level=0,
        stratify=0.5,
        test_fraction=0.25,
        split_seed=0,
        seg_widths=(8, 16, 32, 64),
        random_state=0,
        verbose=False,
    ):
        self.kind = kind
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.lr_factor = lr_factor
        self.lr_period = lr_period
        self.rate = rate
        self.source = source
        self.patch_size = patch_size
        self.level = level
        self.stratify = stratify
        self.test_fraction = test_fraction
        self.split_seed = split_seed
        self.seg_widths = seg_widths
        self.random_state = random_state
        self.verbose = verbose

    def fit(self, ds, y=None):
        ds = check_dataset(ds)
        self.state_ = BaselineState.create(
            self.kind, self._seg_config(), self._schedule(), self._settings(), self.rate, self.source
        )
        self.policy_ratio_ = 0.0
        return self._fit_loop(ds, lambda refs: baseline_train_step(self.state_, ds, refs))

    def _predict_one(self, ds, ref):
        return baseline_predict(self.state_, ds, ref)
