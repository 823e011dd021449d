"""Glue between manifest, split plan, preprocessing and training."""

from __future__ import annotations

import dataclasses

import numpy as np

from .dataio import Checkpoint, DatasetManifest
from .dsp import BandpassSpec
from .evaluation import SplitPlan, make_split
from .model import HeartBeatNet, ModelConfig
from .train import PreparedSet, TrainConfig, TrainLog, fit


def subset(data: PreparedSet, ids) -> PreparedSet:
    pos = {rid: i for i, rid in enumerate(data.ids)}
    try:
        idx = [pos[r] for r in ids]
    except KeyError as exc:
        raise KeyError(f"record {exc.args[0]!r} not in prepared set") from None
    return PreparedSet([data.ids[i] for i in idx], data.labels[idx], [data.domains[i] for i in idx],
                       [data.signals[i] for i in idx], data.window_len)


def prepare_manifest(manifest: DatasetManifest, window_len: int = 5000, bandpass: BandpassSpec | None = None,
                     threads: int = 1) -> PreparedSet:
    return PreparedSet.from_records(manifest.load_records(), bandpass, window_len, threads)


def variant_train_config(variant: str, base: TrainConfig) -> TrainConfig:
    """The baseline trains on plain cross-entropy; the other variants keep label smoothing."""
    if variant == "baseline":
        return dataclasses.replace(base, label_smoothing=0.0)
    return base


def train_on_plan(
    data: PreparedSet,
    plan: SplitPlan,
    model_config: ModelConfig,
    train_config: TrainConfig,
    progress=None,
) -> tuple[Checkpoint, TrainLog]:
    tc = variant_train_config(model_config.variant, train_config)
    train, val = subset(data, plan.train_ids), subset(data, plan.val_ids)
    model = HeartBeatNet(model_config, seed=tc.seed)
    meta = {
        "protocol": str(plan.protocol),
        "variant": model_config.variant,
        "train_domains": sorted(set(train.domains)),
        "split_seed": plan.seed,
    }
    if plan.target is not None:
        meta["target_domain"] = plan.target
    return fit(train, val, model, tc, meta, progress)


def run_protocol(
    manifest: DatasetManifest,
    protocol: str,
    model_config: ModelConfig,
    train_config: TrainConfig,
    data: PreparedSet | None = None,
    split_seed: int = 42,
    progress=None,
):
    """Split, train and return ``(checkpoint, trainlog, test_set, plan)``."""
    plan = make_split(manifest, protocol, split_seed)
    if data is None:
        data = prepare_manifest(manifest, model_config.window)
    cp, log = train_on_plan(data, plan, model_config, train_config, progress)
    return cp, log, subset(data, plan.test_ids), plan


def class_balance(data: PreparedSet, n_classes: int = 7) -> np.ndarray:
    return np.bincount(data.labels, minlength=n_classes)
