import time
from functools import lru_cache

import numpy as np
import pytest

from sarmoe import (
    ExperimentConfig,
    LabelMap,
    ModelConfig,
    OptimizerConfig,
    RasterImage,
    init_toy_model,
    substream,
    train_toy,
)
from sarmoe.training import speckle_domain_dataset

TOY_ARCH = dict(
    num_experts=4,
    top_k=1,
    channels=32,
    hidden=64,
    patch_size=8,
    num_classes=2,
    num_blocks=2,
)


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


def make_raster(values) -> RasterImage:
    return RasterImage.from_array(np.asarray(values, dtype=np.float64))


def make_labels(values, num_classes, ignore_value=None) -> LabelMap:
    arr = np.asarray(values, dtype=np.int64)
    return LabelMap(
        width=arr.shape[1],
        height=arr.shape[0],
        labels=arr,
        num_classes=num_classes,
        ignore_value=ignore_value,
    )


@lru_cache(maxsize=None)
def trained_two_domain(seed: int, lambda_bc: float = 0.005, mask=(True, True, True)):
    """Train the standard two-domain toy task once per configuration.

    Returns (model, report, train_items, eval_items, elapsed_seconds); the
    elapsed time is the real compute cost even when served from the cache.
    """
    config = ExperimentConfig(
        model=ModelConfig(**TOY_ARCH, lambda_bc=lambda_bc),
        optimizer=OptimizerConfig(epochs=30, batch_size=1, seed=seed),
        descriptor_mask=mask,
    )
    train_items = tuple(speckle_domain_dataset(seed, 20, width=64, height=64))
    eval_items = tuple(speckle_domain_dataset(seed + 10_000, 4, width=64, height=64))
    model = init_toy_model(substream(seed, "init"), **TOY_ARCH, lambda_bc=lambda_bc)
    started = time.perf_counter()
    report = train_toy(model, train_items, config)
    elapsed = time.perf_counter() - started
    return model, report, train_items, eval_items, elapsed


def majority_baseline_miou(train_items, eval_items, num_classes=2) -> float:
    """Oracle: mIoU of always predicting the training corpus' majority class."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for item in train_items:
        counts += np.bincount(item[1].labels.ravel(), minlength=num_classes)
    majority = int(counts.argmax())
    inter = np.zeros(num_classes, dtype=np.int64)
    union = np.zeros(num_classes, dtype=np.int64)
    for item in eval_items:
        truth = item[1].labels
        pred = np.full_like(truth, majority)
        for c in range(num_classes):
            t = truth == c
            p = pred == c
            inter[c] += np.logical_and(t, p).sum()
            union[c] += np.logical_or(t, p).sum()
    defined = union > 0
    return float((inter[defined] / union[defined]).mean())
