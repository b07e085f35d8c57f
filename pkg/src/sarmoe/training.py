"""Toy training loop: AdamW over the hand-written gradients.

Supervision is per token: each token's class logits are trained against the
majority label of its patch with softmax cross-entropy, and every MoE block
adds its balance penalty to the objective. Everything is deterministic
given the seed; arithmetic is float64 unless the 32-bit mode is requested.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import ExperimentConfig
from .errors import ContractViolationError, NumericalFailureError
from .model import (
    ToyModel,
    image_descriptor,
    model_backward,
    model_forward,
    model_parameters,
    patch_majority_labels,
    patchify,
)
from .moe import load_balance_loss, total_loss
from .raster import BasePattern, LabelMap, RasterImage, SpeckleSpec, generate_labeled_scene, log_transform
from .seeding import substream


class AdamW:
    """Decoupled-weight-decay Adam updating arrays in place."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, weight_decay=0.01, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads) -> None:
        if len(grads) != len(self.params):
            raise ContractViolationError(
                f"got {len(grads)} gradients for {len(self.params)} parameters"
            )
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= self.lr * ((m / bc1) / (np.sqrt(v / bc2) + self.eps) + self.weight_decay * p)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean CE over tokens with label >= 0; returns (loss, dloss/dlogits)."""
    flat = logits.reshape(-1, logits.shape[-1])
    target = labels.reshape(-1)
    valid = target >= 0
    count = int(valid.sum())
    d = np.zeros_like(flat)
    if count == 0:
        return 0.0, d.reshape(logits.shape)
    shifted = flat - flat.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    rows = np.nonzero(valid)[0]
    loss = -logp[rows, target[rows]].mean()
    d[rows] = np.exp(logp[rows])
    d[rows, target[rows]] -= 1.0
    d /= count
    return float(loss), d.reshape(logits.shape)


@dataclass
class StepRecord:
    step: int
    seg_loss: float
    bc_loss: float
    total: float


@dataclass
class TrainingReport:
    steps: list[StepRecord]
    step_fractions: list[list[list[float]]]  # per step, per layer, per expert
    activation_counts: list[list[int]]  # per layer, per expert, whole run
    steps_per_epoch: int
    epochs: int

    def to_dict(self) -> dict:
        return {
            "steps": [
                {"step": s.step, "seg_loss": s.seg_loss, "bc_loss": s.bc_loss, "total": s.total}
                for s in self.steps
            ],
            "step_fractions": self.step_fractions,
            "activation_counts": self.activation_counts,
            "steps_per_epoch": self.steps_per_epoch,
            "epochs": self.epochs,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def final_epoch_max_fraction(self) -> float:
        """Mean over the final epoch's steps of the per-layer max assignment share."""
        last = self.step_fractions[-self.steps_per_epoch :]
        per_step = [np.mean([max(layer) for layer in step]) for step in last]
        return float(np.mean(per_step))


def _cast_model_(model: ToyModel, dtype) -> None:
    model.patch_embed_w = model.patch_embed_w.astype(dtype)
    model.patch_embed_b = model.patch_embed_b.astype(dtype)
    for block in model.blocks:
        block.router.weight = block.router.weight.astype(dtype)
        block.router.bias = block.router.bias.astype(dtype)
        for e in block.experts:
            e.w1, e.b1 = e.w1.astype(dtype), e.b1.astype(dtype)
            e.w2, e.b2 = e.w2.astype(dtype), e.b2.astype(dtype)
    model.head_w = model.head_w.astype(dtype)
    model.head_b = model.head_b.astype(dtype)


def train_toy(model: ToyModel, dataset: Sequence, config: ExperimentConfig) -> TrainingReport:
    """Run the full loop over (image, labels) pairs, mutating the model.

    Dataset items may carry extra trailing fields (e.g. a domain tag); only
    the first two are used here.
    """
    if not dataset:
        raise ContractViolationError("dataset is empty")
    opt_cfg = config.optimizer
    dtype = np.float32 if opt_cfg.float32 else np.float64
    if opt_cfg.float32:
        _cast_model_(model, dtype)

    tokens, descriptors, labels = [], [], []
    for item in dataset:
        img: RasterImage = item[0]
        lab: LabelMap = item[1]
        if img.width % model.patch_size or img.height % model.patch_size:
            raise ContractViolationError(
                f"{img.height}x{img.width} image not divisible by patch {model.patch_size}"
            )
        tokens.append(patchify(log_transform(img).data, model.patch_size).astype(dtype))
        descriptors.append(
            image_descriptor(img, config.descriptors, config.descriptor_mask).astype(dtype)
        )
        labels.append(patch_majority_labels(lab, model.patch_size))
    tokens = np.stack(tokens)
    descriptors = np.stack(descriptors)
    labels = np.stack(labels)

    params = model_parameters(model)
    opt = AdamW(
        params,
        lr=opt_cfg.learning_rate,
        beta1=opt_cfg.beta1,
        beta2=opt_cfg.beta2,
        weight_decay=opt_cfg.weight_decay,
    )
    shuffle_rng = substream(opt_cfg.seed, "shuffle")
    n_layers = len(model.blocks)
    n_experts = model.blocks[0].num_experts
    counts = np.zeros((n_layers, n_experts), dtype=np.int64)
    steps: list[StepRecord] = []
    fractions: list[list[list[float]]] = []
    steps_per_epoch = int(np.ceil(len(dataset) / opt_cfg.batch_size))

    def batch_grads(idx):
        """One whole-batch forward/backward; balance stats pool over the batch."""
        fwd = model_forward(model, tokens[idx], descriptors[idx])
        seg_loss, d_logits = softmax_cross_entropy(fwd.logits, labels[idx])
        balances = [load_balance_loss(r, blk) for r, blk in zip(fwd.records, model.blocks)]
        grads = model_backward(model, fwd, d_logits)
        step_fracs = [r.fractions for r in fwd.records]
        sel_counts = [
            np.bincount(r.selected.ravel(), minlength=n_experts) for r in fwd.records
        ]
        return seg_loss, balances, grads, step_fracs, sel_counts

    def sharded_grads(idx, workers):
        """Per-image shards reduced in index order; balance stats are per shard.

        The reduction order is fixed, so any worker count (including 1)
        produces bit-identical results.
        """
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda i: batch_grads(np.array([i])), idx))
        share = 1.0 / len(parts)
        seg_loss = float(sum(p[0] for p in parts) * share)
        balances = [
            float(sum(p[1][layer_i] for p in parts) * share)
            for layer_i in range(n_layers)
        ]
        grads = [np.zeros_like(g) for g in parts[0][2]]
        for p in parts:
            for g, fresh in zip(grads, p[2]):
                g += fresh
        for g in grads:
            g *= share
        step_fracs = [
            sum(p[3][layer_i] for p in parts) * share for layer_i in range(n_layers)
        ]
        sel_counts = [
            sum(p[4][layer_i] for p in parts) for layer_i in range(n_layers)
        ]
        return seg_loss, balances, grads, step_fracs, sel_counts

    step = 0
    for _ in range(opt_cfg.epochs):
        order = shuffle_rng.permutation(len(dataset))
        for start in range(0, len(dataset), opt_cfg.batch_size):
            idx = order[start : start + opt_cfg.batch_size]
            if opt_cfg.grad_workers > 1 and len(idx) > 1:
                seg_loss, balances, grads, step_fracs, sel_counts = sharded_grads(
                    idx, opt_cfg.grad_workers
                )
            else:
                seg_loss, balances, grads, step_fracs, sel_counts = batch_grads(idx)
            loss = total_loss(seg_loss, balances)
            if not np.isfinite(loss):
                raise NumericalFailureError(f"non-finite loss at step {step}")
            opt.step(grads)
            for layer_i in range(n_layers):
                counts[layer_i] += sel_counts[layer_i]
            fractions.append([np.asarray(f).tolist() for f in step_fracs])
            steps.append(
                StepRecord(
                    step=step,
                    seg_loss=seg_loss,
                    bc_loss=float(sum(balances)),
                    total=loss,
                )
            )
            step += 1

    return TrainingReport(
        steps=steps,
        step_fractions=fractions,
        activation_counts=counts.tolist(),
        steps_per_epoch=steps_per_epoch,
        epochs=opt_cfg.epochs,
    )


def speckle_domain_dataset(
    seed: int,
    per_domain: int,
    width: int = 64,
    height: int = 64,
    looks: Sequence[float] = (1.0, 16.0),
    pattern: BasePattern = BasePattern.TWO_REGION,
) -> list[tuple[RasterImage, LabelMap, str]]:
    """Synthetic 2-class corpus with one domain per speckle-strength level.

    Returns (image, labels, domain_tag) triples; tags are "L<looks>".
    """
    rng = substream(seed, "data")
    items = []
    for looks_value in looks:
        tag = f"L{looks_value:g}"
        for _ in range(per_domain):
            spec = SpeckleSpec(
                looks=looks_value, base_pattern=pattern, seed=int(rng.integers(2**63))
            )
            img, lab = generate_labeled_scene(spec, width, height)
            items.append((img, lab, tag))
    return items
