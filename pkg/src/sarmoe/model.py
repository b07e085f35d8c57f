"""Toy token pipeline around the sparse MoE blocks.

A linear patch embedding stands in for the backbone stem, the attention
sublayer of each block is the identity, and a linear per-token head stands
in for the decoder; the mechanism under test is the MoE itself. Block l
computes ``x <- x + moe_l(x)`` with the per-image normalized descriptor
vector riding along unchanged.

Checkpoints use the SMK1 container: ``SMK1`` magic, eight little-endian
uint32 header words (version, experts, top_k, channels, hidden, patch,
classes, blocks), then every parameter as little-endian float64 in
declaration order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .descriptors import (
    DescriptorConfig,
    compute_descriptors,
    mask_descriptors,
    normalize_descriptors,
)
from .errors import ContractViolationError, RasterFormatError
from .moe import ExpertFfn, MoeLayer, MoeGradients, RouterParams, RoutingRecord, TokenBatch, moe_backward, moe_forward
from .raster import LabelMap, RasterImage, log_transform

_MAGIC = b"SMK1"
_VERSION = 1

# Router initialization scales. Descriptor columns start much louder than
# embedding columns and the bias seeds a single-expert preference, so
# routing begins physics-driven and collapsed; the balance loss then has
# something real to undo and domain blocs stay coherent while they move.
ROUTER_EMBED_SCALE = 0.002
ROUTER_DESC_SCALE = 0.5
ROUTER_BIAS_SCALE = 0.5
EXPERT_CLONE_NOISE = 1e-2
PATCH_EMBED_SCALE = None  # None = 1/sqrt(patch pixels)


@dataclass
class ToyModel:
    patch_size: int
    num_classes: int
    patch_embed_w: np.ndarray  # (channels, patch_size**2)
    patch_embed_b: np.ndarray  # (channels,)
    blocks: list[MoeLayer]
    head_w: np.ndarray  # (num_classes, channels)
    head_b: np.ndarray  # (num_classes,)

    @property
    def channels(self) -> int:
        return self.patch_embed_w.shape[0]

    @property
    def hidden(self) -> int:
        return self.blocks[0].experts[0].w1.shape[0]


def init_toy_model(
    rng: np.random.Generator,
    *,
    channels: int,
    hidden: int,
    num_experts: int,
    top_k: int,
    num_blocks: int,
    patch_size: int,
    num_classes: int,
    lambda_bc: float = 0.005,
) -> ToyModel:
    """Fresh model; experts of a block are perturbed clones of one base FFN."""
    p2 = patch_size * patch_size
    patch_scale = PATCH_EMBED_SCALE if PATCH_EMBED_SCALE is not None else 1.0 / np.sqrt(p2)
    patch_w = rng.normal(0.0, patch_scale, size=(channels, p2))
    patch_b = np.zeros(channels)
    blocks = []
    for _ in range(num_blocks):
        base_w1 = rng.normal(0.0, 1.0 / np.sqrt(channels), size=(hidden, channels))
        base_w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(channels, hidden))
        experts = [
            ExpertFfn(
                w1=base_w1 + rng.normal(0.0, EXPERT_CLONE_NOISE, size=base_w1.shape),
                b1=rng.normal(0.0, EXPERT_CLONE_NOISE, size=hidden),
                w2=base_w2 + rng.normal(0.0, EXPERT_CLONE_NOISE, size=base_w2.shape),
                b2=rng.normal(0.0, EXPERT_CLONE_NOISE, size=channels),
            )
            for _ in range(num_experts)
        ]
        weight = np.concatenate(
            [
                rng.normal(0.0, ROUTER_EMBED_SCALE, size=(num_experts, channels)),
                rng.normal(0.0, ROUTER_DESC_SCALE, size=(num_experts, 3)),
            ],
            axis=1,
        )
        bias = rng.normal(0.0, ROUTER_BIAS_SCALE, size=num_experts)
        blocks.append(
            MoeLayer(
                router=RouterParams(weight=weight, bias=bias),
                experts=experts,
                top_k=top_k,
                lambda_bc=lambda_bc,
            )
        )
    head_w = rng.normal(0.0, 1.0 / np.sqrt(channels), size=(num_classes, channels))
    head_b = np.zeros(num_classes)
    return ToyModel(
        patch_size=patch_size,
        num_classes=num_classes,
        patch_embed_w=patch_w,
        patch_embed_b=patch_b,
        blocks=blocks,
        head_w=head_w,
        head_b=head_b,
    )


def model_parameters(model: ToyModel) -> list[np.ndarray]:
    """All trainable arrays in declaration (= serialization) order."""
    params = [model.patch_embed_w, model.patch_embed_b]
    for block in model.blocks:
        params.extend([block.router.weight, block.router.bias])
        for expert in block.experts:
            params.extend([expert.w1, expert.b1, expert.w2, expert.b2])
    params.extend([model.head_w, model.head_b])
    return params


def patchify(values: np.ndarray, patch_size: int) -> np.ndarray:
    """(H, W) grid -> (tokens, patch_size**2) rows, row-major patch order."""
    h, w = values.shape
    p = patch_size
    if h % p or w % p:
        raise ContractViolationError(f"{h}x{w} raster not divisible by patch size {p}")
    return (
        values.reshape(h // p, p, w // p, p).transpose(0, 2, 1, 3).reshape(-1, p * p)
    )


def patch_majority_labels(labels: LabelMap, patch_size: int) -> np.ndarray:
    """Majority class per patch (ties to the lowest id); -1 if fully ignored."""
    tiles = patchify(labels.labels.astype(np.float64), patch_size).astype(np.int64)
    out = np.empty(tiles.shape[0], dtype=np.int64)
    for i, tile in enumerate(tiles):
        if labels.ignore_value is not None:
            tile = tile[tile != labels.ignore_value]
        if tile.size == 0:
            out[i] = -1
            continue
        out[i] = np.argmax(np.bincount(tile, minlength=labels.num_classes))
    return out


@dataclass
class ForwardPass:
    """Intermediate state of one forward run, kept for the backward pass."""

    tokens: np.ndarray  # (B, N, P*P) raw patch rows
    block_inputs: list[TokenBatch]
    records: list[RoutingRecord]
    final: TokenBatch
    logits: np.ndarray  # (B, N, K)


def model_forward(model: ToyModel, tokens: np.ndarray, descriptors: np.ndarray) -> ForwardPass:
    """Embed, run the residual MoE blocks, and score per-token class logits."""
    z = tokens @ model.patch_embed_w.T + model.patch_embed_b
    batch = TokenBatch(embeddings=z, descriptors=descriptors)
    block_inputs = []
    records = []
    for block in model.blocks:
        block_inputs.append(batch)
        moe_out, record = moe_forward(block, batch)
        records.append(record)
        batch = TokenBatch(
            embeddings=batch.embeddings + moe_out.embeddings, descriptors=batch.descriptors
        )
    logits = batch.embeddings @ model.head_w.T + model.head_b
    return ForwardPass(
        tokens=tokens, block_inputs=block_inputs, records=records, final=batch, logits=logits
    )


def model_backward(
    model: ToyModel, fwd: ForwardPass, d_logits: np.ndarray, include_balance: bool = True
) -> list[np.ndarray]:
    """Gradients for every parameter, aligned with ``model_parameters``."""
    b, n, _ = fwd.logits.shape
    flat_final = fwd.final.embeddings.reshape(b * n, -1)
    flat_dlogits = d_logits.reshape(b * n, -1)
    d_head_w = flat_dlogits.T @ flat_final
    d_head_b = flat_dlogits.sum(axis=0)
    d_x = (flat_dlogits @ model.head_w).reshape(fwd.final.embeddings.shape)

    block_grads: list[MoeGradients] = [None] * len(model.blocks)  # type: ignore[list-item]
    for idx in range(len(model.blocks) - 1, -1, -1):
        grads = moe_backward(
            model.blocks[idx], fwd.block_inputs[idx], d_x, include_balance=include_balance
        )
        block_grads[idx] = grads
        d_x = d_x + grads.embeddings  # residual: dx_in = dx_out + d(moe)/dx

    flat_dz = d_x.reshape(b * n, -1)
    flat_tokens = fwd.tokens.reshape(b * n, -1)
    out = [flat_dz.T @ flat_tokens, flat_dz.sum(axis=0)]
    for grads in block_grads:
        out.extend([grads.router_weight, grads.router_bias])
        for eg in grads.experts:
            out.extend([eg.w1, eg.b1, eg.w2, eg.b2])
    out.extend([d_head_w, d_head_b])
    return out


def image_descriptor(
    img: RasterImage,
    cfg: DescriptorConfig = DescriptorConfig(),
    enabled: tuple[bool, bool, bool] = (True, True, True),
) -> np.ndarray:
    """Normalized (optionally masked) descriptor vector for the router."""
    return normalize_descriptors(mask_descriptors(compute_descriptors(img, cfg), enabled), cfg)


def infer_image(
    model: ToyModel,
    img: RasterImage,
    cfg: DescriptorConfig = DescriptorConfig(),
    enabled: tuple[bool, bool, bool] = (True, True, True),
) -> tuple[LabelMap, list[RoutingRecord]]:
    """Predict a per-pixel label map (each token labels its whole patch)."""
    x = log_transform(img)
    tokens = patchify(x.data, model.patch_size)[np.newaxis, ...]
    desc = image_descriptor(img, cfg, enabled)[np.newaxis, :]
    fwd = model_forward(model, tokens, desc)
    p = model.patch_size
    rows, cols = img.height // p, img.width // p
    per_token = fwd.logits[0].argmax(axis=-1).reshape(rows, cols)
    pixels = np.repeat(np.repeat(per_token, p, axis=0), p, axis=1)
    labels = LabelMap(
        width=img.width, height=img.height, labels=pixels, num_classes=model.num_classes
    )
    return labels, fwd.records


def save_checkpoint(model: ToyModel, path) -> None:
    """Serialize to the SMK1 container (header + float64 blocks)."""
    n = model.blocks[0].num_experts
    k = model.blocks[0].top_k
    for block in model.blocks:
        if block.num_experts != n or block.top_k != k:
            raise ContractViolationError("SMK1 requires uniform expert count and top_k")
    header = _MAGIC + struct.pack(
        "<8I",
        _VERSION,
        n,
        k,
        model.channels,
        model.hidden,
        model.patch_size,
        model.num_classes,
        len(model.blocks),
    )
    payload = b"".join(p.astype("<f8").tobytes() for p in model_parameters(model))
    Path(path).write_bytes(header + payload)


def load_checkpoint(path, lambda_bc: float = 0.005) -> ToyModel:
    """Rebuild a model from an SMK1 file."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 + 32 or blob[:4] != _MAGIC:
        raise RasterFormatError(f"{path}: not an SMK1 checkpoint")
    version, n, k, channels, hidden, patch, classes, blocks = struct.unpack(
        "<8I", blob[4:36]
    )
    if version != _VERSION:
        raise RasterFormatError(f"{path}: unsupported SMK1 version {version}")
    if min(n, k, channels, hidden, patch, classes, blocks) < 1 or k > n:
        raise RasterFormatError(f"{path}: malformed SMK1 header dimensions")
    model = init_toy_model(
        np.random.default_rng(0),
        channels=channels,
        hidden=hidden,
        num_experts=n,
        top_k=k,
        num_blocks=blocks,
        patch_size=patch,
        num_classes=classes,
        lambda_bc=lambda_bc,
    )
    params = model_parameters(model)
    expected = sum(p.size for p in params) * 8
    body = blob[36:]
    if len(body) != expected:
        raise RasterFormatError(
            f"{path}: payload holds {len(body)} bytes, header implies {expected}"
        )
    offset = 0
    for p in params:
        nbytes = p.size * 8
        p[...] = np.frombuffer(body[offset : offset + nbytes], dtype="<f8").reshape(p.shape)
        offset += nbytes
    return model
