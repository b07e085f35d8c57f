"""Physics-guided sparse mixture-of-experts layer.

Per token the router scores n experts from the concatenation of the token
embedding with the (tiled) 3-vector of physical descriptors, keeps the
top-k, renormalizes the kept scores into gates, and sums the gated expert
outputs. A load-balancing penalty discourages expert collapse:

    balance = lambda_bc * n * sum_k f_k * p_k

with f_k the fraction of expert assignments landing on expert k and p_k the
mean routing probability of expert k over the batch.

The backward pass is written out analytically (no autograd). Conventions:
the top-k selection set and the assignment fractions f are treated as
locally constant; gradients reach the router only through the gate
renormalization of the selected scores and through p.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import ContractViolationError, InvalidInputError, NumericalFailureError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact (erf-based) GELU."""
    return 0.5 * x * (1.0 + special.erf(x * _INV_SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """d/dx of exact GELU: Phi(x) + x * phi(x)."""
    return 0.5 * (1.0 + special.erf(x * _INV_SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


@dataclass
class TokenBatch:
    """Token embeddings plus one descriptor 3-vector per batch item."""

    embeddings: np.ndarray  # (B, N, C)
    descriptors: np.ndarray  # (B, 3)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings)
        self.descriptors = np.asarray(self.descriptors)
        if self.embeddings.ndim != 3:
            raise ContractViolationError(
                f"embeddings must be (batch, tokens, channels), got {self.embeddings.shape}"
            )
        if self.descriptors.shape != (self.embeddings.shape[0], 3):
            raise ContractViolationError(
                f"descriptors must be ({self.embeddings.shape[0]}, 3), got {self.descriptors.shape}"
            )
        if not np.isfinite(self.embeddings).all() or not np.isfinite(self.descriptors).all():
            raise InvalidInputError("token batch contains non-finite values")

    @property
    def batch(self) -> int:
        return self.embeddings.shape[0]

    @property
    def tokens_per_item(self) -> int:
        return self.embeddings.shape[1]

    @property
    def channels(self) -> int:
        return self.embeddings.shape[2]


@dataclass
class RouterParams:
    """Affine router: scores = weight @ [embedding ; descriptors] + bias."""

    weight: np.ndarray  # (n, channels + 3)
    bias: np.ndarray  # (n,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight)
        self.bias = np.asarray(self.bias)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ContractViolationError(
                f"router shapes inconsistent: weight {self.weight.shape}, bias {self.bias.shape}"
            )

    @property
    def num_experts(self) -> int:
        return self.weight.shape[0]


@dataclass
class ExpertFfn:
    """Two-layer GELU feed-forward expert."""

    w1: np.ndarray  # (hidden, channels)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (channels, hidden)
    b2: np.ndarray  # (channels,)

    def __post_init__(self):
        self.w1 = np.asarray(self.w1)
        self.b1 = np.asarray(self.b1)
        self.w2 = np.asarray(self.w2)
        self.b2 = np.asarray(self.b2)
        h, c = self.w1.shape
        if h < 1:
            raise ContractViolationError("expert hidden dim must be >= 1")
        if self.b1.shape != (h,) or self.w2.shape != (c, h) or self.b2.shape != (c,):
            raise ContractViolationError("expert parameter shapes inconsistent")

    def apply(self, z: np.ndarray) -> np.ndarray:
        """Run the FFN on a (tokens, channels) stack."""
        return gelu(z @ self.w1.T + self.b1) @ self.w2.T + self.b2


@dataclass
class MoeLayer:
    router: RouterParams
    experts: list[ExpertFfn]
    top_k: int
    lambda_bc: float = 0.005

    def __post_init__(self):
        n = len(self.experts)
        if n < 1:
            raise ContractViolationError("need at least one expert")
        if not (1 <= self.top_k <= n):
            raise ContractViolationError(f"top_k must be in [1, {n}], got {self.top_k}")
        if self.lambda_bc < 0:
            raise ContractViolationError(f"lambda_bc must be >= 0, got {self.lambda_bc}")
        if self.router.num_experts != n:
            raise ContractViolationError(
                f"router scores {self.router.num_experts} experts but layer has {n}"
            )

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def channels(self) -> int:
        return self.router.weight.shape[1] - 3


@dataclass
class RoutingRecord:
    """Everything the router decided for one batch."""

    scores: np.ndarray  # (B, N, n) softmax probabilities
    selected: np.ndarray  # (B, N, k) expert indices, best first
    gates: np.ndarray  # (B, N, k) renormalized weights of the selected experts
    fractions: np.ndarray  # (n,) share of assignments per expert; sums to 1
    mean_probs: np.ndarray  # (n,) mean routing probability per expert

    def __post_init__(self):
        tol = 1e-6
        if np.abs(self.scores.sum(axis=-1) - 1.0).max() > tol or (self.scores < 0).any():
            raise ContractViolationError("scores are not probability vectors")
        if np.abs(self.gates.sum(axis=-1) - 1.0).max() > tol:
            raise ContractViolationError("gates do not sum to 1 per token")
        if abs(self.fractions.sum() - 1.0) > tol or abs(self.mean_probs.sum() - 1.0) > tol:
            raise ContractViolationError("fractions/mean_probs do not sum to 1")

    @property
    def num_tokens(self) -> int:
        return self.scores.shape[0] * self.scores.shape[1]


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _router_inputs(layer: MoeLayer, batch: TokenBatch) -> np.ndarray:
    if batch.channels != layer.channels:
        raise ContractViolationError(
            f"batch has {batch.channels} channels, router expects {layer.channels}"
        )
    tiled = np.broadcast_to(
        batch.descriptors[:, np.newaxis, :], (batch.batch, batch.tokens_per_item, 3)
    )
    return np.concatenate([batch.embeddings, tiled], axis=-1)


def route(layer: MoeLayer, batch: TokenBatch) -> RoutingRecord:
    """Score, select top-k (ties break to the lower index), and gate."""
    u = _router_inputs(layer, batch)
    with np.errstate(over="ignore", invalid="ignore"):
        logits = u @ layer.router.weight.T + layer.router.bias
    finite = np.isfinite(logits)
    if not finite.all():
        b, t = np.argwhere(~finite.all(axis=-1))[0]
        raise NumericalFailureError(f"non-finite router logits at item {b}, token {t}")
    pi = _softmax(logits)
    k = layer.top_k
    # stable sort on -pi keeps ascending expert index among exact ties
    selected = np.argsort(-pi, axis=-1, kind="stable")[..., :k]
    picked = np.take_along_axis(pi, selected, axis=-1)
    gates = picked / picked.sum(axis=-1, keepdims=True)
    n = layer.num_experts
    counts = np.bincount(selected.ravel(), minlength=n)
    fractions = counts / selected.size
    mean_probs = pi.reshape(-1, n).mean(axis=0)
    return RoutingRecord(
        scores=pi, selected=selected, gates=gates, fractions=fractions, mean_probs=mean_probs
    )


def moe_forward(layer: MoeLayer, batch: TokenBatch) -> tuple[TokenBatch, RoutingRecord]:
    """Sparse aggregation: sum of gated expert outputs per token."""
    record = route(layer, batch)
    b, t, c = batch.embeddings.shape
    z = batch.embeddings.reshape(-1, c)
    sel = record.selected.reshape(-1, layer.top_k)
    gat = record.gates.reshape(-1, layer.top_k)
    out = np.zeros_like(z)
    for e, expert in enumerate(layer.experts):
        rows, slots = np.nonzero(sel == e)
        if rows.size == 0:
            continue
        out[rows] += gat[rows, slots][:, np.newaxis] * expert.apply(z[rows])
    return (
        TokenBatch(embeddings=out.reshape(b, t, c), descriptors=batch.descriptors),
        record,
    )


def load_balance_loss(record: RoutingRecord, layer: MoeLayer) -> float:
    """lambda_bc * n * sum_k f_k p_k."""
    return float(
        layer.lambda_bc * layer.num_experts * np.dot(record.fractions, record.mean_probs)
    )


def total_loss(seg_loss: float, balance_losses: list[float]) -> float:
    """Segmentation term plus one balance term per MoE block."""
    return float(seg_loss) + float(sum(balance_losses))


@dataclass
class ExpertGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class MoeGradients:
    router_weight: np.ndarray
    router_bias: np.ndarray
    experts: list[ExpertGrads]
    embeddings: np.ndarray  # gradient w.r.t. the input embeddings, same shape


def moe_backward(
    layer: MoeLayer, batch: TokenBatch, upstream_grad: np.ndarray, include_balance: bool = True
) -> MoeGradients:
    """Analytic gradients of <upstream, output> (+ the balance loss).

    Recomputes the forward internally. The selection set and the assignment
    fractions f are held constant; p is differentiated as the mean softmax.
    """
    upstream = np.asarray(upstream_grad)
    if upstream.shape != batch.embeddings.shape:
        raise ContractViolationError(
            f"upstream grad shape {upstream.shape} != embeddings {batch.embeddings.shape}"
        )
    record = route(layer, batch)
    n, k = layer.num_experts, layer.top_k
    bsz, tok, c = batch.embeddings.shape
    z = batch.embeddings.reshape(-1, c)
    g_up = upstream.reshape(-1, c)
    sel = record.selected.reshape(-1, k)
    gat = record.gates.reshape(-1, k)
    pi = record.scores.reshape(-1, n)
    num_tokens = z.shape[0]

    d_z = np.zeros_like(z)
    d_gates = np.zeros_like(gat)
    expert_grads = []
    for e, expert in enumerate(layer.experts):
        rows, slots = np.nonzero(sel == e)
        if rows.size == 0:
            expert_grads.append(
                ExpertGrads(
                    w1=np.zeros_like(expert.w1),
                    b1=np.zeros_like(expert.b1),
                    w2=np.zeros_like(expert.w2),
                    b2=np.zeros_like(expert.b2),
                )
            )
            continue
        z_e = z[rows]
        h1 = z_e @ expert.w1.T + expert.b1
        a1 = gelu(h1)
        out_e = a1 @ expert.w2.T + expert.b2
        w = gat[rows, slots]
        d_out = w[:, np.newaxis] * g_up[rows]
        d_a1 = d_out @ expert.w2
        d_h1 = d_a1 * gelu_grad(h1)
        expert_grads.append(
            ExpertGrads(
                w1=d_h1.T @ z_e,
                b1=d_h1.sum(axis=0),
                w2=d_out.T @ a1,
                b2=d_out.sum(axis=0),
            )
        )
        d_z[rows] += d_h1 @ expert.w1
        d_gates[rows, slots] = (g_up[rows] * out_e).sum(axis=1)

    # gate renormalization: dL/dpi_i = (dL/dg_i - <dL/dg, g>) / denom, i selected
    denom = np.take_along_axis(pi, sel, axis=-1).sum(axis=-1, keepdims=True)
    d_pi_sel = (d_gates - (d_gates * gat).sum(axis=-1, keepdims=True)) / denom
    d_pi = np.zeros_like(pi)
    np.put_along_axis(d_pi, sel, d_pi_sel, axis=-1)

    if include_balance and layer.lambda_bc > 0:
        d_pi += layer.lambda_bc * n * record.fractions / num_tokens

    d_logits = pi * (d_pi - (d_pi * pi).sum(axis=-1, keepdims=True))
    u = _router_inputs(layer, batch).reshape(-1, c + 3)
    d_router_w = d_logits.T @ u
    d_router_b = d_logits.sum(axis=0)
    d_z += (d_logits @ layer.router.weight)[:, :c]

    return MoeGradients(
        router_weight=d_router_w,
        router_bias=d_router_b,
        experts=expert_grads,
        embeddings=d_z.reshape(bsz, tok, c),
    )
