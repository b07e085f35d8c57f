"""Central-difference verification of the hand-written backward pass.

The objective is <G, moe(z)> plus the balance penalty; every router,
expert, and input gradient is compared against central finite differences
at a routing point where the selection set is locally stable.
"""
import numpy as np

from sarmoe import (
    ExpertFfn,
    MoeLayer,
    RouterParams,
    TokenBatch,
    load_balance_loss,
    moe_backward,
    moe_forward,
)

rng = np.random.default_rng(3)
n, k, channels, hidden, tokens = 3, 2, 5, 7, 4

layer = MoeLayer(
    router=RouterParams(
        weight=rng.normal(0, 0.5, size=(n, channels + 3)),
        bias=rng.normal(0, 0.5, size=n),
    ),
    experts=[
        ExpertFfn(
            w1=rng.normal(0, 0.5, size=(hidden, channels)),
            b1=rng.normal(0, 0.1, size=hidden),
            w2=rng.normal(0, 0.5, size=(channels, hidden)),
            b2=rng.normal(0, 0.1, size=channels),
        )
        for _ in range(n)
    ],
    top_k=k,
    lambda_bc=0.005,
)
batch = TokenBatch(
    embeddings=rng.normal(size=(1, tokens, channels)),
    descriptors=rng.uniform(0, 1, size=(1, 3)),
)
upstream = rng.normal(size=(1, tokens, channels))


def objective():
    out, record = moe_forward(layer, batch)
    return float((upstream * out.embeddings).sum()) + load_balance_loss(record, layer)


def numeric(array, step=1e-5):
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        ix = it.multi_index
        keep = array[ix]
        array[ix] = keep + step
        up = objective()
        array[ix] = keep - step
        down = objective()
        array[ix] = keep
        grad[ix] = (up - down) / (2 * step)
    return grad


grads = moe_backward(layer, batch, upstream)
checks = [
    ("router.weight", layer.router.weight, grads.router_weight),
    ("router.bias", layer.router.bias, grads.router_bias),
    ("embeddings", batch.embeddings, grads.embeddings),
]
for e in range(n):
    for name in ("w1", "b1", "w2", "b2"):
        checks.append(
            (f"expert{e}.{name}", getattr(layer.experts[e], name), getattr(grads.experts[e], name))
        )

worst = 0.0
for name, array, analytic in checks:
    fd = numeric(array)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-8)
    rel = float((np.abs(analytic - fd) / denom).max())
    worst = max(worst, rel)
    print(f"{name:16s} worst relative error {rel:.2e}")
print(f"\noverall worst: {worst:.2e}  (tolerance 1e-4)")
