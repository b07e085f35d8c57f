"""Top-k routing, gate renormalization, and the load-balancing penalty.

Builds a small expert layer by hand, walks one token through scoring and
selection, and shows the balance-loss algebra at its two extremes.
"""
import numpy as np

from sarmoe import (
    ExpertFfn,
    MoeLayer,
    RouterParams,
    TokenBatch,
    load_balance_loss,
    moe_forward,
    route,
)

rng = np.random.default_rng(0)
n, k, channels, hidden = 4, 2, 6, 8

layer = MoeLayer(
    router=RouterParams(
        weight=rng.normal(0, 0.8, size=(n, channels + 3)),
        bias=rng.normal(0, 0.3, size=n),
    ),
    experts=[
        ExpertFfn(
            w1=rng.normal(0, 0.4, size=(hidden, channels)),
            b1=np.zeros(hidden),
            w2=rng.normal(0, 0.4, size=(channels, hidden)),
            b2=np.zeros(channels),
        )
        for _ in range(n)
    ],
    top_k=k,
)

batch = TokenBatch(
    embeddings=rng.normal(size=(1, 5, channels)),
    descriptors=rng.uniform(0, 1, size=(1, 3)),
)
record = route(layer, batch)
print("token 0 scores:       ", record.scores[0, 0].round(3))
print("token 0 selected:     ", record.selected[0, 0])
print("token 0 gates:        ", record.gates[0, 0].round(3), "(sum", record.gates[0, 0].sum(), ")")
print("assignment fractions: ", record.fractions.round(3))
print("mean probabilities:   ", record.mean_probs.round(3))
print("balance loss:         ", load_balance_loss(record, layer))

# the two extremes of lambda * n * sum(f_k p_k) with lambda=0.005, n=6
uniform = 0.005 * 6 * 6 * (1 / 6) ** 2
collapsed = 0.005 * 6 * 1.0
print("\nbalance at perfect uniformity:", uniform, "(the lambda itself)")
print("balance at full collapse:     ", collapsed)

# with k = n the sparse aggregation reduces to the dense softmax mixture
full = MoeLayer(router=layer.router, experts=layer.experts, top_k=n)
out, rec = moe_forward(full, batch)
z = batch.embeddings.reshape(-1, channels)
dense = np.zeros_like(z)
for e, expert in enumerate(full.experts):
    dense += rec.scores.reshape(-1, n)[:, e : e + 1] * expert.apply(z)
gap = np.abs(out.embeddings - dense.reshape(out.embeddings.shape)).max()
print("\nk=n sparse vs dense mixture, max |difference|:", float(gap))
