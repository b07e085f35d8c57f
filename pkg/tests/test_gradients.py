"""Finite-difference verification of the hand-written backward passes."""
import numpy as np
import pytest

from sarmoe import (
    ExpertFfn,
    MoeLayer,
    RouterParams,
    TokenBatch,
    load_balance_loss,
    moe_backward,
    moe_forward,
    route,
    total_loss,
)


def build_small_layer(seed=3, lambda_bc=0.005):
    rng = np.random.default_rng(seed)
    n, k, channels, hidden, tokens = 3, 2, 5, 7, 4
    layer = MoeLayer(
        router=RouterParams(
            weight=rng.normal(0.0, 0.5, size=(n, channels + 3)),
            bias=rng.normal(0.0, 0.5, size=n),
        ),
        experts=[
            ExpertFfn(
                w1=rng.normal(0.0, 0.5, size=(hidden, channels)),
                b1=rng.normal(0.0, 0.1, size=hidden),
                w2=rng.normal(0.0, 0.5, size=(channels, hidden)),
                b2=rng.normal(0.0, 0.1, size=channels),
            )
            for _ in range(n)
        ],
        top_k=k,
        lambda_bc=lambda_bc,
    )
    batch = TokenBatch(
        embeddings=rng.normal(0.0, 1.0, size=(1, tokens, channels)),
        descriptors=rng.uniform(0.0, 1.0, size=(1, 3)),
    )
    upstream = rng.normal(0.0, 1.0, size=(1, tokens, channels))
    return layer, batch, upstream


def scalar_objective(layer, batch, upstream):
    out, rec = moe_forward(layer, batch)
    return float((upstream * out.embeddings).sum()) + load_balance_loss(rec, layer)


def central_difference(layer, batch, upstream, array, step=1e-5):
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        ix = it.multi_index
        original = array[ix]
        array[ix] = original + step
        up = scalar_objective(layer, batch, upstream)
        array[ix] = original - step
        down = scalar_objective(layer, batch, upstream)
        array[ix] = original
        grad[ix] = (up - down) / (2.0 * step)
    return grad


def assert_close(analytic, numeric, what, rel=1e-4):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    worst = float((np.abs(analytic - numeric) / denom).max())
    assert worst < rel, f"{what}: worst relative error {worst:.3e}"


def routing_is_nondegenerate(layer, batch, margin=1e-3):
    rec = route(layer, batch)
    gaps = np.diff(np.sort(rec.scores.reshape(-1, rec.scores.shape[-1]), axis=-1), axis=-1)
    return float(gaps.min()) > margin


def test_routing_point_is_nondegenerate():
    layer, batch, _ = build_small_layer()
    assert routing_is_nondegenerate(layer, batch)


def test_every_parameter_gradient_matches_central_differences():
    layer, batch, upstream = build_small_layer()
    grads = moe_backward(layer, batch, upstream)
    assert_close(
        grads.router_weight,
        central_difference(layer, batch, upstream, layer.router.weight),
        "router.weight",
    )
    assert_close(
        grads.router_bias,
        central_difference(layer, batch, upstream, layer.router.bias),
        "router.bias",
    )
    for e, expert in enumerate(layer.experts):
        for name in ("w1", "b1", "w2", "b2"):
            assert_close(
                getattr(grads.experts[e], name),
                central_difference(layer, batch, upstream, getattr(expert, name)),
                f"expert{e}.{name}",
            )


def test_input_gradient_matches_central_differences():
    layer, batch, upstream = build_small_layer()
    grads = moe_backward(layer, batch, upstream)
    numeric = central_difference(layer, batch, upstream, batch.embeddings)
    assert_close(grads.embeddings, numeric, "embeddings")


def test_balance_gradient_flows_through_mean_probabilities():
    # lambda = 0 vs lambda > 0 differ exactly by the balance term's gradient
    layer_on, batch, upstream = build_small_layer(lambda_bc=0.005)
    layer_off, _, _ = build_small_layer(lambda_bc=0.0)
    g_on = moe_backward(layer_on, batch, upstream)
    g_off = moe_backward(layer_off, batch, upstream)
    diff = g_on.router_bias - g_off.router_bias
    assert np.abs(diff).max() > 0.0

    def balance_only(layer):
        return load_balance_loss(route(layer, batch), layer)

    step = 1e-6
    numeric = np.zeros_like(layer_on.router.bias)
    for i in range(numeric.size):
        original = layer_on.router.bias[i]
        layer_on.router.bias[i] = original + step
        up = balance_only(layer_on)
        layer_on.router.bias[i] = original - step
        down = balance_only(layer_on)
        layer_on.router.bias[i] = original
        numeric[i] = (up - down) / (2.0 * step)
    assert_close(diff, numeric, "balance-only bias gradient", rel=1e-3)


def test_total_loss_gradient_is_sum_of_term_gradients():
    layer, batch, upstream = build_small_layer()

    def combined(bias_value, i):
        original = layer.router.bias[i]
        layer.router.bias[i] = bias_value
        out, rec = moe_forward(layer, batch)
        seg = float((upstream * out.embeddings).sum())
        value = total_loss(seg, [load_balance_loss(rec, layer)])
        layer.router.bias[i] = original
        return value, seg, value - seg

    step = 1e-5
    for i in range(layer.router.bias.size):
        b0 = layer.router.bias[i]
        up_total, up_seg, up_bal = combined(b0 + step, i)
        dn_total, dn_seg, dn_bal = combined(b0 - step, i)
        d_total = (up_total - dn_total) / (2 * step)
        d_parts = (up_seg - dn_seg) / (2 * step) + (up_bal - dn_bal) / (2 * step)
        assert d_total == pytest.approx(d_parts, abs=1e-9)
