import numpy as np
import pytest

from sarmoe import (
    ActivationTally,
    ContractViolationError,
    ExpertFfn,
    MoeLayer,
    RouterParams,
    TokenBatch,
    descriptor_sensitivity,
    domain_separation_purity,
    domain_tallies,
    dominance_report,
    evaluate_dataset,
    init_toy_model,
    route,
    substream,
    tally_activations,
)

from conftest import TOY_ARCH, trained_two_domain


def biased_layer(n, favorite, channels=2, hidden=2, k=1):
    bias = np.zeros(n)
    bias[favorite] = 10.0
    router = RouterParams(weight=np.zeros((n, channels + 3)), bias=bias)
    experts = [
        ExpertFfn(np.zeros((hidden, channels)), np.zeros(hidden), np.zeros((channels, hidden)), np.zeros(channels))
        for _ in range(n)
    ]
    return MoeLayer(router=router, experts=experts, top_k=k)


def records_for(layers, batch):
    return [route(layer, batch) for layer in layers]


class TestTallyActivations:
    def test_single_token_routes_to_the_favorite_everywhere(self):
        layers = [biased_layer(4, favorite=2), biased_layer(4, favorite=2)]
        batch = TokenBatch(embeddings=np.zeros((1, 1, 2)), descriptors=np.zeros((1, 3)))
        tally = tally_activations([records_for(layers, batch)], "one")
        for ratio in tally.ratios():
            np.testing.assert_array_equal(ratio, [0.0, 0.0, 1.0, 0.0])

    def test_uniform_router_is_binomially_balanced(self, rng):
        # logits are iid per token (identity rows over iid channels), so each
        # expert wins with probability exactly 1/n
        n, tokens = 4, 10_000
        weight = np.zeros((n, n + 3))
        weight[:, :n] = np.eye(n)
        router = RouterParams(weight=weight, bias=np.zeros(n))
        experts = [
            ExpertFfn(np.zeros((2, n)), np.zeros(2), np.zeros((n, 2)), np.zeros(n))
            for _ in range(n)
        ]
        layer = MoeLayer(router=router, experts=experts, top_k=1)
        batch = TokenBatch(
            embeddings=rng.normal(0.0, 1.0, size=(1, tokens, n)),
            descriptors=np.zeros((1, 3)),
        )
        tally = tally_activations([records_for([layer], batch)], "noise")
        ratio = tally.ratios()[0]
        sigma = np.sqrt((1 / n) * (1 - 1 / n) / tokens)
        assert np.abs(ratio - 1 / n).max() < 3 * sigma

    def test_topk_totals_count_each_selection(self, rng):
        layer = biased_layer(5, favorite=1, k=2)
        batch = TokenBatch(
            embeddings=rng.normal(size=(2, 6, 2)), descriptors=np.zeros((2, 3))
        )
        tally = tally_activations([records_for([layer], batch)], "k2")
        assert tally.layers[0].sum() == 2 * 6 * 2

    def test_layer_count_mismatch_rejected(self):
        layer = biased_layer(3, favorite=0)
        batch = TokenBatch(embeddings=np.zeros((1, 2, 2)), descriptors=np.zeros((1, 3)))
        records = records_for([layer], batch)
        with pytest.raises(ContractViolationError):
            tally_activations([records, records + records], "bad")

    def test_ratios_form_probability_vectors(self, rng):
        layer = biased_layer(4, favorite=3, k=2)
        batch = TokenBatch(
            embeddings=rng.normal(size=(1, 9, 2)), descriptors=np.zeros((1, 3))
        )
        tally = tally_activations([records_for([layer, layer], batch)], "p")
        for ratio in tally.ratios():
            assert ratio.sum() == pytest.approx(1.0, abs=1e-6)

    def test_merge_adds_counts(self):
        a = ActivationTally("d", (np.array([1, 2]),))
        b = ActivationTally("d", (np.array([3, 4]),))
        np.testing.assert_array_equal(a.merge(b).layers[0], [4, 6])
        with pytest.raises(ContractViolationError):
            a.merge(ActivationTally("other", (np.array([1, 2]),)))

    def test_csv_layout(self):
        tally = ActivationTally("d", (np.array([3, 1]),))
        lines = tally.to_csv().strip().splitlines()
        assert lines[0] == "layer,expert,count,ratio"
        assert lines[1].startswith("0,0,3,")


class TestDominance:
    def test_argmax_and_ratio(self):
        tally = ActivationTally("L1", (np.array([1, 7, 2]), np.array([5, 5, 10])))
        report = dominance_report([tally])
        assert report.entries[0].expert == 1
        assert report.entries[0].ratio == pytest.approx(0.7)
        assert report.entries[1].expert == 2
        assert report.entries[1].ratio == pytest.approx(0.5)

    def test_invariant_to_count_scaling(self):
        base = ActivationTally("L1", (np.array([2, 6, 4]),))
        scaled = ActivationTally("L1", (np.array([20, 60, 40]),))
        a = dominance_report([base]).entries[0]
        b = dominance_report([scaled]).entries[0]
        assert (a.expert, a.ratio) == (b.expert, b.ratio)

    def test_ratio_at_least_one_over_n(self, rng):
        counts = rng.integers(0, 50, size=6) + 1
        report = dominance_report([ActivationTally("d", (counts,))])
        assert report.entries[0].ratio >= 1 / 6


class TestSeparationPurity:
    def test_clean_split_scores_one(self):
        tallies = [
            ActivationTally("a", (np.array([10, 0, 0]),)),
            ActivationTally("b", (np.array([0, 12, 0]),)),
        ]
        purity = domain_separation_purity(tallies)
        assert purity == {"a": 1.0, "b": 1.0}

    def test_collapse_starves_the_minority_domain(self):
        tallies = [
            ActivationTally("a", (np.array([10, 0]),)),
            ActivationTally("b", (np.array([8, 0]),)),
        ]
        purity = domain_separation_purity(tallies)
        assert purity["a"] == 1.0 and purity["b"] == 0.0

    def test_layer_count_mismatch_rejected(self):
        with pytest.raises(ContractViolationError):
            domain_separation_purity(
                [
                    ActivationTally("a", (np.array([1, 2]),)),
                    ActivationTally("b", (np.array([1, 2]), np.array([3, 4]))),
                ]
            )


class TestDescriptorSensitivity:
    def test_all_true_mask_is_bitwise_identical_to_unmasked(self):
        model, _, _, eval_items, _ = trained_two_domain(1, 0.005)
        masked = descriptor_sensitivity(model, eval_items, (True, True, True))
        plain, _, _ = evaluate_dataset(model, eval_items)
        assert masked == plain

    def test_all_false_mask_is_noop_when_descriptor_columns_are_zero(self, rng):
        model = init_toy_model(substream(0, "init"), **TOY_ARCH)
        for block in model.blocks:
            block.router.weight[:, -3:] = 0.0
        from sarmoe.training import speckle_domain_dataset

        items = speckle_domain_dataset(3, 2)
        with_desc = descriptor_sensitivity(model, items, (True, True, True))
        without = descriptor_sensitivity(model, items, (False, False, False))
        assert with_desc == without

    def test_sensitivity_is_deterministic(self):
        model, _, _, eval_items, _ = trained_two_domain(1, 0.005)
        a = descriptor_sensitivity(model, eval_items, (False, True, False))
        b = descriptor_sensitivity(model, eval_items, (False, True, False))
        assert a == b

    def test_enl_only_training_separates_at_least_as_well_as_no_descriptors(self):
        # speckle strength is exactly what ENL measures, so routing guided by
        # ENL alone should split the two looks levels at least as cleanly as
        # routing with no physical guidance at all
        enl_scores, none_scores = [], []
        for seed in (1, 2, 3, 7, 8):
            for mask, bucket in (
                ((False, True, False), enl_scores),
                ((False, False, False), none_scores),
            ):
                model, _, _, eval_items, _ = trained_two_domain(seed, 0.005, mask)
                purity = domain_separation_purity(
                    domain_tallies(model, eval_items, enabled=mask)
                )
                bucket.append(np.mean(list(purity.values())))
        assert np.mean(enl_scores) >= np.mean(none_scores)
