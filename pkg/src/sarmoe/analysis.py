"""Expert-activation analytics.

Activation counts how often each expert appears in a token's selected set
(once per appearance, not weighted by gate value). Per layer the ratios
count / (tokens * k) form a probability vector. Dominance summarizes, per
domain and layer, which expert hosts the largest share of assignments.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .descriptors import DescriptorConfig
from .errors import ContractViolationError
from .evaluation import IoUReport, evaluate_dataset
from .model import ToyModel
from .moe import RoutingRecord


@dataclass(frozen=True)
class ActivationTally:
    domain_tag: str
    layers: tuple[np.ndarray, ...]  # per layer: (n,) int64 assignment counts

    def __post_init__(self):
        frozen = []
        for arr in self.layers:
            arr = np.ascontiguousarray(arr, dtype=np.int64)
            if (arr < 0).any():
                raise ContractViolationError("activation counts must be nonnegative")
            arr.setflags(write=False)
            frozen.append(arr)
        object.__setattr__(self, "layers", tuple(frozen))

    def ratios(self) -> list[np.ndarray]:
        """Per-layer activation ratios; each sums to 1."""
        out = []
        for counts in self.layers:
            total = counts.sum()
            if total == 0:
                raise ContractViolationError("cannot form ratios from an empty tally")
            out.append(counts / total)
        return out

    def merge(self, other: "ActivationTally") -> "ActivationTally":
        if other.domain_tag != self.domain_tag or len(other.layers) != len(self.layers):
            raise ContractViolationError("tallies disagree on domain or layer count")
        return ActivationTally(
            self.domain_tag,
            tuple(a + b for a, b in zip(self.layers, other.layers)),
        )

    def to_csv(self) -> str:
        lines = ["layer,expert,count,ratio"]
        for layer_i, (counts, ratio) in enumerate(zip(self.layers, self.ratios())):
            for e in range(counts.size):
                lines.append(f"{layer_i},{e},{counts[e]},{repr(float(ratio[e]))}")
        return "\n".join(lines) + "\n"


def tally_activations(
    records: Sequence[Sequence[RoutingRecord]], domain_tag: str
) -> ActivationTally:
    """Aggregate selected-expert counts from per-image routing records.

    ``records[i][l]`` is image i's record at layer l; every image must have
    the same number of layers.
    """
    if not records:
        raise ContractViolationError("no routing records to tally")
    n_layers = len(records[0])
    if any(len(r) != n_layers for r in records):
        raise ContractViolationError("layer count differs across routing records")
    counts = None
    for per_image in records:
        for layer_i, record in enumerate(per_image):
            n = record.scores.shape[-1]
            if counts is None:
                counts = np.zeros((n_layers, n), dtype=np.int64)
            if counts.shape[1] != n:
                raise ContractViolationError("expert count differs across routing records")
            counts[layer_i] += np.bincount(record.selected.ravel(), minlength=n)
    return ActivationTally(domain_tag, tuple(counts))


@dataclass(frozen=True)
class DominanceEntry:
    domain_tag: str
    layer: int
    expert: int
    ratio: float


@dataclass(frozen=True)
class DominanceReport:
    entries: tuple[DominanceEntry, ...]

    def purity(self, domain_tag: str) -> float:
        """Smallest per-layer dominant ratio of one domain."""
        ratios = [e.ratio for e in self.entries if e.domain_tag == domain_tag]
        if not ratios:
            raise ContractViolationError(f"no entries for domain {domain_tag!r}")
        return min(ratios)


def dominance_report(tallies: Sequence[ActivationTally]) -> DominanceReport:
    """Argmax expert and its ratio per (domain, layer)."""
    entries = []
    for tally in tallies:
        for layer_i, ratio in enumerate(tally.ratios()):
            expert = int(ratio.argmax())
            entries.append(
                DominanceEntry(
                    domain_tag=tally.domain_tag,
                    layer=layer_i,
                    expert=expert,
                    ratio=float(ratio[expert]),
                )
            )
    return DominanceReport(entries=tuple(entries))


def domain_separation_purity(tallies: Sequence[ActivationTally]) -> dict[str, float]:
    """How cleanly routing separates the domains, per domain.

    Standard clustering purity against domain tags: an expert belongs to the
    domain that sends it the most assignments, and a domain's purity is the
    share of its assignments landing on its own experts (averaged over
    layers). Collapsed routing scores low for the minority domain; a clean
    one-expert-per-domain split scores 1 for everyone.
    """
    if not tallies:
        raise ContractViolationError("no tallies given")
    n_layers = len(tallies[0].layers)
    if any(len(t.layers) != n_layers for t in tallies):
        raise ContractViolationError("tallies disagree on layer count")
    per_domain: dict[str, list[float]] = {t.domain_tag: [] for t in tallies}
    for layer_i in range(n_layers):
        counts = np.stack([t.layers[layer_i] for t in tallies])
        owner = counts.argmax(axis=0)
        for d, tally in enumerate(tallies):
            total = counts[d].sum()
            own = counts[d, owner == d].sum()
            per_domain[tally.domain_tag].append(own / total if total else 0.0)
    return {tag: float(np.mean(vals)) for tag, vals in per_domain.items()}


def descriptor_sensitivity(
    model: ToyModel,
    dataset: Sequence,
    descriptor_mask: tuple[bool, bool, bool],
    cfg: DescriptorConfig = DescriptorConfig(),
) -> IoUReport:
    """Evaluate with only the unmasked descriptors feeding the router.

    Masked descriptors are zeroed before normalization; the model itself is
    untouched. An all-false mask is the pure-embedding routing baseline.
    """
    report, _, _ = evaluate_dataset(model, dataset, cfg, enabled=tuple(descriptor_mask))
    return report


def domain_tallies(
    model: ToyModel,
    dataset: Sequence,
    cfg: DescriptorConfig = DescriptorConfig(),
    enabled: tuple[bool, bool, bool] = (True, True, True),
) -> list[ActivationTally]:
    """One merged tally per domain tag found in (image, labels, tag) items."""
    tags = []
    for item in dataset:
        tag = str(item[2]) if len(item) > 2 else "all"
        if tag not in tags:
            tags.append(tag)
    _, _, records = evaluate_dataset(model, dataset, cfg, enabled)
    out = []
    for tag in tags:
        grouped = [
            rec
            for rec, item in zip(records, dataset)
            if (str(item[2]) if len(item) > 2 else "all") == tag
        ]
        out.append(tally_activations(grouped, tag))
    return out
