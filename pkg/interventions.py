# interventions.py
#
# Аналіз уваги: обнулення стовпців токенів концепту, демонстрація обходу
# через збурений токен і локалізація маси уваги A_{I←T} по шарах і головах.

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from concept_datasets import ConceptDataset
from flow_matching import euler_sample, sample_paths
from metrics import energy_distance
from single_stream import (
    AttentionRecord,
    ConceptSpan,
    EMPTY_SPAN,
    ForwardResult,
    SingleStreamModel,
    UnifiedSequence,
    ZeroingPlan,
)
from tensor import no_grad

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ZeroingSpec:
    """Обнуляє стовпці токенів, id яких точно збігається з target."""
    target: int
    layers: Optional[frozenset] = None
    renormalize: bool = True

    def resolve(self, seq: UnifiedSequence) -> ConceptSpan:
        columns = np.flatnonzero((seq.token_ids == self.target).all(axis=0))
        if columns.size == 0:
            return EMPTY_SPAN
        start, end = int(columns[0]), int(columns[-1])
        if end - start + 1 != columns.size:
            logger.warning(f"Токени концепту {self.target} не суцільні: {columns.tolist()}, беру перший")
            end = start
        return ConceptSpan(seq.n_I + start, seq.n_I + end)

    def plan_for(self, seq: UnifiedSequence) -> ZeroingPlan:
        return ZeroingPlan(span=self.resolve(seq), layers=self.layers, renormalize=self.renormalize)


def zeroed_forward(frozen: SingleStreamModel, seq: UnifiedSequence, spec: ZeroingSpec) -> ForwardResult:
    plan = spec.plan_for(seq)
    if plan.span.is_empty:
        logger.warning(f"Діапазон для концепту {spec.target} не знайдено, прохід без змін")
    with no_grad():
        return frozen.forward(seq, zeroing=plan)


# --- Демонстрація обходу ---

@dataclass
class BypassReport:
    concept: int
    perturbed_concept: int
    n: int
    perturbed_vs_plain: float
    zeroed_vs_plain: float
    zeroed_vs_uncond: float
    plain_vs_uncond: float
    perturbed_vs_uncond: float

    @property
    def bypass_holds(self) -> bool:
        return self.perturbed_vs_plain < self.zeroed_vs_plain

    def as_dict(self) -> dict:
        return {**self.__dict__, "bypass_holds": self.bypass_holds}


def bypass_demo(
    frozen: SingleStreamModel,
    concept: int,
    perturbed_concept: Optional[int] = None,
    n: int = 500,
    steps: int = 9,
    seed: int = 0,
    layers: Optional[Sequence[int]] = None,
    renormalize: bool = True,
) -> BypassReport:
    """
    Три набори зразків з одним і тим самим шумом x_T: звичайний умовний,
    з обнуленим концептом, з обнуленим концептом але збуреним токеном у промпті.
    """
    if perturbed_concept is None:
        perturbed_concept = frozen.perturbed_id(concept)
    spec = ZeroingSpec(concept, frozenset(layers) if layers is not None else None, renormalize)

    plain = euler_sample(frozen, concept, n, steps, seed=seed)
    zeroed = euler_sample(frozen, concept, n, steps, seed=seed, zeroing=spec)
    perturbed = euler_sample(frozen, perturbed_concept, n, steps, seed=seed, zeroing=spec)
    uncond = euler_sample(frozen, None, n, steps, seed=seed)

    report = BypassReport(
        concept=concept,
        perturbed_concept=perturbed_concept,
        n=n,
        perturbed_vs_plain=energy_distance(perturbed, plain),
        zeroed_vs_plain=energy_distance(zeroed, plain),
        zeroed_vs_uncond=energy_distance(zeroed, uncond),
        plain_vs_uncond=energy_distance(plain, uncond),
        perturbed_vs_uncond=energy_distance(perturbed, uncond),
    )
    logger.info(
        f"Обхід обнулення: ED(збурений, звичайний)={report.perturbed_vs_plain:.4f}, "
        f"ED(обнулений, звичайний)={report.zeroed_vs_plain:.4f}"
    )
    return report


# --- Локалізація ---

def span_mass_profile(attn: Sequence[AttentionRecord], span: ConceptSpan, rows: str = "image") -> np.ndarray:
    """Маса уваги в стовпцях span, усереднена по батчу і рядках-запитах: матриця (шари × голови)."""
    profile = np.zeros((len(attn), attn[0].A.shape[1]))
    if span.is_empty:
        return profile
    for i, rec in enumerate(attn):
        block = rec.A.data[..., span.start:span.end + 1]
        if rows == "image":
            block = block[..., :rec.n_I, :]
        profile[i] = block.sum(axis=-1).mean(axis=(0, 2))
    return profile


@dataclass
class LocalizationProfile:
    concept: int
    matrix: np.ndarray  # (шари, голови)

    @property
    def per_layer(self) -> np.ndarray:
        return self.matrix.mean(axis=1)


def localize(
    frozen: SingleStreamModel,
    concept: int,
    dataset: ConceptDataset,
    batches: int = 4,
    batch: int = 32,
    seed: int = 0,
    rows: str = "image",
) -> LocalizationProfile:
    cfg = frozen.config
    total = np.zeros((cfg.n_layers, cfg.n_heads))
    with no_grad():
        for index in range(batches):
            rng = np.random.default_rng([seed, 4, index])
            x0 = dataset.sample(concept, batch, cfg.n_I, seed, index)
            paths = sample_paths(x0, rng)
            seq = frozen.embed(paths.x_t, concept, paths.t)
            result = frozen.forward(seq)
            total += span_mass_profile(result.attn, seq.require_uniform_span(), rows)
    return LocalizationProfile(concept=concept, matrix=total / batches)


def top_k_layers(profile: LocalizationProfile, k: int) -> list[int]:
    order = np.argsort(-profile.per_layer, kind="stable")
    return sorted(int(i) for i in order[:k])


def format_profile_table(profile: LocalizationProfile) -> str:
    n_heads = profile.matrix.shape[1]
    lines = ["layer\t" + "\t".join(f"head_{h}" for h in range(n_heads))]
    for layer, row in enumerate(profile.matrix):
        lines.append(f"{layer}\t" + "\t".join(f"{v:.6f}" for v in row))
    return "\n".join(lines) + "\n"
