# concept_datasets.py
#
# Синтетичні умовні розподіли: кожен концепт має власний семплер точок у R^d,
# зразок x0 складається з n_I незалежних точок (рядки токенів зображення).

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from exceptions import ConfigValidationError, DomainError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GaussianConcept:
    mean: tuple
    std: float

    def draw(self, rng: np.random.Generator, n_points: int) -> np.ndarray:
        mean = np.asarray(self.mean, dtype=np.float64)
        return mean + self.std * rng.standard_normal((n_points, mean.size))


@dataclass(frozen=True)
class RingConcept:
    radius: float
    width: float

    @property
    def mean(self) -> tuple:
        return (0.0, 0.0)

    @property
    def std(self) -> float:
        return self.width

    def draw(self, rng: np.random.Generator, n_points: int) -> np.ndarray:
        angle = rng.uniform(0.0, 2.0 * math.pi, n_points)
        r = self.radius + self.width * rng.standard_normal(n_points)
        return np.stack([r * np.cos(angle), r * np.sin(angle)], axis=-1)


@dataclass
class ConceptDataset:
    name: str
    d_data: int
    concepts: list
    erase_concepts: list[int]
    preserve_concepts: list[int]
    mixture_weights: Optional[np.ndarray] = None
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.concepts)
        if self.mixture_weights is None:
            self.mixture_weights = np.full(n, 1.0 / n)
        self.mixture_weights = np.asarray(self.mixture_weights, dtype=np.float64)
        if self.mixture_weights.shape != (n,) or abs(self.mixture_weights.sum() - 1.0) > 1e-12:
            raise ConfigValidationError(f"ваги суміші {self.name} мають бути {n} невід'ємних чисел із сумою 1")
        for c in [*self.erase_concepts, *self.preserve_concepts]:
            self._check(c)

    @property
    def n_concepts(self) -> int:
        return len(self.concepts)

    def _check(self, concept: int) -> None:
        if not 0 <= concept < self.n_concepts:
            raise DomainError(f"концепт {concept} відсутній у наборі {self.name} ({self.n_concepts} концептів)")

    def sample_labels(self, labels: Sequence[int], n_I: int, seed: int, index: int) -> np.ndarray:
        """
        Зразки x0 форми (len(labels), n_I, d) для заданих міток; мітка -1 означає
        безумовну суміш. Результат детермінований для пари (seed, index).
        """
        rng = np.random.default_rng([seed, index])
        labels = np.asarray(labels, dtype=np.int64)
        components = np.where(
            labels >= 0,
            labels,
            rng.choice(self.n_concepts, size=labels.shape[0], p=self.mixture_weights),
        )
        out = np.empty((labels.shape[0], n_I, self.d_data))
        for i, component in enumerate(components):
            self._check(int(component))
            out[i] = self.concepts[component].draw(rng, n_I)
        return out

    def sample(self, concept: Optional[int], n: int, n_I: int, seed: int, index: int = 0) -> np.ndarray:
        label = -1 if concept is None else concept
        return self.sample_labels(np.full(n, label), n_I, seed, index)

    def component_std(self, concept: int) -> float:
        self._check(concept)
        return float(self.concepts[concept].std)


def _two_gaussians() -> ConceptDataset:
    return ConceptDataset(
        name="two-gaussians", d_data=2,
        concepts=[GaussianConcept((2.0, 2.0), 0.5), GaussianConcept((-2.0, -2.0), 0.5)],
        erase_concepts=[0], preserve_concepts=[1], labels=["A", "B"],
    )


def _ring_vs_blob() -> ConceptDataset:
    return ConceptDataset(
        name="ring-vs-blob", d_data=2,
        concepts=[RingConcept(2.5, 0.15), GaussianConcept((0.0, 0.0), 0.5)],
        erase_concepts=[0], preserve_concepts=[1], labels=["ring", "blob"],
    )


def _three_gaussians() -> ConceptDataset:
    centers = [
        (2.5 * math.cos(math.radians(a)), 2.5 * math.sin(math.radians(a)))
        for a in (90.0, 210.0, 330.0)
    ]
    return ConceptDataset(
        name="three-gaussians", d_data=2,
        concepts=[GaussianConcept(c, 0.5) for c in centers],
        erase_concepts=[0, 1], preserve_concepts=[2], labels=["A", "B", "C"],
    )


def _two_modes_1d() -> ConceptDataset:
    return ConceptDataset(
        name="two-modes-1d", d_data=1,
        concepts=[GaussianConcept((2.0,), 0.5), GaussianConcept((-2.0,), 0.5)],
        erase_concepts=[0], preserve_concepts=[1], labels=["A", "B"],
    )


DATASETS = {
    "two-gaussians": _two_gaussians,
    "ring-vs-blob": _ring_vs_blob,
    "three-gaussians": _three_gaussians,
    "two-modes-1d": _two_modes_1d,
}


def get_dataset(name: str) -> ConceptDataset:
    try:
        return DATASETS[name]()
    except KeyError:
        raise ConfigValidationError(f"невідомий набір даних {name!r}; доступні: {', '.join(DATASETS)}") from None
