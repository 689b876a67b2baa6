# metrics.py
#
# Метрики стирання на основі енергетичної відстані між наборами зразків.
# Зразок (n_I, d) розглядається як n_I точок у R^d; набори зразків зливаються по рядках.

import asyncio
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import aiofiles
import dcor
import numpy as np

from concept_datasets import ConceptDataset
from exceptions import ContractError

logger = logging.getLogger(__name__)

ALT_SEED_OFFSET = 1_000_003


def pooled_points(samples: np.ndarray) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    return samples.reshape(-1, samples.shape[-1])


def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(dcor.energy_distance(pooled_points(a), pooled_points(b)))


@dataclass
class MetricsRecord:
    kind: str
    step: int
    config_hash: str
    values: dict[str, Any]
    wall_clock: float = field(default_factory=time.time)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, default=float)


async def append_jsonl(path: Union[str, Path], records: list[MetricsRecord]) -> None:
    """Лише дописування в кінець файлу."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    async with aiofiles.open(path, "a", encoding="utf-8") as f:
        for record in records:
            await f.write(record.to_json() + "\n")


async def read_jsonl(path: Union[str, Path]) -> list[dict]:
    async with aiofiles.open(path, "r", encoding="utf-8") as f:
        text = await f.read()
    return [json.loads(line) for line in text.splitlines() if line.strip()]


# --- Оцінка стирання ---

@dataclass
class EvalSummary:
    erased: list[int]
    preserved: list[int]
    n: int
    self_distance: dict[int, float] = field(default_factory=dict)
    efficacy_to_original: dict[int, float] = field(default_factory=dict)
    efficacy_to_uncond: dict[int, float] = field(default_factory=dict)
    noise_floor: dict[int, float] = field(default_factory=dict)
    preservation: dict[int, float] = field(default_factory=dict)
    uncond_shift: float = 0.0
    uncond_noise_floor: float = 0.0
    run_statistics: dict[str, Any] = field(default_factory=dict)
    samples: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def efficacy_ratio(self, concept: int) -> float:
        return self.efficacy_to_original[concept] / max(self.self_distance[concept], 1e-300)

    def efficacy_passes(self, concept: int, factor: float = 10.0) -> bool:
        return self.efficacy_to_original[concept] >= factor * self.self_distance[concept]

    def preservation_passes(self, concept: int, factor: float = 3.0) -> bool:
        return self.preservation[concept] < factor * self.noise_floor[concept]

    def as_dict(self) -> dict:
        data = asdict(self)
        data.pop("samples")
        for key in ("self_distance", "efficacy_to_original", "efficacy_to_uncond", "noise_floor", "preservation"):
            data[key] = {str(k): v for k, v in data[key].items()}
        return data


async def eval_erasure(
    base,
    lora,
    dataset: ConceptDataset,
    n: int = 500,
    steps: int = 9,
    seed: int = 0,
    run_statistics: Optional[dict] = None,
) -> EvalSummary:
    """
    Для кожної умови (c_er, кожен c_pr, ∅) генеруються зразки до і після LoRA з
    однаковим шумом, плюс другий набір «до» з іншим seed для рівня шуму.
    Умови обробляються паралельно, кожна зі своїм seed.
    """
    from flow_matching import euler_sample

    if lora is not None and lora.config.config_hash() != base.config.config_hash():
        raise ContractError("LoRA і базова модель мають різні конфігурації")
    frozen = base.frozen()
    conditions: list[Optional[int]] = [*dataset.erase_concepts, *dataset.preserve_concepts, None]

    async def draw(concept: Optional[int], use_lora: bool, alt: bool) -> np.ndarray:
        cond_seed = seed + (0 if concept is None else 1 + concept) * 7919 + (ALT_SEED_OFFSET if alt else 0)
        return await asyncio.to_thread(
            euler_sample, frozen, concept, n, steps, lora if use_lora else None, cond_seed,
        )

    jobs = [(c, use_lora, alt) for c in conditions for use_lora, alt in ((False, False), (True, False), (False, True))]
    results = await asyncio.gather(*(draw(*job) for job in jobs))
    samples = dict(zip(jobs, results))

    summary = EvalSummary(
        erased=list(dataset.erase_concepts),
        preserved=list(dataset.preserve_concepts),
        n=n,
        run_statistics=dict(run_statistics or {}),
    )
    uncond_before = samples[(None, False, False)]
    for c in dataset.erase_concepts:
        before, after, alt = samples[(c, False, False)], samples[(c, True, False)], samples[(c, False, True)]
        summary.self_distance[c] = energy_distance(before, alt)
        summary.efficacy_to_original[c] = energy_distance(after, before)
        summary.efficacy_to_uncond[c] = energy_distance(after, uncond_before)
    for c in dataset.preserve_concepts:
        before, after, alt = samples[(c, False, False)], samples[(c, True, False)], samples[(c, False, True)]
        summary.noise_floor[c] = energy_distance(before, alt)
        summary.preservation[c] = energy_distance(after, before)
    summary.uncond_shift = energy_distance(samples[(None, True, False)], uncond_before)
    summary.uncond_noise_floor = energy_distance(uncond_before, samples[(None, False, True)])
    for (c, use_lora, alt), points in samples.items():
        if not alt:
            summary.samples[f"{'after' if use_lora else 'before'}_{'uncond' if c is None else c}"] = points

    for c in dataset.erase_concepts:
        logger.info(
            f"Концепт {c}: ED(після, до)={summary.efficacy_to_original[c]:.4f}, "
            f"власна відстань={summary.self_distance[c]:.4f}"
        )
    for c in dataset.preserve_concepts:
        logger.info(f"Концепт {c}: збереження={summary.preservation[c]:.4f}, рівень шуму={summary.noise_floor[c]:.4f}")
    return summary
