# flow_matching.py
#
# Умовний flow matching на прямолінійному шляху: x_t = (1−t)·x0 + t·x1,
# шум при t=1, дані при t=0, цільова швидкість v = x1 − x0.

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from tqdm import tqdm

from concept_datasets import ConceptDataset
from exceptions import ContractError, TrainingError
from optim import AdamW
from single_stream import SingleStreamModel
from tensor import Tensor, mse, no_grad

logger = logging.getLogger(__name__)

LABEL_DROPOUT = 0.1


@dataclass
class FlowPath:
    x0: np.ndarray  # (B, n_I, d)
    x1: np.ndarray
    t: np.ndarray   # (B,)
    x_t: np.ndarray
    v_target: np.ndarray

    @classmethod
    def build(cls, x0: np.ndarray, x1: np.ndarray, t: np.ndarray) -> "FlowPath":
        t = np.asarray(t, dtype=np.float64)
        tt = t[:, None, None]
        return cls(x0=x0, x1=x1, t=t, x_t=(1.0 - tt) * x0 + tt * x1, v_target=x1 - x0)

    def __len__(self) -> int:
        return self.x0.shape[0]


def sample_paths(x0: np.ndarray, rng: np.random.Generator) -> FlowPath:
    x1 = rng.standard_normal(x0.shape)
    t = rng.uniform(0.0, 1.0, x0.shape[0])
    return FlowPath.build(x0, x1, t)


def draw_condition_labels(
    rng: np.random.Generator,
    concepts: Sequence[int],
    batch: int,
    dropout: float = LABEL_DROPOUT,
) -> np.ndarray:
    """Мітки концептів для батчу; частка dropout замінюється на -1 (порожній промпт ∅)."""
    labels = rng.choice(np.asarray(concepts, dtype=np.int64), size=batch)
    labels[rng.uniform(size=batch) < dropout] = -1
    return labels


def fm_loss(model, paths: FlowPath, concepts, lora=None) -> Tensor:
    if len(paths) == 0:
        raise ContractError("fm_loss: порожній батч")
    velocity = model.velocity(paths.x_t, concepts, paths.t, lora)
    return mse(velocity, paths.v_target)


# --- Семплінг ---

def euler_integrate(
    velocity_fn: Callable[[np.ndarray, float], np.ndarray],
    x_T: np.ndarray,
    steps: int,
    stop_after: Optional[int] = None,
) -> np.ndarray:
    """
    x ← x − Δt·v(x, t) від t=1 до t=0 з рівномірним Δt = 1/steps.
    stop_after обриває інтегрування після заданої кількості кроків (часткова траєкторія).
    """
    if steps < 1:
        raise ContractError(f"кількість кроків Ейлера має бути >= 1, отримано {steps}")
    dt = 1.0 / steps
    x = np.array(x_T, dtype=np.float64, copy=True)
    for k in range(steps if stop_after is None else min(stop_after, steps)):
        t = 1.0 - k * dt
        x = x - dt * velocity_fn(x, t)
    return x


def euler_sample(
    model: SingleStreamModel,
    concept,
    n: int,
    steps: int = 9,
    lora=None,
    seed: int = 0,
    zeroing=None,
) -> np.ndarray:
    cfg = model.config
    x_T = np.random.default_rng(seed).standard_normal((n, cfg.n_I, cfg.d_data))

    def velocity_fn(x: np.ndarray, t: float) -> np.ndarray:
        return model.velocity(x, concept, t, lora=lora, zeroing=zeroing).data

    with no_grad():
        return euler_integrate(velocity_fn, x_T, steps)


# --- Навчання базової моделі ---

@dataclass
class BaseTrainingResult:
    model: SingleStreamModel
    losses: list[float] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.losses[0] if self.losses else math.nan

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else math.nan


def train_base(
    model: SingleStreamModel,
    dataset: ConceptDataset,
    steps: int = 2000,
    lr: float = 1e-3,
    batch: int = 64,
    seed: int = 0,
    label_dropout: float = LABEL_DROPOUT,
    log_every: int = 200,
    progress: bool = True,
) -> BaseTrainingResult:
    """
    AdamW на fm_loss з 10% викиданням мітки концепту, щоб навчилась і
    безумовна гілка v(x_t, ∅, t). Після навчання оновлюються збурені аліаси токенів.
    """
    if dataset.d_data != model.config.d_data:
        raise ContractError(f"d_data набору ({dataset.d_data}) != d_data моделі ({model.config.d_data})")
    if dataset.n_concepts != model.config.n_concepts:
        raise ContractError(f"набір {dataset.name} має {dataset.n_concepts} концептів, модель {model.config.n_concepts}")

    result = BaseTrainingResult(model=model)
    optimizer = AdamW(model.parameters(), lr=lr)
    concepts = list(range(dataset.n_concepts))
    last_checksum = model.checksum()

    for step in tqdm(range(steps), desc="train-base", disable=not progress):
        rng = np.random.default_rng([seed, 1, step])
        labels = draw_condition_labels(rng, concepts, batch, label_dropout)
        x0 = dataset.sample_labels(labels, model.config.n_I, seed, step)
        paths = sample_paths(x0, rng)

        optimizer.zero_grad()
        loss = fm_loss(model, paths, labels)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError("fm_loss став нескінченним або NaN", step=step, last_state=last_checksum)
        loss.backward()
        optimizer.step()
        result.losses.append(value)

        if log_every and step % log_every == 0:
            logger.info(f"train-base крок {step}: fm_loss={value:.5f}")
            last_checksum = model.checksum()

    model.refresh_perturbed_tokens(seed=seed)
    if result.losses:
        logger.info(f"Базове навчання завершено: {result.initial_loss:.4f} -> {result.final_loss:.4f}")
    return result
