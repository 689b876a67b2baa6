# erasure_objectives.py
#
# Цілі стирання: L_erase (негативне наведення), L_attn (маса уваги
# зображення на токени концепту), L_pr (збереження ∅ і c_pr).
# Заморожена модель і адаптована модель мають спільні параметри θ;
# адаптована = θ + ΔW(lora). Цільові передбачення рахуються під no_grad.

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from concept_datasets import ConceptDataset
from exceptions import ContractError, DimensionError
from flow_matching import euler_integrate, sample_paths
from single_stream import SingleStreamModel, attention_mass, shuffle_tokens
from tensor import Tensor, mse, no_grad

logger = logging.getLogger(__name__)

XT_SOURCES = ("path", "trajectory")


@dataclass
class ErasureBatch:
    x_t: np.ndarray  # (B, n_I, d)
    t: np.ndarray    # (B,)
    c_er: int
    c_pr: int
    eta: float = 2.0

    def __post_init__(self):
        if self.eta < 0:
            raise ContractError(f"η має бути >= 0, отримано {self.eta}")
        if self.x_t.ndim != 3 or self.t.shape != (self.x_t.shape[0],):
            raise DimensionError(f"x_t {self.x_t.shape} і t {self.t.shape} не узгоджені")


def build_erasure_batch(
    frozen: SingleStreamModel,
    dataset: ConceptDataset,
    c_er: int,
    c_pr: int,
    batch: int,
    eta: float,
    seed: int,
    index: int,
    xt_source: str = "path",
    sampler_steps: int = 9,
) -> ErasureBatch:
    """
    path: зразки безумовної суміші зашумлюються вздовж FlowPath при рівномірному t.
    trajectory: часткова траєкторія Ейлера замороженої моделі під c_er до випадкового кроку.
    """
    cfg = frozen.config
    rng = np.random.default_rng([seed, 2, index])
    if xt_source == "path":
        x0 = dataset.sample(None, batch, cfg.n_I, seed, index)
        paths = sample_paths(x0, rng)
        return ErasureBatch(x_t=paths.x_t, t=paths.t, c_er=c_er, c_pr=c_pr, eta=eta)
    if xt_source == "trajectory":
        k = int(rng.integers(0, sampler_steps))
        x_T = rng.standard_normal((batch, cfg.n_I, cfg.d_data))

        def velocity_fn(x: np.ndarray, t: float) -> np.ndarray:
            return frozen.velocity(x, c_er, t).data

        with no_grad():
            x_t = euler_integrate(velocity_fn, x_T, sampler_steps, stop_after=k)
        t = np.full(batch, 1.0 - k / sampler_steps)
        return ErasureBatch(x_t=x_t, t=t, c_er=c_er, c_pr=c_pr, eta=eta)
    raise ContractError(f"невідоме джерело x_t: {xt_source!r} (очікується одне з {XT_SOURCES})")


# --- Цілі ---

def erase_target(frozen: SingleStreamModel, batch: ErasureBatch) -> np.ndarray:
    """v_θ(∅) − η·(v_θ(c_er) − v_θ(∅)), без градієнта."""
    with no_grad():
        v_cond = frozen.velocity(batch.x_t, batch.c_er, batch.t).data
        v_uncond = frozen.velocity(batch.x_t, None, batch.t).data
    return v_uncond - batch.eta * (v_cond - v_uncond)


def erase_loss(frozen: SingleStreamModel, lora, batch: ErasureBatch) -> Tensor:
    target = erase_target(frozen, batch)
    return mse(frozen.velocity(batch.x_t, batch.c_er, batch.t, lora), target)


def attn_loss(
    frozen: SingleStreamModel,
    lora,
    batch: ErasureBatch,
    rng: Optional[np.random.Generator],
    layers: Optional[Sequence[int]] = None,
    rows: str = "image",
) -> Tensor:
    seq = frozen.embed(batch.x_t, batch.c_er, batch.t)
    if seq.require_uniform_span().is_empty:
        raise ContractError("L_attn визначена лише для концепту з непорожнім діапазоном токенів")
    seq = shuffle_tokens(seq, rng)
    result = frozen.forward(seq, lora)
    return attention_mass(result.attn, seq.concept_span, rows=rows, layers=layers)


def preserve_loss(frozen: SingleStreamModel, lora, batch: ErasureBatch) -> Tensor:
    """Обидва доданки використовують той самий батч x_t."""
    with no_grad():
        ref_uncond = frozen.velocity(batch.x_t, None, batch.t).data
        ref_pr = frozen.velocity(batch.x_t, batch.c_pr, batch.t).data
    uncond = mse(frozen.velocity(batch.x_t, None, batch.t, lora), ref_uncond)
    keep = mse(frozen.velocity(batch.x_t, batch.c_pr, batch.t, lora), ref_pr)
    return uncond + keep


def er_total(
    frozen: SingleStreamModel,
    lora,
    batch: ErasureBatch,
    rng: Optional[np.random.Generator],
    attn_weight: float = 1.0,
    layers: Optional[Sequence[int]] = None,
    rows: str = "image",
) -> Tensor:
    return erase_loss(frozen, lora, batch) + attn_loss(frozen, lora, batch, rng, layers, rows) * attn_weight


@dataclass
class ErasureLosses:
    erase: Tensor
    attn: Tensor
    pr: Tensor
    attn_weight: float = 1.0

    @property
    def er(self) -> Tensor:
        return self.erase + self.attn * self.attn_weight

    def scalars(self) -> dict[str, float]:
        return {
            "l_erase": self.erase.item(),
            "l_attn": self.attn.item(),
            "l_er": self.er.item(),
            "l_pr": self.pr.item(),
        }


def compute_losses(
    frozen: SingleStreamModel,
    lora,
    batch: ErasureBatch,
    rng: Optional[np.random.Generator],
    attn_weight: float = 1.0,
    layers: Optional[Sequence[int]] = None,
    rows: str = "image",
    holdout: Optional[ErasureBatch] = None,
) -> ErasureLosses:
    """holdout, якщо заданий, замінює тренувальний батч для L_pr."""
    return ErasureLosses(
        erase=erase_loss(frozen, lora, batch),
        attn=attn_loss(frozen, lora, batch, rng, layers, rows),
        pr=preserve_loss(frozen, lora, holdout if holdout is not None else batch),
        attn_weight=attn_weight,
    )
