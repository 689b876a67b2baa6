# erase_service.py
#
# Цикл стирання: на кожному кроці λ оновлюється зі спостереженої зміни L_pr,
# береться c_er і c_pr, рахується L_total = L_er + λ·L_pr, один зворотний прохід
# і крок оптимізатора по параметрах LoRA зі швидкістю α.

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from tqdm import tqdm

from concept_datasets import ConceptDataset
from erasure_objectives import XT_SOURCES, ErasureBatch, build_erasure_batch, compute_losses, preserve_loss
from exceptions import ConfigValidationError, SingularConstraintError, TrainingError
from lagrangian import (
    ConvergenceDiagnostics,
    DualControllerState,
    GradientPair,
    estimate_smoothness,
    implicit_lambda_update,
    lambda_star,
    regret_increment,
)
from optim import make_optimizer
from single_stream import GatedLoRA, SingleStreamModel
from tensor import Tensor, assign_grads, flatten_grads, no_grad

logger = logging.getLogger(__name__)

LAMBDA_MODES = ("implicit", "exact", "zero")
OBJECTIVES = ("full", "erase-only", "er-only", "pr-only")
OPTIMIZERS = ("adamw", "sgd")


@dataclass
class ErasureHyperparams:
    alpha: float = 1e-3
    beta: float = 0.1
    epsilon: float = 1e-3
    eta: float = 2.0
    steps: int = 1000
    batch: int = 32
    rank: int = 4
    lora_scale: float = 1.0
    attn_weight: float = 1.0
    lambda_mode: str = "implicit"
    objective: str = "full"
    optimizer: str = "adamw"
    holdout_batch: bool = False
    xt_source: str = "path"
    ungated: bool = False
    attn_top_k: int = 0
    mass_rows: str = "image"
    diagnostic: bool = False
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        choices = {
            "lambda_mode": LAMBDA_MODES, "objective": OBJECTIVES, "optimizer": OPTIMIZERS,
            "xt_source": XT_SOURCES, "mass_rows": ("image", "all"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigValidationError(f"{name}={getattr(self, name)!r}; допустимі: {', '.join(allowed)}")
        for name in ("alpha", "beta", "epsilon"):
            if not getattr(self, name) > 0:
                raise ConfigValidationError(f"{name} має бути > 0")
        if self.eta < 0 or self.steps < 0 or self.batch < 1 or self.rank < 1 or self.attn_top_k < 0:
            raise ConfigValidationError("eta, steps, attn_top_k мають бути >= 0, batch і rank >= 1")

    @property
    def uses_lambda(self) -> bool:
        return self.objective == "full" and self.lambda_mode != "zero"

    @property
    def needs_split_gradients(self) -> bool:
        return self.uses_lambda and (self.lambda_mode == "exact" or self.diagnostic)


@dataclass
class StepRecord:
    step: int
    lam: float
    g_tilde: Optional[float]
    l_er: float
    l_erase: float
    l_attn: float
    l_pr: float
    d_sq: float
    drift: float = 0.0
    bound: float = 0.0
    lam_star: Optional[float] = None
    g_true: Optional[float] = None
    regret: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepOutcome:
    scalars: dict
    d_sq: float
    lam_star: Optional[float] = None
    g_pred: Optional[float] = None
    regret: Optional[float] = None


# --- Плоскі вектори параметрів ---

def get_flat(params: Sequence[Tensor]) -> np.ndarray:
    return np.concatenate([p.data.reshape(-1) for p in params])


def set_flat(params: Sequence[Tensor], flat: np.ndarray) -> None:
    offset = 0
    for p in params:
        p.data[...] = flat[offset:offset + p.size].reshape(p.shape)
        offset += p.size


def _split_gradients(lora: GatedLoRA, er: Tensor, pr: Tensor) -> GradientPair:
    params = lora.parameters()
    lora.zero_grad()
    er.backward()
    g_er = flatten_grads(params)
    lora.zero_grad()
    pr.backward()
    g_pr = flatten_grads(params)
    return GradientPair(g_er, g_pr)


# --- Крок ---

def erase_step(
    frozen: SingleStreamModel,
    lora: GatedLoRA,
    state: DualControllerState,
    batch: ErasureBatch,
    rng: np.random.Generator,
    optimizer,
    hp: ErasureHyperparams,
    holdout: Optional[ErasureBatch] = None,
    attn_layers: Optional[Sequence[int]] = None,
) -> tuple[DualControllerState, StepOutcome]:
    losses = compute_losses(frozen, lora, batch, rng, hp.attn_weight, attn_layers, hp.mass_rows, holdout)
    scalars = losses.scalars()
    if not all(np.isfinite(v) for v in scalars.values()):
        raise TrainingError(f"нескінченна або NaN втрата: {scalars}", step=state.step + 1, last_state=state)
    pr_value = scalars["l_pr"]

    # ❶–❷: λ_{t+1} зі зміни L_pr; на першому кроці оновлення пропускається
    if state.prev_pr_loss is None:
        state = state.start_step().observe(pr_value)
    elif hp.uses_lambda:
        state = implicit_lambda_update(state, state.prev_pr_loss, pr_value)
    else:
        g_tilde = (state.prev_pr_loss - pr_value) / state.alpha + state.epsilon
        state = state.start_step().observe(pr_value).annotate(g_tilde=g_tilde)

    outcome = StepOutcome(scalars=scalars, d_sq=0.0)
    params = lora.parameters()

    if hp.needs_split_gradients:
        pair = _split_gradients(lora, losses.er, losses.pr)
        try:
            lam_star_plus = max(lambda_star(pair, hp.epsilon), 0.0)
        except SingularConstraintError:
            logger.warning(f"Крок {state.step}: ‖∇L_pr‖ = 0, напрям d = ∇L_er")
            lam_star_plus = 0.0
        if hp.lambda_mode == "exact":
            state = replace(state, lam=lam_star_plus).annotate(lam=lam_star_plus)
        d = pair.g_er + state.lam * pair.g_pr
        assign_grads(params, d)
        outcome.lam_star = lam_star_plus
        outcome.g_pred = float(pair.g_pr @ d) + hp.epsilon
        outcome.regret = regret_increment(pair, state.lam, hp.epsilon)
    else:
        if hp.objective == "erase-only":
            total = losses.erase
        elif hp.objective == "pr-only":
            total = losses.pr
        elif hp.uses_lambda:
            total = losses.er + losses.pr * state.lam
        else:
            total = losses.er
        lora.zero_grad()
        total.backward()
        d = flatten_grads(params)

    outcome.d_sq = float(d @ d)
    optimizer.step()
    state = state.annotate(l_er=scalars["l_er"], l_pr=pr_value, d_sq=outcome.d_sq)
    return state, outcome


# --- Запуск ---

@dataclass
class ErasureRun:
    lora: GatedLoRA
    state: DualControllerState
    hyperparams: ErasureHyperparams
    diagnostics: ConvergenceDiagnostics
    records: list[StepRecord] = field(default_factory=list)
    attn_layers: Optional[list[int]] = None
    elapsed: float = 0.0


def sample_step_concepts(dataset: ConceptDataset, seed: int, step: int) -> tuple[int, int, np.random.Generator]:
    rng = np.random.default_rng([seed, 3, step])
    c_er = int(rng.choice(dataset.erase_concepts))
    c_pr = int(rng.choice(dataset.preserve_concepts))
    return c_er, c_pr, rng


def run_erasure(
    base: SingleStreamModel,
    dataset: ConceptDataset,
    hp: ErasureHyperparams,
    on_step: Optional[Callable[[StepRecord], None]] = None,
    progress: bool = True,
) -> ErasureRun:
    from interventions import localize, top_k_layers

    frozen = base.frozen()
    lora = GatedLoRA.init(frozen.config, rank=hp.rank, scale=hp.lora_scale, seed=hp.seed, gated=not hp.ungated)
    lora.provenance = {"kind": "erasure", "erase": list(dataset.erase_concepts), "dataset": dataset.name}
    optimizer = make_optimizer(hp.optimizer, lora.parameters(), hp.alpha)
    state = DualControllerState(lam=0.0, epsilon=hp.epsilon, beta=hp.beta, alpha=hp.alpha)
    diagnostics = ConvergenceDiagnostics(smoothness=0.0, epsilon=hp.epsilon, alpha=hp.alpha)

    attn_layers = None
    if hp.attn_top_k:
        profile = localize(frozen, dataset.erase_concepts[0], dataset, batches=4, batch=hp.batch, seed=hp.seed)
        attn_layers = top_k_layers(profile, hp.attn_top_k)
        logger.info(f"L_attn обмежено шарами {attn_layers}")

    holdout = None
    if hp.holdout_batch:
        holdout = build_erasure_batch(
            frozen, dataset, dataset.erase_concepts[0], dataset.preserve_concepts[0],
            hp.batch, hp.eta, hp.seed, 10 ** 9, hp.xt_source,
        )

    if hp.diagnostic:
        c_er, c_pr, _ = sample_step_concepts(dataset, hp.seed, 0)
        first = build_erasure_batch(frozen, dataset, c_er, c_pr, hp.batch, hp.eta, hp.seed, 0, hp.xt_source)
        diagnostics.smoothness = estimate_pr_smoothness(frozen, lora, first, seed=hp.seed)
        logger.info(f"Оцінка гладкості L_pr у θ₀: G≈{diagnostics.smoothness:.4f}")

    run = ErasureRun(lora=lora, state=state, hyperparams=hp, diagnostics=diagnostics, attn_layers=attn_layers)
    started = time.perf_counter()
    pending_g: Optional[float] = None
    regret_total = 0.0

    for step in tqdm(range(1, hp.steps + 1), desc="erase", disable=not progress):
        c_er, c_pr, rng = sample_step_concepts(dataset, hp.seed, step)
        batch = build_erasure_batch(frozen, dataset, c_er, c_pr, hp.batch, hp.eta, hp.seed, step, hp.xt_source)
        run.state, outcome = erase_step(frozen, lora, run.state, batch, rng, optimizer, hp, holdout, attn_layers)

        with no_grad():
            drift = preserve_loss(frozen, lora, holdout if holdout is not None else batch).item()
        diagnostics.record(outcome.d_sq, drift)

        last = run.state.history[-1]
        if outcome.regret is not None:
            regret_total += outcome.regret
        record = StepRecord(
            step=step,
            lam=run.state.lam,
            g_tilde=last.g_tilde,
            l_er=outcome.scalars["l_er"],
            l_erase=outcome.scalars["l_erase"],
            l_attn=outcome.scalars["l_attn"],
            l_pr=outcome.scalars["l_pr"],
            d_sq=outcome.d_sq,
            drift=drift,
            bound=diagnostics.bound[-1],
            lam_star=outcome.lam_star,
            g_true=pending_g if last.g_tilde is not None else None,
            regret=regret_total if outcome.regret is not None else None,
        )
        pending_g = outcome.g_pred
        run.records.append(record)
        if on_step is not None:
            on_step(record)
        if hp.log_every and step % hp.log_every == 0:
            logger.info(
                f"erase крок {step}: λ={record.lam:.4f} L_er={record.l_er:.5f} "
                f"L_pr={record.l_pr:.3e} ‖d‖²={record.d_sq:.3e}"
            )

    run.elapsed = time.perf_counter() - started
    logger.info(f"Стирання завершено за {run.elapsed:.1f} с, фінальна λ={run.state.lam:.4f}")
    return run


def estimate_pr_smoothness(
    base: SingleStreamModel,
    lora: GatedLoRA,
    batch: ErasureBatch,
    samples: int = 16,
    radius: float = 1e-2,
    seed: int = 0,
) -> float:
    """Оцінка G для L_pr у просторі параметрів LoRA навколо їхніх поточних значень."""
    frozen = base.frozen()
    scratch_lora = lora.copy()
    params = scratch_lora.parameters()
    theta = get_flat(params)

    def grad_fn(flat: np.ndarray) -> np.ndarray:
        set_flat(params, flat)
        scratch_lora.zero_grad()
        preserve_loss(frozen, scratch_lora, batch).backward()
        return flatten_grads(params)

    return estimate_smoothness(grad_fn, theta, samples, radius, np.random.default_rng(seed))
