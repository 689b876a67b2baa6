# tests/test_acceptance.py
#
# Наскрізні прогони на базовій моделі, навченій з нуля. Запуск: pytest -m slow

import asyncio
from dataclasses import replace

import numpy as np
import pytest

from concept_datasets import get_dataset
from config import RunConfig
from erase_service import run_erasure
from flow_matching import euler_sample, train_base
from interventions import bypass_demo
from lora_merge import merge
from metrics import eval_erasure
from single_stream import SingleStreamModel

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2, 3, 4)
N_EVAL = 300


def _trained(dataset_name: str) -> tuple[SingleStreamModel, RunConfig]:
    cfg = RunConfig(dataset=dataset_name)
    model = SingleStreamModel.init(cfg.model_config(), seed=0)
    train_base(
        model, cfg.get_dataset(), steps=cfg.base_steps, lr=cfg.base_lr, batch=cfg.base_batch,
        label_dropout=cfg.label_dropout, log_every=0, progress=False,
    )
    return model, cfg


@pytest.fixture(scope="module")
def two_gaussians():
    return _trained("two-gaussians")


@pytest.fixture(scope="module")
def three_gaussians():
    return _trained("three-gaussians")


def _evaluate(base, lora, dataset):
    return asyncio.run(eval_erasure(base, lora, dataset, n=N_EVAL, steps=9, seed=11))


def _median_over_seeds(base, cfg, **overrides):
    dataset = cfg.get_dataset()
    efficacy, self_distance, preservation, noise = [], [], [], []
    for seed in SEEDS:
        hp = replace(cfg.erasure_hyperparams(), seed=seed, log_every=0, **overrides)
        summary = _evaluate(base, run_erasure(base, dataset, hp, progress=False).lora, dataset)
        efficacy.append(summary.efficacy_to_original[0])
        self_distance.append(summary.self_distance[0])
        preservation.append(summary.preservation[1])
        noise.append(summary.noise_floor[1])
    return {
        "efficacy": float(np.median(efficacy)),
        "self_distance": float(np.median(self_distance)),
        "preservation": float(np.median(preservation)),
        "noise_floor": float(np.median(noise)),
    }


@pytest.fixture(scope="module")
def reference(two_gaussians):
    base, cfg = two_gaussians
    return _median_over_seeds(base, cfg)


def test_erasure_efficacy_and_preservation(reference):
    assert reference["efficacy"] >= 10.0 * reference["self_distance"]
    assert reference["preservation"] < 3.0 * reference["noise_floor"]


def test_epsilon_controls_tradeoff(two_gaussians):
    base, cfg = two_gaussians
    curves = [_median_over_seeds(base, cfg, epsilon=eps) for eps in (1e-4, 1e-3, 1e-2)]
    efficacy = [c["efficacy"] for c in curves]
    preservation = [c["preservation"] for c in curves]
    assert efficacy == sorted(efficacy)
    assert preservation == sorted(preservation)


def test_token_zeroing_is_bypassed(two_gaussians):
    base, _ = two_gaussians
    assert bypass_demo(base.frozen(), 0, n=N_EVAL, seed=3).bypass_holds


def test_ablations_are_worse(two_gaussians, reference):
    base, cfg = two_gaussians
    no_lambda = _median_over_seeds(base, cfg, lambda_mode="zero")
    preserve_only = _median_over_seeds(base, cfg, objective="pr-only")
    assert no_lambda["preservation"] > reference["preservation"]
    assert preserve_only["efficacy"] < reference["efficacy"]


def test_merged_erasers(three_gaussians):
    base, cfg = three_gaussians
    loras = []
    for concept in (0, 1):
        dataset = replace(cfg, erase=str(concept), preserve="2").get_dataset()
        loras.append(run_erasure(base, dataset, replace(cfg.erasure_hyperparams(), log_every=0), progress=False).lora)
    merged = merge(loras, [0.5, 0.5])
    summary = _evaluate(base, merged, cfg.get_dataset())
    for concept in (0, 1):
        assert summary.efficacy_to_original[concept] >= 2.0 * summary.self_distance[concept]
    assert summary.preservation_passes(2)


def test_base_training_reaches_quarter_of_initial_loss():
    cfg = RunConfig(dataset="two-gaussians")
    ratios = []
    for seed in (0, 1, 2):
        model = SingleStreamModel.init(cfg.model_config(), seed=seed)
        result = train_base(
            model, cfg.get_dataset(), steps=2000, lr=cfg.base_lr, batch=cfg.base_batch,
            seed=seed, log_every=0, progress=False,
        )
        ratios.append(np.mean(result.losses[-100:]) / np.mean(result.losses[:10]))
    assert np.median(ratios) < 0.25


def test_two_mode_sampling_lands_on_requested_mode():
    base, cfg = _trained("two-modes-1d")
    dataset = cfg.get_dataset()
    mode, sigma = dataset.concepts[0].mean[0], dataset.component_std(0)
    samples = euler_sample(base.frozen(), 0, 500, steps=50, seed=7)[:, 0, 0]
    assert np.mean(np.abs(samples - mode) <= 3.0 * sigma) >= 0.95
