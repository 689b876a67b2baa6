# config.py
#
# Конфігурація запуску: dotenv-файл (KEY=value), ключі = імена полів RunConfig
# у верхньому регістрі. Пріоритет: значення за замовчуванням < файл < прапорці CLI.

import hashlib
import logging
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Optional, Union

from dotenv import dotenv_values

from concept_datasets import ConceptDataset, get_dataset
from erase_service import ErasureHyperparams
from exceptions import ConfigValidationError
from single_stream import ModelConfig

logger = logging.getLogger(__name__)

CODE_VERSION = "concept-erase-1.0"
RESOLVED_NAME = "config.resolved.env"
HASH_NAME = "config.sha256"

PHASES = ("train-base", "erase", "sample", "eval", "merge", "diagnose", "bypass-demo", "plot", "sweep", "localize")

# Рекомендовані допуски ε для різних типів концептів
EPSILON_PRESETS = {
    "nudity": 1e-3,
    "style": 1e-3,
    "entity": 1e-2,
    "abstract": 1e-2,
    "celebrity": 1e-2,
    "editability": 5e-3,
}

# Поля, що не впливають на навчені артефакти; до хешу конфігурації не входять
HASH_EXCLUDED = frozenset({
    "phase", "run_dir", "base_ckpt", "lora_ckpt", "n_samples", "sampler_steps", "concept",
    "zero_layers", "merge_spec", "sweep_param", "sweep_values", "sweep_seeds", "log_every",
})

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off", ""}


@dataclass
class RunConfig:
    phase: str = "erase"
    dataset: str = "two-gaussians"
    erase: str = ""
    preserve: str = ""

    # --- Модель ---
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 3
    n_i: int = 4
    n_t: int = 4
    time_embed_dim: int = 16
    ffn_mult: int = 2
    concept_position: int = 1

    # --- Базове навчання ---
    base_steps: int = 2000
    base_lr: float = 1e-3
    base_batch: int = 64
    label_dropout: float = 0.1

    # --- Стирання ---
    alpha: float = 1e-3
    beta: float = 0.1
    epsilon: float = 1e-3
    epsilon_preset: str = ""
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

    # --- Семплювання та оцінка ---
    sampler_steps: int = 9
    n_samples: int = 500
    concept: int = 0
    zero_layers: str = ""

    # --- Злиття та перебір ---
    merge_spec: str = ""
    sweep_param: str = "epsilon"
    sweep_values: str = "1e-4,1e-3,1e-2"
    sweep_seeds: str = "0,1,2,3,4"

    seed: int = 0
    log_every: int = 100
    run_dir: str = ""
    base_ckpt: str = ""
    lora_ckpt: str = ""

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigValidationError(f"phase={self.phase!r}; допустимі: {', '.join(PHASES)}")
        if self.epsilon_preset and self.epsilon_preset not in EPSILON_PRESETS:
            raise ConfigValidationError(
                f"epsilon_preset={self.epsilon_preset!r}; допустимі: {', '.join(EPSILON_PRESETS)}"
            )
        if self.sweep_param not in ("epsilon", "beta"):
            raise ConfigValidationError("sweep_param має бути epsilon або beta")
        if self.sampler_steps < 1 or self.n_samples < 1:
            raise ConfigValidationError("sampler_steps і n_samples мають бути >= 1")
        if not 0.0 <= self.label_dropout < 1.0:
            raise ConfigValidationError("label_dropout має бути в [0, 1)")

    # --- Похідні об'єкти ---

    def get_dataset(self) -> ConceptDataset:
        from utils import parse_int_list

        dataset = get_dataset(self.dataset)
        if self.erase:
            dataset.erase_concepts = parse_int_list(self.erase)
        if self.preserve:
            dataset.preserve_concepts = parse_int_list(self.preserve)
        for c in [*dataset.erase_concepts, *dataset.preserve_concepts]:
            if not 0 <= c < dataset.n_concepts:
                raise ConfigValidationError(f"концепт {c} поза набором {dataset.name} ({dataset.n_concepts} концептів)")
        if set(dataset.erase_concepts) & set(dataset.preserve_concepts):
            raise ConfigValidationError("концепт не може бути одночасно стертим і збереженим")
        if not dataset.erase_concepts or not dataset.preserve_concepts:
            raise ConfigValidationError("потрібен принаймні один стертий і один збережений концепт")
        return dataset

    def model_config(self) -> ModelConfig:
        dataset = get_dataset(self.dataset)
        return ModelConfig(
            d_model=self.d_model, n_heads=self.n_heads, n_layers=self.n_layers,
            n_I=self.n_i, n_T=self.n_t, d_data=dataset.d_data, n_concepts=dataset.n_concepts,
            time_embed_dim=self.time_embed_dim, ffn_mult=self.ffn_mult,
            concept_position=self.concept_position,
        )

    def erasure_hyperparams(self) -> ErasureHyperparams:
        names = {f.name for f in fields(ErasureHyperparams)}
        return ErasureHyperparams(**{k: v for k, v in asdict(self).items() if k in names})

    # --- Серіалізація ---

    def resolved_text(self) -> str:
        data = asdict(self)
        return "".join(f"{key.upper()}={data[key]}\n" for key in sorted(data))

    def config_sha256(self) -> str:
        data = asdict(self)
        text = "".join(f"{key.upper()}={data[key]}\n" for key in sorted(data) if key not in HASH_EXCLUDED)
        return hashlib.sha256((text + CODE_VERSION).encode("utf-8")).hexdigest()


def _cast(name: str, raw: Any, default: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    value = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = value.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigValidationError(f"{name.upper()}={raw!r}: очікується {type(default).__name__}") from None
    return value


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[dict[str, Any]] = None,
) -> RunConfig:
    """
    Збирає RunConfig з файлу і прапорців. Невідомі ключі та помилки
    перетворення типів дають ConfigValidationError. Явний EPSILON
    (у файлі чи прапорцем) має пріоритет над EPSILON_PRESET.
    """
    defaults = {f.name: f.default for f in fields(RunConfig)}
    values: dict[str, Any] = {}

    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigValidationError(f"файл конфігурації {path} не знайдено")
        for key, raw in dotenv_values(path).items():
            name = key.lower()
            if name not in defaults:
                raise ConfigValidationError(f"невідомий ключ конфігурації {key}")
            values[name] = _cast(name, raw if raw is not None else "", defaults[name])

    for name, value in (overrides or {}).items():
        if value is None:
            continue
        if name not in defaults:
            raise ConfigValidationError(f"невідомий параметр {name}")
        values[name] = _cast(name, value, defaults[name])

    preset = values.get("epsilon_preset", "")
    if preset and "epsilon" not in values:
        if preset not in EPSILON_PRESETS:
            raise ConfigValidationError(f"невідомий EPSILON_PRESET={preset!r}")
        values["epsilon"] = EPSILON_PRESETS[preset]

    return RunConfig(**{**defaults, **values})


def resolve_run_dir(config: RunConfig) -> Path:
    if config.run_dir:
        return Path(config.run_dir)
    root = Path(os.environ.get("ERASE_RUN_ROOT", "runs"))
    return root / f"run-{config.config_sha256()[:10]}"


def write_resolved(config: RunConfig, run_dir: Union[str, Path]) -> str:
    """Записує повну конфігурацію і її хеш у каталог запуску. Повертає хеш."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    digest = config.config_sha256()
    (run_dir / RESOLVED_NAME).write_text(config.resolved_text(), encoding="utf-8")
    (run_dir / HASH_NAME).write_text(digest + "\n", encoding="utf-8")
    logger.info(f"Конфігурацію записано у {run_dir} (sha256 {digest[:12]})")
    return digest
