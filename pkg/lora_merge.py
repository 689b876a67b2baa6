# lora_merge.py
#
# Злиття незалежно навчених стирачів: ΔW_merged = Σ w_i·ΔW_i.
# Реалізується конкатенацією масштабованих факторів, тому тотожність точна,
# а результат лишається GatedLoRA рангу Σ r_i.

import logging
from typing import Optional, Sequence

import numpy as np

from exceptions import ContractError, MergeError
from single_stream import GatedLoRA
from tensor import Tensor

logger = logging.getLogger(__name__)


def merge(loras: Sequence[GatedLoRA], weights: Optional[Sequence[float]] = None) -> GatedLoRA:
    if not loras:
        raise ContractError("merge: порожній список LoRA")
    n = len(loras)
    weights = [1.0 / n] * n if weights is None else [float(w) for w in weights]
    if len(weights) != n:
        raise ContractError(f"merge: {n} LoRA і {len(weights)} ваг")
    if any(w < 0 for w in weights):
        raise ContractError(f"merge: ваги мають бути невід'ємні, отримано {weights}")
    if sum(weights) > 1.0 + 1e-12:
        logger.warning(f"Сума ваг {sum(weights):.3f} > 1: можливе надмірне стирання")

    reference = loras[0]
    keys = list(reference.factors)
    for index, lora in enumerate(loras[1:], start=1):
        if lora.config.config_hash() != reference.config.config_hash():
            raise MergeError(f"LoRA #{index} має іншу конфігурацію моделі")
        if lora.gated != reference.gated:
            raise MergeError(f"LoRA #{index} відрізняється режимом гейта")
        for key in keys:
            if key not in lora.factors:
                raise MergeError(f"LoRA #{index} не має адаптера для {key}", layer=key)
        extra = set(lora.factors) - set(keys)
        if extra:
            layer = sorted(extra)[0]
            raise MergeError(f"LoRA #{index} має зайвий адаптер {layer}", layer=layer)

    factors = {}
    for key in keys:
        downs, ups = [], []
        for index, (lora, w) in enumerate(zip(loras, weights)):
            down, up = lora.factors[key]
            ref_down, ref_up = reference.factors[key]
            if down.shape[0] != ref_down.shape[0] or up.shape[1] != ref_up.shape[1]:
                raise MergeError(
                    f"LoRA #{index}: форми {down.shape}·{up.shape} несумісні з {ref_down.shape}·{ref_up.shape}",
                    layer=key,
                )
            downs.append(w * lora.scale * down.data)
            ups.append(up.data)
        factors[key] = (
            Tensor(np.concatenate(downs, axis=1), requires_grad=True, name=f"{key}.down"),
            Tensor(np.concatenate(ups, axis=0), requires_grad=True, name=f"{key}.up"),
        )

    rank = sum(lora.rank for lora in loras)
    merged = GatedLoRA(
        config=reference.config,
        rank=rank,
        scale=1.0,
        factors=factors,
        gated=reference.gated,
        provenance={
            "kind": "merge",
            "sources": [lora.provenance for lora in loras],
            "weights": weights,
        },
    )
    logger.info(f"Злито {n} LoRA з вагами {weights}, ранг {rank}")
    return merged
