# checkpoints.py
#
# Контейнер чекпойнта: .npz з усіма іменованими тензорами (сирі float64)
# і записом __manifest__ (JSON): формат, версія, вид, конфігурація, її хеш,
# форми тензорів, sha256 по іменах і байтах, довільні extras.

import json
import logging
import zipfile
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from exceptions import CheckpointCompatibilityError, CheckpointCorruptionError
from single_stream import GatedLoRA, ModelConfig, SingleStreamModel, tensor_checksum
from tensor import Tensor

logger = logging.getLogger(__name__)

FORMAT = "concept-erase-checkpoint"
VERSION = 1
MANIFEST_KEY = "__manifest__"


def save_checkpoint(
    path: Union[str, Path],
    obj: Union[SingleStreamModel, GatedLoRA],
    extras: Optional[dict[str, Any]] = None,
) -> str:
    """Повертає контрольну суму записаних тензорів."""
    if isinstance(obj, SingleStreamModel):
        kind, named, lora_meta = "model", obj.named_parameters(), None
    elif isinstance(obj, GatedLoRA):
        kind, named = "lora", obj.named_tensors()
        lora_meta = {"rank": obj.rank, "scale": obj.scale, "gated": obj.gated, "provenance": obj.provenance}
    else:
        raise TypeError(f"неможливо зберегти {type(obj).__name__}")

    checksum = tensor_checksum(named)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "config": obj.config.to_dict(),
        "config_hash": obj.config.config_hash(),
        "shapes": {name: list(t.shape) for name, t in named.items()},
        "checksum": checksum,
        "lora": lora_meta,
        "extras": extras or {},
    }
    arrays = {name: np.ascontiguousarray(t.data, dtype=np.float64) for name, t in named.items()}

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **{MANIFEST_KEY: np.array(json.dumps(manifest, default=float))}, **arrays)
    logger.info(f"Збережено чекпойнт {kind} у {path} (sha256 {checksum[:12]})")
    return checksum


def read_manifest(path: Union[str, Path]) -> dict:
    try:
        with np.load(path, allow_pickle=False) as data:
            return json.loads(str(data[MANIFEST_KEY]))
    except (zipfile.BadZipFile, OSError, ValueError, KeyError, EOFError) as e:
        raise CheckpointCorruptionError(f"не вдалося прочитати {path}: {e}", "container") from e


def load_checkpoint(
    path: Union[str, Path],
    expected_kind: Optional[str] = None,
    base_config: Optional[ModelConfig] = None,
) -> Union[SingleStreamModel, GatedLoRA]:
    """
    Відновлює модель або LoRA побітово. Для LoRA з base_config перевіряється
    збіг хешу конфігурації з базовою моделлю.
    """
    try:
        with np.load(path, allow_pickle=False) as data:
            manifest = json.loads(str(data[MANIFEST_KEY]))
            arrays = {name: np.array(data[name], dtype=np.float64) for name in data.files if name != MANIFEST_KEY}
    except (zipfile.BadZipFile, OSError, ValueError, KeyError, EOFError) as e:
        raise CheckpointCorruptionError(f"не вдалося прочитати {path}: {e}", "container") from e

    if manifest.get("format") != FORMAT:
        raise CheckpointCorruptionError(f"невідомий формат {manifest.get('format')!r}", "format")
    if manifest.get("version") != VERSION:
        raise CheckpointCorruptionError(f"версія {manifest.get('version')} не підтримується (очікується {VERSION})", "version")
    kind = manifest.get("kind")
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointCorruptionError(f"очікувався чекпойнт {expected_kind}, отримано {kind}", "kind")

    shapes = manifest.get("shapes", {})
    if set(shapes) != set(arrays):
        raise CheckpointCorruptionError("набір тензорів не збігається з маніфестом", "shapes")
    for name, arr in arrays.items():
        if list(arr.shape) != shapes[name]:
            raise CheckpointCorruptionError(f"тензор {name}: форма {arr.shape} != {shapes[name]}", "shapes")

    config = ModelConfig.from_dict(manifest["config"])
    if config.config_hash() != manifest.get("config_hash"):
        raise CheckpointCorruptionError("хеш конфігурації не відповідає конфігурації", "config_hash")

    tensors = {name: Tensor(arr, requires_grad=True, name=name) for name, arr in arrays.items()}
    if tensor_checksum(tensors) != manifest.get("checksum"):
        raise CheckpointCorruptionError("контрольна сума тензорів не збігається", "checksum")

    if kind == "model":
        ordered = {name: tensors[name] for name in shapes}
        return SingleStreamModel(config, ordered)
    if kind == "lora":
        if base_config is not None and base_config.config_hash() != config.config_hash():
            raise CheckpointCompatibilityError(
                f"LoRA {path} навчена для іншої базової моделі (хеш {config.config_hash()[:12]})"
            )
        meta = manifest["lora"]
        factors = {key: (tensors[f"{key}.down"], tensors[f"{key}.up"]) for key in GatedLoRA.keys(config)}
        return GatedLoRA(
            config=config, rank=int(meta["rank"]), scale=float(meta["scale"]), factors=factors,
            gated=bool(meta["gated"]), provenance=meta.get("provenance", {}),
        )
    raise CheckpointCorruptionError(f"невідомий вид чекпойнта {kind!r}", "kind")
