# single_stream.py
#
# Односторонній (single-stream) трансформер: токени зображення і тексту
# конкатенуються в одну послідовність і проходять через спільні W_Q, W_K, W_V.
# Адаптер LoRA застосовується лише до текстових рядків (селектор S_T).

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Optional, Protocol, Sequence, Union

import numpy as np

from exceptions import ConfigValidationError, ContractError, DimensionError, DomainError
from tensor import (
    Tensor,
    concat_tokens,
    rms_norm,
    silu,
    slice_axis,
    slice_tokens,
    softmax_rows,
    take_rows,
)

logger = logging.getLogger(__name__)

ADAPTED_WEIGHTS = ("w_q", "w_k", "w_v")

ConceptArg = Union[None, int, Sequence[Optional[int]], np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 3
    n_I: int = 4
    n_T: int = 4
    d_data: int = 2
    n_concepts: int = 2
    time_embed_dim: int = 16
    ffn_mult: int = 2
    concept_position: int = 1
    rms_eps: float = 1e-6

    def __post_init__(self):
        counts = {
            "d_model": self.d_model, "n_heads": self.n_heads, "n_layers": self.n_layers,
            "n_I": self.n_I, "n_T": self.n_T, "d_data": self.d_data,
            "n_concepts": self.n_concepts, "time_embed_dim": self.time_embed_dim,
            "ffn_mult": self.ffn_mult,
        }
        for name, value in counts.items():
            if value < 1:
                raise ConfigValidationError(f"{name} має бути >= 1, отримано {value}")
        if self.d_model % self.n_heads:
            raise ConfigValidationError(f"d_model={self.d_model} не ділиться на n_heads={self.n_heads}")
        if self.time_embed_dim % 2:
            raise ConfigValidationError("time_embed_dim має бути парним")
        if not 0 <= self.concept_position < self.n_T:
            raise ConfigValidationError(f"concept_position={self.concept_position} поза шаблоном з {self.n_T} токенів")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @property
    def vocab(self) -> int:
        # концепти 0..n-1 і їхні збурені аліаси n..2n-1; паддінг зберігається окремо
        return 2 * self.n_concepts

    @property
    def seq_len(self) -> int:
        return self.n_I + self.n_T

    @property
    def d_ff(self) -> int:
        return self.ffn_mult * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class ConceptSpan:
    """Включний діапазон [start, end] глобальних індексів токенів; end < start означає порожній."""
    start: int = 0
    end: int = -1

    @property
    def is_empty(self) -> bool:
        return self.end < self.start

    def __len__(self) -> int:
        return 0 if self.is_empty else self.end - self.start + 1

    def columns(self) -> range:
        return range(self.start, self.end + 1)


EMPTY_SPAN = ConceptSpan()


@dataclass
class UnifiedSequence:
    H: Tensor
    n_I: int
    concept_span: ConceptSpan
    token_ids: np.ndarray
    image_rows: Optional[Tensor] = None
    text_content: Optional[Tensor] = None
    text_positions: Optional[Tensor] = None
    concept_rows: Optional[np.ndarray] = None  # (batch,) bool: чи має елемент токен концепту

    def __post_init__(self):
        if self.H.ndim != 3:
            raise DimensionError(f"H має бути (batch, токени, d_model), отримано {self.H.shape}")
        n_tokens = self.H.shape[1]
        if not self.concept_span.is_empty:
            if self.concept_span.start < self.n_I or self.concept_span.end >= n_tokens:
                raise ContractError(
                    f"concept_span {self.concept_span} виходить за текстовий сегмент [{self.n_I}, {n_tokens})"
                )

    @property
    def n_T(self) -> int:
        return self.H.shape[1] - self.n_I

    @property
    def batch(self) -> int:
        return self.H.shape[0]

    @property
    def mixed_concepts(self) -> bool:
        return self.concept_rows is not None and bool(self.concept_rows.any()) and not bool(self.concept_rows.all())

    def require_uniform_span(self) -> ConceptSpan:
        """Діапазон концепту спільний для батчу лише тоді, коли концепт мають усі елементи або жоден."""
        if self.mixed_concepts:
            raise ContractError(
                f"змішаний батч: концепт мають {int(self.concept_rows.sum())} з {self.batch} елементів"
            )
        return self.concept_span


class TextAdapter(Protocol):
    gated: bool

    def delta_term(self, x: Tensor, key: str) -> Tensor: ...


@dataclass
class GatedLoRA:
    """ΔW = scale·down·up для кожної W ∈ {W_Q, W_K, W_V} кожного шару."""
    config: ModelConfig
    rank: int
    scale: float
    factors: dict[str, tuple[Tensor, Tensor]]
    gated: bool = True
    provenance: dict[str, Any] = field(default_factory=dict)

    @staticmethod
    def keys(config: ModelConfig) -> list[str]:
        return [f"blocks.{layer}.{name}" for layer in range(config.n_layers) for name in ADAPTED_WEIGHTS]

    @classmethod
    def init(
        cls,
        config: ModelConfig,
        rank: int = 4,
        scale: float = 1.0,
        seed: int = 0,
        gated: bool = True,
        init_std: float = 0.02,
    ) -> "GatedLoRA":
        if rank < 1:
            raise ConfigValidationError(f"ранг LoRA має бути >= 1, отримано {rank}")
        rng = np.random.default_rng(seed)
        factors = {}
        for key in cls.keys(config):
            down = Tensor(rng.normal(0.0, init_std, (config.d_model, rank)), requires_grad=True, name=f"{key}.down")
            up = Tensor(np.zeros((rank, config.d_model)), requires_grad=True, name=f"{key}.up")
            factors[key] = (down, up)
        return cls(config=config, rank=rank, scale=scale, factors=factors, gated=gated)

    def delta_term(self, x: Tensor, key: str) -> Tensor:
        down, up = self.factors[key]
        return ((x @ down) @ up) * self.scale

    def effective_delta(self, key: str) -> np.ndarray:
        down, up = self.factors[key]
        return self.scale * (down.data @ up.data)

    def parameters(self) -> list[Tensor]:
        return [t for pair in self.factors.values() for t in pair]

    def named_tensors(self) -> dict[str, Tensor]:
        named = {}
        for key, (down, up) in self.factors.items():
            named[f"{key}.down"] = down
            named[f"{key}.up"] = up
        return named

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def copy(self) -> "GatedLoRA":
        factors = {
            key: (Tensor(d.data.copy(), requires_grad=True, name=d.name), Tensor(u.data.copy(), requires_grad=True, name=u.name))
            for key, (d, u) in self.factors.items()
        }
        return GatedLoRA(self.config, self.rank, self.scale, factors, self.gated, dict(self.provenance))

    def checksum(self) -> str:
        return tensor_checksum(self.named_tensors())


@dataclass
class DenseDelta:
    """Щільні ΔW; еталон для перевірки лінійності злиття."""
    deltas: dict[str, np.ndarray]
    gated: bool = True

    def delta_term(self, x: Tensor, key: str) -> Tensor:
        return x @ Tensor(self.deltas[key])


@dataclass
class AttentionRecord:
    layer: int
    A: Tensor  # (batch, heads, N, N), після softmax
    n_I: int

    def block(self, name: str) -> np.ndarray:
        a = self.A.data
        n = self.n_I
        blocks = {
            "II": a[..., :n, :n],
            "IT": a[..., :n, n:],
            "TI": a[..., n:, :n],
            "TT": a[..., n:, n:],
        }
        return blocks[name]

    @property
    def a_ii(self) -> np.ndarray:
        return self.block("II")

    @property
    def a_it(self) -> np.ndarray:
        return self.block("IT")

    @property
    def a_ti(self) -> np.ndarray:
        return self.block("TI")

    @property
    def a_tt(self) -> np.ndarray:
        return self.block("TT")


@dataclass(frozen=True)
class ZeroingPlan:
    span: ConceptSpan
    layers: Optional[frozenset] = None
    renormalize: bool = True

    def applies_to(self, layer: int) -> bool:
        return not self.span.is_empty and (self.layers is None or layer in self.layers)


@dataclass
class ForwardResult:
    velocity: Tensor
    attn: list[AttentionRecord]


def timestep_features(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = 100.0 * t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


def tensor_checksum(named: dict[str, Tensor]) -> str:
    digest = hashlib.sha256()
    for name in sorted(named):
        arr = named[name].data
        digest.update(name.encode())
        digest.update(str(arr.shape).encode())
        digest.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return digest.hexdigest()


class SingleStreamModel:

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "SingleStreamModel":
        rng = np.random.default_rng(seed)
        d, cfg = config.d_model, config

        def normal(name: str, shape: tuple, std: float) -> Tensor:
            return Tensor(rng.normal(0.0, std, shape), requires_grad=True, name=name)

        def ones(name: str, size: int) -> Tensor:
            return Tensor(np.ones(size), requires_grad=True, name=name)

        params = {
            "embed.w_in": normal("embed.w_in", (cfg.d_data, d), 1.0 / math.sqrt(cfg.d_data)),
            "embed.pos_img": normal("embed.pos_img", (cfg.n_I, d), 0.5),
            "embed.tokens": normal("embed.tokens", (cfg.vocab, d), 1.0),
            "embed.pad": normal("embed.pad", (1, d), 1.0),
            "embed.pos_txt": normal("embed.pos_txt", (cfg.n_T, d), 0.5),
            "embed.w_time": normal("embed.w_time", (cfg.time_embed_dim, d), 1.0 / math.sqrt(cfg.time_embed_dim)),
        }
        for layer in range(cfg.n_layers):
            p = f"blocks.{layer}."
            params[p + "norm1"] = ones(p + "norm1", d)
            for name in ("w_q", "w_k", "w_v", "w_o"):
                params[p + name] = normal(p + name, (d, d), 1.0 / math.sqrt(d))
            params[p + "norm2"] = ones(p + "norm2", d)
            params[p + "w_ff1"] = normal(p + "w_ff1", (d, cfg.d_ff), 1.0 / math.sqrt(d))
            params[p + "w_ff2"] = normal(p + "w_ff2", (cfg.d_ff, d), 0.5 / math.sqrt(cfg.d_ff))
        params["head.norm"] = ones("head.norm", d)
        params["head.w_out"] = normal("head.w_out", (d, cfg.d_data), 1.0 / math.sqrt(d))

        model = cls(config, params)
        model.refresh_perturbed_tokens(seed=seed)
        return model

    # --- Параметри ---
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def copy(self, requires_grad: bool = True) -> "SingleStreamModel":
        params = {
            name: Tensor(t.data.copy(), requires_grad=requires_grad, name=name)
            for name, t in self.params.items()
        }
        return SingleStreamModel(self.config, params)

    def frozen(self) -> "SingleStreamModel":
        """Копія з requires_grad=False: градієнт до неї не доходить."""
        return self.copy(requires_grad=False)

    def checksum(self) -> str:
        return tensor_checksum(self.params)

    def perturbed_id(self, concept: int) -> int:
        return self.config.n_concepts + concept

    def refresh_perturbed_tokens(self, seed: int = 0, sigma: float = 0.05) -> None:
        """Ембеддінг аліасу = ембеддінг концепту + N(0, σ²); викликається після навчання."""
        rng = np.random.default_rng([seed, 7919])
        table = self.params["embed.tokens"].data
        n = self.config.n_concepts
        for concept in range(n):
            table[n + concept] = table[concept] + rng.normal(0.0, sigma, table.shape[1])

    # --- Вбудовування ---
    def _concept_ids(self, concept: ConceptArg, batch: int) -> np.ndarray:
        if concept is None or isinstance(concept, (int, np.integer)):
            ids = np.full(batch, -1 if concept is None else int(concept), dtype=np.int64)
        else:
            ids = np.array([-1 if c is None else int(c) for c in concept], dtype=np.int64)
            if ids.shape[0] != batch:
                raise DimensionError(f"кількість концептів {ids.shape[0]} не відповідає батчу {batch}")
        if (ids >= self.config.vocab).any() or (ids < -1).any():
            raise DomainError(f"id концепту поза словником розміру {self.config.vocab}: {ids.tolist()}")
        return ids

    def embed(self, x_t: np.ndarray, concept: ConceptArg, t: Union[float, np.ndarray]) -> UnifiedSequence:
        cfg = self.config
        x = np.asarray(x_t, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[1:] != (cfg.n_I, cfg.d_data):
            raise DimensionError(f"x_t має форму {x.shape}, очікується (batch, {cfg.n_I}, {cfg.d_data})")
        batch = x.shape[0]
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,)).copy()

        ids = self._concept_ids(concept, batch)
        token_ids = np.full((batch, cfg.n_T), -1, dtype=np.int64)
        token_ids[:, cfg.concept_position] = ids

        time_e = (Tensor(timestep_features(t_arr, cfg.time_embed_dim)) @ self.params["embed.w_time"])
        time_e = time_e.reshape(batch, 1, cfg.d_model)

        image = Tensor(x) @ self.params["embed.w_in"] + self.params["embed.pos_img"] + time_e
        table = concat_tokens([self.params["embed.pad"], self.params["embed.tokens"]])
        content = take_rows(table, token_ids + 1) + time_e
        positions = self.params["embed.pos_txt"]
        H = concat_tokens([image, content + positions])

        if (ids >= 0).any():
            start = cfg.n_I + cfg.concept_position
            span = ConceptSpan(start, start)
        else:
            span = EMPTY_SPAN
        return UnifiedSequence(
            H=H, n_I=cfg.n_I, concept_span=span, token_ids=token_ids,
            image_rows=image, text_content=content, text_positions=positions, concept_rows=ids >= 0,
        )

    # --- Прямий прохід ---
    def project(
        self,
        x: Tensor,
        layer: int,
        name: str,
        lora: Optional[TextAdapter] = None,
        n_I: Optional[int] = None,
    ) -> Tensor:
        """x·W (+ S_T·x·ΔW). Рядки зображення лишаються буквально рядками замороженої проєкції."""
        key = f"blocks.{layer}.{name}"
        proj = x @ self.params[key]
        if lora is None or name not in ADAPTED_WEIGHTS:
            return proj
        if not lora.gated:
            return proj + lora.delta_term(x, key)
        n_I = self.config.n_I if n_I is None else n_I
        n_tokens = x.shape[-2]
        if n_tokens == n_I:
            return proj
        text_x = slice_tokens(x, n_I, n_tokens)
        return concat_tokens([
            slice_tokens(proj, 0, n_I),
            slice_tokens(proj, n_I, n_tokens) + lora.delta_term(text_x, key),
        ])

    def _split_heads(self, x: Tensor) -> Tensor:
        batch, n_tokens, _ = x.shape
        cfg = self.config
        return x.reshape(batch, n_tokens, cfg.n_heads, cfg.d_k).transpose(0, 2, 1, 3)

    def _merge_heads(self, x: Tensor) -> Tensor:
        batch, _, n_tokens, _ = x.shape
        return x.transpose(0, 2, 1, 3).reshape(batch, n_tokens, self.config.d_model)

    def forward(
        self,
        seq: UnifiedSequence,
        lora: Optional[TextAdapter] = None,
        zeroing: Optional[ZeroingPlan] = None,
    ) -> ForwardResult:
        cfg = self.config
        h = seq.H
        if h.shape[-1] != cfg.d_model:
            raise DimensionError(f"ширина токенів {h.shape[-1]} != d_model={cfg.d_model}")
        n_I = seq.n_I
        n_tokens = h.shape[1]
        inv_sqrt_dk = 1.0 / math.sqrt(cfg.d_k)
        records: list[AttentionRecord] = []

        for layer in range(cfg.n_layers):
            p = f"blocks.{layer}."
            x = rms_norm(h, cfg.rms_eps) * self.params[p + "norm1"]
            q = self._split_heads(self.project(x, layer, "w_q", lora, n_I))
            k = self._split_heads(self.project(x, layer, "w_k", lora, n_I))
            v = self._split_heads(self.project(x, layer, "w_v", lora, n_I))

            attn = softmax_rows((q @ k.mT) * inv_sqrt_dk)
            if zeroing is not None and zeroing.applies_to(layer):
                attn = _zero_columns(attn, zeroing.span, zeroing.renormalize, n_tokens)
            records.append(AttentionRecord(layer=layer, A=attn, n_I=n_I))

            h = h + self._merge_heads(attn @ v) @ self.params[p + "w_o"]
            x2 = rms_norm(h, cfg.rms_eps) * self.params[p + "norm2"]
            h = h + silu(x2 @ self.params[p + "w_ff1"]) @ self.params[p + "w_ff2"]

        out = rms_norm(h, cfg.rms_eps) * self.params["head.norm"]
        velocity = slice_tokens(out, 0, n_I) @ self.params["head.w_out"]
        return ForwardResult(velocity=velocity, attn=records)

    def velocity(
        self,
        x_t: np.ndarray,
        concept: ConceptArg,
        t: Union[float, np.ndarray],
        lora: Optional[TextAdapter] = None,
        zeroing: Any = None,
    ) -> Tensor:
        seq = self.embed(x_t, concept, t)
        plan = zeroing.plan_for(seq) if hasattr(zeroing, "plan_for") else zeroing
        return self.forward(seq, lora, plan).velocity


def _zero_columns(attn: Tensor, span: ConceptSpan, renormalize: bool, n_tokens: int) -> Tensor:
    mask = np.ones(n_tokens)
    mask[span.start:span.end + 1] = 0.0
    zeroed = attn * Tensor(mask)
    if not renormalize:
        return zeroed
    return zeroed / zeroed.sum(axis=-1, keepdims=True)


# --- Аналіз уваги ---

def attention_mass(
    attn: Sequence[AttentionRecord],
    span: ConceptSpan,
    rows: str = "image",
    layers: Optional[Sequence[int]] = None,
) -> Tensor:
    """
    Середня (по шарах, головах, рядках-запитах і батчу) маса уваги,
    що тече в стовпці span. rows="image" обмежує запити блоком A_{I←T}.
    """
    if span.is_empty:
        return Tensor(0.0)
    if rows not in ("image", "all"):
        raise ContractError(f"rows має бути 'image' або 'all', отримано {rows!r}")
    selected = [rec for rec in attn if layers is None or rec.layer in layers]
    if not selected:
        raise ContractError(f"жоден шар не вибрано: {layers}")

    total = None
    for rec in selected:
        cols = slice_axis(rec.A, -1, span.start, span.end + 1)
        if rows == "image":
            cols = slice_tokens(cols, 0, rec.n_I)
        part = cols.sum()
        total = part if total is None else total + part

    batch, heads, n_rows, _ = selected[0].A.shape
    if rows == "image":
        n_rows = selected[0].n_I
    return total * (1.0 / (len(selected) * batch * heads * n_rows))


def permute_text(seq: UnifiedSequence, order: Sequence[int]) -> UnifiedSequence:
    """Переставляє текстові токени за order (відносні позиції); позиційні ембеддінги лишаються на місцях."""
    if seq.text_content is None or seq.text_positions is None or seq.image_rows is None:
        raise ContractError("послідовність не містить складових для перестановки тексту")
    order = [int(i) for i in order]
    if sorted(order) != list(range(seq.n_T)):
        raise ContractError(f"order не є перестановкою {seq.n_T} позицій: {order}")

    span = seq.concept_span
    new_span = EMPTY_SPAN
    if not span.is_empty:
        block = [c - seq.n_I for c in span.columns()]
        start = order.index(block[0])
        if order[start:start + len(block)] != block:
            raise ContractError("перестановка розриває блок концепту")
        new_span = ConceptSpan(seq.n_I + start, seq.n_I + start + len(block) - 1)

    content = concat_tokens([slice_tokens(seq.text_content, i, i + 1) for i in order])
    H = concat_tokens([seq.image_rows, content + seq.text_positions])
    return UnifiedSequence(
        H=H, n_I=seq.n_I, concept_span=new_span, token_ids=seq.token_ids[:, order],
        image_rows=seq.image_rows, text_content=content, text_positions=seq.text_positions,
        concept_rows=seq.concept_rows,
    )


def shuffle_tokens(seq: UnifiedSequence, rng: Optional[np.random.Generator]) -> UnifiedSequence:
    """
    Випадковий порядок слів при навчанні: паддінг переставляється навколо
    неперервного блоку концепту, concept_span перераховується.
    rng=None дає тотожну перестановку.
    """
    if rng is None or seq.n_T < 2:
        return seq
    span = seq.concept_span
    block = [] if span.is_empty else [c - seq.n_I for c in span.columns()]
    others = [i for i in range(seq.n_T) if i not in block]
    shuffled = [int(i) for i in rng.permutation(others)]
    cut = int(rng.integers(0, len(shuffled) + 1))
    return permute_text(seq, shuffled[:cut] + block + shuffled[cut:])
