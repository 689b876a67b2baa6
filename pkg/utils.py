# utils.py

from exceptions import ConfigValidationError


def parse_merge_spec(spec_str: str) -> list[tuple[str, float]]:
    """
    Парсить рядок злиття у список [(шлях, вага)].

    Очікуваний формат рядка: 'runs/a/checkpoints/lora.ckpt x 0.5, runs/b/checkpoints/lora.ckpt x 0.5'
    Повертає: [('runs/a/checkpoints/lora.ckpt', 0.5), ('runs/b/checkpoints/lora.ckpt', 0.5)]
    Частина без ' x ' отримує вагу None, яку merge замінить на 1/n.

    Використовується в:
    - main.py (merge)
    """
    if not spec_str or not spec_str.strip():
        return []

    result = []
    for part in spec_str.split(","):
        part = part.strip()
        if not part:
            continue
        # Останній роздільник " x ", щоб шлях міг містити "x"
        if " x " in part:
            path, weight_str = part.rsplit(" x ", 1)
            try:
                weight = float(weight_str)
            except ValueError:
                raise ConfigValidationError(f"некоректна вага у '{part}'") from None
            result.append((path.strip(), weight))
        else:
            result.append((part, None))
    return result


def parse_float_list(values_str: str) -> list[float]:
    """'1e-4,1e-3,1e-2' -> [0.0001, 0.001, 0.01]"""
    try:
        return [float(v) for v in values_str.split(",") if v.strip()]
    except ValueError:
        raise ConfigValidationError(f"очікується список чисел через кому: '{values_str}'") from None


def parse_int_list(values_str: str) -> list[int]:
    try:
        return [int(v) for v in values_str.split(",") if v.strip()]
    except ValueError:
        raise ConfigValidationError(f"очікується список цілих через кому: '{values_str}'") from None
