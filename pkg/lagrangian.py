# lagrangian.py
#
# Двоїсте керування вагою збереження:
#   прямa задача   max g_er·d − ½‖d‖²   s.t.  g_pr·d ≥ −ε
#   λ* = (−g_er·g_pr − ε) / ‖g_pr‖²,   d = g_er + max(λ*, 0)·g_pr
#   неявне оновлення  g̃ = (L_pr(θ_{t−1}) − L_pr(θ_t))/α + ε,  λ ← max(λ − β·g̃, 0)
# Оновлення параметрів: θ ← θ − α·d.

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from exceptions import ConfigValidationError, ContractError, DimensionError, NumericError, SingularConstraintError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DualStep:
    step: int
    lam: float
    g_tilde: Optional[float] = None
    l_er: Optional[float] = None
    l_pr: Optional[float] = None
    d_sq: Optional[float] = None


@dataclass(frozen=True)
class DualControllerState:
    lam: float = 0.0
    epsilon: float = 1e-3
    beta: float = 0.1
    alpha: float = 1e-3
    prev_pr_loss: Optional[float] = None
    history: tuple = ()

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigValidationError(f"λ має бути >= 0, отримано {self.lam}")
        for name in ("epsilon", "beta", "alpha"):
            value = getattr(self, name)
            if not value > 0:
                raise ConfigValidationError(f"{name} має бути > 0, отримано {value}")

    @property
    def step(self) -> int:
        return len(self.history)

    def observe(self, pr_loss: float) -> "DualControllerState":
        return replace(self, prev_pr_loss=float(pr_loss))

    def annotate(self, **values) -> "DualControllerState":
        """Доповнює останній запис історії значеннями втрат цього кроку."""
        if not self.history:
            raise ContractError("історія порожня")
        return replace(self, history=self.history[:-1] + (replace(self.history[-1], **values),))

    def start_step(self) -> "DualControllerState":
        """Перший крок: g̃ невизначене, λ₁ = λ₀."""
        return replace(self, history=self.history + (DualStep(step=self.step + 1, lam=self.lam),))


@dataclass
class GradientPair:
    g_er: np.ndarray
    g_pr: np.ndarray

    def __post_init__(self):
        self.g_er = np.asarray(self.g_er, dtype=np.float64).reshape(-1)
        self.g_pr = np.asarray(self.g_pr, dtype=np.float64).reshape(-1)
        if self.g_er.shape != self.g_pr.shape:
            raise DimensionError(f"g_er {self.g_er.shape} і g_pr {self.g_pr.shape} різної довжини")
        if not (np.all(np.isfinite(self.g_er)) and np.all(np.isfinite(self.g_pr))):
            raise NumericError("градієнти містять NaN або нескінченність")


# --- Замкнена форма ---

def lambda_star(pair: GradientPair, epsilon: float) -> float:
    norm_sq = float(pair.g_pr @ pair.g_pr)
    if norm_sq == 0.0:
        raise SingularConstraintError("‖g_pr‖ = 0: обмеження вироджене, використовуйте d = g_er")
    return (-float(pair.g_er @ pair.g_pr) - epsilon) / norm_sq


def surgery_direction(pair: GradientPair, epsilon: float) -> np.ndarray:
    lam = lambda_star(pair, epsilon)
    if lam <= 0.0:
        return pair.g_er.copy()
    return pair.g_er + lam * pair.g_pr


def dual_objective(pair: GradientPair, lam: float, epsilon: float) -> float:
    """L(λ) = ½‖g_er + λ·g_pr‖² + λ·ε; мінімум по λ ≥ 0 досягається в max(λ*, 0)."""
    d = pair.g_er + lam * pair.g_pr
    return 0.5 * float(d @ d) + lam * epsilon


def implicit_lambda_update(state: DualControllerState, pr_prev: float, pr_curr: float) -> DualControllerState:
    if state.prev_pr_loss is None:
        raise ContractError("неявне оновлення λ потребує L_pr попереднього кроку")
    g_tilde = (pr_prev - pr_curr) / state.alpha + state.epsilon
    lam = max(state.lam - state.beta * g_tilde, 0.0)
    entry = DualStep(step=state.step + 1, lam=lam, g_tilde=g_tilde)
    return replace(state, lam=lam, prev_pr_loss=float(pr_curr), history=state.history + (entry,))


# --- Діагностика ---

def estimate_smoothness(
    grad_fn: Callable[[np.ndarray], np.ndarray],
    theta: np.ndarray,
    samples: int,
    radius: float,
    rng: np.random.Generator,
) -> float:
    """
    Нижня оцінка константи G: max ‖∇f(θ₁)−∇f(θ₂)‖/‖θ₁−θ₂‖ по парах
    точок у кулі радіуса radius навколо θ (ковзний максимум).
    """
    if radius <= 0:
        raise ContractError(f"radius має бути > 0, отримано {radius}")
    theta = np.asarray(theta, dtype=np.float64)
    best = 0.0
    for _ in range(samples):
        u1 = rng.standard_normal(theta.shape)
        u2 = rng.standard_normal(theta.shape)
        theta1 = theta + radius * u1 / max(np.linalg.norm(u1), 1e-300)
        theta2 = theta + radius * u2 / max(np.linalg.norm(u2), 1e-300)
        gap = np.linalg.norm(theta1 - theta2)
        if gap == 0.0:
            continue
        best = max(best, float(np.linalg.norm(grad_fn(theta1) - grad_fn(theta2)) / gap))
    return best


@dataclass
class ApproximationGap:
    g_true: float
    g_tilde: float
    bound: float

    @property
    def gap(self) -> float:
        return abs(self.g_tilde - self.g_true)

    @property
    def violated(self) -> bool:
        return self.gap > self.bound + 1e-9


def approximation_gap(
    pr_loss_fn: Callable[[np.ndarray], float],
    pr_grad_fn: Callable[[np.ndarray], np.ndarray],
    theta_prev: np.ndarray,
    d: np.ndarray,
    alpha: float,
    epsilon: float,
    smoothness: float,
) -> ApproximationGap:
    """Порівнює g = ∇L_pr(θ_{t−1})·d + ε з g̃ із різниці втрат після кроку θ_t = θ_{t−1} − α·d."""
    theta_prev = np.asarray(theta_prev, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    theta_curr = theta_prev - alpha * d
    g_true = float(pr_grad_fn(theta_prev) @ d) + epsilon
    g_tilde = (pr_loss_fn(theta_prev) - pr_loss_fn(theta_curr)) / alpha + epsilon
    return ApproximationGap(g_true=g_true, g_tilde=g_tilde, bound=0.5 * smoothness * alpha * float(d @ d))


@dataclass
class ConvergenceDiagnostics:
    smoothness: float
    epsilon: float
    alpha: float
    stationarity: list[float] = field(default_factory=list)
    drift: list[float] = field(default_factory=list)
    bound: list[float] = field(default_factory=list)
    _d_sq_sum: float = 0.0

    def record(self, d_sq: float, drift: float) -> None:
        """d_sq: квадрат норми напряму щойно виконаного кроку; drift: L_pr(θ_t) − L_pr(θ₀) після нього."""
        self._d_sq_sum += d_sq
        t = len(self.stationarity) + 1
        self.stationarity.append(d_sq)
        self.drift.append(drift)
        self.bound.append(t * self.epsilon * self.alpha + 0.5 * self.smoothness * self.alpha ** 2 * self._d_sq_sum)

    def min_stationarity(self) -> list[float]:
        return np.minimum.accumulate(self.stationarity).tolist() if self.stationarity else []

    def __len__(self) -> int:
        return len(self.stationarity)


@dataclass
class DriftRow:
    step: int
    drift: float
    exact_bound: float
    linear_bound: float
    violation: bool


# Межа дрейфу виводиться для кроку з точною λ = max(λ*, 0), де g_pr·d ≥ −ε.
DRIFT_NOTES = {
    "implicit": (
        "неявна λ стартує з λ₀=0 і наздоганяє λ* із запізненням; поки λ_t < λ*_t, "
        "крок не виконує g_pr·d ≥ −ε, і межа на цих кроках не гарантована"
    ),
    "zero": "λ≡0: обмеження збереження не накладається, межа не гарантована",
}


@dataclass
class DriftReport:
    rows: list[DriftRow]
    lambda_mode: str = "exact"

    @property
    def violations(self) -> int:
        return sum(row.violation for row in self.rows)

    @property
    def note(self) -> Optional[str]:
        return DRIFT_NOTES.get(self.lambda_mode) if self.violations else None

    def as_table(self) -> str:
        lines = [f"# {self.note}"] if self.note else []
        lines.append("step\tdrift\texact_bound\tlinear_bound\tviolation")
        lines += [
            f"{r.step}\t{r.drift:.6e}\t{r.exact_bound:.6e}\t{r.linear_bound:.6e}\t{int(r.violation)}"
            for r in self.rows
        ]
        return "\n".join(lines)


def drift_report(
    diagnostics: ConvergenceDiagnostics,
    tolerance: float = 1e-12,
    lambda_mode: str = "exact",
) -> DriftReport:
    rows = []
    for i, (drift, bound) in enumerate(zip(diagnostics.drift, diagnostics.bound), start=1):
        rows.append(DriftRow(
            step=i,
            drift=drift,
            exact_bound=bound,
            linear_bound=i * diagnostics.epsilon * diagnostics.alpha,
            violation=drift > bound + tolerance,
        ))
    report = DriftReport(rows=rows, lambda_mode=lambda_mode)
    if report.violations:
        suffix = f" ({report.note})" if report.note else ""
        logger.warning(f"Межу дрейфу порушено на {report.violations} з {len(rows)} кроків{suffix}")
    return report


def regret_increment(pair: GradientPair, lam: float, epsilon: float) -> float:
    try:
        optimal = max(lambda_star(pair, epsilon), 0.0)
    except SingularConstraintError:
        optimal = 0.0
    return dual_objective(pair, lam, epsilon) - dual_objective(pair, optimal, epsilon)


def dynamic_regret(pairs: list[GradientPair], lambdas: list[float], epsilon: float) -> list[float]:
    """Накопичене R_T = Σ_t [L_t(λ_t) − L_t(max(λ*_t, 0))]."""
    if len(pairs) != len(lambdas):
        raise DimensionError(f"{len(pairs)} пар градієнтів і {len(lambdas)} значень λ")
    return np.cumsum([regret_increment(p, lam, epsilon) for p, lam in zip(pairs, lambdas)]).tolist()
