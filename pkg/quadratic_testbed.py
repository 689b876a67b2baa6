# quadratic_testbed.py
#
# Детермінований квадратичний полігон для перевірки двоїстого керування:
#   L_er(θ) = ½(θ−a)ᵀA_er(θ−a),   L_pr(θ) = ½(θ−b)ᵀA_pr(θ−b)
# з аналітичною константою гладкості G = ‖A_pr‖₂ і простим спуском θ ← θ − α·d.

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from exceptions import ContractError, SingularConstraintError
from lagrangian import (
    ConvergenceDiagnostics,
    DualControllerState,
    GradientPair,
    approximation_gap,
    drift_report,
    dynamic_regret,
    implicit_lambda_update,
    lambda_star,
    surgery_direction,
)

logger = logging.getLogger(__name__)

LAMBDA_MODES = ("implicit", "exact")


@dataclass(frozen=True)
class QuadraticProblem:
    A_er: np.ndarray
    a: np.ndarray
    A_pr: np.ndarray
    b: np.ndarray
    theta0: np.ndarray

    @classmethod
    def default(cls) -> "QuadraticProblem":
        """Мінімуми L_er і L_pr конфліктують: крок до a збільшує L_pr."""
        return cls(
            A_er=np.diag([1.0, 2.0]),
            a=np.array([1.5, 1.0]),
            A_pr=np.diag([2.0, 1.0]),
            b=np.zeros(2),
            theta0=np.array([1.0, 1.0]),
        )

    @property
    def smoothness(self) -> float:
        return float(np.linalg.norm(self.A_pr, 2))

    def l_er(self, theta: np.ndarray) -> float:
        r = theta - self.a
        return 0.5 * float(r @ self.A_er @ r)

    def grad_er(self, theta: np.ndarray) -> np.ndarray:
        return self.A_er @ (theta - self.a)

    def l_pr(self, theta: np.ndarray) -> float:
        r = theta - self.b
        return 0.5 * float(r @ self.A_pr @ r)

    def grad_pr(self, theta: np.ndarray) -> np.ndarray:
        return self.A_pr @ (theta - self.b)


@dataclass
class QuadraticStep:
    step: int
    lam: float
    lam_star_plus: float
    l_er: float
    l_pr: float
    d_sq: float
    drift: float
    drift_bound: float
    g_tilde: Optional[float] = None
    g_true: Optional[float] = None
    gap_bound: Optional[float] = None

    @property
    def gap(self) -> Optional[float]:
        return None if self.g_tilde is None else abs(self.g_tilde - self.g_true)


@dataclass
class QuadraticRun:
    mode: str
    alpha: float
    beta: float
    epsilon: float
    steps: list[QuadraticStep] = field(default_factory=list)
    diagnostics: Optional[ConvergenceDiagnostics] = None
    regret: list[float] = field(default_factory=list)

    @property
    def max_gap(self) -> float:
        gaps = [s.gap for s in self.steps if s.gap is not None]
        return max(gaps) if gaps else 0.0

    @property
    def gap_violations(self) -> int:
        return sum(1 for s in self.steps if s.gap is not None and s.gap > s.gap_bound + 1e-9)

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([s.lam for s in self.steps])

    @property
    def lambda_stars(self) -> np.ndarray:
        return np.array([s.lam_star_plus for s in self.steps])


def run_quadratic(
    problem: QuadraticProblem,
    steps: int = 500,
    alpha: float = 0.05,
    beta: float = 0.1,
    epsilon: float = 1e-3,
    mode: str = "implicit",
) -> QuadraticRun:
    """
    Одна ітерація: λ оновлюється з L_pr (implicit) або береться як max(λ*, 0) (exact),
    d = g_er + λ·g_pr, θ ← θ − α·d. Похибка апроксимації g̃ рахується для попереднього кроку.
    """
    if mode not in LAMBDA_MODES:
        raise ContractError(f"невідомий режим λ: {mode!r}")
    G = problem.smoothness
    state = DualControllerState(lam=0.0, epsilon=epsilon, beta=beta, alpha=alpha)
    run = QuadraticRun(mode=mode, alpha=alpha, beta=beta, epsilon=epsilon)
    run.diagnostics = ConvergenceDiagnostics(smoothness=G, epsilon=epsilon, alpha=alpha)

    theta = problem.theta0.astype(np.float64).copy()
    pr0 = problem.l_pr(theta)
    theta_prev: Optional[np.ndarray] = None
    d_prev: Optional[np.ndarray] = None
    pairs: list[GradientPair] = []
    lambdas: list[float] = []

    for t in range(1, steps + 1):
        pr = problem.l_pr(theta)
        if state.prev_pr_loss is None:
            state = state.start_step().observe(pr)
        else:
            state = implicit_lambda_update(state, state.prev_pr_loss, pr)

        pair = GradientPair(problem.grad_er(theta), problem.grad_pr(theta))
        try:
            lam_star_plus = max(lambda_star(pair, epsilon), 0.0)
        except SingularConstraintError:
            lam_star_plus = 0.0
        lam = lam_star_plus if mode == "exact" else state.lam
        d = pair.g_er + lam * pair.g_pr
        pairs.append(pair)
        lambdas.append(lam)

        record = QuadraticStep(
            step=t, lam=lam, lam_star_plus=lam_star_plus, l_er=problem.l_er(theta), l_pr=pr,
            d_sq=float(d @ d), drift=0.0, drift_bound=0.0,
        )
        if d_prev is not None:
            gap = approximation_gap(problem.l_pr, problem.grad_pr, theta_prev, d_prev, alpha, epsilon, G)
            record.g_tilde, record.g_true, record.gap_bound = gap.g_tilde, gap.g_true, gap.bound

        theta_prev, d_prev = theta, d
        theta = theta - alpha * d
        run.diagnostics.record(record.d_sq, problem.l_pr(theta) - pr0)
        record.drift = run.diagnostics.drift[-1]
        record.drift_bound = run.diagnostics.bound[-1]
        run.steps.append(record)

    run.regret = dynamic_regret(pairs, lambdas, epsilon)
    return run


# --- Незалежний оракул прямої задачі ---

class ActiveSetSolver:
    """
    min ½xᵀQx + cᵀx  s.t.  Gx ≤ h  методом активної множини:
    розв'язується система ККТ для поточної множини, додається найгірше
    порушене обмеження, відкидається обмеження з від'ємним множником.
    """

    def __init__(self, max_iter: int = 100, tol: float = 1e-10):
        self.max_iter = max_iter
        self.tol = tol

    def solve(self, Q: np.ndarray, c: np.ndarray, G: np.ndarray, h: np.ndarray) -> np.ndarray:
        n = Q.shape[0]
        active: list[int] = []
        for _ in range(self.max_iter):
            k = len(active)
            G_active = G[active]
            kkt = np.zeros((n + k, n + k))
            kkt[:n, :n] = Q
            kkt[:n, n:] = G_active.T
            kkt[n:, :n] = G_active
            rhs = np.concatenate([-c, h[active]])
            sol = np.linalg.solve(kkt, rhs)
            x, multipliers = sol[:n], sol[n:]

            if k and multipliers.min() < -self.tol:
                active.pop(int(np.argmin(multipliers)))
                continue
            violations = G @ x - h
            if np.all(violations <= self.tol):
                return x
            worst = int(np.argmax(violations))
            if worst in active:
                raise ContractError("активна множина зациклилась")
            active.append(worst)
        raise ContractError(f"ActiveSetSolver не зійшовся за {self.max_iter} ітерацій")


def qp_direction(pair: GradientPair, epsilon: float, solver: Optional[ActiveSetSolver] = None) -> np.ndarray:
    """max g_er·d − ½‖d‖² s.t. g_pr·d ≥ −ε, записане як мінімізація для ActiveSetSolver."""
    solver = solver or ActiveSetSolver()
    n = pair.g_er.size
    return solver.solve(np.eye(n), -pair.g_er, -pair.g_pr[None, :], np.array([epsilon]))


# --- Набір перевірок ---

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


@dataclass
class VerificationReport:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def as_text(self) -> str:
        lines = [f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}" for c in self.checks]
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def check_dual_closed_form(n_pairs: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    solver = ActiveSetSolver()
    worst_qp, worst_kkt = 0.0, 0.0
    for _ in range(n_pairs):
        dim = int(rng.integers(1, 9))
        pair = GradientPair(rng.uniform(-1, 1, dim), rng.uniform(-1, 1, dim))
        epsilon = float(rng.uniform(0.0, 0.5))
        d = surgery_direction(pair, epsilon)
        worst_qp = max(worst_qp, float(np.max(np.abs(d - qp_direction(pair, epsilon, solver)))))
        if lambda_star(pair, epsilon) > 0:
            scale = max(epsilon, abs(float(pair.g_er @ pair.g_pr)), 1.0)
            worst_kkt = max(worst_kkt, abs(float(pair.g_pr @ d) + epsilon) / scale)
    passed = worst_qp <= 1e-6 and worst_kkt < 1e-10
    return CheckResult("замкнена форма двоїстої задачі", passed, f"max|d−d_qp|={worst_qp:.2e}, ККТ={worst_kkt:.2e}")


def check_approximation(problem: QuadraticProblem, steps: int = 500, alpha: float = 0.05) -> CheckResult:
    full = run_quadratic(problem, steps=steps, alpha=alpha)
    half = run_quadratic(problem, steps=steps, alpha=alpha / 2)
    tenth = run_quadratic(problem, steps=steps, alpha=alpha / 10)
    ratio_half = half.max_gap / full.max_gap if full.max_gap else 0.0
    ratio_tenth = tenth.max_gap / full.max_gap if full.max_gap else 0.0
    passed = full.gap_violations == 0 and half.gap_violations == 0 and ratio_half <= 0.5 + 1e-6
    return CheckResult(
        "межа похибки апроксимації", passed,
        f"порушень={full.gap_violations}, α/2: {ratio_half:.4f}, α/10: {ratio_tenth:.4f}",
    )


def check_drift(problem: QuadraticProblem, steps: int = 500, epsilons: tuple = (1e-3, 1e-2)) -> CheckResult:
    details, passed = [], True
    for eps in epsilons:
        report = drift_report(run_quadratic(problem, steps=steps, epsilon=eps, mode="exact").diagnostics)
        passed = passed and report.violations == 0
        details.append(f"ε={eps:g}: {report.violations}")
    return CheckResult("межа дрейфу L_pr", passed, ", ".join(details))


def check_stationarity(problem: QuadraticProblem, steps: int = 2000, threshold: float = 1e-4) -> CheckResult:
    run = run_quadratic(problem, steps=steps)
    series = run.diagnostics.min_stationarity()
    monotone = all(b <= a for a, b in zip(series, series[1:]))
    passed = monotone and series[-1] < threshold
    return CheckResult("стаціонарність за Парето", passed, f"min‖d‖²={series[-1]:.3e}, монотонно={monotone}")


def check_dual_agreement(
    problem: QuadraticProblem,
    steps: int = 200,
    burn_in: int = 50,
    window: int = 20,
    band: float = 0.1,
) -> CheckResult:
    """Неявна λ_t проти ковзного середнього max(λ*, 0) окремого exact-запуску з того самого θ₀."""
    lam = run_quadratic(problem, steps=steps, mode="implicit").lambdas
    stars = run_quadratic(problem, steps=steps, mode="exact").lambda_stars
    worst = 0.0
    for t in range(burn_in, steps):
        reference = stars[max(0, t - window + 1):t + 1].mean()
        worst = max(worst, abs(lam[t] - reference))
    return CheckResult("узгодженість неявної і точної λ", worst <= band, f"max відхилення={worst:.4f}")


def regret_summary(problem: QuadraticProblem, steps: int = 500) -> dict[str, float]:
    """Підсумковий динамічний регрет R_T для кожного режиму λ."""
    return {mode: run_quadratic(problem, steps=steps, mode=mode).regret[-1] for mode in LAMBDA_MODES}


def run_verification_suite(problem: Optional[QuadraticProblem] = None) -> VerificationReport:
    problem = problem or QuadraticProblem.default()
    report = VerificationReport(checks=[
        check_dual_closed_form(),
        check_approximation(problem),
        check_drift(problem),
        check_stationarity(problem),
        check_dual_agreement(problem),
    ])
    for check in report.checks:
        log = logger.info if check.passed else logger.warning
        log(f"{check.name}: {'PASS' if check.passed else 'FAIL'} ({check.detail})")
    return report
