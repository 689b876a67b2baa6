# plots.py
#
# Статичні графіки запуску (PNG) разом із табличними даними (CSV) поруч:
# траєкторія λ, L_er/L_pr, дрейф проти межі, теплова карта локалізації,
# зразки до/після стирання, криві перебору ε/β.

import asyncio
import csv
import logging
from pathlib import Path
from typing import Sequence, Union

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from dotenv import dotenv_values

from config import RESOLVED_NAME
from exceptions import ConfigValidationError
from metrics import read_jsonl

logger = logging.getLogger(__name__)

STEPS_FILE = "metrics/steps.jsonl"
SWEEP_FILE = "metrics/sweep.jsonl"
LOCALIZE_FILE = "metrics/localize.tsv"
SAMPLES_FILE = "samples/eval.npz"


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _none_to_nan(values) -> np.ndarray:
    return np.array([np.nan if v is None else v for v in values], dtype=np.float64)


# --- Кроки стирання ---

def plot_lambda(steps: list[dict], out: Path) -> list[Path]:
    t = [r["step"] for r in steps]
    lam = [r["lam"] for r in steps]
    lam_star = _none_to_nan(r.get("lam_star") for r in steps)
    _write_csv(out / "lambda.csv", ["step", "lam", "lam_star"], zip(t, lam, lam_star))

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(t, lam, label="λ_t")
    if not np.all(np.isnan(lam_star)):
        ax.plot(t, lam_star, label="λ*⁺", alpha=0.6, linestyle="--")
    ax.set_xlabel("step")
    ax.set_ylabel("λ")
    ax.legend()
    return [out / "lambda.csv", _save(fig, out / "lambda.png")]


def plot_losses(steps: list[dict], out: Path) -> list[Path]:
    t = [r["step"] for r in steps]
    rows = [(r["step"], r["l_er"], r["l_erase"], r["l_attn"], r["l_pr"]) for r in steps]
    _write_csv(out / "losses.csv", ["step", "l_er", "l_erase", "l_attn", "l_pr"], rows)

    fig, (ax_er, ax_pr) = plt.subplots(1, 2, figsize=(10, 4))
    ax_er.plot(t, [r["l_er"] for r in steps], label="L_er")
    ax_er.plot(t, [r["l_erase"] for r in steps], label="L_erase", alpha=0.6)
    ax_er.set_xlabel("step")
    ax_er.legend()
    ax_pr.plot(t, [r["l_pr"] for r in steps], color="tab:green", label="L_pr")
    ax_pr.set_xlabel("step")
    ax_pr.legend()
    return [out / "losses.csv", _save(fig, out / "losses.png")]


def plot_drift(steps: list[dict], epsilon: float, alpha: float, out: Path) -> list[Path]:
    t = np.array([r["step"] for r in steps], dtype=np.float64)
    drift = [r["drift"] for r in steps]
    bound = [r["bound"] for r in steps]
    reference = t * epsilon * alpha
    _write_csv(out / "drift.csv", ["step", "drift", "bound", "t_eps_alpha"], zip(t.astype(int), drift, bound, reference))

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(t, drift, label="L_pr(θ_t) − L_pr(θ_0)")
    ax.plot(t, bound, label="межа", linestyle="--")
    ax.plot(t, reference, label="t·ε·α", linestyle=":")
    ax.set_xlabel("step")
    ax.legend()
    return [out / "drift.csv", _save(fig, out / "drift.png")]


# --- Локалізація і зразки ---

def plot_localization(table_path: Path, out: Path) -> list[Path]:
    lines = [line.split("\t") for line in table_path.read_text(encoding="utf-8").splitlines() if line.strip()]
    header, body = lines[0], lines[1:]
    matrix = np.array([[float(v) for v in row[1:]] for row in body])
    _write_csv(out / "localization.csv", header, body)

    fig, ax = plt.subplots(figsize=(1.2 * matrix.shape[1] + 3, 0.5 * matrix.shape[0] + 2))
    image = ax.imshow(matrix, aspect="auto", cmap="viridis")
    ax.set_xlabel("head")
    ax.set_ylabel("layer")
    fig.colorbar(image, ax=ax, label="маса A_{I←T}")
    return [out / "localization.csv", _save(fig, out / "localization.png")]


def plot_samples(samples_path: Path, out: Path) -> list[Path]:
    with np.load(samples_path, allow_pickle=False) as data:
        sets = {name: np.asarray(data[name]).reshape(-1, data[name].shape[-1]) for name in data.files}
    rows = []
    for name, points in sets.items():
        for p in points:
            rows.append((name, *p.tolist()))
    d = next(iter(sets.values())).shape[1]
    _write_csv(out / "samples.csv", ["set", *[f"x{i}" for i in range(d)]], rows)

    labels = sorted({name.split("_", 1)[1] for name in sets})
    fig, axes = plt.subplots(1, len(labels), figsize=(4 * len(labels), 4), squeeze=False)
    for ax, label in zip(axes[0], labels):
        for phase, color in (("before", "tab:blue"), ("after", "tab:red")):
            points = sets.get(f"{phase}_{label}")
            if points is None:
                continue
            if d == 1:
                ax.hist(points[:, 0], bins=40, alpha=0.5, color=color, label=phase)
            else:
                ax.scatter(points[:, 0], points[:, 1], s=3, alpha=0.4, color=color, label=phase)
        ax.set_title(f"умова {label}")
        ax.legend()
    return [out / "samples.csv", _save(fig, out / "samples.png")]


# --- Перебір гіперпараметрів ---

def summarize_sweep(records: list[dict]) -> dict[str, list[tuple]]:
    """Медіана по seed для кожного значення: {param: [(value, efficacy, preservation), ...]}"""
    grouped: dict[tuple[str, float], list[dict]] = {}
    for rec in records:
        grouped.setdefault((rec["param"], float(rec["value"])), []).append(rec)
    curves: dict[str, list[tuple]] = {}
    for (param, value), recs in sorted(grouped.items()):
        curves.setdefault(param, []).append((
            value,
            float(np.median([r["efficacy"] for r in recs])),
            float(np.median([r["preservation"] for r in recs])),
        ))
    return curves


def plot_sweep(records: list[dict], out: Path) -> list[Path]:
    written = []
    for param, curve in summarize_sweep(records).items():
        _write_csv(out / f"sweep_{param}.csv", [param, "efficacy_median", "preservation_median"], curve)
        values, efficacy, preservation = zip(*curve)
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(values, efficacy, marker="o", label="ефективність ED(після, до)")
        ax.plot(values, preservation, marker="s", label="збереження ED(після, до)")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel(param)
        ax.legend()
        written += [out / f"sweep_{param}.csv", _save(fig, out / f"sweep_{param}.png")]
    return written


def last_run_steps(records: list[dict]) -> list[dict]:
    """Журнал лише дописується; беруться кроки від останнього кроку 1."""
    steps = [r["values"] for r in records if r.get("kind") == "step"]
    starts = [i for i, s in enumerate(steps) if s["step"] == 1]
    return steps[starts[-1]:] if starts else steps


def plot_emit(run_dir: Union[str, Path]) -> list[Path]:
    run_dir = Path(run_dir)
    steps_path, sweep_path = run_dir / STEPS_FILE, run_dir / SWEEP_FILE
    localize_path, samples_path = run_dir / LOCALIZE_FILE, run_dir / SAMPLES_FILE
    if not any(p.is_file() for p in (steps_path, sweep_path, localize_path, samples_path)):
        raise ConfigValidationError(f"у {run_dir} немає метрик для графіків")

    out = run_dir / "plots"
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    if steps_path.is_file():
        steps = last_run_steps(asyncio.run(read_jsonl(steps_path)))
        if not steps:
            raise ConfigValidationError(f"{steps_path} не містить записів кроків")
        resolved = run_dir / RESOLVED_NAME
        if not resolved.is_file():
            raise ConfigValidationError(f"у {run_dir} немає {RESOLVED_NAME}, ε і α невідомі")
        cfg = dotenv_values(resolved)
        written += plot_lambda(steps, out)
        written += plot_losses(steps, out)
        written += plot_drift(steps, float(cfg["EPSILON"]), float(cfg["ALPHA"]), out)
    if localize_path.is_file():
        written += plot_localization(localize_path, out)
    if samples_path.is_file():
        written += plot_samples(samples_path, out)
    if sweep_path.is_file():
        sweep = [r["values"] for r in asyncio.run(read_jsonl(sweep_path)) if r.get("kind") == "sweep"]
        if sweep:
            written += plot_sweep(sweep, out)

    logger.info(f"Записано {len(written)} файлів графіків у {out}")
    return written
