# main.py

import argparse
import asyncio
import json
import logging
import sys
from dataclasses import fields, replace
from os import getenv
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from dotenv import load_dotenv

# --- Локальні імпорти ---
from checkpoints import load_checkpoint, read_manifest, save_checkpoint
from config import HASH_NAME, RESOLVED_NAME, RunConfig, load_run_config, resolve_run_dir, write_resolved
from dependencies import check_config_hash, get_db_session
from erase_service import estimate_pr_smoothness, run_erasure, sample_step_concepts
from erasure_objectives import build_erasure_batch
from exceptions import CheckpointCompatibilityError, ConfigValidationError, TrainingError
from flow_matching import euler_sample, train_base
from interventions import bypass_demo, format_profile_table, localize
from lagrangian import ConvergenceDiagnostics, drift_report
from lora_merge import merge
from metrics import MetricsRecord, append_jsonl, eval_erasure, read_jsonl
from plots import LOCALIZE_FILE, SAMPLES_FILE, STEPS_FILE, SWEEP_FILE, last_run_steps, plot_emit
from quadratic_testbed import QuadraticProblem, regret_summary, run_verification_suite
from run_service import (
    close_run,
    get_last_run,
    get_run_statistics,
    open_run,
    record_eval,
    record_step,
    register_checkpoint,
)
from single_stream import GatedLoRA, SingleStreamModel
from utils import parse_float_list, parse_int_list, parse_merge_spec

logger = logging.getLogger(__name__)

SUBCOMMANDS = {
    "train-base": "навчання базової моделі flow matching",
    "erase": "навчання LoRA-стирача з модуляцією Лагранжа",
    "sample": "семплювання Ейлером з базової моделі (і LoRA)",
    "eval": "оцінка ефективності та збереження енергетичною відстанню",
    "merge": "злиття кількох LoRA-стирачів",
    "diagnose": "перевірка теорії на квадратичному стенді або аналіз дрейфу запуску",
    "bypass-demo": "демонстрація обходу обнулення токенів",
    "plot": "графіки і CSV для каталогу запуску",
    "sweep": "перебір ε або β з оцінкою",
    "localize": "профіль маси уваги A_{I←T} по шарах і головах",
}


# --- Аргументи ---

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="concept-erase", description="Стирання концептів у single-stream трансформері")
    sub = parser.add_subparsers(dest="phase", required=True)
    for name, help_text in SUBCOMMANDS.items():
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", default=None, help="dotenv-файл конфігурації")
        for f in fields(RunConfig):
            if f.name == "phase":
                continue
            flag = "--" + f.name.replace("_", "-")
            if isinstance(f.default, bool):
                cmd.add_argument(flag, dest=f.name, action="store_const", const="true", default=None)
            else:
                cmd.add_argument(flag, dest=f.name, default=None)
        if name == "diagnose":
            cmd.add_argument("--quadratic", action="store_true", help="набір перевірок на квадратичному стенді")
            cmd.add_argument("--run", default=None, help="каталог запуску erase для звіту про дрейф")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    names = {f.name for f in fields(RunConfig)}
    return {k: v for k, v in vars(args).items() if k in names and v is not None}


# --- Спільні кроки ---

def _base_path(cfg: RunConfig, run_dir: Path) -> Path:
    return Path(cfg.base_ckpt) if cfg.base_ckpt else run_dir / "checkpoints" / "base.ckpt"


def _lora_path(cfg: RunConfig, run_dir: Path) -> Path:
    return Path(cfg.lora_ckpt) if cfg.lora_ckpt else run_dir / "checkpoints" / "lora.ckpt"


def _load_base(cfg: RunConfig, run_dir: Path) -> SingleStreamModel:
    path = _base_path(cfg, run_dir)
    if not path.is_file():
        raise ConfigValidationError(f"базовий чекпойнт {path} не знайдено; спершу train-base або --base-ckpt")
    base = load_checkpoint(path, expected_kind="model")
    if base.config.config_hash() != cfg.model_config().config_hash():
        raise CheckpointCompatibilityError(f"базова модель {path} не відповідає конфігурації моделі запуску")
    return base


def _load_lora(path: Path, base: SingleStreamModel) -> GatedLoRA:
    lora = load_checkpoint(path, expected_kind="lora", base_config=base.config)
    trained_on = read_manifest(path)["extras"].get("base_checksum")
    if trained_on is not None and trained_on != base.checksum():
        raise CheckpointCompatibilityError(f"LoRA {path} навчена на іншій базовій моделі")
    return lora


# --- Підкоманди ---

def cmd_train_base(cfg: RunConfig, run_dir: Path, digest: str) -> int:
    dataset = cfg.get_dataset()
    model = SingleStreamModel.init(cfg.model_config(), seed=cfg.seed)
    with get_db_session(run_dir) as session:
        run = open_run(session, "train-base", dataset.name, digest, cfg.seed)
        try:
            result = train_base(
                model, dataset, steps=cfg.base_steps, lr=cfg.base_lr, batch=cfg.base_batch,
                seed=cfg.seed, label_dropout=cfg.label_dropout, log_every=cfg.log_every,
            )
        except TrainingError:
            close_run(session, run, status="failed")
            raise
        path = run_dir / "checkpoints" / "base.ckpt"
        checksum = save_checkpoint(path, model, extras={"losses": result.losses, "config_sha256": digest})
        register_checkpoint(session, run, "model", str(path), checksum, model.config.config_hash())
        close_run(session, run)
    record = MetricsRecord("train-base", cfg.base_steps, digest, {
        "initial_loss": result.initial_loss, "final_loss": result.final_loss,
    })
    asyncio.run(append_jsonl(run_dir / "metrics" / "train.jsonl", [record]))
    print(f"fm_loss: {result.initial_loss:.5f} -> {result.final_loss:.5f}")
    return 0


def cmd_erase(cfg: RunConfig, run_dir: Path, digest: str) -> int:
    dataset = cfg.get_dataset()
    base = _load_base(cfg, run_dir)
    hp = cfg.erasure_hyperparams()
    records: list[MetricsRecord] = []

    with get_db_session(run_dir) as session:
        run = open_run(session, "erase", dataset.name, digest, cfg.seed)

        def on_step(step_record) -> None:
            commit = bool(cfg.log_every) and step_record.step % cfg.log_every == 0
            record_step(session, run, step_record, commit=commit)
            records.append(MetricsRecord("step", step_record.step, digest, step_record.to_dict()))

        try:
            result = run_erasure(base, dataset, hp, on_step=on_step)
        except TrainingError:
            session.commit()
            close_run(session, run, status="failed")
            asyncio.run(append_jsonl(run_dir / STEPS_FILE, records))
            raise
        session.commit()
        asyncio.run(append_jsonl(run_dir / STEPS_FILE, records))

        report = drift_report(result.diagnostics, lambda_mode=hp.lambda_mode)
        (run_dir / "metrics" / "drift.tsv").write_text(report.as_table() + "\n", encoding="utf-8")

        path = run_dir / "checkpoints" / "lora.ckpt"
        checksum = save_checkpoint(path, result.lora, extras={
            "config_sha256": digest,
            "base_checksum": base.checksum(),
            "final_lambda": result.state.lam,
            "attn_layers": result.attn_layers,
            "elapsed": result.elapsed,
        })
        register_checkpoint(session, run, "lora", str(path), checksum, base.config.config_hash())
        stats = get_run_statistics(session, run.id)
        close_run(session, run, elapsed=result.elapsed)
    print(json.dumps(stats, default=float, indent=2))
    return 0


def cmd_sample(cfg: RunConfig, run_dir: Path, digest: str) -> int:
    base = _load_base(cfg, run_dir)
    lora_path = Path(cfg.lora_ckpt) if cfg.lora_ckpt else None
    lora = _load_lora(lora_path, base) if lora_path else None
    concept = None if cfg.concept < 0 else cfg.concept
    samples = euler_sample(base.frozen(), concept, cfg.n_samples, cfg.sampler_steps, lora=lora, seed=cfg.seed)
    label = "uncond" if concept is None else str(concept)
    path = run_dir / "samples" / f"sample_{label}{'_lora' if lora else ''}.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, samples=samples)
    print(f"{cfg.n_samples} зразків умови {label} -> {path}")
    return 0


def cmd_eval(cfg: RunConfig, run_dir: Path, digest: str) -> int:
    dataset = cfg.get_dataset()
    base = _load_base(cfg, run_dir)
    lora_path = _lora_path(cfg, run_dir)
    lora = _load_lora(lora_path, base) if lora_path.is_file() else None
    if lora is None:
        logger.warning(f"LoRA {lora_path} не знайдено, оцінюється незмінена модель")

    with get_db_session(run_dir) as session:
        erase_run = get_last_run(session, phase="erase")
        statistics = get_run_statistics(session, erase_run.id) if erase_run else {}
        summary = asyncio.run(eval_erasure(
            base, lora, dataset, n=cfg.n_samples, steps=cfg.sampler_steps, seed=cfg.seed,
            run_statistics=statistics,
        ))
        run = open_run(session, "eval", dataset.name, digest, cfg.seed)
        record_eval(session, run, summary.as_dict())
        close_run(session, run)

    samples_path = run_dir / SAMPLES_FILE
    samples_path.parent.mkdir(parents=True, exist_ok=True)
    with open(samples_path, "wb") as f:
        np.savez(f, **summary.samples)
    asyncio.run(append_jsonl(
        run_dir / "metrics" / "eval.jsonl", [MetricsRecord("eval", statistics.get("steps") or 0, digest, summary.as_dict())]
    ))
    print(json.dumps(summary.as_dict(), default=float, indent=2))
    return 0


def cmd_merge(cfg: RunConfig, run_dir: Path, digest: str) -> int:
    entries = parse_merge_spec(cfg.merge_spec)
    if not entries:
        raise ConfigValidationError("MERGE_SPEC порожній; формат: 'a.ckpt x 0.5, b.ckpt x 0.5'")
    weights = [w for _, w in entries]
    if all(w is None for w in weights):
        weights = None
    elif any(w is None for w in weights):
        raise ConfigValidationError("ваги злиття мають бути задані для всіх LoRA або для жодної")

    base = _load_base(cfg, run_dir) if _base_path(cfg, run_dir).is_file() else None
    loras = [
        _load_lora(Path(p), base) if base is not None else load_checkpoint(p, expected_kind="lora")
        for p, _ in entries
    ]
    merged = merge(loras, weights)
    path = run_dir / "checkpoints" / "merged.ckpt"
    extras = {"config_sha256": digest}
    if base is not None:
        extras["base_checksum"] = base.checksum()
    checksum = save_checkpoint(path, merged, extras=extras)
    with get_db_session(run_dir) as session:
        run = open_run(session, "merge", cfg.dataset, digest, cfg.seed)
        register_checkpoint(session, run, "lora", str(path), checksum, merged.config.config_hash())
        close_run(session, run)
    print(f"Злито {len(loras)} LoRA, ранг {merged.rank} -> {path}")
    return 0


def cmd_diagnose(cfg: RunConfig, run_dir: Path, digest: str, quadratic: bool, run: Optional[str]) -> int:
    if not quadratic and not run:
        raise ConfigValidationError("diagnose потребує --quadratic або --run DIR")
    status = 0
    if quadratic:
        problem = QuadraticProblem.default()
        regret = regret_summary(problem)
        print("динамічний регрет R_T: " + ", ".join(f"{mode}={value:.6e}" for mode, value in regret.items()))
        report = run_verification_suite(problem)
        print(report.as_text())
        status = 0 if report.passed else 1
    if run:
        status = max(status, _diagnose_run(Path(run)))
    return status


def _diagnose_run(target: Path) -> int:
    """G для L_pr у θ₀ оцінюється збуренням; звіт про дрейф лише описовий."""
    steps_path = target / STEPS_FILE
    if not steps_path.is_file():
        raise ConfigValidationError(f"у {target} немає {STEPS_FILE}")
    run_cfg = load_run_config(target / RESOLVED_NAME, {"run_dir": str(target)})
    steps = last_run_steps(asyncio.run(read_jsonl(steps_path)))
    dataset = run_cfg.get_dataset()
    base = _load_base(run_cfg, target)
    hp = run_cfg.erasure_hyperparams()

    frozen = base.frozen()
    lora0 = GatedLoRA.init(frozen.config, rank=hp.rank, scale=hp.lora_scale, seed=hp.seed, gated=not hp.ungated)
    c_er, c_pr, _ = sample_step_concepts(dataset, hp.seed, 0)
    batch = build_erasure_batch(frozen, dataset, c_er, c_pr, hp.batch, hp.eta, hp.seed, 0, hp.xt_source)
    smoothness = estimate_pr_smoothness(frozen, lora0, batch, seed=hp.seed)

    diagnostics = ConvergenceDiagnostics(smoothness=smoothness, epsilon=hp.epsilon, alpha=hp.alpha)
    for row in steps:
        diagnostics.record(row["d_sq"], row["drift"])
    report = drift_report(diagnostics, lambda_mode=hp.lambda_mode)
    (target / "metrics" / "drift_diagnose.tsv").write_text(report.as_table() + "\n", encoding="utf-8")
    print(f"G≈{smoothness:.6f}, кроків {len(report.rows)}, порушень межі {report.violations}")
    print(report.as_table())
    return 0


def cmd_bypass_demo(cfg: RunConfig, run_dir: Path, digest: str) -> int:
    base = _load_base(cfg, run_dir)
    layers = parse_int_list(cfg.zero_layers) if cfg.zero_layers else None
    report = bypass_demo(
        base.frozen(), cfg.concept, n=cfg.n_samples, steps=cfg.sampler_steps, seed=cfg.seed, layers=layers,
    )
    asyncio.run(append_jsonl(run_dir / "metrics" / "bypass.jsonl", [MetricsRecord("bypass", 0, digest, report.as_dict())]))
    print(json.dumps(report.as_dict(), default=float, indent=2))
    return 0


def cmd_localize(cfg: RunConfig, run_dir: Path, digest: str) -> int:
    dataset = cfg.get_dataset()
    base = _load_base(cfg, run_dir)
    profile = localize(base.frozen(), cfg.concept, dataset, batch=cfg.batch, seed=cfg.seed)
    table = format_profile_table(profile)
    path = run_dir / LOCALIZE_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


def cmd_sweep(cfg: RunConfig, run_dir: Path, digest: str) -> int:
    dataset = cfg.get_dataset()
    base = _load_base(cfg, run_dir)
    values = parse_float_list(cfg.sweep_values)
    seeds = parse_int_list(cfg.sweep_seeds)
    if not values or not seeds:
        raise ConfigValidationError("SWEEP_VALUES і SWEEP_SEEDS не можуть бути порожніми")

    for value in values:
        for seed in seeds:
            hp = replace(cfg.erasure_hyperparams(), **{cfg.sweep_param: value}, seed=seed, log_every=0)
            result = run_erasure(base, dataset, hp, progress=False)
            summary = asyncio.run(eval_erasure(
                base, result.lora, dataset, n=cfg.n_samples, steps=cfg.sampler_steps, seed=cfg.seed,
            ))
            row = {
                "param": cfg.sweep_param,
                "value": value,
                "seed": seed,
                "efficacy": float(np.mean([summary.efficacy_to_original[c] for c in summary.erased])),
                "self_distance": float(np.mean([summary.self_distance[c] for c in summary.erased])),
                "preservation": float(np.mean([summary.preservation[c] for c in summary.preserved])),
                "noise_floor": float(np.mean([summary.noise_floor[c] for c in summary.preserved])),
                "final_lambda": result.state.lam,
            }
            asyncio.run(append_jsonl(run_dir / SWEEP_FILE, [MetricsRecord("sweep", hp.steps, digest, row)]))
            logger.info(
                f"{cfg.sweep_param}={value:g} seed={seed}: ефективність={row['efficacy']:.4f}, "
                f"збереження={row['preservation']:.4f}"
            )
    print(f"Перебір {cfg.sweep_param}: {len(values)}×{len(seeds)} запусків -> {run_dir / SWEEP_FILE}")
    return 0


def cmd_plot(cfg: RunConfig, run_dir: Path, digest: str) -> int:
    for path in plot_emit(run_dir):
        print(path)
    return 0


HANDLERS = {
    "train-base": cmd_train_base,
    "erase": cmd_erase,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "merge": cmd_merge,
    "bypass-demo": cmd_bypass_demo,
    "plot": cmd_plot,
    "sweep": cmd_sweep,
    "localize": cmd_localize,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Коди виходу: 0 успіх, 1 помилка конфігурації чи домену, 2 помилка використання (argparse)."""
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, {**_overrides(args), "phase": args.phase})
        run_dir = resolve_run_dir(cfg)
        digest = cfg.config_sha256()
        if cfg.phase == "eval" and (run_dir / HASH_NAME).is_file():
            check_config_hash(run_dir, digest)
        if cfg.phase != "plot":
            write_resolved(cfg, run_dir)
        if cfg.phase == "diagnose":
            return cmd_diagnose(cfg, run_dir, digest, args.quadratic, args.run)
        return HANDLERS[cfg.phase](cfg, run_dir, digest)
    except (ValueError, TrainingError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"помилка: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    load_dotenv()
    logging.basicConfig(level=getenv("ERASE_LOG_LEVEL", "INFO").upper(), stream=sys.stdout)
    sys.exit(main())
