# run_service.py

import json
import logging
from datetime import datetime
from typing import Optional

from sqlalchemy import desc, func, select
from sqlalchemy.orm import Session

from erase_service import StepRecord
from exceptions import ContractError
from models import CheckpointRecord, EvalRecord, RunRecord, StepMetric

logger = logging.getLogger(__name__)

DRIFT_TOLERANCE = 1e-12


def get_open_run(session: Session) -> RunRecord | None:
    """Повертає незакритий запуск у цьому реєстрі або None."""
    result = session.execute(select(RunRecord).where(RunRecord.is_closed == False).limit(1))
    return result.scalars().first()


def get_last_run(session: Session, phase: Optional[str] = None) -> RunRecord | None:
    query = select(RunRecord)
    if phase is not None:
        query = query.where(RunRecord.phase == phase)
    result = session.execute(query.order_by(desc(RunRecord.id)).limit(1))
    return result.scalars().first()


def open_run(session: Session, phase: str, dataset: str, config_hash: str, seed: int = 0) -> RunRecord:
    """Відкриває новий запуск. Залишений відкритим попередній запуск позначається як перерваний."""
    stale = get_open_run(session)
    if stale:
        logger.warning(f"Запуск #{stale.id} ({stale.phase}) не було закрито, позначаю як перерваний.")
        stale.is_closed = True
        stale.status = "aborted"
        stale.finished_at = datetime.now()

    run = RunRecord(phase=phase, dataset=dataset, config_hash=config_hash, seed=seed, started_at=datetime.now())
    session.add(run)
    session.commit()
    session.refresh(run)
    logger.info(f"Відкрито запуск #{run.id}: {phase} на {dataset}")
    return run


def record_step(session: Session, run: RunRecord, record: StepRecord, commit: bool = False) -> StepMetric:
    if run.is_closed:
        raise ContractError(f"запуск #{run.id} уже закрито")
    metric = StepMetric(run_id=run.id, **record.to_dict())
    session.add(metric)
    if commit:
        session.commit()
    return metric


def record_eval(session: Session, run: RunRecord, summary: dict) -> EvalRecord:
    entry = EvalRecord(run_id=run.id, n_samples=int(summary.get("n", 0)), summary_json=json.dumps(summary, default=float))
    session.add(entry)
    session.commit()
    session.refresh(entry)
    return entry


def register_checkpoint(
    session: Session, run: RunRecord, kind: str, path: str, checksum: str, model_config_hash: str
) -> CheckpointRecord:
    entry = CheckpointRecord(
        run_id=run.id, kind=kind, path=str(path), checksum=checksum, model_config_hash=model_config_hash
    )
    session.add(entry)
    session.commit()
    logger.info(f"Чекпойнт {kind} зареєстровано для запуску #{run.id}: {path}")
    return entry


def close_run(session: Session, run: RunRecord, status: str = "done", elapsed: Optional[float] = None) -> RunRecord:
    if run.is_closed:
        raise ContractError(f"запуск #{run.id} уже закрито")
    run.is_closed = True
    run.status = status
    run.finished_at = datetime.now()
    run.elapsed = elapsed
    session.commit()
    logger.info(f"Запуск #{run.id} закрито зі статусом {status}")
    return run


def get_run_statistics(session: Session, run_id: int) -> dict:
    """Підсумок кроків: фінальна λ, максимальний дрейф, кількість порушень межі."""
    totals = session.execute(
        select(
            func.count(StepMetric.id),
            func.max(StepMetric.drift),
            func.max(StepMetric.lam),
            func.min(StepMetric.d_sq),
        ).where(StepMetric.run_id == run_id)
    ).one()
    violations = session.execute(
        select(func.count(StepMetric.id)).where(
            StepMetric.run_id == run_id,
            StepMetric.drift > StepMetric.bound + DRIFT_TOLERANCE,
        )
    ).scalar_one()
    last = session.execute(
        select(StepMetric).where(StepMetric.run_id == run_id).order_by(desc(StepMetric.step)).limit(1)
    ).scalars().first()

    return {
        "steps": int(totals[0] or 0),
        "final_lambda": last.lam if last else None,
        "max_lambda": totals[2],
        "max_drift": totals[1],
        "min_d_sq": totals[3],
        "bound_violations": int(violations or 0),
        "final_l_er": last.l_er if last else None,
        "final_l_pr": last.l_pr if last else None,
    }
