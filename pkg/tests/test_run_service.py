# tests/test_run_service.py

import json

import pytest

import run_service
from config import HASH_NAME
from dependencies import check_config_hash, get_db_session, read_config_hash
from erase_service import StepRecord
from exceptions import CheckpointCompatibilityError, ContractError


def _record(step, drift=0.0, bound=1.0, lam=0.1):
    return StepRecord(
        step=step, lam=lam, g_tilde=None if step == 1 else 0.5, l_er=1.0 / step, l_erase=1.0 / step,
        l_attn=0.0, l_pr=0.01 * step, d_sq=2.0 / step, drift=drift, bound=bound,
    )


@pytest.fixture
def session(tmp_path):
    with get_db_session(tmp_path) as s:
        yield s


class TestRuns:

    def test_open_and_close(self, session):
        run = run_service.open_run(session, "erase", "two-gaussians", "h" * 64, seed=2)
        assert run_service.get_open_run(session).id == run.id
        run_service.close_run(session, run, elapsed=1.5)
        assert run_service.get_open_run(session) is None
        assert run.status == "done"
        assert run.finished_at is not None

    def test_stale_run_is_aborted(self, session):
        stale = run_service.open_run(session, "erase", "two-gaussians", "a" * 64)
        fresh = run_service.open_run(session, "eval", "two-gaussians", "a" * 64)
        assert stale.status == "aborted" and stale.is_closed
        assert run_service.get_open_run(session).id == fresh.id

    def test_closed_run_rejects_steps(self, session):
        run = run_service.open_run(session, "erase", "two-gaussians", "a" * 64)
        run_service.close_run(session, run)
        with pytest.raises(ContractError):
            run_service.record_step(session, run, _record(1))
        with pytest.raises(ContractError):
            run_service.close_run(session, run)

    def test_last_run_by_phase(self, session):
        first = run_service.open_run(session, "train-base", "two-gaussians", "a" * 64)
        run_service.close_run(session, first)
        second = run_service.open_run(session, "erase", "two-gaussians", "a" * 64)
        assert run_service.get_last_run(session).id == second.id
        assert run_service.get_last_run(session, "train-base").id == first.id
        assert run_service.get_last_run(session, "merge") is None


class TestStatistics:

    def test_summary(self, session):
        run = run_service.open_run(session, "erase", "two-gaussians", "a" * 64)
        for step, drift in ((1, 0.1), (2, 1.5), (3, 0.3)):
            run_service.record_step(session, run, _record(step, drift=drift, lam=0.1 * step))
        session.commit()
        stats = run_service.get_run_statistics(session, run.id)
        assert stats["steps"] == 3
        assert stats["final_lambda"] == pytest.approx(0.3)
        assert stats["max_drift"] == pytest.approx(1.5)
        assert stats["min_d_sq"] == pytest.approx(2.0 / 3)
        assert stats["bound_violations"] == 1
        assert stats["final_l_pr"] == pytest.approx(0.03)

    def test_empty_run(self, session):
        run = run_service.open_run(session, "erase", "two-gaussians", "a" * 64)
        stats = run_service.get_run_statistics(session, run.id)
        assert stats["steps"] == 0
        assert stats["final_lambda"] is None


class TestArtifacts:

    def test_eval_and_checkpoint(self, session):
        run = run_service.open_run(session, "eval", "two-gaussians", "a" * 64)
        entry = run_service.record_eval(session, run, {"n": 50, "uncond_shift": 0.01})
        assert entry.n_samples == 50
        assert json.loads(entry.summary_json)["uncond_shift"] == 0.01
        run_service.register_checkpoint(session, run, "lora", "ckpt/lora.ckpt", "c" * 64, "m" * 64)
        session.refresh(run)
        assert [c.kind for c in run.checkpoints] == ["lora"]
        assert len(run.evals) == 1

    def test_registry_persists(self, tmp_path):
        with get_db_session(tmp_path) as s:
            run = run_service.open_run(s, "erase", "two-gaussians", "a" * 64)
            run_service.close_run(s, run)
        with get_db_session(tmp_path) as s:
            assert run_service.get_last_run(s).status == "done"


class TestConfigHashCheck:

    def test_match(self, tmp_path):
        (tmp_path / HASH_NAME).write_text("abc\n")
        assert read_config_hash(tmp_path) == "abc"
        check_config_hash(tmp_path, "abc")

    def test_mismatch(self, tmp_path):
        (tmp_path / HASH_NAME).write_text("abc\n")
        with pytest.raises(CheckpointCompatibilityError):
            check_config_hash(tmp_path, "abd")

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointCompatibilityError):
            read_config_hash(tmp_path)
