# dependencies.py
import secrets
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Generator

from sqlalchemy.orm import Session

from config import HASH_NAME
from exceptions import CheckpointCompatibilityError
from models import create_db_tables, make_engine, make_session_maker

logger = logging.getLogger(__name__)


def read_config_hash(run_dir) -> str:
    path = Path(run_dir) / HASH_NAME
    if not path.is_file():
        raise CheckpointCompatibilityError(f"у {run_dir} немає {HASH_NAME}")
    return path.read_text(encoding="utf-8").strip()


def check_config_hash(run_dir, expected: str) -> None:
    """Відмовляє, якщо хеш конфігурації каталогу не збігається з очікуваним."""
    actual = read_config_hash(run_dir)
    if not secrets.compare_digest(actual, expected):
        logger.error(f"Хеш конфігурації {run_dir} ({actual[:12]}) != очікуваного ({expected[:12]})")
        raise CheckpointCompatibilityError(
            f"каталог {run_dir} створено з іншою конфігурацією ({actual[:12]} != {expected[:12]})"
        )


@contextmanager
def get_db_session(run_dir) -> Generator[Session, None, None]:
    """Надає сесію реєстру запуску; таблиці створюються за потреби."""
    engine = make_engine(run_dir)
    create_db_tables(engine)
    session_maker = make_session_maker(engine)
    try:
        with session_maker() as session:
            yield session
    finally:
        engine.dispose()
