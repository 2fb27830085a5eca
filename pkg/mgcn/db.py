"""
Minimal SQLite database for mgcn.
Stores the run registry only; run directories stay self-describing.
"""

import logging
import sqlite3
import threading
from typing import Optional

from .config import get_db_path

logger = logging.getLogger(__name__)

_SCHEMA = """
CREATE TABLE IF NOT EXISTS runs (
    run_id TEXT PRIMARY KEY,
    model TEXT NOT NULL,
    run_dir TEXT NOT NULL,
    dataset TEXT NOT NULL,
    img_size INTEGER NOT NULL,
    epochs INTEGER NOT NULL,
    seed INTEGER NOT NULL,
    status TEXT NOT NULL,
    param_count INTEGER DEFAULT 0,
    val_accuracy REAL,
    wall_seconds REAL,
    last_error TEXT,
    created_at DATETIME DEFAULT CURRENT_TIMESTAMP,
    updated_at DATETIME DEFAULT CURRENT_TIMESTAMP,
    completed_at DATETIME
);

CREATE INDEX IF NOT EXISTS idx_runs_created ON runs(created_at);
"""


class DB:
    """Thread-safe singleton SQLite database."""

    _instance: Optional["DB"] = None
    _instance_lock = threading.Lock()
    _connection: Optional[sqlite3.Connection] = None

    def __new__(cls) -> "DB":
        if cls._instance is None:
            with cls._instance_lock:
                if cls._instance is None:
                    cls._instance = super().__new__(cls)
        return cls._instance

    def __init__(self) -> None:
        if hasattr(self, "_initialized"):
            return
        self._initialized = True

    def get_connection(self) -> sqlite3.Connection:
        if self._connection is None:
            with self._instance_lock:
                if self._connection is None:
                    db_path = get_db_path()
                    db_path.parent.mkdir(parents=True, exist_ok=True)

                    conn = sqlite3.connect(str(db_path), check_same_thread=False)
                    conn.row_factory = sqlite3.Row
                    conn.execute("PRAGMA journal_mode=WAL")
                    conn.executescript(_SCHEMA)
                    conn.commit()
                    DB._connection = conn

                    logger.info(f"[DB] Connected to {db_path}")
        return self._connection

    def close(self) -> None:
        if DB._connection is not None:
            DB._connection.close()
            DB._connection = None


def get_db() -> DB:
    return DB()


def reset_db() -> None:
    """Drop the singleton and its connection (tests point MGCN_DB_PATH elsewhere first)."""
    with DB._instance_lock:
        if DB._connection is not None:
            try:
                DB._connection.close()
            except sqlite3.Error:
                pass
            DB._connection = None
        if DB._instance is not None and hasattr(DB._instance, "_initialized"):
            delattr(DB._instance, "_initialized")
        DB._instance = None
