"""
SQLite-backed registry of training runs.
"""

from __future__ import annotations

from typing import Any, Dict, List, Optional

from .db import get_db

RUN_STATUSES = ("running", "completed", "failed")
ENDED_STATUSES = ("completed", "failed")

_COLUMNS = """
    run_id, model, run_dir, dataset, img_size, epochs, seed, status, param_count,
    val_accuracy, wall_seconds, last_error, created_at, updated_at, completed_at
"""


def create_run(
    run_id: str,
    model: str,
    run_dir: str,
    dataset: str,
    img_size: int,
    epochs: int,
    seed: int,
    param_count: int = 0,
) -> None:
    """Create or restart a run record in the `running` state."""
    conn = get_db().get_connection()
    cursor = conn.cursor()
    cursor.execute(
        """
        INSERT INTO runs (
            run_id, model, run_dir, dataset, img_size, epochs, seed, status, param_count
        )
        VALUES (?, ?, ?, ?, ?, ?, ?, 'running', ?)
        ON CONFLICT(run_id) DO UPDATE SET
            model = excluded.model,
            run_dir = excluded.run_dir,
            dataset = excluded.dataset,
            img_size = excluded.img_size,
            epochs = excluded.epochs,
            seed = excluded.seed,
            status = 'running',
            param_count = excluded.param_count,
            val_accuracy = NULL,
            wall_seconds = NULL,
            last_error = NULL,
            completed_at = NULL,
            updated_at = CURRENT_TIMESTAMP
        """,
        (run_id, model, run_dir, dataset, img_size, epochs, seed, param_count),
    )
    conn.commit()


def get_run(run_id: str) -> Optional[Dict[str, Any]]:
    conn = get_db().get_connection()
    cursor = conn.cursor()
    cursor.execute(f"SELECT {_COLUMNS} FROM runs WHERE run_id = ?", (run_id,))
    row = cursor.fetchone()
    return dict(row) if row else None


def list_runs(limit: int = 20) -> List[Dict[str, Any]]:
    """Most recent runs first."""
    conn = get_db().get_connection()
    cursor = conn.cursor()
    cursor.execute(
        f"SELECT {_COLUMNS} FROM runs ORDER BY created_at DESC, rowid DESC LIMIT ?",
        (max(1, int(limit)),),
    )
    return [dict(row) for row in cursor.fetchall()]


def update_status(run_id: str, status: str) -> None:
    if status not in RUN_STATUSES:
        raise ValueError(f"status must be one of {RUN_STATUSES}, got {status!r}")
    conn = get_db().get_connection()
    cursor = conn.cursor()
    cursor.execute(
        """
        UPDATE runs
        SET status = ?,
            updated_at = CURRENT_TIMESTAMP
        WHERE run_id = ?
        """,
        (status, run_id),
    )
    conn.commit()


def mark_completed(run_id: str, val_accuracy: float, wall_seconds: float) -> None:
    """Record the final validation accuracy and wall-clock time."""
    conn = get_db().get_connection()
    cursor = conn.cursor()
    cursor.execute(
        """
        UPDATE runs
        SET status = 'completed',
            val_accuracy = ?,
            wall_seconds = ?,
            last_error = NULL,
            completed_at = CURRENT_TIMESTAMP,
            updated_at = CURRENT_TIMESTAMP
        WHERE run_id = ?
        """,
        (val_accuracy, wall_seconds, run_id),
    )
    conn.commit()


def set_error(run_id: str, error: str, wall_seconds: Optional[float] = None) -> None:
    """Record an error message and mark the run failed."""
    conn = get_db().get_connection()
    cursor = conn.cursor()
    cursor.execute(
        """
        UPDATE runs
        SET status = 'failed',
            last_error = ?,
            wall_seconds = ?,
            updated_at = CURRENT_TIMESTAMP
        WHERE run_id = ?
        """,
        (error, wall_seconds, run_id),
    )
    conn.commit()


def cleanup_old_runs(days: int = 90) -> int:
    """Delete ended runs older than the given retention window."""
    days = max(1, int(days))
    conn = get_db().get_connection()
    cursor = conn.cursor()
    cursor.execute(
        """
        DELETE FROM runs
        WHERE status IN (?, ?)
          AND updated_at < datetime('now', ?)
        """,
        (*ENDED_STATUSES, f"-{days} days"),
    )
    conn.commit()
    return cursor.rowcount
