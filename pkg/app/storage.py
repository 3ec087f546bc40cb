from __future__ import annotations

import json
import sqlite3
from datetime import datetime, timezone
from pathlib import Path
from threading import Lock
from typing import Any

from .models import MapExport, RunEvent, RunState, RunSummary


class RunStore:
    def __init__(self, db_path: str = "data/strata.db") -> None:
        self.db_path = db_path
        self._lock = Lock()
        Path(self.db_path).parent.mkdir(parents=True, exist_ok=True)
        self._initialize()

    def _connect(self) -> sqlite3.Connection:
        conn = sqlite3.connect(self.db_path, check_same_thread=False)
        conn.row_factory = sqlite3.Row
        return conn

    def _initialize(self) -> None:
        with self._connect() as conn:
            conn.execute(
                """
                CREATE TABLE IF NOT EXISTS runs (
                    run_id TEXT PRIMARY KEY,
                    sequence_dir TEXT NOT NULL,
                    status TEXT NOT NULL,
                    summary TEXT,
                    export TEXT,
                    created_at TEXT NOT NULL,
                    updated_at TEXT NOT NULL
                )
                """
            )
            conn.execute(
                """
                CREATE TABLE IF NOT EXISTS run_events (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    run_id TEXT NOT NULL,
                    event_time TEXT NOT NULL,
                    payload TEXT NOT NULL
                )
                """
            )

    def create_run(self, run_id: str, sequence_dir: str) -> None:
        now = datetime.now(timezone.utc).isoformat()
        with self._lock, self._connect() as conn:
            conn.execute(
                "INSERT INTO runs (run_id, sequence_dir, status, created_at, updated_at) VALUES (?, ?, ?, ?, ?)",
                (run_id, sequence_dir, RunState.IDLE.value, now, now),
            )

    def finish_run(
        self,
        run_id: str,
        state: RunState,
        events: list[RunEvent],
        summary: RunSummary | None = None,
        export: MapExport | None = None,
    ) -> None:
        now = datetime.now(timezone.utc).isoformat()
        with self._lock, self._connect() as conn:
            conn.execute(
                "UPDATE runs SET status = ?, summary = ?, export = ?, updated_at = ? WHERE run_id = ?",
                (
                    state.value,
                    summary.model_dump_json() if summary else None,
                    export.model_dump_json() if export else None,
                    now,
                    run_id,
                ),
            )
            for event in events:
                conn.execute(
                    "INSERT INTO run_events (run_id, event_time, payload) VALUES (?, ?, ?)",
                    (run_id, event.timestamp.isoformat(), event.model_dump_json()),
                )

    def get_run(self, run_id: str) -> dict[str, Any] | None:
        with self._lock, self._connect() as conn:
            row = conn.execute(
                "SELECT run_id, sequence_dir, status, summary, export FROM runs WHERE run_id = ?", (run_id,)
            ).fetchone()
        if not row:
            return None
        return {
            "run_id": row["run_id"],
            "sequence_dir": row["sequence_dir"],
            "status": row["status"],
            "summary": json.loads(row["summary"]) if row["summary"] else None,
            "export": json.loads(row["export"]) if row["export"] else None,
        }

    def get_events(self, run_id: str) -> list[dict[str, Any]]:
        with self._lock, self._connect() as conn:
            rows = conn.execute("SELECT payload FROM run_events WHERE run_id = ? ORDER BY id ASC", (run_id,)).fetchall()
        return [json.loads(row["payload"]) for row in rows]

    def list_runs(self, limit: int = 50) -> list[dict[str, Any]]:
        with self._lock, self._connect() as conn:
            rows = conn.execute(
                "SELECT run_id, sequence_dir, status, created_at FROM runs ORDER BY created_at DESC LIMIT ?", (limit,)
            ).fetchall()
        return [dict(row) for row in rows]
