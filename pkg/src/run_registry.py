import json
import sqlite3
from datetime import datetime
from pathlib import Path
from typing import List, Optional

from pydantic import BaseModel, Field


class RunRecord(BaseModel):
    id: Optional[int] = None
    command: str
    run_dir: str
    seed: int
    config: dict = Field(default_factory=dict)
    status: str = "running"
    summary: str = ""
    created_at: Optional[datetime] = None


class RunRegistry:
    def __init__(self, db_path: Path = Path("runs/runs.db")):
        self.db_path = Path(db_path)
        self.db_path.parent.mkdir(parents=True, exist_ok=True)
        self.init_database()

    def init_database(self):
        """Initialize the SQLite database and create the runs table if it doesn't exist"""
        with sqlite3.connect(self.db_path) as conn:
            conn.execute("""
                CREATE TABLE IF NOT EXISTS runs (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    command TEXT NOT NULL,
                    run_dir TEXT NOT NULL,
                    seed INTEGER NOT NULL,
                    config TEXT NOT NULL,
                    status TEXT NOT NULL DEFAULT 'running',
                    summary TEXT NOT NULL DEFAULT '',
                    created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
                )
            """)
            conn.commit()

    def start_run(self, record: RunRecord) -> int:
        """Register a new run and return its ID"""
        with sqlite3.connect(self.db_path) as conn:
            cursor = conn.execute("""
                INSERT INTO runs (command, run_dir, seed, config, status, summary)
                VALUES (?, ?, ?, ?, ?, ?)
            """, (
                record.command,
                record.run_dir,
                record.seed,
                json.dumps(record.config, sort_keys=True),
                record.status,
                record.summary,
            ))
            conn.commit()
            return cursor.lastrowid

    def finish_run(self, run_id: int, status: str, summary: str = "") -> bool:
        """Record the outcome of a run"""
        with sqlite3.connect(self.db_path) as conn:
            cursor = conn.execute("""
                UPDATE runs SET status = ?, summary = ? WHERE id = ?
            """, (status, summary, run_id))
            conn.commit()
            return cursor.rowcount > 0

    @staticmethod
    def _from_row(row: sqlite3.Row) -> RunRecord:
        row_dict = dict(row)
        return RunRecord(
            id=row_dict["id"],
            command=row_dict["command"],
            run_dir=row_dict["run_dir"],
            seed=row_dict["seed"],
            config=json.loads(row_dict["config"]),
            status=row_dict["status"],
            summary=row_dict["summary"],
            created_at=datetime.fromisoformat(row_dict["created_at"]),
        )

    def get_run(self, run_id: int) -> Optional[RunRecord]:
        """Retrieve a run by ID"""
        with sqlite3.connect(self.db_path) as conn:
            conn.row_factory = sqlite3.Row
            row = conn.execute("SELECT * FROM runs WHERE id = ?", (run_id,)).fetchone()
            return self._from_row(row) if row else None

    def get_all_runs(self, command: Optional[str] = None) -> List[RunRecord]:
        """Retrieve runs, newest first, optionally only those of one command"""
        with sqlite3.connect(self.db_path) as conn:
            conn.row_factory = sqlite3.Row
            if command:
                rows = conn.execute(
                    "SELECT * FROM runs WHERE command = ? ORDER BY id DESC", (command,)
                ).fetchall()
            else:
                rows = conn.execute("SELECT * FROM runs ORDER BY id DESC").fetchall()
            return [self._from_row(row) for row in rows]

    def delete_run(self, run_id: int) -> bool:
        """Delete a run record by ID; the run directory is left untouched"""
        with sqlite3.connect(self.db_path) as conn:
            cursor = conn.execute("DELETE FROM runs WHERE id = ?", (run_id,))
            conn.commit()
            return cursor.rowcount > 0
