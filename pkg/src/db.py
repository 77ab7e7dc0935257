"""SQLite store of finished benchmark rows, so an interrupted run resumes where it stopped."""

import json
import os
import sqlite3
from datetime import datetime, timezone

from src.config import RESULTS_DB_PATH


def _connect(db_path: str | None = None) -> sqlite3.Connection:
    path = db_path or RESULTS_DB_PATH
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    conn = sqlite3.connect(path)
    conn.execute(
        """
        CREATE TABLE IF NOT EXISTS benchmark_rows (
            run_key     TEXT,
            image       TEXT,
            kernel      TEXT,
            variant     TEXT,
            row_json    TEXT,
            recorded    TEXT,
            PRIMARY KEY (run_key, image, kernel, variant)
        )
        """
    )
    conn.commit()
    return conn


def is_pair_done(run_key: str, image: str, kernel: str, variants: list[str], db_path: str | None = None) -> bool:
    conn = _connect(db_path)
    try:
        (count,) = conn.execute(
            "SELECT COUNT(*) FROM benchmark_rows WHERE run_key = ? AND image = ? AND kernel = ?",
            (run_key, image, kernel),
        ).fetchone()
        return count >= len(variants)
    finally:
        conn.close()


def record_rows(run_key: str, rows: list[dict], db_path: str | None = None) -> None:
    conn = _connect(db_path)
    try:
        conn.executemany(
            """
            INSERT OR REPLACE INTO benchmark_rows (run_key, image, kernel, variant, row_json, recorded)
            VALUES (?, ?, ?, ?, ?, ?)
            """,
            [
                (run_key, r["image"], r["kernel"], r["variant"], json.dumps(r),
                 datetime.now(timezone.utc).isoformat())
                for r in rows
            ],
        )
        conn.commit()
    finally:
        conn.close()


def load_rows(run_key: str, image: str, kernel: str, db_path: str | None = None) -> list[dict]:
    conn = _connect(db_path)
    try:
        cur = conn.execute(
            "SELECT row_json FROM benchmark_rows WHERE run_key = ? AND image = ? AND kernel = ? ORDER BY variant",
            (run_key, image, kernel),
        )
        return [json.loads(r[0]) for r in cur.fetchall()]
    finally:
        conn.close()
