#!/usr/bin/env python3
"""
Run Registry
SQLite index of run artifacts and evaluation rows, queried for sweep and
ablation reports
"""

import hashlib
import logging
import os
import sqlite3
from typing import Dict, List, Optional

import pandas as pd

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ['solutions', 'first_derivatives', 'second_derivatives', 'average']
EVALUATION_COLUMNS = [
    'label', 'row_name', 'seed', 'epochs', 'width', 'depth_spectral', 'k_modes', 'depth_fc',
    'fc_width', 'split', 'solutions', 'first_derivatives', 'second_derivatives', 'average',
    'solutions_per_dof', 'first_derivatives_per_dof', 'second_derivatives_per_dof'
]


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


class RunRegistry:
    """Manage the SQLite registry of a run directory"""

    def __init__(self, db_path: str = "runs/registry.db"):
        """
        Initialize registry

        Args:
            db_path: Path to SQLite database file
        """
        self.db_path = db_path
        self._ensure_directory()
        self._init_database()

    def _ensure_directory(self):
        """Ensure database directory exists"""
        db_dir = os.path.dirname(self.db_path)
        if db_dir:
            os.makedirs(db_dir, exist_ok=True)

    def _init_database(self):
        """Initialize database with required tables"""
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS artifacts (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                kind TEXT,
                path TEXT,
                sha256 TEXT,
                UNIQUE(kind, path)
            )
        """)

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS evaluations (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                label TEXT,
                row_name TEXT,
                seed INTEGER,
                epochs INTEGER,
                width INTEGER,
                depth_spectral INTEGER,
                k_modes INTEGER,
                depth_fc INTEGER,
                fc_width INTEGER,
                split TEXT,
                solutions REAL,
                first_derivatives REAL,
                second_derivatives REAL,
                average REAL,
                solutions_per_dof REAL,
                first_derivatives_per_dof REAL,
                second_derivatives_per_dof REAL,
                UNIQUE(label, seed, split)
            )
        """)

        cursor.execute("""
            CREATE INDEX IF NOT EXISTS idx_evaluations_label
            ON evaluations(label)
        """)

        conn.commit()
        conn.close()

    def record_artifact(self, kind: str, path: str) -> str:
        """
        Register (or refresh) an artifact file

        Args:
            kind: Artifact kind (dataset, weights, model, report, plot, ...)
            path: File path

        Returns:
            sha256 of the file
        """
        if not os.path.exists(path):
            raise FileNotFoundError(f"Artifact not found: {path}")
        sha = file_sha256(path)
        conn = sqlite3.connect(self.db_path)
        try:
            conn.execute(
                "INSERT OR REPLACE INTO artifacts (kind, path, sha256) VALUES (?, ?, ?)",
                (kind, os.path.abspath(path), sha)
            )
            conn.commit()
        finally:
            conn.close()
        logger.debug(f"Registered {kind} artifact {path}")
        return sha

    def get_artifacts(self, kind: Optional[str] = None) -> pd.DataFrame:
        """Registered artifacts, optionally filtered by kind"""
        conn = sqlite3.connect(self.db_path)
        query = "SELECT kind, path, sha256 FROM artifacts"
        params = []
        if kind:
            query += " WHERE kind = ?"
            params.append(kind)
        query += " ORDER BY kind, path"
        df = pd.read_sql_query(query, conn, params=params if params else None)
        conn.close()
        return df

    def save_evaluations(self, rows: List[Dict]) -> int:
        """
        Store evaluation rows, replacing earlier rows with the same label/seed/split

        Args:
            rows: Dictionaries with EVALUATION_COLUMNS keys

        Returns:
            Number of rows stored
        """
        if not rows:
            logger.warning("No evaluation rows, nothing to save")
            return 0
        df = pd.DataFrame(rows)
        available = [col for col in EVALUATION_COLUMNS if col in df.columns]
        df = df[available].copy()

        conn = sqlite3.connect(self.db_path)
        try:
            cursor = conn.cursor()
            for row in rows:
                cursor.execute(
                    "DELETE FROM evaluations WHERE label = ? AND seed = ? AND split = ?",
                    (str(row.get('label')), int(row.get('seed', 0)), str(row.get('split', 'test')))
                )
            conn.commit()
            df.to_sql('evaluations', conn, if_exists='append', index=False, method='multi')
        finally:
            conn.close()
        logger.info(f"Saved {len(df)} evaluation rows")
        return len(df)

    def get_evaluations(self, labels: Optional[List[str]] = None, split: str = 'test') -> pd.DataFrame:
        """Evaluation rows for the given labels"""
        conn = sqlite3.connect(self.db_path)
        query = "SELECT * FROM evaluations WHERE split = ?"
        params: List = [split]
        if labels:
            query += f" AND label IN ({','.join('?' * len(labels))})"
            params.extend(labels)
        query += " ORDER BY label, seed"
        df = pd.read_sql_query(query, conn, params=params)
        conn.close()
        return df.drop(columns=['id'])

    def summary_report(self, labels: Optional[List[str]] = None, split: str = 'test') -> pd.DataFrame:
        """
        rLSE averaged over seeds per label

        Args:
            labels: Labels to include (all when omitted)
            split: Evaluated split

        Returns:
            DataFrame with one row per label, metric means and seed counts
        """
        df = self.get_evaluations(labels, split)
        if df.empty:
            return df
        keys = ['label', 'row_name', 'epochs', 'width', 'depth_spectral', 'k_modes', 'depth_fc', 'fc_width']
        grouped = df.groupby(keys, dropna=False)
        report = grouped[METRIC_COLUMNS].mean().reset_index()
        report['n_seeds'] = grouped['seed'].count().values
        if labels:
            order = {label: i for i, label in enumerate(labels)}
            report = report.sort_values('label', key=lambda s: s.map(order)).reset_index(drop=True)
        return report

    def export_report(self, df: pd.DataFrame, output_path: str, format_type: str = 'csv') -> str:
        """Write a report as CSV or Parquet"""
        if format_type == 'parquet':
            if not output_path.endswith('.parquet'):
                output_path = os.path.splitext(output_path)[0] + '.parquet'
            df.to_parquet(output_path, index=False)
        else:
            df.to_csv(output_path, index=False, float_format='%.6g')
        logger.info(f"Exported {len(df)} report rows to {output_path}")
        return output_path
