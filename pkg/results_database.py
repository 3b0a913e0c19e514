"""
Results Database
Stores score matrices and run metadata of lifelong-learning runs in SQLite and
draws the static report figures.

Requirements:
- pandas
- matplotlib
- sqlite3 (built-in)

Usage:
    from results_database import ResultsDatabase
    db = ResultsDatabase("report/results.db")
    db.insert_run(run_id, scores, metadata)
"""

import sqlite3
import logging
from datetime import datetime
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

logger = logging.getLogger(__name__)

SCORE_COLUMNS = ["step", "after_task", "position", "task", "score", "token_accuracy"]
METADATA_COLUMNS = [
    "run_id", "suite", "method", "order_index", "seed", "pseudo_ratio", "num_tasks",
    "learnable_parameters", "seconds", "reuse_fraction", "run_dir",
]


class ResultsDatabase:
    """Manages the SQLite database of run scores."""

    def __init__(self, db_path: str = "dmea_results.db"):
        """
        Initialize database connection.

        Args:
            db_path: Path to SQLite database file (":memory:" for a throwaway database)
        """
        self.db_path = db_path
        self.conn = sqlite3.connect(db_path)
        self._create_tables()
        logger.info(f"Connected to database: {db_path}")

    def _create_tables(self):
        """Create necessary tables if they don't exist."""
        cursor = self.conn.cursor()

        # One row per (run, step, task): score on task after learning step
        cursor.execute("""
            CREATE TABLE IF NOT EXISTS run_scores (
                run_id TEXT NOT NULL,
                step INTEGER NOT NULL,
                after_task TEXT NOT NULL,
                position INTEGER NOT NULL,
                task TEXT NOT NULL,
                score REAL NOT NULL,
                token_accuracy REAL,
                PRIMARY KEY (run_id, step, task)
            )
        """)

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS run_metadata (
                run_id TEXT PRIMARY KEY,
                suite TEXT,
                method TEXT,
                order_index INTEGER,
                seed INTEGER,
                pseudo_ratio REAL,
                num_tasks INTEGER,
                learnable_parameters INTEGER,
                seconds REAL,
                reuse_fraction REAL,
                run_dir TEXT,
                last_updated TEXT
            )
        """)

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS standalone_scores (
                suite TEXT NOT NULL,
                seed INTEGER NOT NULL,
                task TEXT NOT NULL,
                score REAL NOT NULL,
                token_accuracy REAL,
                PRIMARY KEY (suite, seed, task)
            )
        """)

        self.conn.commit()
        logger.debug("Database tables initialized")

    def insert_run(self, run_id: str, scores: pd.DataFrame, metadata: Dict):
        """
        Insert or replace the scores and metadata of one run.

        Args:
            run_id: Unique run name (the run directory name)
            scores: Long-format score frame with SCORE_COLUMNS
            metadata: Run metadata; keys outside METADATA_COLUMNS are ignored
        """
        try:
            df = scores[SCORE_COLUMNS].copy()
            df.insert(0, "run_id", run_id)

            # Delete existing records for this run to avoid duplicates
            cursor = self.conn.cursor()
            cursor.execute("DELETE FROM run_scores WHERE run_id = ?", (run_id,))

            df.to_sql("run_scores", self.conn, if_exists="append", index=False, method="multi")

            row = [run_id] + [metadata.get(c) for c in METADATA_COLUMNS[1:]]
            cursor.execute(f"""
                INSERT OR REPLACE INTO run_metadata
                ({', '.join(METADATA_COLUMNS)}, last_updated)
                VALUES ({', '.join('?' * (len(METADATA_COLUMNS) + 1))})
            """, row + [datetime.now().isoformat()])

            self.conn.commit()
            logger.info(f"Inserted {len(df)} score records for {run_id}")

        except Exception as e:
            self.conn.rollback()
            logger.error(f"Failed to insert run {run_id}: {e}")
            raise

    def insert_standalone(self, suite: str, seed: int, scores: pd.DataFrame):
        """
        Insert or replace standalone (isolated training) scores.

        Args:
            suite: Suite name
            seed: Run seed
            scores: Frame with task, score and token_accuracy columns
        """
        try:
            df = scores[["task", "score", "token_accuracy"]].copy()
            df.insert(0, "seed", int(seed))
            df.insert(0, "suite", suite)

            cursor = self.conn.cursor()
            cursor.execute("DELETE FROM standalone_scores WHERE suite = ? AND seed = ?", (suite, int(seed)))
            df.to_sql("standalone_scores", self.conn, if_exists="append", index=False, method="multi")
            self.conn.commit()
            logger.info(f"Inserted {len(df)} standalone scores for {suite} seed {seed}")

        except Exception as e:
            self.conn.rollback()
            logger.error(f"Failed to insert standalone scores for {suite}: {e}")
            raise

    def get_run_scores(self, run_id: str) -> pd.DataFrame:
        query = f"""
            SELECT {', '.join(SCORE_COLUMNS)}
            FROM run_scores
            WHERE run_id = ?
            ORDER BY step, position
        """
        return pd.read_sql_query(query, self.conn, params=[run_id])

    def get_runs(self, suite: Optional[str] = None, method: Optional[str] = None) -> pd.DataFrame:
        """
        Run metadata, optionally filtered.

        Args:
            suite: Only runs of this suite
            method: Only runs of this method

        Returns:
            DataFrame with METADATA_COLUMNS
        """
        query = f"SELECT {', '.join(METADATA_COLUMNS)} FROM run_metadata WHERE 1 = 1"
        params = []

        if suite:
            query += " AND suite = ?"
            params.append(suite)
        if method:
            query += " AND method = ?"
            params.append(method)

        query += " ORDER BY suite, method, order_index, pseudo_ratio, seed"
        return pd.read_sql_query(query, self.conn, params=params)

    def get_standalone(self, suite: str, seed: int) -> Dict[str, float]:
        df = pd.read_sql_query(
            "SELECT task, score FROM standalone_scores WHERE suite = ? AND seed = ?",
            self.conn,
            params=[suite, int(seed)],
        )
        return dict(zip(df["task"], df["score"]))

    def export_to_csv(self, output_path: str = "dmea_scores_export.csv", methods: Optional[List[str]] = None):
        """
        Export every stored score, joined with its run metadata, in long format.

        Args:
            output_path: Path for output CSV file
            methods: Only these methods (None = all)
        """
        query = """
            SELECT m.suite, m.method, m.order_index, m.pseudo_ratio, m.seed,
                   s.run_id, s.step, s.after_task, s.position, s.task, s.score, s.token_accuracy
            FROM run_scores s
            JOIN run_metadata m ON m.run_id = s.run_id
        """
        params = []

        if methods:
            placeholders = ','.join('?' * len(methods))
            query += f" WHERE m.method IN ({placeholders})"
            params = list(methods)

        query += " ORDER BY m.suite, m.method, m.order_index, m.seed, s.step, s.position"

        df = pd.read_sql_query(query, self.conn, params=params)
        df.to_csv(output_path, index=False)

        logger.info(f"Exported {len(df)} score rows to {output_path}")
        print(f"✓ Scores exported to {output_path}")

    def close(self):
        """Close database connection."""
        self.conn.close()
        logger.info("Database connection closed")


class ResultsVisualizer:
    """Static report figures, written as SVG."""

    @staticmethod
    def _save(fig, output_path: Optional[str]):
        plt.tight_layout()
        if output_path:
            fig.savefig(output_path, bbox_inches='tight')
            logger.info(f"Plot saved to {output_path}")
            print(f"✓ Plot saved to {output_path}")
        plt.close(fig)

    @staticmethod
    def plot_step_curves(
        curves: pd.DataFrame,
        title: str,
        ylabel: str,
        output_path: Optional[str] = None,
        zero_line: bool = False
    ):
        """
        One line per method with a ±1 std band.

        Args:
            curves: DataFrame with method, step, mean and std columns
            title: Plot title
            ylabel: Y-axis label
            output_path: If provided, save plot to this path
            zero_line: Draw a dashed line at y = 0
        """
        fig, ax = plt.subplots(figsize=(14, 7))

        for method, group in curves.groupby("method", sort=True):
            group = group.sort_values("step")
            ax.plot(group["step"], group["mean"], marker="o", linewidth=1.5, label=method)
            ax.fill_between(
                group["step"], group["mean"] - group["std"], group["mean"] + group["std"], alpha=0.15
            )

        if zero_line:
            ax.axhline(0.0, color='#A23B72', linestyle='--', alpha=0.7, linewidth=1)

        ax.set_title(title, fontsize=16, fontweight='bold')
        ax.set_xlabel('Tasks learned', fontsize=12)
        ax.set_ylabel(ylabel, fontsize=12)
        ax.grid(True, alpha=0.3)
        ax.legend()

        ResultsVisualizer._save(fig, output_path)

    @staticmethod
    def plot_final_row_heatmap(
        table: pd.DataFrame,
        title: str,
        output_path: Optional[str] = None
    ):
        """
        Heat map of final-row scores.

        Args:
            table: Rows are methods, columns are tasks in learning order
            title: Plot title
            output_path: If provided, save plot to this path
        """
        fig, ax = plt.subplots(figsize=(14, 7))
        values = table.to_numpy(dtype=float)
        image = ax.imshow(values, cmap='viridis', vmin=0, vmax=100, aspect='auto')

        ax.set_xticks(range(table.shape[1]))
        ax.set_xticklabels(table.columns, rotation=45, ha='right')
        ax.set_yticks(range(table.shape[0]))
        ax.set_yticklabels(table.index)
        for i in range(values.shape[0]):
            for j in range(values.shape[1]):
                if np.isfinite(values[i, j]):
                    ax.text(j, i, f"{values[i, j]:.1f}", ha='center', va='center', color='white', fontsize=9)

        fig.colorbar(image, ax=ax, label='Exact match (%)')
        ax.set_title(title, fontsize=16, fontweight='bold')

        ResultsVisualizer._save(fig, output_path)

    @staticmethod
    def plot_gradient_scaling(
        log: pd.DataFrame,
        title: str,
        output_path: Optional[str] = None
    ):
        """
        Per-epoch scale factor and gradient-norm ratio of every replayed task.

        Args:
            log: Adaptation log with epoch, task_id, role, eta, g_new_norm and g_old_norm columns
            title: Plot title
            output_path: If provided, save plot to this path
        """
        replayed = log[log["role"] == "replayed"]
        fig, (ax_eta, ax_norm) = plt.subplots(1, 2, figsize=(14, 7))

        for task_id, group in replayed.groupby("task_id", sort=False):
            ax_eta.plot(group["epoch"], group["eta"], marker="o", linewidth=1.5, label=task_id)
            ax_norm.plot(group["epoch"], group["g_new_norm"] / group["g_old_norm"],
                         marker="s", linewidth=1.5, label=task_id)

        ax_eta.axhline(1.0, color='#A23B72', linestyle='--', alpha=0.7, linewidth=1)
        ax_eta.set_xlabel('Completed epochs', fontsize=12)
        ax_eta.set_ylabel('Scale factor', fontsize=12)
        ax_norm.set_xlabel('Completed epochs', fontsize=12)
        ax_norm.set_ylabel('|g_new| / |g_old|', fontsize=12)
        for ax in (ax_eta, ax_norm):
            ax.grid(True, alpha=0.3)
            ax.legend()
        fig.suptitle(title, fontsize=16, fontweight='bold')

        ResultsVisualizer._save(fig, output_path)
