"""
Export the results database to the JSON summary and per-run CSV score matrices.
The summary is validated against SUMMARY_SCHEMA before it is written.

Usage:
    python export_results_api.py --db report/results.db --out report/summary.json
"""

import os
import json
import logging
import argparse
from datetime import datetime
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import jsonschema

from harness import ResultsMatrix, average_score, fkt
from results_database import ResultsDatabase

logger = logging.getLogger(__name__)

_STAT = {
    "type": "object",
    "properties": {"mean": {"type": "number"}, "std": {"type": "number"}},
    "required": ["mean", "std"],
    "additionalProperties": False,
}

_STEP_STAT = {
    "type": "object",
    "properties": {
        "step": {"type": "integer", "minimum": 1},
        "mean": {"type": "number"},
        "std": {"type": "number"},
    },
    "required": ["step", "mean", "std"],
    "additionalProperties": False,
}

SUMMARY_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "Lifelong run summary",
    "type": "object",
    "properties": {
        "last_updated": {"type": "string"},
        "total_runs": {"type": "integer", "minimum": 0},
        "groups": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "suite": {"type": "string"},
                    "method": {"type": "string"},
                    "order_index": {"type": "integer", "minimum": 0},
                    "pseudo_ratio": {"type": "number", "minimum": 0},
                    "num_tasks": {"type": "integer", "minimum": 1},
                    "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
                    "final_average": _STAT,
                    "average_by_step": {"type": "array", "items": _STEP_STAT},
                    "fkt_by_step": {"type": "array", "items": _STEP_STAT},
                    "learnable_parameters": _STAT,
                    "seconds": _STAT,
                    "reuse_fraction": _STAT,
                },
                "required": [
                    "suite", "method", "order_index", "pseudo_ratio", "num_tasks", "seeds",
                    "final_average", "average_by_step", "learnable_parameters", "seconds",
                ],
                "additionalProperties": False,
            },
        },
    },
    "required": ["last_updated", "total_runs", "groups"],
    "additionalProperties": False,
}

GROUP_KEYS = ["suite", "method", "order_index", "pseudo_ratio"]


def _stat(values) -> Dict[str, float]:
    values = np.asarray(list(values), dtype=float)
    return {"mean": float(np.mean(values)), "std": float(np.std(values))}


def _step_stats(per_run: List[Dict[int, float]]) -> List[Dict]:
    steps = sorted(per_run[0])
    return [{"step": int(s), **_stat(run[s] for run in per_run)} for s in steps]


def _present(value) -> bool:
    return value is not None and not (isinstance(value, float) and np.isnan(value))


def summarize_group(db: ResultsDatabase, runs: pd.DataFrame) -> Dict:
    """
    Mean and std over the seeds of one (suite, method, order, ratio) group.

    Args:
        db: Results database holding the group's score rows
        runs: Metadata rows of the group, one per seed

    Returns:
        Group entry of the summary; optional fields are left out when no run provides them
    """
    first = runs.iloc[0]
    matrices, averages, fkts = [], [], []
    have_standalone = True

    for row in runs.itertuples(index=False):
        matrix = ResultsMatrix.from_frame(db.get_run_scores(row.run_id))
        matrices.append(matrix)
        averages.append({i + 1: average_score(matrix.row(i)) for i in range(matrix.size)})

        standalone = db.get_standalone(row.suite, int(row.seed))
        if matrix.size < 2 or not all(t in standalone for t in matrix.task_order):
            have_standalone = False
        else:
            fkts.append({t: fkt(matrix, t, standalone) for t in range(2, matrix.size + 1)})

    group = {
        "suite": str(first["suite"]),
        "method": str(first["method"]),
        "order_index": int(first["order_index"]),
        "pseudo_ratio": float(first["pseudo_ratio"]) if _present(first["pseudo_ratio"]) else 0.0,
        "num_tasks": int(matrices[0].size),
        "seeds": sorted(int(s) for s in runs["seed"]),
        "final_average": _stat(average_score(m.final_row()) for m in matrices),
        "average_by_step": _step_stats(averages),
        "learnable_parameters": _stat(runs["learnable_parameters"]),
        "seconds": _stat(runs["seconds"]),
    }
    if have_standalone and fkts:
        group["fkt_by_step"] = _step_stats(fkts)
    reuse = [v for v in runs["reuse_fraction"] if _present(v)]
    if reuse:
        group["reuse_fraction"] = _stat(reuse)
    return group


def build_summary(db: ResultsDatabase) -> Dict:
    """Summary of every run in the database, grouped by suite, method, order and pseudo ratio."""
    runs = db.get_runs()
    runs["pseudo_ratio"] = runs["pseudo_ratio"].fillna(0.0)
    groups = [summarize_group(db, group) for _, group in runs.groupby(GROUP_KEYS, sort=True)]
    return {
        "last_updated": datetime.now().isoformat(),
        "total_runs": int(len(runs)),
        "groups": groups,
    }


def validate_summary(summary: Dict):
    """
    Raises:
        jsonschema.ValidationError: If the summary does not match SUMMARY_SCHEMA
    """
    jsonschema.validate(instance=summary, schema=SUMMARY_SCHEMA)


def export_summary(db: ResultsDatabase, output_path: str = "summary.json") -> str:
    """Build, validate and write summary.json; returns its path."""
    print("📊 Exporting run summary to JSON...")
    summary = build_summary(db)
    try:
        validate_summary(summary)
    except jsonschema.ValidationError as e:
        logger.error(f"Summary does not match its schema: {e.message}")
        raise

    os.makedirs(os.path.dirname(os.path.abspath(output_path)), exist_ok=True)
    with open(output_path, 'w') as f:
        json.dump(summary, f, indent=2)

    print(f"✓ Exported {len(summary['groups'])} groups ({summary['total_runs']} runs) to {output_path}")
    return output_path


def write_score_matrices(db: ResultsDatabase, output_dir: str) -> str:
    """One long-format CSV score matrix per run: T(T+1)/2 rows for T tasks."""
    os.makedirs(output_dir, exist_ok=True)
    for run_id in db.get_runs()["run_id"]:
        db.get_run_scores(run_id).to_csv(os.path.join(output_dir, f"{run_id}.csv"), index=False)
    logger.info(f"Score matrices written to {output_dir}")
    return output_dir


def load_summary(path: str) -> Optional[Dict]:
    if not os.path.exists(path):
        return None
    with open(path, 'r') as f:
        return json.load(f)


def main():
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    parser = argparse.ArgumentParser(description="Export the results database to summary.json")
    parser.add_argument("--db", default="report/results.db", help="results database")
    parser.add_argument("--out", default="report/summary.json", help="summary path")
    args = parser.parse_args()

    print("=" * 70)
    print("📊 EXPORTING RUN SUMMARY")
    print("=" * 70)

    db = ResultsDatabase(args.db)
    try:
        export_summary(db, args.out)
    finally:
        db.close()

    print("\n" + "=" * 70)
    print("✅ EXPORT COMPLETE")
    print("=" * 70)


if __name__ == "__main__":
    main()
