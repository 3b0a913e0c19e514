"""
Create every report chart from the results database and summary.json:
score-vs-step and FKT curves per suite and order, a final-row heat map per
run family, and the gradient-scaling case study of DMEA runs.
"""

import os
import glob
import logging
import argparse
from typing import Dict, List

import pandas as pd

from export_results_api import load_summary
from results_database import ResultsDatabase, ResultsVisualizer

logger = logging.getLogger(__name__)


def _label(group: Dict, ratios_per_method: Dict[str, int]) -> str:
    if ratios_per_method[group["method"]] > 1:
        return f"{group['method']} (ratio {group['pseudo_ratio']:g})"
    return group["method"]


def step_curves(groups: List[Dict], key: str) -> pd.DataFrame:
    """Long frame (method, step, mean, std) of one per-step field of the summary groups."""
    ratios: Dict[str, set] = {}
    for g in groups:
        ratios.setdefault(g["method"], set()).add(g["pseudo_ratio"])
    counts = {m: len(r) for m, r in ratios.items()}

    rows = []
    for g in groups:
        for point in g.get(key, []):
            rows.append({"method": _label(g, counts), **point})
    return pd.DataFrame(rows, columns=["method", "step", "mean", "std"])


def create_curve_charts(summary: Dict, output_dir: str) -> List[str]:
    print("\n📈 Creating score-vs-step and FKT charts...")
    paths = []
    families: Dict[tuple, List[Dict]] = {}
    for g in summary["groups"]:
        families.setdefault((g["suite"], g["order_index"]), []).append(g)

    for (suite, order), groups in sorted(families.items()):
        scores = step_curves(groups, "average_by_step")
        path = os.path.join(output_dir, f"{suite}-order{order}-average.svg")
        ResultsVisualizer.plot_step_curves(
            scores, f"Average exact match: {suite} suite, order {order}", "Exact match (%)", path
        )
        paths.append(path)

        transfer = step_curves(groups, "fkt_by_step")
        if transfer.empty:
            print(f"❌ No standalone scores for {suite}, skipping FKT chart")
            continue
        path = os.path.join(output_dir, f"{suite}-order{order}-fkt.svg")
        ResultsVisualizer.plot_step_curves(
            transfer, f"Forward knowledge transfer: {suite} suite, order {order}", "FKT",
            path, zero_line=True,
        )
        paths.append(path)
    return paths


def final_row_table(db: ResultsDatabase, suite: str, order_index: int) -> pd.DataFrame:
    """Methods x tasks table of final-row scores, averaged over seeds and pseudo ratios."""
    runs = db.get_runs(suite=suite)
    runs = runs[runs["order_index"] == order_index]
    frames = []
    for row in runs.itertuples(index=False):
        scores = db.get_run_scores(row.run_id)
        final = scores[scores["step"] == scores["step"].max()].copy()
        final["method"] = row.method
        frames.append(final)
    if not frames:
        return pd.DataFrame()

    df = pd.concat(frames, ignore_index=True)
    table = df.pivot_table(index="method", columns="position", values="score", aggfunc="mean")
    names = df.drop_duplicates("position").set_index("position")["task"]
    table.columns = [names[p] for p in table.columns]
    return table


def create_heatmaps(db: ResultsDatabase, output_dir: str) -> List[str]:
    print("\n📈 Creating final-row heat maps...")
    paths = []
    runs = db.get_runs()
    for (suite, order), _ in runs.groupby(["suite", "order_index"]):
        table = final_row_table(db, suite, int(order))
        if table.empty:
            continue
        path = os.path.join(output_dir, f"{suite}-order{order}-final-row.svg")
        ResultsVisualizer.plot_final_row_heatmap(table, f"Final scores: {suite} suite, order {order}", path)
        paths.append(path)
    return paths


def create_scaling_charts(db: ResultsDatabase, output_dir: str, method: str = "dmea") -> List[str]:
    """η and gradient-norm ratio per epoch for the last task of the first seed of each family."""
    print("\n📈 Creating gradient-scaling case studies...")
    paths = []
    runs = db.get_runs(method=method)
    for (suite, order, ratio), group in runs.groupby(["suite", "order_index", "pseudo_ratio"]):
        run = group.sort_values("seed").iloc[0]
        logs = sorted(glob.glob(os.path.join(str(run["run_dir"]), "traces", "adaptation-*.csv")))
        if not logs:
            continue
        log = pd.read_csv(logs[-1])
        if not (log["role"] == "replayed").any():
            continue
        path = os.path.join(output_dir, f"{suite}-order{order}-ratio{ratio:g}-{method}-scaling.svg")
        ResultsVisualizer.plot_gradient_scaling(
            log, f"Gradient scaling while learning {log['task_id'].iloc[0]} ({suite}, seed {run['seed']})", path
        )
        paths.append(path)
    return paths


def create_all_charts(db: ResultsDatabase, summary_path: str, output_dir: str) -> str:
    """
    Write every chart as SVG into output_dir.

    Returns:
        The output directory
    """
    os.makedirs(output_dir, exist_ok=True)
    summary = load_summary(summary_path)
    if summary is None:
        logger.warning(f"No summary at {summary_path}, skipping curve charts")
    else:
        create_curve_charts(summary, output_dir)
    create_heatmaps(db, output_dir)
    create_scaling_charts(db, output_dir)
    return output_dir


def main():
    """Regenerate all charts of a report directory."""
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    parser = argparse.ArgumentParser(description="Regenerate the report charts")
    parser.add_argument("--report", default="report", help="report directory written by 'dmea.py report'")
    args = parser.parse_args()

    print("=" * 70)
    print("📊 REGENERATING ALL CHARTS")
    print("=" * 70)

    db = ResultsDatabase(os.path.join(args.report, "results.db"))
    try:
        create_all_charts(db, os.path.join(args.report, "summary.json"), os.path.join(args.report, "plots"))
    finally:
        db.close()

    print("\n" + "=" * 70)
    print("✅ ALL CHARTS REGENERATED")
    print("=" * 70)


if __name__ == "__main__":
    main()
