"""Run outputs: metrics.csv, plans.jsonl, layers.csv and the summary table."""
import json
import logging
import os
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from flsim.config import parse_scheme
from flsim.orchestrator import ExperimentResult, PlanLogEntry, RoundRecord, latency_to_target

logger = logging.getLogger(__name__)

METRICS_COLUMNS = [
    "round",
    "cumulative_latency_s",
    "T_d",
    "T_c",
    "T_u",
    "train_loss",
    "test_accuracy",
    "scheme",
    "seed",
    "realized_loss_drop_per_s",
    "error",
]
LAYER_COLUMNS = ["round", "layer", "name", "M", "weight", "D_k", "ber", "predicted_error", "realized_error"]


def metrics_frame(records: Sequence[RoundRecord]) -> pd.DataFrame:
    """One row per evaluated round, plus the record of an aborted round."""
    rows = [
        {
            "round": r.round,
            "cumulative_latency_s": r.cumulative_latency,
            "T_d": r.latency.T_d,
            "T_c": r.latency.T_c,
            "T_u": r.latency.T_u,
            "train_loss": r.train_loss,
            "test_accuracy": r.test_accuracy,
            "scheme": r.scheme,
            "seed": r.seed,
            "realized_loss_drop_per_s": r.realized_objective,
            "error": r.error,
        }
        for r in records
        if r.evaluated or r.error is not None
    ]
    return pd.DataFrame(rows, columns=METRICS_COLUMNS)


def layer_frame(records: Sequence[RoundRecord], client: int = 0) -> pd.DataFrame:
    """Per round and layer: the level one client chose, its weight and size."""
    rows = []
    for record in records:
        if client >= len(record.plans):
            continue
        entry = record.plans[client]
        for k, layer in enumerate(entry.layers):
            rows.append(
                {
                    "round": record.round,
                    "layer": k,
                    "name": layer.name,
                    "M": layer.level,
                    "weight": layer.weight,
                    "D_k": layer.size,
                    "ber": layer.ber,
                    "predicted_error": layer.predicted_error,
                    "realized_error": layer.realized_error,
                }
            )
    return pd.DataFrame(rows, columns=LAYER_COLUMNS)


def summary_table(
    results: Mapping[str, ExperimentResult], target: Optional[float], task: str = "Task"
) -> pd.DataFrame:
    """
    Latency to reach the target accuracy per scheme, with the saving of the
    layer-wise scheme over the model-wide AM baseline as the last row.
    """
    header = f"{task} Acc.={target * 100:.1f}%" if target is not None else f"{task} final"
    cells, times = {}, {}
    for scheme, result in results.items():
        label = parse_scheme(scheme).label
        if target is not None:
            value = latency_to_target(result.records, target)
        else:
            value = result.records[-1].cumulative_latency if result.records else None
        times[scheme] = value
        cells[label] = f"{value:.2f}s" if value is not None else "not reached"
    am, proposed = times.get("am"), times.get("layerwise")
    if am is not None and proposed is not None and am > 0:
        cells["Saving"] = f"{(1.0 - proposed / am) * 100:.1f}%"
    return pd.DataFrame({header: cells})


def _mean_levels(result: ExperimentResult) -> pd.DataFrame:
    frame = layer_frame(result.records)
    if frame.empty:
        return pd.DataFrame(columns=["name", "D_k", "mean_M", "mean_weight"])
    grouped = frame.groupby("layer", sort=True).agg(
        name=("name", "first"), D_k=("D_k", "first"), mean_M=("M", "mean"), mean_weight=("weight", "mean")
    )
    return grouped.reset_index(drop=True)


def write_summary(
    results: Mapping[str, ExperimentResult], out_dir: Union[str, Path], target: Optional[float], task: str = "Task"
) -> Path:
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    path = out_dir / "summary.txt"
    lines = ["Summary of Experimental Results", "", summary_table(results, target, task).to_string(), ""]
    for scheme, result in results.items():
        records = result.records
        final = next((r for r in reversed(records) if r.evaluated), None)
        lines.append(f"[{scheme}] rounds={len(records)}")
        if result.aborted is not None:
            lines.append(f"  aborted: {result.aborted}")
        if final is not None:
            lines.append(
                f"  final accuracy={final.test_accuracy:.4f} train loss={final.train_loss:.4f} "
                f"cumulative latency={final.cumulative_latency:.3f}s "
                f"realized loss drop per second={final.realized_objective:.6g}"
            )
        gradient_evaluations = sum(r.gradient_evaluations for r in records)
        hvp_calls = sum(r.hvp_calls for r in records)
        lines.append(
            f"  local gradient evaluations={gradient_evaluations} "
            f"importance HVPs={hvp_calls} (extra gradient evaluations={2 * hvp_calls})"
        )
        levels = _mean_levels(result)
        if not levels.empty:
            lines.append("  mean modulation level per layer (client 0):")
            lines.extend("    " + line for line in levels.to_string(index=False).splitlines())
        lines.append("")
    try:
        path.write_text("\n".join(lines))
    except OSError as exc:
        raise OSError(f"could not write {path}: {exc}") from exc
    return path


def _jsonable(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    raise TypeError(f"not serializable: {type(value).__name__}")


def write_outputs(
    records: Sequence[RoundRecord],
    plan_log: Sequence[PlanLogEntry],
    out_dir: Union[str, Path],
    result: Optional[ExperimentResult] = None,
) -> Dict[str, Path]:
    """
    Write metrics.csv, plans.jsonl and layers.csv (plus summary.txt when the
    experiment result is given) into `out_dir`.

    Returns:
        mapping of output kind to file path
    """
    out_dir = Path(out_dir)
    paths = {
        "metrics": out_dir / "metrics.csv",
        "plans": out_dir / "plans.jsonl",
        "layers": out_dir / "layers.csv",
    }
    try:
        os.makedirs(out_dir, exist_ok=True)
        metrics_frame(records).to_csv(paths["metrics"], index=False)
        with open(paths["plans"], "w") as handle:
            for entry in plan_log:
                handle.write(json.dumps(entry.to_dict(), default=_jsonable) + "\n")
        layer_frame(records).to_csv(paths["layers"], index=False)
    except OSError as exc:
        raise OSError(f"could not write outputs to {out_dir}: {exc}") from exc
    if result is not None:
        paths["summary"] = write_summary({result.config.scheme: result}, out_dir, result.config.target_accuracy)
    for kind, path in paths.items():
        logger.info(f"Saved {kind} to {path}")
    return paths


def collect_metrics(compare_dir: Union[str, Path]) -> pd.DataFrame:
    """
    Stack the metrics.csv of every scheme directory under a compare run.

    Args:
        compare_dir: output directory of `compare`, one subdirectory per scheme

    Returns:
        pd.DataFrame: all rows, ordered by scheme then round, in METRICS_COLUMNS order
    """
    compare_dir = Path(compare_dir)
    if not compare_dir.is_dir():
        raise FileNotFoundError(f"no such directory: {compare_dir}")
    frames = [pd.read_csv(path) for path in sorted(compare_dir.glob("*/metrics.csv"))]
    frames = [frame for frame in frames if not frame.empty]
    if not frames:
        return pd.DataFrame(columns=METRICS_COLUMNS)
    combined = pd.concat(frames, ignore_index=True)
    return combined.sort_values(["scheme", "round"], kind="stable").reset_index(drop=True)[METRICS_COLUMNS]
