"""CSV and manifest writers.

Floats are written with ``repr`` so reruns produce byte-identical files.
Missing values are written as empty fields.
"""

import csv
import json
import platform
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from byzantine_dsgd.sim_models import GapEstimate, RunTrace, StabilityTrace, SweepResult

TRACE_HEADER = ["k", "avg_loss_train", "avg_loss_test", "acc_test", "H", "delta", "eta"]
GAP_HEADER = ["k", "gap_mean", "gap_stderr", "repeats"]
BOUND_HEADER = ["k", "bound"]
SUMMARY_HEADER = [
    "value", "seed", "status", "k", "avg_loss_train", "avg_loss_test", "acc_test", "H", "gap", "error",
]


def _fmt(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def write_trace(trace: RunTrace, path: Path, stability: Optional[StabilityTrace] = None) -> Path:
    """Trace CSV; ``delta`` and ``eta`` are filled only for pair runs."""
    stab = {r.k: r for r in stability.records} if stability is not None else {}
    rows = []
    for r in trace.records:
        s = stab.get(r.k)
        rows.append([
            r.k, r.avg_loss_train, r.avg_loss_test, r.acc_test, r.H,
            s.delta if s else None, s.eta if s else None,
        ])
    return _write_csv(path, TRACE_HEADER, rows)


def write_gap(gap: GapEstimate, path: Path) -> Path:
    rows = [[k, m, s, gap.repeats] for k, m, s in zip(gap.ks, gap.mean, gap.stderr)]
    return _write_csv(path, GAP_HEADER, rows)


def write_bounds(rows: Sequence[Tuple[float, float]], path: Path) -> Path:
    return _write_csv(path, BOUND_HEADER, [[float(k), float(b)] for k, b in rows])


def write_summary(results: Sequence[SweepResult], path: Path) -> Path:
    """One row per sweep value with the final recorded step."""
    rows: List[List[Any]] = []
    for res in results:
        if res.trace is None or not res.trace.records:
            rows.append([res.value, res.seed, res.status] + [None] * 6 + [res.error])
            continue
        last = res.trace.records[-1]
        rows.append([
            res.value, res.seed, res.status, last.k, last.avg_loss_train, last.avg_loss_test,
            last.acc_test, last.H, last.avg_loss_test - last.avg_loss_train, res.error,
        ])
    return _write_csv(path, SUMMARY_HEADER, rows)


def package_versions() -> Dict[str, str]:
    versions = {"python": platform.python_version()}
    for name in ("byzantine-dsgd", "numpy", "networkx", "pydantic", "prometheus-client"):
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


def write_manifest(
    path: Path,
    config_hash: str,
    seed: int,
    command: str,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """``manifest.json`` with sorted keys and no timestamps."""
    body: Dict[str, Any] = {
        "command": command,
        "config_hash": config_hash,
        "seed": seed,
        "versions": package_versions(),
    }
    body.update(extra or {})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(body, sort_keys=True, indent=2, default=str) + "\n", encoding="utf-8")
    return path
