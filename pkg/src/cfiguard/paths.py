from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path


@dataclass(frozen=True)
class RuntimePaths:
    repo_root: Path
    runtime_dir: Path
    artifacts_dir: Path
    traces_dir: Path
    attacks_dir: Path
    logs_dir: Path
    reports_dir: Path
    log_path: Path
    listing_path: Path
    truth_path: Path
    cfg_path: Path
    refined_cfg_path: Path
    table_path: Path
    chains_path: Path
    dataset_path: Path
    model_path: Path
    baseline_path: Path
    trace_path: Path
    walk_path: Path
    manifest_path: Path


def build_runtime_paths(repo_root: Path, runtime_dir_name: str = "runtime") -> RuntimePaths:
    runtime_dir = repo_root / runtime_dir_name
    artifacts_dir = runtime_dir / "artifacts"
    traces_dir = runtime_dir / "traces"
    attacks_dir = traces_dir / "attacks"
    logs_dir = runtime_dir / "logs"
    reports_dir = runtime_dir / "reports"

    for path in (runtime_dir, artifacts_dir, traces_dir, logs_dir, reports_dir):
        path.mkdir(parents=True, exist_ok=True)

    return RuntimePaths(
        repo_root=repo_root,
        runtime_dir=runtime_dir,
        artifacts_dir=artifacts_dir,
        traces_dir=traces_dir,
        attacks_dir=attacks_dir,
        logs_dir=logs_dir,
        reports_dir=reports_dir,
        log_path=logs_dir / "cfiguard.log",
        listing_path=artifacts_dir / "program.listing",
        truth_path=artifacts_dir / "program.truth",
        cfg_path=artifacts_dir / "cfg.json",
        refined_cfg_path=artifacts_dir / "cfg.refined.json",
        table_path=artifacts_dir / "offsets.table",
        chains_path=artifacts_dir / "chains.txt",
        dataset_path=artifacts_dir / "dataset.bin",
        model_path=artifacts_dir / "model.json",
        baseline_path=artifacts_dir / "baseline.json",
        trace_path=traces_dir / "benign.dctr",
        walk_path=traces_dir / "benign.walk",
        manifest_path=attacks_dir / "manifest.jsonl",
    )
