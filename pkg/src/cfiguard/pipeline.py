from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
import json
import logging
from pathlib import Path
from typing import Callable, Sequence

from .cfg import Cfg, CfgFormatError, build_static_cfg, refine_cfg
from .chains import ChainSet, split_cfg
from .config import PipelineConfig
from .detector import AlertReport, EdgeOracleClassifier, make_detector, run_detection
from .encoder import Dataset, OffsetTable, build_dataset, build_offset_table
from .errors import CfiGuardError, ConfigError
from .fingerprint import canonical_json
from .listing import parse_listing, segment_gadgets
from .neuralnet import Metrics, Model, comparison_table, evaluate, init_model, train, train_logreg
from .payloads import PayloadRecord, generate_payloads, read_manifest, tip_sources, write_manifest
from .synthetic import generate_program, read_truth, write_truth
from .trace_io import (
    TRACE_SUFFIX,
    indirect_successors_from_offsets,
    inject_attack,
    read_trace,
    simulate_execution,
    write_trace,
    write_walk_log,
)

ALERT_EXIT_CODE = 3


class MissingInputFile(ConfigError):
    def __init__(self, path: Path):
        super().__init__(f"Input file not found: {path}")
        self.path = path


def _require(*paths: Path) -> None:
    for path in paths:
        if not path.is_file():
            raise MissingInputFile(path)


def _guarded(logger: logging.Logger, label: str, action: Callable[[], int]) -> int:
    try:
        return action()
    except CfiGuardError as exc:
        logger.error("%s failed: %s", label, exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("%s failed: %s", label, exc)
        return 1
    except Exception:
        logger.exception("%s failed.", label)
        return 1


def _read_cfg(path: Path) -> Cfg:
    _require(path)
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CfgFormatError(f"CFG file is not JSON: {exc}") from exc
    return Cfg.from_document(document)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def run_synth(
    config: PipelineConfig,
    logger: logging.Logger,
    out_path: Path | None = None,
    truth_path: Path | None = None,
    min_gadgets: int | None = None,
) -> int:
    def _action() -> int:
        listing_path = out_path or config.runtime.listing_path
        target_path = truth_path or config.runtime.truth_path
        program = generate_program(min_gadgets or config.min_gadgets, config.seed, config.base)
        program.write_listing(listing_path)
        write_truth(target_path, program.indirect_targets)
        logger.info("Synthetic listing written to %s (truth map %s).", listing_path, target_path)
        print(f"functions={program.function_count} gadgets={program.gadget_count} entry={program.entry_address:#x}")
        return 0

    return _guarded(logger, "synth", _action)


def run_cfg_build(
    config: PipelineConfig,
    logger: logging.Logger,
    listing_path: Path,
    out_path: Path | None = None,
    base: int | None = None,
) -> int:
    def _action() -> int:
        _require(listing_path)
        listing = parse_listing(listing_path.read_text(encoding="utf-8"))
        segmentation = segment_gadgets(listing)
        cfg = build_static_cfg(segmentation.gadgets, config.base if base is None else base)
        target = out_path or config.runtime.cfg_path
        _write_text(target, cfg.dumps())
        print(f"nodes={len(cfg)} edges={len(cfg.edges())} dropped={segmentation.dropped_instructions} sha256={cfg.digest}")
        return 0

    return _guarded(logger, "cfg build", _action)


def run_table_build(
    config: PipelineConfig,
    logger: logging.Logger,
    cfg_path: Path,
    out_path: Path | None = None,
    g_max: int | None = None,
) -> int:
    def _action() -> int:
        cfg = _read_cfg(cfg_path)
        table = build_offset_table(cfg, g_max or config.g_max)
        table.write(out_path or config.runtime.table_path)
        logger.info("Offset table built: entries=%s G_max=%s", len(table), table.g_max)
        print(f"entries={len(table)} g_max={table.g_max} node_hash={table.node_hash}")
        return 0

    return _guarded(logger, "table build", _action)


def run_cfg_refine(
    config: PipelineConfig,
    logger: logging.Logger,
    cfg_path: Path,
    trace_paths: Sequence[Path],
    table_path: Path,
    out_path: Path | None = None,
) -> int:
    def _action() -> int:
        _require(table_path, *trace_paths)
        cfg = _read_cfg(cfg_path)
        table = OffsetTable.read(table_path)
        for trace_path in trace_paths:
            header, events = read_trace(trace_path)
            cfg = refine_cfg(cfg, header, events, table)
        target = out_path or config.runtime.refined_cfg_path
        _write_text(target, cfg.dumps())
        print(f"nodes={len(cfg)} edges={len(cfg.edges())} sha256={cfg.digest}")
        return 0

    return _guarded(logger, "cfg refine", _action)


def run_chains_split(
    config: PipelineConfig,
    logger: logging.Logger,
    cfg_path: Path,
    out_path: Path | None = None,
    malicious_count: int | None = None,
) -> int:
    def _action() -> int:
        cfg = _read_cfg(cfg_path)
        chain_set = split_cfg(
            cfg,
            config.split_seed,
            malicious_count=malicious_count,
            malicious_ratio=config.malicious_ratio,
            include_pairs=config.include_pairs,
            realistic=config.realistic_malicious,
        )
        chain_set.write(out_path or config.runtime.chains_path)
        print(
            f"benign={len(chain_set.benign)} malicious={len(chain_set.malicious)} "
            f"exhausted={'yes' if chain_set.exhausted else 'no'} sha256={chain_set.digest}"
        )
        return 0

    return _guarded(logger, "chains split", _action)


def run_dataset_build(
    config: PipelineConfig,
    logger: logging.Logger,
    chains_path: Path,
    table_path: Path,
    out_path: Path | None = None,
) -> int:
    def _action() -> int:
        _require(chains_path, table_path)
        chain_set = ChainSet.read(chains_path)
        table = OffsetTable.read(table_path)
        dataset = build_dataset(chain_set, config.ratios, config.dataset_seed, table.g_max, table)
        dataset.write(out_path or config.runtime.dataset_path)
        counts = " ".join(f"{name}={len(part)}" for name, part in dataset.partitions().items())
        print(f"{counts} L={dataset.input_dim} sha256={dataset.digest}")
        return 0

    return _guarded(logger, "dataset build", _action)


def run_train(
    config: PipelineConfig,
    logger: logging.Logger,
    dataset_path: Path,
    out_path: Path | None = None,
) -> int:
    def _action() -> int:
        _require(dataset_path)
        dataset = Dataset.read(dataset_path)
        model = train(init_model(config.model_config(dataset.input_dim)), dataset)
        model.write(out_path or config.runtime.model_path)
        best = max((record.val_accuracy for record in model.history), default=0.0)
        print(f"epochs={len(model.history)} best_val_accuracy={best * 100:.1f}% sha256={model.digest}")
        return 0

    return _guarded(logger, "train", _action)


def run_baseline(
    config: PipelineConfig,
    logger: logging.Logger,
    dataset_path: Path,
    out_path: Path | None = None,
) -> int:
    def _action() -> int:
        _require(dataset_path)
        dataset = Dataset.read(dataset_path)
        model, metrics = train_logreg(
            dataset,
            lr=config.learning_rate,
            epochs=config.epochs,
            seed=config.model_seed,
            batch_size=config.batch_size,
        )
        model.write(out_path or config.runtime.baseline_path)
        print(f"LR {metrics.row()} sha256={model.digest}")
        return 0

    return _guarded(logger, "baseline", _action)


def run_eval(
    config: PipelineConfig,
    logger: logging.Logger,
    dataset_path: Path,
    model_path: Path,
    baseline_path: Path | None = None,
    partition: str = "test",
    out_path: Path | None = None,
) -> int:
    def _action() -> int:
        _require(dataset_path, model_path)
        dataset = Dataset.read(dataset_path)
        samples = dataset.partitions().get(partition)
        if samples is None:
            raise ConfigError(f"Unknown partition: {partition}")
        rows: list[tuple[str, Metrics]] = [("Model", evaluate(Model.read(model_path), samples))]
        if baseline_path is not None:
            _require(baseline_path)
            rows.append(("LR", evaluate(Model.read(baseline_path), samples)))

        print(rows[0][1].row())
        if len(rows) > 1:
            print(comparison_table(rows))
        report_path = out_path or config.runtime.reports_dir / "eval.json"
        _write_text(
            report_path,
            canonical_json({"partition": partition, "rows": {name: metrics.to_dict() for name, metrics in rows}}) + "\n",
        )
        logger.info("Evaluation on %s partition: %s", partition, rows[0][1].row())
        return 0

    return _guarded(logger, "eval", _action)


def run_simulate(
    config: PipelineConfig,
    logger: logging.Logger,
    cfg_path: Path,
    truth_path: Path | None = None,
    out_path: Path | None = None,
    walk_path: Path | None = None,
    steps: int | None = None,
) -> int:
    def _action() -> int:
        cfg = _read_cfg(cfg_path)
        successors = None
        if truth_path is not None:
            _require(truth_path)
            successors = indirect_successors_from_offsets(cfg, read_truth(truth_path))
        simulation = simulate_execution(
            cfg,
            cfg.base,
            steps or config.sim_steps,
            config.sim_seed,
            indirect_successors=successors,
        )
        trace_path = out_path or config.runtime.trace_path
        write_trace(trace_path, simulation.header, simulation.events)
        write_walk_log(walk_path or trace_path.with_suffix(".walk"), simulation.walk)
        print(
            f"events={len(simulation.events)} steps={len(simulation.walk)} "
            f"ended_early={'yes' if simulation.ended_early else 'no'}"
        )
        return 0

    return _guarded(logger, "simulate", _action)


def run_attack_gen(
    config: PipelineConfig,
    logger: logging.Logger,
    cfg_path: Path,
    trace_path: Path,
    out_dir: Path | None = None,
    count: int | None = None,
) -> int:
    def _action() -> int:
        _require(trace_path)
        cfg = _read_cfg(cfg_path)
        header, events = read_trace(trace_path)
        payloads = generate_payloads(
            cfg,
            tip_sources(cfg, header, events),
            config.payload_count if count is None else count,
            config.attack_seed,
            config.payload_min_len,
            config.payload_max_len,
        )
        target_dir = out_dir or config.runtime.attacks_dir
        records = []
        for number, payload in enumerate(payloads):
            attack_path = target_dir / f"attack_{number:03d}{TRACE_SUFFIX}"
            write_trace(attack_path, header, inject_attack(events, payload, cfg, header.base, entry=header.entry))
            records.append(PayloadRecord(payload, attack_path.name, trace_path.name))
        write_manifest(target_dir / "manifest.jsonl", records)
        logger.info("Wrote %s attack traces to %s.", len(records), target_dir)
        print(f"payloads={len(records)} families={len({record.payload.family for record in records})}")
        return 0

    return _guarded(logger, "attack gen", _action)


def detect_trace(
    trace_path: Path,
    cfg: Cfg,
    table: OffsetTable,
    model: Model | None,
    fail_fast: bool = False,
    structural_alerts: bool = True,
) -> AlertReport:
    header, events = read_trace(trace_path)
    classifier = EdgeOracleClassifier(cfg) if model is None else model
    detector = make_detector(classifier, table, cfg, header, structural_alerts)
    provenance = {
        "trace": trace_path.name,
        "cfg": cfg.digest,
        "table": table.node_hash,
        "model": "oracle" if model is None else model.digest,
    }
    return run_detection(detector, events, fail_fast=fail_fast, provenance=provenance)


def run_detect(
    config: PipelineConfig,
    logger: logging.Logger,
    trace_paths: Sequence[Path],
    cfg_path: Path,
    table_path: Path,
    model_path: Path | None = None,
    oracle: bool = False,
    out_dir: Path | None = None,
    jobs: int = 1,
) -> int:
    def _action() -> int:
        if model_path is None and not oracle:
            raise ConfigError("detect needs --model or --oracle")
        if jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        _require(table_path, *trace_paths)
        cfg = _read_cfg(cfg_path)
        table = OffsetTable.read(table_path)
        model = None
        if not oracle:
            _require(model_path)
            model = Model.read(model_path)

        def _detect(path: Path) -> AlertReport:
            return detect_trace(path, cfg, table, model, config.fail_fast, config.structural_alerts)

        with ThreadPoolExecutor(max_workers=jobs) as executor:
            reports = list(executor.map(_detect, trace_paths))

        target_dir = out_dir or config.runtime.reports_dir
        summary = []
        for path, report in zip(trace_paths, reports):
            report.write(target_dir / f"{path.stem}.report.json")
            summary.append(
                {
                    "trace": path.name,
                    "detected": report.detected,
                    "first_alert_index": report.first_alert_index,
                    "alerts": report.counters["alerts"],
                    "sha256": report.digest,
                }
            )
            print(
                f"{path.name}: {'ALERT' if report.detected else 'clean'} "
                f"alerts={report.counters['alerts']} first={report.first_alert_index}"
            )
        _write_text(target_dir / "detect_summary.jsonl", "".join(canonical_json(row) + "\n" for row in summary))

        flagged = sum(1 for report in reports if report.detected)
        logger.info("Detection finished: traces=%s flagged=%s", len(reports), flagged)
        return ALERT_EXIT_CODE if flagged else 0

    return _guarded(logger, "detect", _action)


def run_report(
    config: PipelineConfig,
    logger: logging.Logger,
    report_paths: Sequence[Path],
    manifest_path: Path | None = None,
) -> int:
    def _action() -> int:
        _require(*report_paths)
        reports = [(path, AlertReport.read(path)) for path in report_paths]
        for path, report in reports:
            print(report.render_text(title=path.name), end="")
        detected = sum(1 for _, report in reports if report.detected)
        print(f"payload-level detection: {detected}/{len(reports)}")

        if manifest_path is not None:
            _require(manifest_path)
            by_trace = {report.provenance.get("trace"): report for _, report in reports}
            missed = [
                record
                for record in read_manifest(manifest_path)
                if record.trace in by_trace and not by_trace[record.trace].detected
            ]
            for record in missed:
                print(f"missed: {record.trace} family={record.payload.family} variant={record.payload.variant}")
        return 0

    return _guarded(logger, "report", _action)
