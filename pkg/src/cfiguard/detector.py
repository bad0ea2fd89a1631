"""Online detection over a decoded trace stream.

The detector keeps a replay cursor in step with the trace. Every TIP that
leaves an indirect-terminated gadget forms a two-gadget chain
``(source, destination)`` that is scored by a classifier; direct control flow
is checked structurally by the cursor itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
import json
import logging
from pathlib import Path
from typing import Any, Iterable, Protocol

from .cfg import Cfg
from .encoder import OffsetTable, chain_length, normalize_nibbles
from .errors import ComponentMismatch, DataError
from .fingerprint import canonical_json, sha256_hex
from .models import Fup, Tip, Tnt, TraceEvent, TraceHeader
from .neuralnet import DimensionMismatch, Model, forward
from .replay import MissingStaticSuccessor, TraceCursor, UnresolvableEntry

logger = logging.getLogger(__name__)

REPORT_FORMAT = "cfiguard-alert-report"
REPORT_VERSION = 1
COUNTER_NAMES = ("events", "tnt", "tip", "fup", "classified", "benign", "alerts", "structural", "resyncs")


class VerdictKind(str, Enum):
    BENIGN = "benign"
    ALERT = "alert"
    STRUCTURAL = "structural"


class ChainClassifier(Protocol):
    name: str

    def malicious_probability(self, source: int, destination: int) -> float: ...


class ModelClassifier:
    name = "model"

    def __init__(self, model: Model, table: OffsetTable):
        expected = chain_length(table.g_max)
        if model.config.input_dim != expected:
            raise DimensionMismatch(model.config.input_dim, expected)
        self.model = model
        self.table = table

    def malicious_probability(self, source: int, destination: int) -> float:
        features = normalize_nibbles(self.table.chain_nibbles([(source, destination)])[0])
        return float(forward(self.model, features, mode="eval")[1])


class EdgeOracleClassifier:
    """Edge-membership stand-in for the model: a pair is malicious iff it is not a CFG edge."""

    name = "oracle"

    def __init__(self, cfg: Cfg):
        self.edges = cfg.edge_pairs()

    def malicious_probability(self, source: int, destination: int) -> float:
        return 0.0 if (source, destination) in self.edges else 1.0


@dataclass(frozen=True)
class Verdict:
    kind: VerdictKind
    event_index: int
    chain: tuple[int, ...]
    probability: float | None = None
    alert: bool = False
    reason: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "event_index": self.event_index,
            "chain": list(self.chain),
            "probability": self.probability,
            "alert": self.alert,
            "reason": self.reason,
        }

    @classmethod
    def from_dict(cls, record: dict[str, Any]) -> Verdict:
        probability = record.get("probability")
        return cls(
            kind=VerdictKind(record["kind"]),
            event_index=int(record["event_index"]),
            chain=tuple(int(gadget) for gadget in record["chain"]),
            probability=None if probability is None else float(probability),
            alert=bool(record["alert"]),
            reason=str(record.get("reason", "")),
        )


class Detector:
    def __init__(
        self,
        classifier: ChainClassifier,
        table: OffsetTable,
        cfg: Cfg,
        header: TraceHeader,
        structural_alerts: bool = True,
    ):
        entry = table.lookup(header.entry - header.base)
        if entry is None:
            raise UnresolvableEntry(header.entry, header.base)
        self.classifier = classifier
        self.table = table
        self.cfg = cfg
        self.header = header
        self.structural_alerts = structural_alerts
        self.cursor = TraceCursor(cfg, entry.gadget_id)
        self.counters: dict[str, int] = {name: 0 for name in COUNTER_NAMES}
        self._next_index = 0

    @property
    def current(self) -> int:
        return self.cursor.current

    def _structural(self, index: int, chain: tuple[int, ...], reason: str) -> Verdict:
        self.counters["structural"] += 1
        if self.structural_alerts:
            self.counters["alerts"] += 1
        logger.debug("Structural verdict at event %s: %s", index, reason)
        return Verdict(VerdictKind.STRUCTURAL, index, chain, None, self.structural_alerts, reason)

    def advance_cursor(self, index: int) -> list[Verdict]:
        try:
            self.cursor.advance()
        except MissingStaticSuccessor as exc:
            self.cursor.mark_lost()
            return [self._structural(index, (exc.gadget_id,), str(exc))]
        return []

    def _on_tip(self, index: int, event: Tip) -> list[Verdict]:
        verdicts = self.advance_cursor(index)
        entry = self.table.lookup(event.target - self.header.base)
        if entry is None:
            chain = () if self.cursor.lost else (self.cursor.current,)
            self.cursor.mark_lost()
            verdicts.append(self._structural(index, chain, f"TIP target {event.target:#x} is not a gadget start"))
            return verdicts
        destination = entry.gadget_id

        if self.cursor.lost:
            self.counters["resyncs"] += 1
        elif not self.cursor.at_indirect:
            verdicts.append(
                self._structural(
                    index,
                    (self.cursor.current, destination),
                    f"cursor at gadget {self.cursor.current} is not at an indirect branch",
                )
            )
        else:
            source = self.cursor.current
            probability = self.classifier.malicious_probability(source, destination)
            malicious = probability > 0.5
            self.counters["classified"] += 1
            if malicious:
                self.counters["alerts"] += 1
                logger.debug("Alert at event %s: chain=(%s, %s) p=%.4f", index, source, destination, probability)
            else:
                self.counters["benign"] += 1
            verdicts.append(
                Verdict(
                    VerdictKind.ALERT if malicious else VerdictKind.BENIGN,
                    index,
                    (source, destination),
                    probability,
                    malicious,
                )
            )

        self.cursor.jump(destination)
        verdicts.extend(self.advance_cursor(index))
        return verdicts

    def process_event(self, event: TraceEvent) -> tuple[Verdict, ...]:
        index = self._next_index
        self._next_index += 1
        self.counters["events"] += 1
        if isinstance(event, Tnt):
            self.counters["tnt"] += 1
            self.cursor.feed(event.bits)
            return tuple(self.advance_cursor(index))
        if isinstance(event, Tip):
            self.counters["tip"] += 1
            return tuple(self._on_tip(index, event))
        if isinstance(event, Fup):
            self.counters["fup"] += 1
            return ()
        raise DataError(f"Not a trace event: {event!r}")


def make_detector(
    model: Model | ChainClassifier,
    table: OffsetTable,
    cfg: Cfg,
    header: TraceHeader,
    structural_alerts: bool = True,
) -> Detector:
    if table.node_hash != cfg.node_hash:
        raise ComponentMismatch("Offset table was built from a different gadget set than the CFG")
    classifier = ModelClassifier(model, table) if isinstance(model, Model) else model
    return Detector(classifier, table, cfg, header, structural_alerts)


@dataclass(frozen=True)
class AlertReport:
    verdicts: tuple[Verdict, ...]
    counters: dict[str, int]
    first_alert_index: int | None
    classifier: str = "model"
    halted: bool = False
    provenance: dict[str, Any] = field(default_factory=dict)

    @property
    def detected(self) -> bool:
        return self.first_alert_index is not None

    @property
    def alerts(self) -> list[Verdict]:
        return [verdict for verdict in self.verdicts if verdict.alert]

    def to_document(self) -> dict[str, Any]:
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "classifier": self.classifier,
            "detected": self.detected,
            "first_alert_index": self.first_alert_index,
            "halted": self.halted,
            "counters": dict(self.counters),
            "provenance": self.provenance,
            "verdicts": [verdict.to_dict() for verdict in self.verdicts],
        }

    def dumps(self) -> str:
        return canonical_json(self.to_document()) + "\n"

    @property
    def digest(self) -> str:
        return sha256_hex(self.dumps())

    @classmethod
    def from_document(cls, document: dict[str, Any]) -> AlertReport:
        if document.get("format") != REPORT_FORMAT:
            raise DataError("Not an alert report")
        try:
            return cls(
                verdicts=tuple(Verdict.from_dict(record) for record in document["verdicts"]),
                counters={name: int(value) for name, value in document["counters"].items()},
                first_alert_index=document["first_alert_index"],
                classifier=str(document.get("classifier", "model")),
                halted=bool(document.get("halted", False)),
                provenance=dict(document.get("provenance", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"Corrupt alert report: {exc}") from exc

    def write(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def read(cls, path: Path) -> AlertReport:
        try:
            document = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"Alert report is not JSON: {exc}") from exc
        return cls.from_document(document)

    def render_text(self, title: str = "") -> str:
        lines = []
        if title:
            lines.append(title)
        counters = " ".join(f"{name}={self.counters.get(name, 0)}" for name in COUNTER_NAMES)
        lines.append(f"classifier={self.classifier} detected={'yes' if self.detected else 'no'} {counters}")
        if self.first_alert_index is not None:
            lines.append(f"first alert at event {self.first_alert_index}")
        for verdict in self.alerts:
            probability = "-" if verdict.probability is None else f"{verdict.probability:.4f}"
            chain = ",".join(str(gadget) for gadget in verdict.chain)
            detail = f" {verdict.reason}" if verdict.reason else ""
            lines.append(f"  event {verdict.event_index}: {verdict.kind.value} chain=({chain}) p={probability}{detail}")
        if self.halted:
            lines.append("replay halted at first alert")
        return "\n".join(lines) + "\n"


def run_detection(
    detector: Detector,
    events: Iterable[TraceEvent],
    fail_fast: bool = False,
    provenance: dict[str, Any] | None = None,
) -> AlertReport:
    verdicts: list[Verdict] = []
    first_alert: int | None = None
    halted = False
    for event in events:
        for verdict in detector.process_event(event):
            verdicts.append(verdict)
            if verdict.alert and first_alert is None:
                first_alert = verdict.event_index
        if fail_fast and first_alert is not None:
            halted = True
            break
    return AlertReport(
        verdicts=tuple(verdicts),
        counters=dict(detector.counters),
        first_alert_index=first_alert,
        classifier=detector.classifier.name,
        halted=halted,
        provenance=dict(provenance or {}),
    )

