"""Fixed-length nibble encoding of gadgets and chains, plus the detection-time offset table.

Each gadget byte is split into its high and low nibble, in instruction order,
and padded at the tail with ``nop`` (0x90) bytes up to ``g_max`` bytes. Gadgets
longer than ``g_max`` keep their last ``g_max`` bytes so the branch terminator
always survives. A chain concatenates three gadget blocks; two-gadget chains
get an all-``nop`` third block.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json
import logging
import math
from pathlib import Path
import struct
from typing import Any, Iterator, Sequence

import numpy as np

from .cfg import Cfg
from .chains import ChainSet
from .errors import ConfigError, DataError, UnknownGadgetId
from .fingerprint import canonical_json, sha256_hex
from .models import ChainLabel, Gadget, GadgetChain

logger = logging.getLogger(__name__)

NOP = 0x90
CHAIN_BLOCKS = 3
DEFAULT_G_MAX = 16
NIBBLE_SCALE = 15.0

TABLE_MAGIC = b"DCOT"
DATASET_MAGIC = b"DCDS"
FORMAT_VERSION = 1

_TABLE_HEADER = struct.Struct("<4sBHI32s")
_TABLE_RECORD = struct.Struct("<QI")
_DATASET_HEADER = struct.Struct("<4sBI")


class EncodingFormatError(DataError):
    pass


class EmptyChainSet(DataError):
    pass


def chain_length(g_max: int) -> int:
    return CHAIN_BLOCKS * 2 * g_max


def encode_bytes(raw: bytes, g_max: int) -> np.ndarray:
    if g_max < 1:
        raise ConfigError("g_max must be at least 1")
    kept = raw[-g_max:] if len(raw) > g_max else raw
    padded = np.frombuffer(kept + bytes([NOP]) * (g_max - len(kept)), dtype=np.uint8)
    nibbles = np.empty(2 * g_max, dtype=np.uint8)
    nibbles[0::2] = padded >> 4
    nibbles[1::2] = padded & 0x0F
    return nibbles


def encode_gadget(gadget: Gadget, g_max: int) -> np.ndarray:
    return encode_bytes(gadget.raw, g_max)


def pack_nibbles(nibbles: np.ndarray) -> bytes:
    values = np.asarray(nibbles, dtype=np.uint8)
    return ((values[0::2] << 4) | values[1::2]).astype(np.uint8).tobytes()


def unpack_nibbles(packed: bytes) -> np.ndarray:
    values = np.frombuffer(packed, dtype=np.uint8)
    nibbles = np.empty(values.size * 2, dtype=np.uint8)
    nibbles[0::2] = values >> 4
    nibbles[1::2] = values & 0x0F
    return nibbles


@dataclass(frozen=True)
class TableEntry:
    offset: int
    gadget_id: int
    nibbles: np.ndarray = field(compare=False, repr=False)


class OffsetTable:
    """Map from base-relative gadget offset to (gadget id, precomputed encoding)."""

    def __init__(self, entries: Sequence[TableEntry], g_max: int, node_hash: str):
        self.g_max = g_max
        self.node_hash = node_hash
        self._by_offset: dict[int, TableEntry] = {}
        self._by_id: dict[int, TableEntry] = {}
        for entry in entries:
            if entry.offset in self._by_offset:
                raise EncodingFormatError(f"Offset {entry.offset:#x} appears twice in the table")
            entry.nibbles.setflags(write=False)
            self._by_offset[entry.offset] = entry
            self._by_id[entry.gadget_id] = entry

        ids = sorted(self._by_id)
        # Row ``len(ids)`` is the all-nop block used to pad two-gadget chains.
        self._matrix = np.vstack(
            [*(self._by_id[gadget_id].nibbles for gadget_id in ids), encode_bytes(b"", g_max)]
        ) if ids else encode_bytes(b"", g_max)[None, :]
        self._row_of = {gadget_id: row for row, gadget_id in enumerate(ids)}
        self._matrix.setflags(write=False)

    def __len__(self) -> int:
        return len(self._by_offset)

    def lookup(self, offset: int) -> TableEntry | None:
        return self._by_offset.get(offset)

    def by_id(self, gadget_id: int) -> TableEntry:
        entry = self._by_id.get(gadget_id)
        if entry is None:
            raise UnknownGadgetId(gadget_id)
        return entry

    def entries(self) -> list[TableEntry]:
        return [self._by_offset[offset] for offset in sorted(self._by_offset)]

    def chain_nibbles(self, chains: Sequence[Sequence[int]]) -> np.ndarray:
        """Nibble rows for many chains at once, shape ``(n, 6 * g_max)``."""
        pad_row = len(self._row_of)
        rows = np.full((len(chains), CHAIN_BLOCKS), pad_row, dtype=np.int64)
        for index, chain in enumerate(chains):
            if not 2 <= len(chain) <= CHAIN_BLOCKS:
                raise DataError(f"Chain {tuple(chain)} must hold two or three gadgets")
            for position, gadget_id in enumerate(chain):
                row = self._row_of.get(int(gadget_id))
                if row is None:
                    raise UnknownGadgetId(gadget_id)
                rows[index, position] = row
        return self._matrix[rows].reshape(len(chains), chain_length(self.g_max))

    def dumps(self) -> bytes:
        chunks = [
            _TABLE_HEADER.pack(TABLE_MAGIC, FORMAT_VERSION, self.g_max, len(self), bytes.fromhex(self.node_hash))
        ]
        for entry in self.entries():
            chunks.append(_TABLE_RECORD.pack(entry.offset, entry.gadget_id))
            chunks.append(pack_nibbles(entry.nibbles))
        return b"".join(chunks)

    @classmethod
    def loads(cls, data: bytes) -> OffsetTable:
        if len(data) < _TABLE_HEADER.size:
            raise EncodingFormatError("Offset table is shorter than its header")
        magic, version, g_max, count, node_hash = _TABLE_HEADER.unpack_from(data, 0)
        if magic != TABLE_MAGIC or version != FORMAT_VERSION:
            raise EncodingFormatError("Not an offset table file")
        record_size = _TABLE_RECORD.size + g_max
        if len(data) != _TABLE_HEADER.size + count * record_size:
            raise EncodingFormatError("Offset table length does not match its record count")
        entries = []
        position = _TABLE_HEADER.size
        for _ in range(count):
            offset, gadget_id = _TABLE_RECORD.unpack_from(data, position)
            start = position + _TABLE_RECORD.size
            entries.append(TableEntry(offset, gadget_id, unpack_nibbles(data[start : start + g_max])))
            position += record_size
        return cls(entries, g_max, node_hash.hex())

    def write(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.dumps())

    @classmethod
    def read(cls, path: Path) -> OffsetTable:
        return cls.loads(path.read_bytes())


def build_offset_table(cfg: Cfg, g_max: int = DEFAULT_G_MAX) -> OffsetTable:
    entries = [TableEntry(gadget.start, gadget.id, encode_gadget(gadget, g_max)) for gadget in cfg.nodes]
    return OffsetTable(entries, g_max, cfg.node_hash)


def normalize_nibbles(nibbles: np.ndarray) -> np.ndarray:
    return np.asarray(nibbles, dtype=np.float32) / np.float32(NIBBLE_SCALE)


def encode_chain(chain: GadgetChain | Sequence[int], g_max: int, table: OffsetTable) -> np.ndarray:
    if table.g_max != g_max:
        raise ConfigError(f"Offset table uses g_max={table.g_max}, requested {g_max}")
    gadgets = chain.gadgets if isinstance(chain, GadgetChain) else tuple(chain)
    return normalize_nibbles(table.chain_nibbles([gadgets])[0])


@dataclass(frozen=True)
class EncodedSample:
    features: np.ndarray
    label: int
    chain: tuple[int, ...] | None = None


@dataclass(frozen=True)
class Partition:
    features: np.ndarray
    labels: np.ndarray
    chains: tuple[tuple[int, ...], ...] = ()

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def label_counts(self) -> tuple[int, int]:
        malicious = int(np.count_nonzero(self.labels == 1))
        return len(self) - malicious, malicious

    def samples(self) -> Iterator[EncodedSample]:
        for index in range(len(self)):
            chain = self.chains[index] if self.chains else None
            yield EncodedSample(self.features[index], int(self.labels[index]), chain)


PARTITION_NAMES = ("train", "validation", "test")


@dataclass(frozen=True)
class Dataset:
    train: Partition
    validation: Partition
    test: Partition
    ratios: tuple[float, float, float]
    seed: int
    g_max: int
    provenance: dict[str, Any] = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return chain_length(self.g_max)

    def partitions(self) -> dict[str, Partition]:
        return {"train": self.train, "validation": self.validation, "test": self.test}

    def header(self) -> dict[str, Any]:
        return {
            "L": self.input_dim,
            "G_max": self.g_max,
            "seed": self.seed,
            "ratios": list(self.ratios),
            "counts": {name: list(part.label_counts()) for name, part in self.partitions().items()},
            "provenance": self.provenance,
        }

    def dumps(self) -> bytes:
        header = canonical_json(self.header()).encode("utf-8")
        chunks = [_DATASET_HEADER.pack(DATASET_MAGIC, FORMAT_VERSION, len(header)), header]
        for partition in self.partitions().values():
            nibbles = np.rint(partition.features * NIBBLE_SCALE).astype(np.uint8)
            for index in range(len(partition)):
                chunks.append(bytes((int(partition.labels[index]),)))
                chunks.append(pack_nibbles(nibbles[index]))
        return b"".join(chunks)

    @property
    def digest(self) -> str:
        return sha256_hex(self.dumps())

    @classmethod
    def loads(cls, data: bytes) -> Dataset:
        if len(data) < _DATASET_HEADER.size:
            raise EncodingFormatError("Dataset file is shorter than its header")
        magic, version, header_size = _DATASET_HEADER.unpack_from(data, 0)
        if magic != DATASET_MAGIC or version != FORMAT_VERSION:
            raise EncodingFormatError("Not a dataset file")
        position = _DATASET_HEADER.size
        try:
            header = json.loads(data[position : position + header_size].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise EncodingFormatError(f"Corrupt dataset header: {exc}") from exc
        position += header_size

        length = int(header["L"])
        row_size = 1 + length // 2
        partitions = {}
        for name in PARTITION_NAMES:
            count = sum(header["counts"][name])
            block = data[position : position + count * row_size]
            if len(block) != count * row_size:
                raise EncodingFormatError(f"Dataset truncated inside the {name} partition")
            rows = np.frombuffer(block, dtype=np.uint8).reshape(count, row_size)
            labels = rows[:, 0].astype(np.int64)
            packed = rows[:, 1:]
            nibbles = np.empty((count, length), dtype=np.uint8)
            nibbles[:, 0::2] = packed >> 4
            nibbles[:, 1::2] = packed & 0x0F
            partitions[name] = Partition(normalize_nibbles(nibbles), labels)
            position += count * row_size
        if position != len(data):
            raise EncodingFormatError("Trailing bytes after the dataset rows")

        return cls(
            train=partitions["train"],
            validation=partitions["validation"],
            test=partitions["test"],
            ratios=tuple(header["ratios"]),
            seed=int(header["seed"]),
            g_max=int(header["G_max"]),
            provenance=header.get("provenance", {}),
        )

    def write(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.dumps())

    @classmethod
    def read(cls, path: Path) -> Dataset:
        return cls.loads(path.read_bytes())


def validate_ratios(ratios: Sequence[float]) -> tuple[float, float, float]:
    if len(ratios) != 3:
        raise ConfigError("ratios must have three parts: train,validation,test")
    values = tuple(float(ratio) for ratio in ratios)
    if any(ratio < 0 for ratio in values):
        raise ConfigError("ratios must be non-negative")
    if abs(sum(values) - 1.0) > 1e-9:
        raise ConfigError("ratios must sum to 1")
    return values  # type: ignore[return-value]


def _split_counts(total: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    validation = math.floor(ratios[1] * total + 1e-9)
    test = math.floor(ratios[2] * total + 1e-9)
    return total - validation - test, validation, test


def build_dataset(
    chains: ChainSet,
    ratios: Sequence[float],
    seed: int,
    g_max: int,
    table: OffsetTable,
) -> Dataset:
    split = validate_ratios(ratios)
    if not chains.benign and not chains.malicious:
        raise EmptyChainSet("Chain set holds no chains")
    if table.g_max != g_max:
        raise ConfigError(f"Offset table uses g_max={table.g_max}, requested {g_max}")

    members: dict[str, list[tuple[tuple[int, ...], int]]] = {name: [] for name in PARTITION_NAMES}
    for label, group in ((ChainLabel.BENIGN, chains.benign), (ChainLabel.MALICIOUS, chains.malicious)):
        ordered = sorted(chain.gadgets for chain in group)
        rng = np.random.default_rng([seed, 0xD5, label.index])
        order = rng.permutation(len(ordered))
        train_count, validation_count, _ = _split_counts(len(ordered), split)
        bounds = {
            "train": order[:train_count],
            "validation": order[train_count : train_count + validation_count],
            "test": order[train_count + validation_count :],
        }
        for name, indexes in bounds.items():
            members[name].extend((ordered[int(index)], label.index) for index in indexes)

    partitions = {}
    for name in PARTITION_NAMES:
        chain_ids = [chain for chain, _ in members[name]]
        labels = np.array([label for _, label in members[name]], dtype=np.int64)
        features = (
            normalize_nibbles(table.chain_nibbles(chain_ids))
            if chain_ids
            else np.zeros((0, chain_length(g_max)), dtype=np.float32)
        )
        partitions[name] = Partition(features, labels, tuple(chain_ids))

    dataset = Dataset(
        train=partitions["train"],
        validation=partitions["validation"],
        test=partitions["test"],
        ratios=split,
        seed=seed,
        g_max=g_max,
        provenance={"cfg": chains.cfg_hash, "chain_seed": chains.seed},
    )
    logger.info(
        "Dataset built: train=%s validation=%s test=%s L=%s",
        dataset.train.label_counts(),
        dataset.validation.label_counts(),
        dataset.test.label_counts(),
        dataset.input_dim,
    )
    return dataset
