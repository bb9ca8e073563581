"""Deployed detector state: registered class codes, enrolment and the two incremental protocols."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .codec import Detection
from .metrics import MetricsReport, Snapshot, check_no_forgetting, forgetting_series
from .model import DTYPE, ClassCode, CodeGenerator, FeatureExtractor, SharedCodes, SupportSet, detect, generate_code

log = logging.getLogger(__name__)

PROVENANCES = ("base", "enrolled")
FORMAT_VERSION = 1


class RegistryError(ValueError):
    pass


@dataclass(frozen=True)
class RegistryEntry:
    class_id: int
    name: str
    provenance: str
    code: ClassCode
    timestamp: float = 0.0

    def canonical(self) -> dict:
        v = self.code.vectors
        return {"class_id": self.class_id, "name": self.name, "provenance": self.provenance,
                "codes": {"centre": [float(x) for x in v[0]], "width": [float(x) for x in v[1]],
                          "height": [float(x) for x in v[2]]}}


def _code_from_json(codes: dict) -> ClassCode:
    return ClassCode(np.array([codes["centre"], codes["width"], codes["height"]], dtype=DTYPE))


class Registry:
    """Class id -> code map plus the shared offset codes.

    Entries are kept sorted by class id, so the registry content does not
    depend on the order classes arrived in. Base entries can never be
    replaced. Writers take an exclusive lock; readers copy a consistent
    snapshot under the same lock. With ``path`` set, every mutation is
    written to disk (atomically) before it becomes visible in memory.
    """

    def __init__(self, shared: SharedCodes, entries: Sequence[RegistryEntry] = (), path=None):
        self._shared = SharedCodes(np.array(shared.vectors, copy=True))
        self._shared.vectors.setflags(write=False)
        self._entries: dict[int, RegistryEntry] = {}
        self._lock = threading.RLock()
        self.path = Path(path) if path is not None else None
        for e in entries:
            self._insert(e, replace=False)

    @classmethod
    def from_base(cls, base_codes: Mapping[int, ClassCode], shared: SharedCodes,
                  names: Optional[Mapping[int, str]] = None, path=None) -> "Registry":
        names = names or {}
        now = time.time()
        entries = [RegistryEntry(int(c), names.get(c, f"class-{c}"), "base", _frozen(code), now)
                   for c, code in sorted(base_codes.items())]
        reg = cls(shared, entries, path)
        if reg.path is not None:
            reg.save(reg.path)
        return reg

    # ---- reads

    def __contains__(self, class_id: int) -> bool:
        return class_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def shared(self) -> SharedCodes:
        return self._shared

    @property
    def class_ids(self) -> list[int]:
        with self._lock:
            return list(self._entries)

    def entry(self, class_id: int) -> RegistryEntry:
        with self._lock:
            return self._entries[class_id]

    def entries(self) -> list[RegistryEntry]:
        with self._lock:
            return list(self._entries.values())

    def codes(self) -> dict[int, ClassCode]:
        """Consistent copy of the id -> code map (codes themselves are read-only)."""
        with self._lock:
            return {c: e.code for c, e in self._entries.items()}

    def group_map(self) -> dict[int, str]:
        with self._lock:
            return {c: ("base" if e.provenance == "base" else "novel") for c, e in self._entries.items()}

    def detect(self, extractor: FeatureExtractor, image: np.ndarray, score_threshold: float = 0.3,
               max_per_class: int = 20) -> list[Detection]:
        return detect(extractor, image, self.codes(), self._shared, score_threshold, max_per_class)

    # ---- writes

    def _insert(self, entry: RegistryEntry, replace: bool) -> None:
        if entry.provenance not in PROVENANCES:
            raise RegistryError(f"provenance must be one of {PROVENANCES}, got {entry.provenance!r}")
        if entry.code.channels != self._shared.vectors.shape[1]:
            raise RegistryError(f"code width {entry.code.channels} does not match shared codes "
                                f"({self._shared.vectors.shape[1]})")
        old = self._entries.get(entry.class_id)
        if old is not None:
            if old.provenance == "base":
                raise RegistryError(f"class {entry.class_id} is a base class and cannot be replaced")
            if not replace:
                raise RegistryError(f"class {entry.class_id} is already registered (use replace to re-enrol)")
        entries = dict(self._entries)
        entries[entry.class_id] = entry
        self._entries = dict(sorted(entries.items()))

    def add(self, entry: RegistryEntry, replace: bool = False) -> None:
        with self._lock:
            previous = self._entries
            self._insert(entry, replace)
            if self.path is not None:
                try:
                    self.save(self.path)
                except OSError:
                    self._entries = previous
                    raise

    def remove(self, class_id: int) -> None:
        with self._lock:
            e = self._entries.get(class_id)
            if e is None:
                raise KeyError(class_id)
            if e.provenance == "base":
                raise RegistryError(f"class {class_id} is a base class and cannot be removed")
            previous = dict(self._entries)
            del self._entries[class_id]
            if self.path is not None:
                try:
                    self.save(self.path)
                except OSError:
                    self._entries = previous
                    raise

    # ---- serialisation

    def canonical_bytes(self) -> bytes:
        """Content bytes: entries by class id, codes and shared codes; no timestamps."""
        with self._lock:
            doc = {"version": FORMAT_VERSION,
                   "shared": {"offset_x": [float(x) for x in self._shared.vectors[0]],
                              "offset_y": [float(x) for x in self._shared.vectors[1]]},
                   "entries": [e.canonical() for e in self._entries.values()]}
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()

    def checksum(self) -> str:
        return hashlib.sha256(self.canonical_bytes()).hexdigest()

    def entry_checksums(self) -> dict[int, str]:
        with self._lock:
            return {c: e.code.checksum() for c, e in self._entries.items()}

    def to_json(self) -> str:
        doc = json.loads(self.canonical_bytes())
        with self._lock:
            doc["timestamps"] = {str(c): e.timestamp for c, e in self._entries.items()}
        return json.dumps(doc, indent=1, sort_keys=True)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w") as fh:
            fh.write(self.to_json())
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path, attach: bool = True) -> "Registry":
        doc = json.loads(Path(path).read_text())
        if doc.get("version") != FORMAT_VERSION:
            raise RegistryError(f"unsupported registry version {doc.get('version')!r}")
        stamps = doc.get("timestamps", {})
        shared = SharedCodes(np.array([doc["shared"]["offset_x"], doc["shared"]["offset_y"]], dtype=DTYPE))
        entries = [RegistryEntry(int(e["class_id"]), e["name"], e["provenance"], _frozen(_code_from_json(e["codes"])),
                                 float(stamps.get(str(e["class_id"]), 0.0)))
                   for e in doc["entries"]]
        return cls(shared, entries, path if attach else None)


def _frozen(code: ClassCode) -> ClassCode:
    c = ClassCode(np.array(code.vectors, copy=True))
    c.vectors.setflags(write=False)
    return c


def enrol(registry: Registry, class_id: int, support: SupportSet, generator: CodeGenerator,
          name: Optional[str] = None, replace: bool = False) -> Registry:
    """Add ``class_id`` with a code generated from ``support`` in one forward pass.

    No optimiser runs and no weight is touched; only a new entry appears.
    Raises :class:`RegistryError` if the class is present and ``replace``
    is false (base classes can never be replaced).
    """
    if support.class_id != class_id:
        raise RegistryError(f"support is for class {support.class_id}, not {class_id}")
    if class_id in registry and not replace:
        raise RegistryError(f"class {class_id} is already registered (use replace to re-enrol)")
    code = generate_code(generator, support)
    registry.add(RegistryEntry(int(class_id), name or f"class-{class_id}", "enrolled", _frozen(code), time.time()),
                 replace=replace)
    log.info("enrolled class %d from %d boxes", class_id, support.num_boxes)
    return registry


# ---------------------------------------------------------------- protocols

MODES = ("incremental_batch", "continual")


@dataclass
class ProtocolReport:
    mode: str
    snapshots: list[Snapshot]
    registry_checksum: str
    enrolment_order: list[int] = field(default_factory=list)

    @property
    def final(self) -> MetricsReport:
        return self.snapshots[-1].report

    def series(self) -> list[dict]:
        return forgetting_series(self.snapshots)

    def check_no_forgetting(self) -> None:
        check_no_forgetting(self.snapshots)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "registry_checksum": self.registry_checksum,
                "enrolment_order": self.enrolment_order,
                "snapshots": [{"num_enrolled": s.num_enrolled, "enrolled": s.enrolled, "metrics": s.report.to_dict()}
                              for s in self.snapshots],
                "series": self.series()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write_csv(self, path) -> None:
        rows = self.series()
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)


def run_protocol(mode: str, registry: Registry, novel_supports: Mapping[int, SupportSet],
                 generator: CodeGenerator, eval_set, names: Optional[Mapping[int, str]] = None) -> ProtocolReport:
    """Enrol ``novel_supports`` (in mapping order) into ``registry`` and evaluate.

    ``eval_set`` is a :class:`oncedet.pipeline.EvalSet`. Each snapshot scores
    exactly the classes registered at that moment. ``incremental_batch``
    enrols everything and evaluates once; ``continual`` evaluates before
    the first enrolment and after each one (N + 1 snapshots).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    names = names or {}
    order = list(novel_supports)

    def snapshot(enrolled: list[int]) -> Snapshot:
        return Snapshot(len(enrolled), eval_set.evaluate(registry.codes(), registry.shared, registry.group_map()),
                        list(enrolled))

    snapshots = []
    done: list[int] = []
    if mode == "continual":
        snapshots.append(snapshot(done))
    for c in order:
        enrol(registry, c, novel_supports[c], generator, names.get(c))
        done.append(c)
        if mode == "continual":
            snapshots.append(snapshot(done))
    if mode == "incremental_batch":
        snapshots.append(snapshot(done))
    return ProtocolReport(mode, snapshots, registry.checksum(), order)
