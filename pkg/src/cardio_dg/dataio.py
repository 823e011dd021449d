"""On-disk formats: ECG1 signal files, JSON manifests, HBAI checkpoints.

ECG1 layout (little endian)::

    b"ECG1" | u32 format_version=1 | u32 n_leads | u32 n_samples | u32 fs
    | f32[n_leads * n_samples] lead-major

HBAI checkpoint layout (little endian)::

    b"HBAI" | u32 version | u32 config_len | config JSON (utf-8)
    | u32 n_values | f32[n_values]

The value block is the model state in traversal order (see
``cardio_dg.model.HeartBeatNet.state_layout``).
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

N_LEADS = 12
LEAD_NAMES = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")

SIGNAL_MAGIC = b"ECG1"
SIGNAL_VERSION = 1
CHECKPOINT_MAGIC = b"HBAI"
CHECKPOINT_VERSION = 1
MANIFEST_VERSION = 1

_SIGNAL_HEADER = struct.Struct("<4sIIII")


class DataFormatError(ValueError):
    """A file on disk does not match its declared format."""


class ArrhythmiaClass(enum.IntEnum):
    # ordinal values are part of every file format; never reorder
    N = 0
    AF = 1
    PAC = 2
    PVC = 3
    LBBB = 4
    RBBB = 5
    IAVB = 6

    @classmethod
    def parse(cls, name: str) -> "ArrhythmiaClass":
        key = name.strip().upper().replace("-", "")
        try:
            return cls[key]
        except KeyError:
            raise DataFormatError(f"unknown label {name!r}") from None


N_CLASSES = len(ArrhythmiaClass)
CLASS_NAMES = tuple(c.name for c in ArrhythmiaClass)


@dataclass
class EcgRecord:
    id: str
    domain: str
    fs: float
    leads: np.ndarray  # [n_leads, n_samples], mV
    label: ArrhythmiaClass

    def __post_init__(self):
        self.leads = np.asarray(self.leads)
        self.label = ArrhythmiaClass(self.label)
        if self.leads.ndim != 2:
            raise DataFormatError(f"{self.id}: leads must be 2-D, got {self.leads.shape}")
        if self.leads.shape[0] != N_LEADS:
            raise DataFormatError(f"{self.id}: lead count mismatch ({self.leads.shape[0]} != {N_LEADS})")
        if not self.fs > 0:
            raise DataFormatError(f"{self.id}: sampling rate must be positive")
        if not np.all(np.isfinite(self.leads)):
            raise DataFormatError(f"{self.id}: non-finite sample values")

    @property
    def n_samples(self) -> int:
        return self.leads.shape[1]


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str
    domain: str
    label: ArrhythmiaClass
    fs: float
    n_leads: int
    n_samples: int

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "path": self.path,
            "domain": self.domain,
            "label": self.label.name,
            "fs": self.fs,
            "n_leads": self.n_leads,
            "n_samples": self.n_samples,
        }


@dataclass
class DatasetManifest:
    records: list[ManifestEntry] = field(default_factory=list)
    format_version: int = MANIFEST_VERSION
    root: Path = Path(".")

    @property
    def domains(self) -> list[str]:
        return sorted({r.domain for r in self.records})

    def by_id(self) -> dict[str, ManifestEntry]:
        return {r.id: r for r in self.records}

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def load_record(self, entry: ManifestEntry) -> EcgRecord:
        leads = read_signal(self.resolve(entry), (entry.n_leads, entry.n_samples))
        return EcgRecord(entry.id, entry.domain, entry.fs, leads, entry.label)

    def load_records(self, ids=None) -> list[EcgRecord]:
        table = self.by_id()
        entries = self.records if ids is None else [table[i] for i in ids]
        return [self.load_record(e) for e in entries]

    def to_json(self) -> dict:
        return {
            "format_version": self.format_version,
            "records": [r.to_json() for r in self.records],
        }


# ---------------------------------------------------------------- signals


def write_signal(path, leads: np.ndarray, fs: float) -> None:
    leads = np.ascontiguousarray(leads, dtype="<f4")
    if leads.ndim != 2:
        raise ValueError("leads must be [n_leads, n_samples]")
    n_leads, n_samples = leads.shape
    header = _SIGNAL_HEADER.pack(SIGNAL_MAGIC, SIGNAL_VERSION, n_leads, n_samples, int(round(fs)))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(leads.tobytes())


def read_signal_header(path) -> tuple[int, int, int]:
    with open(path, "rb") as fh:
        head = fh.read(_SIGNAL_HEADER.size)
    if len(head) < _SIGNAL_HEADER.size:
        raise DataFormatError(f"{path}: truncated header")
    magic, version, n_leads, n_samples, fs = _SIGNAL_HEADER.unpack(head)
    if magic != SIGNAL_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != SIGNAL_VERSION:
        raise DataFormatError(f"{path}: unsupported ECG1 version {version}")
    return n_leads, n_samples, fs


def _read_csv_signal(path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([float(cell) for cell in line.split(",")])
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-numeric CSV cell") from None
    if rows and len({len(r) for r in rows}) != 1:
        raise DataFormatError(f"{path}: ragged CSV rows")
    # CSV columns are leads, rows are samples
    return np.asarray(rows, dtype=np.float32).reshape(len(rows), -1).T.copy()


def read_signal(path, expected_shape=None) -> np.ndarray:
    """Read an ECG1 (or CSV fallback) signal as a float32 [n_leads, n_samples] matrix."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        leads = _read_csv_signal(path)
    else:
        n_leads, n_samples, _ = read_signal_header(path)
        payload = path.read_bytes()[_SIGNAL_HEADER.size :]
        expected = 4 * n_leads * n_samples
        if len(payload) != expected:
            raise DataFormatError(
                f"{path}: truncated payload ({len(payload)} bytes, expected {expected})"
            )
        leads = np.frombuffer(payload, dtype="<f4").reshape(n_leads, n_samples).copy()
    if expected_shape is not None:
        exp_leads, exp_samples = expected_shape
        if leads.shape[0] != exp_leads:
            raise DataFormatError(
                f"{path}: lead count mismatch ({leads.shape[0]} != {exp_leads})"
            )
        if leads.shape[1] != exp_samples:
            raise DataFormatError(
                f"{path}: sample count mismatch ({leads.shape[1]} != {exp_samples})"
            )
    return leads


# --------------------------------------------------------------- manifests


def _entry_from_json(obj: dict) -> ManifestEntry:
    rid = obj.get("id", "<missing id>")
    try:
        return ManifestEntry(
            id=str(obj["id"]),
            path=str(obj["path"]),
            domain=str(obj["domain"]),
            label=ArrhythmiaClass.parse(str(obj["label"])),
            fs=float(obj["fs"]),
            n_leads=int(obj["n_leads"]),
            n_samples=int(obj["n_samples"]),
        )
    except KeyError as exc:
        raise DataFormatError(f"record {rid}: missing field {exc.args[0]!r}") from None
    except DataFormatError as exc:
        raise DataFormatError(f"record {rid}: {exc}") from None


def load_manifest(path, validate: bool = True) -> DatasetManifest:
    """Parse a manifest; with ``validate`` every signal header is checked eagerly."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON ({exc})") from None
    version = int(doc.get("format_version", -1))
    if version != MANIFEST_VERSION:
        raise DataFormatError(f"{path}: unsupported manifest version {version}")
    entries = [_entry_from_json(obj) for obj in doc.get("records", [])]
    seen: set[str] = set()
    for e in entries:
        if e.id in seen:
            raise DataFormatError(f"record {e.id}: duplicate id")
        seen.add(e.id)
        if e.n_leads != N_LEADS:
            raise DataFormatError(f"record {e.id}: lead count mismatch ({e.n_leads} != {N_LEADS})")
    manifest = DatasetManifest(entries, version, path.parent)
    if validate:
        validate_manifest(manifest)
    return manifest


def validate_manifest(manifest: DatasetManifest) -> None:
    for e in manifest.records:
        target = manifest.resolve(e)
        if not target.is_file():
            raise DataFormatError(f"record {e.id}: missing file {target}")
        if target.suffix.lower() == ".csv":
            shape = read_signal(target).shape
        else:
            n_leads, n_samples, _ = read_signal_header(target)
            shape = (n_leads, n_samples)
        if shape[0] != e.n_leads:
            raise DataFormatError(f"record {e.id}: lead count mismatch ({shape[0]} != {e.n_leads})")
        if shape[1] != e.n_samples:
            raise DataFormatError(
                f"record {e.id}: sample count mismatch ({shape[1]} != {e.n_samples})"
            )


def save_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=1) + "\n", encoding="utf-8")


# ------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    """Model config + flat float32 state + training metadata."""

    config: dict
    params: np.ndarray
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.params = np.ascontiguousarray(self.params, dtype=np.float32).ravel()

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.config == other.config
            and self.metadata == other.metadata
            and self.params.tobytes() == other.params.tobytes()
        )


def save_checkpoint(cp: Checkpoint, path, expected_count: int | None = None) -> None:
    if expected_count is not None and cp.params.size != expected_count:
        raise DataFormatError(
            f"parameter count mismatch ({cp.params.size} != {expected_count})"
        )
    blob = json.dumps({"config": cp.config, "metadata": cp.metadata}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", cp.params.size))
        fh.write(cp.params.astype("<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: corrupt header")
    version, blob_len = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"{path}: checkpoint version mismatch ({version})")
    pos = 12
    if len(raw) < pos + blob_len + 4:
        raise DataFormatError(f"{path}: corrupt header")
    try:
        doc = json.loads(raw[pos : pos + blob_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise DataFormatError(f"{path}: corrupt header") from None
    pos += blob_len
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    payload = raw[pos:]
    if len(payload) != 4 * count:
        raise DataFormatError(f"{path}: truncated parameters ({len(payload)} bytes for {count} values)")
    params = np.frombuffer(payload, dtype="<f4").copy()
    return Checkpoint(doc["config"], params, doc.get("metadata", {}))
