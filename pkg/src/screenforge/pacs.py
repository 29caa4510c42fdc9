"""Image router and internal store.

Files pulled from the external drop point (or pushed over HTTP) are parsed,
de-identified, re-serialized canonically, and stored content-addressed under
<data_root>/pacs/<study_uid>/<series_uid>/<sop_uid>.dcm where every path
component is a remapped UID. A sidecar index supports study queries and can
always be rebuilt from a disk scan. Once a study has seen no new instances
for a quiet period, a STUDY_READY event is appended to the imaging-events
topic; late arrivals simply produce a fresh event for the same key, which
downstream consumers treat as an update.
"""

from __future__ import annotations

import base64
import hashlib
import json
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from .deid import DeidPolicy, DeidRefused, Vault, deid_dicom
from .dicom import (
    NotDicom,
    Tag,
    Truncated,
    UnsupportedTransferSyntax,
    get_value,
    parse,
    serialize,
)
from .errors import ScreenforgeError
from .qlog import QueueLog, UnknownTopic
from .util import atomic_write, iso_utc, now_utc

IMAGING_TOPIC = "imaging-events"
STUDY_READY = "STUDY_READY"

REASON_NOT_DICOM = "NOT_DICOM"
REASON_UNSUPPORTED_TS = "UNSUPPORTED_TRANSFER_SYNTAX"
REASON_TRUNCATED = "TRUNCATED"
REASON_DEID_REFUSED = "DEID_REFUSED"
REASON_MISSING_UID = "MISSING_UID"
REASON_SOP_CONFLICT = "SOP_CONFLICT"

_STUDY_UID = Tag(0x0020, 0x000D)
_SERIES_UID = Tag(0x0020, 0x000E)
_SOP_UID = Tag(0x0008, 0x0018)
_PATIENT_ID = Tag(0x0010, 0x0020)
_MODALITY = Tag(0x0008, 0x0060)
_STUDY_DATE = Tag(0x0008, 0x0020)


class PacsError(ScreenforgeError):
    code = "PACS"


class InstanceNotFound(PacsError):
    code = "PACS_NOT_FOUND"


@dataclass(frozen=True)
class StudyIndexEntry:
    study_uid: str
    pseudonym: str
    modality: str
    study_date: str
    series: tuple[tuple[str, int], ...]
    stored_at: str

    @property
    def instance_count(self) -> int:
        return sum(count for _, count in self.series)

    def to_json(self) -> dict:
        return {
            "study_uid": self.study_uid,
            "pseudonym": self.pseudonym,
            "modality": self.modality,
            "study_date": self.study_date,
            "series": [{"series_uid": uid, "instance_count": count}
                       for uid, count in self.series],
            "instance_count": self.instance_count,
            "stored_at": self.stored_at,
        }


@dataclass
class RouteResult:
    status: str                 # stored | duplicate | quarantined
    study_uid: str = ""
    series_uid: str = ""
    sop_uid: str = ""
    reason: str = ""


@dataclass
class PacsReport:
    files: int = 0
    stored: int = 0
    duplicates: int = 0
    quarantined: int = 0
    reasons: list[str] | None = None

    def __post_init__(self):
        if self.reasons is None:
            self.reasons = []


def _dicom_date_to_iso(value: str | None) -> str:
    if value and len(value) >= 8 and value[:8].isdigit():
        return f"{value[:4]}-{value[4:6]}-{value[6:8]}"
    return ""


class PacsRouter:
    def __init__(self, data_root: Path, queue: QueueLog, vault: Vault,
                 policy: DeidPolicy, *, quiet_period_seconds: float = 5.0):
        self.storage = data_root / "pacs"
        self.inbox = data_root / "external-pacs"
        self.done = self.inbox / "done"
        self.quarantine_dir = data_root / "pacs-quarantine"
        for d in (self.storage, self.inbox, self.done, self.quarantine_dir):
            d.mkdir(parents=True, exist_ok=True)
        self.queue = queue
        self.vault = vault
        self.policy = policy
        self.quiet_period = quiet_period_seconds
        self._index_path = self.storage / "index.json"
        self._mutex = threading.Lock()
        self._study_locks: dict[str, threading.Lock] = {}
        # study_uid -> {"pseudonym", "modality", "study_date", "stored_at",
        #               "series": {series_uid: [sop_uid, ...]}}
        self._studies: dict[str, dict] = {}
        self._instances: dict[str, tuple[str, str]] = {}
        self._load_index()
        started = time.monotonic()
        self._last_activity = {uid: started for uid in self._studies}
        self._emitted = self._replay_emitted()

    # -- persistence

    def _load_index(self) -> None:
        if not self._index_path.exists():
            return
        doc = json.loads(self._index_path.read_text())
        self._studies = doc.get("studies", {})
        for study_uid, entry in self._studies.items():
            for series_uid, sops in entry["series"].items():
                for sop_uid in sops:
                    self._instances[sop_uid] = (study_uid, series_uid)

    def _save_index(self) -> None:
        atomic_write(self._index_path, json.dumps(
            {"studies": self._studies}, sort_keys=True, indent=1).encode())

    def _replay_emitted(self) -> dict[str, int]:
        emitted: dict[str, int] = {}
        offset = 0
        while True:
            try:
                batch = self.queue.read(IMAGING_TOPIC, offset, 1000)
            except UnknownTopic:
                return emitted
            if not batch:
                return emitted
            for record in batch:
                event = json.loads(record.payload)
                if event.get("kind") == STUDY_READY:
                    emitted[event["study_uid"]] = event["instance_count"]
            offset = batch[-1].offset + 1

    def _study_lock(self, study_uid: str) -> threading.Lock:
        with self._mutex:
            lock = self._study_locks.get(study_uid)
            if lock is None:
                lock = self._study_locks[study_uid] = threading.Lock()
            return lock

    # -- routing

    def route(self, payload: bytes, origin: str = "push") -> RouteResult:
        try:
            original = parse(payload)
        except UnsupportedTransferSyntax as exc:
            return self._quarantine(payload, origin,
                                    f"{REASON_UNSUPPORTED_TS}:{exc.uid}")
        except Truncated:
            return self._quarantine(payload, origin, REASON_TRUNCATED)
        except NotDicom:
            return self._quarantine(payload, origin, REASON_NOT_DICOM)
        try:
            scrubbed, _ = deid_dicom(original, self.policy, self.vault)
        except DeidRefused:
            return self._quarantine(payload, origin, REASON_DEID_REFUSED)
        data = serialize(scrubbed)
        ds = scrubbed.dataset
        study_uid = get_value(ds, _STUDY_UID)
        series_uid = get_value(ds, _SERIES_UID)
        sop_uid = get_value(ds, _SOP_UID)
        if not (study_uid and series_uid and sop_uid):
            return self._quarantine(payload, origin, REASON_MISSING_UID)

        with self._study_lock(study_uid):
            path = self.storage / study_uid / series_uid / f"{sop_uid}.dcm"
            if path.exists():
                if path.read_bytes() == data:
                    return RouteResult("duplicate", study_uid, series_uid, sop_uid)
                return self._quarantine(payload, origin, REASON_SOP_CONFLICT)
            path.parent.mkdir(parents=True, exist_ok=True)
            atomic_write(path, data)
            with self._mutex:
                entry = self._studies.setdefault(study_uid, {
                    "pseudonym": get_value(ds, _PATIENT_ID) or "",
                    "modality": get_value(ds, _MODALITY) or "",
                    "study_date": _dicom_date_to_iso(get_value(ds, _STUDY_DATE)),
                    "stored_at": iso_utc(now_utc()),
                    "series": {},
                })
                entry["series"].setdefault(series_uid, []).append(sop_uid)
                self._instances[sop_uid] = (study_uid, series_uid)
                self._last_activity[study_uid] = time.monotonic()
                self._save_index()
        return RouteResult("stored", study_uid, series_uid, sop_uid)

    def poll_inbox(self) -> PacsReport:
        report = PacsReport()
        for path in sorted(p for p in self.inbox.iterdir() if p.is_file()):
            if path.name.startswith("."):
                continue
            report.files += 1
            try:
                payload = path.read_bytes()
            except OSError:
                self._archive(path)
                continue
            result = self.route(payload, origin=str(path))
            if result.status == "stored":
                report.stored += 1
            elif result.status == "duplicate":
                report.duplicates += 1
            else:
                report.quarantined += 1
                report.reasons.append(result.reason)
            self._archive(path)
        return report

    def _archive(self, path: Path) -> None:
        target = self.done / path.name
        n = 1
        while target.exists():
            target = self.done / f"{path.stem}.{n}{path.suffix}"
            n += 1
        path.replace(target)

    def _quarantine(self, payload: bytes, origin: str, reason: str) -> RouteResult:
        stamp = iso_utc(now_utc()).replace(":", "").replace(".", "")
        digest = hashlib.sha256(payload + origin.encode()).hexdigest()[:12]
        entry = {
            "source": "PACS",
            "format": "DICOM",
            "origin": origin,
            "payload_b64": base64.b64encode(payload).decode("ascii"),
            "reason": reason,
            "quarantined_at": iso_utc(now_utc()),
        }
        atomic_write(self.quarantine_dir / f"{stamp}-pacs-{digest}.json",
                     json.dumps(entry, indent=2).encode())
        return RouteResult("quarantined", reason=reason)

    # -- study completion

    def finalize_ready(self, *, force: bool = False) -> list[str]:
        """Emits STUDY_READY for studies quiet long enough; returns their uids."""
        now = time.monotonic()
        emitted = []
        with self._mutex:
            candidates = [(uid, dict(entry)) for uid, entry in self._studies.items()]
        for study_uid, entry in candidates:
            count = sum(len(s) for s in entry["series"].values())
            if self._emitted.get(study_uid) == count:
                continue
            last = self._last_activity.get(study_uid, now)
            if not force and now - last < self.quiet_period:
                continue
            self._emit_ready(study_uid, entry, count)
            emitted.append(study_uid)
        return emitted

    def finalize_study(self, study_uid: str) -> dict | None:
        """Force completion of one study regardless of the quiet period."""
        with self._mutex:
            entry = self._studies.get(study_uid)
            if entry is None:
                return None
            entry = dict(entry)
        count = sum(len(s) for s in entry["series"].values())
        return self._emit_ready(study_uid, entry, count)

    def _emit_ready(self, study_uid: str, entry: dict, count: int) -> dict:
        event = {
            "kind": STUDY_READY,
            "study_uid": study_uid,
            "pseudonym": entry["pseudonym"],
            "instance_count": count,
            "modality": entry["modality"],
            "study_date": entry["study_date"],
            "emitted_at": iso_utc(now_utc()),
        }
        self.queue.append(IMAGING_TOPIC, study_uid.encode(),
                          json.dumps(event, sort_keys=True).encode())
        self._emitted[study_uid] = count
        return event

    # -- reads

    def _entry(self, study_uid: str, raw: dict) -> StudyIndexEntry:
        series = tuple(sorted((uid, len(sops))
                              for uid, sops in raw["series"].items()))
        return StudyIndexEntry(study_uid, raw["pseudonym"], raw["modality"],
                               raw["study_date"], series, raw["stored_at"])

    def query(self, *, study_uid: str | None = None,
              pseudonym: str | None = None) -> list[StudyIndexEntry]:
        with self._mutex:
            items = [(uid, dict(entry)) for uid, entry in self._studies.items()]
        out = []
        for uid, raw in items:
            if study_uid is not None and uid != study_uid:
                continue
            if pseudonym is not None and raw["pseudonym"] != pseudonym:
                continue
            out.append(self._entry(uid, raw))
        out.sort(key=lambda e: (e.study_date, e.study_uid))
        return out

    def instances(self, study_uid: str) -> list[dict]:
        with self._mutex:
            raw = self._studies.get(study_uid)
            if raw is None:
                return []
            series = {uid: list(sops) for uid, sops in raw["series"].items()}
        out = []
        for series_uid in sorted(series):
            for sop_uid in sorted(series[series_uid]):
                out.append({"series_uid": series_uid, "sop_uid": sop_uid})
        return out

    def retrieve(self, sop_uid: str) -> bytes:
        with self._mutex:
            location = self._instances.get(sop_uid)
        if location is None:
            raise InstanceNotFound(f"no stored instance {sop_uid}")
        study_uid, series_uid = location
        return (self.storage / study_uid / series_uid / f"{sop_uid}.dcm").read_bytes()

    # -- maintenance

    def rebuild_index(self) -> dict[str, dict]:
        """Disk scan that re-derives the index; used for crash verification."""
        studies: dict[str, dict] = {}
        for path in sorted(self.storage.rglob("*.dcm")):
            relative = path.relative_to(self.storage)
            if len(relative.parts) != 3:
                continue
            study_uid, series_uid, name = relative.parts
            f = parse(path.read_bytes())
            entry = studies.setdefault(study_uid, {
                "pseudonym": get_value(f.dataset, _PATIENT_ID) or "",
                "modality": get_value(f.dataset, _MODALITY) or "",
                "study_date": _dicom_date_to_iso(get_value(f.dataset, _STUDY_DATE)),
                "series": {},
            })
            entry["series"].setdefault(series_uid, []).append(name[:-4])
        return studies

    def verify(self) -> list[str]:
        """Compares the sidecar index against a disk scan; returns mismatches."""
        problems = []
        rebuilt = self.rebuild_index()
        with self._mutex:
            current = {uid: entry for uid, entry in self._studies.items()}
        for uid in sorted(set(rebuilt) | set(current)):
            disk = rebuilt.get(uid)
            indexed = current.get(uid)
            if disk is None:
                problems.append(f"indexed study {uid} missing from disk")
                continue
            if indexed is None:
                problems.append(f"stored study {uid} missing from index")
                continue
            disk_series = {s: sorted(v) for s, v in disk["series"].items()}
            index_series = {s: sorted(v) for s, v in indexed["series"].items()}
            if disk_series != index_series:
                problems.append(f"study {uid} series mismatch")
            for field in ("pseudonym", "modality", "study_date"):
                if disk[field] != indexed[field]:
                    problems.append(f"study {uid} field {field} mismatch")
        return problems

    def adopt_rebuilt_index(self) -> None:
        """Replaces the sidecar index with the disk-derived one."""
        rebuilt = self.rebuild_index()
        with self._mutex:
            stamps = {uid: entry.get("stored_at", iso_utc(now_utc()))
                      for uid, entry in self._studies.items()}
            for uid, entry in rebuilt.items():
                entry["stored_at"] = stamps.get(uid, iso_utc(now_utc()))
            self._studies = rebuilt
            self._instances = {}
            for study_uid, entry in self._studies.items():
                for series_uid, sops in entry["series"].items():
                    for sop_uid in sops:
                        self._instances[sop_uid] = (study_uid, series_uid)
            self._save_index()
