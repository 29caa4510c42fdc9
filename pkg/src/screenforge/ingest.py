"""Source connectors: drop-directory grabbing, harmonization, eligibility, publishing.

Each source system delivers files into its own inbox directory (or pushes the
same bytes over HTTP). A connector splits files into per-row raw records,
harmonizes them into canonical types, checks screening eligibility, scrubs
identifiers through the vault, and appends the result to the source's queue
topic. Every input row ends up either on a topic or in the quarantine
directory; nothing is silently dropped.
"""

from __future__ import annotations

import base64
import csv
import hashlib
import io
import json
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

from .config import EligibilityRules
from .deid import DeidPolicy, DeidRefused, Vault, deid_text
from .errors import ScreenforgeError
from .qlog import QueueError, QueueLog
from .util import atomic_write, iso_utc, now_utc, parse_iso_utc

SOURCES = ("CRM", "RIS", "EHR")

SOURCE_FORMATS = {
    "CRM": ("CSV",),
    "RIS": ("CSV", "TXT"),
    "EHR": ("JSON", "XML"),
}

SOURCE_TOPICS = {
    "CRM": "participants",
    "RIS": "ris-protocols",
    "EHR": "ehr-events",
}

CRM_COLUMNS = ("external_id", "full_name", "birth_date", "sex", "phone",
               "pack_years", "years_since_quit", "consent", "registered_at")
RIS_COLUMNS = ("accession", "external_id", "modality", "study_date",
               "report_text", "radiologist_id")
EHR_EVENT_KEYS = ("patient_id", "date", "kind", "code", "value")

EVENT_KINDS = ("DIAGNOSIS", "VITALS")

# quarantine reasons; every structurally rejected row carries exactly one
REASON_IO = "IO"
REASON_BAD_FORMAT = "BAD_FORMAT"
REASON_BAD_HEADER = "BAD_HEADER"
REASON_MISSING_COLUMN = "MISSING_COLUMN"
REASON_MISSING_FIELD = "MISSING_FIELD"
REASON_BAD_DATE = "BAD_DATE"
REASON_BAD_NUMBER = "BAD_NUMBER"
REASON_BAD_CONSENT = "BAD_CONSENT"
REASON_BAD_TIMESTAMP = "BAD_TIMESTAMP"
REASON_CONSENT_ABSENT = "CONSENT_ABSENT"
REASON_DUP_ACCESSION = "DUP_ACCESSION"
REASON_DUP_EXTERNAL_ID = "DUP_EXTERNAL_ID"
REASON_BAD_DOCUMENT = "BAD_DOCUMENT"
REASON_DEID_REFUSED = "DEID_REFUSED"

CURRENT_SMOKER = "current"

_CONSENT_TRUE = {"y", "1", "true", "yes"}
_CONSENT_FALSE = {"n", "0", "false", "no", ""}

_DATE_DMY_SLASH = re.compile(r"^(\d{2})/(\d{2})/(\d{4})$")
_DATE_DMY_DOT = re.compile(r"^(\d{2})\.(\d{2})\.(\d{4})$")

_EXTENSION_FORMATS = {".csv": "CSV", ".txt": "TXT", ".json": "JSON", ".xml": "XML"}


class IngestError(ScreenforgeError):
    code = "INGEST"


@dataclass(frozen=True)
class RawSourceRecord:
    source: str
    format: str
    origin: str
    payload: bytes
    received_at: str

    def __post_init__(self):
        if self.source not in SOURCES:
            raise IngestError(f"unknown source {self.source!r}")
        if self.format not in SOURCE_FORMATS[self.source]:
            raise IngestError(
                f"format {self.format} not accepted for source {self.source}")


@dataclass(frozen=True)
class CanonicalParticipant:
    source_external_id: str
    full_name: str
    birth_date: str
    sex: str
    phone: str
    smoking_pack_years: float
    years_since_quit: float | str
    consent: bool
    registered_at: str


@dataclass(frozen=True)
class CanonicalStudyReport:
    accession: str
    source_external_id: str
    modality: str
    study_date: str
    report_text: str
    radiologist_id: str


@dataclass(frozen=True)
class CanonicalClinicalEvent:
    source_external_id: str
    event_date: str
    kind: str
    code: str
    value: str


@dataclass(frozen=True)
class EligibilityResult:
    eligible: bool
    reasons: tuple[str, ...]
    evaluated_at: str
    ruleset_version: str


@dataclass(frozen=True)
class QuarantineEntry:
    raw: RawSourceRecord
    reason: str
    quarantined_at: str

    def to_json(self) -> dict:
        return {
            "source": self.raw.source,
            "format": self.raw.format,
            "origin": self.raw.origin,
            "payload_b64": base64.b64encode(self.raw.payload).decode("ascii"),
            "reason": self.reason,
            "quarantined_at": self.quarantined_at,
        }


@dataclass
class IngestReport:
    """Counts for one poll cycle or one HTTP push."""
    files: int = 0
    duplicate_files: int = 0
    rows: int = 0
    published: int = 0
    quarantined: int = 0
    reasons: list[str] = field(default_factory=list)

    def merge(self, other: "IngestReport") -> None:
        self.files += other.files
        self.duplicate_files += other.duplicate_files
        self.rows += other.rows
        self.published += other.published
        self.quarantined += other.quarantined
        self.reasons.extend(other.reasons)


# -- harmonization -----------------------------------------------------------------


def normalize_date(text: str) -> str | None:
    """Accepts ISO, DD/MM/YYYY, and DD.MM.YYYY; returns ISO or None."""
    text = text.strip()
    for pattern in (_DATE_DMY_SLASH, _DATE_DMY_DOT):
        m = pattern.match(text)
        if m:
            text = f"{m.group(3)}-{m.group(2)}-{m.group(1)}"
            break
    try:
        return date.fromisoformat(text).isoformat()
    except ValueError:
        return None


def _quarantine(raw: RawSourceRecord, reason: str) -> QuarantineEntry:
    return QuarantineEntry(raw, reason, iso_utc(now_utc()))


def _csv_fields(line: str, expected: int) -> list[str] | None:
    row = next(csv.reader(io.StringIO(line)), None)
    if row is None or len(row) != expected:
        return None
    return [f.strip() for f in row]


def harmonize_participant(raw: RawSourceRecord) -> CanonicalParticipant | QuarantineEntry:
    fields = _csv_fields(raw.payload.decode("utf-8", "replace"), len(CRM_COLUMNS))
    if fields is None:
        return _quarantine(raw, REASON_MISSING_COLUMN)
    (external_id, full_name, birth_raw, sex, phone,
     pack_raw, quit_raw, consent_raw, registered_raw) = fields
    if not external_id:
        return _quarantine(raw, REASON_MISSING_FIELD)
    birth_date = normalize_date(birth_raw)
    if birth_date is None or date.fromisoformat(birth_date) >= now_utc().date():
        return _quarantine(raw, REASON_BAD_DATE)
    sex = sex.upper() if sex.upper() in ("F", "M") else "U"
    try:
        pack_years = float(pack_raw)
        if pack_years < 0:
            raise ValueError
    except ValueError:
        return _quarantine(raw, REASON_BAD_NUMBER)
    years_since_quit: float | str
    if quit_raw.strip().lower() == CURRENT_SMOKER:
        years_since_quit = CURRENT_SMOKER
    else:
        try:
            years_since_quit = float(quit_raw)
            if years_since_quit < 0:
                raise ValueError
        except ValueError:
            return _quarantine(raw, REASON_BAD_NUMBER)
    consent_token = consent_raw.strip().lower()
    if consent_token in _CONSENT_TRUE:
        consent = True
    elif consent_token in _CONSENT_FALSE:
        return _quarantine(raw, REASON_CONSENT_ABSENT)
    else:
        return _quarantine(raw, REASON_BAD_CONSENT)
    try:
        registered_at = iso_utc(parse_iso_utc(registered_raw))
    except ValueError:
        return _quarantine(raw, REASON_BAD_TIMESTAMP)
    return CanonicalParticipant(
        source_external_id=external_id,
        full_name=full_name,
        birth_date=birth_date,
        sex=sex,
        phone=phone,
        smoking_pack_years=pack_years,
        years_since_quit=years_since_quit,
        consent=consent,
        registered_at=registered_at,
    )


def _report_from_fields(raw, accession, external_id, modality, study_date_raw,
                        report_text, radiologist_id):
    if not accession or not external_id:
        return _quarantine(raw, REASON_MISSING_FIELD)
    study_date = normalize_date(study_date_raw)
    if study_date is None:
        return _quarantine(raw, REASON_BAD_DATE)
    return CanonicalStudyReport(
        accession=accession,
        source_external_id=external_id,
        modality=modality,
        study_date=study_date,
        report_text=report_text,
        radiologist_id=radiologist_id,
    )


_TXT_KEYS = {"ACCESSION": "accession", "PATIENT": "external_id",
             "MODALITY": "modality", "DATE": "study_date",
             "REPORT": "report_text", "RADIOLOGIST": "radiologist_id"}

_TXT_LINE = re.compile(r"^([A-Z]+):\s?(.*)$")


def harmonize_ris(raw: RawSourceRecord) -> CanonicalStudyReport | QuarantineEntry:
    text = raw.payload.decode("utf-8", "replace")
    if raw.format == "CSV":
        fields = _csv_fields(text, len(RIS_COLUMNS))
        if fields is None:
            return _quarantine(raw, REASON_MISSING_COLUMN)
        return _report_from_fields(raw, *fields)
    values = {"accession": "", "external_id": "", "modality": "",
              "study_date": "", "report_text": "", "radiologist_id": ""}
    current = None
    for line in text.splitlines():
        m = _TXT_LINE.match(line)
        if m and m.group(1) in _TXT_KEYS:
            current = _TXT_KEYS[m.group(1)]
            values[current] = m.group(2).strip()
        elif current and line.strip():
            # continuation line extends the previous value
            values[current] = (values[current] + " " + line.strip()).strip()
    return _report_from_fields(raw, values["accession"], values["external_id"],
                               values["modality"], values["study_date"],
                               values["report_text"], values["radiologist_id"])


def harmonize_ehr(raw: RawSourceRecord) -> list[CanonicalClinicalEvent] | QuarantineEntry:
    text = raw.payload.decode("utf-8", "replace")
    if raw.format == "JSON":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError:
            return _quarantine(raw, REASON_BAD_DOCUMENT)
        if not isinstance(doc, list):
            return _quarantine(raw, REASON_BAD_DOCUMENT)
        entries = []
        for item in doc:
            if not isinstance(item, dict):
                return _quarantine(raw, REASON_BAD_DOCUMENT)
            entries.append({k: str(item.get(k, "")) for k in EHR_EVENT_KEYS})
    else:
        try:
            root = ET.fromstring(text)
        except ET.ParseError:
            return _quarantine(raw, REASON_BAD_DOCUMENT)
        entries = [{k: ev.attrib.get(k, "") for k in EHR_EVENT_KEYS}
                   for ev in root.iter("event")]
    events = []
    for entry in entries:
        kind = entry["kind"].upper()
        event_date = normalize_date(entry["date"] or "")
        if not entry["patient_id"] or kind not in EVENT_KINDS or event_date is None:
            return _quarantine(raw, REASON_BAD_DOCUMENT)
        events.append(CanonicalClinicalEvent(
            source_external_id=entry["patient_id"],
            event_date=event_date,
            kind=kind,
            code=entry["code"],
            value=entry["value"],
        ))
    return events


# -- eligibility --------------------------------------------------------------------

REASON_AGE_RANGE = "AGE_RANGE"
REASON_PACK_YEARS = "PACK_YEARS"
REASON_QUIT_RECENCY = "QUIT_RECENCY"
REASON_CONSENT = "CONSENT"


def age_at(birth_date: str, as_of: date) -> int:
    birth = date.fromisoformat(birth_date)
    before_birthday = (as_of.month, as_of.day) < (birth.month, birth.day)
    return as_of.year - birth.year - int(before_birthday)


def check_eligibility(p: CanonicalParticipant, rules: EligibilityRules,
                      as_of: date) -> EligibilityResult:
    """Evaluates every rule and accumulates all failures; never fail-fast."""
    reasons = []
    age = age_at(p.birth_date, as_of)
    if not rules.age_min <= age <= rules.age_max:
        reasons.append(REASON_AGE_RANGE)
    if p.smoking_pack_years < rules.min_pack_years:
        reasons.append(REASON_PACK_YEARS)
    if (p.years_since_quit != CURRENT_SMOKER
            and p.years_since_quit > rules.max_years_since_quit):
        reasons.append(REASON_QUIT_RECENCY)
    if not p.consent:
        reasons.append(REASON_CONSENT)
    return EligibilityResult(
        eligible=not reasons,
        reasons=tuple(reasons),
        evaluated_at=iso_utc(now_utc()),
        ruleset_version=rules.ruleset_version,
    )


# -- file splitting ----------------------------------------------------------------


def format_of(path: Path) -> str | None:
    return _EXTENSION_FORMATS.get(path.suffix.lower())


def _expected_header(source: str) -> tuple[str, ...]:
    return CRM_COLUMNS if source == "CRM" else RIS_COLUMNS


def split_rows(source: str, fmt: str, origin: str, payload: bytes,
               received_at: str) -> list[RawSourceRecord] | QuarantineEntry:
    """One record per CSV data row or TXT block; JSON/XML stay whole."""
    whole = RawSourceRecord(source, fmt, origin, payload, received_at)
    if fmt == "CSV":
        lines = payload.decode("utf-8", "replace").splitlines()
        if not lines:
            return []
        header = _csv_fields(lines[0], len(_expected_header(source)))
        if header is None or tuple(header) != _expected_header(source):
            return _quarantine(whole, REASON_BAD_HEADER)
        return [RawSourceRecord(source, fmt, f"{origin}#row{i}",
                                line.encode(), received_at)
                for i, line in enumerate(lines[1:], start=2) if line.strip()]
    if fmt == "TXT":
        blocks = re.split(r"\n\s*\n", payload.decode("utf-8", "replace"))
        return [RawSourceRecord(source, fmt, f"{origin}#block{i}",
                                block.strip().encode(), received_at)
                for i, block in enumerate(blocks, start=1) if block.strip()]
    return [whole]


# -- connector ----------------------------------------------------------------------


class Connector:
    """One per source; polls its inbox and publishes de-identified records."""

    def __init__(self, source: str, data_root: Path, queue: QueueLog,
                 vault: Vault, policy: DeidPolicy, rules: EligibilityRules):
        if source not in SOURCES:
            raise IngestError(f"unknown source {source!r}")
        self.source = source
        self.topic = SOURCE_TOPICS[source]
        self.inbox = data_root / "inbox" / source.lower()
        self.done = self.inbox / "done"
        self.quarantine_dir = data_root / "quarantine"
        self.retry_dir = data_root / "retry" / self.topic
        self.queue = queue
        self.vault = vault
        self.policy = policy
        self.rules = rules
        self.inbox.mkdir(parents=True, exist_ok=True)
        self.done.mkdir(parents=True, exist_ok=True)
        self.quarantine_dir.mkdir(parents=True, exist_ok=True)
        self._seen_path = self.inbox / ".seen.json"
        self._seen: set[str] = set()
        if self._seen_path.exists():
            self._seen = set(json.loads(self._seen_path.read_text()))

    # -- file intake

    def poll_once(self) -> IngestReport:
        report = IngestReport()
        for path in sorted(p for p in self.inbox.iterdir() if p.is_file()):
            if path.name.startswith("."):
                continue
            report.merge(self._process_file(path))
        return report

    def _process_file(self, path: Path) -> IngestReport:
        report = IngestReport(files=1)
        received_at = iso_utc(now_utc())
        try:
            payload = path.read_bytes()
        except OSError:
            whole = RawSourceRecord(self.source, SOURCE_FORMATS[self.source][0],
                                    str(path), b"", received_at)
            self._write_quarantine(_quarantine(whole, REASON_IO), report)
            self._archive(path)
            return report
        digest = hashlib.sha256(payload).hexdigest()
        if digest in self._seen:
            report.duplicate_files += 1
            self._archive(path)
            return report
        fmt = format_of(path)
        if fmt is None or fmt not in SOURCE_FORMATS[self.source]:
            fallback = SOURCE_FORMATS[self.source][0]
            whole = RawSourceRecord(self.source, fallback, str(path),
                                    payload, received_at)
            self._write_quarantine(_quarantine(whole, REASON_BAD_FORMAT), report)
        else:
            self._ingest_payload(fmt, str(path), payload, received_at, report)
        self._seen.add(digest)
        atomic_write(self._seen_path, json.dumps(sorted(self._seen)).encode())
        self._archive(path)
        return report

    def ingest_bytes(self, fmt: str, payload: bytes, origin: str) -> IngestReport:
        """HTTP push path; one body is treated like one dropped file."""
        report = IngestReport(files=1)
        if fmt not in SOURCE_FORMATS[self.source]:
            raise IngestError(
                f"format {fmt} not accepted for source {self.source}")
        digest = hashlib.sha256(payload).hexdigest()
        if digest in self._seen:
            report.duplicate_files += 1
            return report
        self._ingest_payload(fmt, origin, payload, iso_utc(now_utc()), report)
        self._seen.add(digest)
        atomic_write(self._seen_path, json.dumps(sorted(self._seen)).encode())
        return report

    def _ingest_payload(self, fmt, origin, payload, received_at, report):
        rows = split_rows(self.source, fmt, origin, payload, received_at)
        if isinstance(rows, QuarantineEntry):
            self._write_quarantine(rows, report)
            return
        seen_accessions: set[str] = set()
        seen_external: set[str] = set()
        for raw in rows:
            report.rows += 1
            self._process_raw(raw, report, seen_accessions, seen_external)

    # -- per-row pipeline

    def _process_raw(self, raw, report, seen_accessions, seen_external):
        if self.source == "CRM":
            result = harmonize_participant(raw)
            if isinstance(result, QuarantineEntry):
                self._write_quarantine(result, report)
                return
            if result.source_external_id in seen_external:
                self._write_quarantine(_quarantine(raw, REASON_DUP_EXTERNAL_ID),
                                       report)
                return
            seen_external.add(result.source_external_id)
            self._publish_participant(result, raw, report)
        elif self.source == "RIS":
            result = harmonize_ris(raw)
            if isinstance(result, QuarantineEntry):
                self._write_quarantine(result, report)
                return
            if result.accession in seen_accessions:
                self._write_quarantine(_quarantine(raw, REASON_DUP_ACCESSION),
                                       report)
                return
            seen_accessions.add(result.accession)
            self._publish_report(result, raw, report)
        else:
            result = harmonize_ehr(raw)
            if isinstance(result, QuarantineEntry):
                self._write_quarantine(result, report)
                return
            for event in result:
                self._publish_event(event, raw, report)

    def _publish_participant(self, p: CanonicalParticipant, raw, report):
        self.vault.record_attributes("CRM", p.source_external_id, {
            "full_name": p.full_name, "phone": p.phone})
        eligibility = check_eligibility(p, self.rules, now_utc().date())
        record = {
            "source_external_id": p.source_external_id,
            "full_name": p.full_name,
            "birth_date": p.birth_date,
            "sex": p.sex,
            "phone": p.phone,
            "smoking_pack_years": p.smoking_pack_years,
            "years_since_quit": p.years_since_quit,
            "consent": p.consent,
            "registered_at": p.registered_at,
        }
        self._deid_and_publish(record, raw, report, extra={
            "record_kind": "participant",
            "eligibility": {
                "eligible": eligibility.eligible,
                "reasons": list(eligibility.reasons),
                "evaluated_at": eligibility.evaluated_at,
                "ruleset_version": eligibility.ruleset_version,
            },
        })

    def _publish_report(self, r: CanonicalStudyReport, raw, report):
        record = {
            "source_external_id": r.source_external_id,
            "accession": r.accession,
            "modality": r.modality,
            "study_date": r.study_date,
            "report_text": r.report_text,
            "radiologist_id": r.radiologist_id,
        }
        self._deid_and_publish(record, raw, report,
                               extra={"record_kind": "study_report"})

    def _publish_event(self, e: CanonicalClinicalEvent, raw, report):
        record = {
            "source_external_id": e.source_external_id,
            "event_date": e.event_date,
            "kind": e.kind,
            "code": e.code,
            "value": e.value,
        }
        self._deid_and_publish(record, raw, report,
                               extra={"record_kind": "clinical_event"})

    def _deid_and_publish(self, record, raw, report, extra):
        try:
            scrubbed = deid_text(record, self.policy, self.vault, self.source)
        except DeidRefused:
            self._write_quarantine(_quarantine(raw, REASON_DEID_REFUSED), report)
            return
        scrubbed.update(extra)
        payload = json.dumps(scrubbed, sort_keys=True).encode()
        try:
            self.queue.append(self.topic, scrubbed["pseudonym"].encode(), payload)
        except QueueError:
            self._hold_for_retry(scrubbed["pseudonym"], payload)
        report.published += 1

    # -- failure paths

    def _write_quarantine(self, entry: QuarantineEntry, report: IngestReport):
        report.quarantined += 1
        report.reasons.append(entry.reason)
        stamp = entry.quarantined_at.replace(":", "").replace(".", "")
        digest = hashlib.sha256(entry.raw.payload + entry.raw.origin.encode())
        name = f"{stamp}-{self.source.lower()}-{digest.hexdigest()[:12]}.json"
        atomic_write(self.quarantine_dir / name,
                     json.dumps(entry.to_json(), indent=2).encode())

    def _hold_for_retry(self, pseudonym: str, payload: bytes):
        """Queue append failed; park the record so a later cycle replays it."""
        self.retry_dir.mkdir(parents=True, exist_ok=True)
        name = hashlib.sha256(payload).hexdigest()[:24] + ".json"
        atomic_write(self.retry_dir / name, json.dumps(
            {"key": pseudonym, "payload_b64":
             base64.b64encode(payload).decode("ascii")}).encode())

    def flush_retries(self) -> int:
        if not self.retry_dir.is_dir():
            return 0
        flushed = 0
        for path in sorted(self.retry_dir.iterdir()):
            held = json.loads(path.read_text())
            try:
                self.queue.append(self.topic, held["key"].encode(),
                                  base64.b64decode(held["payload_b64"]))
            except QueueError:
                continue
            path.unlink()
            flushed += 1
        return flushed

    # -- helpers

    def _archive(self, path: Path):
        target = self.done / path.name
        n = 1
        while target.exists():
            target = self.done / f"{path.stem}.{n}{path.suffix}"
            n += 1
        path.replace(target)
