"""Depersonalized screening register.

Consumes the queue topics (participants, ris-protocols, ehr-events,
imaging-events, reading-events) into an embedded transactional store and
exposes the workflow operations. Reading actions submitted through the API
are validated synchronously, appended to the reading-events topic, and then
applied by the same consumer path, so wiping the store and replaying every
topic from offset zero reproduces it exactly.

Records that reference a pseudonym or study the register has not seen yet
are parked in a pending table and retried after later records; ordering
across topics therefore does not matter for the final state.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import sqlite3
import threading
import uuid
from contextlib import contextmanager
from datetime import timedelta
from pathlib import Path

from .config import EligibilityRules
from .errors import ScreenforgeError
from .outliers import flag_outliers
from .qlog import QueueLog, UnknownTopic
from .util import iso_utc, now_utc, parse_iso_utc
from .workflow import (
    IllegalTransition,
    STATES,
    WorkflowError,
    check_protocol_rules,
    generate_narrative,
    map_category_to_outcome,
    next_state,
    validate_nodules,
)

_POISON = (WorkflowError, ValueError, KeyError, TypeError,
           sqlite3.IntegrityError)

TOPICS = ("participants", "ris-protocols", "ehr-events", "imaging-events",
          "reading-events")
READING_TOPIC = "reading-events"

_BATCH = 500


class RegistryError(ScreenforgeError):
    code = "REGISTRY"


class UnknownCase(RegistryError):
    code = "UNKNOWN_CASE"


class UnknownStudy(RegistryError):
    code = "UNKNOWN_STUDY"


class UnknownTask(RegistryError):
    code = "UNKNOWN_TASK"


class AlreadyFinalized(RegistryError):
    code = "ALREADY_FINALIZED"


class _Park(Exception):
    """Internal: the record cannot apply yet; retry after later records."""

    def __init__(self, why: str):
        self.why = why


_SCHEMA = """
CREATE TABLE IF NOT EXISTS cases (
    pseudonym TEXT PRIMARY KEY,
    state TEXT NOT NULL,
    birth_year INTEGER,
    sex TEXT,
    eligibility_json TEXT NOT NULL,
    registered_at TEXT NOT NULL,
    next_invite_date TEXT,
    contact_task_id TEXT,
    updated_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS case_history (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    pseudonym TEXT NOT NULL,
    event TEXT NOT NULL,
    at TEXT NOT NULL,
    detail_json TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS studies (
    study_uid TEXT PRIMARY KEY,
    pseudonym TEXT NOT NULL,
    modality TEXT,
    study_date TEXT,
    instance_count INTEGER NOT NULL,
    first_ready_at TEXT NOT NULL,
    last_ready_at TEXT NOT NULL,
    second_opinion_expert TEXT
);
CREATE TABLE IF NOT EXISTS protocols (
    protocol_id TEXT PRIMARY KEY,
    study_uid TEXT NOT NULL,
    pseudonym TEXT NOT NULL,
    reader_id TEXT NOT NULL,
    nodules_json TEXT NOT NULL,
    lungrads_category TEXT NOT NULL,
    outcome TEXT NOT NULL,
    narrative TEXT NOT NULL,
    is_second_opinion INTEGER NOT NULL,
    is_final INTEGER NOT NULL DEFAULT 0,
    created_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS contact_tasks (
    task_id TEXT PRIMARY KEY,
    pseudonym TEXT NOT NULL,
    study_uid TEXT,
    created_at TEXT NOT NULL,
    status TEXT NOT NULL,
    note TEXT NOT NULL DEFAULT ''
);
CREATE TABLE IF NOT EXISTS clinical_notes (
    content_hash TEXT PRIMARY KEY,
    pseudonym TEXT NOT NULL,
    kind TEXT NOT NULL,
    at TEXT NOT NULL,
    code TEXT,
    value TEXT,
    extra_json TEXT
);
CREATE TABLE IF NOT EXISTS consumer_state (
    topic TEXT PRIMARY KEY,
    next_offset INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS pending_records (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    topic TEXT NOT NULL,
    offset INTEGER NOT NULL,
    key TEXT NOT NULL,
    payload BLOB NOT NULL,
    attempts INTEGER NOT NULL DEFAULT 0,
    first_seen TEXT NOT NULL,
    why TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS applied_records (
    content_hash TEXT PRIMARY KEY
);
CREATE TABLE IF NOT EXISTS idempotency (
    key TEXT PRIMARY KEY,
    request_hash TEXT NOT NULL,
    status_code INTEGER NOT NULL,
    response_json TEXT NOT NULL,
    created_at TEXT NOT NULL
);
"""

EXPORT_HEADER = ("pseudonym,study_uid,study_date,lungrads_category,outcome,"
                 "nodule_count,max_nodule_diameter_mm,reader_id,"
                 "second_opinion,outlier_flag")

# deterministic tie-break when timestamps collide
_KIND_PRIORITY = {
    "registration": 0,
    "eligibility": 0,
    "reinvited": 0,
    "clinical_event": 1,
    "study_report": 1,
    "study_linked": 2,
    "protocol": 3,
    "second_opinion_requested": 3,
    "second_opinion": 3,
    "outcome": 4,
    "contact_closed": 4,
}

_HISTORY_KINDS = {
    "Registered": "registration",
    "EligibilityChecked": "eligibility",
    "ReInvited": "reinvited",
    "StudyLinked": "study_linked",
    "ProtocolSubmitted": "protocol",
    "SecondOpinionRequested": "second_opinion_requested",
    "SecondOpinionSubmitted": "second_opinion",
    "Finalized": "outcome",
    "ContactClosed": "contact_closed",
}


def _record_hash(topic: str, key: bytes, payload: bytes) -> str:
    digest = hashlib.sha256()
    digest.update(topic.encode())
    digest.update(b"|")
    digest.update(key)
    digest.update(b"|")
    digest.update(payload)
    return digest.hexdigest()


def _format_number(value: float) -> str:
    return f"{value:g}"


class Registry:
    def __init__(self, data_root: Path, queue: QueueLog, *,
                 rules: EligibilityRules | None = None,
                 follow_up_days: int = 365, retry_horizon: int = 1000):
        self.queue = queue
        self.rules = rules or EligibilityRules()
        self.follow_up_days = follow_up_days
        self.retry_horizon = retry_horizon
        directory = data_root / "registry"
        directory.mkdir(parents=True, exist_ok=True)
        self._db = sqlite3.connect(directory / "registry.db",
                                   check_same_thread=False)
        self._db.row_factory = sqlite3.Row
        self._db.isolation_level = None
        self._db.execute("PRAGMA journal_mode=WAL")
        self._db.execute("PRAGMA synchronous=FULL")
        self._lock = threading.RLock()
        with self._lock:
            self._db.executescript(_SCHEMA)

    def close(self) -> None:
        self._db.close()

    @contextmanager
    def _txn(self):
        with self._lock:
            self._db.execute("BEGIN IMMEDIATE")
            try:
                yield self._db
            except BaseException:
                self._db.execute("ROLLBACK")
                raise
            else:
                self._db.execute("COMMIT")

    # -- consumption ------------------------------------------------------------

    def consume_available(self) -> dict:
        """Drains all topics and retries parked records until quiescent."""
        report = {"processed": 0, "parked": 0, "resolved": 0, "warnings": []}
        progress = True
        while progress:
            progress = False
            for topic in TOPICS:
                if self._drain_topic(topic, report):
                    progress = True
            if self._retry_pending(report):
                progress = True
        with self._lock:
            stuck = self._db.execute(
                "SELECT topic, offset, why FROM pending_records "
                "WHERE attempts > ? ORDER BY seq", (self.retry_horizon,)).fetchall()
        for row in stuck:
            report["warnings"].append(
                f"record at {row['topic']}@{row['offset']} still parked: "
                f"{row['why']}")
        return report

    def _drain_topic(self, topic: str, report: dict) -> bool:
        any_read = False
        while True:
            with self._lock:
                row = self._db.execute(
                    "SELECT next_offset FROM consumer_state WHERE topic = ?",
                    (topic,)).fetchone()
            offset = row["next_offset"] if row else 0
            try:
                records = self.queue.read(topic, offset, _BATCH)
            except UnknownTopic:
                return any_read
            if not records:
                return any_read
            any_read = True
            for record in records:
                self._consume_one(topic, record, report)

    def _consume_one(self, topic, record, report) -> None:
        content_hash = _record_hash(topic, record.key, record.payload)
        outcome = "seen"
        with self._txn() as db:
            seen = db.execute(
                "SELECT 1 FROM applied_records WHERE content_hash = ?",
                (content_hash,)).fetchone()
            if not seen:
                db.execute("SAVEPOINT dispatch")
                try:
                    self._dispatch(db, topic, record.payload, report)
                    db.execute("RELEASE dispatch")
                    outcome = "applied"
                except _Park as park:
                    db.execute("ROLLBACK TO dispatch")
                    db.execute("RELEASE dispatch")
                    db.execute(
                        "INSERT INTO pending_records "
                        "(topic, offset, key, payload, first_seen, why) "
                        "VALUES (?, ?, ?, ?, ?, ?)",
                        (topic, record.offset, record.key.decode("utf-8", "replace"),
                         record.payload, iso_utc(now_utc()), park.why))
                    outcome = "parked"
                except _POISON as exc:
                    # poison record: skip it rather than wedge the consumer
                    db.execute("ROLLBACK TO dispatch")
                    db.execute("RELEASE dispatch")
                    report["warnings"].append(
                        f"record at {topic}@{record.offset} skipped: {exc}")
                    outcome = "applied"
                if outcome == "applied":
                    db.execute(
                        "INSERT INTO applied_records (content_hash) VALUES (?)",
                        (content_hash,))
                    report["processed"] += 1
                else:
                    report["parked"] += 1
            db.execute(
                "INSERT INTO consumer_state (topic, next_offset) VALUES (?, ?) "
                "ON CONFLICT(topic) DO UPDATE SET next_offset = excluded.next_offset",
                (topic, record.offset + 1))

    def _retry_pending(self, report: dict) -> bool:
        with self._lock:
            rows = self._db.execute(
                "SELECT seq, topic, key, payload FROM pending_records "
                "ORDER BY seq").fetchall()
        resolved_any = False
        for row in rows:
            try:
                with self._txn() as db:
                    self._dispatch(db, row["topic"], row["payload"], report)
                    db.execute(
                        "INSERT OR IGNORE INTO applied_records (content_hash) "
                        "VALUES (?)",
                        (_record_hash(row["topic"], row["key"].encode(),
                                      row["payload"]),))
                    db.execute("DELETE FROM pending_records WHERE seq = ?",
                               (row["seq"],))
            except _Park:
                with self._txn() as db:
                    db.execute(
                        "UPDATE pending_records SET attempts = attempts + 1 "
                        "WHERE seq = ?", (row["seq"],))
                continue
            except _POISON as exc:
                with self._txn() as db:
                    db.execute("DELETE FROM pending_records WHERE seq = ?",
                               (row["seq"],))
                report["warnings"].append(
                    f"parked {row['topic']} record dropped: {exc}")
                continue
            resolved_any = True
            report["resolved"] += 1
        return resolved_any

    def _dispatch(self, db, topic: str, payload: bytes, report: dict) -> None:
        record = json.loads(payload)
        if topic == "participants":
            self._apply_participant(db, record, report)
        elif topic == "ris-protocols":
            self._apply_report(db, record, payload)
        elif topic == "ehr-events":
            self._apply_clinical(db, record, payload)
        elif topic == "imaging-events":
            self._apply_study_ready(db, record)
        elif topic == READING_TOPIC:
            self._apply_reading(db, record, report)
        else:
            report["warnings"].append(f"unknown topic {topic}")

    # -- per-record handlers

    def _history(self, db, pseudonym: str, event: str, at: str, detail: dict):
        db.execute(
            "INSERT INTO case_history (pseudonym, event, at, detail_json) "
            "VALUES (?, ?, ?, ?)",
            (pseudonym, event, at, json.dumps(detail, sort_keys=True)))

    def _set_state(self, db, pseudonym: str, state: str):
        db.execute("UPDATE cases SET state = ?, updated_at = ? "
                   "WHERE pseudonym = ?",
                   (state, iso_utc(now_utc()), pseudonym))

    def _apply_participant(self, db, record: dict, report: dict) -> None:
        pseudonym = record["pseudonym"]
        eligibility = record["eligibility"]
        eligible = bool(eligibility["eligible"])
        case = db.execute("SELECT * FROM cases WHERE pseudonym = ?",
                          (pseudonym,)).fetchone()
        registered_at = record.get("registered_at") or iso_utc(now_utc())
        evaluated_at = eligibility.get("evaluated_at", registered_at)
        if case is None:
            state = next_state(None, "Registered")
            db.execute(
                "INSERT INTO cases (pseudonym, state, birth_year, sex, "
                "eligibility_json, registered_at, updated_at) "
                "VALUES (?, ?, ?, ?, ?, ?, ?)",
                (pseudonym, state, record.get("birth_year"),
                 record.get("sex", "U"), json.dumps(eligibility, sort_keys=True),
                 registered_at, iso_utc(now_utc())))
            self._history(db, pseudonym, "Registered", registered_at,
                          {"sex": record.get("sex", "U"),
                           "birth_year": record.get("birth_year")})
        else:
            state = case["state"]
            if state == "INELIGIBLE":
                state = next_state(state, "ReInvited")
                self._set_state(db, pseudonym, state)
                self._history(db, pseudonym, "ReInvited", registered_at, {})
            elif state == "FOLLOW_UP_SCHEDULED":
                state = next_state(state, "ReInvited")
                db.execute("UPDATE cases SET state = ?, next_invite_date = NULL,"
                           " updated_at = ? WHERE pseudonym = ?",
                           (state, iso_utc(now_utc()), pseudonym))
                self._history(db, pseudonym, "ReInvited", registered_at, {})
            elif state not in ("REGISTERED", "ELIGIBLE"):
                report["warnings"].append(
                    f"participant record for {pseudonym} ignored in state {state}")
                return
        new_state = next_state(state, "EligibilityChecked", eligible=eligible)
        db.execute("UPDATE cases SET state = ?, birth_year = ?, sex = ?, "
                   "eligibility_json = ?, updated_at = ? WHERE pseudonym = ?",
                   (new_state, record.get("birth_year"), record.get("sex", "U"),
                    json.dumps(eligibility, sort_keys=True), iso_utc(now_utc()),
                    pseudonym))
        self._history(db, pseudonym, "EligibilityChecked", evaluated_at,
                      {"eligible": eligible,
                       "reasons": list(eligibility.get("reasons", [])),
                       "ruleset_version": eligibility.get("ruleset_version", "")})

    def _require_case(self, db, pseudonym: str):
        case = db.execute("SELECT * FROM cases WHERE pseudonym = ?",
                          (pseudonym,)).fetchone()
        if case is None:
            raise _Park(f"unknown pseudonym {pseudonym}")
        return case

    def _apply_report(self, db, record: dict, payload: bytes) -> None:
        pseudonym = record["pseudonym"]
        self._require_case(db, pseudonym)
        content_hash = hashlib.sha256(payload).hexdigest()
        db.execute(
            "INSERT OR IGNORE INTO clinical_notes "
            "(content_hash, pseudonym, kind, at, code, value, extra_json) "
            "VALUES (?, ?, 'REPORT', ?, ?, ?, ?)",
            (content_hash, pseudonym, record.get("study_date", ""),
             record.get("modality", ""), record.get("report_text", ""),
             json.dumps({"radiologist_id": record.get("radiologist_id", "")},
                        sort_keys=True)))

    def _apply_clinical(self, db, record: dict, payload: bytes) -> None:
        pseudonym = record["pseudonym"]
        self._require_case(db, pseudonym)
        content_hash = hashlib.sha256(payload).hexdigest()
        db.execute(
            "INSERT OR IGNORE INTO clinical_notes "
            "(content_hash, pseudonym, kind, at, code, value, extra_json) "
            "VALUES (?, ?, ?, ?, ?, ?, '{}')",
            (content_hash, pseudonym, record.get("kind", "DIAGNOSIS"),
             record.get("event_date", ""), record.get("code", ""),
             record.get("value", "")))

    def _apply_study_ready(self, db, record: dict) -> None:
        if record.get("kind") != "STUDY_READY":
            return
        pseudonym = record["pseudonym"]
        study_uid = record["study_uid"]
        case = self._require_case(db, pseudonym)
        emitted_at = record.get("emitted_at") or iso_utc(now_utc())
        study = db.execute("SELECT * FROM studies WHERE study_uid = ?",
                           (study_uid,)).fetchone()
        if study is not None:
            # late instances for a known study update the count only
            db.execute("UPDATE studies SET instance_count = ?, last_ready_at = ?"
                       " WHERE study_uid = ?",
                       (record.get("instance_count", 0), emitted_at, study_uid))
            return
        db.execute(
            "INSERT INTO studies (study_uid, pseudonym, modality, study_date, "
            "instance_count, first_ready_at, last_ready_at) "
            "VALUES (?, ?, ?, ?, ?, ?, ?)",
            (study_uid, pseudonym, record.get("modality", ""),
             record.get("study_date", ""), record.get("instance_count", 0),
             emitted_at, emitted_at))
        state = case["state"]
        try:
            new_state = next_state(state, "StudyLinked")
        except IllegalTransition:
            return
        if state == "FOLLOW_UP_SCHEDULED":
            db.execute("UPDATE cases SET next_invite_date = NULL "
                       "WHERE pseudonym = ?", (pseudonym,))
        self._set_state(db, pseudonym, new_state)
        self._history(db, pseudonym, "StudyLinked", emitted_at,
                      {"study_uid": study_uid,
                       "instance_count": record.get("instance_count", 0)})

    def _apply_reading(self, db, record: dict, report: dict) -> None:
        kind = record.get("kind")
        if kind == "ProtocolSubmitted":
            self._apply_protocol(db, record)
        elif kind == "SecondOpinionRequested":
            self._apply_second_opinion_request(db, record)
        elif kind == "ContactClosed":
            self._apply_contact_closed(db, record)
        else:
            report["warnings"].append(f"unknown reading event {kind!r}")

    def _require_study(self, db, study_uid: str):
        study = db.execute("SELECT * FROM studies WHERE study_uid = ?",
                           (study_uid,)).fetchone()
        if study is None:
            raise _Park(f"unknown study {study_uid}")
        return study

    def _reading_state(self, db, case, study) -> str:
        """Current state, re-arming a follow-up case whose unread study
        already linked.

        Replay drains whole topics in sequence, so the StudyLinked transition
        that re-armed a FOLLOW_UP_SCHEDULED case live may have been consumed
        while the case was still AWAITING_READ; re-derive it here so recorded
        reads apply identically. Pure read: the caller persists the state.
        """
        state = case["state"]
        if state == "FOLLOW_UP_SCHEDULED":
            final = db.execute(
                "SELECT 1 FROM protocols WHERE study_uid = ? AND is_final = 1",
                (study["study_uid"],)).fetchone()
            if final is None:
                return next_state(state, "StudyLinked")
        return state

    def _apply_protocol(self, db, record: dict) -> None:
        study = self._require_study(db, record["study_uid"])
        case = self._require_case(db, study["pseudonym"])
        second = bool(record.get("is_second_opinion"))
        event = "SecondOpinionSubmitted" if second else "ProtocolSubmitted"
        try:
            state = self._reading_state(db, case, study)
            new_state = next_state(state, event)
        except IllegalTransition as exc:
            raise _Park(str(exc)) from None
        if state != case["state"]:
            db.execute("UPDATE cases SET next_invite_date = NULL "
                       "WHERE pseudonym = ?", (case["pseudonym"],))
        category = record["lungrads_category"]
        nodules = validate_nodules(record.get("nodules", []))
        check_protocol_rules(category, nodules)
        outcome = map_category_to_outcome(category)
        narrative = generate_narrative(
            study["pseudonym"], study["study_uid"], study["study_date"],
            record["reader_id"], nodules, category, outcome)
        db.execute(
            "INSERT INTO protocols (protocol_id, study_uid, pseudonym, "
            "reader_id, nodules_json, lungrads_category, outcome, narrative, "
            "is_second_opinion, is_final, created_at) "
            "VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, 0, ?)",
            (record["protocol_id"], study["study_uid"], study["pseudonym"],
             record["reader_id"], json.dumps(nodules, sort_keys=True),
             category, outcome, narrative, int(second), record["created_at"]))
        self._set_state(db, study["pseudonym"], new_state)
        self._history(db, study["pseudonym"], event, record["created_at"],
                      {"protocol_id": record["protocol_id"],
                       "study_uid": study["study_uid"],
                       "lungrads_category": category, "outcome": outcome,
                       "reader_id": record["reader_id"]})
        if record.get("finalize"):
            self._finalize(db, study, record, new_state, outcome)

    def _finalize(self, db, study, record: dict, state: str, outcome: str):
        final_state = next_state(state, "Finalized", outcome=outcome)
        db.execute("UPDATE protocols SET is_final = 1 WHERE protocol_id = ?",
                   (record["protocol_id"],))
        pseudonym = study["pseudonym"]
        created_at = record["created_at"]
        detail = {"study_uid": study["study_uid"], "outcome": outcome,
                  "protocol_id": record["protocol_id"]}
        if final_state == "FOLLOW_UP_SCHEDULED":
            read_date = parse_iso_utc(created_at).date()
            invite = (read_date + timedelta(days=self.follow_up_days)).isoformat()
            db.execute("UPDATE cases SET state = ?, next_invite_date = ?, "
                       "updated_at = ? WHERE pseudonym = ?",
                       (final_state, invite, iso_utc(now_utc()), pseudonym))
            detail["next_invite_date"] = invite
        elif final_state == "REFERRED":
            task_id = f"T-{study['study_uid']}"
            db.execute(
                "INSERT OR IGNORE INTO contact_tasks "
                "(task_id, pseudonym, study_uid, created_at, status) "
                "VALUES (?, ?, ?, ?, 'OPEN')",
                (task_id, pseudonym, study["study_uid"], created_at))
            db.execute("UPDATE cases SET state = ?, contact_task_id = ?, "
                       "updated_at = ? WHERE pseudonym = ?",
                       (final_state, task_id, iso_utc(now_utc()), pseudonym))
            detail["contact_task_id"] = task_id
        else:
            self._set_state(db, pseudonym, final_state)
        self._history(db, pseudonym, "Finalized", created_at, detail)

    def _apply_second_opinion_request(self, db, record: dict) -> None:
        study = self._require_study(db, record["study_uid"])
        case = self._require_case(db, study["pseudonym"])
        try:
            state = self._reading_state(db, case, study)
            new_state = next_state(state, "SecondOpinionRequested")
        except IllegalTransition as exc:
            raise _Park(str(exc)) from None
        if state != case["state"]:
            db.execute("UPDATE cases SET next_invite_date = NULL "
                       "WHERE pseudonym = ?", (case["pseudonym"],))
        db.execute("UPDATE studies SET second_opinion_expert = ? "
                   "WHERE study_uid = ?",
                   (record.get("expert_id", ""), study["study_uid"]))
        self._set_state(db, study["pseudonym"], new_state)
        self._history(db, study["pseudonym"], "SecondOpinionRequested",
                      record.get("requested_at") or iso_utc(now_utc()),
                      {"study_uid": study["study_uid"],
                       "expert_id": record.get("expert_id", "")})

    def _apply_contact_closed(self, db, record: dict) -> None:
        task = db.execute("SELECT * FROM contact_tasks WHERE task_id = ?",
                          (record["task_id"],)).fetchone()
        if task is None:
            raise _Park(f"unknown task {record['task_id']}")
        if task["status"] == "DONE":
            return
        db.execute("UPDATE contact_tasks SET status = 'DONE', note = ? "
                   "WHERE task_id = ?",
                   (record.get("note", ""), record["task_id"]))
        self._history(db, task["pseudonym"], "ContactClosed",
                      record.get("closed_at") or iso_utc(now_utc()),
                      {"task_id": record["task_id"]})

    # -- reading actions (validate, append, apply) --------------------------------

    def submit_protocol(self, study_uid: str, reader_id: str,
                        nodules: list[dict], lungrads_category: str, *,
                        is_second_opinion: bool = False,
                        finalize: bool = True) -> dict:
        nodules = validate_nodules(nodules)
        check_protocol_rules(lungrads_category, nodules)
        with self._lock:
            study = self._db.execute(
                "SELECT * FROM studies WHERE study_uid = ?",
                (study_uid,)).fetchone()
            if study is None:
                raise UnknownStudy(f"no study {study_uid}")
            case = self._db.execute(
                "SELECT * FROM cases WHERE pseudonym = ?",
                (study["pseudonym"],)).fetchone()
            final_exists = self._db.execute(
                "SELECT 1 FROM protocols WHERE study_uid = ? AND is_final = 1",
                (study_uid,)).fetchone()
            state = self._reading_state(self._db, case, study)
        if final_exists:
            raise AlreadyFinalized(f"study {study_uid} already has a final read")
        event = "SecondOpinionSubmitted" if is_second_opinion else "ProtocolSubmitted"
        next_state(state, event)  # raises IllegalTransition early
        record = {
            "kind": "ProtocolSubmitted",
            "protocol_id": f"RP-{uuid.uuid4().hex[:12]}",
            "study_uid": study_uid,
            "reader_id": reader_id,
            "nodules": nodules,
            "lungrads_category": lungrads_category,
            "is_second_opinion": is_second_opinion,
            "finalize": finalize,
            "created_at": iso_utc(now_utc()),
        }
        self._append_reading(study_uid, record)
        self.consume_available()
        protocol = self.protocol(record["protocol_id"])
        if protocol is None:
            raise RegistryError("protocol failed to apply")
        return protocol

    def request_second_opinion(self, study_uid: str, expert_id: str) -> dict:
        with self._lock:
            study = self._db.execute(
                "SELECT * FROM studies WHERE study_uid = ?",
                (study_uid,)).fetchone()
            if study is None:
                raise UnknownStudy(f"no study {study_uid}")
            case = self._db.execute(
                "SELECT * FROM cases WHERE pseudonym = ?",
                (study["pseudonym"],)).fetchone()
            state = self._reading_state(self._db, case, study)
        next_state(state, "SecondOpinionRequested")
        record = {
            "kind": "SecondOpinionRequested",
            "study_uid": study_uid,
            "expert_id": expert_id,
            "requested_at": iso_utc(now_utc()),
        }
        self._append_reading(study_uid, record)
        self.consume_available()
        return self.get_case(study["pseudonym"])

    def close_contact_task(self, task_id: str, note: str = "") -> dict:
        with self._lock:
            task = self._db.execute(
                "SELECT * FROM contact_tasks WHERE task_id = ?",
                (task_id,)).fetchone()
        if task is None:
            raise UnknownTask(f"no task {task_id}")
        record = {
            "kind": "ContactClosed",
            "task_id": task_id,
            "note": note,
            "closed_at": iso_utc(now_utc()),
        }
        self._append_reading(task["study_uid"] or task_id, record)
        self.consume_available()
        return self.contact_task(task_id)

    def _append_reading(self, key: str, record: dict) -> None:
        self.queue.append(READING_TOPIC, key.encode(),
                          json.dumps(record, sort_keys=True).encode())

    # -- reads ----------------------------------------------------------------------

    def get_case(self, pseudonym: str) -> dict | None:
        with self._lock:
            case = self._db.execute("SELECT * FROM cases WHERE pseudonym = ?",
                                    (pseudonym,)).fetchone()
            if case is None:
                return None
            studies = self._db.execute(
                "SELECT study_uid FROM studies WHERE pseudonym = ? "
                "ORDER BY study_date, study_uid", (pseudonym,)).fetchall()
            history = self._db.execute(
                "SELECT event, at, detail_json FROM case_history "
                "WHERE pseudonym = ? ORDER BY seq", (pseudonym,)).fetchall()
        return {
            "pseudonym": case["pseudonym"],
            "state": case["state"],
            "birth_year": case["birth_year"],
            "sex": case["sex"],
            "eligibility": json.loads(case["eligibility_json"]),
            "registered_at": case["registered_at"],
            "linked_studies": [s["study_uid"] for s in studies],
            "next_invite_date": case["next_invite_date"],
            "contact_task_id": case["contact_task_id"],
            "history": [{"event": h["event"], "at": h["at"],
                         "detail": json.loads(h["detail_json"])}
                        for h in history],
        }

    def study(self, study_uid: str) -> dict | None:
        with self._lock:
            study = self._db.execute(
                "SELECT * FROM studies WHERE study_uid = ?",
                (study_uid,)).fetchone()
            if study is None:
                return None
            protocols = self._db.execute(
                "SELECT * FROM protocols WHERE study_uid = ? ORDER BY created_at",
                (study_uid,)).fetchall()
        return {
            "study_uid": study["study_uid"],
            "pseudonym": study["pseudonym"],
            "modality": study["modality"],
            "study_date": study["study_date"],
            "instance_count": study["instance_count"],
            "first_ready_at": study["first_ready_at"],
            "second_opinion_expert": study["second_opinion_expert"],
            "protocols": [self._protocol_dict(p) for p in protocols],
        }

    def _protocol_dict(self, row) -> dict:
        return {
            "protocol_id": row["protocol_id"],
            "study_uid": row["study_uid"],
            "pseudonym": row["pseudonym"],
            "reader_id": row["reader_id"],
            "nodules": json.loads(row["nodules_json"]),
            "lungrads_category": row["lungrads_category"],
            "outcome": row["outcome"],
            "narrative": row["narrative"],
            "is_second_opinion": bool(row["is_second_opinion"]),
            "is_final": bool(row["is_final"]),
            "created_at": row["created_at"],
        }

    def protocol(self, protocol_id: str) -> dict | None:
        with self._lock:
            row = self._db.execute(
                "SELECT * FROM protocols WHERE protocol_id = ?",
                (protocol_id,)).fetchone()
        return self._protocol_dict(row) if row else None

    def contact_task(self, task_id: str) -> dict | None:
        with self._lock:
            row = self._db.execute(
                "SELECT * FROM contact_tasks WHERE task_id = ?",
                (task_id,)).fetchone()
        if row is None:
            return None
        return {"task_id": row["task_id"], "pseudonym": row["pseudonym"],
                "study_uid": row["study_uid"], "created_at": row["created_at"],
                "status": row["status"], "note": row["note"]}

    def contact_tasks(self, status: str | None = None) -> list[dict]:
        query = "SELECT task_id FROM contact_tasks"
        args: tuple = ()
        if status is not None:
            query += " WHERE status = ?"
            args = (status,)
        query += " ORDER BY created_at, task_id"
        with self._lock:
            rows = self._db.execute(query, args).fetchall()
        return [self.contact_task(r["task_id"]) for r in rows]

    def worklist(self) -> list[dict]:
        """Unread studies of cases awaiting a first or second read.

        A follow-up case whose linked study has no final read yet re-arms on
        submission, so those studies stay on the list too.
        """
        with self._lock:
            rows = self._db.execute(
                "SELECT s.*, c.state FROM studies s "
                "JOIN cases c ON c.pseudonym = s.pseudonym "
                "WHERE c.state IN ('AWAITING_READ', 'SECOND_OPINION_PENDING', "
                "                  'FOLLOW_UP_SCHEDULED') "
                "AND NOT EXISTS (SELECT 1 FROM protocols p "
                "  WHERE p.study_uid = s.study_uid AND p.is_final = 1) "
                "ORDER BY s.first_ready_at, s.study_uid").fetchall()
            reads = {
                r["study_uid"]: r["n"] for r in self._db.execute(
                    "SELECT study_uid, COUNT(*) AS n FROM protocols "
                    "GROUP BY study_uid")}
        return [{
            "study_uid": row["study_uid"],
            "pseudonym": row["pseudonym"],
            "state": row["state"],
            "modality": row["modality"],
            "study_date": row["study_date"],
            "instance_count": row["instance_count"],
            "ready_at": row["first_ready_at"],
            "second_opinion_expert": row["second_opinion_expert"],
            "read_count": reads.get(row["study_uid"], 0),
        } for row in rows]

    def timeline(self, pseudonym: str) -> list[dict]:
        with self._lock:
            case = self._db.execute("SELECT 1 FROM cases WHERE pseudonym = ?",
                                    (pseudonym,)).fetchone()
            if case is None:
                raise UnknownCase(f"no case {pseudonym}")
            history = self._db.execute(
                "SELECT seq, event, at, detail_json FROM case_history "
                "WHERE pseudonym = ? ORDER BY seq", (pseudonym,)).fetchall()
            notes = self._db.execute(
                "SELECT rowid, kind, at, code, value, extra_json "
                "FROM clinical_notes WHERE pseudonym = ? ORDER BY rowid",
                (pseudonym,)).fetchall()
        entries = []
        for row in history:
            kind = _HISTORY_KINDS[row["event"]]
            entries.append({"kind": kind, "at": row["at"],
                            "detail": json.loads(row["detail_json"]),
                            "_seq": (1, row["seq"])})
        for row in notes:
            kind = "study_report" if row["kind"] == "REPORT" else "clinical_event"
            detail = {"code": row["code"], "value": row["value"],
                      "note_kind": row["kind"]}
            detail.update(json.loads(row["extra_json"] or "{}"))
            entries.append({"kind": kind, "at": row["at"], "detail": detail,
                            "_seq": (0, row["rowid"])})
        entries.sort(key=lambda e: (e["at"], _KIND_PRIORITY[e["kind"]], e["_seq"]))
        for entry in entries:
            del entry["_seq"]
        return entries

    def stats(self) -> dict:
        with self._lock:
            by_state = {state: 0 for state in STATES}
            for row in self._db.execute(
                    "SELECT state, COUNT(*) AS n FROM cases GROUP BY state"):
                by_state[row["state"]] = row["n"]
            finals = self._db.execute(
                "SELECT p.*, s.first_ready_at FROM protocols p "
                "JOIN studies s ON s.study_uid = p.study_uid "
                "WHERE p.is_final = 1").fetchall()
            open_tasks = self._db.execute(
                "SELECT COUNT(*) AS n FROM contact_tasks "
                "WHERE status = 'OPEN'").fetchone()["n"]
        by_category: dict[str, int] = {}
        by_outcome: dict[str, int] = {}
        turnarounds = []
        second = 0
        for row in finals:
            by_category[row["lungrads_category"]] = \
                by_category.get(row["lungrads_category"], 0) + 1
            by_outcome[row["outcome"]] = by_outcome.get(row["outcome"], 0) + 1
            second += int(row["is_second_opinion"])
            delta = (parse_iso_utc(row["created_at"])
                     - parse_iso_utc(row["first_ready_at"]))
            turnarounds.append(delta.total_seconds() / 3600.0)
        n = len(finals)
        return {
            "cases_total": sum(by_state.values()),
            "by_state": by_state,
            "finalized_studies": n,
            "by_category": dict(sorted(by_category.items())),
            "by_outcome": dict(sorted(by_outcome.items())),
            "second_opinion_rate": (second / n) if n else 0.0,
            "mean_turnaround_hours":
                (sum(turnarounds) / n) if n else None,
            "open_contact_tasks": open_tasks,
        }

    # -- export ----------------------------------------------------------------------

    def export_rows(self) -> list[dict]:
        with self._lock:
            rows = self._db.execute(
                "SELECT p.*, s.study_date, s.instance_count FROM protocols p "
                "JOIN studies s ON s.study_uid = p.study_uid "
                "WHERE p.is_final = 1 "
                "ORDER BY p.pseudonym, p.study_uid").fetchall()
        out = []
        for row in rows:
            nodules = json.loads(row["nodules_json"])
            diameters = [n["mean_diameter_mm"] for n in nodules]
            out.append({
                "pseudonym": row["pseudonym"],
                "study_uid": row["study_uid"],
                "study_date": row["study_date"],
                "lungrads_category": row["lungrads_category"],
                "outcome": row["outcome"],
                "nodule_count": len(nodules),
                "max_nodule_diameter_mm": max(diameters) if diameters else None,
                "reader_id": row["reader_id"],
                "second_opinion": bool(row["is_second_opinion"]),
                "instance_count": row["instance_count"],
            })
        with_diameter = [r for r in out if r["max_nodule_diameter_mm"] is not None]
        flags = flag_outliers([r["max_nodule_diameter_mm"] for r in with_diameter])
        for row in out:
            row["outlier_flag"] = False
        for row, flagged in zip(with_diameter, flags):
            row["outlier_flag"] = flagged
        return out

    def export_csv(self) -> tuple[bytes, dict]:
        rows = self.export_rows()
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(EXPORT_HEADER.split(","))
        for row in rows:
            diameter = row["max_nodule_diameter_mm"]
            writer.writerow([
                row["pseudonym"],
                row["study_uid"],
                row["study_date"],
                row["lungrads_category"],
                row["outcome"],
                row["nodule_count"],
                _format_number(diameter) if diameter is not None else "",
                row["reader_id"],
                "true" if row["second_opinion"] else "false",
                "true" if row["outlier_flag"] else "false",
            ])
        manifest = {
            "row_count": len(rows),
            "exported_at": iso_utc(now_utc()),
            "ruleset_version": self.rules.ruleset_version,
            "follow_up_days": self.follow_up_days,
            "rows": [{"study_uid": r["study_uid"],
                      "instance_count": r["instance_count"]} for r in rows],
        }
        return buf.getvalue().encode(), manifest

    # -- idempotency support for the gateway ------------------------------------------

    def idempotency_lookup(self, key: str, request_hash: str,
                           ttl_hours: float) -> tuple[int, str] | str | None:
        """None = unknown key; 'mismatch' = same key, different body."""
        with self._lock:
            row = self._db.execute(
                "SELECT * FROM idempotency WHERE key = ?", (key,)).fetchone()
        if row is None:
            return None
        age = now_utc() - parse_iso_utc(row["created_at"])
        if age.total_seconds() > ttl_hours * 3600.0:
            with self._txn() as db:
                db.execute("DELETE FROM idempotency WHERE key = ?", (key,))
            return None
        if row["request_hash"] != request_hash:
            return "mismatch"
        return row["status_code"], row["response_json"]

    def idempotency_store(self, key: str, request_hash: str, status_code: int,
                          response_json: str) -> None:
        with self._txn() as db:
            db.execute(
                "INSERT OR REPLACE INTO idempotency "
                "(key, request_hash, status_code, response_json, created_at) "
                "VALUES (?, ?, ?, ?, ?)",
                (key, request_hash, status_code, response_json,
                 iso_utc(now_utc())))
