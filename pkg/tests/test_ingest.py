"""Harmonization, eligibility, and connector pipeline tests."""

import json
import shutil
from datetime import date
from pathlib import Path

import pytest

from screenforge.config import EligibilityRules
from screenforge.deid import Vault, default_policy
from screenforge.ingest import (
    CanonicalClinicalEvent,
    CanonicalParticipant,
    Connector,
    QuarantineEntry,
    RawSourceRecord,
    check_eligibility,
    harmonize_ehr,
    harmonize_participant,
    harmonize_ris,
    normalize_date,
    split_rows,
)
from screenforge.qlog import QueueError, QueueLog

DOCS = Path(__file__).parent.parent / "docs" / "formats"
ZERO_KEY = bytes(32)
AS_OF = date(2024, 6, 1)
RULES = EligibilityRules()

SPEC_ROW = b"1007,Doe^Jane,1962-03-05,F,+79000000000,30,0,Y,2024-05-01T10:00:00Z"


def crm_raw(line: bytes) -> RawSourceRecord:
    return RawSourceRecord("CRM", "CSV", "test", line, "2024-06-01T00:00:00.000Z")


def participant(**overrides) -> CanonicalParticipant:
    base = dict(source_external_id="1", full_name="X", birth_date="1964-06-01",
                sex="F", phone="", smoking_pack_years=30.0,
                years_since_quit="current", consent=True,
                registered_at="2024-05-01T10:00:00.000Z")
    base.update(overrides)
    return CanonicalParticipant(**base)


# -- date handling ---------------------------------------------------------------

def test_normalize_date_formats():
    assert normalize_date("1962-03-05") == "1962-03-05"
    assert normalize_date("05/03/1962") == "1962-03-05"
    assert normalize_date("15.07.1979") == "1979-07-15"
    assert normalize_date(" 1962-03-05 ") == "1962-03-05"
    assert normalize_date("31/02/2001") is None
    assert normalize_date("yesterday") is None
    assert normalize_date("") is None


# -- crm harmonization --------------------------------------------------------------

def test_harmonize_participant_example_row():
    p = harmonize_participant(crm_raw(SPEC_ROW))
    assert isinstance(p, CanonicalParticipant)
    assert p.source_external_id == "1007"
    assert p.smoking_pack_years == 30.0
    assert p.years_since_quit == 0.0
    assert p.consent is True
    assert p.birth_date == "1962-03-05"


def test_harmonize_participant_rejections():
    cases = {
        b"1007,Doe,1962-03-05,F,p,30,0": "MISSING_COLUMN",
        b",Doe,1962-03-05,F,p,30,0,Y,2024-05-01T10:00:00Z": "MISSING_FIELD",
        b"1,Doe,tomorrow,F,p,30,0,Y,2024-05-01T10:00:00Z": "BAD_DATE",
        b"1,Doe,2991-01-01,F,p,30,0,Y,2024-05-01T10:00:00Z": "BAD_DATE",
        b"1,Doe,1962-03-05,F,p,many,0,Y,2024-05-01T10:00:00Z": "BAD_NUMBER",
        b"1,Doe,1962-03-05,F,p,-3,0,Y,2024-05-01T10:00:00Z": "BAD_NUMBER",
        b"1,Doe,1962-03-05,F,p,30,soon,Y,2024-05-01T10:00:00Z": "BAD_NUMBER",
        b"1,Doe,1962-03-05,F,p,30,0,N,2024-05-01T10:00:00Z": "CONSENT_ABSENT",
        b"1,Doe,1962-03-05,F,p,30,0,maybe,2024-05-01T10:00:00Z": "BAD_CONSENT",
        b"1,Doe,1962-03-05,F,p,30,0,Y,around noon": "BAD_TIMESTAMP",
    }
    for line, reason in cases.items():
        out = harmonize_participant(crm_raw(line))
        assert isinstance(out, QuarantineEntry), line
        assert out.reason == reason, line


def test_harmonize_participant_alternate_date():
    p = harmonize_participant(crm_raw(
        b"1,Doe,05/03/1962,F,p,30,0,Y,2024-05-01T10:00:00Z"))
    assert p.birth_date == "1962-03-05"


def test_harmonize_participant_keeps_outliers():
    p = harmonize_participant(crm_raw(
        b"1,Doe,1962-03-05,F,p,300,0,Y,2024-05-01T10:00:00Z"))
    assert isinstance(p, CanonicalParticipant)
    assert p.smoking_pack_years == 300.0


def test_harmonize_participant_sex_fallback():
    p = harmonize_participant(crm_raw(
        b"1,Doe,1962-03-05,x,p,30,0,Y,2024-05-01T10:00:00Z"))
    assert p.sex == "U"


# -- eligibility ----------------------------------------------------------------------

def test_eligible_all_rules_pass():
    r = check_eligibility(participant(), RULES, AS_OF)  # age 60, current smoker
    assert r.eligible is True and r.reasons == ()
    assert r.ruleset_version == RULES.ruleset_version


def test_age_out_of_range():
    r = check_eligibility(participant(birth_date="1979-06-01"), RULES, AS_OF)
    assert r.eligible is False and r.reasons == ("AGE_RANGE",)


def test_age_boundaries_inclusive():
    at_50 = check_eligibility(participant(birth_date="1974-06-01"), RULES, AS_OF)
    assert at_50.eligible is True
    at_80 = check_eligibility(participant(birth_date="1944-06-01"), RULES, AS_OF)
    assert at_80.eligible is True
    day_before_50 = check_eligibility(
        participant(birth_date="1974-06-02"), RULES, AS_OF)
    assert day_before_50.reasons == ("AGE_RANGE",)
    at_81 = check_eligibility(participant(birth_date="1943-06-01"), RULES, AS_OF)
    assert at_81.reasons == ("AGE_RANGE",)


def test_pack_years_rule():
    r = check_eligibility(participant(smoking_pack_years=19.9), RULES, AS_OF)
    assert r.reasons == ("PACK_YEARS",)
    assert check_eligibility(
        participant(smoking_pack_years=20.0), RULES, AS_OF).eligible


def test_quit_recency_rule():
    assert check_eligibility(
        participant(years_since_quit=15.0), RULES, AS_OF).eligible
    r = check_eligibility(participant(years_since_quit=15.1), RULES, AS_OF)
    assert r.reasons == ("QUIT_RECENCY",)


def test_reasons_accumulate_in_order():
    r = check_eligibility(
        participant(birth_date="1990-01-01", smoking_pack_years=1.0,
                    years_since_quit=20.0, consent=False), RULES, AS_OF)
    assert r.reasons == ("AGE_RANGE", "PACK_YEARS", "QUIT_RECENCY", "CONSENT")


# -- splitting -------------------------------------------------------------------------

def test_split_csv_rows():
    payload = (DOCS / "crm_example.csv").read_bytes()
    rows = split_rows("CRM", "CSV", "f.csv", payload, "2024-06-01T00:00:00.000Z")
    assert isinstance(rows, list) and len(rows) == 4
    assert rows[0].payload.startswith(b"1007,")
    assert rows[0].origin == "f.csv#row2"


def test_split_rejects_bad_header():
    out = split_rows("CRM", "CSV", "f.csv", b"id,name\n1,X\n", "t")
    assert isinstance(out, QuarantineEntry)
    assert out.reason == "BAD_HEADER"


def test_split_txt_blocks():
    payload = (DOCS / "ris_example.txt").read_bytes()
    rows = split_rows("RIS", "TXT", "f.txt", payload, "t")
    assert len(rows) == 2
    assert rows[0].payload.startswith(b"ACCESSION: A-2024-0001")


def test_split_empty_file():
    assert split_rows("CRM", "CSV", "f.csv", b"", "t") == []


# -- cross-format equivalence ---------------------------------------------------------

def test_ris_csv_txt_equivalence():
    csv_rows = split_rows("RIS", "CSV", "a", (DOCS / "ris_example.csv").read_bytes(), "t")
    txt_rows = split_rows("RIS", "TXT", "b", (DOCS / "ris_example.txt").read_bytes(), "t")
    csv_out = [harmonize_ris(r) for r in csv_rows]
    txt_out = [harmonize_ris(r) for r in txt_rows]
    assert csv_out == txt_out
    assert csv_out[0].accession == "A-2024-0001"
    assert csv_out[0].report_text.endswith("7.5 mm.")


def test_ehr_json_xml_equivalence():
    j = harmonize_ehr(RawSourceRecord("EHR", "JSON", "a",
                                      (DOCS / "ehr_example.json").read_bytes(), "t"))
    x = harmonize_ehr(RawSourceRecord("EHR", "XML", "b",
                                      (DOCS / "ehr_example.xml").read_bytes(), "t"))
    assert j == x
    assert len(j) == 3
    assert j[0] == CanonicalClinicalEvent("1007", "2024-05-20", "DIAGNOSIS",
                                          "J44.9",
                                          "chronic obstructive pulmonary disease")


def test_ehr_empty_array():
    out = harmonize_ehr(RawSourceRecord("EHR", "JSON", "a", b"[]", "t"))
    assert out == []


def test_ehr_bad_documents():
    for payload in (b"{not json", b'{"patient_id": "1"}',
                    b'[{"patient_id": "", "date": "2024-01-01", "kind": "VITALS"}]',
                    b'[{"patient_id": "1", "date": "x", "kind": "VITALS"}]',
                    b'[{"patient_id": "1", "date": "2024-01-01", "kind": "MOOD"}]'):
        out = harmonize_ehr(RawSourceRecord("EHR", "JSON", "a", payload, "t"))
        assert isinstance(out, QuarantineEntry)
        assert out.reason == "BAD_DOCUMENT"


def test_ris_missing_fields():
    out = harmonize_ris(RawSourceRecord(
        "RIS", "CSV", "a", b",1007,CT,2024-06-01,text,R-1", "t"))
    assert isinstance(out, QuarantineEntry) and out.reason == "MISSING_FIELD"


# -- connector pipeline --------------------------------------------------------------

@pytest.fixture
def env(tmp_path):
    queue = QueueLog(tmp_path / "queue")
    vault = Vault(tmp_path / "vault", ZERO_KEY)
    policy = default_policy()
    yield tmp_path, queue, vault, policy
    vault.close()
    queue.close()


def connector(env, source) -> Connector:
    root, queue, vault, policy = env
    return Connector(source, root, queue, vault, policy, RULES)


def drop(root: Path, source: str, fixture: str):
    inbox = root / "inbox" / source.lower()
    inbox.mkdir(parents=True, exist_ok=True)
    shutil.copy(DOCS / fixture, inbox / fixture)


def drain(queue: QueueLog, topic: str) -> list[dict]:
    records = queue.read(topic, 0, 10000)
    return [json.loads(r.payload) for r in records]


def test_crm_pipeline(env):
    root, queue, vault, _ = env
    crm = connector(env, "CRM")
    drop(root, "CRM", "crm_example.csv")
    report = crm.poll_once()
    assert report.files == 1
    assert report.rows == 4
    assert report.published == 3
    assert report.quarantined == 1
    assert report.reasons == ["CONSENT_ABSENT"]
    assert report.rows == report.published + report.quarantined

    payloads = drain(queue, "participants")
    assert len(payloads) == 3
    first = payloads[0]
    assert first["deid"] is True
    assert first["pseudonym"] == "P4f9c609da20ad10f"  # frozen CRM:1007 value
    assert first["birth_year"] == 1962
    assert "full_name" not in first and "phone" not in first
    assert first["eligibility"]["eligible"] is True
    assert first["record_kind"] == "participant"
    # 1009 is 44 years old with 10 pack-years
    third = payloads[2]
    assert third["eligibility"]["reasons"] == ["AGE_RANGE", "PACK_YEARS"]

    keys = [r.key for r in queue.read("participants", 0, 100)]
    assert keys[0] == b"P4f9c609da20ad10f"

    assert not any(p.suffix == ".csv" for p in (root / "inbox" / "crm").iterdir()
                   if p.is_file())
    assert (root / "inbox" / "crm" / "done" / "crm_example.csv").exists()
    entries = list((root / "quarantine").glob("*.json"))
    assert len(entries) == 1
    assert json.loads(entries[0].read_text())["reason"] == "CONSENT_ABSENT"


def test_redrop_is_idempotent(env):
    root, queue, _, _ = env
    crm = connector(env, "CRM")
    drop(root, "CRM", "crm_example.csv")
    crm.poll_once()
    before = queue.end_offset("participants")
    drop(root, "CRM", "crm_example.csv")
    report = crm.poll_once()
    assert report.duplicate_files == 1
    assert report.published == 0
    assert queue.end_offset("participants") == before
    assert len(list((root / "quarantine").glob("*.json"))) == 1


def test_ris_pipeline_links_pseudonyms(env):
    root, queue, vault, _ = env
    crm = connector(env, "CRM")
    ris = connector(env, "RIS")
    drop(root, "CRM", "crm_example.csv")
    crm.poll_once()
    drop(root, "RIS", "ris_example.csv")
    report = ris.poll_once()
    assert report.published == 2 and report.quarantined == 0

    participants = {p["pseudonym"] for p in drain(queue, "participants")}
    reports = drain(queue, "ris-protocols")
    assert {r["pseudonym"] for r in reports} <= participants
    assert all("accession" not in r for r in reports)
    assert all(r["record_kind"] == "study_report" for r in reports)


def test_ris_report_redaction(env):
    root, queue, _, _ = env
    crm = connector(env, "CRM")
    ris = connector(env, "RIS")
    drop(root, "CRM", "crm_example.csv")
    crm.poll_once()
    body = (b"accession,external_id,modality,study_date,report_text,radiologist_id\n"
            b'A-9,1007,CT,2024-06-01,"Discussed with Doe, Jane on +79000000000.",R-1\n')
    ris.ingest_bytes("CSV", body, "push-1")
    reports = drain(queue, "ris-protocols")
    assert len(reports) == 1
    text = reports[0]["report_text"]
    for leaked in ("Doe", "Jane", "+79000000000", "1007"):
        assert leaked not in text
    assert "[REDACTED]" in text


def test_ris_duplicate_accession(env):
    root, queue, _, _ = env
    ris = connector(env, "RIS")
    body = (b"accession,external_id,modality,study_date,report_text,radiologist_id\n"
            b"A-1,1007,CT,2024-06-01,first.,R-1\n"
            b"A-1,1008,CT,2024-06-02,second.,R-1\n")
    report = ris.ingest_bytes("CSV", body, "push-1")
    assert report.published == 1
    assert report.quarantined == 1
    assert report.reasons == ["DUP_ACCESSION"]


def test_crm_duplicate_external_id(env):
    root, queue, _, _ = env
    crm = connector(env, "CRM")
    header = b"external_id,full_name,birth_date,sex,phone,pack_years,years_since_quit,consent,registered_at\n"
    body = header + SPEC_ROW + b"\n" + SPEC_ROW + b"\n"
    report = crm.ingest_bytes("CSV", body, "push-1")
    assert report.published == 1
    assert report.reasons == ["DUP_EXTERNAL_ID"]


def test_ehr_pipeline_fans_out(env):
    root, queue, _, _ = env
    ehr = connector(env, "EHR")
    drop(root, "EHR", "ehr_example.json")
    report = ehr.poll_once()
    assert report.rows == 1
    assert report.published == 3
    events = drain(queue, "ehr-events")
    assert len(events) == 3
    assert {e["kind"] for e in events} == {"DIAGNOSIS", "VITALS"}
    assert all(e["record_kind"] == "clinical_event" for e in events)
    assert all("patient_id" not in e for e in events)


def test_ehr_xml_same_topic_content(env):
    root, queue, _, _ = env
    ehr = connector(env, "EHR")
    drop(root, "EHR", "ehr_example.json")
    ehr.poll_once()
    json_events = drain(queue, "ehr-events")
    drop(root, "EHR", "ehr_example.xml")
    ehr.poll_once()
    xml_events = drain(queue, "ehr-events")[len(json_events):]
    assert xml_events == json_events


def test_unsupported_extension_quarantines(env):
    root, queue, _, _ = env
    crm = connector(env, "CRM")
    inbox = root / "inbox" / "crm"
    (inbox / "image.bmp").write_bytes(b"BM\x00\x00")
    report = crm.poll_once()
    assert report.quarantined == 1
    assert report.reasons == ["BAD_FORMAT"]
    assert (inbox / "done" / "image.bmp").exists()


def test_retry_buffer_never_drops(env, monkeypatch):
    root, queue, _, _ = env
    crm = connector(env, "CRM")
    real_append = queue.append
    calls = {"n": 0}

    def flaky(topic, key, payload):
        calls["n"] += 1
        if calls["n"] == 1:
            raise QueueError("injected failure")
        return real_append(topic, key, payload)

    monkeypatch.setattr(queue, "append", flaky)
    header = b"external_id,full_name,birth_date,sex,phone,pack_years,years_since_quit,consent,registered_at\n"
    crm.ingest_bytes("CSV", header + SPEC_ROW + b"\n", "push-1")
    assert "participants" not in queue.topics()
    held = list((root / "retry" / "participants").glob("*.json"))
    assert len(held) == 1
    assert crm.flush_retries() == 1
    assert len(drain(queue, "participants")) == 1
    assert list((root / "retry" / "participants").glob("*.json")) == []
