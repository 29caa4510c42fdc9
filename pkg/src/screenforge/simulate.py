"""Deterministic synthetic-source generator for desk-scale demos.

Stands in for the external CRM, RIS, EHR, and modality systems: one seed
produces byte-identical CRM CSV, RIS CSV/TXT, EHR JSON/XML, and synthetic CT
instances, plus a ledger.json recording every generated identity and the
expected eligibility split so end-to-end runs can be checked against ground
truth.
"""

from __future__ import annotations

import csv
import io
import json
import random
import struct
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from .dicom import (
    CT_IMAGE_STORAGE,
    Dataset,
    DicomFile,
    Element,
    EXPLICIT_VR_LE,
    serialize,
    tag,
)

FIRST_NAMES = (
    "Anna", "Boris", "Clara", "Dmitri", "Elena", "Felix", "Galina", "Hugo",
    "Inga", "Jakob", "Katya", "Leon", "Marta", "Nikita", "Olga", "Pavel",
    "Rosa", "Stepan", "Tanya", "Viktor",
)
LAST_NAMES = (
    "Abrikosov", "Belov", "Chernova", "Davydov", "Egorova", "Fedorov",
    "Gusev", "Ivanova", "Karpov", "Lebedeva", "Morozov", "Nikitina",
    "Orlov", "Petrova", "Romanov", "Sidorova", "Titov", "Ulanova",
    "Volkov", "Zhukova",
)

LOBE_PHRASES = {
    "RUL": "right upper lobe",
    "RML": "right middle lobe",
    "RLL": "right lower lobe",
    "LUL": "left upper lobe",
    "LLL": "left lower lobe",
}

# profile -> expected eligibility reasons; no-consent rows are quarantined
# at parse so they never become cases at all
_PROFILES = (
    ("eligible", ()),
    ("too_young", ("AGE_RANGE",)),
    ("too_old", ("AGE_RANGE",)),
    ("low_pack_years", ("PACK_YEARS",)),
    ("quit_long_ago", ("QUIT_RECENCY",)),
    ("no_consent", ()),
)
_PROFILE_WEIGHTS = (0.72, 0.07, 0.05, 0.06, 0.05, 0.05)

_UID_ROOT = "1.2.826.0.1.3680043.10.424"

CRM_HEADER = ("external_id,full_name,birth_date,sex,phone,pack_years,"
              "years_since_quit,consent,registered_at")
RIS_HEADER = "accession,external_id,modality,study_date,report_text,radiologist_id"


@dataclass
class SimulationSpec:
    seed: int = 42
    participants: int = 50
    studies_per_eligible: int = 2
    max_instances: int = 3
    anomaly_rate: float = 0.06


@dataclass
class SimulatedStudy:
    study_uid: str
    accession: str
    external_id: str
    study_date: str
    instances: int
    diameter_mm: float | None
    lobe: str | None
    inadequate: bool
    anomalous: bool


@dataclass
class SimulatedParticipant:
    external_id: str
    full_name: str
    dicom_name: str
    birth_date: str
    sex: str
    phone: str
    pack_years: float
    years_since_quit: str
    consent: str
    registered_at: str
    profile: str
    expected_eligible: bool
    expected_reasons: tuple
    studies: list = field(default_factory=list)


def _pick_profile(rng: random.Random):
    roll = rng.random()
    acc = 0.0
    for (name, reasons), weight in zip(_PROFILES, _PROFILE_WEIGHTS):
        acc += weight
        if roll < acc:
            return name, reasons
    return _PROFILES[0]


def _make_participant(rng: random.Random, index: int) -> SimulatedParticipant:
    profile, reasons = _pick_profile(rng)
    first = rng.choice(FIRST_NAMES)
    last = rng.choice(LAST_NAMES)
    sex = "F" if first.endswith("a") else "M"
    # ages sit well inside / outside the 50..80 window so the expected
    # eligibility cannot flip with the ingestion date
    if profile == "too_young":
        age = rng.randint(30, 42)
    elif profile == "too_old":
        age = rng.randint(85, 95)
    else:
        age = rng.randint(55, 75)
    birth = date(2024 - age, rng.randint(1, 12), rng.randint(1, 28))
    pack_years = (rng.randint(0, 12) if profile == "low_pack_years"
                  else rng.randint(22, 60))
    if profile == "quit_long_ago":
        quit_value = str(rng.randint(20, 30))
    elif rng.random() < 0.5:
        quit_value = "current"
    else:
        quit_value = str(rng.randint(0, 10))
    consent = "N" if profile == "no_consent" else "Y"
    month = rng.randint(1, 3)
    registered = (f"2024-{month:02d}-{rng.randint(1, 28):02d}"
                  f"T{rng.randint(8, 17):02d}:00:00Z")
    expected_eligible = profile == "eligible"
    return SimulatedParticipant(
        external_id=f"EXT-{index:05d}",
        full_name=f"{last}, {first}",
        dicom_name=f"{last}^{first}",
        birth_date=birth.isoformat(),
        sex=sex,
        phone=f"+7915{rng.randint(1000000, 9999999)}",
        pack_years=float(pack_years),
        years_since_quit=quit_value,
        consent=consent,
        registered_at=registered,
        profile=profile,
        expected_eligible=expected_eligible,
        expected_reasons=reasons,
    )


def _make_studies(rng: random.Random, p: SimulatedParticipant, index: int,
                  spec: SimulationSpec) -> list[SimulatedStudy]:
    # every round before the last must resolve to a re-invitation (an
    # indeterminate nodule or an inadequate scan), otherwise the case would
    # close while later rounds are still unread
    studies = []
    base = date(2024, 4, 1) + timedelta(days=rng.randint(0, 40))
    for j in range(spec.studies_per_eligible):
        study_date = base + timedelta(days=30 * j + rng.randint(0, 9))
        last = j == spec.studies_per_eligible - 1
        inadequate = False
        anomalous = False
        if not last:
            if rng.random() < 0.25:
                inadequate = True
                diameter: float | None = None
            else:
                diameter = round(rng.uniform(6.2, 7.8), 1)
        elif rng.random() < spec.anomaly_rate:
            anomalous = True
            diameter = float(rng.randint(30, 90))
        elif rng.random() < 0.45:
            diameter = round(rng.uniform(3.0, 18.0), 1)
        else:
            diameter = None
        lobe = rng.choice(sorted(LOBE_PHRASES)) if diameter else None
        studies.append(SimulatedStudy(
            study_uid=f"{_UID_ROOT}.{spec.seed}.{index}.{j + 1}",
            accession=f"A-2024-{index:04d}{j}",
            external_id=p.external_id,
            study_date=study_date.isoformat(),
            instances=rng.randint(1, spec.max_instances),
            diameter_mm=diameter,
            lobe=lobe,
            inadequate=inadequate,
            anomalous=anomalous,
        ))
    return studies


def _pixel_data(rng: random.Random, diameter_mm: float | None) -> bytes:
    size = 32
    values = [[rng.uniform(850.0, 950.0) for _ in range(size)]
              for _ in range(size)]
    img = np.array(values, dtype=np.float64)
    if diameter_mm:
        cx = rng.uniform(10.0, 22.0)
        cy = rng.uniform(10.0, 22.0)
        sigma = max(min(diameter_mm, 30.0) / 2.355, 0.8)
        yy, xx = np.mgrid[0:size, 0:size]
        img += 2200.0 * np.exp(-(((xx - cx) ** 2 + (yy - cy) ** 2)
                                 / (2.0 * sigma * sigma)))
    return np.clip(img, 0, 4095).astype("<u2").tobytes()


def _text(group: int, element: int, vr: str, value: str) -> Element:
    return Element(tag(group, element), vr, value.encode("ascii"))


def _us(group: int, element: int, value: int) -> Element:
    return Element(tag(group, element), "US", struct.pack("<H", value))


def _instance(rng: random.Random, p: SimulatedParticipant,
              study: SimulatedStudy, number: int) -> bytes:
    dicom_date = study.study_date.replace("-", "")
    elements = [
        _text(0x0008, 0x0016, "UI", CT_IMAGE_STORAGE),
        _text(0x0008, 0x0018, "UI", f"{study.study_uid}.1.{number}"),
        _text(0x0008, 0x0020, "DA", dicom_date),
        _text(0x0008, 0x0050, "SH", study.accession),
        _text(0x0008, 0x0060, "CS", "CT"),
        _text(0x0008, 0x0080, "LO", "City Clinical Hospital 1"),
        _text(0x0010, 0x0010, "PN", p.dicom_name),
        _text(0x0010, 0x0020, "LO", p.external_id),
        _text(0x0010, 0x0030, "DA", p.birth_date.replace("-", "")),
        _text(0x0010, 0x0040, "CS", p.sex),
        _text(0x0020, 0x000D, "UI", study.study_uid),
        _text(0x0020, 0x000E, "UI", f"{study.study_uid}.1"),
        _text(0x0020, 0x0011, "IS", "1"),
        _text(0x0020, 0x0013, "IS", str(number)),
        _us(0x0028, 0x0002, 1),
        _text(0x0028, 0x0004, "CS", "MONOCHROME2"),
        _us(0x0028, 0x0010, 32),
        _us(0x0028, 0x0011, 32),
        _text(0x0028, 0x0030, "DS", "1\\1"),
        _us(0x0028, 0x0100, 16),
        _us(0x0028, 0x0101, 16),
        _us(0x0028, 0x0102, 15),
        _us(0x0028, 0x0103, 0),
        _text(0x0028, 0x1050, "DS", "1500"),
        _text(0x0028, 0x1051, "DS", "3000"),
        Element(tag(0x7FE0, 0x0010), "OW",
                _pixel_data(rng, study.diameter_mm)),
    ]
    f = DicomFile(preamble=b"\x00" * 128, file_meta=Dataset(),
                  dataset=Dataset(elements), transfer_syntax=EXPLICIT_VR_LE)
    return serialize(f)


def _report_text(study: SimulatedStudy) -> str:
    if study.inadequate:
        return "Technically inadequate examination; repeat acquisition advised."
    if study.diameter_mm is None:
        return "No nodules identified."
    phrase = LOBE_PHRASES[study.lobe]
    return (f"Solid nodule in the {phrase}, mean diameter "
            f"{study.diameter_mm:g} mm.")


def generate(spec: SimulationSpec, out_dir: Path) -> dict:
    """Writes all source files under out_dir; returns the ledger."""
    rng = random.Random(spec.seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    dicom_dir = out_dir / "dicom"
    dicom_dir.mkdir(exist_ok=True)

    participants = [_make_participant(rng, i + 1)
                    for i in range(spec.participants)]
    for i, p in enumerate(participants):
        if p.expected_eligible:
            p.studies = _make_studies(rng, p, i + 1, spec)

    crm = io.StringIO()
    writer = csv.writer(crm, lineterminator="\n")
    writer.writerow(CRM_HEADER.split(","))
    for p in participants:
        writer.writerow([p.external_id, p.full_name, p.birth_date, p.sex,
                         p.phone, f"{p.pack_years:g}", p.years_since_quit,
                         p.consent, p.registered_at])
    (out_dir / "crm.csv").write_text(crm.getvalue())

    ris_rows = [(s, p) for p in participants for s in p.studies]
    ris_csv = io.StringIO()
    writer = csv.writer(ris_csv, lineterminator="\n")
    writer.writerow(RIS_HEADER.split(","))
    radiologists = {}
    for study, p in ris_rows:
        radiologists[study.accession] = f"R-{rng.randint(1, 9):02d}"
        writer.writerow([study.accession, p.external_id, "CT",
                         study.study_date, _report_text(study),
                         radiologists[study.accession]])
    (out_dir / "ris.csv").write_text(ris_csv.getvalue())

    blocks = []
    for study, p in ris_rows:
        blocks.append("\n".join([
            f"ACCESSION: {study.accession}",
            f"PATIENT: {p.external_id}",
            "MODALITY: CT",
            f"DATE: {study.study_date}",
            f"REPORT: {_report_text(study)}",
            f"RADIOLOGIST: {radiologists[study.accession]}",
        ]))
    (out_dir / "ris.txt").write_text("\n\n".join(blocks) + "\n")

    events = []
    for p in participants:
        for _ in range(rng.randint(1, 2)):
            kind = rng.choice(["DIAGNOSIS", "VITALS"])
            if kind == "DIAGNOSIS":
                code, value = rng.choice([
                    ("J44.9", "chronic obstructive pulmonary disease"),
                    ("Z87.891", "history of nicotine dependence"),
                    ("I10", "essential hypertension"),
                ])
            else:
                code, value = rng.choice([
                    ("weight_kg", str(rng.randint(52, 110))),
                    ("spo2_pct", str(rng.randint(91, 99))),
                ])
            events.append({
                "patient_id": p.external_id,
                "date": (f"2024-{rng.randint(1, 5):02d}"
                         f"-{rng.randint(1, 28):02d}"),
                "kind": kind,
                "code": code,
                "value": value,
            })
    (out_dir / "ehr.json").write_text(json.dumps(events, indent=2) + "\n")

    root = ET.Element("events")
    for event in events:
        ET.SubElement(root, "event", dict(event))
    ET.indent(root)
    (out_dir / "ehr.xml").write_text(
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        + ET.tostring(root, encoding="unicode") + "\n")

    study_count = 0
    instance_count = 0
    for p in participants:
        for study in p.studies:
            study_count += 1
            for number in range(1, study.instances + 1):
                instance_count += 1
                data = _instance(rng, p, study, number)
                name = f"{study.study_uid}.{number}.dcm"
                (dicom_dir / name).write_bytes(data)

    ledger = {
        "seed": spec.seed,
        "participants": [{
            "external_id": p.external_id,
            "full_name": p.full_name,
            "phone": p.phone,
            "birth_date": p.birth_date,
            "profile": p.profile,
            "expected_case": p.profile != "no_consent",
            "expected_eligible": p.expected_eligible,
            "expected_reasons": list(p.expected_reasons),
            "studies": [{
                "study_uid": s.study_uid,
                "accession": s.accession,
                "study_date": s.study_date,
                "instances": s.instances,
                "diameter_mm": s.diameter_mm,
                "lobe": s.lobe,
                "inadequate": s.inadequate,
                "anomalous": s.anomalous,
            } for s in p.studies],
        } for p in participants],
        "counts": {
            "participants": len(participants),
            "expected_eligible": sum(p.expected_eligible
                                     for p in participants),
            "studies": study_count,
            "instances": instance_count,
            "anomalous_studies": sum(
                s.anomalous for p in participants for s in p.studies),
        },
    }
    (out_dir / "ledger.json").write_text(
        json.dumps(ledger, indent=2, sort_keys=True) + "\n")
    return ledger
