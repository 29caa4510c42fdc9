"""De-identification: pseudonym vault, DICOM scrubbing, text scrubbing.

Pseudonyms are keyed MACs (HMAC-SHA256) of ``source:external_id`` truncated
to 16 hex chars, escalating to 24 on a vault collision. All records of one
external_id share one pseudonym across source systems: the vault aliases
later (source, external_id) pairs to the first pseudonym rather than deriving
a second one. UIDs remap deterministically into the "2.25." numeric space and
dates shift by a per-patient constant in [-30, +30] days, so intervals and
chronology survive de-identification.

The vault file uses the queue-log frame format and lives under
``<data_root>/vault/``, outside the de-identified data root proper; it is the
one place original identities legitimately persist.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import re
import threading
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path

from .dicom import Dataset, DicomFile, Element, Tag, keyword_of, keyword_to_tag
from .errors import ScreenforgeError
from .qlog import QueueLog
from .util import iso_utc, now_utc

SOURCE_SYSTEMS = ("CRM", "RIS", "EHR", "PACS")
PSEUDONYM_RE = re.compile(r"^P[0-9a-f]{16}(?:[0-9a-f]{8})?$")
UID_RE = re.compile(r"^\d+(\.\d+)*$")

DICOM_ACTIONS = frozenset({"REMOVE", "REPLACE_PSEUDONYM", "BLANK", "KEEP",
                           "DATE_SHIFT", "UID_REMAP"})
TEXT_ACTIONS = frozenset({"DROP", "PSEUDONYM", "YEAR_ONLY", "KEEP",
                          "DATE_SHIFT", "REDACT"})

_PATIENT_NAME = Tag(0x0010, 0x0010)
_PATIENT_ID = Tag(0x0010, 0x0020)
_IDENTITY_REMOVED = Tag(0x0012, 0x0062)
_DEID_METHOD = Tag(0x0012, 0x0063)
DEID_METHOD_LABEL = "keyed-pseudonym-scrub-v1"

REDACTED = "[REDACTED]"


class DeidError(ScreenforgeError):
    code = "DEID"


class DeidRefused(DeidError):
    code = "DEID_REFUSED"


class CollisionExhausted(DeidError):
    code = "COLLISION_EXHAUSTED"


class MalformedUid(DeidError):
    code = "MALFORMED_UID"


class UidCollision(DeidError):
    code = "UID_COLLISION"


class PolicyInvalid(DeidError):
    code = "POLICY_INVALID"


# -- keyed primitives ----------------------------------------------------------

def _mac(key: bytes, data: str) -> bytes:
    return hmac.new(key, data.encode("utf-8"), hashlib.sha256).digest()


def derive_pseudonym(key: bytes, source_system: str, external_id: str,
                     hex_chars: int = 16) -> str:
    return "P" + _mac(key, f"{source_system}:{external_id}").hex()[:hex_chars]


def date_shift_offset(key: bytes, pseudonym: str) -> int:
    """Per-patient day offset in [-30, +30], a pure function of key+pseudonym."""
    value = int.from_bytes(_mac(key, f"{pseudonym}:dateshift"), "big")
    return value % 61 - 30


def remap_uid_value(key: bytes, uid: str) -> str:
    if not uid or len(uid) > 64 or not UID_RE.match(uid):
        raise MalformedUid(f"not a valid UID: {uid!r}")
    digits = str(int.from_bytes(_mac(key, uid), "big"))[:38]
    return "2.25." + digits


def shift_dicom_date(value: str, days: int) -> str:
    """Shift a DA value (YYYYMMDD) or the date part of a DT value."""
    if len(value) < 8:
        return value
    head, rest = value[:8], value[8:]
    try:
        d = date(int(head[0:4]), int(head[4:6]), int(head[6:8]))
    except ValueError:
        return value
    return (d + timedelta(days=days)).strftime("%Y%m%d") + rest


def shift_iso_date(value: str, days: int) -> str:
    """Shift an ISO date or the date part of an ISO datetime string."""
    if len(value) < 10:
        return value
    head, rest = value[:10], value[10:]
    try:
        d = date.fromisoformat(head)
    except ValueError:
        return value
    return (d + timedelta(days=days)).isoformat() + rest


# -- identity vault --------------------------------------------------------------

_TOPIC = "identities"


class Vault:
    """Append-only pseudonym store, keyed and collision-checked.

    Thread-safe: lookups read immutable snapshots under the GIL; writes are
    serialized behind one lock and persisted (fsync) before the pseudonym is
    returned to any caller.
    """

    def __init__(self, root: "Path | str", key: bytes):
        if len(key) != 32:
            raise DeidError(f"vault key must be 32 bytes, got {len(key)}")
        self.key = key
        self._log = QueueLog(Path(root))
        self._lock = threading.Lock()
        self._by_identity: dict[tuple[str, str], str] = {}
        self._by_external: dict[str, str] = {}
        self._by_pseudonym: dict[str, tuple[str, str]] = {}
        self._attributes: dict[str, dict] = {}
        self._uid_map: dict[str, str] = {}
        self._uid_owner: dict[str, str] = {}
        self._load()

    def _load(self) -> None:
        if _TOPIC not in self._log.topics():
            return
        self._log.recover(_TOPIC)
        end = self._log.end_offset(_TOPIC)
        for record in self._log.read(_TOPIC, 0, end):
            entry = json.loads(record.payload.decode("utf-8"))
            if entry.get("kind") == "attributes":
                pseudonym = self._by_identity.get(
                    (entry["source_system"], entry["external_id"]))
                if pseudonym:
                    self._attributes.setdefault(pseudonym, {}).update(
                        entry["attributes"])
                continue
            self._index(entry["source_system"], entry["external_id"],
                        entry["pseudonym"])

    def _index(self, source: str, external_id: str, pseudonym: str) -> None:
        self._by_identity[(source, external_id)] = pseudonym
        self._by_external.setdefault(external_id, pseudonym)
        self._by_pseudonym.setdefault(pseudonym, (source, external_id))

    def _persist(self, payload: dict, key: str) -> None:
        self._log.append(_TOPIC, key.encode("utf-8"),
                         json.dumps(payload, sort_keys=True).encode("utf-8"))

    def identity_count(self) -> int:
        return len(self._by_identity)

    def lookup(self, source_system: str, external_id: str) -> str | None:
        return self._by_identity.get((source_system, external_id))

    def identity_of(self, pseudonym: str) -> tuple[str, str] | None:
        return self._by_pseudonym.get(pseudonym)

    def pseudonymize(self, source_system: str, external_id: str) -> str:
        if source_system not in SOURCE_SYSTEMS:
            raise DeidError(f"unknown source system: {source_system}")
        if not external_id:
            raise DeidRefused("empty external id cannot be pseudonymized")
        hit = self._by_identity.get((source_system, external_id))
        if hit:
            return hit
        with self._lock:
            hit = self._by_identity.get((source_system, external_id))
            if hit:
                return hit
            linked = self._by_external.get(external_id)
            if linked:
                # same external id arriving from another source system keeps
                # the pseudonym it already has, preserving record linkage
                entry = {"kind": "identity", "source_system": source_system,
                         "external_id": external_id, "pseudonym": linked,
                         "created_at": iso_utc(now_utc())}
                self._persist(entry, f"{source_system}:{external_id}")
                self._index(source_system, external_id, linked)
                return linked
            for hex_chars in (16, 24):
                candidate = derive_pseudonym(self.key, source_system,
                                             external_id, hex_chars)
                owner = self._by_pseudonym.get(candidate)
                if owner is None:
                    entry = {"kind": "identity", "source_system": source_system,
                             "external_id": external_id, "pseudonym": candidate,
                             "created_at": iso_utc(now_utc())}
                    self._persist(entry, f"{source_system}:{external_id}")
                    self._index(source_system, external_id, candidate)
                    return candidate
            raise CollisionExhausted(
                f"pseudonym collision at 24 hex chars for {source_system} identity; "
                "refusing to merge distinct identities")

    def record_attributes(self, source_system: str, external_id: str,
                          attributes: dict) -> None:
        """Remember identity strings (name, phone) for later text redaction."""
        pseudonym = self.pseudonymize(source_system, external_id)
        clean = {k: v for k, v in attributes.items() if isinstance(v, str) and v}
        if not clean:
            return
        with self._lock:
            current = self._attributes.setdefault(pseudonym, {})
            if all(current.get(k) == v for k, v in clean.items()):
                return
            self._persist({"kind": "attributes", "source_system": source_system,
                           "external_id": external_id, "attributes": clean},
                          f"attrs:{source_system}:{external_id}")
            current.update(clean)

    def known_strings(self, pseudonym: str) -> list[str]:
        """Identity strings to redact from free text, longest first."""
        strings: set[str] = set()
        identity = self._by_pseudonym.get(pseudonym)
        if identity:
            for (src, ext), p in self._by_identity.items():
                if p == pseudonym:
                    strings.add(ext)
        for value in self._attributes.get(pseudonym, {}).values():
            strings.add(value)
            for token in re.split(r"[,^\s]+", value):
                if len(token) >= 3:
                    strings.add(token)
        return sorted((s for s in strings if len(s) >= 3), key=len, reverse=True)

    def all_identity_strings(self) -> list[str]:
        """Every identity string the vault has seen; leak-scan target list."""
        with self._lock:
            pseudonyms = list(self._by_pseudonym)
        strings: set[str] = set()
        for pseudonym in pseudonyms:
            strings.update(self.known_strings(pseudonym))
        return sorted(strings, key=len, reverse=True)

    def date_shift_offset(self, pseudonym: str) -> int:
        return date_shift_offset(self.key, pseudonym)

    def remap_uid(self, uid: str) -> str:
        hit = self._uid_map.get(uid)
        if hit:
            return hit
        with self._lock:
            hit = self._uid_map.get(uid)
            if hit:
                return hit
            mapped = remap_uid_value(self.key, uid)
            owner = self._uid_owner.get(mapped)
            if owner is not None and owner != uid:
                raise UidCollision(
                    f"remapped UID collision between two distinct source UIDs")
            self._uid_map[uid] = mapped
            self._uid_owner[mapped] = uid
            return mapped

    def close(self) -> None:
        self._log.close()


# -- scrubbing policy --------------------------------------------------------------

@dataclass(frozen=True)
class DeidPolicy:
    rules: dict[Tag, str]
    remove_private_tags: bool = True
    text_rules: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        for tag, action in self.rules.items():
            if action not in DICOM_ACTIONS:
                raise PolicyInvalid(f"unknown action {action} for {tag}")
        for name, action in self.text_rules.items():
            if action not in TEXT_ACTIONS:
                raise PolicyInvalid(f"unknown text action {action} for field {name}")
        for tag in (_PATIENT_NAME, _PATIENT_ID):
            if self.rules.get(tag) != "REPLACE_PSEUDONYM":
                raise PolicyInvalid(
                    f"{keyword_of(tag)} must have rule REPLACE_PSEUDONYM")
        for keyword in ("StudyInstanceUID", "SeriesInstanceUID",
                        "SOPInstanceUID", "FrameOfReferenceUID"):
            if self.rules.get(keyword_to_tag(keyword)) != "UID_REMAP":
                raise PolicyInvalid(f"{keyword} must have rule UID_REMAP")


_TAG_LITERAL = re.compile(r"^\(([0-9a-fA-F]{4}),([0-9a-fA-F]{4})\)$")


def _parse_tag_key(key: str) -> Tag:
    m = _TAG_LITERAL.match(key.strip())
    if m:
        return Tag(int(m.group(1), 16), int(m.group(2), 16))
    return keyword_to_tag(key.strip())


def load_policy(path: "Path | str") -> DeidPolicy:
    import configparser

    cfg = configparser.ConfigParser()
    cfg.optionxform = str  # keep keyword case
    read = cfg.read(str(path))
    if not read:
        raise PolicyInvalid(f"policy file not found: {path}")
    rules: dict[Tag, str] = {}
    if cfg.has_section("dicom"):
        for key, action in cfg["dicom"].items():
            try:
                tag = _parse_tag_key(key)
            except KeyError as err:
                raise PolicyInvalid(str(err)) from None
            rules[tag] = action.strip().upper()
    text_rules = {}
    if cfg.has_section("text"):
        for key, action in cfg["text"].items():
            text_rules[key] = action.strip().upper()
    remove_private = True
    if cfg.has_section("options"):
        remove_private = cfg["options"].getboolean("remove_private_tags", True)
    policy = DeidPolicy(rules=rules, remove_private_tags=remove_private,
                        text_rules=text_rules)
    policy.validate()
    return policy


def default_policy() -> DeidPolicy:
    return load_policy(Path(__file__).parent / "data" / "default_policy.ini")


# -- DICOM scrubbing -----------------------------------------------------------------

def _element_text(el: Element | None) -> str:
    if el is None or not isinstance(el.value, bytes):
        return ""
    return el.value.decode("ascii", errors="replace").rstrip("\x00 ")


def _already_deidentified(ds: Dataset) -> bool:
    marker = _element_text(ds.get(_IDENTITY_REMOVED))
    patient_id = _element_text(ds.get(_PATIENT_ID))
    return marker == "YES" and bool(PSEUDONYM_RE.match(patient_id))


def deid_dicom(f: DicomFile, policy: DeidPolicy, vault: Vault
               ) -> tuple[DicomFile, list[dict]]:
    """Apply the scrubbing policy; returns the scrubbed file and an audit list.

    Idempotent: a file carrying the de-identification marker with a
    pseudonym-shaped PatientID passes through unchanged.
    """
    if _already_deidentified(f.dataset):
        return f, []
    patient_id = _element_text(f.dataset.get(_PATIENT_ID))
    if not patient_id:
        raise DeidRefused("PatientID missing; identity unresolvable")
    pseudonym = vault.pseudonymize("PACS", patient_id)
    offset = vault.date_shift_offset(pseudonym)
    audit: list[dict] = []

    def note(tag: Tag, action: str) -> None:
        audit.append({"tag": str(tag), "keyword": keyword_of(tag), "action": action})

    def scrub(ds: Dataset) -> Dataset:
        out = Dataset()
        for el in ds:
            if el.tag.is_private and policy.remove_private_tags:
                note(el.tag, "REMOVE_PRIVATE")
                continue
            action = policy.rules.get(el.tag, "KEEP")
            if action == "REMOVE":
                note(el.tag, action)
                continue
            if action == "REPLACE_PSEUDONYM":
                out.put(Element(el.tag, el.vr, pseudonym.encode("ascii")))
                note(el.tag, action)
                continue
            if action == "BLANK":
                out.put(Element(el.tag, el.vr, b""))
                note(el.tag, action)
                continue
            if action == "DATE_SHIFT" and isinstance(el.value, bytes):
                text = _element_text(el)
                if text:
                    shifted = "\\".join(shift_dicom_date(p, offset)
                                        for p in text.split("\\"))
                    out.put(Element(el.tag, el.vr, shifted.encode("ascii")))
                    note(el.tag, action)
                else:
                    out.put(el)
                continue
            if action == "UID_REMAP" and isinstance(el.value, bytes):
                text = _element_text(el)
                if text:
                    out.put(Element(el.tag, el.vr,
                                    vault.remap_uid(text).encode("ascii")))
                    note(el.tag, action)
                else:
                    out.put(el)
                continue
            if el.vr == "SQ":
                out.put(Element(el.tag, "SQ", tuple(scrub(item)
                                                    for item in el.items)))
                continue
            out.put(el)
        return out

    body = scrub(f.dataset)
    body.put(Element(_IDENTITY_REMOVED, "CS", b"YES "))
    body.put(Element(_DEID_METHOD, "LO", DEID_METHOD_LABEL.encode("ascii")))
    return DicomFile(preamble=f.preamble, file_meta=f.file_meta, dataset=body,
                     transfer_syntax=f.transfer_syntax), audit


# -- text scrubbing -------------------------------------------------------------------

def redact(text: str, known_strings: list[str]) -> str:
    for s in known_strings:
        pattern = re.compile(r"(?<!\w)" + re.escape(s) + r"(?!\w)", re.IGNORECASE)
        text = pattern.sub(REDACTED, text)
    return text


def _year_field_name(name: str) -> str:
    return name[:-5] + "_year" if name.endswith("_date") else name + "_year"


def deid_text(record: dict, policy: DeidPolicy, vault: Vault,
              source_system: str) -> dict:
    """Scrub one canonical record dict; marks output with ``deid: true``."""
    if record.get("deid") is True:
        return dict(record)
    external_id = record.get("source_external_id")
    if not external_id:
        raise DeidRefused("record has no source_external_id")
    pseudonym = vault.pseudonymize(source_system, str(external_id))
    offset = vault.date_shift_offset(pseudonym)
    known = vault.known_strings(pseudonym)
    out: dict = {"deid": True, "pseudonym": pseudonym}
    for name, value in record.items():
        if name == "deid":
            continue
        action = policy.text_rules.get(name, "KEEP")
        if action in ("DROP", "PSEUDONYM"):
            continue
        if action == "YEAR_ONLY":
            if isinstance(value, str) and len(value) >= 4 and value[:4].isdigit():
                out[_year_field_name(name)] = int(value[:4])
            continue
        if action == "DATE_SHIFT":
            out[name] = shift_iso_date(value, offset) if isinstance(value, str) else value
            continue
        if action == "REDACT":
            out[name] = redact(value, known) if isinstance(value, str) else value
            continue
        out[name] = value
    return out
