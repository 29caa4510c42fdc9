"""Screening-case state machine and reading-protocol rules.

Pure functions only: the transition table, the category-to-outcome mapping,
nodule validation, and the deterministic narrative template. Persistence and
event plumbing live in the registry module.
"""

from __future__ import annotations

from .errors import ScreenforgeError

STATES = (
    "REGISTERED",
    "INELIGIBLE",
    "ELIGIBLE",
    "IMAGED",
    "AWAITING_READ",
    "SECOND_OPINION_PENDING",
    "READ_DONE",
    "CLOSED_HEALTHY",
    "FOLLOW_UP_SCHEDULED",
    "REFERRED",
)

EVENTS = (
    "Registered",
    "EligibilityChecked",
    "StudyLinked",
    "ProtocolSubmitted",
    "SecondOpinionRequested",
    "SecondOpinionSubmitted",
    "Finalized",
    "ContactClosed",
    "ReInvited",
)

CATEGORIES = ("0", "1", "2", "3", "4A", "4B", "4X")

OUTCOME_NO_SIGNS = "NO_SIGNS"
OUTCOME_SUPERVISION = "MEDICAL_SUPERVISION"
OUTCOME_ADDITIONAL = "ADDITIONAL_EXAMINATION"
OUTCOMES = (OUTCOME_NO_SIGNS, OUTCOME_SUPERVISION, OUTCOME_ADDITIONAL)

NODULE_LOBES = ("RUL", "RML", "RLL", "LUL", "LLL")
NODULE_COMPOSITIONS = ("SOLID", "PART_SOLID", "GROUND_GLASS")

# sentinel targets resolved by the eligible / outcome arguments
_BY_ELIGIBILITY = "<by-eligibility>"
_BY_OUTCOME = "<by-outcome>"

# (state, event) -> target; None state = case does not exist yet
TRANSITIONS: dict[tuple[str | None, str], str] = {
    (None, "Registered"): "REGISTERED",
    ("REGISTERED", "EligibilityChecked"): _BY_ELIGIBILITY,
    ("ELIGIBLE", "EligibilityChecked"): _BY_ELIGIBILITY,
    ("ELIGIBLE", "StudyLinked"): "AWAITING_READ",
    ("AWAITING_READ", "StudyLinked"): "AWAITING_READ",
    ("FOLLOW_UP_SCHEDULED", "StudyLinked"): "AWAITING_READ",
    ("AWAITING_READ", "ProtocolSubmitted"): "READ_DONE",
    ("AWAITING_READ", "SecondOpinionRequested"): "SECOND_OPINION_PENDING",
    ("READ_DONE", "SecondOpinionRequested"): "SECOND_OPINION_PENDING",
    ("SECOND_OPINION_PENDING", "SecondOpinionSubmitted"): "READ_DONE",
    ("READ_DONE", "Finalized"): _BY_OUTCOME,
    ("REFERRED", "ContactClosed"): "REFERRED",
    ("INELIGIBLE", "ReInvited"): "REGISTERED",
    ("FOLLOW_UP_SCHEDULED", "ReInvited"): "ELIGIBLE",
}

OUTCOME_STATES = {
    OUTCOME_NO_SIGNS: "CLOSED_HEALTHY",
    OUTCOME_SUPERVISION: "FOLLOW_UP_SCHEDULED",
    OUTCOME_ADDITIONAL: "REFERRED",
}


class WorkflowError(ScreenforgeError):
    code = "WORKFLOW"


class IllegalTransition(WorkflowError):
    code = "ILLEGAL_TRANSITION"


class BadCategory(WorkflowError):
    code = "BAD_CATEGORY"


class BadNodule(WorkflowError):
    code = "BAD_NODULE"


class CategoryNoduleMismatch(WorkflowError):
    code = "CATEGORY_NODULE_MISMATCH"


def next_state(state: str | None, event: str, *, eligible: bool | None = None,
               outcome: str | None = None) -> str:
    """Resolves the transition table; raises IllegalTransition off-table."""
    if event not in EVENTS:
        raise IllegalTransition(f"unknown event {event!r}")
    target = TRANSITIONS.get((state, event))
    if target is None:
        raise IllegalTransition(f"event {event} not allowed in state {state}")
    if target == _BY_ELIGIBILITY:
        if eligible is None:
            raise IllegalTransition("EligibilityChecked requires a result")
        return "ELIGIBLE" if eligible else "INELIGIBLE"
    if target == _BY_OUTCOME:
        if outcome not in OUTCOME_STATES:
            raise IllegalTransition(f"Finalized requires an outcome, got {outcome!r}")
        return OUTCOME_STATES[outcome]
    return target


def map_category_to_outcome(category: str) -> str:
    if category not in CATEGORIES:
        raise BadCategory(f"unknown category {category!r}")
    if category in ("1", "2"):
        return OUTCOME_NO_SIGNS
    if category in ("0", "3"):
        return OUTCOME_SUPERVISION
    return OUTCOME_ADDITIONAL


def requires_nodules(category: str) -> bool:
    return category in ("3", "4A", "4B", "4X")


def validate_nodules(nodules: list[dict]) -> list[dict]:
    """Returns normalized nodule dicts; large diameters pass, only bounds fail."""
    clean = []
    for i, nodule in enumerate(nodules):
        if not isinstance(nodule, dict):
            raise BadNodule(f"nodule {i} is not an object")
        lobe = str(nodule.get("lobe", "")).upper()
        if lobe not in NODULE_LOBES:
            raise BadNodule(f"nodule {i} has unknown lobe {nodule.get('lobe')!r}")
        composition = str(nodule.get("composition", "")).upper()
        if composition not in NODULE_COMPOSITIONS:
            raise BadNodule(
                f"nodule {i} has unknown composition {nodule.get('composition')!r}")
        try:
            diameter = float(nodule.get("mean_diameter_mm"))
        except (TypeError, ValueError):
            raise BadNodule(f"nodule {i} has no numeric diameter") from None
        if not 0 < diameter < 500:
            raise BadNodule(f"nodule {i} diameter {diameter} outside (0, 500)")
        clean.append({"lobe": lobe, "mean_diameter_mm": diameter,
                      "composition": composition})
    return clean


def check_protocol_rules(category: str, nodules: list[dict]) -> None:
    if category not in CATEGORIES:
        raise BadCategory(f"unknown category {category!r}")
    if requires_nodules(category) and not nodules:
        raise CategoryNoduleMismatch(
            f"category {category} requires at least one nodule")


_OUTCOME_PHRASES = {
    OUTCOME_NO_SIGNS: "No signs of pulmonary malignancy.",
    OUTCOME_SUPERVISION: ("Medical supervision recommended; participant will "
                          "be re-invited after the configured interval."),
    OUTCOME_ADDITIONAL: ("Additional examination required; participant is "
                         "contacted immediately."),
}


def format_diameter(value: float) -> str:
    return f"{value:g}"


def generate_narrative(pseudonym: str, study_uid: str, study_date: str,
                       reader_id: str, nodules: list[dict], category: str,
                       outcome: str) -> str:
    """Deterministic protocol text: same inputs, byte-identical output."""
    lines = [
        f"Screening read for {pseudonym}, study {study_uid}, "
        f"acquired {study_date}.",
        f"Reader: {reader_id}.",
    ]
    if nodules:
        for nodule in nodules:
            lines.append(f"{nodule['lobe']}: {nodule['composition']}, mean "
                         f"diameter {format_diameter(nodule['mean_diameter_mm'])} mm")
    else:
        lines.append("No nodules identified.")
    lines.append(f"Lung-RADS category: {category}.")
    lines.append(f"Assessment: {outcome}. {_OUTCOME_PHRASES[outcome]}")
    return "\n".join(lines) + "\n"
