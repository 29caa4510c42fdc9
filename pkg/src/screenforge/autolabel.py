"""Deterministic reader bot that drives the HTTP API.

Clears the worklist the way an interactive reader would: it looks up the
paired radiology report in the participant timeline, extracts the measured
nodule, maps it to a Lung-RADS category with fixed size thresholds, and
submits the reading protocol over HTTP. A seeded fraction of studies takes
the second-opinion detour instead of a direct final read. Only the public
API is used, so a full run exercises the same surface as the web UI.
"""

from __future__ import annotations

import hashlib
import re
from collections import Counter

import httpx

LOBE_PHRASES = {
    "right upper lobe": "RUL",
    "right middle lobe": "RML",
    "right lower lobe": "RLL",
    "left upper lobe": "LUL",
    "left lower lobe": "LLL",
}

_DIAMETER_RE = re.compile(r"mean diameter ([0-9.]+) mm")


class AutoLabelError(RuntimeError):
    pass


def category_for(diameter_mm: float | None, *,
                 inadequate: bool = False) -> str:
    """Fixed size-threshold mapping from one measured nodule to a category."""
    if inadequate:
        return "0"
    if diameter_mm is None:
        return "1"
    if diameter_mm < 6.0:
        return "2"
    if diameter_mm < 8.0:
        return "3"
    if diameter_mm < 15.0:
        return "4A"
    if diameter_mm < 40.0:
        return "4B"
    return "4X"


def parse_report(text: str) -> dict:
    """Pulls the measurement back out of free-text report prose."""
    lowered = text.lower()
    if "inadequate" in lowered:
        return {"diameter_mm": None, "lobe": None, "inadequate": True}
    m = _DIAMETER_RE.search(text)
    if m is None:
        return {"diameter_mm": None, "lobe": None, "inadequate": False}
    lobe = None
    for phrase, code in LOBE_PHRASES.items():
        if phrase in lowered:
            lobe = code
            break
    return {"diameter_mm": float(m.group(1)), "lobe": lobe or "RUL",
            "inadequate": False}


def wants_second_opinion(seed: int, study_uid: str, rate: float) -> bool:
    """Order-independent per-study draw so reruns pick the same studies."""
    digest = hashlib.sha256(f"{seed}:{study_uid}".encode()).digest()
    return digest[0] / 256.0 < rate


class AutoLabeler:
    def __init__(self, base_url: str, token: str, *, seed: int = 0,
                 second_opinion_rate: float = 0.15,
                 reader_id: str = "R-AUTO", expert_id: str = "E-AUTO",
                 timeout: float = 30.0, client: httpx.Client | None = None):
        self.base = base_url.rstrip("/")
        self.seed = seed
        self.rate = second_opinion_rate
        self.reader_id = reader_id
        self.expert_id = expert_id
        self._owns_client = client is None
        self.client = client or httpx.Client(timeout=timeout)
        self.client.headers["Authorization"] = f"Bearer {token}"

    def close(self) -> None:
        if self._owns_client:
            self.client.close()

    def _call(self, method: str, path: str, **kwargs) -> dict | list:
        r = self.client.request(method, f"{self.base}/api/v1{path}", **kwargs)
        if r.status_code >= 400:
            detail = r.json().get("error", {}) if r.headers.get(
                "content-type", "").startswith("application/json") else {}
            raise AutoLabelError(
                f"{method} {path} -> {r.status_code} "
                f"{detail.get('code', '')}: {detail.get('message', r.text)}")
        return r.json()

    def _report_for(self, pseudonym: str, study_date: str) -> dict | None:
        timeline = self._call("GET", f"/participants/{pseudonym}/timeline")
        for entry in timeline["entries"]:
            if entry["kind"] == "study_report" and entry["at"] == study_date:
                return entry
        return None

    def _read_study(self, entry: dict) -> str:
        report = self._report_for(entry["pseudonym"], entry["study_date"])
        if report is None:
            parsed = {"diameter_mm": None, "lobe": None, "inadequate": True}
        else:
            parsed = parse_report(report["detail"]["value"])
        category = category_for(parsed["diameter_mm"],
                                inadequate=parsed["inadequate"])
        nodules = []
        if parsed["diameter_mm"] is not None:
            nodules = [{"lobe": parsed["lobe"], "composition": "SOLID",
                        "mean_diameter_mm": parsed["diameter_mm"]}]
        uid = entry["study_uid"]
        if entry.get("second_opinion"):
            self._call("POST", f"/studies/{uid}/second-opinion/protocol",
                       json={"reader_id": self.expert_id,
                             "lungrads_category": category,
                             "nodules": nodules})
            return category
        if wants_second_opinion(self.seed, uid, self.rate):
            self._call("POST", f"/studies/{uid}/protocol",
                       json={"reader_id": self.reader_id,
                             "lungrads_category": category,
                             "nodules": nodules, "finalize": False})
            self._call("POST", f"/studies/{uid}/second-opinion",
                       json={"expert_id": self.expert_id})
            self._call("POST", f"/studies/{uid}/second-opinion/protocol",
                       json={"reader_id": self.expert_id,
                             "lungrads_category": category,
                             "nodules": nodules})
            return category
        self._call("POST", f"/studies/{uid}/protocol",
                   json={"reader_id": self.reader_id,
                         "lungrads_category": category, "nodules": nodules})
        return category

    def run(self, *, close_tasks: bool = False) -> dict:
        """Labels until the worklist drains; returns a summary report."""
        labeled: Counter = Counter()
        second_opinions = 0
        guard = 0
        while True:
            worklist = self._call("GET", "/worklist")["entries"]
            if not worklist:
                break
            guard += 1
            if guard > 10000:
                raise AutoLabelError("worklist did not drain")
            # per-case order: earlier rounds first (date shift preserves
            # chronology), finish one study fully before the next so a
            # pending second opinion never interleaves
            entry = min(worklist,
                        key=lambda e: (e["pseudonym"], e["study_date"],
                                       e["study_uid"]))
            took_detour = (entry.get("second_opinion")
                           or wants_second_opinion(
                               self.seed, entry["study_uid"], self.rate))
            labeled[self._read_study(entry)] += 1
            if took_detour:
                second_opinions += 1
        closed = 0
        if close_tasks:
            tasks = self._call("GET", "/contact-tasks?status=OPEN")["tasks"]
            for task in tasks:
                self._call("POST", f"/contact-tasks/{task['task_id']}/close",
                           json={"note": "auto-closed after referral"})
                closed += 1
        return {"labeled": sum(labeled.values()),
                "by_category": dict(sorted(labeled.items())),
                "second_opinions": second_opinions,
                "tasks_closed": closed}
