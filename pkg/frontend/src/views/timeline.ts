// Participant timeline: the gateway's chronological entries, grouped
// visually by kind but rendered in server order.

import { h } from "../dom.js";
import type { TimelineResponse } from "../types.js";

const KIND_LABELS: Record<string, string> = {
  registration: "registration",
  eligibility: "eligibility",
  clinical_event: "clinical event",
  study_report: "report",
  study_linked: "study",
  protocol: "protocol",
  second_opinion: "second opinion",
  outcome: "outcome",
  contact: "contact",
};

function detailText(detail: Record<string, unknown>): string {
  const parts: string[] = [];
  for (const [key, value] of Object.entries(detail)) {
    if (value === null || value === undefined || value === "") continue;
    parts.push(`${key}=${typeof value === "object" ? JSON.stringify(value) : String(value)}`);
  }
  return parts.join("  ");
}

export function renderTimeline(data: TimelineResponse): HTMLElement {
  const rows = data.entries.map((entry) =>
    h(
      "tr",
      { class: `timeline-row kind-${entry.kind}`, "data-kind": entry.kind },
      h("td", { class: "at" }, entry.at),
      h("td", { class: "kind" }, KIND_LABELS[entry.kind] ?? entry.kind),
      h("td", { class: "detail" }, detailText(entry.detail)),
    ),
  );
  return h(
    "section",
    { class: "timeline", "data-role": "timeline" },
    h("h2", {}, `${data.pseudonym} · ${data.state}`),
    data.entries.length === 0
      ? h("p", { class: "empty-state" }, "No events recorded.")
      : h(
          "table",
          {},
          h("thead", {}, h("tr", {},
            h("th", {}, "at"), h("th", {}, "kind"), h("th", {}, "detail"))),
          h("tbody", {}, ...rows),
        ),
  );
}
