// Worklist table: studies awaiting a first or second read.

import { h } from "../dom.js";
import type { WorklistEntry } from "../types.js";

export function renderWorklist(
  entries: WorklistEntry[],
  onOpen: (entry: WorklistEntry) => void,
): HTMLElement {
  if (entries.length === 0) {
    return h(
      "p",
      { class: "empty-state", "data-role": "worklist-empty" },
      "No studies awaiting read.",
    );
  }
  const rows = entries.map((entry) => {
    const badge = entry.second_opinion
      ? h("span", { class: "badge badge-second", "data-role": "second-opinion-badge" },
          "second medical review")
      : null;
    return h(
      "tr",
      {
        class: "worklist-row",
        "data-study-uid": entry.study_uid,
        onclick: () => onOpen(entry),
      },
      h("td", {}, entry.pseudonym),
      h("td", {}, entry.study_date),
      h("td", {}, entry.modality),
      h("td", {}, String(entry.instance_count)),
      h("td", {}, entry.state, badge ? " " : null, badge),
      h("td", {}, String(entry.read_count)),
      h("td", {}, entry.assigned_reader ?? ""),
    );
  });
  return h(
    "table",
    { class: "worklist", "data-role": "worklist" },
    h(
      "thead",
      {},
      h(
        "tr",
        {},
        h("th", {}, "participant"),
        h("th", {}, "study date"),
        h("th", {}, "modality"),
        h("th", {}, "images"),
        h("th", {}, "state"),
        h("th", {}, "reads"),
        h("th", {}, "expert"),
      ),
    ),
    h("tbody", {}, ...rows),
  );
}
