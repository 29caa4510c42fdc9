// Stats panel: every number is the /stats JSON value rendered verbatim;
// no client-side re-aggregation. The export button downloads GET /export.

import { ApiClient } from "../api.js";
import { h } from "../dom.js";
import type { Stats } from "../types.js";

function statCell(name: string, value: unknown): HTMLElement {
  return h(
    "div",
    { class: "stat" },
    h("span", { class: "label" }, name + ": "),
    h("span", { "data-stat": name }, value === null ? "—" : String(value)),
  );
}

function countTable(title: string, prefix: string, counts: Record<string, number>): HTMLElement {
  const rows = Object.entries(counts).map(([key, value]) =>
    h("tr", {},
      h("td", {}, key),
      h("td", { "data-stat": `${prefix}.${key}` }, String(value))),
  );
  return h(
    "div",
    { class: "stat-table" },
    h("h3", {}, title),
    h("table", {}, h("tbody", {}, ...rows)),
  );
}

export function renderStats(api: ApiClient, data: Stats): HTMLElement {
  const exportBtn = h("button", { type: "button", "data-role": "export" },
    "download export CSV");
  exportBtn.addEventListener("click", () => {
    void api.exportCsv().then((csv) => {
      if (typeof URL.createObjectURL !== "function") return;
      const link = h("a", {
        href: URL.createObjectURL(new Blob([csv], { type: "text/csv" })),
        download: "screening-export.csv",
      });
      link.click();
      URL.revokeObjectURL(link.href);
    });
  });
  return h(
    "section",
    { class: "stats", "data-role": "stats" },
    h("h2", {}, "screening statistics"),
    statCell("cases_total", data.cases_total),
    statCell("finalized_studies", data.finalized_studies),
    statCell("second_opinion_rate", data.second_opinion_rate),
    statCell("mean_turnaround_hours", data.mean_turnaround_hours),
    statCell("open_contact_tasks", data.open_contact_tasks),
    countTable("cases by state", "by_state", data.by_state),
    countTable("finalized by category", "by_category", data.by_category),
    countTable("finalized by outcome", "by_outcome", data.by_outcome),
    exportBtn,
  );
}
