// @vitest-environment jsdom
// View behavior against stubbed clients: explicit empty states, mirrored
// validation blocking, server errors rendered against fields with the
// draft preserved, and the in-flight double-click guard.

import { describe, expect, it, vi } from "vitest";

import { ApiClient, ApiHttpError } from "../src/api.js";
import { App } from "../src/app.js";
import type { Protocol, Stats, StudyDetail, WorklistEntry } from "../src/types.js";
import { createReadingView } from "../src/views/reading.js";
import { renderStats } from "../src/views/stats.js";
import { renderTimeline } from "../src/views/timeline.js";
import { renderWorklist } from "../src/views/worklist.js";

function entry(overrides: Partial<WorklistEntry> = {}): WorklistEntry {
  return {
    study_uid: "2.25.1",
    pseudonym: "Pabc",
    state: "AWAITING_READ",
    assigned_reader: null,
    waiting_since: "2026-01-01T00:00:00.000Z",
    second_opinion: false,
    modality: "CT",
    study_date: "2024-05-01",
    instance_count: 2,
    read_count: 0,
    ...overrides,
  };
}

function study(overrides: Partial<StudyDetail> = {}): StudyDetail {
  return {
    study_uid: "2.25.1",
    pseudonym: "Pabc",
    modality: "CT",
    study_date: "2024-05-01",
    instance_count: 1,
    first_ready_at: "2026-01-01T00:00:00.000Z",
    second_opinion_expert: null,
    protocols: [],
    instances: [{ series_uid: "2.25.9", sop_uid: "2.25.10" }],
    ...overrides,
  };
}

const PROTOCOL: Protocol = {
  protocol_id: "RP-1",
  study_uid: "2.25.1",
  pseudonym: "Pabc",
  reader_id: "R-1",
  nodules: [{ lobe: "RUL", composition: "SOLID", mean_diameter_mm: 7.5 }],
  lungrads_category: "3",
  outcome: "MEDICAL_SUPERVISION",
  narrative: "Screening read for Pabc, study 2.25.1, acquired 2024-05-01.\n",
  is_second_opinion: false,
  is_final: true,
  created_at: "2026-01-01T01:00:00.000Z",
};

interface StubOpts {
  submit?: (...args: unknown[]) => Promise<Protocol>;
  request?: () => Promise<Record<string, unknown>>;
}

function stubApi(opts: StubOpts = {}) {
  const submit = vi.fn(opts.submit ?? (async () => PROTOCOL));
  const request = vi.fn(opts.request ?? (async () => ({})));
  const api = {
    previewUrl: (s: string, sop: string, wc: number, ww: number) =>
      `http://t/api/v1/studies/${s}/preview/${sop}?wc=${wc}&ww=${ww}`,
    fetchPreview: async () => new Uint8Array(0),
    submitProtocol: submit,
    submitSecondOpinion: submit,
    requestSecondOpinion: request,
  };
  return { api: api as unknown as ApiClient, submit, request };
}

describe("worklist view", () => {
  it("shows an explicit empty state", () => {
    const el = renderWorklist([], () => undefined);
    expect(el.dataset.role).toBe("worklist-empty");
    expect(el.textContent).toBe("No studies awaiting read.");
  });

  it("renders one row per entry and tags second opinions", () => {
    const entries = [
      entry({ study_uid: "a" }),
      entry({ study_uid: "b", second_opinion: true, state: "SECOND_OPINION_PENDING" }),
      entry({ study_uid: "c" }),
    ];
    const el = renderWorklist(entries, () => undefined);
    const rows = el.querySelectorAll("tr.worklist-row");
    expect(rows).toHaveLength(3);
    const badges = el.querySelectorAll('[data-role="second-opinion-badge"]');
    expect(badges).toHaveLength(1);
    expect(badges[0]!.textContent).toBe("second medical review");
    expect(rows[1]!.contains(badges[0]!)).toBe(true);
  });

  it("opens the clicked entry", () => {
    const opened: string[] = [];
    const el = renderWorklist([entry({ study_uid: "x" })], (e) =>
      opened.push(e.study_uid));
    (el.querySelector("tr.worklist-row") as HTMLElement).click();
    expect(opened).toEqual(["x"]);
  });
});

describe("stats view", () => {
  it("renders every value verbatim from the payload", () => {
    const data: Stats = {
      cases_total: 12,
      by_state: { AWAITING_READ: 3, CLOSED_HEALTHY: 5 },
      finalized_studies: 9,
      by_category: { "1": 4, "4A": 2 },
      by_outcome: { NO_SIGNS: 4, ADDITIONAL_EXAMINATION: 2 },
      second_opinion_rate: 0.1875,
      mean_turnaround_hours: 17000.25,
      open_contact_tasks: 2,
    };
    const { api } = stubApi();
    const el = renderStats(api, data);
    const text = (name: string) =>
      el.querySelector(`[data-stat="${name}"]`)?.textContent;
    expect(text("cases_total")).toBe("12");
    expect(text("finalized_studies")).toBe("9");
    expect(text("second_opinion_rate")).toBe("0.1875");
    expect(text("mean_turnaround_hours")).toBe("17000.25");
    expect(text("open_contact_tasks")).toBe("2");
    expect(text("by_state.AWAITING_READ")).toBe("3");
    expect(text("by_category.4A")).toBe("2");
    expect(text("by_outcome.NO_SIGNS")).toBe("4");
  });

  it("renders a missing turnaround as a dash", () => {
    const { api } = stubApi();
    const el = renderStats(api, {
      cases_total: 0,
      by_state: {},
      finalized_studies: 0,
      by_category: {},
      by_outcome: {},
      second_opinion_rate: 0,
      mean_turnaround_hours: null,
      open_contact_tasks: 0,
    });
    expect(el.querySelector('[data-stat="mean_turnaround_hours"]')?.textContent)
      .toBe("—");
  });
});

describe("timeline view", () => {
  it("keeps the server's order", () => {
    const el = renderTimeline({
      pseudonym: "Pabc",
      state: "FOLLOW_UP_SCHEDULED",
      entries: [
        { kind: "registration", at: "2024-01-01", detail: {} },
        { kind: "eligibility", at: "2024-01-02", detail: { eligible: true } },
        { kind: "study_linked", at: "2024-02-01", detail: { study_uid: "u" } },
        { kind: "protocol", at: "2024-02-02", detail: { category: "3" } },
      ],
    });
    const kinds = Array.from(el.querySelectorAll("tr.timeline-row")).map(
      (row) => row.getAttribute("data-kind"));
    expect(kinds).toEqual(["registration", "eligibility", "study_linked", "protocol"]);
  });
});

describe("reading view", () => {
  it("blocks a nodule-requiring category client-side with the server text", async () => {
    const { api, submit } = stubApi();
    const view = createReadingView(api, study(), { mode: "read" });
    view.setReaderId("R-1");
    view.setCategory("4A");
    expect(await view.submit()).toBeNull();
    const error = view.root.querySelector('li[data-field="lungrads_category"]');
    expect(error?.textContent).toBe("category 4A requires at least one nodule");
    expect(submit).not.toHaveBeenCalled();
  });

  it("blocks a non-numeric diameter client-side", async () => {
    const { api, submit } = stubApi();
    const view = createReadingView(api, study(), { mode: "read" });
    view.setReaderId("R-1");
    view.setCategory("3");
    view.addNodule("RUL", "SOLID", "");
    expect(await view.submit()).toBeNull();
    const error = view.root.querySelector(
      'li[data-field="nodules[0].mean_diameter_mm"]');
    expect(error?.textContent).toBe("nodule 0 has no numeric diameter");
    expect(submit).not.toHaveBeenCalled();
  });

  it("previews the derived outcome for the chosen category", () => {
    const { api } = stubApi();
    const view = createReadingView(api, study(), { mode: "read" });
    view.setCategory("2");
    const preview = view.root.querySelector('[data-role="outcome-preview"]');
    expect(preview?.getAttribute("data-outcome")).toBe("NO_SIGNS");
    expect(preview?.textContent).toContain(
      "No signs of malignant neoplasms of the lungs");
  });

  it("renders a conflict as a banner and preserves the draft", async () => {
    const { api } = stubApi({
      submit: async () => {
        throw new ApiHttpError(
          409, "ILLEGAL_TRANSITION",
          "event ProtocolSubmitted not allowed in state READ_DONE");
      },
    });
    const view = createReadingView(api, study(), { mode: "read" });
    view.setReaderId("R-1");
    view.setCategory("3");
    view.addNodule("RLL", "PART_SOLID", "8.5");
    expect(await view.submit()).toBeNull();
    const banner = view.root.querySelector('[data-role="error-banner"]');
    expect(banner?.getAttribute("data-code")).toBe("ILLEGAL_TRANSITION");
    expect(banner?.textContent).toContain(
      "event ProtocolSubmitted not allowed in state READ_DONE");
    const diameter = view.root.querySelector(".nodule-diameter") as HTMLInputElement;
    expect(diameter.value).toBe("8.5");
    const submitBtn = view.root.querySelector(
      '[data-role="submit"]') as HTMLButtonElement;
    expect(submitBtn.disabled).toBe(false);
  });

  it("renders a server nodule rejection against the nodule row", async () => {
    const { api } = stubApi({
      submit: async () => {
        throw new ApiHttpError(
          422, "BAD_NODULE", "nodule 0 diameter 600.0 outside (0, 500)");
      },
    });
    const view = createReadingView(api, study(), { mode: "read" });
    view.setReaderId("R-1");
    view.setCategory("2");
    view.addNodule("RUL", "SOLID", "600");
    // 600 passes the client's (0, 500)? no: mirrored bounds catch it first,
    // so force the server path by using an in-range value the stub rejects
    view.removeNodule(0);
    view.addNodule("RUL", "SOLID", "42");
    expect(await view.submit()).toBeNull();
    const error = view.root.querySelector('li[data-field="nodules[0]"]');
    expect(error?.textContent).toBe("nodule 0 diameter 600.0 outside (0, 500)");
  });

  it("lets only one submission through on a double click", async () => {
    let release: (p: Protocol) => void = () => undefined;
    const { api, submit } = stubApi({
      submit: () => new Promise<Protocol>((resolve) => { release = resolve; }),
    });
    const view = createReadingView(api, study(), { mode: "read" });
    view.setReaderId("R-1");
    view.setCategory("1");
    const btn = view.root.querySelector('[data-role="submit"]') as HTMLButtonElement;
    btn.click();
    btn.click();
    release(PROTOCOL);
    await new Promise((r) => setTimeout(r, 0));
    expect(submit).toHaveBeenCalledTimes(1);
  });

  it("reuses the idempotency key until the draft changes", async () => {
    const { api, submit } = stubApi();
    const view = createReadingView(api, study(), { mode: "read" });
    view.setReaderId("R-1");
    view.setCategory("1");
    const first = view.idempotencyKey();
    await view.submit();
    await view.submit();
    expect(submit.mock.calls[0]![2]).toBe(first);
    expect(submit.mock.calls[1]![2]).toBe(first);
    const input = view.root.querySelector(".protocol-form input") as HTMLInputElement;
    input.dispatchEvent(new Event("input", { bubbles: true }));
    expect(view.idempotencyKey()).not.toBe(first);
  });

  it("renders the submitted protocol purely from the response", async () => {
    const { api } = stubApi();
    const view = createReadingView(api, study(), { mode: "read" });
    view.setReaderId("R-1");
    view.setCategory("3");
    view.addNodule("RUL", "SOLID", "7.5");
    const protocol = await view.submit();
    expect(protocol).toEqual(PROTOCOL);
    const field = (name: string) =>
      view.root.querySelector(`[data-field="${name}"]`)?.textContent;
    expect(field("protocol_id")).toBe("RP-1");
    expect(field("outcome")).toBe("MEDICAL_SUPERVISION");
    expect(field("narrative")).toBe(PROTOCOL.narrative);
    const nodule = view.root.querySelector(".protocol-nodule") as HTMLElement;
    expect(nodule.dataset.diameter).toBe("7.5");
  });

  it("disables a second request while one is pending, naming the rule", () => {
    const { api } = stubApi();
    const view = createReadingView(api, study(), {
      mode: "read",
      caseState: "SECOND_OPINION_PENDING",
    });
    const btn = view.root.querySelector(
      '[data-role="request-second-opinion"]') as HTMLButtonElement;
    expect(btn.disabled).toBe(true);
    expect(btn.title).toBe(
      "event SecondOpinionRequested not allowed in state SECOND_OPINION_PENDING");
  });

  it("marks the case after a successful second-opinion request", async () => {
    const { api, request } = stubApi();
    const view = createReadingView(api, study(), { mode: "read" });
    const btn = view.root.querySelector(
      '[data-role="request-second-opinion"]') as HTMLButtonElement;
    expect(btn.disabled).toBe(false);
    expect(await view.requestSecondOpinion("E-7")).toBe(true);
    expect(request).toHaveBeenCalledOnce();
    expect(btn.disabled).toBe(true);
    const badge = view.root.querySelector(
      '[data-role="pending-badge"]') as HTMLElement;
    expect(badge.style.display).not.toBe("none");
  });
});

describe("app shell", () => {
  it("shows a retry banner when the API is unreachable", async () => {
    const app = new App(null);
    app.connect("http://127.0.0.1:1", "tok");
    await app.showWorklist();
    expect(app.banner.textContent).toContain("worklist unavailable");
    expect(app.banner.querySelector('[data-role="retry"]')).not.toBeNull();
  });
});
