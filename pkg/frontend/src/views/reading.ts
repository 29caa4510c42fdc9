// Reading view: instance preview with window sliders, the protocol form
// with mirrored validation, second-opinion controls, and the submitted
// protocol rendered purely from the server's response.

import { ApiClient, ApiHttpError, newIdempotencyKey } from "../api.js";
import { clear, h, option } from "../dom.js";
import type { Protocol, ProtocolDraft, StudyDetail } from "../types.js";
import {
  CATEGORIES,
  NODULE_COMPOSITIONS,
  NODULE_LOBES,
  OUTCOME_LABELS,
  OUTCOME_PHRASES,
  mapCategoryToOutcome,
  validateDraft,
  type NoduleDraftInput,
} from "../validation.js";

export type ReadingMode = "read" | "expert";

export interface ReadingViewOptions {
  mode: ReadingMode;
  caseState?: string;
  onSubmitted?: (protocol: Protocol) => void;
}

export interface ReadingView {
  root: HTMLElement;
  setReaderId(id: string): void;
  setCategory(category: string): void;
  addNodule(lobe?: string, composition?: string, diameter?: string): void;
  removeNodule(index: number): void;
  setWindow(wc: number, ww: number): Promise<void>;
  requestSecondOpinion(expertId: string): Promise<boolean>;
  submit(): Promise<Protocol | null>;
  currentDraft(): ProtocolDraft | null;
  idempotencyKey(): string;
  previewUrl(): string;
}

const BLOCKED_RULE =
  "event SecondOpinionRequested not allowed in state SECOND_OPINION_PENDING";

export function createReadingView(
  api: ApiClient,
  study: StudyDetail,
  opts: ReadingViewOptions,
): ReadingView {
  let key = newIdempotencyKey();
  let inFlight = false;
  let wc = 1500;
  let ww = 3000;
  let pendingSecond =
    opts.caseState === "SECOND_OPINION_PENDING" || study.second_opinion_expert !== null;

  const img = h("img", {
    class: "preview",
    alt: `preview of ${study.study_uid}`,
    "data-role": "preview-image",
  });
  const sopSelect = h("select", { "data-role": "instance-select" });
  for (const inst of study.instances) sopSelect.append(option(inst.sop_uid));
  const wcSlider = h("input", {
    type: "range", min: "-1000", max: "4000", value: String(wc),
    "data-role": "wc-slider",
  });
  const wwSlider = h("input", {
    type: "range", min: "1", max: "5000", value: String(ww),
    "data-role": "ww-slider",
  });

  function selectedSop(): string {
    return sopSelect.value || study.instances[0]?.sop_uid || "";
  }

  function logicalPreviewUrl(): string {
    return api.previewUrl(study.study_uid, selectedSop(), wc, ww);
  }

  async function refreshPreview(): Promise<void> {
    const sop = selectedSop();
    if (!sop) return;
    const url = logicalPreviewUrl();
    img.dataset.previewUrl = url;
    try {
      const bytes = await api.fetchPreview(study.study_uid, sop, wc, ww);
      if (img.dataset.previewUrl !== url) return; // a newer window won
      if (typeof URL.createObjectURL === "function") {
        const blob = new Blob([bytes.buffer as ArrayBuffer], { type: "image/png" });
        if (img.src) URL.revokeObjectURL(img.src);
        img.src = URL.createObjectURL(blob);
      }
    } catch {
      img.dataset.previewError = "1";
    }
  }

  wcSlider.addEventListener("input", () => {
    wc = Number(wcSlider.value);
    void refreshPreview();
  });
  wwSlider.addEventListener("input", () => {
    ww = Math.max(1, Number(wwSlider.value));
    void refreshPreview();
  });
  sopSelect.addEventListener("change", () => void refreshPreview());

  const readerInput = h("input", {
    type: "text", placeholder: "reader id", "data-role": "reader-id",
  });
  const categorySelect = h("select", { "data-role": "category" });
  categorySelect.append(option("", "select category"));
  for (const c of CATEGORIES) categorySelect.append(option(c));
  const outcomePreview = h("span", { "data-role": "outcome-preview" }, "—");
  const finalizeBox = h("input", { type: "checkbox", "data-role": "finalize" });
  finalizeBox.checked = true;

  function updateOutcomePreview(): void {
    const category = categorySelect.value;
    if (!(CATEGORIES as readonly string[]).includes(category)) {
      outcomePreview.textContent = "—";
      outcomePreview.removeAttribute("data-outcome");
      return;
    }
    const outcome = mapCategoryToOutcome(category);
    outcomePreview.dataset.outcome = outcome;
    outcomePreview.textContent =
      `${OUTCOME_LABELS[outcome]} (${outcome}). ${OUTCOME_PHRASES[outcome]}`;
  }
  categorySelect.addEventListener("change", updateOutcomePreview);

  const noduleBody = h("tbody", { "data-role": "nodule-rows" });

  function addNodule(lobe = "RUL", composition = "SOLID", diameter = ""): void {
    const lobeSelect = h("select", { class: "nodule-lobe" });
    for (const l of NODULE_LOBES) lobeSelect.append(option(l));
    lobeSelect.value = lobe;
    const compSelect = h("select", { class: "nodule-composition" });
    for (const c of NODULE_COMPOSITIONS) compSelect.append(option(c));
    compSelect.value = composition;
    const diameterInput = h("input", {
      type: "number", step: "0.1", min: "0", class: "nodule-diameter",
      placeholder: "mm",
    });
    diameterInput.value = diameter;
    const row = h(
      "tr",
      { class: "nodule-row" },
      h("td", {}, lobeSelect),
      h("td", {}, compSelect),
      h("td", {}, diameterInput),
      h("td", {}, h("button", {
        type: "button",
        class: "remove-nodule",
        onclick: () => row.remove(),
      }, "remove")),
    );
    noduleBody.append(row);
  }

  function collectNodules(): NoduleDraftInput[] {
    const rows = Array.from(noduleBody.querySelectorAll("tr.nodule-row"));
    return rows.map((row) => ({
      lobe: (row.querySelector(".nodule-lobe") as HTMLSelectElement).value,
      composition: (row.querySelector(".nodule-composition") as HTMLSelectElement).value,
      mean_diameter_mm: (row.querySelector(".nodule-diameter") as HTMLInputElement).value,
    }));
  }

  const errorList = h("ul", { class: "errors", "data-role": "draft-errors" });
  const banner = h("p", { class: "banner", "data-role": "error-banner" });
  const resultBox = h("div", { "data-role": "protocol-result" });

  function clearErrors(): void {
    clear(errorList);
    banner.textContent = "";
    banner.removeAttribute("data-code");
  }

  function showErrors(messages: { field: string; message: string }[]): void {
    for (const e of messages) {
      errorList.append(
        h("li", { class: "field-error", "data-field": e.field }, e.message),
      );
    }
  }

  function fieldForServerError(err: ApiHttpError): string {
    const match = /^nodule (\d+)/.exec(err.message);
    if (err.code === "BAD_NODULE" && match) {
      return `nodules[${match[1]}]`;
    }
    if (err.code === "BAD_CATEGORY" || err.code === "CATEGORY_NODULE_MISMATCH") {
      return "lungrads_category";
    }
    return "";
  }

  function renderServerError(err: unknown): void {
    if (err instanceof ApiHttpError) {
      const field = fieldForServerError(err);
      if (field) {
        showErrors([{ field, message: err.message }]);
      } else {
        banner.textContent = `${err.code}: ${err.message}`;
        banner.dataset.code = err.code;
      }
    } else {
      banner.textContent = "request failed; the draft is kept, retry when the API is back";
      banner.dataset.code = "NETWORK";
    }
  }

  function renderNoduleResult(n: Protocol["nodules"][number]): HTMLElement {
    const row = h(
      "li",
      { class: "protocol-nodule" },
      `${n.lobe} ${n.composition} ${String(n.mean_diameter_mm)} mm`,
    );
    row.dataset.lobe = n.lobe;
    row.dataset.composition = n.composition;
    row.dataset.diameter = String(n.mean_diameter_mm);
    return row;
  }

  function renderProtocol(p: Protocol): void {
    clear(resultBox);
    const field = (name: string, value: string) =>
      h("div", {},
        h("span", { class: "label" }, name + ": "),
        h("span", { "data-field": name }, value));
    resultBox.append(
      h("h3", {}, "submitted protocol"),
      field("protocol_id", p.protocol_id),
      field("reader_id", p.reader_id),
      field("lungrads_category", p.lungrads_category),
      field("outcome", p.outcome),
      field("is_second_opinion", String(p.is_second_opinion)),
      field("is_final", String(p.is_final)),
      field("created_at", p.created_at),
      h("ul", { "data-field": "nodules" }, ...p.nodules.map(renderNoduleResult)),
      h("pre", { "data-field": "narrative" }, p.narrative),
    );
  }

  const expertInput = h("input", {
    type: "text", placeholder: "expert id", "data-role": "expert-id",
  });
  const requestBtn = h("button", {
    type: "button", "data-role": "request-second-opinion",
  }, "request second opinion");
  const secondBadge = h("span", {
    class: "badge badge-second", "data-role": "pending-badge",
  }, "second medical review");

  function syncSecondOpinionControls(): void {
    requestBtn.disabled = pendingSecond;
    if (pendingSecond) {
      requestBtn.title = BLOCKED_RULE;
      secondBadge.style.display = "";
    } else {
      requestBtn.removeAttribute("title");
      secondBadge.style.display = "none";
    }
  }
  syncSecondOpinionControls();

  async function requestSecondOpinion(expertId: string): Promise<boolean> {
    clearErrors();
    try {
      await api.requestSecondOpinion(study.study_uid, expertId, newIdempotencyKey());
      pendingSecond = true;
      syncSecondOpinionControls();
      return true;
    } catch (err) {
      renderServerError(err);
      return false;
    }
  }
  requestBtn.addEventListener("click", () => {
    if (expertInput.value) void requestSecondOpinion(expertInput.value);
  });

  function currentDraft(): ProtocolDraft | null {
    const category = categorySelect.value;
    const raw = collectNodules();
    if (validateDraft(category, raw).length > 0) return null;
    return {
      reader_id: readerInput.value,
      lungrads_category: category,
      nodules: raw.map((n) => ({
        lobe: String(n.lobe),
        composition: String(n.composition),
        mean_diameter_mm: Number(String(n.mean_diameter_mm).trim()),
      })),
      finalize: finalizeBox.checked,
    };
  }

  const submitBtn = h("button", {
    type: "button", "data-role": "submit",
  }, "submit protocol");

  async function submit(): Promise<Protocol | null> {
    if (inFlight) return null;
    clearErrors();
    const category = categorySelect.value;
    const raw = collectNodules();
    const draftErrors = validateDraft(category, raw);
    if (draftErrors.length > 0) {
      showErrors(draftErrors);
      return null;
    }
    const draft = currentDraft();
    if (draft === null) return null;
    inFlight = true;
    submitBtn.disabled = true;
    try {
      const protocol =
        opts.mode === "expert"
          ? await api.submitSecondOpinion(study.study_uid, draft, key)
          : await api.submitProtocol(study.study_uid, draft, key);
      renderProtocol(protocol);
      opts.onSubmitted?.(protocol);
      return protocol;
    } catch (err) {
      renderServerError(err);
      return null;
    } finally {
      inFlight = false;
      submitBtn.disabled = false;
    }
  }
  submitBtn.addEventListener("click", () => void submit());

  const form = h(
    "div",
    { class: "protocol-form" },
    h("div", {}, h("label", {}, "reader "), readerInput),
    h(
      "table",
      { class: "nodules" },
      h("thead", {}, h("tr", {},
        h("th", {}, "lobe"), h("th", {}, "composition"),
        h("th", {}, "mean diameter (mm)"), h("th", {}))),
      noduleBody,
    ),
    h("button", {
      type: "button", "data-role": "add-nodule",
      onclick: () => addNodule(),
    }, "add nodule"),
    h("div", {},
      h("label", {}, "Lung-RADS "), categorySelect,
      h("span", { class: "outcome" }, " outcome: ", outcomePreview)),
    h("div", {}, h("label", {}, "finalize "), finalizeBox),
    errorList,
    banner,
    submitBtn,
  );

  const secondPanel =
    opts.mode === "read"
      ? h("div", { class: "second-opinion" }, expertInput, requestBtn, secondBadge)
      : null;

  const root = h(
    "section",
    { class: "reading-view", "data-study-uid": study.study_uid },
    h("h2", {},
      `${study.pseudonym} · ${study.modality} · ${study.study_date}`),
    h("p", { class: "study-uid" }, study.study_uid),
    h("div", { class: "viewer" },
      img,
      h("div", { class: "window-controls" },
        h("label", {}, "instance "), sopSelect,
        h("label", {}, "center "), wcSlider,
        h("label", {}, "width "), wwSlider)),
    secondPanel,
    form,
    resultBox,
  );

  // any edit makes a new draft, so retries of the same untouched draft
  // replay on the server instead of double-storing
  form.addEventListener("input", () => {
    key = newIdempotencyKey();
  });

  void refreshPreview();

  return {
    root,
    setReaderId: (id) => { readerInput.value = id; },
    setCategory: (category) => {
      categorySelect.value = category;
      updateOutcomePreview();
    },
    addNodule,
    removeNodule: (index) => {
      noduleBody.querySelectorAll("tr.nodule-row")[index]?.remove();
    },
    setWindow: async (newWc, newWw) => {
      wc = newWc;
      ww = newWw;
      wcSlider.value = String(newWc);
      wwSlider.value = String(newWw);
      await refreshPreview();
    },
    requestSecondOpinion,
    submit,
    currentDraft,
    idempotencyKey: () => key,
    previewUrl: logicalPreviewUrl,
  };
}
