// Application shell: connection panel, navigation, and a 2 s worklist
// poll. API failures always surface as a retry banner, never as a silent
// empty view.

import { ApiClient } from "./api.js";
import { clear, h } from "./dom.js";
import type { WorklistEntry } from "./types.js";
import { createReadingView } from "./views/reading.js";
import { renderStats } from "./views/stats.js";
import { renderTimeline } from "./views/timeline.js";
import { renderWorklist } from "./views/worklist.js";

export const POLL_INTERVAL_MS = 2000;

type Screen = "worklist" | "reading" | "timeline" | "stats";

export class App {
  private api: ApiClient | null = null;
  private screen: Screen = "worklist";
  private timer: ReturnType<typeof setInterval> | null = null;

  readonly banner = h("p", { class: "banner", "data-role": "api-banner" });
  readonly content = h("main", { "data-role": "content" });
  readonly root: HTMLElement;

  constructor(private readonly storage: Storage | null = null) {
    const baseInput = h("input", {
      type: "text", placeholder: "http://127.0.0.1:8321", "data-role": "base-url",
    });
    const tokenInput = h("input", {
      type: "password", placeholder: "API token", "data-role": "token",
    });
    if (storage) {
      baseInput.value = storage.getItem("screenforge.base") ?? "";
      tokenInput.value = storage.getItem("screenforge.token") ?? "";
    }
    const connectBtn = h("button", { type: "button", "data-role": "connect" },
      "connect");
    connectBtn.addEventListener("click", () => {
      this.connect(baseInput.value, tokenInput.value);
    });
    const nav = h(
      "nav",
      {},
      h("button", { type: "button", "data-role": "nav-worklist",
        onclick: () => void this.showWorklist() }, "worklist"),
      h("button", { type: "button", "data-role": "nav-stats",
        onclick: () => void this.showStats() }, "statistics"),
    );
    this.root = h(
      "div",
      { class: "app" },
      h("header", {},
        h("h1", {}, "lung screening reading room"),
        h("div", { class: "connect" }, baseInput, tokenInput, connectBtn),
        nav),
      this.banner,
      this.content,
    );
  }

  connect(baseUrl: string, token: string): void {
    if (!baseUrl || !token) {
      this.showBanner("enter the API base URL and token");
      return;
    }
    this.storage?.setItem("screenforge.base", baseUrl);
    this.storage?.setItem("screenforge.token", token);
    this.api = new ApiClient({ baseUrl, token });
    void this.showWorklist();
    this.startPolling();
  }

  private showBanner(message: string, retry?: () => void): void {
    clear(this.banner);
    this.banner.append(message);
    if (retry) {
      this.banner.append(
        " ",
        h("button", { type: "button", "data-role": "retry", onclick: retry },
          "retry"),
      );
    }
  }

  private clearBanner(): void {
    clear(this.banner);
  }

  startPolling(): void {
    this.stopPolling();
    this.timer = setInterval(() => {
      if (this.screen === "worklist") void this.showWorklist();
    }, POLL_INTERVAL_MS);
  }

  stopPolling(): void {
    if (this.timer !== null) clearInterval(this.timer);
    this.timer = null;
  }

  async showWorklist(): Promise<void> {
    if (!this.api) return;
    this.screen = "worklist";
    let entries: WorklistEntry[];
    try {
      entries = await this.api.worklist();
    } catch (err) {
      this.showBanner(
        `worklist unavailable: ${err instanceof Error ? err.message : String(err)}`,
        () => void this.showWorklist(),
      );
      return;
    }
    if (this.screen !== "worklist") return; // user navigated while loading
    this.clearBanner();
    clear(this.content);
    this.content.append(
      renderWorklist(entries, (entry) => void this.openReading(entry)),
    );
  }

  async openReading(entry: WorklistEntry): Promise<void> {
    if (!this.api) return;
    this.screen = "reading";
    try {
      const study = await this.api.study(entry.study_uid);
      const view = createReadingView(this.api, study, {
        mode: entry.second_opinion ? "expert" : "read",
        caseState: entry.state,
        onSubmitted: () => this.startPolling(),
      });
      this.clearBanner();
      clear(this.content);
      this.content.append(
        h("button", { type: "button", "data-role": "back",
          onclick: () => void this.showWorklist() }, "back to worklist"),
        h("button", { type: "button", "data-role": "open-timeline",
          onclick: () => void this.showTimeline(entry.pseudonym) },
          "participant timeline"),
        view.root,
      );
    } catch (err) {
      this.showBanner(
        `study unavailable: ${err instanceof Error ? err.message : String(err)}`,
        () => void this.openReading(entry),
      );
    }
  }

  async showTimeline(pseudonym: string): Promise<void> {
    if (!this.api) return;
    this.screen = "timeline";
    try {
      const data = await this.api.timeline(pseudonym);
      this.clearBanner();
      clear(this.content);
      this.content.append(
        h("button", { type: "button", "data-role": "back",
          onclick: () => void this.showWorklist() }, "back to worklist"),
        renderTimeline(data),
      );
    } catch (err) {
      this.showBanner(
        `timeline unavailable: ${err instanceof Error ? err.message : String(err)}`,
        () => void this.showTimeline(pseudonym),
      );
    }
  }

  async showStats(): Promise<void> {
    if (!this.api) return;
    this.screen = "stats";
    try {
      const data = await this.api.stats();
      this.clearBanner();
      clear(this.content);
      this.content.append(renderStats(this.api, data));
    } catch (err) {
      this.showBanner(
        `statistics unavailable: ${err instanceof Error ? err.message : String(err)}`,
        () => void this.showStats(),
      );
    }
  }
}

export function mount(target: HTMLElement, storage: Storage | null): App {
  const app = new App(storage);
  target.append(app.root);
  return app;
}

declare global {
  interface Window {
    __SCREENFORGE_NO_AUTOMOUNT__?: boolean;
  }
}

if (typeof document !== "undefined" && !window.__SCREENFORGE_NO_AUTOMOUNT__) {
  const target = document.getElementById("app");
  if (target) {
    const app = mount(target, window.localStorage ?? null);
    const base = window.localStorage?.getItem("screenforge.base");
    const token = window.localStorage?.getItem("screenforge.token");
    if (base && token) app.connect(base, token);
  }
}
