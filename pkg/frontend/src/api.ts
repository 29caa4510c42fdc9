// Typed client over fetch for the platform gateway. Configuration is just
// the base URL and the bearer token; nothing else is contacted.

import type {
  ContactTask,
  ErrorEnvelope,
  Protocol,
  ProtocolDraft,
  Stats,
  StudyDetail,
  TimelineResponse,
  WorklistEntry,
} from "./types.js";

const API = "/api/v1";

export class ApiHttpError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
    readonly detail: Record<string, unknown> = {},
  ) {
    super(message);
    this.name = "ApiHttpError";
  }
}

export interface ApiConfig {
  baseUrl: string;
  token: string;
  fetchImpl?: typeof fetch;
}

async function toError(res: Response): Promise<ApiHttpError> {
  let body: ErrorEnvelope | null = null;
  try {
    body = (await res.json()) as ErrorEnvelope;
  } catch {
    // non-JSON error page; keep the status
  }
  if (body && body.error) {
    const e = body.error;
    return new ApiHttpError(e.http_status, e.code, e.message, e.detail);
  }
  return new ApiHttpError(res.status, "HTTP", `request failed with ${res.status}`);
}

export class ApiClient {
  private readonly base: string;
  private readonly token: string;
  private readonly fetchImpl: typeof fetch;

  constructor(cfg: ApiConfig) {
    this.base = cfg.baseUrl.replace(/\/+$/, "");
    this.token = cfg.token;
    this.fetchImpl = cfg.fetchImpl ?? fetch;
  }

  url(path: string): string {
    return this.base + path;
  }

  private headers(extra: Record<string, string> = {}): Record<string, string> {
    return { Authorization: `Bearer ${this.token}`, ...extra };
  }

  private async getJson<T>(path: string): Promise<T> {
    const res = await this.fetchImpl(this.url(path), { headers: this.headers() });
    if (!res.ok) throw await toError(res);
    return (await res.json()) as T;
  }

  private async postJson<T>(
    path: string,
    body: unknown,
    idempotencyKey?: string,
  ): Promise<T> {
    const extra: Record<string, string> = { "Content-Type": "application/json" };
    if (idempotencyKey) extra["Idempotency-Key"] = idempotencyKey;
    const res = await this.fetchImpl(this.url(path), {
      method: "POST",
      headers: this.headers(extra),
      body: JSON.stringify(body),
    });
    if (!res.ok) throw await toError(res);
    return (await res.json()) as T;
  }

  async worklist(): Promise<WorklistEntry[]> {
    const data = await this.getJson<{ entries: WorklistEntry[] }>(API + "/worklist");
    return data.entries;
  }

  study(studyUid: string): Promise<StudyDetail> {
    return this.getJson(API + `/studies/${encodeURIComponent(studyUid)}`);
  }

  previewUrl(studyUid: string, sopUid: string, wc: number, ww: number): string {
    const study = encodeURIComponent(studyUid);
    const sop = encodeURIComponent(sopUid);
    return this.url(API + `/studies/${study}/preview/${sop}?wc=${wc}&ww=${ww}`);
  }

  async fetchPreview(
    studyUid: string,
    sopUid: string,
    wc: number,
    ww: number,
  ): Promise<Uint8Array> {
    const res = await this.fetchImpl(this.previewUrl(studyUid, sopUid, wc, ww), {
      headers: this.headers(),
    });
    if (!res.ok) throw await toError(res);
    return new Uint8Array(await res.arrayBuffer());
  }

  submitProtocol(
    studyUid: string,
    draft: ProtocolDraft,
    idempotencyKey: string,
  ): Promise<Protocol> {
    const study = encodeURIComponent(studyUid);
    return this.postJson(API + `/studies/${study}/protocol`, draft, idempotencyKey);
  }

  requestSecondOpinion(
    studyUid: string,
    expertId: string,
    idempotencyKey: string,
  ): Promise<Record<string, unknown>> {
    const study = encodeURIComponent(studyUid);
    return this.postJson(
      API + `/studies/${study}/second-opinion`,
      { expert_id: expertId },
      idempotencyKey,
    );
  }

  submitSecondOpinion(
    studyUid: string,
    draft: ProtocolDraft,
    idempotencyKey: string,
  ): Promise<Protocol> {
    const study = encodeURIComponent(studyUid);
    return this.postJson(
      API + `/studies/${study}/second-opinion/protocol`,
      draft,
      idempotencyKey,
    );
  }

  timeline(pseudonym: string): Promise<TimelineResponse> {
    return this.getJson(API + `/participants/${encodeURIComponent(pseudonym)}/timeline`);
  }

  stats(): Promise<Stats> {
    return this.getJson(API + "/stats");
  }

  async contactTasks(status?: string): Promise<ContactTask[]> {
    const suffix = status ? `?status=${encodeURIComponent(status)}` : "";
    const data = await this.getJson<{ tasks: ContactTask[] }>(
      API + "/contact-tasks" + suffix,
    );
    return data.tasks;
  }

  closeTask(taskId: string, note = ""): Promise<ContactTask> {
    return this.postJson(API + `/contact-tasks/${encodeURIComponent(taskId)}/close`, {
      note,
    });
  }

  async exportCsv(): Promise<string> {
    const res = await this.fetchImpl(this.url(API + "/export"), {
      headers: this.headers(),
    });
    if (!res.ok) throw await toError(res);
    return res.text();
  }

  exportManifest(): Promise<Record<string, unknown>> {
    return this.getJson(API + "/export/manifest");
  }
}

export function newIdempotencyKey(): string {
  const c = globalThis.crypto;
  if (c && typeof c.randomUUID === "function") return c.randomUUID();
  return `ik-${Date.now()}-${Math.random().toString(16).slice(2)}`;
}
