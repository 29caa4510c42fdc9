// Client behavior against a scripted fetch: headers, envelope handling,
// and payload unwrapping.

import { describe, expect, it } from "vitest";

import { ApiClient, ApiHttpError, newIdempotencyKey } from "../src/api.js";

interface Call {
  url: string;
  init: RequestInit | undefined;
}

function scripted(responses: Response[]): { calls: Call[]; fetchImpl: typeof fetch } {
  const calls: Call[] = [];
  const fetchImpl: typeof fetch = async (input, init) => {
    calls.push({ url: String(input), init });
    const next = responses.shift();
    if (!next) throw new Error("no scripted response left");
    return next;
  };
  return { calls, fetchImpl };
}

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}

const CFG = { baseUrl: "http://api.test/", token: "tok-1" };

describe("ApiClient", () => {
  it("sends the bearer token and unwraps worklist entries", async () => {
    const { calls, fetchImpl } = scripted([jsonResponse({ entries: [{ study_uid: "u" }] })]);
    const api = new ApiClient({ ...CFG, fetchImpl });
    const entries = await api.worklist();
    expect(entries).toEqual([{ study_uid: "u" }]);
    expect(calls[0]!.url).toBe("http://api.test/api/v1/worklist");
    const headers = calls[0]!.init?.headers as Record<string, string>;
    expect(headers.Authorization).toBe("Bearer tok-1");
  });

  it("passes the idempotency key on protocol submission", async () => {
    const { calls, fetchImpl } = scripted([jsonResponse({ protocol_id: "p" }, 201)]);
    const api = new ApiClient({ ...CFG, fetchImpl });
    const draft = {
      reader_id: "r",
      lungrads_category: "1",
      nodules: [],
      finalize: true,
    };
    await api.submitProtocol("1.2.3", draft, "key-9");
    const headers = calls[0]!.init?.headers as Record<string, string>;
    expect(headers["Idempotency-Key"]).toBe("key-9");
    expect(calls[0]!.url).toBe("http://api.test/api/v1/studies/1.2.3/protocol");
    expect(JSON.parse(String(calls[0]!.init?.body))).toEqual(draft);
  });

  it("raises the server's error envelope as a typed error", async () => {
    const envelope = {
      error: {
        http_status: 422,
        code: "CATEGORY_NODULE_MISMATCH",
        message: "category 4A requires at least one nodule",
        detail: {},
      },
    };
    const { fetchImpl } = scripted([jsonResponse(envelope, 422)]);
    const api = new ApiClient({ ...CFG, fetchImpl });
    const err = await api
      .submitProtocol("u", { reader_id: "r", lungrads_category: "4A", nodules: [], finalize: true }, "k")
      .then(() => null, (e: unknown) => e);
    expect(err).toBeInstanceOf(ApiHttpError);
    expect((err as ApiHttpError).status).toBe(422);
    expect((err as ApiHttpError).code).toBe("CATEGORY_NODULE_MISMATCH");
    expect((err as ApiHttpError).message).toBe(
      "category 4A requires at least one nodule",
    );
  });

  it("degrades to a plain HTTP error on a non-JSON body", async () => {
    const { fetchImpl } = scripted([new Response("boom", { status: 502 })]);
    const api = new ApiClient({ ...CFG, fetchImpl });
    const err = await api.stats().then(() => null, (e: unknown) => e);
    expect((err as ApiHttpError).code).toBe("HTTP");
    expect((err as ApiHttpError).status).toBe(502);
  });

  it("builds encoded preview URLs", () => {
    const api = new ApiClient(CFG);
    expect(api.previewUrl("1.2/3", "4.5", 40, 400)).toBe(
      "http://api.test/api/v1/studies/1.2%2F3/preview/4.5?wc=40&ww=400",
    );
  });

  it("returns export CSV as text", async () => {
    const { fetchImpl } = scripted([new Response("a,b\n1,2\n", { status: 200 })]);
    const api = new ApiClient({ ...CFG, fetchImpl });
    expect(await api.exportCsv()).toBe("a,b\n1,2\n");
  });

  it("unwraps contact tasks and encodes the status filter", async () => {
    const { calls, fetchImpl } = scripted([jsonResponse({ tasks: [] })]);
    const api = new ApiClient({ ...CFG, fetchImpl });
    expect(await api.contactTasks("OPEN")).toEqual([]);
    expect(calls[0]!.url).toBe("http://api.test/api/v1/contact-tasks?status=OPEN");
  });
});

describe("newIdempotencyKey", () => {
  it("never repeats", () => {
    const keys = new Set(Array.from({ length: 100 }, newIdempotencyKey));
    expect(keys.size).toBe(100);
  });
});
