// Test fixture: a real platform server over a fresh simulated corpus.
// Everything goes through the console commands and the HTTP API; no
// Python internals are touched except the PGM reference render, which
// itself consumes only public endpoints.

import { spawn, spawnSync, type ChildProcess } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { createServer } from "node:net";
import { tmpdir } from "node:os";
import { join } from "node:path";

export const TEST_TOKEN = "ui-test-token";
const DEID_KEY = "ab".repeat(32);

export interface PlatformFixture {
  baseUrl: string;
  token: string;
  dataRoot: string;
  stop(): Promise<void>;
}

function freePort(): Promise<number> {
  return new Promise((resolve, reject) => {
    const srv = createServer();
    srv.listen(0, "127.0.0.1", () => {
      const addr = srv.address();
      if (addr === null || typeof addr === "string") {
        reject(new Error("no port"));
        return;
      }
      srv.close(() => resolve(addr.port));
    });
  });
}

function runCli(env: NodeJS.ProcessEnv, ...args: string[]): void {
  const result = spawnSync(
    "python3",
    ["-m", "screenforge.gateway.cli", ...args],
    { env, encoding: "utf-8" },
  );
  if (result.status !== 0) {
    throw new Error(
      `cli ${args.join(" ")} failed (${result.status}):\n${result.stdout}\n${result.stderr}`,
    );
  }
}

async function waitForHealth(baseUrl: string, proc: ChildProcess): Promise<void> {
  for (let i = 0; i < 150; i++) {
    if (proc.exitCode !== null) {
      throw new Error(`server exited early with ${proc.exitCode}`);
    }
    try {
      const res = await fetch(baseUrl + "/healthz");
      if (res.ok) return;
    } catch {
      // not up yet
    }
    await new Promise((r) => setTimeout(r, 100));
  }
  throw new Error("server did not become healthy");
}

export async function startPlatform(
  opts: { seed?: number; participants?: number } = {},
): Promise<PlatformFixture> {
  const dataRoot = mkdtempSync(join(tmpdir(), "webui-"));
  const env: NodeJS.ProcessEnv = {
    ...process.env,
    SCREENFORGE_DEID_KEY: DEID_KEY,
    SCREENFORGE_API_TOKEN: TEST_TOKEN,
    SCREENFORGE_DATA_ROOT: dataRoot,
  };
  runCli(env, "simulate",
    "--seed", String(opts.seed ?? 9),
    "-n", String(opts.participants ?? 10));
  runCli(env, "ingest");
  const port = await freePort();
  const proc = spawn(
    "python3",
    ["-m", "screenforge.gateway.cli", "serve", "--port", String(port)],
    { env, stdio: ["ignore", "pipe", "pipe"] },
  );
  let tail = "";
  proc.stderr?.on("data", (chunk: Buffer) => {
    tail = (tail + chunk.toString()).slice(-4000);
  });
  const baseUrl = `http://127.0.0.1:${port}`;
  try {
    await waitForHealth(baseUrl, proc);
  } catch (err) {
    proc.kill();
    throw new Error(`${(err as Error).message}\nserver stderr:\n${tail}`);
  }
  return {
    baseUrl,
    token: TEST_TOKEN,
    dataRoot,
    stop: () =>
      new Promise<void>((resolve) => {
        proc.once("exit", () => {
          rmSync(dataRoot, { recursive: true, force: true });
          resolve();
        });
        proc.kill("SIGTERM");
        setTimeout(() => proc.kill("SIGKILL"), 5000).unref();
      }),
  };
}

export async function rawApi<T>(
  fixture: PlatformFixture,
  method: string,
  path: string,
  body?: unknown,
  headers: Record<string, string> = {},
): Promise<T> {
  const res = await fetch(fixture.baseUrl + path, {
    method,
    headers: {
      Authorization: `Bearer ${fixture.token}`,
      ...(body !== undefined ? { "Content-Type": "application/json" } : {}),
      ...headers,
    },
    body: body !== undefined ? JSON.stringify(body) : undefined,
  });
  const text = await res.text();
  if (!res.ok) {
    throw new Error(`${method} ${path} -> ${res.status}: ${text}`);
  }
  return JSON.parse(text) as T;
}

// Reference grayscale render: fetches the instance over the same API and
// produces the platform's PGM bytes for a given window.
export function referencePgm(
  fixture: PlatformFixture,
  studyUid: string,
  sopUid: string,
  wc: number,
  ww: number,
): Buffer {
  const script = [
    "import sys, urllib.request",
    "from screenforge.dicom import parse, render_preview, to_pgm",
    "url, token, wc, ww = sys.argv[1], sys.argv[2], float(sys.argv[3]), float(sys.argv[4])",
    "req = urllib.request.Request(url, headers={'Authorization': 'Bearer ' + token})",
    "data = urllib.request.urlopen(req).read()",
    "sys.stdout.buffer.write(to_pgm(render_preview(parse(data), wc, ww)))",
  ].join("\n");
  const url =
    `${fixture.baseUrl}/api/v1/studies/${encodeURIComponent(studyUid)}` +
    `/instances/${encodeURIComponent(sopUid)}`;
  const result = spawnSync(
    "python3",
    ["-c", script, url, fixture.token, String(wc), String(ww)],
    { maxBuffer: 64 * 1024 * 1024 },
  );
  if (result.status !== 0) {
    throw new Error(`reference render failed: ${result.stderr.toString()}`);
  }
  return result.stdout;
}

export interface Pgm {
  width: number;
  height: number;
  pixels: Buffer;
}

export function parsePgm(data: Buffer): Pgm {
  const header = data.subarray(0, 64).toString("latin1");
  const match = /^P5\n(\d+) (\d+)\n255\n/.exec(header);
  if (!match) throw new Error("not a P5 PGM");
  const width = Number(match[1]);
  const height = Number(match[2]);
  const offset = match[0].length;
  return { width, height, pixels: data.subarray(offset, offset + width * height) };
}
