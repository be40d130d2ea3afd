import { describe, expect, it, vi } from "vitest";

import { AnnotationApi, ApiError } from "../src/api.js";

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}

describe("AnnotationApi", () => {
  it("lists pairs", async () => {
    const fetchImpl = vi.fn().mockResolvedValue(
      jsonResponse({ pairs: [{ id: "p1", split: "dev", n_cells: 4, n_kb: 3, annotators: [], verified: false }] }),
    );
    const api = new AnnotationApi(fetchImpl);
    const pairs = await api.listPairs();
    expect(fetchImpl).toHaveBeenCalledWith("/api/pairs");
    expect(pairs[0].id).toBe("p1");
  });

  it("encodes the split filter", async () => {
    const fetchImpl = vi.fn().mockResolvedValue(jsonResponse({ pairs: [] }));
    await new AnnotationApi(fetchImpl).listPairs("dev");
    expect(fetchImpl).toHaveBeenCalledWith("/api/pairs?split=dev");
  });

  it("posts verdicts as JSON", async () => {
    const fetchImpl = vi.fn().mockResolvedValue(jsonResponse({ seq: 1 }));
    const api = new AnnotationApi(fetchImpl);
    const verdict = {
      annotator_id: "a",
      kb_decisions: [["s0", false]] as [string, boolean][],
      highlight_set: [[0, 0]] as [number, number][],
    };
    const ack = await api.postVerdict("p1", verdict);
    expect(ack.seq).toBe(1);
    const [url, init] = fetchImpl.mock.calls[0];
    expect(url).toBe("/api/pairs/p1/verdicts");
    expect(init.method).toBe("POST");
    expect(JSON.parse(init.body)).toEqual(verdict);
  });

  it("surfaces structured errors", async () => {
    const fetchImpl = vi.fn().mockResolvedValue(
      jsonResponse({ code: "not_found", message: "unknown pair 'zz'" }, 404),
    );
    const api = new AnnotationApi(fetchImpl);
    await expect(api.getPair("zz")).rejects.toMatchObject({
      status: 404,
      code: "not_found",
    } satisfies Partial<ApiError>);
  });

  it("reads agreement fractions", async () => {
    const fetchImpl = vi.fn().mockResolvedValue(
      jsonResponse({ n_samples: 100, cell_agreement: 0.667, kb_agreement: 0.706 }),
    );
    const report = await new AnnotationApi(fetchImpl).getAgreement("x", "y");
    expect(fetchImpl).toHaveBeenCalledWith("/api/agreement?a=x&b=y");
    expect(report.cell_agreement).toBe(0.667);
  });

  it("only postVerdict issues a mutating request", async () => {
    const fetchImpl = vi.fn().mockResolvedValue(jsonResponse({ pairs: [], verdicts: {} }));
    const api = new AnnotationApi(fetchImpl);
    await api.listPairs();
    await api.getAgreement("a", "b").catch(() => undefined);
    for (const [, init] of fetchImpl.mock.calls) {
      expect(init?.method ?? "GET").toBe("GET");
    }
  });
});
