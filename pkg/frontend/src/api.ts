/** Typed client for the annotation service; the only mutating call is
 * postVerdict. The fetch implementation is injectable for tests. */

import {
  AgreementPayload,
  PairDetail,
  PairSummary,
  VerdictPayload,
} from "./types.js";

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

async function parseError(response: Response): Promise<ApiError> {
  try {
    const body = await response.json();
    return new ApiError(response.status, body.code ?? "error", body.message ?? response.statusText);
  } catch {
    return new ApiError(response.status, "error", response.statusText);
  }
}

export class AnnotationApi {
  constructor(private readonly fetchImpl: FetchLike = (...args) => fetch(...args)) {}

  async listPairs(split?: string): Promise<PairSummary[]> {
    const url = split ? `/api/pairs?split=${encodeURIComponent(split)}` : "/api/pairs";
    const response = await this.fetchImpl(url);
    if (!response.ok) throw await parseError(response);
    const body = await response.json();
    return body.pairs as PairSummary[];
  }

  async getPair(id: string): Promise<PairDetail> {
    const response = await this.fetchImpl(`/api/pairs/${encodeURIComponent(id)}`);
    if (!response.ok) throw await parseError(response);
    return (await response.json()) as PairDetail;
  }

  async postVerdict(pairId: string, verdict: VerdictPayload): Promise<{ seq: number }> {
    const response = await this.fetchImpl(`/api/pairs/${encodeURIComponent(pairId)}/verdicts`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(verdict),
    });
    if (!response.ok) throw await parseError(response);
    return (await response.json()) as { seq: number };
  }

  async getAgreement(a: string, b: string): Promise<AgreementPayload> {
    const url = `/api/agreement?a=${encodeURIComponent(a)}&b=${encodeURIComponent(b)}`;
    const response = await this.fetchImpl(url);
    if (!response.ok) throw await parseError(response);
    return (await response.json()) as AgreementPayload;
  }
}
