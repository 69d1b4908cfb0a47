/**
 * Typed client for the /v1 prediction and curation API.
 *
 * Every method maps to exactly one endpoint and returns the parsed JSON
 * body. Non-2xx responses become ApiError (carrying the server's detail
 * string and status); transport failures are rethrown as NetworkError so
 * callers can tell "the service said no" from "the service is unreachable".
 */

export interface NeighborInfo {
  entry_id: number;
  similarity: number;
  label: number;
  provenance: 'source' | 'target';
}

export interface PredictionResponse {
  query_id: string;
  label: number;
  confidence: number;
  probs: number[];
  neighbors: NeighborInfo[];
}

export interface CommitResponse {
  inserted: boolean;
  entry_id?: number;
  margin: number;
}

export interface MemoryStats {
  size: number;
  source_count: number;
  target_count: number;
  dim: number;
  classes: number;
}

export interface EntryInfo {
  entry_id: number;
  label: number;
  provenance: 'source' | 'target';
  domain_id?: number;
  confidence?: number;
  feature?: number[];
}

export class ApiError extends Error {
  status: number;
  detail: string;
  code?: string;

  constructor(status: number, detail: string, code?: string) {
    super(`HTTP ${status}: ${detail}`);
    this.name = 'ApiError';
    this.status = status;
    this.detail = detail;
    this.code = code;
  }
}

export class NetworkError extends Error {
  constructor(cause: unknown) {
    super(`service unreachable: ${cause instanceof Error ? cause.message : String(cause)}`);
    this.name = 'NetworkError';
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  private base: string;
  private fetchFn: FetchLike;

  constructor(baseUrl: string, fetchFn?: FetchLike) {
    this.base = baseUrl.replace(/\/+$/, '');
    // bind so a bare window.fetch keeps its receiver
    this.fetchFn = fetchFn ?? ((input, init) => fetch(input, init));
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    let response: Response;
    try {
      response = await this.fetchFn(`${this.base}${path}`, {
        method,
        headers: body !== undefined ? { 'Content-Type': 'application/json' } : undefined,
        body: body !== undefined ? JSON.stringify(body) : undefined,
      });
    } catch (err) {
      throw new NetworkError(err);
    }
    if (!response.ok) {
      let detail = response.statusText;
      let code: string | undefined;
      try {
        const parsed = await response.json();
        if (parsed && typeof parsed.detail === 'string') detail = parsed.detail;
        if (parsed && typeof parsed.code === 'string') code = parsed.code;
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(response.status, detail, code);
    }
    return response.json() as Promise<T>;
  }

  predict(feature: number[], k?: number): Promise<PredictionResponse> {
    const body: { feature: number[]; k?: number } = { feature };
    if (k !== undefined) body.k = k;
    return this.request('POST', '/v1/predict', body);
  }

  curate(queryId: string, exclude: number[]): Promise<PredictionResponse> {
    return this.request('POST', '/v1/curate', { query_id: queryId, exclude });
  }

  curateClear(queryId: string): Promise<PredictionResponse> {
    return this.request('POST', '/v1/curate/clear', { query_id: queryId });
  }

  commit(queryId: string): Promise<CommitResponse> {
    return this.request('POST', '/v1/commit', { query_id: queryId });
  }

  stats(): Promise<MemoryStats> {
    return this.request('GET', '/v1/memory/stats');
  }

  entry(entryId: number, includeFeature = false): Promise<EntryInfo> {
    const suffix = includeFeature ? '?include_feature=1' : '';
    return this.request('GET', `/v1/entries/${entryId}${suffix}`);
  }
}
