/**
 * Scripted fetch for replaying recorded service traffic.
 *
 * The curation endpoints are order-sensitive (exclusions accumulate server
 * side), so those are matched as an ordered script: each outgoing request
 * must equal the next recorded step. Entry lookups are immutable and served
 * from an unordered table so the scatter preview can fetch them at any time.
 *
 * Mismatches are collected and thrown; call assertDone() at the end of a
 * test to surface the first one and to check the script was fully consumed.
 */

import type { FetchLike } from '../src/api.js';

export interface RecordedStep {
  method: string;
  path: string;
  body?: unknown;
  status: number;
  response: unknown;
  /** synthetic steps only: reject as if the connection dropped */
  networkError?: boolean;
}

export type EntryTable = Record<string, unknown>;

function deepEqual(a: unknown, b: unknown): boolean {
  if (Object.is(a, b)) return true;
  if (typeof a !== 'object' || typeof b !== 'object' || a === null || b === null) return false;
  if (Array.isArray(a) !== Array.isArray(b)) return false;
  const ka = Object.keys(a as object);
  const kb = Object.keys(b as object);
  if (ka.length !== kb.length) return false;
  return ka.every((k) =>
    deepEqual((a as Record<string, unknown>)[k], (b as Record<string, unknown>)[k]),
  );
}

function jsonResponse(status: number, payload: unknown): Response {
  return new Response(JSON.stringify(payload), {
    status,
    headers: { 'Content-Type': 'application/json' },
  });
}

export interface Script {
  fetchFn: FetchLike;
  /** requests made, as "METHOD /path" lines (entry lookups included) */
  calls: string[];
  remaining(): number;
  assertDone(): void;
}

export function scriptedFetch(steps: RecordedStep[], entries?: EntryTable): Script {
  let cursor = 0;
  const calls: string[] = [];
  const errors: string[] = [];

  const fail = (msg: string): never => {
    errors.push(msg);
    throw new Error(`script mismatch: ${msg}`);
  };

  const fetchFn: FetchLike = async (input, init) => {
    const url = new URL(input);
    const path = url.pathname + url.search;
    const method = (init?.method ?? 'GET').toUpperCase();
    calls.push(`${method} ${path}`);

    const entryMatch = path.match(/^\/v1\/entries\/(\d+)\?include_feature=1$/);
    if (entryMatch && entries) {
      const record = entries[entryMatch[1]];
      if (record === undefined) {
        return jsonResponse(404, { detail: `unknown entry_id ${entryMatch[1]}` });
      }
      return jsonResponse(200, record);
    }

    const step = steps[cursor];
    if (!step) return fail(`request past end of script: ${method} ${path}`);
    cursor += 1;
    if (step.networkError) throw new TypeError('fetch failed');
    if (method !== step.method || path !== step.path) {
      return fail(`expected ${step.method} ${step.path}, got ${method} ${path}`);
    }
    const sent = init?.body !== undefined ? JSON.parse(init.body as string) : undefined;
    if (!deepEqual(sent, step.body)) {
      return fail(
        `${method} ${path}: body ${JSON.stringify(sent)} != recorded ${JSON.stringify(step.body)}`,
      );
    }
    return jsonResponse(step.status, step.response);
  };

  return {
    fetchFn,
    calls,
    remaining: () => steps.length - cursor,
    assertDone: () => {
      if (errors.length) throw new Error(errors[0]);
      if (cursor !== steps.length) {
        throw new Error(`script has ${steps.length - cursor} unconsumed steps`);
      }
    },
  };
}
