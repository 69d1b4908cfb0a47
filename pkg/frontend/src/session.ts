/**
 * Client-side state for one curation session.
 *
 * The session never computes predictions itself: label, confidence, probs
 * and similarities always come from the last service response. What it adds
 * is bookkeeping: which entries the user has excluded (so their cards stay
 * visible, flagged, after the server refills the neighbor list), the
 * original uncurated prediction for the confidence-delta indicator, and a
 * history of actions.
 *
 * Toggling a neighbor OFF issues one accumulating /v1/curate call. Toggling
 * it back ON has no single-id inverse on the wire, so it replays the intent:
 * /v1/curate/clear followed by one /v1/curate with the remaining exclusions
 * (or nothing, when none remain). If any call fails mid-sequence the server
 * and client may disagree; the session then marks itself out-of-sync and the
 * next mutation uses the same clear-and-replay form, which converges from
 * any server state.
 */

import {
  ApiClient,
  ApiError,
  NetworkError,
  NeighborInfo,
  PredictionResponse,
} from './api.js';

export interface NeighborCard extends NeighborInfo {
  excluded: boolean;
}

export type CommitOutcome =
  | { kind: 'inserted'; entryId: number; margin: number }
  | { kind: 'blocked'; margin: number };

export interface PendingRetry {
  message: string;
  run: () => Promise<void>;
}

export class CurationSession {
  private api: ApiClient;
  private lastFeature: number[] | null = null;
  private lastK: number | undefined;
  private excludedInfo = new Map<number, NeighborInfo>();
  private synced = true;

  current: PredictionResponse | null = null;
  baseline: { label: number; confidence: number } | null = null;
  commitOutcome: CommitOutcome | null = null;
  needsRepredict = false;
  failed: PendingRetry | null = null;
  busy = false;
  history: string[] = [];

  constructor(api: ApiClient) {
    this.api = api;
  }

  get excludedIds(): number[] {
    return [...this.excludedInfo.keys()].sort((a, b) => a - b);
  }

  get queryFeature(): number[] | null {
    return this.lastFeature ? this.lastFeature.slice() : null;
  }

  /** Current + excluded neighbors, similarity descending. */
  get cards(): NeighborCard[] {
    if (!this.current) return [];
    const cards: NeighborCard[] = this.current.neighbors.map((n) => ({
      ...n,
      excluded: false,
    }));
    for (const info of this.excludedInfo.values()) {
      cards.push({ ...info, excluded: true });
    }
    cards.sort((a, b) => b.similarity - a.similarity);
    return cards;
  }

  /** Votes per label among the served (non-excluded) neighbors. */
  get tally(): Map<number, number> {
    const counts = new Map<number, number>();
    for (const n of this.current?.neighbors ?? []) {
      counts.set(n.label, (counts.get(n.label) ?? 0) + 1);
    }
    return counts;
  }

  /** Confidence change versus the uncurated prediction, or null before one exists. */
  get confidenceDelta(): number | null {
    if (!this.current || !this.baseline) return null;
    return this.current.confidence - this.baseline.confidence;
  }

  async predict(feature: number[], k?: number): Promise<void> {
    await this.guard(`predict (${feature.length}-d query)`, async () => {
      const resp = await this.api.predict(feature, k);
      this.lastFeature = feature.slice();
      this.lastK = k;
      this.current = resp;
      this.baseline = { label: resp.label, confidence: resp.confidence };
      this.excludedInfo.clear();
      this.synced = true;
      this.commitOutcome = null;
      this.needsRepredict = false;
      this.note(`predict ${resp.query_id}: label ${resp.label}, confidence ${resp.confidence.toFixed(4)}`);
    });
  }

  /** Exclude a served neighbor, or restore a previously excluded one. */
  async toggle(entryId: number): Promise<void> {
    const query = this.requireQuery();
    if (this.excludedInfo.has(entryId)) {
      await this.guard(`restore entry ${entryId}`, async () => {
        const info = this.excludedInfo.get(entryId)!;
        this.excludedInfo.delete(entryId);
        try {
          this.current = await this.replayExclusions(query);
        } catch (err) {
          this.excludedInfo.set(entryId, info); // roll the optimistic removal back
          throw err;
        }
        this.note(`restored entry ${entryId}`);
      });
      return;
    }
    const info = this.current!.neighbors.find((n) => n.entry_id === entryId);
    if (!info) throw new Error(`entry ${entryId} is not a current neighbor`);
    await this.guard(`exclude entry ${entryId}`, async () => {
      this.excludedInfo.set(entryId, info);
      try {
        this.current = this.synced
          ? await this.api.curate(query, [entryId])
          : await this.replayExclusions(query);
      } catch (err) {
        this.excludedInfo.delete(entryId);
        throw err;
      }
      this.synced = true;
      this.note(`excluded entry ${entryId} (label ${info.label})`);
    });
  }

  /** Drop every exclusion and restore the original neighbor set. */
  async clearAll(): Promise<void> {
    const query = this.requireQuery();
    await this.guard('clear exclusions', async () => {
      this.current = await this.api.curateClear(query);
      this.excludedInfo.clear();
      this.synced = true;
      this.note('cleared all exclusions');
    });
  }

  /** Commit the current (post-curation) prediction to the memory bank. */
  async commit(): Promise<void> {
    const query = this.requireQuery();
    await this.guard('commit', async () => {
      if (!this.synced) {
        this.current = await this.replayExclusions(query);
        this.synced = true;
      }
      try {
        const resp = await this.api.commit(query);
        this.commitOutcome = resp.inserted
          ? { kind: 'inserted', entryId: resp.entry_id!, margin: resp.margin }
          : { kind: 'blocked', margin: resp.margin };
        this.note(
          resp.inserted
            ? `committed as entry ${resp.entry_id}`
            : `commit blocked: confidence below margin ${resp.margin}`,
        );
      } catch (err) {
        if (err instanceof ApiError && err.status === 409) {
          this.needsRepredict = true;
          this.note('commit rejected: memory changed, re-predict needed');
          return;
        }
        throw err;
      }
    });
  }

  /** Re-run the last query, e.g. after a 409 commit. */
  async repredict(): Promise<void> {
    if (!this.lastFeature) throw new Error('nothing to re-predict');
    await this.predict(this.lastFeature, this.lastK);
  }

  private requireQuery(): string {
    if (!this.current) throw new Error('no active query');
    return this.current.query_id;
  }

  /** clear + one curate with the full intended exclusion set. */
  private async replayExclusions(query: string): Promise<PredictionResponse> {
    const cleared = await this.api.curateClear(query);
    const ids = this.excludedIds;
    if (ids.length === 0) return cleared;
    return this.api.curate(query, ids);
  }

  private async guard(what: string, op: () => Promise<void>): Promise<void> {
    if (this.busy) return;
    this.busy = true;
    this.failed = null;
    try {
      await op();
    } catch (err) {
      if (err instanceof NetworkError || err instanceof ApiError) {
        if (err instanceof NetworkError) this.synced = false;
        this.failed = {
          message: `${what} failed: ${err instanceof ApiError ? err.detail : err.message}`,
          run: op,
        };
        return;
      }
      throw err;
    } finally {
      this.busy = false;
    }
  }

  async retry(): Promise<void> {
    const pending = this.failed;
    if (!pending) return;
    this.note(`retrying: ${pending.message.split(' failed')[0]}`);
    await this.guard(pending.message.split(' failed')[0], pending.run);
  }

  private note(line: string): void {
    this.history.push(line);
  }
}
