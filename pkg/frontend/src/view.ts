/**
 * DOM layer: renders the session state into a root element and wires user
 * actions back to it. No prediction math happens here; numbers shown are
 * the service's, the only client arithmetic is the confidence delta between
 * two served values.
 */

import { ApiClient, MemoryStats } from './api.js';
import { CurationSession, NeighborCard } from './session.js';

const PALETTE = [
  '#1f77b4', '#ff7f0e', '#2ca02c', '#d62728', '#9467bd',
  '#8c564b', '#e377c2', '#7f7f7f', '#bcbd22', '#17becf',
];

export function fmtConfidence(v: number): string {
  return v.toFixed(4);
}

export function fmtMargin(v: number): string {
  return String(parseFloat(v.toFixed(4)));
}

function fmtDelta(v: number): string {
  const s = fmtConfidence(Math.abs(v));
  if (v > 0) return `+${s}`;
  if (v < 0) return `-${s}`;
  return `no change`;
}

function colorFor(label: number): string {
  return PALETTE[label % PALETTE.length];
}

function esc(s: string): string {
  return s.replace(/&/g, '&amp;').replace(/</g, '&lt;').replace(/>/g, '&gt;');
}

export class App {
  readonly session: CurationSession;
  stats: MemoryStats | null = null;

  private root: HTMLElement;
  private api: ApiClient;
  private out!: HTMLElement;
  private featureCache = new Map<number, number[]>();
  private renderGen = 0;
  private pendingScatter: Promise<void> = Promise.resolve();
  private pendingOp: Promise<void> = Promise.resolve();

  constructor(root: HTMLElement, api: ApiClient) {
    this.root = root;
    this.api = api;
    this.session = new CurationSession(api);
  }

  async init(): Promise<void> {
    try {
      this.stats = await this.api.stats();
    } catch (err) {
      this.root.innerHTML = `<p class="fatal" data-field="fatal">cannot reach the service: ${esc(String(err))}</p>`;
      return;
    }
    this.buildShell();
    this.render();
  }

  /** Resolves when in-flight actions and scatter fetches have finished. */
  async settle(): Promise<void> {
    await this.pendingOp;
    await this.pendingScatter;
  }

  private buildShell(): void {
    const s = this.stats!;
    this.root.innerHTML = `
      <header>
        <h1>neighbor curation</h1>
        <p data-field="stats">${s.size} entries (${s.source_count} source, ${s.target_count} target),
          dim ${s.dim}, ${s.classes} classes</p>
      </header>
      <form id="query-form">
        <label>feature (${s.dim} comma-separated values)
          <input name="feature" data-field="feature-input" placeholder="${'0, '.repeat(s.dim - 1)}0" />
        </label>
        <label>k <input name="k" data-field="k-input" type="number" min="1" value="10" size="4" /></label>
        <button type="submit" data-field="predict-btn">predict</button>
      </form>
      <div id="output"></div>`;
    this.out = this.root.querySelector('#output') as HTMLElement;

    const form = this.root.querySelector('#query-form') as HTMLFormElement;
    form.addEventListener('submit', (ev) => {
      ev.preventDefault();
      const raw = (form.elements.namedItem('feature') as HTMLInputElement).value;
      const feature = raw.split(',').map((t) => parseFloat(t.trim()));
      if (feature.length !== this.stats!.dim || feature.some((v) => !isFinite(v))) {
        this.out.innerHTML = `<p class="error" data-field="error">enter ${this.stats!.dim} numbers</p>`;
        return;
      }
      const kRaw = (form.elements.namedItem('k') as HTMLInputElement).value;
      const k = kRaw ? parseInt(kRaw, 10) : undefined;
      this.dispatch(() => this.session.predict(feature, k));
    });

    this.out.addEventListener('click', (ev) => {
      const btn = (ev.target as HTMLElement).closest('button[data-action]');
      if (!btn) return;
      const action = btn.getAttribute('data-action')!;
      if (action === 'toggle') {
        const id = parseInt(btn.getAttribute('data-id')!, 10);
        this.dispatch(() => this.session.toggle(id));
      } else if (action === 'clear') {
        this.dispatch(() => this.session.clearAll());
      } else if (action === 'commit') {
        this.dispatch(() => this.session.commit());
      } else if (action === 'retry') {
        this.dispatch(() => this.session.retry());
      } else if (action === 'repredict') {
        this.dispatch(() => this.session.repredict());
      }
    });
  }

  private dispatch(op: () => Promise<void>): void {
    this.pendingOp = op()
      .catch((err) => {
        console.error(err);
      })
      .then(() => this.render());
  }

  render(): void {
    const ses = this.session;
    const gen = ++this.renderGen;
    const parts: string[] = [];

    if (ses.failed) {
      parts.push(`
        <div class="banner error" data-field="error">
          <span>${esc(ses.failed.message)}</span>
          <button data-action="retry" data-field="retry-btn">retry</button>
        </div>`);
    }
    if (ses.needsRepredict) {
      parts.push(`
        <div class="banner warn" data-field="repredict-prompt">
          <span>the memory bank changed since this prediction; re-predict to continue</span>
          <button data-action="repredict" data-field="repredict-btn">re-predict</button>
        </div>`);
    }

    if (ses.current) {
      parts.push(this.predictionPanel());
      parts.push(this.neighborPanel());
      if (this.stats && this.stats.dim <= 2) {
        parts.push(`<div id="scatter" data-field="scatter"></div>`);
      }
      parts.push(this.commitPanel());
    } else {
      parts.push(`<p class="hint">submit a query to see its nearest neighbors</p>`);
    }

    if (ses.history.length) {
      parts.push(`
        <section class="history">
          <h2>history</h2>
          <ol data-field="history">
            ${ses.history.map((h) => `<li>${esc(h)}</li>`).join('')}
          </ol>
        </section>`);
    }

    this.out.innerHTML = parts.join('\n');
    if (ses.current && this.stats && this.stats.dim <= 2) {
      this.pendingScatter = this.fillScatter(gen);
    }
  }

  private predictionPanel(): string {
    const cur = this.session.current!;
    const delta = this.session.confidenceDelta!;
    const probRows = cur.probs
      .map(
        (p, c) => `
        <div class="prob-row">
          <span class="swatch" style="background:${colorFor(c)}"></span>
          <span>class ${c}</span>
          <div class="bar"><div class="fill" style="width:${(p * 100).toFixed(1)}%"></div></div>
          <span>${p.toFixed(3)}</span>
        </div>`,
      )
      .join('');
    return `
      <section class="prediction">
        <h2>prediction <small>${esc(cur.query_id)}</small></h2>
        <p>label <strong data-field="label">${cur.label}</strong>,
          confidence <strong data-field="confidence">${fmtConfidence(cur.confidence)}</strong>
          <span class="delta ${delta > 0 ? 'up' : delta < 0 ? 'down' : ''}"
                data-field="delta">${fmtDelta(delta)}</span>
        </p>
        <div class="probs">${probRows}</div>
      </section>`;
  }

  private neighborPanel(): string {
    const tally = [...this.session.tally.entries()]
      .sort((a, b) => a[0] - b[0])
      .map(([label, n]) => `${n} vote${n === 1 ? '' : 's'} for class ${label}`)
      .join(', ');
    const cards = this.session.cards.map((c) => this.card(c)).join('');
    return `
      <section class="neighbors">
        <h2>neighbors</h2>
        <p class="tally" data-field="tally">${tally}</p>
        <div class="cards">${cards}</div>
        <button data-action="clear" data-field="clear-btn"
          ${this.session.excludedIds.length ? '' : 'disabled'}>clear exclusions</button>
      </section>`;
  }

  private card(c: NeighborCard): string {
    return `
      <div class="card${c.excluded ? ' excluded' : ''}" data-field="card"
           data-entry-id="${c.entry_id}" data-label="${c.label}" data-excluded="${c.excluded}">
        <span class="swatch" style="background:${colorFor(c.label)}"></span>
        <span class="entry">entry ${c.entry_id}</span>
        <span class="label">class ${c.label}</span>
        <span class="sim">sim ${c.similarity.toFixed(3)}</span>
        <span class="badge ${c.provenance}">${c.provenance}</span>
        <button data-action="toggle" data-id="${c.entry_id}">
          ${c.excluded ? 'restore' : 'exclude'}
        </button>
      </div>`;
  }

  private commitPanel(): string {
    const out = this.session.commitOutcome;
    let status = '';
    if (out?.kind === 'inserted') {
      status = `<span class="ok" data-field="commit-status">stored as entry ${out.entryId}</span>`;
    } else if (out?.kind === 'blocked') {
      status = `<span class="blocked" data-field="commit-status">not stored (below margin ${fmtMargin(out.margin)})</span>`;
    }
    return `
      <section class="commit">
        <button data-action="commit" data-field="commit-btn"
          ${this.session.needsRepredict ? 'disabled' : ''}>commit prediction</button>
        ${status}
      </section>`;
  }

  /** 2-D preview: served neighbor coordinates plus the query point. */
  private async fillScatter(gen: number): Promise<void> {
    const cards = this.session.cards;
    const coords = new Map<number, number[]>();
    for (const c of cards) {
      if (!this.featureCache.has(c.entry_id)) {
        try {
          const info = await this.api.entry(c.entry_id, true);
          this.featureCache.set(c.entry_id, info.feature ?? []);
        } catch {
          return; // preview is best-effort; the table is authoritative
        }
      }
      coords.set(c.entry_id, this.featureCache.get(c.entry_id)!);
    }
    if (gen !== this.renderGen) return; // a newer render superseded this one
    const holder = this.out.querySelector('#scatter');
    if (!holder) return;
    holder.innerHTML = this.scatterSvg(cards, coords);
  }

  private scatterSvg(cards: NeighborCard[], coords: Map<number, number[]>): string {
    const query = this.session.queryFeature;
    const pts: { x: number; y: number }[] = [];
    const at = (f: number[]) => ({ x: f[0] ?? 0, y: f[1] ?? 0 });
    for (const f of coords.values()) pts.push(at(f));
    if (query) pts.push(at(query));
    if (!pts.length) return '';
    const xs = pts.map((p) => p.x);
    const ys = pts.map((p) => p.y);
    const pad = 0.12;
    const spanX = Math.max(Math.max(...xs) - Math.min(...xs), 1e-9);
    const spanY = Math.max(Math.max(...ys) - Math.min(...ys), 1e-9);
    const x0 = Math.min(...xs) - pad * spanX;
    const y0 = Math.min(...ys) - pad * spanY;
    const W = 320;
    const H = 280;
    const sx = (v: number) => ((v - x0) / (spanX * (1 + 2 * pad))) * W;
    const sy = (v: number) => H - ((v - y0) / (spanY * (1 + 2 * pad))) * H;

    const marks: string[] = [];
    for (const c of cards) {
      const f = coords.get(c.entry_id);
      if (!f) continue;
      const { x, y } = at(f);
      const fill = c.excluded ? 'none' : colorFor(c.label);
      marks.push(
        `<circle cx="${sx(x).toFixed(1)}" cy="${sy(y).toFixed(1)}" r="5" fill="${fill}"` +
          ` stroke="${colorFor(c.label)}" stroke-width="1.5" data-entry-id="${c.entry_id}"` +
          ` data-excluded="${c.excluded}"><title>entry ${c.entry_id}, class ${c.label},` +
          ` sim ${c.similarity.toFixed(3)}</title></circle>`,
      );
    }
    if (query) {
      const { x, y } = at(query);
      const cx = sx(x);
      const cy = sy(y);
      marks.push(
        `<g class="query-mark"><line x1="${cx - 6}" y1="${cy}" x2="${cx + 6}" y2="${cy}"/>` +
          `<line x1="${cx}" y1="${cy - 6}" x2="${cx}" y2="${cy + 6}"/></g>`,
      );
    }
    return `<svg viewBox="0 0 ${W} ${H}" width="${W}" height="${H}" role="img">${marks.join('')}</svg>`;
  }
}
