import { describe, expect, it } from 'vitest';
import { clickAction, clickToggle, field, fixture, mount, submitQuery, text } from './helpers.js';
import { PredictionResponse } from '../src/api.js';

const scenarios = fixture.scenarios;

describe('rendering', () => {
  it('shows bank stats and a hint before the first query', async () => {
    const scen = scenarios.below_margin;
    const ctx = await mount(scen.steps.slice(0, 1));
    expect(text(ctx.root, 'stats')).toContain('entries');
    expect(ctx.root.textContent).toContain('submit a query');
    ctx.script.assertDone();
  });

  it('renders neighbor cards sorted by similarity, with provenance badges', async () => {
    const scen = scenarios.involution; // its top neighbor is a committed target entry
    const ctx = await mount(scen.steps.slice(0, 2));
    await submitQuery(ctx, fixture.probe, fixture.k);

    const resp = scen.steps[1].response as PredictionResponse;
    const cards = [...ctx.root.querySelectorAll('.card')];
    const shownIds = cards.map((c) => parseInt(c.getAttribute('data-entry-id')!, 10));
    const sims = resp.neighbors
      .slice()
      .sort((a, b) => b.similarity - a.similarity)
      .map((n) => n.entry_id);
    expect(shownIds).toEqual(sims);

    const topBadge = cards[0].querySelector('.badge')!;
    expect(topBadge.textContent!.trim()).toBe('target');
    expect(cards[1].querySelector('.badge')!.textContent!.trim()).toBe('source');
    ctx.script.assertDone();
  });

  it('rejects a malformed feature without calling the service', async () => {
    const scen = scenarios.below_margin;
    const ctx = await mount(scen.steps.slice(0, 1));
    await submitQuery(ctx, [1], fixture.k); // wrong dimension, parsed client-side
    expect(text(ctx.root, 'error')).toContain('enter 2 numbers');
    ctx.script.assertDone(); // only the stats call went out
  });

  it('clear button is gated on having exclusions and restores the original view', async () => {
    const scen = scenarios.involution;
    const ctx = await mount(scen.steps);
    await submitQuery(ctx, fixture.probe, fixture.k);
    const original = scen.steps[1].response as PredictionResponse;

    let clearBtn = ctx.root.querySelector('button[data-action="clear"]') as HTMLButtonElement;
    expect(clearBtn.disabled).toBe(true);

    await clickToggle(ctx, scen.toggle_id!);
    clearBtn = ctx.root.querySelector('button[data-action="clear"]') as HTMLButtonElement;
    expect(clearBtn.disabled).toBe(false);

    await clickAction(ctx, 'clear');
    expect(ctx.app.session.current).toEqual(original);
    expect(ctx.root.querySelectorAll('.card[data-excluded="true"]').length).toBe(0);
    ctx.script.assertDone();
  });

  it('draws the 2-D scatter with hollow marks for excluded neighbors', async () => {
    const scen = scenarios.raise_confidence;
    const ctx = await mount(scen.steps.slice(0, 3));
    await submitQuery(ctx, fixture.probe, fixture.k);

    let svg = field(ctx.root, 'scatter')!.querySelector('svg')!;
    expect(svg.querySelectorAll('circle').length).toBe(fixture.k);
    expect(svg.querySelector('g.query-mark')).not.toBeNull();

    const firstWrong = scen.click_order![0];
    await clickToggle(ctx, firstWrong);
    svg = field(ctx.root, 'scatter')!.querySelector('svg')!;
    // refilled to k visible plus one hollow excluded mark
    expect(svg.querySelectorAll('circle').length).toBe(fixture.k + 1);
    const hollow = svg.querySelector(`circle[data-entry-id="${firstWrong}"]`)!;
    expect(hollow.getAttribute('fill')).toBe('none');
    expect(hollow.getAttribute('data-excluded')).toBe('true');
    ctx.script.assertDone();
  });

  it('keeps a readable action history', async () => {
    const scen = scenarios.raise_confidence;
    const ctx = await mount(scen.steps.slice(0, 3));
    await submitQuery(ctx, fixture.probe, fixture.k);
    await clickToggle(ctx, scen.click_order![0]);

    const items = [...field(ctx.root, 'history')!.querySelectorAll('li')].map(
      (li) => li.textContent!,
    );
    expect(items.length).toBe(2);
    expect(items[0]).toContain('predict');
    expect(items[1]).toContain(`excluded entry ${scen.click_order![0]}`);
    ctx.script.assertDone();
  });

  it('shows a fatal message when the service is unreachable at startup', async () => {
    const root = document.createElement('div');
    document.body.appendChild(root);
    const { App } = await import('../src/view.js');
    const { ApiClient } = await import('../src/api.js');
    const app = new App(
      root,
      new ApiClient('http://svc.test', () => Promise.reject(new TypeError('fetch failed'))),
    );
    await app.init();
    expect(text(root, 'fatal')).toContain('cannot reach the service');
  });
});
