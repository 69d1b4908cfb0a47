/**
 * Shared mounting and DOM-poking utilities for the UI tests. Everything
 * drives the app the way a user would: form submits and button clicks,
 * then waiting for the app to settle.
 */

import { ApiClient } from '../src/api.js';
import { App } from '../src/view.js';
import { EntryTable, RecordedStep, Script, scriptedFetch } from './replay.js';
import fixtureJson from './fixtures/demo.json';

export interface ScenarioFixture {
  steps: RecordedStep[];
  click_order?: number[];
  baseline_confidence?: number;
  oracle_confidence?: number;
  final_label?: number;
  toggle_id?: number;
}

export interface Fixture {
  margin: number;
  k: number;
  probe: number[];
  scenarios: Record<string, ScenarioFixture>;
  entries: EntryTable;
}

export const fixture = fixtureJson as unknown as Fixture;

export interface Mounted {
  app: App;
  root: HTMLElement;
  script: Script;
}

export async function mount(
  steps: RecordedStep[],
  entries: EntryTable = fixture.entries,
): Promise<Mounted> {
  const script = scriptedFetch(steps, entries);
  const root = document.createElement('div');
  document.body.appendChild(root);
  const app = new App(root, new ApiClient('http://svc.test', script.fetchFn));
  await app.init();
  await app.settle();
  return { app, root, script };
}

export async function submitQuery(ctx: Mounted, feature: number[], k: number): Promise<void> {
  const featureInput = ctx.root.querySelector('[data-field="feature-input"]') as HTMLInputElement;
  const kInput = ctx.root.querySelector('[data-field="k-input"]') as HTMLInputElement;
  featureInput.value = feature.join(', ');
  kInput.value = String(k);
  const form = ctx.root.querySelector('#query-form') as HTMLFormElement;
  form.dispatchEvent(new Event('submit', { bubbles: true, cancelable: true }));
  await ctx.app.settle();
}

export function field(root: HTMLElement, name: string): HTMLElement | null {
  return root.querySelector(`[data-field="${name}"]`);
}

export function text(root: HTMLElement, name: string): string {
  return field(root, name)?.textContent?.replace(/\s+/g, ' ').trim() ?? '';
}

export async function clickToggle(ctx: Mounted, entryId: number): Promise<void> {
  const btn = ctx.root.querySelector(
    `.card[data-entry-id="${entryId}"] button[data-action="toggle"]`,
  ) as HTMLButtonElement | null;
  if (!btn) throw new Error(`no card rendered for entry ${entryId}`);
  btn.click();
  await ctx.app.settle();
}

export async function clickAction(ctx: Mounted, action: string): Promise<void> {
  const btn = ctx.root.querySelector(
    `button[data-action="${action}"]`,
  ) as HTMLButtonElement | null;
  if (!btn) throw new Error(`no button for action ${action}`);
  btn.click();
  await ctx.app.settle();
}
