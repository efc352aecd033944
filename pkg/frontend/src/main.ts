/** DOM wiring: scene picker, query box, tau/top-k/mode controls, results. */

import { ApiClient, ApiError } from './api.js';
import type { ScenePoints } from './api.js';
import { applyHighlights } from './palette.js';
import { PointCloudViewer } from './viewer.js';
import { QuerySession, ViewState, errorRaised, initialState, queryApplied, sceneLoaded } from './state.js';

const api = new ApiClient('');
const session = new QuerySession();
let state: ViewState = initialState();
let current: ScenePoints | null = null;

const el = {
  scene: document.querySelector<HTMLSelectElement>('#scene')!,
  text: document.querySelector<HTMLInputElement>('#text')!,
  topK: document.querySelector<HTMLInputElement>('#topk')!,
  tau: document.querySelector<HTMLInputElement>('#tau')!,
  tauValue: document.querySelector<HTMLSpanElement>('#tau-value')!,
  mode: document.querySelector<HTMLSelectElement>('#mode')!,
  submit: document.querySelector<HTMLButtonElement>('#submit')!,
  banner: document.querySelector<HTMLDivElement>('#banner')!,
  status: document.querySelector<HTMLDivElement>('#status')!,
  results: document.querySelector<HTMLOListElement>('#results')!,
  canvasHost: document.querySelector<HTMLDivElement>('#canvas')!,
};

const viewer = new PointCloudViewer(el.canvasHost);

function showBanner(message: string | null): void {
  el.banner.textContent = message ?? '';
  el.banner.style.display = message ? 'block' : 'none';
}

function renderResults(): void {
  el.results.replaceChildren(
    ...state.highlights.map((item, rank) => {
      const li = document.createElement('li');
      li.textContent = `mask ${item.mask_id}: score ${item.score.toFixed(4)} (${item.point_indices.length} pts)`;
      li.className = `rank-${Math.min(rank, 5)}`;
      return li;
    }),
  );
}

async function loadScene(sceneId: string): Promise<void> {
  try {
    current = await api.fetchPoints(sceneId);
    state = sceneLoaded(state, sceneId, current.count);
    viewer.setScene(current);
    el.status.textContent = `${current.count} points`;
    showBanner(null);
    renderResults();
  } catch (err) {
    showBanner(err instanceof ApiError ? `scene load failed: ${err.message}` : `network failure: ${err}`);
  }
}

async function submitQuery(): Promise<void> {
  if (!state.sceneId || !current) {
    showBanner('load a scene first');
    return;
  }
  const text = el.text.value;
  if (!text.trim()) {
    showBanner('query text must be non-empty');
    return; // client-side validation, no request
  }
  const controls = {
    text,
    topK: Number(el.topK.value),
    tau: Number(el.tau.value),
    mode: el.mode.value,
  };
  const signal = session.begin();
  try {
    const response = await api.query(
      { scene_id: state.sceneId, text: controls.text, top_k: controls.topK, tau: controls.tau, mode: controls.mode },
      signal,
    );
    session.finish();
    state = queryApplied(state, controls, response);
    viewer.setColors(applyHighlights(current.colors, state.highlights));
    showBanner(null);
    renderResults();
  } catch (err) {
    if (err instanceof DOMException && err.name === 'AbortError') return; // superseded
    session.finish();
    state = errorRaised(state, String(err));
    showBanner(err instanceof ApiError ? `query rejected: ${err.message}` : `network failure: ${err}`);
  }
}

async function boot(): Promise<void> {
  el.tau.addEventListener('input', () => (el.tauValue.textContent = el.tau.value));
  el.tauValue.textContent = el.tau.value;
  el.submit.addEventListener('click', () => void submitQuery());
  el.text.addEventListener('keydown', (e) => {
    if (e.key === 'Enter') void submitQuery();
  });
  el.scene.addEventListener('change', () => void loadScene(el.scene.value));
  try {
    const scenes = await api.listScenes();
    el.scene.replaceChildren(
      ...scenes.map((id) => {
        const opt = document.createElement('option');
        opt.value = id;
        opt.textContent = id;
        return opt;
      }),
    );
    if (scenes.length) await loadScene(scenes[0]);
    else showBanner('service reports no scenes');
  } catch (err) {
    showBanner(`cannot reach service: ${err}`);
  }
}

void boot();
