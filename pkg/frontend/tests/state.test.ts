import { describe, expect, it } from 'vitest';

import {
  QuerySession,
  errorRaised,
  highlightIndices,
  initialState,
  queryApplied,
  sceneLoaded,
} from '../src/state.js';

const controls = { text: 'chair', topK: 5, tau: 0.667, mode: 'soft' };

describe('view state', () => {
  it('highlight set equals exactly the point indices of the last response', () => {
    let state = sceneLoaded(initialState(), 'demo', 100);
    state = queryApplied(state, controls, {
      results: [
        { mask_id: 0, score: 0.9, point_indices: [1, 2, 3] },
        { mask_id: 2, score: 0.4, point_indices: [7] },
      ],
    });
    expect(highlightIndices(state)).toEqual(new Set([1, 2, 3, 7]));
  });

  it('a new response clears previous highlights entirely', () => {
    let state = sceneLoaded(initialState(), 'demo', 100);
    state = queryApplied(state, controls, { results: [{ mask_id: 0, score: 1, point_indices: [5] }] });
    state = queryApplied(state, { ...controls, text: 'table' }, { results: [{ mask_id: 1, score: 1, point_indices: [9] }] });
    expect(highlightIndices(state)).toEqual(new Set([9]));
  });

  it('controls mirror the last request sent', () => {
    let state = sceneLoaded(initialState(), 'demo', 10);
    state = queryApplied(state, { ...controls, tau: 0.85 }, { results: [] });
    expect(state.lastControls).toEqual({ text: 'chair', topK: 5, tau: 0.85, mode: 'soft' });
  });

  it('loading a scene resets highlights and errors', () => {
    let state = queryApplied(sceneLoaded(initialState(), 'a', 10), controls, {
      results: [{ mask_id: 0, score: 1, point_indices: [0] }],
    });
    state = errorRaised(state, 'boom');
    state = sceneLoaded(state, 'b', 20);
    expect(state.highlights).toEqual([]);
    expect(state.error).toBeNull();
    expect(state.pointCount).toBe(20);
  });
});

describe('query session', () => {
  it('aborts the previous in-flight query when a new one begins', () => {
    const session = new QuerySession();
    const first = session.begin();
    expect(first.aborted).toBe(false);
    const second = session.begin();
    expect(first.aborted).toBe(true);
    expect(second.aborted).toBe(false);
  });

  it('tracks pending state', () => {
    const session = new QuerySession();
    expect(session.pending).toBe(false);
    session.begin();
    expect(session.pending).toBe(true);
    session.finish();
    expect(session.pending).toBe(false);
  });
});
