/**
 * View state: all semantics come from the service. The highlight set is
 * always exactly the point indices of the last response, and the recorded
 * controls always mirror the last request actually sent.
 */

import type { QueryItem, QueryResponse } from './api.js';

export interface QueryControls {
  text: string;
  topK: number;
  tau: number;
  mode: string;
}

export interface ViewState {
  sceneId: string | null;
  pointCount: number;
  lastControls: QueryControls | null;
  highlights: readonly QueryItem[];
  error: string | null;
}

export function initialState(): ViewState {
  return { sceneId: null, pointCount: 0, lastControls: null, highlights: [], error: null };
}

export function sceneLoaded(state: ViewState, sceneId: string, pointCount: number): ViewState {
  return { ...state, sceneId, pointCount, highlights: [], lastControls: null, error: null };
}

export function queryApplied(state: ViewState, controls: QueryControls, response: QueryResponse): ViewState {
  return { ...state, lastControls: { ...controls }, highlights: response.results, error: null };
}

export function errorRaised(state: ViewState, message: string): ViewState {
  return { ...state, error: message };
}

export function highlightIndices(state: ViewState): Set<number> {
  const set = new Set<number>();
  for (const item of state.highlights) {
    for (const index of item.point_indices) set.add(index);
  }
  return set;
}

/** At most one query in flight: beginning a new one aborts the previous. */
export class QuerySession {
  private controller: AbortController | null = null;

  begin(): AbortSignal {
    this.controller?.abort();
    this.controller = new AbortController();
    return this.controller.signal;
  }

  finish(): void {
    this.controller = null;
  }

  get pending(): boolean {
    return this.controller !== null;
  }
}
