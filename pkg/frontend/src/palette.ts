/** Rank palette: top-1 red, then descending warmth (cycling past the end). */

import type { QueryItem } from './api.js';

export type Rgb = readonly [number, number, number];

export const RANK_PALETTE: readonly Rgb[] = [
  [255, 0, 0],
  [255, 128, 0],
  [255, 220, 0],
  [128, 255, 0],
  [0, 255, 160],
  [0, 160, 255],
];

export function rankColor(rank: number): Rgb {
  return RANK_PALETTE[rank % RANK_PALETTE.length];
}

/**
 * Tint the highlighted points of a base color buffer.
 *
 * Items are applied worst-rank first so that on overlap the better rank
 * wins; untouched points keep their base color.
 */
export function applyHighlights(baseColors: Uint8Array, items: readonly QueryItem[]): Uint8Array {
  const out = baseColors.slice();
  for (let rank = items.length - 1; rank >= 0; rank--) {
    const [r, g, b] = rankColor(rank);
    for (const index of items[rank].point_indices) {
      out[index * 3] = r;
      out[index * 3 + 1] = g;
      out[index * 3 + 2] = b;
    }
  }
  return out;
}
