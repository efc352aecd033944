import { afterEach, describe, expect, it, vi } from 'vitest';

import { ApiClient, ApiError, decodePoints } from '../src/api.js';

function pointBuffer(points: number[][], colors: number[][]): ArrayBuffer {
  const m = points.length;
  const buf = new ArrayBuffer(m * 15);
  const pos = new Float32Array(buf, 0, m * 3);
  points.forEach((p, i) => pos.set(p, i * 3));
  const col = new Uint8Array(buf, m * 12);
  colors.forEach((c, i) => col.set(c, i * 3));
  return buf;
}

afterEach(() => {
  vi.unstubAllGlobals();
});

describe('decodePoints', () => {
  it('splits positions and colors at the 12-byte boundary', () => {
    const buf = pointBuffer(
      [
        [1, 2, 3],
        [4, 5, 6],
      ],
      [
        [255, 0, 0],
        [0, 128, 255],
      ],
    );
    const decoded = decodePoints(buf);
    expect(decoded.count).toBe(2);
    expect(Array.from(decoded.positions)).toEqual([1, 2, 3, 4, 5, 6]);
    expect(Array.from(decoded.colors)).toEqual([255, 0, 0, 0, 128, 255]);
  });

  it('rejects payloads that are not a multiple of the record size', () => {
    expect(() => decodePoints(new ArrayBuffer(16))).toThrow(/multiple/);
  });
});

describe('ApiClient', () => {
  it('lists scenes', async () => {
    const fetchMock = vi.fn().mockResolvedValue(new Response(JSON.stringify(['a', 'b'])));
    vi.stubGlobal('fetch', fetchMock);
    expect(await new ApiClient().listScenes()).toEqual(['a', 'b']);
    expect(fetchMock).toHaveBeenCalledWith('/scenes');
  });

  it('fetches and decodes binary points', async () => {
    const buf = pointBuffer([[1, 2, 3]], [[9, 9, 9]]);
    vi.stubGlobal('fetch', vi.fn().mockResolvedValue(new Response(buf)));
    const decoded = await new ApiClient('http://svc').fetchPoints('demo');
    expect(decoded.count).toBe(1);
  });

  it('posts the full query body including tau and mode', async () => {
    const fetchMock = vi.fn().mockResolvedValue(new Response(JSON.stringify({ results: [] })));
    vi.stubGlobal('fetch', fetchMock);
    await new ApiClient().query({ scene_id: 's', text: 'chair', top_k: 3, tau: 0.9, mode: 'soft' });
    const [url, init] = fetchMock.mock.calls[0];
    expect(url).toBe('/query');
    expect(JSON.parse(init.body)).toEqual({ scene_id: 's', text: 'chair', top_k: 3, tau: 0.9, mode: 'soft' });
  });

  it('maps service validation errors to ApiError with field messages', async () => {
    const body = JSON.stringify({ detail: [{ field: 'body.text', message: 'text must be non-empty' }] });
    vi.stubGlobal('fetch', vi.fn().mockResolvedValue(new Response(body, { status: 400 })));
    const err = await new ApiClient()
      .query({ scene_id: 's', text: '' })
      .catch((e: unknown) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect((err as ApiError).status).toBe(400);
    expect((err as ApiError).message).toContain('body.text');
  });

  it('maps 404 on unknown scenes', async () => {
    vi.stubGlobal(
      'fetch',
      vi.fn().mockResolvedValue(new Response(JSON.stringify({ detail: "unknown scene 'x'" }), { status: 404 })),
    );
    const err = await new ApiClient().fetchPoints('x').catch((e: unknown) => e);
    expect((err as ApiError).status).toBe(404);
  });

  it('forwards the abort signal', async () => {
    const fetchMock = vi.fn().mockResolvedValue(new Response(JSON.stringify({ results: [] })));
    vi.stubGlobal('fetch', fetchMock);
    const controller = new AbortController();
    await new ApiClient().query({ scene_id: 's', text: 'x' }, controller.signal);
    expect(fetchMock.mock.calls[0][1].signal).toBe(controller.signal);
  });
});
