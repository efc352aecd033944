/**
 * REST client for the segmentation service.
 *
 * The point payload is binary: M * 12 bytes of little-endian float32 xyz
 * triples followed by M * 3 bytes of rgb. Everything else is JSON.
 */

export interface QueryItem {
  mask_id: number;
  score: number;
  point_indices: number[];
}

export interface QueryResponse {
  results: QueryItem[];
}

export interface QueryRequest {
  scene_id: string;
  text: string;
  top_k?: number;
  tau?: number;
  mode?: string;
}

export interface ScenePoints {
  count: number;
  positions: Float32Array;
  colors: Uint8Array;
}

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = 'ApiError';
  }
}

const BYTES_PER_POINT = 15; // 3 * float32 + 3 * uint8

export function decodePoints(buffer: ArrayBuffer): ScenePoints {
  if (buffer.byteLength % BYTES_PER_POINT !== 0) {
    throw new Error(`point payload of ${buffer.byteLength} bytes is not a multiple of ${BYTES_PER_POINT}`);
  }
  const count = buffer.byteLength / BYTES_PER_POINT;
  const positions = new Float32Array(buffer.slice(0, count * 12));
  const colors = new Uint8Array(buffer.slice(count * 12));
  return { count, positions, colors };
}

async function errorMessage(response: Response): Promise<string> {
  try {
    const body = await response.json();
    if (Array.isArray(body.detail)) {
      return body.detail.map((e: { field?: string; message?: string }) => `${e.field}: ${e.message}`).join('; ');
    }
    if (typeof body.detail === 'string') return body.detail;
  } catch {
    /* non-JSON body */
  }
  return `request failed with status ${response.status}`;
}

export class ApiClient {
  constructor(private readonly baseUrl: string = '') {}

  private url(path: string): string {
    return `${this.baseUrl}${path}`;
  }

  async listScenes(): Promise<string[]> {
    const response = await fetch(this.url('/scenes'));
    if (!response.ok) throw new ApiError(response.status, await errorMessage(response));
    return (await response.json()) as string[];
  }

  async fetchPoints(sceneId: string): Promise<ScenePoints> {
    const response = await fetch(this.url(`/scenes/${encodeURIComponent(sceneId)}/points`));
    if (!response.ok) throw new ApiError(response.status, await errorMessage(response));
    return decodePoints(await response.arrayBuffer());
  }

  async query(request: QueryRequest, signal?: AbortSignal): Promise<QueryResponse> {
    const response = await fetch(this.url('/query'), {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(request),
      signal,
    });
    if (!response.ok) throw new ApiError(response.status, await errorMessage(response));
    return (await response.json()) as QueryResponse;
  }
}
