/**
 * Service client: metadata fetch, render URLs, and a latest-wins request
 * queue so at most one render is in flight and stale responses are dropped.
 */

import { ViewerState, poseFromOrbit } from "./orbit.js";

export interface Meta {
  frame_count: number;
  bbox: { min: number[]; max: number[] };
  fps_hint: number;
  orbit_radius: number;
}

export type FetchLike = (url: string) => Promise<{
  ok: boolean;
  status: number;
  arrayBuffer(): Promise<ArrayBuffer>;
  json(): Promise<unknown>;
}>;

export async function fetchMeta(baseUrl: string, f: FetchLike = fetch): Promise<Meta> {
  const res = await f(`${baseUrl}/meta`);
  if (!res.ok) throw new Error(`meta request failed with status ${res.status}`);
  const meta = (await res.json()) as Meta;
  if (typeof meta.frame_count !== "number" || meta.frame_count < 1) {
    throw new Error("meta response missing a valid frame_count");
  }
  return meta;
}

export function renderUrl(baseUrl: string, state: ViewerState): string {
  const pose = poseFromOrbit(state).map((v) => v.toPrecision(17)).join(",");
  const q = state.quality;
  return `${baseUrl}/render?frame=${state.frame}&pose=${pose}&w=${q}&h=${q}`;
}

export interface RenderOutcome {
  state: ViewerState;
  bytes: Uint8Array<ArrayBuffer>;
}

/**
 * Serializes render requests: a request issued while another is in flight
 * replaces any queued one (latest wins); the resolved image always belongs
 * to the newest requested state.
 */
export class RenderQueue {
  private inFlight = false;
  private pending: ViewerState | null = null;
  private seq = 0;

  constructor(
    private baseUrl: string,
    private fetchImpl: FetchLike = fetch,
    private onImage: (out: RenderOutcome) => void = () => {},
    private onError: (err: Error) => void = () => {},
  ) {}

  /** Number of requests actually sent; tests use it to verify coalescing. */
  sent = 0;

  request(state: ViewerState): void {
    this.pending = state;
    if (!this.inFlight) void this.drain();
  }

  private async drain(): Promise<void> {
    this.inFlight = true;
    while (this.pending !== null) {
      const state = this.pending;
      this.pending = null;
      const mySeq = ++this.seq;
      this.sent += 1;
      try {
        const res = await this.fetchImpl(renderUrl(this.baseUrl, state));
        if (!res.ok) throw new Error(`render failed with status ${res.status}`);
        const bytes = new Uint8Array(await res.arrayBuffer());
        if (mySeq === this.seq && this.pending === null) {
          this.onImage({ state, bytes });
        }
        // otherwise a newer request exists: this response is stale, drop it
      } catch (err) {
        if (mySeq === this.seq) this.onError(err as Error);
      }
    }
    this.inFlight = false;
  }
}
