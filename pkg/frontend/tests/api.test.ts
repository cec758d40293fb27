import { describe, expect, it } from "vitest";

import { FetchLike, RenderQueue, fetchMeta, renderUrl } from "../src/api.js";
import { initialState } from "../src/orbit.js";

function jsonResponse(obj: unknown, status = 200) {
  return {
    ok: status === 200,
    status,
    json: async () => obj,
    arrayBuffer: async () => new ArrayBuffer(0),
  };
}

function bytesResponse(tag: number) {
  return {
    ok: true,
    status: 200,
    json: async () => ({}),
    arrayBuffer: async () => new Uint8Array([tag]).buffer,
  };
}

describe("fetchMeta", () => {
  it("returns parsed metadata", async () => {
    const meta = { frame_count: 8, bbox: { min: [-1, -1, -1], max: [1, 1, 1] },
                   fps_hint: 10, orbit_radius: 2.8 };
    const got = await fetchMeta("http://x", (async () => jsonResponse(meta)) as FetchLike);
    expect(got.frame_count).toBe(8);
    expect(got.orbit_radius).toBeCloseTo(2.8);
  });

  it("rejects on http errors and bad payloads", async () => {
    await expect(fetchMeta("http://x", (async () => jsonResponse({}, 500)) as FetchLike))
      .rejects.toThrow("500");
    await expect(fetchMeta("http://x", (async () => jsonResponse({ nope: 1 })) as FetchLike))
      .rejects.toThrow("frame_count");
  });
});

describe("renderUrl", () => {
  it("encodes frame, pose and size", () => {
    const s = { ...initialState(2.8), frame: 3, quality: 256 };
    const url = renderUrl("http://h:1", s);
    expect(url).toMatch(/^http:\/\/h:1\/render\?frame=3&pose=/);
    expect(url.split("pose=")[1].split("&")[0].split(",").length).toBe(12);
    expect(url).toContain("w=256&h=256");
  });
});

describe("RenderQueue latest-wins policy", () => {
  it("coalesces a burst into first + latest", async () => {
    const resolvers: Array<() => void> = [];
    const served: string[] = [];
    const fetchImpl: FetchLike = (url) =>
      new Promise((resolve) => {
        resolvers.push(() => {
          served.push(url);
          resolve(bytesResponse(served.length));
        });
      });
    const shown: number[] = [];
    const q = new RenderQueue("http://x", fetchImpl,
      ({ state }) => shown.push(state.frame), () => {});
    const base = initialState(2.8);
    q.request({ ...base, frame: 0 });
    q.request({ ...base, frame: 1 });
    q.request({ ...base, frame: 2 });
    q.request({ ...base, frame: 3 });
    // only the first request went out; the rest collapsed into one pending
    expect(resolvers.length).toBe(1);
    resolvers[0]();
    await new Promise((r) => setTimeout(r, 0));
    expect(resolvers.length).toBe(2);
    resolvers[1]();
    await new Promise((r) => setTimeout(r, 0));
    expect(q.sent).toBe(2);
    // the stale first response was discarded; only the newest state displays
    expect(shown).toEqual([3]);
  });

  it("keeps at most one request in flight", async () => {
    let inFlight = 0;
    let maxInFlight = 0;
    const fetchImpl: FetchLike = async () => {
      inFlight += 1;
      maxInFlight = Math.max(maxInFlight, inFlight);
      await new Promise((r) => setTimeout(r, 1));
      inFlight -= 1;
      return bytesResponse(0);
    };
    const q = new RenderQueue("http://x", fetchImpl, () => {}, () => {});
    const base = initialState(2.8);
    for (let i = 0; i < 6; i++) q.request({ ...base, frame: i % 3 });
    await new Promise((r) => setTimeout(r, 30));
    expect(maxInFlight).toBe(1);
  });

  it("reports errors for the newest request only", async () => {
    const errors: string[] = [];
    const fetchImpl: FetchLike = async () => jsonResponse({}, 404) as never;
    const q = new RenderQueue("http://x", fetchImpl, () => {},
      (e) => errors.push(e.message));
    q.request(initialState(2.8));
    await new Promise((r) => setTimeout(r, 5));
    expect(errors.length).toBe(1);
    expect(errors[0]).toContain("404");
  });
});
