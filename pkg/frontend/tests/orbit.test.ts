import { describe, expect, it } from "vitest";

import {
  ELEVATION_LIMIT,
  advanceFrame,
  clampElevation,
  initialState,
  orbitBy,
  orbitPosition,
  poseFromOrbit,
  rotationDefect,
  withFrame,
  zoomBy,
} from "../src/orbit.js";

function state(partial: Partial<ReturnType<typeof initialState>> = {}) {
  return { ...initialState(2.8), ...partial };
}

describe("orbitPosition", () => {
  it("puts azimuth 0, elevation 0 on the +x axis", () => {
    const p = orbitPosition(state({ azimuth: 0, elevation: 0, radius: 2.0, target: [0, 0, 0] }));
    expect(p[0]).toBeCloseTo(2.0, 12);
    expect(p[1]).toBeCloseTo(0.0, 12);
    expect(p[2]).toBeCloseTo(0.0, 12);
  });

  it("approaches the +y pole at the elevation limit", () => {
    const p = orbitPosition(state({ azimuth: 1.3, elevation: ELEVATION_LIMIT, radius: 3.0 }));
    expect(p[1]).toBeGreaterThan(2.999);
    expect(Math.hypot(p[0], p[2])).toBeLessThan(0.02);
  });

  it("offsets by the target", () => {
    const p = orbitPosition(state({ azimuth: 0, elevation: 0, radius: 1.0, target: [1, 2, 3] }));
    expect(p).toEqual([2, 2, 3]);
  });
});

describe("poseFromOrbit", () => {
  it("looks at the target from azimuth 0", () => {
    const pose = poseFromOrbit(state({ azimuth: 0, elevation: 0, radius: 2.0 }));
    // forward column is the third of each row: should point in -x
    expect(pose[2]).toBeCloseTo(-1, 12);
    expect(pose[5]).toBeCloseTo(0, 12);
    expect(pose[8]).toBeCloseTo(0, 12);
    expect(pose.slice(9)).toEqual([2, 0, 0]);
  });

  it("is orthonormal within 1e-6 for arbitrary states", () => {
    let worst = 0;
    for (let i = 0; i < 200; i++) {
      const s = state({
        azimuth: (i * 37.7) % (2 * Math.PI),
        elevation: clampElevation(((i * 13.1) % 3) - 1.5),
        radius: 0.5 + (i % 7),
        target: [Math.sin(i), Math.cos(2 * i) * 0.3, Math.sin(3 * i) * 0.2],
      });
      worst = Math.max(worst, rotationDefect(poseFromOrbit(s)));
    }
    expect(worst).toBeLessThan(1e-6);
  });

  it("keeps the camera above the target plane when elevated", () => {
    const pose = poseFromOrbit(state({ azimuth: 0.4, elevation: 0.5 }));
    expect(pose[10]).toBeGreaterThan(0); // camera y
  });
});

describe("state transitions", () => {
  it("clamps elevation inside the open pole interval", () => {
    const s = orbitBy(state({ elevation: 1.4 }), 0, 10);
    expect(s.elevation).toBe(ELEVATION_LIMIT);
    const s2 = orbitBy(state({ elevation: -1.4 }), 0, -10);
    expect(s2.elevation).toBe(-ELEVATION_LIMIT);
  });

  it("never lets the radius reach zero", () => {
    let s = state({ radius: 0.01 });
    for (let i = 0; i < 50; i++) s = zoomBy(s, 0.5);
    expect(s.radius).toBeGreaterThan(0);
  });

  it("wraps frames modulo frame count in both directions", () => {
    expect(withFrame(state(), 7, 8).frame).toBe(7);
    expect(withFrame(state(), 8, 8).frame).toBe(0);
    expect(withFrame(state(), -1, 8).frame).toBe(7);
    expect(advanceFrame(state({ frame: 7 }), 8).frame).toBe(0);
  });

  it("never produces a frame outside [0, frameCount)", () => {
    for (let f = -20; f < 20; f++) {
      const s = withFrame(state(), f, 5);
      expect(s.frame).toBeGreaterThanOrEqual(0);
      expect(s.frame).toBeLessThan(5);
    }
  });
});
