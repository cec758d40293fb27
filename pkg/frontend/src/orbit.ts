/**
 * Orbit-camera state and its world-from-camera pose.
 *
 * Conventions shared with the render service: y-up world, camera columns
 * [right, image-down, forward], pose serialized as the row-major rotation
 * followed by the translation (12 floats total).
 */

export interface ViewerState {
  azimuth: number;     // radians around the y axis
  elevation: number;   // radians, clamped inside (-pi/2, pi/2)
  radius: number;      // world units, > 0
  target: [number, number, number];
  frame: number;       // integer in [0, frameCount)
  playing: boolean;
  quality: number;     // requested image edge in pixels
}

export const ELEVATION_LIMIT = Math.PI / 2 - 1e-3;
const MIN_RADIUS = 1e-3;

export function initialState(orbitRadius: number, quality = 384): ViewerState {
  return {
    azimuth: 0.6,
    elevation: 0.25,
    radius: orbitRadius,
    target: [0, 0, 0],
    frame: 0,
    playing: false,
    quality,
  };
}

export function clampElevation(e: number): number {
  return Math.min(ELEVATION_LIMIT, Math.max(-ELEVATION_LIMIT, e));
}

export function orbitBy(s: ViewerState, dAzimuth: number, dElevation: number): ViewerState {
  return {
    ...s,
    azimuth: s.azimuth + dAzimuth,
    elevation: clampElevation(s.elevation + dElevation),
  };
}

export function zoomBy(s: ViewerState, factor: number): ViewerState {
  return { ...s, radius: Math.max(MIN_RADIUS, s.radius * factor) };
}

export function withFrame(s: ViewerState, frame: number, frameCount: number): ViewerState {
  const wrapped = ((Math.round(frame) % frameCount) + frameCount) % frameCount;
  return { ...s, frame: wrapped };
}

export function advanceFrame(s: ViewerState, frameCount: number): ViewerState {
  return withFrame(s, s.frame + 1, frameCount);
}

type Vec3 = [number, number, number];

function sub(a: Vec3, b: Vec3): Vec3 {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

function cross(a: Vec3, b: Vec3): Vec3 {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

function normalize(a: Vec3): Vec3 {
  const n = Math.hypot(a[0], a[1], a[2]);
  if (n === 0) throw new Error("cannot normalize a zero vector");
  return [a[0] / n, a[1] / n, a[2] / n];
}

export function orbitPosition(s: ViewerState): Vec3 {
  const ce = Math.cos(s.elevation);
  return [
    s.target[0] + s.radius * ce * Math.cos(s.azimuth),
    s.target[1] + s.radius * Math.sin(s.elevation),
    s.target[2] + s.radius * ce * Math.sin(s.azimuth),
  ];
}

/** 12 floats: row-major world-from-camera rotation, then the camera position. */
export function poseFromOrbit(s: ViewerState): number[] {
  const pos = orbitPosition(s);
  const forward = normalize(sub(s.target, pos));
  const right = normalize(cross(forward, [0, 1, 0]));
  const down = cross(forward, right);
  // columns [right, down, forward] flattened in row-major order
  return [
    right[0], down[0], forward[0],
    right[1], down[1], forward[1],
    right[2], down[2], forward[2],
    pos[0], pos[1], pos[2],
  ];
}

/** Numeric orthonormality defect of the pose rotation; tests keep it < 1e-6. */
export function rotationDefect(pose: number[]): number {
  const R = [
    [pose[0], pose[1], pose[2]],
    [pose[3], pose[4], pose[5]],
    [pose[6], pose[7], pose[8]],
  ];
  let worst = 0;
  for (let i = 0; i < 3; i++) {
    for (let j = 0; j < 3; j++) {
      let dot = 0;
      for (let k = 0; k < 3; k++) dot += R[k][i] * R[k][j];
      worst = Math.max(worst, Math.abs(dot - (i === j ? 1 : 0)));
    }
  }
  return worst;
}
