/**
 * A10: drive the real service with viewer poses and byte-compare every
 * displayed image against the offline CLI render for the same (pose, frame).
 *
 * Needs a packed container: FVV_CONTAINER=/path/to/model.fvvc (the python
 * acceptance suite writes one under tests/_cache/acceptance_out/).
 */

import { execFile, spawn, ChildProcess } from "node:child_process";
import { mkdtempSync, readFileSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { promisify } from "node:util";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { fetchMeta, renderUrl } from "../src/api.js";
import { clampElevation, initialState, poseFromOrbit, rotationDefect } from "../src/orbit.js";

const execFileP = promisify(execFile);
const container = process.env.FVV_CONTAINER;
const maybe = container ? describe : describe.skip;

maybe("viewer against a live service (A10)", () => {
  let proc: ChildProcess;
  let baseUrl = "";
  const work = mkdtempSync(join(tmpdir(), "fvv-viewer-"));

  beforeAll(async () => {
    proc = spawn("python3", ["-m", "fvv.cli", "serve", "--container", container!,
                             "--port", "0"]);
    baseUrl = await new Promise<string>((resolve, reject) => {
      let buf = "";
      const timer = setTimeout(() => reject(new Error(`service never came up: ${buf}`)), 60_000);
      proc.stdout!.on("data", (d: Buffer) => {
        buf += d.toString();
        const m = buf.match(/on (http:\/\/[\d.]+:\d+)/);
        if (m) {
          clearTimeout(timer);
          resolve(m[1]);
        }
      });
      proc.stderr!.on("data", (d: Buffer) => (buf += d.toString()));
      proc.on("exit", (code) => reject(new Error(`service exited early (${code}): ${buf}`)));
    });
  }, 90_000);

  afterAll(() => {
    proc?.kill();
  });

  it("orbits through scripted poses and frames, byte-matching offline renders", async () => {
    const meta = await fetchMeta(baseUrl);
    expect(meta.frame_count).toBeGreaterThanOrEqual(8);

    for (let k = 0; k < 8; k++) {
      const state = {
        ...initialState(meta.orbit_radius, 64),
        azimuth: (2 * Math.PI * k) / 8 + 0.13,
        elevation: clampElevation(0.35 * Math.sin((k * Math.PI) / 3.5)),
        frame: k % meta.frame_count,
      };
      const pose = poseFromOrbit(state);
      expect(rotationDefect(pose)).toBeLessThan(1e-6);

      const res = await fetch(renderUrl(baseUrl, state));
      expect(res.ok).toBe(true);
      const displayed = new Uint8Array(await res.arrayBuffer());
      expect(displayed.length).toBeGreaterThan(8);

      const poseFile = join(work, `pose_${k}.json`);
      writeFileSync(poseFile, JSON.stringify({ pose, width: 64, height: 64 }));
      const outFile = join(work, `offline_${k}.png`);
      await execFileP("python3", ["-m", "fvv.cli", "render",
        "--container", container!, "--frame", String(state.frame),
        "--pose", poseFile, "--out", outFile]);
      const offline = new Uint8Array(readFileSync(outFile));
      expect(Buffer.compare(Buffer.from(displayed), Buffer.from(offline))).toBe(0);
    }
  }, 600_000);
});
