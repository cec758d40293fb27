/**
 * DOM wiring for the viewer: pointer drag orbits, wheel zooms, the slider
 * scrubs the timeline, spacebar toggles playback. Every state change asks
 * the render queue for a fresh frame; the queue keeps only the newest.
 */

import { Meta, RenderQueue, fetchMeta } from "./api.js";
import { ViewerState, initialState, orbitBy, withFrame, zoomBy } from "./orbit.js";
import { Player } from "./player.js";

const baseUrl = (window as { FVV_BASE_URL?: string }).FVV_BASE_URL ?? "";

const img = document.getElementById("view") as HTMLImageElement;
const slider = document.getElementById("timeline") as HTMLInputElement;
const frameLabel = document.getElementById("frame-label") as HTMLSpanElement;
const banner = document.getElementById("banner") as HTMLDivElement;

let state: ViewerState;
let meta: Meta;
let queue: RenderQueue;
let player: Player;
let lastObjectUrl: string | null = null;

function showError(message: string) {
  banner.textContent = message;
  banner.style.display = "block";
}

function setState(next: ViewerState) {
  state = next;
  slider.value = String(state.frame);
  frameLabel.textContent = `${state.frame + 1}/${meta.frame_count}`;
  queue.request(state);
}

function wireInput() {
  let dragging = false;
  let lastX = 0;
  let lastY = 0;
  img.addEventListener("pointerdown", (e) => {
    dragging = true;
    lastX = e.clientX;
    lastY = e.clientY;
    img.setPointerCapture(e.pointerId);
  });
  img.addEventListener("pointermove", (e) => {
    if (!dragging) return;
    const dx = e.clientX - lastX;
    const dy = e.clientY - lastY;
    lastX = e.clientX;
    lastY = e.clientY;
    setState(orbitBy(state, dx * 0.008, dy * 0.008));
  });
  img.addEventListener("pointerup", () => (dragging = false));
  img.addEventListener("wheel", (e) => {
    e.preventDefault();
    setState(zoomBy(state, e.deltaY > 0 ? 1.08 : 1 / 1.08));
  });
  slider.addEventListener("input", () => {
    player.pause();
    setState(withFrame(state, Number(slider.value), meta.frame_count));
  });
  window.addEventListener("keydown", (e) => {
    if (e.code === "Space") {
      e.preventDefault();
      player.toggle();
    }
  });
}

async function boot() {
  try {
    meta = await fetchMeta(baseUrl);
  } catch (err) {
    showError(`service unreachable: ${(err as Error).message} — reload to retry`);
    return;
  }
  banner.style.display = "none";
  state = initialState(meta.orbit_radius);
  queue = new RenderQueue(
    baseUrl,
    fetch,
    ({ bytes }) => {
      const url = URL.createObjectURL(new Blob([bytes], { type: "image/png" }));
      img.src = url;
      if (lastObjectUrl) URL.revokeObjectURL(lastObjectUrl);
      lastObjectUrl = url;
    },
    (err) => showError(`render failed: ${err.message}`),
  );
  player = new Player(meta.frame_count, meta.fps_hint, () => state, setState);
  slider.max = String(meta.frame_count - 1);
  slider.style.display = meta.frame_count > 1 ? "block" : "none";
  wireInput();
  setState(state);
}

void boot();
