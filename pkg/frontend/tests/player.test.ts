import { afterEach, beforeEach, describe, expect, it, vi } from "vitest";

import { initialState } from "../src/orbit.js";
import { Player } from "../src/player.js";

describe("Player", () => {
  beforeEach(() => vi.useFakeTimers());
  afterEach(() => vi.useRealTimers());

  function setup(frameCount: number, fps = 10) {
    let state = initialState(2.8);
    const player = new Player(frameCount, fps, () => state, (s) => (state = s));
    return { player, state: () => state };
  }

  it("advances frames modulo the frame count", () => {
    const { player, state } = setup(4);
    player.play();
    vi.advanceTimersByTime(100 * 5);
    expect(state().frame).toBe(5 % 4);
    player.pause();
  });

  it("pause stops advancing; toggle flips", () => {
    const { player, state } = setup(4);
    player.toggle();
    vi.advanceTimersByTime(100);
    player.toggle();
    const at = state().frame;
    vi.advanceTimersByTime(500);
    expect(state().frame).toBe(at);
  });

  it("single-frame containers never play", () => {
    const { player, state } = setup(1);
    player.play();
    expect(player.playing).toBe(false);
    vi.advanceTimersByTime(1000);
    expect(state().frame).toBe(0);
  });
});
