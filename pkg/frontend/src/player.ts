/** Timeline playback: advances the frame at the service's fps hint. */

import { ViewerState, advanceFrame } from "./orbit.js";

export class Player {
  private timer: ReturnType<typeof setInterval> | null = null;

  constructor(
    private frameCount: number,
    private fps: number,
    private getState: () => ViewerState,
    private setState: (s: ViewerState) => void,
  ) {}

  get playing(): boolean {
    return this.timer !== null;
  }

  play(): void {
    if (this.timer !== null || this.frameCount <= 1) return;
    this.timer = setInterval(() => {
      this.setState({ ...advanceFrame(this.getState(), this.frameCount), playing: true });
    }, 1000 / Math.max(1, this.fps));
  }

  pause(): void {
    if (this.timer !== null) {
      clearInterval(this.timer);
      this.timer = null;
    }
  }

  toggle(): void {
    this.playing ? this.pause() : this.play();
  }
}
