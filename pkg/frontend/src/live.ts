// Live readout loop: one fetch per second, never two in flight.

import { AuthRequired, LiveSample } from "./api.js";
import { voltageOutOfBand } from "./readings.js";

/** The one API call this loop needs; ApiClient satisfies it. */
export interface LatestSource {
  latest(device: string): Promise<LiveSample | null>;
}

export interface LiveFrame {
  sample: LiveSample | null;
  /** Last successful fetch is older than the stale threshold. */
  stale: boolean;
  /** Voltage of the displayed sample sits outside the service band. */
  outOfBand: boolean;
  /** The most recent fetch attempt failed (values above are retained). */
  fetchError: boolean;
}

export interface LiveLoopOptions {
  intervalMs?: number;
  staleAfterMs?: number;
  now?: () => number;
}

const DEFAULT_INTERVAL_MS = 1000;
const DEFAULT_STALE_AFTER_MS = 3000;

export class LiveLoop {
  private timer: ReturnType<typeof setInterval> | null = null;
  private staleTimer: ReturnType<typeof setTimeout> | null = null;
  private inFlight = false;
  private stopped = false;
  private sample: LiveSample | null = null;
  private lastOkAt: number | null = null;
  private fetchError = false;

  private readonly intervalMs: number;
  private readonly staleAfterMs: number;
  private readonly now: () => number;

  constructor(
    private readonly api: LatestSource,
    private readonly device: string,
    private readonly onFrame: (frame: LiveFrame) => void,
    private readonly onAuthLost: () => void,
    options: LiveLoopOptions = {},
  ) {
    this.intervalMs = options.intervalMs ?? DEFAULT_INTERVAL_MS;
    this.staleAfterMs = options.staleAfterMs ?? DEFAULT_STALE_AFTER_MS;
    this.now = options.now ?? Date.now;
  }

  start(): void {
    if (this.timer !== null || this.stopped) return;
    void this.tick();
    this.timer = setInterval(() => void this.tick(), this.intervalMs);
  }

  stop(): void {
    this.stopped = true;
    if (this.timer !== null) {
      clearInterval(this.timer);
      this.timer = null;
    }
    this.disarmStaleTimer();
  }

  get stale(): boolean {
    return this.lastOkAt !== null && this.now() - this.lastOkAt > this.staleAfterMs;
  }

  private async tick(): Promise<void> {
    // A slow reply simply swallows the next tick; timers never stack.
    if (this.inFlight || this.stopped) return;
    this.inFlight = true;
    try {
      const sample = await this.api.latest(this.device);
      if (sample !== null) this.sample = sample;
      this.lastOkAt = this.now();
      this.fetchError = false;
      this.armStaleTimer();
    } catch (err) {
      if (err instanceof AuthRequired) {
        this.stop();
        this.onAuthLost();
        return;
      }
      // Network trouble: keep the last values, let staleness surface it.
      this.fetchError = true;
    } finally {
      this.inFlight = false;
    }
    if (!this.stopped) this.emit();
  }

  private emit(): void {
    this.onFrame({
      sample: this.sample,
      stale: this.stale,
      outOfBand: this.sample !== null && voltageOutOfBand(this.sample.voltage),
      fetchError: this.fetchError,
    });
  }

  private armStaleTimer(): void {
    this.disarmStaleTimer();
    this.staleTimer = setTimeout(() => {
      this.staleTimer = null;
      if (!this.stopped) this.emit();
    }, this.staleAfterMs + 1);
  }

  private disarmStaleTimer(): void {
    if (this.staleTimer !== null) {
      clearTimeout(this.staleTimer);
      this.staleTimer = null;
    }
  }
}
