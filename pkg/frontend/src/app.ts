// Application state machine. All mutations funnel through this class;
// the renderer is an injected callback and owns no state of its own.

import { ApiClient, ApiError, AuthRequired, DeviceInfo } from "./api.js";
import { LiveFrame, LiveLoop, LiveLoopOptions } from "./live.js";
import { parseLegacyRows, RecordRow } from "./readings.js";

export type Screen = "login" | "monitor";

export interface RangeFilter {
  from: number | null;
  to: number | null;
  limit: number;
}

export interface RecordsState {
  rows: RecordRow[];
  truncated: boolean;
  loaded: boolean;
  error: string | null;
  range: RangeFilter;
}

export interface ViewState {
  screen: Screen;
  /** Kept verbatim across failed attempts so the user only retypes the password. */
  username: string;
  loginError: string | null;
  busy: boolean;
  devices: DeviceInfo[];
  selected: string | null;
  live: LiveFrame;
  records: RecordsState;
}

export const DEFAULT_RECORD_LIMIT = 1000;

export function initialState(): ViewState {
  return {
    screen: "login",
    username: "",
    loginError: null,
    busy: false,
    devices: [],
    selected: null,
    live: { sample: null, stale: false, outOfBand: false, fetchError: false },
    records: {
      rows: [],
      truncated: false,
      loaded: false,
      error: null,
      range: { from: null, to: null, limit: DEFAULT_RECORD_LIMIT },
    },
  };
}

export type Render = (state: ViewState) => void;

export class App {
  state: ViewState = initialState();
  private loop: LiveLoop | null = null;

  constructor(
    private readonly api: ApiClient,
    private readonly render: Render,
    private readonly loopOptions: LiveLoopOptions = {},
  ) {}

  /** Validate credentials, load the device list, start the live loop. */
  async login(username: string, password: string): Promise<void> {
    this.state.username = username;
    this.state.busy = true;
    this.state.loginError = null;
    this.render(this.state);
    try {
      await this.api.login(username, password);
      const devices = await this.api.devices();
      this.state.devices = devices;
      this.state.selected = devices.length > 0 ? devices[0].name : null;
      this.state.screen = "monitor";
      this.state.loginError = null;
      this.startLoop();
    } catch (err) {
      if (err instanceof AuthRequired) {
        this.state.loginError = "Wrong username or password.";
      } else {
        this.state.loginError = "Cannot reach the API. Check the server and retry.";
      }
    } finally {
      this.state.busy = false;
      this.render(this.state);
    }
  }

  selectDevice(name: string): void {
    if (name === this.state.selected) return;
    this.state.selected = name;
    this.state.live = { sample: null, stale: false, outOfBand: false, fetchError: false };
    this.state.records = initialState().records;
    this.startLoop();
    this.render(this.state);
  }

  /** Fetch history for the selected device under the current range filter. */
  async loadRecords(range?: Partial<RangeFilter>): Promise<void> {
    const device = this.state.selected;
    if (device === null) return;
    const r = this.state.records.range;
    if (range) {
      this.state.records.range = {
        from: range.from !== undefined ? range.from : r.from,
        to: range.to !== undefined ? range.to : r.to,
        limit: range.limit !== undefined ? range.limit : r.limit,
      };
    }
    const active = this.state.records.range;
    try {
      const page = await this.api.records(device, {
        from: active.from,
        to: active.to,
        limit: active.limit,
      });
      this.state.records.rows = parseLegacyRows(page.rows);
      this.state.records.truncated = page.truncated;
      this.state.records.loaded = true;
      this.state.records.error = null;
    } catch (err) {
      if (err instanceof AuthRequired) {
        this.toLogin("Session expired, log in again.");
        return;
      }
      this.state.records.error = err instanceof ApiError ? err.message : "records fetch failed";
    }
    this.render(this.state);
  }

  logout(): void {
    this.api.logout();
    this.toLogin(null);
  }

  get records(): RecordRow[] {
    return this.state.records.rows;
  }

  repaint(): void {
    this.render(this.state);
  }

  private startLoop(): void {
    this.loop?.stop();
    const device = this.state.selected;
    if (device === null) return;
    this.loop = new LiveLoop(
      this.api,
      device,
      (frame: LiveFrame) => {
        this.state.live = frame;
        this.render(this.state);
      },
      () => this.toLogin("Session expired, log in again."),
      this.loopOptions,
    );
    this.loop.start();
  }

  private toLogin(message: string | null): void {
    this.loop?.stop();
    this.loop = null;
    const username = this.state.username;
    this.state = initialState();
    this.state.username = username;
    this.state.loginError = message;
    this.render(this.state);
  }
}
