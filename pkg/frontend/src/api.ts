// Thin client for the lvmon HTTP API. Read-only except for login.

export interface DeviceInfo {
  name: string;
  unit: number;
  last_seen: number | null;
}

export interface LiveSample {
  device: string;
  ts: number;
  voltage: number;
  current: number;
  frequency: number;
  power_factor: number;
  active_power: number;
  energy: number;
}

// /records keeps the legacy shape: every value arrives as a string.
export interface LegacyRow {
  id: string;
  ts: string;
  voltage: string;
  current: string;
  frequency: string;
  power_factor: string;
  active_power: string;
  energy: string;
}

export interface RecordsPage {
  rows: LegacyRow[];
  truncated: boolean;
}

export interface RecordsQuery {
  from?: number | null;
  to?: number | null;
  limit?: number | null;
}

/** Token missing, expired, or rejected. The holder must re-login. */
export class AuthRequired extends Error {
  constructor() {
    super("authentication required");
  }
}

/** Any non-auth HTTP failure (bad request, server error). */
export class ApiError extends Error {
  constructor(message: string, readonly status: number) {
    super(message);
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  // Held in memory only; a page reload starts logged out.
  private token: string | null = null;
  private readonly base: string;

  constructor(baseUrl: string, private readonly fetchImpl: FetchLike = (u, i) => fetch(u, i)) {
    this.base = baseUrl.replace(/\/+$/, "");
  }

  get authenticated(): boolean {
    return this.token !== null;
  }

  logout(): void {
    this.token = null;
  }

  async login(username: string, password: string): Promise<void> {
    const resp = await this.fetchImpl(`${this.base}/api/login`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ username, password }),
    });
    if (resp.status === 401) throw new AuthRequired();
    if (!resp.ok) throw new ApiError(`login failed (${resp.status})`, resp.status);
    const body = (await resp.json()) as { token?: unknown };
    if (typeof body.token !== "string" || body.token === "") {
      throw new ApiError("login reply carried no token", resp.status);
    }
    this.token = body.token;
  }

  async devices(): Promise<DeviceInfo[]> {
    const resp = await this.get("/api/devices");
    return (await resp.json()) as DeviceInfo[];
  }

  /** Newest sample for one device, or null while the store is empty (204). */
  async latest(device: string): Promise<LiveSample | null> {
    const resp = await this.get(`/api/devices/${encodeURIComponent(device)}/latest`);
    if (resp.status === 204) return null;
    return (await resp.json()) as LiveSample;
  }

  async records(device: string, query: RecordsQuery = {}): Promise<RecordsPage> {
    const params = new URLSearchParams();
    if (query.from != null) params.set("from", String(query.from));
    if (query.to != null) params.set("to", String(query.to));
    if (query.limit != null) params.set("limit", String(query.limit));
    const qs = params.toString();
    const path = `/api/devices/${encodeURIComponent(device)}/records${qs ? "?" + qs : ""}`;
    const resp = await this.get(path);
    const body = (await resp.json()) as Record<string, LegacyRow[]>;
    const rows = body[device];
    if (!Array.isArray(rows)) {
      throw new ApiError(`records reply missing "${device}" key`, resp.status);
    }
    return { rows, truncated: resp.headers.get("X-Truncated") === "true" };
  }

  private async get(path: string): Promise<Response> {
    if (this.token === null) throw new AuthRequired();
    const resp = await this.fetchImpl(`${this.base}${path}`, {
      headers: { Authorization: `Bearer ${this.token}` },
    });
    if (resp.status === 401) {
      this.token = null;
      throw new AuthRequired();
    }
    if (resp.status >= 400 && resp.status !== 404) {
      throw new ApiError(`${path} failed (${resp.status})`, resp.status);
    }
    if (resp.status === 404) throw new ApiError(`${path} not found`, 404);
    return resp;
  }
}
