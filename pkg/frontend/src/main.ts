// Entry point: wire the skeleton's controls to the App controller.

import { ApiClient } from "./api.js";
import { App } from "./app.js";
import { createRenderer } from "./render.js";

declare global {
  interface Window {
    LVMON_API_BASE?: string;
  }
}

// Base URL priority: ?api= query parameter, window global, same origin.
function apiBase(): string {
  const fromQuery = new URLSearchParams(window.location.search).get("api");
  if (fromQuery) return fromQuery;
  if (window.LVMON_API_BASE) return window.LVMON_API_BASE;
  return "";
}

function byId<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (node === null) throw new Error(`missing #${id}`);
  return node as T;
}

const api = new ApiClient(apiBase());
const renderer = createRenderer(document);
const app = new App(api, (state) => renderer.render(state));

byId<HTMLFormElement>("login-form").addEventListener("submit", (ev) => {
  ev.preventDefault();
  const username = byId<HTMLInputElement>("username").value;
  const password = byId<HTMLInputElement>("password").value;
  void app.login(username, password);
});

byId<HTMLSelectElement>("device-select").addEventListener("change", (ev) => {
  app.selectDevice((ev.target as HTMLSelectElement).value);
});

byId<HTMLButtonElement>("logout-btn").addEventListener("click", () => {
  byId<HTMLInputElement>("password").value = "";
  app.logout();
});

function msOrNull(input: HTMLInputElement): number | null {
  if (input.value === "") return null;
  const ms = new Date(input.value).getTime();
  return Number.isFinite(ms) ? ms : null;
}

byId<HTMLFormElement>("records-form").addEventListener("submit", (ev) => {
  ev.preventDefault();
  void app.loadRecords({
    from: msOrNull(byId<HTMLInputElement>("range-from")),
    to: msOrNull(byId<HTMLInputElement>("range-to")),
  });
});

// The clock stays visible and current regardless of fetch health.
const clock = byId<HTMLElement>("clock");
function tickClock(): void {
  clock.textContent = new Date().toLocaleTimeString();
}
tickClock();
setInterval(tickClock, 500);

app.repaint();
