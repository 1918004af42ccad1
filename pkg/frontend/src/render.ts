// DOM renderer. Owns no state: paints whatever ViewState it is handed.
// The static skeleton lives in index.html; this module only fills it in.

import { ViewState } from "./app.js";
import {
  formatValue,
  QUANTITIES,
  Quantity,
  QUANTITY_TITLE,
  UNIT_LABEL,
} from "./readings.js";

function el<T extends HTMLElement>(root: Document, id: string): T {
  const node = root.getElementById(id);
  if (node === null) throw new Error(`missing #${id} in page skeleton`);
  return node as T;
}

export interface Renderer {
  render(state: ViewState): void;
}

export function createRenderer(root: Document): Renderer {
  const loginView = el<HTMLElement>(root, "login-view");
  const monitorView = el<HTMLElement>(root, "monitor-view");
  const loginError = el<HTMLElement>(root, "login-error");
  const loginButton = el<HTMLButtonElement>(root, "login-submit");
  const deviceSelect = el<HTMLSelectElement>(root, "device-select");
  const staleBadge = el<HTMLElement>(root, "stale-badge");
  const tiles = el<HTMLElement>(root, "tiles");
  const liveTs = el<HTMLElement>(root, "live-ts");
  const recordsBody = el<HTMLTableSectionElement>(root, "records-body");
  const recordsEmpty = el<HTMLElement>(root, "records-empty");
  const recordsNote = el<HTMLElement>(root, "records-note");

  // Six fixed tiles, each with a title, a value slot, and its unit label.
  // The unit span is part of the structure, so a value can never appear
  // without it.
  const valueSlots = new Map<Quantity, HTMLElement>();
  const tileNodes = new Map<Quantity, HTMLElement>();
  for (const q of QUANTITIES) {
    const tile = root.createElement("div");
    tile.className = "tile";
    const title = root.createElement("div");
    title.className = "tile-title";
    title.textContent = QUANTITY_TITLE[q];
    const reading = root.createElement("div");
    reading.className = "tile-reading";
    const value = root.createElement("span");
    value.className = "tile-value";
    value.textContent = "--";
    const unit = root.createElement("span");
    unit.className = "tile-unit";
    unit.textContent = UNIT_LABEL[q];
    reading.append(value, " ", unit);
    tile.append(title, reading);
    tiles.append(tile);
    valueSlots.set(q, value);
    tileNodes.set(q, tile);
  }

  let renderedDevices = "";

  function render(state: ViewState): void {
    loginView.hidden = state.screen !== "login";
    monitorView.hidden = state.screen !== "monitor";
    loginButton.disabled = state.busy;
    loginError.textContent = state.loginError ?? "";
    loginError.hidden = state.loginError === null;
    if (state.screen !== "monitor") return;

    const names = state.devices.map((d) => d.name).join("\n");
    if (names !== renderedDevices) {
      renderedDevices = names;
      deviceSelect.replaceChildren(
        ...state.devices.map((d) => {
          const opt = root.createElement("option");
          opt.value = d.name;
          opt.textContent = d.name;
          return opt;
        }),
      );
    }
    if (state.selected !== null) deviceSelect.value = state.selected;

    const live = state.live;
    staleBadge.hidden = !(live.stale || live.fetchError);
    staleBadge.textContent = live.stale ? "STALE" : "fetch failed";
    if (live.sample !== null) {
      for (const q of QUANTITIES) {
        valueSlots.get(q)!.textContent = formatValue(q, live.sample[q]);
      }
      liveTs.textContent = new Date(live.sample.ts).toLocaleString();
    } else {
      for (const q of QUANTITIES) valueSlots.get(q)!.textContent = "--";
      liveTs.textContent = "no data yet";
    }
    tileNodes.get("voltage")!.classList.toggle("out-of-band", live.outOfBand);

    const records = state.records;
    recordsEmpty.hidden = !(records.loaded && records.rows.length === 0 && records.error === null);
    if (records.error !== null) {
      recordsNote.textContent = records.error;
      recordsNote.hidden = false;
    } else if (records.truncated) {
      recordsNote.textContent = "result truncated by row limit";
      recordsNote.hidden = false;
    } else {
      recordsNote.hidden = true;
    }
    recordsBody.replaceChildren(
      ...records.rows.map((row) => {
        const tr = root.createElement("tr");
        const when = root.createElement("td");
        when.textContent = new Date(row.ts).toLocaleString();
        tr.append(when);
        for (const q of QUANTITIES) {
          const td = root.createElement("td");
          const unit = UNIT_LABEL[q];
          td.textContent = unit === ""
            ? formatValue(q, row.values[q])
            : `${formatValue(q, row.values[q])} ${unit}`;
          tr.append(td);
        }
        return tr;
      }),
    );
  }

  return { render };
}
