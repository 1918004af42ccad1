// Quantity metadata shared by the live panel and the records table.

import type { LegacyRow, LiveSample } from "./api.js";

export const QUANTITIES = [
  "voltage",
  "current",
  "frequency",
  "power_factor",
  "active_power",
  "energy",
] as const;

export type Quantity = (typeof QUANTITIES)[number];

export const QUANTITY_TITLE: Record<Quantity, string> = {
  voltage: "Voltage",
  current: "Current",
  frequency: "Frequency",
  power_factor: "Power factor",
  active_power: "Active power",
  energy: "Energy",
};

// Power factor is dimensionless; its unit slot is rendered empty.
export const UNIT_LABEL: Record<Quantity, string> = {
  voltage: "V",
  current: "A",
  frequency: "Hz",
  power_factor: "",
  active_power: "W",
  energy: "kWh",
};

const DECIMALS: Record<Quantity, number> = {
  voltage: 1,
  current: 2,
  frequency: 2,
  power_factor: 3,
  active_power: 1,
  energy: 6,
};

// Nominal 220 V with the +6%/-6% service tolerance.
export const VOLTAGE_LOW = 206.8;
export const VOLTAGE_HIGH = 233.2;

export function voltageOutOfBand(volts: number): boolean {
  return volts < VOLTAGE_LOW || volts > VOLTAGE_HIGH;
}

/** "219.3" for voltage, "0.850" for power factor. Unit label comes separately. */
export function formatValue(quantity: Quantity, value: number): string {
  return value.toFixed(DECIMALS[quantity]);
}

/** Value and unit as one string; power factor renders bare. */
export function formatReading(quantity: Quantity, value: number): string {
  const unit = UNIT_LABEL[quantity];
  const text = formatValue(quantity, value);
  return unit === "" ? text : `${text} ${unit}`;
}

export interface RecordRow {
  id: number;
  ts: number;
  values: Record<Quantity, number>;
}

function parseNumber(field: string, raw: string): number {
  if (raw === "" || raw === undefined) throw new Error(`record field ${field} is empty`);
  const value = Number(raw);
  if (!Number.isFinite(value)) {
    throw new Error(`record field ${field} is not numeric: "${raw}"`);
  }
  return value;
}

/** One legacy string-typed row into numbers. Throws on anything malformed. */
export function parseLegacyRow(row: LegacyRow): RecordRow {
  const values = {} as Record<Quantity, number>;
  for (const q of QUANTITIES) {
    values[q] = parseNumber(q, row[q]);
  }
  return { id: parseNumber("id", row.id), ts: parseNumber("ts", row.ts), values };
}

/** Whole /records page into numeric rows, oldest first. */
export function parseLegacyRows(rows: LegacyRow[]): RecordRow[] {
  const parsed = rows.map(parseLegacyRow);
  parsed.sort((a, b) => a.ts - b.ts);
  return parsed;
}

export function sampleValue(sample: LiveSample, quantity: Quantity): number {
  return sample[quantity];
}
