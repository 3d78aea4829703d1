/**
 * RML archive recognition and conversion to the neutral dataset format.
 *
 * Recognized layout (RML2016.10A / RML2016.04C style, and re-pickles of the
 * same structure): a dict keyed by (modulation_name, snr_db) tuples holding
 * float32 arrays of shape (N, 2, L). Labels are assigned by sorted modulation
 * name; records are emitted grouped by label, then ascending SNR, then the
 * original in-archive order.
 */

import { loads, NDArray, PyDict, PyTuple, PyValue } from "./pickle";
import { NeutralDataset, NeutralRecord } from "./neutral";

export class RmlLayoutError extends Error {}

export interface RmlEntry {
  mod: string;
  snrDb: number;
  /** (N, 2, L) sample block, row-major. */
  count: number;
  length: number;
  values: Float64Array;
}

export interface ConvertOptions {
  keepMods?: string[];
  snrMin?: number;
  snrMax?: number;
}

export interface ConvertSummary {
  classNames: string[];
  signalLength: number;
  totalRecords: number;
  perClass: Map<string, number>;
  droppedEntries: number;
}

export function parseArchive(buf: Buffer): RmlEntry[] {
  let root: PyValue;
  try {
    root = loads(buf);
  } catch (err) {
    throw new RmlLayoutError(`not a readable pickle archive: ${(err as Error).message}`);
  }
  if (!(root instanceof PyDict) || root.entries.length === 0) {
    throw new RmlLayoutError("unrecognized layout: expected a non-empty dict at top level");
  }
  const entries: RmlEntry[] = [];
  for (const [key, value] of root.entries) {
    if (!(key instanceof PyTuple) || key.items.length !== 2) {
      throw new RmlLayoutError("unrecognized layout: keys must be (modulation, snr) tuples");
    }
    const [mod, snr] = key.items;
    if (typeof mod !== "string" || typeof snr !== "number" || !Number.isInteger(snr)) {
      throw new RmlLayoutError(
        "unrecognized layout: keys must pair a modulation name with an integer SNR");
    }
    if (!(value instanceof NDArray) || value.shape.length !== 3 || value.shape[1] !== 2) {
      throw new RmlLayoutError(
        `unrecognized layout: entry (${mod}, ${snr}) is not an (N, 2, L) array`);
    }
    if (value.dtype === null || value.dtype.code !== "f4") {
      throw new RmlLayoutError(
        `unrecognized layout: entry (${mod}, ${snr}) is not float32`);
    }
    entries.push({
      mod,
      snrDb: snr,
      count: value.shape[0],
      length: value.shape[2],
      values: value.values(),
    });
  }
  const lengths = new Set(entries.map((e) => e.length));
  if (lengths.size !== 1) {
    throw new RmlLayoutError(
      `unrecognized layout: mixed signal lengths ${[...lengths].join(", ")}`);
  }
  return entries;
}

export function convertEntries(
  entries: RmlEntry[],
  options: ConvertOptions = {},
): { dataset: NeutralDataset; summary: ConvertSummary } {
  const available = new Set(entries.map((e) => e.mod));
  let keep: Set<string> | null = null;
  if (options.keepMods !== undefined) {
    keep = new Set(options.keepMods);
    for (const name of keep) {
      if (!available.has(name)) {
        throw new RmlLayoutError(
          `unknown modulation ${name}; archive holds: ${[...available].sort().join(", ")}`);
      }
    }
  }
  const inRange = (snr: number) =>
    (options.snrMin === undefined || snr >= options.snrMin) &&
    (options.snrMax === undefined || snr <= options.snrMax);

  const kept = entries.filter((e) => (keep === null || keep.has(e.mod)) && inRange(e.snrDb));
  if (kept.length === 0) {
    throw new RmlLayoutError("filters removed every entry in the archive");
  }
  const classNames = [...new Set(kept.map((e) => e.mod))].sort();
  const labelOf = new Map(classNames.map((name, i) => [name, i]));
  const signalLength = kept[0].length;

  const records: NeutralRecord[] = [];
  const perClass = new Map<string, number>(classNames.map((n) => [n, 0]));
  for (const name of classNames) {
    const group = kept
      .filter((e) => e.mod === name)
      .sort((a, b) => a.snrDb - b.snrDb);
    for (const entry of group) {
      const stride = 2 * entry.length;
      for (let r = 0; r < entry.count; r++) {
        const samples = new Float32Array(stride);
        for (let j = 0; j < stride; j++) {
          samples[j] = entry.values[r * stride + j];
        }
        records.push({ label: labelOf.get(name)!, snrDb: entry.snrDb, samples });
      }
      perClass.set(name, perClass.get(name)! + entry.count);
    }
  }
  return {
    dataset: { classNames, signalLength, records },
    summary: {
      classNames,
      signalLength,
      totalRecords: records.length,
      perClass,
      droppedEntries: entries.length - kept.length,
    },
  };
}
