#!/usr/bin/env node
/**
 * convert --in PATH --out PATH [--mods A,B,...] [--snr-min N] [--snr-max N]
 *
 * Reads an RML2016-style pickle archive and writes the neutral dataset file
 * consumed by the clustering toolkit. Exit codes: 0 success, 1 usage or
 * unrecognized layout, 2 I/O failure.
 */

import * as fs from "fs";

import { encode } from "./neutral";
import { convertEntries, ConvertOptions, parseArchive, RmlLayoutError } from "./rml";

const USAGE =
  "usage: rml-convert convert --in PATH --out PATH [--mods A,B,...] " +
  "[--snr-min N] [--snr-max N]";

interface Args {
  input: string;
  output: string;
  options: ConvertOptions;
}

export function parseArgs(argv: string[]): Args {
  if (argv.length === 0 || argv[0] !== "convert") {
    throw new Error(USAGE);
  }
  let input: string | undefined;
  let output: string | undefined;
  const options: ConvertOptions = {};
  for (let i = 1; i < argv.length; i++) {
    const flag = argv[i];
    const value = argv[i + 1];
    if (value === undefined) throw new Error(`${flag} needs a value\n${USAGE}`);
    switch (flag) {
      case "--in": input = value; break;
      case "--out": output = value; break;
      case "--mods":
        options.keepMods = value.split(",").map((s) => s.trim()).filter((s) => s.length > 0);
        break;
      case "--snr-min": options.snrMin = parseIntStrict(flag, value); break;
      case "--snr-max": options.snrMax = parseIntStrict(flag, value); break;
      default:
        throw new Error(`unknown flag ${flag}\n${USAGE}`);
    }
    i++;
  }
  if (input === undefined || output === undefined) {
    throw new Error(`--in and --out are required\n${USAGE}`);
  }
  return { input, output, options };
}

function parseIntStrict(flag: string, value: string): number {
  const n = Number(value);
  if (!Number.isInteger(n)) throw new Error(`${flag} wants an integer, got ${value}`);
  return n;
}

export function runConvert(args: Args, log: (line: string) => void): void {
  const raw = fs.readFileSync(args.input);
  const entries = parseArchive(raw);
  const { dataset, summary } = convertEntries(entries, args.options);
  fs.writeFileSync(args.output, encode(dataset));
  log(`wrote ${args.output}: ${summary.totalRecords} records, ` +
      `${summary.classNames.length} classes, L=${summary.signalLength}` +
      (summary.droppedEntries ? `, ${summary.droppedEntries} entries filtered out` : ""));
  log("label  class            records");
  summary.classNames.forEach((name, i) => {
    log(`${String(i).padStart(5)}  ${name.padEnd(16)} ${summary.perClass.get(name)}`);
  });
}

export function main(argv: string[]): number {
  let args: Args;
  try {
    args = parseArgs(argv);
  } catch (err) {
    console.error((err as Error).message);
    return 1;
  }
  try {
    runConvert(args, (line) => console.log(line));
    return 0;
  } catch (err) {
    if (err instanceof RmlLayoutError) {
      console.error(`error: ${err.message}`);
      return 1;
    }
    console.error(`i/o error: ${(err as Error).message}`);
    return 2;
  }
}

if (require.main === module) {
  process.exit(main(process.argv.slice(2)));
}
