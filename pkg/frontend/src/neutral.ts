/**
 * Writer (and verification reader) for the neutral dataset file format.
 *
 * Layout, all little-endian: magic "DTCSIG01", u32 version = 1, u32 record
 * count, u32 signal length, u32 class count, then class-count length-prefixed
 * UTF-8 names, then per record: u16 label (0xFFFF = none), i16 snr_db
 * (0x7FFF = none), 2*L float32 samples (I row then Q row).
 */

export const MAGIC = Buffer.from("DTCSIG01", "ascii");
export const FORMAT_VERSION = 1;
export const LABEL_NONE = 0xffff;
export const SNR_NONE = 0x7fff;

export interface NeutralRecord {
  label: number | null;
  snrDb: number | null;
  /** Interleaved rows: I row then Q row, each signalLength floats. */
  samples: Float32Array;
}

export interface NeutralDataset {
  classNames: string[];
  signalLength: number;
  records: NeutralRecord[];
}

export class NeutralFormatError extends Error {}

export function encode(ds: NeutralDataset): Buffer {
  const { classNames, signalLength, records } = ds;
  for (const [i, rec] of records.entries()) {
    if (rec.samples.length !== 2 * signalLength) {
      throw new NeutralFormatError(
        `record ${i} holds ${rec.samples.length} samples, expected ${2 * signalLength}`);
    }
    if (rec.label !== null && (rec.label < 0 || rec.label >= classNames.length)) {
      throw new NeutralFormatError(`record ${i} label ${rec.label} out of range`);
    }
  }
  const nameBufs = classNames.map((name) => Buffer.from(name, "utf8"));
  let size = MAGIC.length + 16;
  for (const nb of nameBufs) size += 4 + nb.length;
  size += records.length * (4 + 8 * signalLength);

  const out = Buffer.alloc(size);
  let pos = 0;
  MAGIC.copy(out, pos); pos += MAGIC.length;
  pos = out.writeUInt32LE(FORMAT_VERSION, pos);
  pos = out.writeUInt32LE(records.length, pos);
  pos = out.writeUInt32LE(signalLength, pos);
  pos = out.writeUInt32LE(classNames.length, pos);
  for (const nb of nameBufs) {
    pos = out.writeUInt32LE(nb.length, pos);
    nb.copy(out, pos); pos += nb.length;
  }
  for (const rec of records) {
    pos = out.writeUInt16LE(rec.label === null ? LABEL_NONE : rec.label, pos);
    pos = out.writeInt16LE(rec.snrDb === null ? SNR_NONE : rec.snrDb, pos);
    for (let i = 0; i < rec.samples.length; i++) {
      pos = out.writeFloatLE(rec.samples[i], pos);
    }
  }
  return out;
}

export function decode(buf: Buffer): NeutralDataset {
  let pos = 0;
  const need = (n: number, what: string) => {
    if (pos + n > buf.length) {
      throw new NeutralFormatError(`truncated file: ran out of bytes reading ${what}`);
    }
  };
  need(MAGIC.length, "magic");
  if (!buf.subarray(0, MAGIC.length).equals(MAGIC)) {
    throw new NeutralFormatError("bad magic");
  }
  pos = MAGIC.length;
  need(16, "header");
  const version = buf.readUInt32LE(pos); pos += 4;
  if (version !== FORMAT_VERSION) {
    throw new NeutralFormatError(`version mismatch: expected ${FORMAT_VERSION}, got ${version}`);
  }
  const count = buf.readUInt32LE(pos); pos += 4;
  const signalLength = buf.readUInt32LE(pos); pos += 4;
  const k = buf.readUInt32LE(pos); pos += 4;
  const classNames: string[] = [];
  for (let i = 0; i < k; i++) {
    need(4, `class name ${i} length`);
    const len = buf.readUInt32LE(pos); pos += 4;
    need(len, `class name ${i}`);
    classNames.push(buf.subarray(pos, pos + len).toString("utf8"));
    pos += len;
  }
  const records: NeutralRecord[] = [];
  for (let i = 0; i < count; i++) {
    need(4 + 8 * signalLength, `record ${i}`);
    const labelRaw = buf.readUInt16LE(pos); pos += 2;
    const snrRaw = buf.readInt16LE(pos); pos += 2;
    const samples = new Float32Array(2 * signalLength);
    for (let j = 0; j < samples.length; j++) {
      samples[j] = buf.readFloatLE(pos); pos += 4;
    }
    records.push({
      label: labelRaw === LABEL_NONE ? null : labelRaw,
      snrDb: snrRaw === SNR_NONE ? null : snrRaw,
      samples,
    });
  }
  if (pos !== buf.length) {
    throw new NeutralFormatError(
      `record/header count disagreement: ${buf.length - pos} trailing bytes`);
  }
  return { classNames, signalLength, records };
}
