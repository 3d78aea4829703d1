/**
 * Minimal pickle reader for RML-style archives.
 *
 * Supports the opcode subset emitted for dicts of numpy float arrays keyed by
 * (string, int) tuples: Python 2 era protocol-2 pickles (the original RML2016
 * distributions) as well as Python 3 re-pickles up to protocol 5. Anything
 * outside that subset raises PickleError with the offending opcode.
 */

export class PickleError extends Error {}

export class PyTuple {
  constructor(public items: PyValue[]) {}
}

export class PyDict {
  entries: Array<[PyValue, PyValue]> = [];

  set(key: PyValue, value: PyValue): void {
    for (const entry of this.entries) {
      if (keyEquals(entry[0], key)) {
        entry[1] = value;
        return;
      }
    }
    this.entries.push([key, value]);
  }
}

export class DType {
  littleEndian = true;

  constructor(public code: string) {
    if (code.startsWith("<") || code.startsWith("=") || code.startsWith("|")) {
      this.code = code.slice(1);
    } else if (code.startsWith(">")) {
      this.code = code.slice(1);
      this.littleEndian = false;
    }
  }

  get itemsize(): number {
    const size = Number(this.code.slice(1));
    if (!Number.isFinite(size) || size <= 0) {
      throw new PickleError(`unsupported dtype code ${this.code}`);
    }
    return size;
  }
}

export class NDArray {
  shape: number[] = [];
  dtype: DType | null = null;
  data: Buffer = Buffer.alloc(0);

  get size(): number {
    return this.shape.reduce((a, b) => a * b, 1);
  }

  /** Element values as float64, honoring dtype code and byte order. */
  values(): Float64Array {
    if (this.dtype === null) {
      throw new PickleError("ndarray was never given a dtype");
    }
    const { code, littleEndian, itemsize } = this.dtype;
    const n = this.size;
    if (this.data.length !== n * itemsize) {
      throw new PickleError(
        `ndarray buffer holds ${this.data.length} bytes, shape needs ${n * itemsize}`);
    }
    const view = new DataView(this.data.buffer, this.data.byteOffset, this.data.length);
    const out = new Float64Array(n);
    for (let i = 0; i < n; i++) {
      if (code === "f4") out[i] = view.getFloat32(i * 4, littleEndian);
      else if (code === "f8") out[i] = view.getFloat64(i * 8, littleEndian);
      else if (code === "i4") out[i] = view.getInt32(i * 4, littleEndian);
      else if (code === "i8") out[i] = Number(view.getBigInt64(i * 8, littleEndian));
      else if (code === "i2") out[i] = view.getInt16(i * 2, littleEndian);
      else if (code === "u1") out[i] = view.getUint8(i);
      else throw new PickleError(`unsupported dtype code ${code}`);
    }
    return out;
  }
}

export type PyValue =
  | null
  | boolean
  | number
  | string
  | Buffer
  | PyTuple
  | PyDict
  | PyValue[]
  | NDArray
  | DType
  | GlobalRef;

/** Token for a resolved module.name global. */
export class GlobalRef {
  constructor(public module: string, public name: string) {}

  get key(): string {
    return `${this.module}.${this.name}`;
  }
}

export function keyEquals(a: PyValue, b: PyValue): boolean {
  if (a instanceof PyTuple && b instanceof PyTuple) {
    return (
      a.items.length === b.items.length &&
      a.items.every((item, i) => keyEquals(item, b.items[i]))
    );
  }
  return a === b;
}

const MARK = Symbol("mark");

const KNOWN_GLOBALS = new Set([
  "numpy.core.multiarray._reconstruct",
  "numpy._core.multiarray._reconstruct",
  "numpy.core.multiarray.scalar",
  "numpy._core.multiarray.scalar",
  "numpy.ndarray",
  "numpy.dtype",
  "_codecs.encode",
]);

export function loads(buf: Buffer): PyValue {
  const stack: Array<PyValue | typeof MARK> = [];
  const memo = new Map<number, PyValue>();
  let pos = 0;

  const need = (n: number, what: string) => {
    if (pos + n > buf.length) {
      throw new PickleError(`truncated pickle while reading ${what}`);
    }
  };
  const u1 = () => { need(1, "u1"); return buf.readUInt8(pos++); };
  const u2 = () => { need(2, "u2"); const v = buf.readUInt16LE(pos); pos += 2; return v; };
  const i4 = () => { need(4, "i4"); const v = buf.readInt32LE(pos); pos += 4; return v; };
  const u4 = () => { need(4, "u4"); const v = buf.readUInt32LE(pos); pos += 4; return v; };
  const bytes = (n: number, what: string) => {
    need(n, what);
    const out = buf.subarray(pos, pos + n);
    pos += n;
    return out;
  };
  const line = () => {
    const nl = buf.indexOf(0x0a, pos);
    if (nl < 0) throw new PickleError("truncated pickle: unterminated line");
    const out = buf.subarray(pos, nl).toString("latin1");
    pos = nl + 1;
    return out;
  };
  const pop = (): PyValue => {
    const v = stack.pop();
    if (v === undefined || v === MARK) throw new PickleError("stack underflow");
    return v;
  };
  const popMark = (): PyValue[] => {
    const idx = stack.lastIndexOf(MARK);
    if (idx < 0) throw new PickleError("no MARK on stack");
    const items = stack.splice(idx + 1) as PyValue[];
    stack.pop();
    return items;
  };
  const top = (): PyValue => {
    const v = stack[stack.length - 1];
    if (v === undefined || v === MARK) throw new PickleError("empty stack");
    return v;
  };
  const put = (key: number) => {
    memo.set(key, top());
  };

  const asBuffer = (v: PyValue, what: string): Buffer => {
    if (Buffer.isBuffer(v)) return v;
    if (typeof v === "string") return Buffer.from(v, "latin1");
    throw new PickleError(`${what}: expected raw bytes`);
  };

  const reduce = (fn: PyValue, args: PyValue): PyValue => {
    if (!(fn instanceof GlobalRef) || !(args instanceof PyTuple)) {
      throw new PickleError("REDUCE on unsupported callable");
    }
    const key = fn.key;
    if (key.endsWith("multiarray._reconstruct")) {
      return new NDArray();
    }
    if (key === "numpy.dtype") {
      const code = args.items[0];
      if (typeof code !== "string") throw new PickleError("numpy.dtype wants a type code");
      return new DType(code);
    }
    if (key === "_codecs.encode") {
      const [text, codec] = args.items;
      if (typeof text !== "string" || (codec !== "latin1" && codec !== "latin-1")) {
        throw new PickleError("_codecs.encode: only latin1 payloads are supported");
      }
      return Buffer.from(text, "latin1");
    }
    if (key.endsWith("multiarray.scalar")) {
      const [dt, raw] = args.items;
      if (!(dt instanceof DType)) throw new PickleError("scalar without dtype");
      const arr = new NDArray();
      arr.shape = [1];
      arr.dtype = dt;
      arr.data = asBuffer(raw, "scalar payload");
      return arr.values()[0];
    }
    throw new PickleError(`REDUCE of unsupported global ${key}`);
  };

  const build = (obj: PyValue, state: PyValue): PyValue => {
    if (obj instanceof NDArray) {
      if (!(state instanceof PyTuple) || state.items.length < 5) {
        throw new PickleError("ndarray BUILD state must be a 5-tuple");
      }
      const [, shape, dtype, fortran, data] = state.items;
      if (!(shape instanceof PyTuple)) throw new PickleError("ndarray shape must be a tuple");
      obj.shape = shape.items.map((v) => {
        if (typeof v !== "number") throw new PickleError("non-integer extent");
        return v;
      });
      if (!(dtype instanceof DType)) throw new PickleError("ndarray BUILD without dtype");
      obj.dtype = dtype;
      if (fortran === true) throw new PickleError("fortran-order arrays are not supported");
      obj.data = asBuffer(data, "ndarray payload");
      return obj;
    }
    if (obj instanceof DType) {
      if (!(state instanceof PyTuple) || state.items.length < 2) {
        throw new PickleError("dtype BUILD state must be a tuple");
      }
      const order = state.items[1];
      if (order === ">") obj.littleEndian = false;
      return obj;
    }
    throw new PickleError("BUILD on unsupported object");
  };

  for (;;) {
    need(1, "opcode");
    const op = buf.readUInt8(pos++);
    switch (op) {
      case 0x80: { // PROTO
        const proto = u1();
        if (proto > 5) throw new PickleError(`unsupported protocol ${proto}`);
        break;
      }
      case 0x95: pos += 8; break;                       // FRAME
      case 0x2e: {                                       // STOP
        const result = pop();
        return result;
      }
      case 0x28: stack.push(MARK); break;                // MARK
      case 0x7d: stack.push(new PyDict()); break;        // EMPTY_DICT
      case 0x5d: stack.push([]); break;                  // EMPTY_LIST
      case 0x29: stack.push(new PyTuple([])); break;     // EMPTY_TUPLE
      case 0x4e: stack.push(null); break;                // NONE
      case 0x88: stack.push(true); break;                // NEWTRUE
      case 0x89: stack.push(false); break;               // NEWFALSE
      case 0x85: stack.push(new PyTuple([pop()])); break;            // TUPLE1
      case 0x86: { const b = pop(); const a = pop(); stack.push(new PyTuple([a, b])); break; }
      case 0x87: { const c = pop(); const b = pop(); const a = pop();
                   stack.push(new PyTuple([a, b, c])); break; }
      case 0x74: stack.push(new PyTuple(popMark())); break;          // TUPLE
      case 0x4a: stack.push(i4()); break;                // BININT
      case 0x4b: stack.push(u1()); break;                // BININT1
      case 0x4d: stack.push(u2()); break;                // BININT2
      case 0x8a: { // LONG1
        const n = u1();
        const raw = bytes(n, "LONG1");
        let val = 0n;
        for (let i = n - 1; i >= 0; i--) val = (val << 8n) | BigInt(raw[i]);
        if (n > 0 && raw[n - 1] & 0x80) val -= 1n << BigInt(8 * n);
        stack.push(Number(val));
        break;
      }
      case 0x47: { // BINFLOAT (big-endian double)
        need(8, "BINFLOAT");
        stack.push(buf.readDoubleBE(pos));
        pos += 8;
        break;
      }
      case 0x55: { const n = u1(); stack.push(bytes(n, "SHORT_BINSTRING").toString("latin1")); break; }
      case 0x54: { const n = u4(); stack.push(bytes(n, "BINSTRING").toString("latin1")); break; }
      case 0x58: { const n = u4(); stack.push(bytes(n, "BINUNICODE").toString("utf8")); break; }
      case 0x8c: { const n = u1(); stack.push(bytes(n, "SHORT_BINUNICODE").toString("utf8")); break; }
      case 0x42: { const n = u4(); stack.push(Buffer.from(bytes(n, "BINBYTES"))); break; }
      case 0x43: { const n = u1(); stack.push(Buffer.from(bytes(n, "SHORT_BINBYTES"))); break; }
      case 0x8e: { // BINBYTES8
        need(8, "BINBYTES8");
        const n = Number(buf.readBigUInt64LE(pos));
        pos += 8;
        stack.push(Buffer.from(bytes(n, "BINBYTES8 payload")));
        break;
      }
      case 0x63: { // GLOBAL
        const module = line();
        const name = line();
        const ref = new GlobalRef(module, name);
        if (!KNOWN_GLOBALS.has(ref.key)) {
          throw new PickleError(`unsupported global ${ref.key}`);
        }
        stack.push(ref);
        break;
      }
      case 0x93: { // STACK_GLOBAL
        const name = pop();
        const module = pop();
        if (typeof module !== "string" || typeof name !== "string") {
          throw new PickleError("STACK_GLOBAL wants two strings");
        }
        const ref = new GlobalRef(module, name);
        if (!KNOWN_GLOBALS.has(ref.key)) {
          throw new PickleError(`unsupported global ${ref.key}`);
        }
        stack.push(ref);
        break;
      }
      case 0x52: { const args = pop(); const fn = pop(); stack.push(reduce(fn, args)); break; }
      case 0x62: { const state = pop(); const obj = pop(); stack.push(build(obj, state)); break; }
      case 0x71: put(u1()); break;                       // BINPUT
      case 0x72: put(u4()); break;                       // LONG_BINPUT
      case 0x94: put(memo.size); break;                  // MEMOIZE
      case 0x68: { // BINGET
        const key = u1();
        if (!memo.has(key)) throw new PickleError(`BINGET of unknown memo ${key}`);
        stack.push(memo.get(key)!);
        break;
      }
      case 0x6a: { // LONG_BINGET
        const key = u4();
        if (!memo.has(key)) throw new PickleError(`LONG_BINGET of unknown memo ${key}`);
        stack.push(memo.get(key)!);
        break;
      }
      case 0x73: { // SETITEM
        const value = pop();
        const key = pop();
        const dict = top();
        if (!(dict instanceof PyDict)) throw new PickleError("SETITEM on non-dict");
        dict.set(key, value);
        break;
      }
      case 0x75: { // SETITEMS
        const items = popMark();
        const dict = top();
        if (!(dict instanceof PyDict)) throw new PickleError("SETITEMS on non-dict");
        for (let i = 0; i + 1 < items.length; i += 2) dict.set(items[i], items[i + 1]);
        break;
      }
      case 0x61: { // APPEND
        const value = pop();
        const list = top();
        if (!Array.isArray(list)) throw new PickleError("APPEND on non-list");
        list.push(value);
        break;
      }
      case 0x65: { // APPENDS
        const items = popMark();
        const list = top();
        if (!Array.isArray(list)) throw new PickleError("APPENDS on non-list");
        list.push(...items);
        break;
      }
      default:
        throw new PickleError(
          `unsupported pickle opcode 0x${op.toString(16).padStart(2, "0")} at ${pos - 1}`);
    }
  }
}
