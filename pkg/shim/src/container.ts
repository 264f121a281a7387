/**
 * Binary feature container codec (magic "GVFM", version u16, h/w/k u32,
 * then f32 row-major data, all little-endian). Marshalling only; the shim
 * never computes on the values.
 */

const MAGIC = "GVFM";
const VERSION = 1;
const HEADER_BYTES = 4 + 2 + 3 * 4;

export interface FeatureMap {
  h: number;
  w: number;
  k: number;
  /** Row-major [h][w][k] values. */
  data: ArrayLike<number>;
}

export function vectorMap(values: ArrayLike<number>): FeatureMap {
  return { h: 1, w: 1, k: values.length, data: values };
}

export function encodeContainer(map: FeatureMap): Buffer {
  const { h, w, k, data } = map;
  if (data.length !== h * w * k) {
    throw new RangeError(
      `container data length ${data.length} != h*w*k = ${h * w * k}`,
    );
  }
  const buf = Buffer.alloc(HEADER_BYTES + 4 * data.length);
  buf.write(MAGIC, 0, "ascii");
  buf.writeUInt16LE(VERSION, 4);
  buf.writeUInt32LE(h, 6);
  buf.writeUInt32LE(w, 10);
  buf.writeUInt32LE(k, 14);
  for (let i = 0; i < data.length; i++) {
    buf.writeFloatLE(data[i], HEADER_BYTES + 4 * i);
  }
  return buf;
}

export function decodeContainer(buf: Buffer): FeatureMap {
  if (buf.length < HEADER_BYTES) {
    throw new RangeError("container truncated: missing header");
  }
  if (buf.toString("ascii", 0, 4) !== MAGIC) {
    throw new RangeError("bad container magic");
  }
  const version = buf.readUInt16LE(4);
  if (version !== VERSION) {
    throw new RangeError(`unsupported container version ${version}`);
  }
  const h = buf.readUInt32LE(6);
  const w = buf.readUInt32LE(10);
  const k = buf.readUInt32LE(14);
  const expected = HEADER_BYTES + 4 * h * w * k;
  if (buf.length !== expected) {
    throw new RangeError(`container size ${buf.length} != expected ${expected}`);
  }
  const data = new Float64Array(h * w * k);
  for (let i = 0; i < data.length; i++) {
    data[i] = buf.readFloatLE(HEADER_BYTES + 4 * i);
  }
  return { h, w, k, data };
}
