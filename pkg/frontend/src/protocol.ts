/** Wire codecs for the head-node stream: FRM0/STAT inbound, STER/VIZP/ECHO
 * outbound, SRSP replies.  Layouts are little-endian and byte-exact with the
 * server; decode(encode(x)) must reproduce fixture bytes exactly. */

export const ENC_RAW = 0;
export const ENC_RLE = 1;
export const ENC_VDI = 2;

export interface FrameMessage {
  frameSeq: number;
  simStep: number;
  captureTimestamp: number; // microseconds
  width: number;
  height: number;
  encoding: number;
  payload: Uint8Array;
}

export interface StatsMessage {
  framesPerSecond: number;
  simStepsPerSecond: number;
  steerRoundtripMs: number;
  rankOk: boolean[];
}

export interface SteerReply {
  seq: number;
  accepted: boolean;
  message: string;
}

export class ProtocolError extends Error {}

const FRM_HEADER = 37;

function view(data: Uint8Array): DataView {
  return new DataView(data.buffer, data.byteOffset, data.byteLength);
}

function magicOf(data: Uint8Array): string {
  return String.fromCharCode(data[0], data[1], data[2], data[3]);
}

export function peekMagic(data: Uint8Array): string {
  if (data.length < 4) throw new ProtocolError("short message");
  return magicOf(data);
}

export function decodeFrame(data: Uint8Array): FrameMessage {
  if (magicOf(data) !== "FRM0") {
    throw new ProtocolError(`bad frame magic ${magicOf(data)}`);
  }
  const dv = view(data);
  const frameSeq = Number(dv.getBigUint64(4, true));
  const simStep = Number(dv.getBigUint64(12, true));
  const captureTimestamp = Number(dv.getBigUint64(20, true));
  const width = dv.getUint16(28, true);
  const height = dv.getUint16(30, true);
  const encoding = dv.getUint8(32);
  const payloadLen = dv.getUint32(33, true);
  if (data.length < FRM_HEADER + payloadLen) {
    throw new ProtocolError("truncated frame payload");
  }
  return {
    frameSeq, simStep, captureTimestamp, width, height, encoding,
    payload: data.slice(FRM_HEADER, FRM_HEADER + payloadLen),
  };
}

export function encodeFrame(msg: FrameMessage): Uint8Array {
  const out = new Uint8Array(FRM_HEADER + msg.payload.length);
  const dv = view(out);
  out.set([0x46, 0x52, 0x4d, 0x30], 0); // FRM0
  dv.setBigUint64(4, BigInt(msg.frameSeq), true);
  dv.setBigUint64(12, BigInt(msg.simStep), true);
  dv.setBigUint64(20, BigInt(msg.captureTimestamp), true);
  dv.setUint16(28, msg.width, true);
  dv.setUint16(30, msg.height, true);
  dv.setUint8(32, msg.encoding);
  dv.setUint32(33, msg.payload.length, true);
  out.set(msg.payload, FRM_HEADER);
  return out;
}

export function decodeStats(data: Uint8Array): StatsMessage {
  if (magicOf(data) !== "STAT") {
    throw new ProtocolError(`bad stats magic ${magicOf(data)}`);
  }
  const dv = view(data);
  const fps = dv.getFloat64(4, true);
  const sps = dv.getFloat64(12, true);
  const rt = dv.getFloat64(20, true);
  const n = dv.getUint16(28, true);
  const rankOk: boolean[] = [];
  for (let i = 0; i < n; i++) rankOk.push(data[30 + i] === 1);
  return { framesPerSecond: fps, simStepsPerSecond: sps, steerRoundtripMs: rt, rankOk };
}

export function decodeSteerReply(data: Uint8Array): SteerReply {
  if (magicOf(data) !== "SRSP") {
    throw new ProtocolError(`bad reply magic ${magicOf(data)}`);
  }
  const dv = view(data);
  const seq = Number(dv.getBigUint64(4, true));
  const accepted = dv.getUint8(12) === 1;
  const len = dv.getUint16(13, true);
  const message = new TextDecoder().decode(data.slice(15, 15 + len));
  return { seq, accepted, message };
}

// -- outbound ---------------------------------------------------------------

export const KIND_SET_PARAM = 0;
export const KIND_PAUSE = 1;
export const KIND_RESUME = 2;
export const KIND_TERMINATE = 3;

export const VIZ_SET_CAMERA = 16;
export const VIZ_SET_COLOR_RANGE = 17;
export const VIZ_SET_RADIUS = 18;
export const VIZ_SET_MODE = 19;

export function encodeSteering(kind: number, name = "", value = 0): Uint8Array {
  const nameBytes = new TextEncoder().encode(name);
  const out = new Uint8Array(23 + nameBytes.length + 8);
  const dv = view(out);
  out.set([0x53, 0x54, 0x45, 0x52], 0); // STER
  dv.setBigUint64(4, 0n, true); // seq: head-assigned
  dv.setBigUint64(12, 0n, true); // apply_at_step: head-assigned
  dv.setUint8(20, kind);
  dv.setUint16(21, nameBytes.length, true);
  out.set(nameBytes, 23);
  dv.setFloat64(23 + nameBytes.length, value, true);
  return out;
}

export function encodeViz(kind: number, values: number[]): Uint8Array {
  const out = new Uint8Array(15 + values.length * 8);
  const dv = view(out);
  out.set([0x56, 0x49, 0x5a, 0x50], 0); // VIZP
  dv.setBigUint64(4, 0n, true); // apply_at_frame: head-assigned
  dv.setUint8(12, kind);
  dv.setUint16(13, values.length, true);
  values.forEach((v, i) => dv.setFloat64(15 + i * 8, v, true));
  return out;
}

export function encodeEcho(captureTimestamp: number): Uint8Array {
  const out = new Uint8Array(12);
  const dv = view(out);
  out.set([0x45, 0x43, 0x48, 0x4f], 0); // ECHO
  dv.setBigUint64(4, BigInt(captureTimestamp), true);
  return out;
}

// -- payload decoders ---------------------------------------------------------

export function decodeRawRgba(msg: FrameMessage): Uint8Array {
  if (msg.payload.length !== msg.width * msg.height * 4) {
    throw new ProtocolError("raw payload size mismatch");
  }
  return msg.payload;
}

export function decodeRleRgba(msg: FrameMessage): Uint8Array {
  const out = new Uint8Array(msg.width * msg.height * 4);
  const data = msg.payload;
  let pos = 0;
  let pix = 0;
  const total = msg.width * msg.height;
  while (pix < total) {
    const marker = data[pos++];
    if (marker === 0) {
      const count = data[pos++];
      out.set(data.subarray(pos, pos + count * 4), pix * 4);
      pos += count * 4;
      pix += count;
    } else {
      for (let i = 0; i < marker; i++) {
        out[(pix + i) * 4] = data[pos];
        out[(pix + i) * 4 + 1] = data[pos + 1];
        out[(pix + i) * 4 + 2] = data[pos + 2];
        out[(pix + i) * 4 + 3] = data[pos + 3];
      }
      pos += 4;
      pix += marker;
    }
  }
  if (pos !== data.length) throw new ProtocolError("trailing rle bytes");
  return out;
}

export function decodeFramePayload(msg: FrameMessage): Uint8Array {
  if (msg.encoding === ENC_RAW) return decodeRawRgba(msg);
  if (msg.encoding === ENC_RLE) return decodeRleRgba(msg);
  throw new ProtocolError(`image decode of encoding ${msg.encoding} unsupported`);
}
