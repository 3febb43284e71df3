/** Volumetric depth image: decoding the VDIF serialization and reprojecting
 * supersegments into new viewpoints without server round trips.
 *
 * The splatting rule is the renderer's, ported operation-for-operation:
 * anchor each supersegment at its front depth along its source-pixel ray,
 * project into the new camera with a 1-pixel footprint, and over-composite
 * per destination pixel in depth order.  Compositing is float32 (fround)
 * to match the server's arithmetic. */

import { CameraPose, quatToMatrix, rayDirection, tanHalfFov, unpackCamera } from "./camera.js";

const f32 = Math.fround;

export interface Vdi {
  camera: CameraPose;
  width: number;
  height: number;
  sMax: number;
  counts: Uint16Array;
  /** 6 floats per segment slot: front, back, r, g, b, a (premultiplied). */
  segments: Float32Array;
}

export class VdiFormatError extends Error {}

export function decodeVdi(data: Uint8Array): Vdi {
  const dv = new DataView(data.buffer, data.byteOffset, data.byteLength);
  if (String.fromCharCode(data[0], data[1], data[2], data[3]) !== "VDIF") {
    throw new VdiFormatError("bad VDI magic");
  }
  const version = dv.getUint32(4, true);
  if (version !== 1) throw new VdiFormatError(`unsupported VDI version ${version}`);
  const width = dv.getUint16(8, true);
  const height = dv.getUint16(10, true);
  const sMax = dv.getUint16(12, true);
  const camValues = new Float64Array(11);
  for (let i = 0; i < 11; i++) camValues[i] = dv.getFloat64(14 + i * 8, true);
  const camera = unpackCamera(camValues);
  let off = 14 + 88;
  const n = width * height;
  const counts = new Uint16Array(n);
  for (let i = 0; i < n; i++) {
    counts[i] = dv.getUint16(off, true);
    off += 2;
  }
  const segments = new Float32Array(n * sMax * 6);
  for (let p = 0; p < n; p++) {
    for (let s = 0; s < counts[p]; s++) {
      const base = (p * sMax + s) * 6;
      for (let c = 0; c < 6; c++) {
        segments[base + c] = dv.getFloat32(off, true);
        off += 4;
      }
    }
  }
  if (off !== data.length) throw new VdiFormatError("trailing VDI bytes");
  return { camera, width, height, sMax, counts, segments };
}

function quantize(v: number): number {
  let c = v;
  if (c < 0) c = 0;
  if (c > 1) c = 1;
  // float32 multiply and add, exactly like the compiled kernel
  return Math.trunc(f32(f32(f32(c) * 255.0) + 0.5)) & 0xff;
}

/** Front-to-back composite at the VDI's own camera. */
export function compositeIdentity(vdi: Vdi): Uint8Array {
  const out = new Uint8Array(vdi.width * vdi.height * 4);
  for (let p = 0; p < vdi.width * vdi.height; p++) {
    const count = vdi.counts[p];
    if (count === 0) continue;
    let ar = 0, ag = 0, ab = 0, aa = 0;
    for (let s = 0; s < count; s++) {
      const base = (p * vdi.sMax + s) * 6;
      const t = f32(1.0 - aa);
      ar = f32(ar + f32(t * vdi.segments[base + 2]));
      ag = f32(ag + f32(t * vdi.segments[base + 3]));
      ab = f32(ab + f32(t * vdi.segments[base + 4]));
      aa = f32(aa + f32(t * vdi.segments[base + 5]));
    }
    out[p * 4] = quantize(ar);
    out[p * 4 + 1] = quantize(ag);
    out[p * 4 + 2] = quantize(ab);
    out[p * 4 + 3] = quantize(aa);
  }
  return out;
}

export function samePose(a: CameraPose, b: CameraPose): boolean {
  return (
    a.position.every((v, i) => v === b.position[i]) &&
    a.orientation.every((v, i) => v === b.orientation[i]) &&
    a.verticalFov === b.verticalFov && a.near === b.near && a.far === b.far
  );
}

/** Reproject into a new camera; returns RGBA bytes (premultiplied). */
export function reproject(vdi: Vdi, cam: CameraPose): Uint8Array {
  if (samePose(vdi.camera, cam)) return compositeIdentity(vdi);
  const { width, height } = vdi;
  const srcRot = quatToMatrix(vdi.camera.orientation);
  const srcTh = tanHalfFov(vdi.camera);
  const srcAspect = width / height;
  const dstRot = quatToMatrix(cam.orientation);
  const dstTh = tanHalfFov(cam);
  const dstThx = dstTh * (width / height);
  const [so0, so1, so2] = vdi.camera.position;
  const [do0, do1, do2] = cam.position;

  const dest: number[] = [];
  const depth: number[] = [];
  const colorBase: number[] = [];

  for (let p = 0; p < width * height; p++) {
    const count = vdi.counts[p];
    if (count === 0) continue;
    const px = p % width;
    const py = (p - px) / width;
    const [dx, dy, dz] = rayDirection(px, py, width, height, srcRot, srcTh, srcAspect);
    for (let s = 0; s < count; s++) {
      const base = (p * vdi.sMax + s) * 6;
      const front = vdi.segments[base];
      const wx = so0 + dx * front;
      const wy = so1 + dy * front;
      const wz = so2 + dz * front;
      const rx = wx - do0;
      const ry = wy - do1;
      const rz = wz - do2;
      const pcx = dstRot[0] * rx + dstRot[3] * ry + dstRot[6] * rz;
      const pcy = dstRot[1] * rx + dstRot[4] * ry + dstRot[7] * rz;
      const pcz = dstRot[2] * rx + dstRot[5] * ry + dstRot[8] * rz;
      const zneg = -pcz;
      if (zneg <= 1e-12) continue;
      const u = pcx / zneg / dstThx;
      const v = pcy / zneg / dstTh;
      const fx = (u + 1.0) * 0.5 * width - 0.5;
      const fy = (1.0 - v) * 0.5 * height - 0.5;
      const ix = Math.floor(fx + 0.5);
      const iy = Math.floor(fy + 0.5);
      if (ix < 0 || ix >= width || iy < 0 || iy >= height) continue;
      const dist = Math.sqrt((pcx * pcx + pcy * pcy) + pcz * pcz);
      if (dist < cam.near || dist > cam.far) continue;
      dest.push(iy * width + ix);
      depth.push(dist);
      colorBase.push(base);
    }
  }

  const out = new Uint8Array(width * height * 4);
  if (dest.length === 0) return out;
  const order = dest.map((_, i) => i);
  // stable sort: destination pixel, then depth; arrival order breaks ties
  order.sort((a, b) => dest[a] - dest[b] || depth[a] - depth[b]);

  let i = 0;
  while (i < order.length) {
    const pix = dest[order[i]];
    let ar = 0, ag = 0, ab = 0, aa = 0;
    while (i < order.length && dest[order[i]] === pix) {
      const base = colorBase[order[i]];
      const t = f32(1.0 - aa);
      ar = f32(ar + f32(t * vdi.segments[base + 2]));
      ag = f32(ag + f32(t * vdi.segments[base + 3]));
      ab = f32(ab + f32(t * vdi.segments[base + 4]));
      aa = f32(aa + f32(t * vdi.segments[base + 5]));
      i++;
    }
    out[pix * 4] = quantize(ar);
    out[pix * 4 + 1] = quantize(ag);
    out[pix * 4 + 2] = quantize(ab);
    out[pix * 4 + 3] = quantize(aa);
  }
  return out;
}
