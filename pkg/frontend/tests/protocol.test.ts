import { describe, expect, it } from "vitest";

import {
  ENC_RAW, ENC_RLE, ENC_VDI, ProtocolError,
  decodeFrame, decodeFramePayload, decodeStats, encodeFrame,
  encodeEcho, encodeSteering, encodeViz, KIND_SET_PARAM, VIZ_SET_RADIUS,
} from "../src/protocol.js";
import { fixture, fixtureJson } from "./fixtures.js";

const meta = fixtureJson("meta.json");

describe("frame decoding", () => {
  for (const name of ["frame_raw.bin", "frame_rle.bin", "frame_vdi.bin"]) {
    it(`round-trips ${name} byte-exactly`, () => {
      const golden = fixture(name);
      const frame = decodeFrame(golden);
      expect(frame.width).toBe(meta.width);
      expect(frame.height).toBe(meta.height);
      expect(frame.simStep).toBe(meta.frame_sim_step);
      const reencoded = encodeFrame(frame);
      expect(Buffer.from(reencoded).equals(Buffer.from(golden))).toBe(true);
    });
  }

  it("decodes raw and rle payloads to the same rgba as the server", () => {
    const rgba = fixture("frame_rgba.bin");
    const raw = decodeFrame(fixture("frame_raw.bin"));
    expect(raw.encoding).toBe(ENC_RAW);
    expect(Buffer.from(decodeFramePayload(raw)).equals(Buffer.from(rgba))).toBe(true);
    const rle = decodeFrame(fixture("frame_rle.bin"));
    expect(rle.encoding).toBe(ENC_RLE);
    expect(Buffer.from(decodeFramePayload(rle)).equals(Buffer.from(rgba))).toBe(true);
  });

  it("vdi frames carry the VDIF file format", () => {
    const frame = decodeFrame(fixture("frame_vdi.bin"));
    expect(frame.encoding).toBe(ENC_VDI);
    expect(String.fromCharCode(...frame.payload.slice(0, 4))).toBe("VDIF");
  });

  it("rejects corrupt magic", () => {
    const bad = fixture("frame_raw.bin").slice();
    bad[0] = 0x58;
    expect(() => decodeFrame(bad)).toThrow(ProtocolError);
  });
});

describe("stats decoding", () => {
  it("reads the golden stats message", () => {
    const stats = decodeStats(fixture("stats.bin"));
    expect(stats.framesPerSecond).toBeCloseTo(58.5, 10);
    expect(stats.simStepsPerSecond).toBeCloseTo(970.25, 10);
    expect(stats.steerRoundtripMs).toBeCloseTo(4.125, 10);
    expect(stats.rankOk).toEqual([true, true, false, true]);
  });
});

describe("outbound encoding", () => {
  it("steering command layout matches the documented wire format", () => {
    const bytes = encodeSteering(KIND_SET_PARAM, "dt", 0.002);
    expect(bytes.length).toBe(23 + 2 + 8);
    expect(String.fromCharCode(...bytes.slice(0, 4))).toBe("STER");
    const dv = new DataView(bytes.buffer);
    expect(dv.getUint8(20)).toBe(KIND_SET_PARAM);
    expect(dv.getUint16(21, true)).toBe(2);
    expect(String.fromCharCode(bytes[23], bytes[24])).toBe("dt");
    expect(dv.getFloat64(25, true)).toBe(0.002);
  });

  it("viz and echo frames carry their magics", () => {
    expect(String.fromCharCode(...encodeViz(VIZ_SET_RADIUS, [0.4]).slice(0, 4))).toBe("VIZP");
    expect(String.fromCharCode(...encodeEcho(7).slice(0, 4))).toBe("ECHO");
  });
});
