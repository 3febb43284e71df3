/** Client session logic, UI- and transport-agnostic so tests can drive it.
 *
 * Inbound bytes go through feed(); the newest frame lands in a latest-wins
 * slot (mirroring the server's queue-depth-1 policy).  Steering submissions
 * are fire-and-ack: pending until the matching SRSP arrives.  Camera drags
 * update the local orbit immediately; rendering from the last VDI happens
 * locally, so the view responds even when no frames are arriving. */

import { CameraPose, OrbitState, orbitPose, packCamera } from "./camera.js";
import {
  FrameMessage, StatsMessage, SteerReply,
  KIND_PAUSE, KIND_RESUME, KIND_SET_PARAM, KIND_TERMINATE,
  VIZ_SET_CAMERA, VIZ_SET_COLOR_RANGE, VIZ_SET_MODE, VIZ_SET_RADIUS,
  decodeFrame, decodeStats, decodeSteerReply, encodeEcho, encodeSteering,
  encodeViz, peekMagic, ProtocolError,
} from "./protocol.js";
import { Vdi, decodeVdi, reproject } from "./vdi.js";
import { ENC_VDI } from "./protocol.js";

export type SendFn = (data: Uint8Array) => void;

export interface PendingCommand {
  kind: string;
  name: string;
  value: number;
  sentAt: number;
}

export class ClientSession {
  readonly send: SendFn;
  latestFrame: FrameMessage | null = null;
  latestVdi: Vdi | null = null;
  latestStats: StatsMessage | null = null;
  lastReply: SteerReply | null = null;
  pending: PendingCommand[] = [];
  orbit: OrbitState;
  verticalFov = 50;
  droppedSeqGaps = 0;
  framesSeen = 0;
  protocolErrors = 0;
  onUpdate: (() => void) | null = null;

  constructor(send: SendFn, orbit: OrbitState) {
    this.send = send;
    this.orbit = orbit;
  }

  localCamera(): CameraPose {
    return orbitPose(this.orbit, this.verticalFov, 0.05, 10000);
  }

  /** One server message (already framed; WebSocket preserves boundaries). */
  feed(data: Uint8Array): void {
    let magic: string;
    try {
      magic = peekMagic(data);
      if (magic === "FRM0") {
        const frame = decodeFrame(data);
        if (this.latestFrame && frame.frameSeq > this.latestFrame.frameSeq + 1) {
          this.droppedSeqGaps += frame.frameSeq - this.latestFrame.frameSeq - 1;
        }
        this.latestFrame = frame;
        this.framesSeen += 1;
        if (frame.encoding === ENC_VDI) {
          this.latestVdi = decodeVdi(frame.payload);
        }
        this.send(encodeEcho(frame.captureTimestamp));
      } else if (magic === "STAT") {
        this.latestStats = decodeStats(data);
      } else if (magic === "SRSP") {
        this.lastReply = decodeSteerReply(data);
        this.pending.shift();
      } else {
        throw new ProtocolError(`unknown magic ${magic}`);
      }
    } catch (err) {
      if (err instanceof ProtocolError) {
        this.protocolErrors += 1;
        return;
      }
      throw err;
    }
    this.onUpdate?.();
  }

  // -- steering ---------------------------------------------------------

  private submit(kind: number, kindName: string, name = "", value = 0): void {
    this.pending.push({ kind: kindName, name, value, sentAt: Date.now() });
    this.send(encodeSteering(kind, name, value));
  }

  setParam(name: string, value: number): void {
    this.submit(KIND_SET_PARAM, "set_param", name, value);
  }

  pause(): void {
    this.submit(KIND_PAUSE, "pause");
  }

  resume(): void {
    this.submit(KIND_RESUME, "resume");
  }

  terminate(): void {
    this.submit(KIND_TERMINATE, "terminate");
  }

  // -- visualization ----------------------------------------------------

  setRadius(radius: number): void {
    this.send(encodeViz(VIZ_SET_RADIUS, [radius]));
  }

  setColorRange(vmin: number, vmax: number): void {
    this.send(encodeViz(VIZ_SET_COLOR_RANGE, [vmin, vmax]));
  }

  setMode(mode: "opaque" | "vdi"): void {
    this.send(encodeViz(VIZ_SET_MODE, [mode === "vdi" ? 1.0 : 0.0]));
  }

  /** Drag: local camera moves now; the server learns on release. */
  drag(dAzimuthDeg: number, dElevationDeg: number): void {
    this.orbit.azimuthDeg += dAzimuthDeg;
    this.orbit.elevationDeg = Math.max(-89, Math.min(89, this.orbit.elevationDeg + dElevationDeg));
    this.onUpdate?.();
  }

  zoom(factor: number): void {
    this.orbit.distance = Math.max(0.1, this.orbit.distance * factor);
    this.onUpdate?.();
  }

  /** Push the local camera to the server (drag release / zoom settle). */
  commitCamera(width: number, height: number): void {
    const pose = this.localCamera();
    this.send(encodeViz(VIZ_SET_CAMERA, packCamera(pose, width / height)));
  }

  /** Local view from the last VDI at the current (possibly dragged) camera. */
  reprojectLocal(): Uint8Array | null {
    if (this.latestVdi === null) return null;
    return reproject(this.latestVdi, this.localCamera());
  }
}
