/** Browser wiring: WebSocket transport, canvas painting, controls.
 * All protocol/camera/reprojection logic lives in the DOM-free modules. */

import { ClientSession } from "./session.js";
import { ENC_VDI, decodeFramePayload } from "./protocol.js";

function param(name: string, fallback: string): string {
  return new URLSearchParams(window.location.search).get(name) ?? fallback;
}

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

export function startCockpit(): void {
  const host = param("host", window.location.hostname || "127.0.0.1");
  const port = param("port", "8765");
  const canvas = el<HTMLCanvasElement>("view");
  const ctx = canvas.getContext("2d")!;
  const status = el<HTMLSpanElement>("status");
  const statsLine = el<HTMLSpanElement>("stats");
  const replyLine = el<HTMLSpanElement>("reply");

  const ws = new WebSocket(`ws://${host}:${port}/`);
  ws.binaryType = "arraybuffer";

  const session = new ClientSession(
    (data) => ws.send(data),
    { center: [6, 6, 6], azimuthDeg: 0, elevationDeg: 12, distance: 26 },
  );

  let dirty = false;
  session.onUpdate = () => { dirty = true; };

  ws.onopen = () => { status.textContent = "connected"; };
  ws.onclose = () => { status.textContent = "disconnected"; };
  ws.onerror = () => { status.textContent = "connection error"; };
  ws.onmessage = (event) => session.feed(new Uint8Array(event.data as ArrayBuffer));

  function paintRgba(rgba: Uint8Array, width: number, height: number): void {
    if (canvas.width !== width || canvas.height !== height) {
      canvas.width = width;
      canvas.height = height;
    }
    const image = new ImageData(new Uint8ClampedArray(rgba.buffer.slice(0)), width, height);
    ctx.putImageData(image, 0, 0);
  }

  function redraw(): void {
    const frame = session.latestFrame;
    if (!frame) return;
    if (frame.encoding === ENC_VDI && session.latestVdi) {
      const rgba = session.reprojectLocal();
      if (rgba) paintRgba(rgba, session.latestVdi.width, session.latestVdi.height);
    } else if (frame.encoding !== ENC_VDI) {
      paintRgba(decodeFramePayload(frame), frame.width, frame.height);
    }
    if (session.latestStats) {
      const s = session.latestStats;
      const rt = s.steerRoundtripMs >= 0 ? `${s.steerRoundtripMs.toFixed(1)} ms` : "n/a";
      const ranks = s.rankOk.map((ok) => (ok ? "ok" : "LOST")).join(" ");
      statsLine.textContent =
        `${s.framesPerSecond.toFixed(1)} fps | ${s.simStepsPerSecond.toFixed(0)} steps/s ` +
        `| round trip ${rt} | ranks: ${ranks}`;
    }
    if (session.lastReply) {
      const r = session.lastReply;
      replyLine.textContent = r.accepted ? `accepted (seq ${r.seq})` : `rejected: ${r.message}`;
      replyLine.className = r.accepted ? "ok" : "err";
    }
    if (session.pending.length) {
      replyLine.textContent = `pending: ${session.pending.map((p) => p.name || p.kind).join(", ")}`;
      replyLine.className = "pending";
    }
  }

  function tick(): void {
    if (dirty) {
      dirty = false;
      redraw();
    }
    requestAnimationFrame(tick);
  }
  requestAnimationFrame(tick);

  // orbit drag
  let dragging = false;
  let lastX = 0;
  let lastY = 0;
  canvas.addEventListener("pointerdown", (e) => {
    dragging = true;
    lastX = e.clientX;
    lastY = e.clientY;
    canvas.setPointerCapture(e.pointerId);
  });
  canvas.addEventListener("pointermove", (e) => {
    if (!dragging) return;
    session.drag((e.clientX - lastX) * 0.4, (e.clientY - lastY) * 0.4);
    lastX = e.clientX;
    lastY = e.clientY;
  });
  canvas.addEventListener("pointerup", () => {
    if (!dragging) return;
    dragging = false;
    session.commitCamera(canvas.width, canvas.height);
  });
  canvas.addEventListener("wheel", (e) => {
    e.preventDefault();
    session.zoom(e.deltaY > 0 ? 1.1 : 1 / 1.1);
    session.commitCamera(canvas.width, canvas.height);
  });

  // steering controls
  const bind = (id: string, fn: (v: number) => void) => {
    const input = el<HTMLInputElement>(id);
    input.addEventListener("change", () => fn(parseFloat(input.value)));
  };
  bind("dt", (v) => session.setParam("dt", v));
  bind("temperature", (v) => session.setParam("target_temperature", v));
  bind("radius", (v) => session.setRadius(v));
  el<HTMLInputElement>("vmax").addEventListener("change", () => {
    session.setColorRange(0, parseFloat(el<HTMLInputElement>("vmax").value));
  });
  el<HTMLButtonElement>("pause").onclick = () => session.pause();
  el<HTMLButtonElement>("resume").onclick = () => session.resume();
  el<HTMLSelectElement>("mode").onchange = () => {
    session.setMode(el<HTMLSelectElement>("mode").value as "opaque" | "vdi");
  };
}

startCockpit();
