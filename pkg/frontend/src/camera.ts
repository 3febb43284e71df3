/** Camera math mirroring the renderer's conventions exactly: right-handed,
 * camera looks down -Z, +Y up, pixel (0,0) top-left, rays through pixel
 * centers, euclidean eye-space depth.  The 11-double wire layout is
 * px py pz qw qx qy qz fov_deg near far aspect. */

export interface CameraPose {
  position: [number, number, number];
  orientation: [number, number, number, number]; // w x y z
  verticalFov: number;
  near: number;
  far: number;
}

export function unpackCamera(values: Float64Array | number[]): CameraPose {
  if (values.length < 10) throw new Error("camera needs >= 10 values");
  return {
    position: [values[0], values[1], values[2]],
    orientation: [values[3], values[4], values[5], values[6]],
    verticalFov: values[7],
    near: values[8],
    far: values[9],
  };
}

export function packCamera(cam: CameraPose, aspect: number): number[] {
  return [...cam.position, ...cam.orientation, cam.verticalFov, cam.near, cam.far, aspect];
}

export function tanHalfFov(cam: CameraPose): number {
  return Math.tan((cam.verticalFov * Math.PI / 180) / 2);
}

/** World-from-camera rotation, row-major 3x3. */
export function quatToMatrix(q: [number, number, number, number]): number[] {
  const [w, x, y, z] = q;
  return [
    1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
    2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
    2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
  ];
}

export function matrixToQuat(m: number[]): [number, number, number, number] {
  const t = m[0] + m[4] + m[8];
  let w: number, x: number, y: number, z: number;
  if (t > 0) {
    const s = Math.sqrt(t + 1.0) * 2;
    w = 0.25 * s;
    x = (m[7] - m[5]) / s;
    y = (m[2] - m[6]) / s;
    z = (m[3] - m[1]) / s;
  } else if (m[0] > m[4] && m[0] > m[8]) {
    const s = Math.sqrt(1.0 + m[0] - m[4] - m[8]) * 2;
    w = (m[7] - m[5]) / s;
    x = 0.25 * s;
    y = (m[1] + m[3]) / s;
    z = (m[2] + m[6]) / s;
  } else if (m[4] > m[8]) {
    const s = Math.sqrt(1.0 + m[4] - m[0] - m[8]) * 2;
    w = (m[2] - m[6]) / s;
    x = (m[1] + m[3]) / s;
    y = 0.25 * s;
    z = (m[5] + m[7]) / s;
  } else {
    const s = Math.sqrt(1.0 + m[8] - m[0] - m[4]) * 2;
    w = (m[3] - m[1]) / s;
    x = (m[2] + m[6]) / s;
    y = (m[5] + m[7]) / s;
    z = 0.25 * s;
  }
  const n = Math.sqrt(w * w + x * x + y * y + z * z);
  return [w / n, x / n, y / n, z / n];
}

export function lookAt(
  position: [number, number, number],
  target: [number, number, number],
  verticalFov = 60,
  near = 0.05,
  far = 1000,
): CameraPose {
  const f = [target[0] - position[0], target[1] - position[1], target[2] - position[2]];
  const fn = Math.sqrt(f[0] * f[0] + f[1] * f[1] + f[2] * f[2]);
  const fwd = [f[0] / fn, f[1] / fn, f[2] / fn];
  const up = [0, 1, 0];
  const right = [
    fwd[1] * up[2] - fwd[2] * up[1],
    fwd[2] * up[0] - fwd[0] * up[2],
    fwd[0] * up[1] - fwd[1] * up[0],
  ];
  const rn = Math.sqrt(right[0] * right[0] + right[1] * right[1] + right[2] * right[2]);
  if (rn < 1e-12) throw new Error("view direction parallel to up");
  const r = [right[0] / rn, right[1] / rn, right[2] / rn];
  const u = [
    r[1] * fwd[2] - r[2] * fwd[1],
    r[2] * fwd[0] - r[0] * fwd[2],
    r[0] * fwd[1] - r[1] * fwd[0],
  ];
  // columns: right, true-up, -forward
  const m = [r[0], u[0], -fwd[0], r[1], u[1], -fwd[1], r[2], u[2], -fwd[2]];
  return {
    position,
    orientation: matrixToQuat(m),
    verticalFov,
    near,
    far,
  };
}

export interface OrbitState {
  center: [number, number, number];
  azimuthDeg: number;
  elevationDeg: number;
  distance: number;
}

export function orbitPose(orbit: OrbitState, verticalFov = 60, near = 0.05, far = 1000): CameraPose {
  const az = orbit.azimuthDeg * Math.PI / 180;
  const el = orbit.elevationDeg * Math.PI / 180;
  const offset: [number, number, number] = [
    orbit.distance * Math.cos(el) * Math.sin(az),
    orbit.distance * Math.sin(el),
    orbit.distance * Math.cos(el) * Math.cos(az),
  ];
  const position: [number, number, number] = [
    orbit.center[0] + offset[0],
    orbit.center[1] + offset[1],
    orbit.center[2] + offset[2],
  ];
  return lookAt(position, orbit.center, verticalFov, near, far);
}

/** Normalized world ray through pixel center; identical arithmetic to the
 * renderer's ray_directions. */
export function rayDirection(
  px: number, py: number, width: number, height: number,
  rot: number[], tanHalf: number, aspect: number,
): [number, number, number] {
  const u = (px + 0.5) * 2.0 / width - 1.0;
  const v = 1.0 - (py + 0.5) * 2.0 / height;
  const dx = u * (tanHalf * aspect);
  const dy = v * tanHalf;
  const dz = -1.0;
  const wx = rot[0] * dx + rot[1] * dy + rot[2] * dz;
  const wy = rot[3] * dx + rot[4] * dy + rot[5] * dz;
  const wz = rot[6] * dx + rot[7] * dy + rot[8] * dz;
  const inv = 1.0 / Math.sqrt(wx * wx + wy * wy + wz * wz);
  return [wx * inv, wy * inv, wz * inv];
}
