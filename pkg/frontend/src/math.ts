/** Camera math mirroring the service conventions: camera-to-world extrinsics,
 * +z forward, image y down (so the camera's world-up is -R*ey), pixel centers
 * at (u+0.5, v+0.5). The canonical first view is [I | (0,0,-1)].
 */

export type Vec3 = [number, number, number];
/** Row-major 3x3 matrix, matching the wire format. */
export type Mat3 = number[];

export interface Pose {
  rotation: Mat3; // 9 floats, row-major
  center: Vec3;
}

export interface Orbit {
  azimuth: number; // radians, 0 = looking from -z toward origin
  elevation: number; // radians, positive = above the xz-plane
  radius: number;
}

export const sub = (a: Vec3, b: Vec3): Vec3 => [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
export const scale = (a: Vec3, s: number): Vec3 => [a[0] * s, a[1] * s, a[2] * s];
export const dot = (a: Vec3, b: Vec3): number => a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
export const norm = (a: Vec3): number => Math.sqrt(dot(a, a));
export const normalize = (a: Vec3): Vec3 => scale(a, 1 / (norm(a) || 1));
export const cross = (a: Vec3, b: Vec3): Vec3 => [
  a[1] * b[2] - a[2] * b[1],
  a[2] * b[0] - a[0] * b[2],
  a[0] * b[1] - a[1] * b[0],
];

export function matColumn(m: Mat3, c: number): Vec3 {
  return [m[c], m[3 + c], m[6 + c]];
}

export function fromColumns(x: Vec3, y: Vec3, z: Vec3): Mat3 {
  return [x[0], y[0], z[0], x[1], y[1], z[1], x[2], y[2], z[2]];
}

/** Apply the camera-to-world rotation to a camera-frame vector. */
export function rotate(m: Mat3, v: Vec3): Vec3 {
  return [
    m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
    m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
    m[6] * v[0] + m[7] * v[1] + m[8] * v[2],
  ];
}

export function orbitToCenter(orbit: Orbit): Vec3 {
  const { azimuth: az, elevation: el, radius: r } = orbit;
  return [
    r * Math.cos(el) * Math.sin(az),
    r * Math.sin(el),
    -r * Math.cos(el) * Math.cos(az),
  ];
}

/** Roll-free look-at pose: up aligned with the projection of world +y onto the
 * image plane, falling back to +x when looking along the pole. */
export function lookAtPose(center: Vec3, target: Vec3 = [0, 0, 0]): Pose {
  const z = normalize(sub(target, center));
  let upRef: Vec3 = [0, 1, 0];
  let u = sub(upRef, scale(z, dot(upRef, z)));
  if (norm(u) < 1e-6) {
    upRef = [1, 0, 0];
    u = sub(upRef, scale(z, dot(upRef, z)));
  }
  u = normalize(u);
  const y = scale(u, -1); // image y points down
  const x = cross(y, z);
  return { rotation: fromColumns(x, y, z), center: [...center] as Vec3 };
}

export function orbitToPose(orbit: Orbit): Pose {
  return lookAtPose(orbitToCenter(orbit));
}

/** World-space corner rays of a camera frustum at the given depth. */
export function frustumCorners(pose: Pose, fovDeg: number, depth: number): Vec3[] {
  const t = Math.tan((fovDeg * Math.PI) / 360);
  const cornersCam: Vec3[] = [
    [-t, -t, 1],
    [t, -t, 1],
    [t, t, 1],
    [-t, t, 1],
  ];
  return cornersCam.map((c) => {
    const w = rotate(pose.rotation, scale(c, depth));
    return [w[0] + pose.center[0], w[1] + pose.center[1], w[2] + pose.center[2]] as Vec3;
  });
}

export function maxAbsDiff(a: number[], b: number[]): number {
  let worst = 0;
  for (let i = 0; i < a.length; i++) worst = Math.max(worst, Math.abs(a[i] - b[i]));
  return worst;
}

/** Orthonormality defect of a row-major rotation: max |R^T R - I| entry. */
export function rotationDefect(m: Mat3): number {
  let worst = 0;
  for (let i = 0; i < 3; i++) {
    for (let j = 0; j < 3; j++) {
      let s = 0;
      for (let k = 0; k < 3; k++) s += m[k * 3 + i] * m[k * 3 + j];
      worst = Math.max(worst, Math.abs(s - (i === j ? 1 : 0)));
    }
  }
  return worst;
}

/** K roughly uniform directions on the sphere (golden-angle spiral). */
export function sphereDirections(k: number): Vec3[] {
  const out: Vec3[] = [];
  const golden = Math.PI * (1 + Math.sqrt(5));
  for (let i = 0; i < k; i++) {
    const y = 1 - (2 * (i + 0.5)) / k;
    const r = Math.sqrt(Math.max(0, 1 - y * y));
    const phi = golden * (i + 0.5);
    out.push([r * Math.cos(phi), y, r * Math.sin(phi)]);
  }
  return out;
}
