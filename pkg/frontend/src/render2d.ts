/** Dependency-free canvas rendering: camera frusta wireframes and a z-buffered
 * point splatter, both projected through a simple diorama orbit camera. */

import { Orbit, Pose, Vec3, frustumCorners, orbitToPose, matColumn, sub, dot } from "./math.js";
import { ParsedCloud } from "./ply.js";

export interface Projector {
  project(p: Vec3): [number, number, number] | null; // x, y, depth
}

export function makeProjector(view: Orbit, width: number, height: number): Projector {
  const pose = orbitToPose(view);
  const right = matColumn(pose.rotation, 0);
  const down = matColumn(pose.rotation, 1);
  const forward = matColumn(pose.rotation, 2);
  const f = 1.2 * Math.min(width, height);
  return {
    project(p: Vec3) {
      const rel = sub(p, pose.center);
      const z = dot(rel, forward);
      if (z < 1e-3) return null;
      const x = (f * dot(rel, right)) / z + width / 2;
      const y = (f * dot(rel, down)) / z + height / 2;
      return [x, y, z];
    },
  };
}

export function drawFrusta(
  ctx: CanvasRenderingContext2D,
  poses: Pose[],
  fovDeg: number,
  view: Orbit,
): void {
  const { width, height } = ctx.canvas;
  const projector = makeProjector(view, width, height);
  ctx.clearRect(0, 0, width, height);
  drawAxes(ctx, projector);
  poses.forEach((pose, i) => {
    const corners = frustumCorners(pose, fovDeg, 0.25 * view.radius);
    const apex = projector.project(pose.center);
    const projected = corners.map((c) => projector.project(c));
    if (!apex || projected.some((p) => p === null)) return;
    ctx.strokeStyle = i === 0 ? "#ff5533" : "#44aaff"; // first view highlighted
    ctx.lineWidth = i === 0 ? 2 : 1;
    ctx.beginPath();
    for (let k = 0; k < 4; k++) {
      const a = projected[k]!;
      const b = projected[(k + 1) % 4]!;
      ctx.moveTo(apex[0], apex[1]);
      ctx.lineTo(a[0], a[1]);
      ctx.moveTo(a[0], a[1]);
      ctx.lineTo(b[0], b[1]);
    }
    ctx.stroke();
  });
}

function drawAxes(ctx: CanvasRenderingContext2D, projector: Projector): void {
  const origin = projector.project([0, 0, 0]);
  if (!origin) return;
  const axes: [Vec3, string][] = [
    [[0.3, 0, 0], "#cc4444"],
    [[0, 0.3, 0], "#44cc44"],
    [[0, 0, 0.3], "#4444cc"],
  ];
  for (const [tip, color] of axes) {
    const p = projector.project(tip);
    if (!p) continue;
    ctx.strokeStyle = color;
    ctx.lineWidth = 1;
    ctx.beginPath();
    ctx.moveTo(origin[0], origin[1]);
    ctx.lineTo(p[0], p[1]);
    ctx.stroke();
  }
}

/** Z-buffered nearest-point splatter into an ImageData. */
export function drawPointCloud(
  ctx: CanvasRenderingContext2D,
  cloud: ParsedCloud,
  view: Orbit,
): void {
  const { width, height } = ctx.canvas;
  const projector = makeProjector(view, width, height);
  const image = ctx.createImageData(width, height);
  const zbuf = new Float32Array(width * height).fill(Infinity);
  image.data.fill(17); // dark background
  for (let i = 3; i < image.data.length; i += 4) image.data[i] = 255;
  for (let i = 0; i < cloud.count; i++) {
    const p = projector.project([
      cloud.positions[3 * i],
      cloud.positions[3 * i + 1],
      cloud.positions[3 * i + 2],
    ]);
    if (!p) continue;
    const x = Math.round(p[0]);
    const y = Math.round(p[1]);
    if (x < 0 || y < 0 || x >= width || y >= height) continue;
    const idx = y * width + x;
    if (p[2] >= zbuf[idx]) continue;
    zbuf[idx] = p[2];
    image.data[4 * idx] = cloud.colors[3 * i];
    image.data[4 * idx + 1] = cloud.colors[3 * i + 1];
    image.data[4 * idx + 2] = cloud.colors[3 * i + 2];
  }
  ctx.putImageData(image, 0, 0);
}

/** Map a depth tensor to a blue-to-yellow colormap on a canvas. */
export function drawDepthMap(
  ctx: CanvasRenderingContext2D,
  depth: Float32Array,
  shape: number[],
): void {
  const [h, w] = shape;
  const image = ctx.createImageData(w, h);
  let lo = Infinity;
  let hi = -Infinity;
  for (const d of depth) {
    if (d > 0) {
      lo = Math.min(lo, d);
      hi = Math.max(hi, d);
    }
  }
  const span = hi > lo ? hi - lo : 1;
  for (let i = 0; i < depth.length; i++) {
    const t = depth[i] > 0 ? (depth[i] - lo) / span : null;
    const base = 4 * i;
    if (t === null) {
      image.data[base] = image.data[base + 1] = image.data[base + 2] = 30;
    } else {
      image.data[base] = Math.round(255 * t);
      image.data[base + 1] = Math.round(255 * (1 - Math.abs(t - 0.5) * 2) * 0.8 + 40);
      image.data[base + 2] = Math.round(255 * (1 - t));
    }
    image.data[base + 3] = 255;
  }
  ctx.putImageData(image, 0, 0);
}
