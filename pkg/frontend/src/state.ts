/** Viewer state machine. Pure of DOM concerns: callers subscribe to change
 * events and read the state snapshot. One render request in flight at a time
 * (the latest ask wins); accumulate requests run through a FIFO queue.
 */

import { ApiClient, RenderResult, ServiceConfig } from "./api.js";
import { Orbit, Pose, orbitToPose, sphereDirections, lookAtPose, scale } from "./math.js";
import { ParsedCloud, parsePly } from "./ply.js";
import { Container, parseContainer } from "./rngt.js";

export interface ViewerState {
  config: ServiceConfig | null;
  sessionId: string | null;
  sourcePoses: Pose[];
  orbit: Orbit;
  radiusRange: [number, number];
  confQuantile: number;
  lastRender: RenderResult | null;
  lastMaps: Container | null;
  showDepth: boolean;
  pointCount: number;
  cloud: ParsedCloud | null;
  busy: boolean;
  banner: string | null;
}

type Listener = (state: ViewerState) => void;

export class Viewer {
  state: ViewerState = {
    config: null,
    sessionId: null,
    sourcePoses: [],
    orbit: { azimuth: 0, elevation: 0.3, radius: 1.2 },
    radiusRange: [0.4, 3.0],
    confQuantile: 0.3,
    lastRender: null,
    lastMaps: null,
    showDepth: false,
    pointCount: 0,
    cloud: null,
    busy: false,
    banner: null,
  };

  private listeners: Listener[] = [];
  private renderInFlight = false;
  private pendingRender: Pose | null = null;
  private accumulateQueue: Pose[] = [];
  private accumulating = false;

  constructor(private api: ApiClient) {}

  subscribe(listener: Listener): void {
    this.listeners.push(listener);
  }

  private emit(): void {
    for (const l of this.listeners) l(this.state);
  }

  private patch(update: Partial<ViewerState>): void {
    this.state = { ...this.state, ...update };
    this.emit();
  }

  async connect(): Promise<void> {
    try {
      const config = await this.api.getConfig();
      this.patch({ config, banner: null });
    } catch (err) {
      this.patch({ banner: `server unreachable: ${String(err)}` });
    }
  }

  /** Upload the source views; client-side count validation happens first. */
  async uploadSources(imagesB64: string[]): Promise<void> {
    const expected = this.state.config?.n_sources ?? 4;
    if (imagesB64.length !== expected) {
      this.patch({ banner: `select exactly ${expected} images (${imagesB64.length} chosen)` });
      return;
    }
    this.patch({ busy: true, banner: null });
    try {
      const created = await this.api.createSession(imagesB64);
      const distances = created.poses.map((p) => Math.hypot(...p.center));
      const mean = distances.reduce((a, b) => a + b, 0) / distances.length;
      this.patch({
        sessionId: created.id,
        sourcePoses: created.poses,
        radiusRange: [0.5 * mean, 2.0 * mean],
        orbit: { ...this.state.orbit, radius: mean },
        pointCount: 0,
        cloud: null,
        lastRender: null,
        lastMaps: null,
        busy: false,
      });
    } catch (err) {
      this.patch({ busy: false, banner: `upload failed: ${String(err)}` });
    }
  }

  setOrbit(orbit: Partial<Orbit>): void {
    const merged = { ...this.state.orbit, ...orbit };
    const [lo, hi] = this.state.radiusRange;
    merged.radius = Math.min(hi, Math.max(lo, merged.radius));
    this.patch({ orbit: merged });
  }

  setConfQuantile(q: number): void {
    this.patch({ confQuantile: Math.min(0.999, Math.max(0, q)) });
  }

  toggleDepth(): void {
    // same payload, no new request: just flip which overlay is shown
    this.patch({ showDepth: !this.state.showDepth });
  }

  currentPose(): Pose {
    return orbitToPose(this.state.orbit);
  }

  /** Render the current orbit viewpoint; coalesces rapid asks to one in flight. */
  async queryCurrentView(): Promise<void> {
    const pose = this.currentPose();
    if (this.renderInFlight) {
      this.pendingRender = pose;
      return;
    }
    this.renderInFlight = true;
    try {
      await this.renderPose(pose);
    } finally {
      this.renderInFlight = false;
      if (this.pendingRender) {
        const next = this.pendingRender;
        this.pendingRender = null;
        await this.renderAt(next);
      }
    }
  }

  private async renderAt(pose: Pose): Promise<void> {
    this.renderInFlight = true;
    try {
      await this.renderPose(pose);
    } finally {
      this.renderInFlight = false;
    }
  }

  private async renderPose(pose: Pose): Promise<void> {
    if (!this.state.sessionId) {
      this.patch({ banner: "upload source views first" });
      return;
    }
    try {
      const result = await this.api.render(this.state.sessionId, pose);
      const maps = parseContainer(base64ToBuffer(result.maps_rngt));
      this.patch({ lastRender: result, lastMaps: maps, banner: null });
    } catch (err) {
      this.patch({ banner: `render failed: ${String(err)}` });
    }
  }

  /** Queue an accumulate at the current viewpoint (FIFO). */
  accumulateCurrent(): Promise<void> {
    return this.enqueueAccumulate(this.currentPose());
  }

  /** Fire K sphere-uniform accumulates at the current radius. */
  async spherePreset(k: number): Promise<void> {
    const radius = this.state.orbit.radius;
    const poses = sphereDirections(k).map((d) => lookAtPose(scale(d, radius)));
    await Promise.all(poses.map((p) => this.enqueueAccumulate(p)));
  }

  private enqueueAccumulate(pose: Pose): Promise<void> {
    this.accumulateQueue.push(pose);
    return this.drainAccumulates();
  }

  private async drainAccumulates(): Promise<void> {
    if (this.accumulating) return;
    this.accumulating = true;
    try {
      while (this.accumulateQueue.length) {
        const pose = this.accumulateQueue.shift()!;
        await this.accumulateOne(pose);
      }
    } finally {
      this.accumulating = false;
    }
  }

  private async accumulateOne(pose: Pose): Promise<void> {
    if (!this.state.sessionId) {
      this.patch({ banner: "upload source views first" });
      return;
    }
    try {
      const result = await this.api.accumulate(this.state.sessionId, pose, this.state.confQuantile);
      const blob = await this.api.pointCloud(this.state.sessionId);
      const cloud = parsePly(blob);
      if (cloud.count !== result.total_points) {
        this.patch({ banner: "point count mismatch between server and PLY" });
        return;
      }
      this.patch({ pointCount: result.total_points, cloud, banner: null });
    } catch (err) {
      const hint = String(err).includes("422") ? " (lower the confidence quantile)" : "";
      this.patch({ banner: `accumulate failed: ${String(err)}${hint}` });
    }
  }
}

export function base64ToBuffer(b64: string): ArrayBuffer {
  if (typeof atob === "function") {
    const bin = atob(b64);
    const bytes = new Uint8Array(bin.length);
    for (let i = 0; i < bin.length; i++) bytes[i] = bin.charCodeAt(i);
    return bytes.buffer;
  }
  const buf = Buffer.from(b64, "base64");
  return buf.buffer.slice(buf.byteOffset, buf.byteOffset + buf.byteLength);
}
