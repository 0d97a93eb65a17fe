/** Typed client for the inference service. All mutations go through the
 * documented endpoints; the transport is injectable so the state machine can
 * be tested against a fake server implementing the same wire format. */

import { Pose, maxAbsDiff } from "./math.js";

export interface ServiceConfig {
  resolution: number;
  n_sources: number;
  registers: number;
  layers: number;
  fov_deg: number;
  fingerprint: string;
}

export interface SessionCreated {
  id: string;
  poses: Pose[];
  source_pointmaps_url: string;
}

export interface RenderResult {
  pose: Pose;
  rgb_png: string; // base64
  maps_rngt: string; // base64 RNGT container
}

export interface AccumulateResult {
  points_added: number;
  total_points: number;
}

export interface Transport {
  request(method: string, path: string, body?: unknown): Promise<unknown>;
  requestBinary(path: string): Promise<ArrayBuffer>;
}

export class HttpError extends Error {
  constructor(public status: number, public detail: string) {
    super(`HTTP ${status}: ${detail}`);
  }
}

export function fetchTransport(baseUrl: string): Transport {
  const url = (path: string) => baseUrl.replace(/\/$/, "") + path;
  return {
    async request(method, path, body) {
      const response = await fetch(url(path), {
        method,
        headers: body === undefined ? {} : { "Content-Type": "application/json" },
        body: body === undefined ? undefined : JSON.stringify(body),
      });
      const text = await response.text();
      if (!response.ok) {
        let detail = text;
        try {
          detail = (JSON.parse(text) as { detail?: string }).detail ?? text;
        } catch {
          /* keep raw text */
        }
        throw new HttpError(response.status, detail);
      }
      return text ? JSON.parse(text) : null;
    },
    async requestBinary(path) {
      const response = await fetch(url(path));
      if (!response.ok) throw new HttpError(response.status, await response.text());
      return response.arrayBuffer();
    },
  };
}

export class ApiClient {
  constructor(private transport: Transport) {}

  getConfig(): Promise<ServiceConfig> {
    return this.transport.request("GET", "/config") as Promise<ServiceConfig>;
  }

  createSession(imagesB64: string[]): Promise<SessionCreated> {
    return this.transport.request("POST", "/sessions", { images: imagesB64 }) as Promise<SessionCreated>;
  }

  /** Render and verify the server echoed exactly the pose we sent. */
  async render(sessionId: string, pose: Pose): Promise<RenderResult> {
    const result = (await this.transport.request("POST", `/sessions/${sessionId}/render`, {
      pose,
    })) as RenderResult;
    const sent = [...pose.rotation, ...pose.center];
    const echoed = [...result.pose.rotation, ...result.pose.center];
    if (maxAbsDiff(sent, echoed) > 1e-9) {
      throw new Error("server echoed a different pose than requested");
    }
    return result;
  }

  accumulate(sessionId: string, pose: Pose, confQuantile: number): Promise<AccumulateResult> {
    return this.transport.request("POST", `/sessions/${sessionId}/accumulate`, {
      pose,
      conf_quantile: confQuantile,
    }) as Promise<AccumulateResult>;
  }

  pointCloud(sessionId: string): Promise<ArrayBuffer> {
    return this.transport.requestBinary(`/sessions/${sessionId}/pointcloud`);
  }

  deleteSession(sessionId: string): Promise<unknown> {
    return this.transport.request("DELETE", `/sessions/${sessionId}`);
  }
}
