/** Parser for the service's binary little-endian PLY point clouds:
 * float x,y,z; uchar red,green,blue; float confidence per vertex. */

export interface ParsedCloud {
  count: number;
  positions: Float32Array; // 3 * count
  colors: Uint8Array; // 3 * count
  confidences: Float32Array;
}

const VERTEX_BYTES = 3 * 4 + 3 + 4;

export function parsePly(data: ArrayBuffer): ParsedCloud {
  const bytes = new Uint8Array(data);
  const headerEnd = findHeaderEnd(bytes);
  const header = new TextDecoder().decode(bytes.subarray(0, headerEnd));
  const lines = header.split("\n");
  if (lines[0].trim() !== "ply") throw new Error("not a PLY file");
  if (!lines.some((l) => l.trim() === "format binary_little_endian 1.0")) {
    throw new Error("unsupported PLY format");
  }
  let count = -1;
  for (const line of lines) {
    const m = line.trim().match(/^element vertex (\d+)$/);
    if (m) count = parseInt(m[1], 10);
  }
  if (count < 0) throw new Error("missing vertex element");
  const body = new DataView(data, headerEnd);
  if (body.byteLength < count * VERTEX_BYTES) throw new Error("truncated PLY payload");

  const positions = new Float32Array(3 * count);
  const colors = new Uint8Array(3 * count);
  const confidences = new Float32Array(count);
  for (let i = 0; i < count; i++) {
    const off = i * VERTEX_BYTES;
    positions[3 * i] = body.getFloat32(off, true);
    positions[3 * i + 1] = body.getFloat32(off + 4, true);
    positions[3 * i + 2] = body.getFloat32(off + 8, true);
    colors[3 * i] = body.getUint8(off + 12);
    colors[3 * i + 1] = body.getUint8(off + 13);
    colors[3 * i + 2] = body.getUint8(off + 14);
    confidences[i] = body.getFloat32(off + 15, true);
  }
  return { count, positions, colors, confidences };
}

function findHeaderEnd(bytes: Uint8Array): number {
  const marker = "end_header\n";
  const probe = new TextDecoder().decode(bytes.subarray(0, Math.min(bytes.length, 4096)));
  const idx = probe.indexOf(marker);
  if (idx < 0) throw new Error("missing end_header");
  return idx + marker.length;
}
