/** Parser for the RNGT tensor container returned by the render endpoint.
 * Layout: "RNGT", u32 version, u32 count, per tensor: u16 name length + name,
 * u8 dtype (0 = float32), u8 rank, u32 dims, payload; u32 metadata length +
 * JSON. All integers little-endian.
 */

export interface Tensor {
  shape: number[];
  data: Float32Array;
}

export interface Container {
  tensors: Map<string, Tensor>;
  metadata: unknown;
}

export function parseContainer(buffer: ArrayBuffer): Container {
  const view = new DataView(buffer);
  let off = 0;
  const magic = new TextDecoder().decode(new Uint8Array(buffer, 0, 4));
  if (magic !== "RNGT") throw new Error("bad container magic");
  off = 4;
  const version = view.getUint32(off, true);
  if (version !== 1) throw new Error(`unsupported container version ${version}`);
  const count = view.getUint32(off + 4, true);
  off += 8;
  const tensors = new Map<string, Tensor>();
  for (let i = 0; i < count; i++) {
    const nameLen = view.getUint16(off, true);
    off += 2;
    const name = new TextDecoder().decode(new Uint8Array(buffer, off, nameLen));
    off += nameLen;
    const dtype = view.getUint8(off);
    const rank = view.getUint8(off + 1);
    off += 2;
    if (dtype !== 0) throw new Error(`unknown dtype code ${dtype}`);
    const shape: number[] = [];
    for (let d = 0; d < rank; d++) {
      shape.push(view.getUint32(off, true));
      off += 4;
    }
    const items = shape.reduce((a, b) => a * b, 1);
    // payload may be unaligned: copy via byte slice
    const raw = buffer.slice(off, off + 4 * items);
    tensors.set(name, { shape, data: new Float32Array(raw) });
    off += 4 * items;
  }
  const metaLen = view.getUint32(off, true);
  off += 4;
  const metadata = JSON.parse(new TextDecoder().decode(new Uint8Array(buffer, off, metaLen)));
  return { tensors, metadata };
}
