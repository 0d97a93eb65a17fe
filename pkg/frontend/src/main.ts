/** DOM wiring for the virtual scanner. */

import { ApiClient, fetchTransport } from "./api.js";
import { Viewer, base64ToBuffer } from "./state.js";
import { drawDepthMap, drawFrusta, drawPointCloud } from "./render2d.js";

const api = new ApiClient(fetchTransport(""));
const viewer = new Viewer(api);

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
};

const banner = $("banner");
const files = $<HTMLInputElement>("files");
const uploadBtn = $<HTMLButtonElement>("upload");
const renderBtn = $<HTMLButtonElement>("render");
const accumulateBtn = $<HTMLButtonElement>("accumulate");
const presetBtn = $<HTMLButtonElement>("sphere-preset");
const depthToggle = $<HTMLInputElement>("depth-toggle");
const confSlider = $<HTMLInputElement>("conf");
const azimuth = $<HTMLInputElement>("azimuth");
const elevation = $<HTMLInputElement>("elevation");
const radius = $<HTMLInputElement>("radius");
const pointLabel = $("point-count");
const frustaCanvas = $<HTMLCanvasElement>("frusta");
const cloudCanvas = $<HTMLCanvasElement>("cloud");
const renderCanvas = $<HTMLCanvasElement>("view");

function dioramaOrbit() {
  return { azimuth: 0.7, elevation: 0.45, radius: 3.2 };
}

viewer.subscribe((state) => {
  banner.textContent = state.banner ?? "";
  banner.style.display = state.banner ? "block" : "none";
  pointLabel.textContent = `${state.pointCount} points`;
  confSlider.value = String(state.confQuantile);

  const fov = state.config?.fov_deg ?? 50;
  drawFrusta(frustaCanvas.getContext("2d")!, state.sourcePoses, fov, dioramaOrbit());
  if (state.cloud) {
    drawPointCloud(cloudCanvas.getContext("2d")!, state.cloud, dioramaOrbit());
  }

  const ctx = renderCanvas.getContext("2d")!;
  if (state.showDepth && state.lastMaps) {
    const depth = state.lastMaps.tensors.get("depth");
    if (depth) drawDepthMap(ctx, depth.data, depth.shape);
  } else if (state.lastRender) {
    const img = new Image();
    img.onload = () => {
      renderCanvas.width = img.width;
      renderCanvas.height = img.height;
      ctx.drawImage(img, 0, 0);
    };
    const bytes = new Uint8Array(base64ToBuffer(state.lastRender.rgb_png));
    img.src = URL.createObjectURL(new Blob([bytes], { type: "image/png" }));
  }
});

uploadBtn.addEventListener("click", async () => {
  const chosen = Array.from(files.files ?? []);
  const expected = viewer.state.config?.n_sources ?? 4;
  if (chosen.length !== expected) {
    banner.textContent = `select exactly ${expected} PNG files`;
    banner.style.display = "block";
    return;
  }
  const images = await Promise.all(chosen.map(fileToBase64));
  await viewer.uploadSources(images);
});

renderBtn.addEventListener("click", () => viewer.queryCurrentView());
accumulateBtn.addEventListener("click", () => viewer.accumulateCurrent());
presetBtn.addEventListener("click", () => viewer.spherePreset(12));
depthToggle.addEventListener("change", () => viewer.toggleDepth());
confSlider.addEventListener("input", () => viewer.setConfQuantile(parseFloat(confSlider.value)));

for (const [input, key] of [
  [azimuth, "azimuth"],
  [elevation, "elevation"],
  [radius, "radius"],
] as const) {
  input.addEventListener("input", () => {
    viewer.setOrbit({ [key]: parseFloat(input.value) });
  });
}

async function fileToBase64(file: File): Promise<string> {
  const buffer = await file.arrayBuffer();
  const bytes = new Uint8Array(buffer);
  let binary = "";
  for (const b of bytes) binary += String.fromCharCode(b);
  return btoa(binary);
}

viewer.connect();
