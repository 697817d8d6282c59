/** DOM glue: canvas renderer, overlay controls, job panel. All heavy logic
 * lives in the pure modules; this file only wires events to them. */

import { ApiClient } from "./api.js";
import type { SlideManifest } from "./api.js";
import { planFrame, TileFetcher } from "./layers.js";
import { JobMonitor } from "./jobs.js";
import { OVERLAY_KINDS, debounce, defaultState, fromQuery, toQuery } from "./state.js";
import type { OverlayKind, ViewerState } from "./state.js";
import type { Viewport } from "./tiles.js";

const api = new ApiClient("");
const state: ViewerState = fromQuery(location.search.slice(1));
let manifest: SlideManifest | null = null;

const canvas = document.getElementById("viewer") as HTMLCanvasElement;
const context = canvas.getContext("2d")!;
const slideSelect = document.getElementById("slide-select") as HTMLSelectElement;
const thresholdSlider = document.getElementById("threshold") as HTMLInputElement;
const thresholdLabel = document.getElementById("threshold-label")!;
const jobButton = document.getElementById("run-job") as HTMLButtonElement;
const jobStatus = document.getElementById("job-status")!;
const banner = document.getElementById("banner")!;
const overlayPanel = document.getElementById("overlays")!;

function loadImage(url: string): Promise<HTMLImageElement> {
  return new Promise((resolve, reject) => {
    const img = new Image();
    img.onload = () => resolve(img);
    img.onerror = () => reject(new Error(`tile failed: ${url}`));
    img.src = url;
  });
}

const tiles = new TileFetcher<HTMLImageElement>(loadImage, 6, 3, 250,
  () => requestRender());

let renderQueued = false;
function requestRender(): void {
  if (renderQueued) return;
  renderQueued = true;
  requestAnimationFrame(() => {
    renderQueued = false;
    render();
  });
}

function viewport(): Viewport {
  return { centerX: state.centerX, centerY: state.centerY, zoom: state.zoom,
           width: canvas.width, height: canvas.height };
}

function render(): void {
  context.fillStyle = "#202020";
  context.fillRect(0, 0, canvas.width, canvas.height);
  if (!manifest) return;
  const plan = planFrame(api, manifest, state, viewport());
  for (const op of [...plan.base, ...plan.overlays]) {
    const image = tiles.get(op.url);
    if (image) {
      context.globalAlpha = op.opacity;
      context.drawImage(image, op.screenX, op.screenY, op.screenSize, op.screenSize);
      context.globalAlpha = 1;
    } else {
      context.strokeStyle = "#333";
      context.strokeRect(op.screenX, op.screenY, op.screenSize, op.screenSize);
    }
  }
  const failed = tiles.stats().failed;
  banner.textContent = failed ? `${failed} tile(s) failed - service offline?` : "";
  history.replaceState(null, "", `?${toQuery(state)}`);
}

function fitSlide(): void {
  if (!manifest) return;
  const info = manifest.levels[0];
  state.centerX = info.width / 2;
  state.centerY = info.height / 2;
  state.zoom = Math.min(canvas.width / info.width, canvas.height / info.height);
}

async function selectSlide(slideId: string, keepViewport = false): Promise<void> {
  const manifests = await api.listSlides();
  manifest = manifests.find((m) => m.slide_id === slideId) ?? null;
  state.slideId = manifest ? slideId : null;
  if (manifest && !keepViewport) fitSlide();
  requestRender();
}

const jobs = new JobMonitor(api, {
  onUpdate: (job) => {
    jobStatus.textContent = `${job.state} ${(job.progress * 100).toFixed(0)}%`;
    jobButton.disabled = job.state === "queued" || job.state === "running";
  },
  onDone: (job) => {
    state.jobId = job.job_id;
    state.overlays = { segmentation: 0.8 };
    buildOverlayPanel(Object.keys(job.outputs));
    requestRender();
  },
  onFailed: (job) => {
    jobStatus.textContent = `failed: ${job.error}`;
  },
  onValidationErrors: (errors) => {
    jobStatus.textContent =
      errors.map((e) => `${e.field}: ${e.message}`).join("; ");
  },
});

function buildOverlayPanel(available: string[]): void {
  overlayPanel.innerHTML = "";
  for (const kind of OVERLAY_KINDS) {
    const row = document.createElement("label");
    const checkbox = document.createElement("input");
    checkbox.type = "checkbox";
    const enabled = kind === "segmentation" || available.includes(kind);
    checkbox.disabled = !state.jobId || !enabled;
    checkbox.checked = kind in state.overlays;
    checkbox.addEventListener("change", () => {
      if (checkbox.checked) state.overlays[kind as OverlayKind] = 0.8;
      else delete state.overlays[kind as OverlayKind];
      requestRender();
    });
    row.append(checkbox, ` ${kind}`);
    overlayPanel.append(row);
  }
}

const applyThreshold = debounce((value: number) => {
  state.threshold = value;
  requestRender();
}, 150);

function wireEvents(): void {
  thresholdSlider.addEventListener("input", () => {
    thresholdLabel.textContent = thresholdSlider.value;
    applyThreshold(Number(thresholdSlider.value));
  });
  slideSelect.addEventListener("change", () => {
    state.jobId = null;
    state.overlays = {};
    void selectSlide(slideSelect.value);
  });
  jobButton.addEventListener("click", () => {
    if (!state.slideId) return;
    void jobs.submit(state.slideId, {
      patch_size: 256, stride: 256, batch_size: 8,
      threshold: state.threshold,
      scorers: [{ kind: "blobby", seed: 7 }],
      uncertainty: [],
    });
  });
  canvas.addEventListener("wheel", (event) => {
    event.preventDefault();
    const factor = event.deltaY < 0 ? 1.25 : 0.8;
    state.zoom = Math.min(4, Math.max(1 / 1024, state.zoom * factor));
    requestRender();
  });
  let dragging: { x: number; y: number } | null = null;
  canvas.addEventListener("pointerdown", (event) => {
    dragging = { x: event.clientX, y: event.clientY };
  });
  canvas.addEventListener("pointermove", (event) => {
    if (!dragging) return;
    state.centerX -= (event.clientX - dragging.x) / state.zoom;
    state.centerY -= (event.clientY - dragging.y) / state.zoom;
    dragging = { x: event.clientX, y: event.clientY };
    requestRender();
  });
  canvas.addEventListener("pointerup", () => (dragging = null));
}

async function boot(): Promise<void> {
  wireEvents();
  buildOverlayPanel([]);
  try {
    const manifests = await api.listSlides();
    for (const m of manifests) {
      const option = document.createElement("option");
      option.value = m.slide_id;
      option.textContent = m.slide_id;
      slideSelect.append(option);
    }
    const initial = state.slideId ?? manifests[0]?.slide_id;
    if (initial) {
      slideSelect.value = initial;
      await selectSlide(initial, state.slideId !== null);
    }
    if (state.jobId) await jobs.attach(state.jobId);
  } catch (err) {
    banner.textContent = `service unreachable: ${err}`;
  }
  thresholdSlider.value = String(state.threshold);
  thresholdLabel.textContent = String(state.threshold);
}

void boot();
