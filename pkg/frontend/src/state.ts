/** Viewer state and its URL round-trip: deep links restore slide, viewport,
 * threshold and overlay toggles exactly. */

export const OVERLAY_KINDS =
  ["heatmap", "segmentation", "aleatoric", "epistemic", "combined"] as const;
export type OverlayKind = (typeof OVERLAY_KINDS)[number];

export interface ViewerState {
  slideId: string | null;
  centerX: number;
  centerY: number;
  zoom: number;
  threshold: number;
  overlays: Partial<Record<OverlayKind, number>>; // kind -> opacity (0..1]
  jobId: string | null;
}

export function defaultState(): ViewerState {
  return { slideId: null, centerX: 0, centerY: 0, zoom: 0.25,
           threshold: 0.5, overlays: {}, jobId: null };
}

export function toQuery(state: ViewerState): string {
  const query = new URLSearchParams();
  if (state.slideId) query.set("slide", state.slideId);
  query.set("cx", String(state.centerX));
  query.set("cy", String(state.centerY));
  query.set("zoom", String(state.zoom));
  query.set("threshold", String(state.threshold));
  if (state.jobId) query.set("job", state.jobId);
  const active = Object.entries(state.overlays)
    .map(([kind, opacity]) => `${kind}:${opacity}`);
  if (active.length) query.set("overlays", active.join(","));
  return query.toString();
}

export function fromQuery(queryString: string): ViewerState {
  const query = new URLSearchParams(queryString);
  const state = defaultState();
  state.slideId = query.get("slide");
  if (query.has("cx")) state.centerX = Number(query.get("cx"));
  if (query.has("cy")) state.centerY = Number(query.get("cy"));
  if (query.has("zoom")) state.zoom = Number(query.get("zoom"));
  if (query.has("threshold")) state.threshold = Number(query.get("threshold"));
  state.jobId = query.get("job");
  const overlays = query.get("overlays");
  if (overlays) {
    for (const item of overlays.split(",")) {
      const [kind, opacity] = item.split(":");
      if ((OVERLAY_KINDS as readonly string[]).includes(kind)) {
        state.overlays[kind as OverlayKind] = Number(opacity ?? 1);
      }
    }
  }
  return state;
}

/** Trailing-edge debounce; threshold sliders use 150 ms to bound tile churn. */
export function debounce<A extends unknown[]>(fn: (...args: A) => void,
                                              ms: number,
                                              setTimer = setTimeout,
                                              clearTimer = clearTimeout) {
  let handle: ReturnType<typeof setTimeout> | null = null;
  return (...args: A) => {
    if (handle !== null) clearTimer(handle);
    handle = setTimer(() => {
      handle = null;
      fn(...args);
    }, ms);
  };
}
