/** Frame planning and tile fetching.
 *
 * planFrame turns (state, manifest, viewport) into draw operations that
 * reference service URLs only - every rendered byte originates from the
 * backend. TileFetcher bounds concurrent fetches (6 in flight) and retries
 * failures with backoff; the actual image loading is injected so the module
 * stays testable without a DOM.
 */

import { ApiClient } from "./api.js";
import type { SlideManifest } from "./api.js";
import { visibleTiles } from "./tiles.js";
import type { Viewport } from "./tiles.js";
import type { ViewerState } from "./state.js";

export interface DrawOp {
  url: string;
  screenX: number;
  screenY: number;
  screenSize: number;
  opacity: number;
}

export interface FramePlan {
  base: DrawOp[];
  overlays: DrawOp[];
}

export function planFrame(api: ApiClient, manifest: SlideManifest,
                          state: ViewerState, view: Viewport): FramePlan {
  const placements = visibleTiles(manifest, view);
  const base = placements.map((p) => ({
    url: api.tileUrl(manifest.slide_id, p.level, p.x, p.y),
    screenX: p.screenX,
    screenY: p.screenY,
    screenSize: p.screenSize,
    opacity: 1,
  }));
  const overlays: DrawOp[] = [];
  if (state.jobId) {
    for (const [kind, opacity] of Object.entries(state.overlays)) {
      if (!opacity) continue; // opacity 0 hides the layer without traffic
      for (const p of placements) {
        overlays.push({
          url: api.overlayUrl(state.jobId, kind, p.level, p.x, p.y,
            kind === "segmentation" ? { threshold: state.threshold } : {}),
          screenX: p.screenX,
          screenY: p.screenY,
          screenSize: p.screenSize,
          opacity,
        });
      }
    }
  }
  return { base, overlays };
}

export type TileImageLoader<Img> =
  (url: string) => Promise<Img>;

interface Entry<Img> {
  state: "loading" | "ready" | "failed";
  image?: Img;
  attempts: number;
}

export class TileFetcher<Img> {
  private entries = new Map<string, Entry<Img>>();
  private queue: string[] = [];
  private inFlight = 0;

  constructor(private load: TileImageLoader<Img>,
              private maxInFlight = 6,
              private maxAttempts = 3,
              private backoffMs = 250,
              private onChange: () => void = () => {},
              private delay: (ms: number) => Promise<void> =
                (ms) => new Promise((r) => setTimeout(r, ms))) {}

  /** Image for a URL if ready; otherwise queue it and return null. */
  get(url: string): Img | null {
    const entry = this.entries.get(url);
    if (entry?.state === "ready") return entry.image ?? null;
    if (!entry) {
      this.entries.set(url, { state: "loading", attempts: 0 });
      this.queue.push(url);
      this.pump();
    }
    return null;
  }

  stats(): { loading: number; ready: number; failed: number; inFlight: number } {
    let loading = 0, ready = 0, failed = 0;
    for (const e of this.entries.values()) {
      if (e.state === "loading") loading++;
      else if (e.state === "ready") ready++;
      else failed++;
    }
    return { loading, ready, failed, inFlight: this.inFlight };
  }

  /** Drop cached failures so they can be retried (e.g. service came back). */
  clearFailed(): void {
    for (const [url, e] of [...this.entries]) {
      if (e.state === "failed") this.entries.delete(url);
    }
  }

  private pump(): void {
    while (this.inFlight < this.maxInFlight && this.queue.length) {
      const url = this.queue.shift()!;
      void this.fetchOne(url);
    }
  }

  private async fetchOne(url: string): Promise<void> {
    const entry = this.entries.get(url)!;
    this.inFlight++;
    try {
      entry.image = await this.load(url);
      entry.state = "ready";
    } catch {
      entry.attempts++;
      if (entry.attempts < this.maxAttempts) {
        // requeue after backoff without holding an in-flight slot
        void this.delay(this.backoffMs * 2 ** (entry.attempts - 1)).then(() => {
          this.queue.push(url);
          this.pump();
        });
      } else {
        entry.state = "failed";
      }
    } finally {
      this.inFlight--;
      this.pump();
      this.onChange();
    }
  }
}
