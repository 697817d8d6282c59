/** Pure deep-zoom tiling math (no DOM, no fetch). Coordinates follow the
 * service's scheme: tiles are indexed per level, a level halves each axis,
 * and `zoom` is screen pixels per level-0 pixel. */

import type { LevelInfo, SlideManifest } from "./api.js";

export interface Viewport {
  centerX: number; // level-0 coords
  centerY: number;
  zoom: number;    // screen px per level-0 px
  width: number;   // screen px
  height: number;
}

export interface TilePlacement {
  level: number;
  x: number; // tile index
  y: number;
  screenX: number;
  screenY: number;
  screenSize: number;
}

/** Smallest-downsample level whose pixels are not stretched more than 2x;
 * i.e. the deepest level with downsample <= 1/zoom, clamped to the pyramid. */
export function levelForZoom(levels: LevelInfo[], zoom: number): number {
  let level = 0;
  while (level + 1 < levels.length && (1 << (level + 1)) <= 1 / zoom) {
    level += 1;
  }
  return level;
}

export function tileRange(extent: number, tileSize: number): number {
  return Math.ceil(extent / tileSize);
}

/** Tiles intersecting the viewport at the chosen level, with screen
 * placements; clamped to the slide so nothing outside is requested. */
export function visibleTiles(manifest: SlideManifest, view: Viewport,
                             level?: number): TilePlacement[] {
  const lvl = level ?? levelForZoom(manifest.levels, view.zoom);
  const info = manifest.levels[lvl];
  const ds = 1 << lvl;
  const ts = manifest.tile_size;
  const screenTile = ts * ds * view.zoom;

  const toScreenX = (level0: number) =>
    (level0 - view.centerX) * view.zoom + view.width / 2;
  const toScreenY = (level0: number) =>
    (level0 - view.centerY) * view.zoom + view.height / 2;

  const minLevel0X = view.centerX - view.width / 2 / view.zoom;
  const maxLevel0X = view.centerX + view.width / 2 / view.zoom;
  const minLevel0Y = view.centerY - view.height / 2 / view.zoom;
  const maxLevel0Y = view.centerY + view.height / 2 / view.zoom;

  const x0 = Math.max(0, Math.floor(minLevel0X / ds / ts));
  const y0 = Math.max(0, Math.floor(minLevel0Y / ds / ts));
  const x1 = Math.min(tileRange(info.width, ts) - 1, Math.floor(maxLevel0X / ds / ts));
  const y1 = Math.min(tileRange(info.height, ts) - 1, Math.floor(maxLevel0Y / ds / ts));

  const out: TilePlacement[] = [];
  for (let ty = y0; ty <= y1; ty++) {
    for (let tx = x0; tx <= x1; tx++) {
      out.push({
        level: lvl,
        x: tx,
        y: ty,
        screenX: toScreenX(tx * ts * ds),
        screenY: toScreenY(ty * ts * ds),
        screenSize: screenTile,
      });
    }
  }
  return out;
}

export function tileKey(slideId: string, level: number, x: number,
                        y: number): string {
  return `${slideId}/${level}/${x}_${y}`;
}
