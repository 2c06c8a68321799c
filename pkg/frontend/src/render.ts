// Pure view computations: top-down path projection, heatmap pixels, cache
// timeline rows.  Kept free of DOM so they are directly testable.

export interface PathPoint {
  x: number;
  y: number;
}

/** Project pose rows (qw qx qy qz px py pz) onto the x-z plane and fit them
 * into a view box with uniform scale. */
export function projectPath(poses: number[][], width: number, height: number,
                            margin = 10): PathPoint[] {
  if (poses.length === 0) return [];
  const xs = poses.map((p) => p[4]);
  const zs = poses.map((p) => p[6]);
  const minX = Math.min(...xs, -1e-6);
  const maxX = Math.max(...xs, 1e-6);
  const minZ = Math.min(...zs, -1e-6);
  const maxZ = Math.max(...zs, 1e-6);
  const span = Math.max(maxX - minX, maxZ - minZ, 1e-6);
  const scale = (Math.min(width, height) - 2 * margin) / span;
  const cx = (minX + maxX) / 2;
  const cz = (minZ + maxZ) / 2;
  return poses.map((p) => ({
    x: width / 2 + (p[4] - cx) * scale,
    y: height / 2 - (p[6] - cz) * scale, // +z (forward) points up the map
  }));
}

/** u8 heatmap grid to RGBA pixels (simple blue-to-yellow ramp). */
export function heatmapPixels(grid: number[][]): Uint8ClampedArray<ArrayBuffer> {
  const rows = grid.length;
  const cols = grid[0]?.length ?? 0;
  const out = new Uint8ClampedArray(new ArrayBuffer(rows * cols * 4));
  let i = 0;
  for (const row of grid) {
    for (const v of row) {
      out[i++] = v;             // r
      out[i++] = v;             // g
      out[i++] = 255 - v;       // b
      out[i++] = 255;           // a
    }
  }
  return out;
}

export interface CacheCell {
  index: number;
  kind: "sink" | "local";
}

/** One row per layer: sink cells then local cells, left to right. */
export function cacheTimelineRows(layers: { sinkIndices: number[];
                                            localIndices: number[];
                                            capacity: number }[]): CacheCell[][] {
  return layers.map((layer) => {
    const cells: CacheCell[] = [];
    for (const index of layer.sinkIndices) cells.push({ index, kind: "sink" });
    for (const index of layer.localIndices) cells.push({ index, kind: "local" });
    if (cells.length > layer.capacity) {
      throw new Error(`cache occupancy ${cells.length} exceeds capacity `
                      + `${layer.capacity}`);
    }
    return cells;
  });
}
