// DOM glue: canvases for the trajectory map and heatmap, a cache timeline,
// turn log, FPS readout, key listeners, and a prompt box.

import { Cockpit, DEFAULT_INPUT } from "./cockpit.js";
import { KEY_BINDINGS } from "./input.js";
import { cacheTimelineRows, heatmapPixels, projectPath } from "./render.js";
import { connectWebSocket } from "./transport.js";

const cockpit = new Cockpit(DEFAULT_INPUT);

function el<T extends HTMLElement>(id: string): T {
  return document.getElementById(id) as T;
}

function drawMap(): void {
  const canvas = el<HTMLCanvasElement>("map");
  const ctx = canvas.getContext("2d")!;
  ctx.fillStyle = "#10141a";
  ctx.fillRect(0, 0, canvas.width, canvas.height);
  const points = projectPath(cockpit.state.posePath, canvas.width,
                             canvas.height);
  if (points.length === 0) return;
  ctx.strokeStyle = "#7dc4ff";
  ctx.beginPath();
  ctx.moveTo(points[0].x, points[0].y);
  for (const p of points.slice(1)) ctx.lineTo(p.x, p.y);
  ctx.stroke();
  const last = points[points.length - 1];
  ctx.fillStyle = "#ffd166";
  ctx.beginPath();
  ctx.arc(last.x, last.y, 4, 0, 2 * Math.PI);
  ctx.fill();
}

function drawHeatmap(): void {
  const grid = cockpit.state.heatmap;
  if (!grid) return;
  const canvas = el<HTMLCanvasElement>("heatmap");
  const ctx = canvas.getContext("2d")!;
  const rows = grid.length;
  const cols = grid[0].length;
  const image = new ImageData(heatmapPixels(grid), cols, rows);
  const off = new OffscreenCanvas(cols, rows);
  off.getContext("2d")!.putImageData(image, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
}

function drawCache(): void {
  const rows = cacheTimelineRows(cockpit.state.cacheLayers);
  const target = el<HTMLDivElement>("cache");
  const pulse = cockpit.state.recachePulse >= 0
    && cockpit.state.recachePulse >= cockpit.state.latestBlock;
  target.innerHTML = rows.map((cells, layer) =>
    `<div class="cache-row">L${layer} ` + cells.map((c) =>
      `<span class="cell ${c.kind}${pulse && c.kind === "local" ? " pulse" : ""}">`
      + `${c.index}</span>`).join("") + "</div>").join("");
}

function drawLog(): void {
  const log = el<HTMLUListElement>("log");
  log.innerHTML = cockpit.state.turnLog.slice(-12).map((entry) =>
    `<li class="${entry.status}">${entry.eventKind} `
    + `${entry.blockIndex ?? "?"} — ${entry.status}</li>`).join("");
  el<HTMLSpanElement>("fps").textContent = cockpit.state.fps.toFixed(1);
  el<HTMLSpanElement>("status").textContent = cockpit.state.status;
}

let lastTick = 0;
function frame(now: number): void {
  cockpit.drain();
  // hold-to-move: one action event per block-ish interval
  if (now - lastTick > 120) {
    cockpit.input.tick();
    lastTick = now;
  }
  drawMap();
  drawHeatmap();
  drawCache();
  drawLog();
  requestAnimationFrame(frame);
}

async function connect(): Promise<void> {
  const url = el<HTMLInputElement>("addr").value;
  const seed = parseInt(el<HTMLInputElement>("seed").value, 10) || 7;
  el<HTMLDivElement>("banner").textContent = "";
  try {
    const stream = await connectWebSocket(url, {
      onData: (chunk) => cockpit.onData(chunk),
      onClose: () => cockpit.onClose(),
    });
    cockpit.attach(stream, seed);
  } catch {
    el<HTMLDivElement>("banner").textContent =
      "connection refused — is the service (and byte bridge) running?";
  }
}

window.addEventListener("keydown", (e) => {
  if (document.activeElement?.id === "prompt") return;
  if (KEY_BINDINGS[e.key]) e.preventDefault();
  cockpit.input.keyDown(e.key);
});
window.addEventListener("keyup", (e) => cockpit.input.keyUp(e.key));
el<HTMLButtonElement>("connect").addEventListener("click", connect);
el<HTMLFormElement>("prompt-form").addEventListener("submit", (e) => {
  e.preventDefault();
  const box = el<HTMLInputElement>("prompt");
  cockpit.input.submitPrompt(box.value);
  box.value = "";
});

requestAnimationFrame(frame);
