// Minimal terminal cockpit: same logic as the browser, rendered as text.
// Usage: node dist/terminal.js [host] [port] [seed]

import { Cockpit, DEFAULT_INPUT } from "./cockpit.js";
import { projectPath } from "./render.js";
import { connectTcp } from "./transport.js";

const host = process.argv[2] ?? "127.0.0.1";
const port = parseInt(process.argv[3] ?? "8765", 10);
const seed = parseInt(process.argv[4] ?? "7", 10);

const cockpit = new Cockpit(DEFAULT_INPUT);

const stream = await connectTcp(host, port, {
  onData: (chunk) => cockpit.onData(chunk),
  onClose: () => {
    console.log("connection closed");
    process.exit(0);
  },
});
cockpit.attach(stream, seed);
console.log(`connected to ${host}:${port}, seed ${seed}`);
console.log("keys: w/a/s/d, arrows, space move; p <text> prompts; q quits");

process.stdin.setRawMode?.(true);
process.stdin.resume();
let promptMode = false;
let promptText = "";
process.stdin.on("data", (data: Buffer) => {
  const ch = data.toString();
  if (promptMode) {
    if (ch === "\r" || ch === "\n") {
      cockpit.input.submitPrompt(promptText);
      console.log(`\nprompt sent: ${promptText}`);
      promptText = "";
      promptMode = false;
    } else {
      promptText += ch;
      process.stdout.write(ch);
    }
    return;
  }
  if (ch === "q" || ch === "") {
    cockpit.close();
    process.exit(0);
  }
  if (ch === "p") {
    promptMode = true;
    process.stdout.write("prompt> ");
    return;
  }
  const arrowKeys: Record<string, string> = {
    "[A": "ArrowUp", "[B": "ArrowDown",
    "[C": "ArrowRight", "[D": "ArrowLeft",
  };
  const key = arrowKeys[ch] ?? ch;
  cockpit.input.keyDown(key);
  setTimeout(() => cockpit.input.keyUp(key), 150);
});

setInterval(() => {
  cockpit.input.tick();
  if (cockpit.drain() === 0) return;
  const s = cockpit.state;
  const points = projectPath(s.posePath, 40, 12);
  const last = s.posePath[s.posePath.length - 1];
  const marker = last
    ? `pos (${last[4].toFixed(2)}, ${last[5].toFixed(2)}, ${last[6].toFixed(2)})`
    : "no poses yet";
  const occupancy = s.cacheLayers
    .map((l) => l.sinkIndices.length + l.localIndices.length).join("/");
  process.stdout.write(
    `\rblock ${s.latestBlock}  ${marker}  fps ${s.fps.toFixed(0)}  `
    + `cache ${occupancy}  log ${s.turnLog.length}  map pts ${points.length}  `);
}, 100);
