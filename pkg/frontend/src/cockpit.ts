// Orchestration: wires a byte stream, the frame decoder, the state reducer,
// and input capture together.  Messages are queued by the network callback
// and drained once per animation tick by the caller.

import { FrameDecoder, encodeFrame } from "./protocol.js";
import type { ClientEvent, ServerMessage } from "./protocol.js";
import { InputCapture } from "./input.js";
import type { InputOptions } from "./input.js";
import { applyMessage, initialState, markPending } from "./state.js";
import type { CockpitState } from "./state.js";
import type { ByteStream } from "./transport.js";

export const DEFAULT_INPUT: InputOptions = {
  blockFrames: 3,
  linearSpeed: 0.05,
  angularSpeed: Math.PI / 90,
};

export class Cockpit {
  state: CockpitState = initialState();
  readonly input: InputCapture;
  private stream: ByteStream | null = null;
  private decoder = new FrameDecoder();
  private queue: ServerMessage[] = [];
  private seq = 0;

  constructor(options: InputOptions = DEFAULT_INPUT) {
    this.input = new InputCapture((e) => this.sendEvent(e), options);
  }

  attach(stream: ByteStream, seed: number): void {
    this.stream = stream;
    this.state = { ...this.state, status: "connecting" };
    this.sendEvent({ kind: "reset", seed });
    this.input.setConnected(true); // flush anything buffered while offline
  }

  onData(chunk: Uint8Array): void {
    this.queue.push(...this.decoder.push(chunk));
  }

  onClose(): void {
    // freeze the state; a reconnect re-issues reset
    this.stream = null;
    this.input.setConnected(false);
    this.state = { ...this.state, status: "disconnected" };
  }

  sendEvent(event: ClientEvent): void {
    if (!this.stream) return;
    this.seq += 1;
    if (event.kind === "action" || event.kind === "prompt") {
      this.state = markPending(this.state, this.seq, event.kind);
    }
    this.stream.send(encodeFrame(event));
  }

  /** Drain queued messages into the state; call once per frame. */
  drain(): number {
    let n = 0;
    for (const msg of this.queue.splice(0)) {
      this.state = applyMessage(this.state, msg);
      n += 1;
    }
    return n;
  }

  close(): void {
    this.stream?.close();
    this.onClose();
  }
}
