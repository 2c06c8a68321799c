// Keyboard capture: held movement keys are chunked into one-block action
// segments and sent continuously; prompt submissions go out as-is.  While
// disconnected, events buffer locally and flush on reconnect.

import type { ActionSegment, ClientEvent } from "./protocol.js";

export const KEY_BINDINGS: Record<string, string> = {
  w: "W", a: "A", s: "S", d: "D",
  ArrowUp: "ArrowUp", ArrowDown: "ArrowDown",
  ArrowLeft: "ArrowLeft", ArrowRight: "ArrowRight",
  " ": "Space",
};

export interface InputOptions {
  blockFrames: number; // segment duration = one block
  linearSpeed: number;
  angularSpeed: number;
}

export class InputCapture {
  private held = new Set<string>();
  private buffer: ClientEvent[] = [];
  private connected = false;

  constructor(private send: (e: ClientEvent) => void,
              private options: InputOptions) {}

  setConnected(connected: boolean): void {
    this.connected = connected;
    if (connected) {
      for (const event of this.buffer.splice(0)) this.send(event);
    }
  }

  keyDown(key: string): void {
    const mapped = KEY_BINDINGS[key];
    if (mapped) this.held.add(mapped);
  }

  keyUp(key: string): void {
    const mapped = KEY_BINDINGS[key];
    if (mapped) this.held.delete(mapped);
  }

  /** Called once per block-length tick; emits the current hold as segments. */
  tick(): ClientEvent | null {
    if (this.held.size === 0) return null;
    const segments: ActionSegment[] = [...this.held].map((key) => ({
      key,
      duration: this.options.blockFrames,
      linear_speed: this.options.linearSpeed,
      angular_speed: this.options.angularSpeed,
    }));
    const event: ClientEvent = { kind: "action", segments };
    this.dispatch(event);
    return event;
  }

  submitPrompt(text: string): ClientEvent | null {
    const trimmed = text.trim();
    if (!trimmed) return null;
    const event: ClientEvent = { kind: "prompt", text: trimmed };
    this.dispatch(event);
    return event;
  }

  reset(seed: number): void {
    this.dispatch({ kind: "reset", seed });
  }

  pendingCount(): number {
    return this.buffer.length;
  }

  private dispatch(event: ClientEvent): void {
    if (this.connected) {
      this.send(event);
    } else {
      this.buffer.push(event);
    }
  }
}
