// Wire protocol shared with the session service: 4-byte big-endian length
// prefix followed by a UTF-8 JSON body, both directions.

export interface ActionSegment {
  key: string;
  duration: number;
  linear_speed?: number;
  angular_speed?: number;
}

export type ClientEvent =
  | { kind: "action"; segments: ActionSegment[] }
  | { kind: "prompt"; text: string }
  | { kind: "reset"; seed: number }
  | { kind: "pause" }
  | { kind: "resume" };

export interface BlockMessage {
  kind: "block";
  session: number;
  block_index: number;
  poses: number[][]; // qw qx qy qz px py pz per generated frame
  frames_u8: number[][][];
  ms: number;
}

export interface CacheStateMessage {
  kind: "cache_state";
  session: number;
  layers: number;
  sink_frames: number;
  local_window_frames: number;
  next_index: number;
  per_layer: {
    sink_occupancy: number;
    local_occupancy: number;
    sink_indices: number[];
    local_indices: number[];
  }[];
}

export interface TurnAckMessage {
  kind: "turn_ack";
  seq?: number;
  event_kind: string;
  status: "applied" | "superseded";
  block_index?: number;
  seed?: number;
  session?: number;
}

export interface StatsMessage {
  kind: "stats";
  session: number;
  fps: number;
  dropped: number;
  blocks: number;
}

export interface ErrorMessage {
  kind: "error";
  seq?: number;
  message: string;
}

export type ServerMessage =
  | BlockMessage
  | CacheStateMessage
  | TurnAckMessage
  | StatsMessage
  | ErrorMessage;

const encoder = new TextEncoder();
const decoder = new TextDecoder();

export function encodeFrame(message: ClientEvent): Uint8Array {
  const body = encoder.encode(JSON.stringify(message));
  const out = new Uint8Array(4 + body.length);
  new DataView(out.buffer).setUint32(0, body.length, false); // big-endian
  out.set(body, 4);
  return out;
}

/** Incremental decoder: feed arbitrary byte chunks, get whole messages. */
export class FrameDecoder {
  private buffer = new Uint8Array(0);

  push(chunk: Uint8Array): ServerMessage[] {
    const joined = new Uint8Array(this.buffer.length + chunk.length);
    joined.set(this.buffer);
    joined.set(chunk, this.buffer.length);
    this.buffer = joined;

    const messages: ServerMessage[] = [];
    for (;;) {
      if (this.buffer.length < 4) break;
      const view = new DataView(this.buffer.buffer, this.buffer.byteOffset);
      const length = view.getUint32(0, false);
      if (this.buffer.length < 4 + length) break;
      const body = this.buffer.slice(4, 4 + length);
      this.buffer = this.buffer.slice(4 + length);
      messages.push(JSON.parse(decoder.decode(body)) as ServerMessage);
    }
    return messages;
  }
}
