// Cockpit state is a pure function of the received message stream: the
// reducer never predicts, so the rendered path is exactly what the server
// generated.

import type { ServerMessage } from "./protocol.js";

export type ConnectionStatus = "disconnected" | "connecting" | "live";

export interface TurnLogEntry {
  seq?: number;
  eventKind: string;
  status: "pending" | "applied" | "superseded";
  blockIndex?: number;
}

export interface CacheLayerView {
  sinkIndices: number[];
  localIndices: number[];
  capacity: number;
}

export interface CockpitState {
  status: ConnectionStatus;
  session: number;
  latestBlock: number;
  posePath: number[][]; // one pose row per received frame, stream order
  heatmap: number[][] | null; // first frame of the latest block
  cacheLayers: CacheLayerView[];
  cacheCapacity: number;
  turnLog: TurnLogEntry[];
  fps: number;
  dropped: number;
  recachePulse: number; // last block index whose boundary refreshed the cache
  errors: string[];
}

export function initialState(): CockpitState {
  return {
    status: "disconnected",
    session: 0,
    latestBlock: -1,
    posePath: [],
    heatmap: null,
    cacheLayers: [],
    cacheCapacity: 0,
    turnLog: [],
    fps: 0,
    dropped: 0,
    recachePulse: -1,
    errors: [],
  };
}

export function markPending(state: CockpitState, seq: number,
                            eventKind: string): CockpitState {
  return {
    ...state,
    turnLog: [...state.turnLog, { seq, eventKind, status: "pending" }],
  };
}

export function applyMessage(state: CockpitState,
                             msg: ServerMessage): CockpitState {
  switch (msg.kind) {
    case "block": {
      if (msg.session !== state.session) return state;
      return {
        ...state,
        latestBlock: Math.max(state.latestBlock, msg.block_index),
        posePath: [...state.posePath, ...msg.poses],
        heatmap: msg.frames_u8[0] ?? state.heatmap,
      };
    }
    case "cache_state": {
      const capacity = msg.sink_frames + msg.local_window_frames;
      const layers = msg.per_layer.map((l) => ({
        sinkIndices: l.sink_indices,
        localIndices: l.local_indices,
        capacity,
      }));
      return { ...state, cacheLayers: layers, cacheCapacity: capacity };
    }
    case "turn_ack": {
      if (msg.event_kind === "reset") {
        const fresh = initialState();
        return {
          ...fresh,
          status: "live",
          session: msg.session ?? state.session + 1,
          turnLog: [{ seq: msg.seq, eventKind: "reset", status: "applied",
                      blockIndex: 0 }],
        };
      }
      let pulse = state.recachePulse;
      if (msg.event_kind === "prompt" && msg.status === "applied") {
        pulse = msg.block_index ?? state.latestBlock + 1;
      }
      const log = resolveAck(state.turnLog, msg.seq, msg.event_kind,
                             msg.status, msg.block_index);
      // ordered by acknowledged block index, stable for pendings
      const ordered = [...log].sort(
        (a, b) => (a.blockIndex ?? Infinity) - (b.blockIndex ?? Infinity));
      return { ...state, turnLog: ordered, recachePulse: pulse };
    }
    case "stats":
      return { ...state, fps: msg.fps, dropped: msg.dropped };
    case "error":
      return { ...state, errors: [...state.errors, msg.message] };
  }
}

function resolveAck(log: TurnLogEntry[], seq: number | undefined,
                    eventKind: string, status: "applied" | "superseded",
                    blockIndex?: number): TurnLogEntry[] {
  let matched = false;
  const out = log.map((entry) => {
    if (!matched && entry.status === "pending"
        && (seq === undefined ? entry.eventKind === eventKind
                              : entry.seq === seq)) {
      matched = true;
      return { ...entry, status, blockIndex };
    }
    return entry;
  });
  if (!matched) {
    out.push({ seq, eventKind, status, blockIndex });
  }
  return out;
}
