/** Wire protocol spoken over the frame service's /session socket.
 *
 * Client messages are single JSON text frames. The server replies with
 * JSON text frames, and every frame_meta is followed immediately by one
 * binary message holding the PNG for that seq.
 */

export interface OrbitDoc {
  azimuth: number;
  elevation: number;
  radius: number;
  target?: [number, number, number];
}

export interface PoseDoc {
  rotations: number[][];
  root_rotation?: number[];
  root_translation?: number[];
}

export interface OptionsPatch {
  lambda_th?: number;
  scale?: number;
}

export type ClientMessage =
  | ({ type: "set_pose" } & PoseDoc)
  | { type: "set_camera"; orbit: OrbitDoc }
  | ({ type: "set_options" } & OptionsPatch)
  | { type: "request_frame"; seq: number }
  | { type: "get_metadata" };

export interface Metadata {
  type: "metadata";
  asset_id: string;
  voxel_count: number;
  resolution: number;
  channels: number;
  joints: string[];
  base_image_size: number;
}

export interface FrameMeta {
  type: "frame_meta";
  seq: number;
  render_ms: number;
}

export interface Superseded {
  type: "superseded";
  seq: number;
}

export interface ErrorReply {
  type: "error";
  message: string;
  seq?: number;
}

export type ServerMessage = Metadata | FrameMeta | Superseded | ErrorReply;

export function encodeMessage(message: ClientMessage): string {
  return JSON.stringify(message);
}

function isFiniteNumber(value: unknown): value is number {
  return typeof value === "number" && Number.isFinite(value);
}

function isStringArray(value: unknown): value is string[] {
  return Array.isArray(value) && value.every((x) => typeof x === "string");
}

/** Parse one server text frame; throws on anything outside the protocol
 * so transport bugs surface instead of leaking half-typed objects. */
export function parseServerMessage(raw: string): ServerMessage {
  let doc: unknown;
  try {
    doc = JSON.parse(raw);
  } catch {
    throw new Error("server sent malformed JSON");
  }
  if (typeof doc !== "object" || doc === null || Array.isArray(doc)) {
    throw new Error("server message is not an object");
  }
  const msg = doc as Record<string, unknown>;
  switch (msg.type) {
    case "metadata": {
      if (
        typeof msg.asset_id !== "string" ||
        !isFiniteNumber(msg.voxel_count) ||
        !isFiniteNumber(msg.resolution) ||
        !isFiniteNumber(msg.channels) ||
        !isStringArray(msg.joints) ||
        !isFiniteNumber(msg.base_image_size)
      ) {
        throw new Error("metadata message is missing fields");
      }
      return {
        type: "metadata",
        asset_id: msg.asset_id,
        voxel_count: msg.voxel_count,
        resolution: msg.resolution,
        channels: msg.channels,
        joints: msg.joints,
        base_image_size: msg.base_image_size,
      };
    }
    case "frame_meta": {
      if (!isFiniteNumber(msg.seq) || !isFiniteNumber(msg.render_ms)) {
        throw new Error("frame_meta message is missing fields");
      }
      return { type: "frame_meta", seq: msg.seq, render_ms: msg.render_ms };
    }
    case "superseded": {
      if (!isFiniteNumber(msg.seq)) {
        throw new Error("superseded message is missing seq");
      }
      return { type: "superseded", seq: msg.seq };
    }
    case "error": {
      if (typeof msg.message !== "string") {
        throw new Error("error message is missing text");
      }
      const seq = isFiniteNumber(msg.seq) ? msg.seq : undefined;
      return { type: "error", message: msg.message, seq };
    }
    default:
      throw new Error(`unknown server message type ${JSON.stringify(msg.type)}`);
  }
}
