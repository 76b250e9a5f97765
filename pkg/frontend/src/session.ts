/** Live connection to the frame service.
 *
 * The session debounces control changes, batches them into set_* messages
 * followed by one request_frame with the next seq, keeps at most two
 * requests unanswered (one rendering plus one pending server-side), drops
 * superseded replies silently, suppresses out-of-order frames so the
 * displayed seq is monotone, and reconnects after a drop by replaying the
 * last sent state. Socket construction and timers are injected so the
 * whole lifecycle runs under test without a browser or a server.
 */

import {
  ClientMessage,
  FrameMeta,
  Metadata,
  OptionsPatch,
  OrbitDoc,
  PoseDoc,
  encodeMessage,
  parseServerMessage,
} from "./protocol.js";

export type ConnectionStatus = "connecting" | "connected" | "disconnected";

export interface SocketLike {
  binaryType: string;
  onopen: (() => void) | null;
  onmessage: ((event: { data: string | ArrayBuffer }) => void) | null;
  onclose: (() => void) | null;
  onerror: (() => void) | null;
  send(data: string): void;
  close(): void;
}

export interface DisplayFrame {
  seq: number;
  renderMs: number;
  png: ArrayBuffer;
}

export interface SessionCallbacks {
  onStatus?(status: ConnectionStatus): void;
  onMetadata?(meta: Metadata): void;
  onFrame?(frame: DisplayFrame): void;
  onError?(message: string, seq?: number): void;
}

export interface SessionOptions {
  url: string;
  callbacks?: SessionCallbacks;
  /** Control-change debounce; floored at 30 ms. */
  debounceMs?: number;
  /** Delay before an automatic reconnect attempt. */
  reconnectMs?: number;
  socketFactory?(url: string): SocketLike;
  schedule?(fn: () => void, ms: number): unknown;
  cancel?(handle: unknown): void;
}

const MIN_DEBOUNCE_MS = 30;
const MAX_UNANSWERED = 2;

interface PendingState {
  pose?: PoseDoc;
  orbit?: OrbitDoc;
  options?: OptionsPatch;
}

export class Session {
  private readonly url: string;
  private readonly callbacks: SessionCallbacks;
  private readonly debounceMs: number;
  private readonly reconnectMs: number;
  private readonly socketFactory: (url: string) => SocketLike;
  private readonly schedule: (fn: () => void, ms: number) => unknown;
  private readonly cancel: (handle: unknown) => void;

  private socket: SocketLike | null = null;
  private status: ConnectionStatus = "disconnected";
  private greeted = false;
  private closed = false;

  private seq = 0;
  private outstanding: number[] = [];
  private lastDisplayed = 0;
  private awaitingPng: FrameMeta | null = null;

  private pending: PendingState = {};
  private debounceHandle: unknown = null;
  private flushBlocked = false;
  private reconnectHandle: unknown = null;

  // last state actually sent, replayed verbatim after a reconnect
  private sentPose: PoseDoc | null = null;
  private sentOrbit: OrbitDoc | null = null;
  private sentOptions: OptionsPatch | null = null;

  constructor(options: SessionOptions) {
    this.url = options.url;
    this.callbacks = options.callbacks ?? {};
    this.debounceMs = Math.max(options.debounceMs ?? MIN_DEBOUNCE_MS, MIN_DEBOUNCE_MS);
    this.reconnectMs = options.reconnectMs ?? 1000;
    this.socketFactory =
      options.socketFactory ?? ((url) => new WebSocket(url) as unknown as SocketLike);
    this.schedule = options.schedule ?? ((fn, ms) => setTimeout(fn, ms));
    this.cancel = options.cancel ?? ((handle) => clearTimeout(handle as number));
  }

  get connectionStatus(): ConnectionStatus {
    return this.status;
  }

  connect(): void {
    if (this.closed || this.socket !== null) {
      return;
    }
    if (this.reconnectHandle !== null) {
      this.cancel(this.reconnectHandle);
      this.reconnectHandle = null;
    }
    this.setStatus("connecting");
    const socket = this.socketFactory(this.url);
    socket.binaryType = "arraybuffer";
    socket.onopen = () => this.setStatus("connected");
    socket.onmessage = (event) => this.handleMessage(event.data);
    socket.onclose = () => this.handleDrop();
    socket.onerror = () => {};
    this.socket = socket;
  }

  /** Immediate reconnect, e.g. from a retry button. */
  retryNow(): void {
    if (this.closed || this.socket !== null) {
      return;
    }
    this.connect();
  }

  close(): void {
    this.closed = true;
    if (this.debounceHandle !== null) {
      this.cancel(this.debounceHandle);
      this.debounceHandle = null;
    }
    if (this.reconnectHandle !== null) {
      this.cancel(this.reconnectHandle);
      this.reconnectHandle = null;
    }
    this.socket?.close();
    this.socket = null;
  }

  setPose(pose: PoseDoc): void {
    this.pending.pose = pose;
    this.queueFlush();
  }

  setOrbit(orbit: OrbitDoc): void {
    this.pending.orbit = orbit;
    this.queueFlush();
  }

  setOptions(options: OptionsPatch): void {
    this.pending.options = { ...this.pending.options, ...options };
    this.queueFlush();
  }

  /** Request a frame for the current server state right now, folding in
   * any control changes still waiting on the debounce timer. */
  requestFrame(): void {
    if (this.debounceHandle !== null) {
      this.cancel(this.debounceHandle);
      this.debounceHandle = null;
    }
    this.flush();
  }

  private setStatus(status: ConnectionStatus): void {
    this.status = status;
    this.callbacks.onStatus?.(status);
  }

  private queueFlush(): void {
    if (this.debounceHandle !== null) {
      return;
    }
    this.debounceHandle = this.schedule(() => {
      this.debounceHandle = null;
      this.flush();
    }, this.debounceMs);
  }

  private flush(): void {
    if (this.socket === null || this.status !== "connected" || !this.greeted) {
      return; // pending state survives and is replayed after reconnect
    }
    if (this.outstanding.length >= MAX_UNANSWERED) {
      this.flushBlocked = true;
      return;
    }
    this.flushBlocked = false;
    const batch: ClientMessage[] = [];
    if (this.pending.pose !== undefined) {
      batch.push({ type: "set_pose", ...this.pending.pose });
      this.sentPose = this.pending.pose;
    }
    if (this.pending.orbit !== undefined) {
      batch.push({ type: "set_camera", orbit: this.pending.orbit });
      this.sentOrbit = this.pending.orbit;
    }
    if (this.pending.options !== undefined) {
      batch.push({ type: "set_options", ...this.pending.options });
      this.sentOptions = { ...this.sentOptions, ...this.pending.options };
    }
    this.pending = {};
    this.seq += 1;
    this.outstanding.push(this.seq);
    batch.push({ type: "request_frame", seq: this.seq });
    for (const message of batch) {
      this.socket.send(encodeMessage(message));
    }
  }

  private settle(seq: number): void {
    this.outstanding = this.outstanding.filter((s) => s !== seq);
    if (
      this.flushBlocked &&
      this.outstanding.length < MAX_UNANSWERED &&
      this.debounceHandle === null
    ) {
      this.flush();
    }
  }

  private handleMessage(data: string | ArrayBuffer): void {
    if (typeof data !== "string") {
      const meta = this.awaitingPng;
      this.awaitingPng = null;
      if (meta === null) {
        return; // binary with no announced frame: drop, stay alive
      }
      this.settle(meta.seq);
      if (meta.seq >= this.lastDisplayed) {
        this.lastDisplayed = meta.seq;
        this.callbacks.onFrame?.({ seq: meta.seq, renderMs: meta.render_ms, png: data });
      }
      return;
    }
    let message;
    try {
      message = parseServerMessage(data);
    } catch (error) {
      this.callbacks.onError?.(error instanceof Error ? error.message : String(error));
      return;
    }
    switch (message.type) {
      case "metadata": {
        const first = !this.greeted;
        this.greeted = true;
        this.callbacks.onMetadata?.(message);
        if (first) {
          this.replayState();
        }
        break;
      }
      case "frame_meta":
        this.awaitingPng = message;
        break;
      case "superseded":
        this.settle(message.seq); // dropped silently: a newer frame is coming
        break;
      case "error":
        if (message.seq !== undefined) {
          this.settle(message.seq);
        }
        this.callbacks.onError?.(message.message, message.seq);
        break;
    }
  }

  /** After the greeting: push the last sent state (empty on the first
   * connect) and request a frame, so a fresh connect shows the canonical
   * view and a reconnect resumes where the user left off. */
  private replayState(): void {
    if (this.sentPose !== null && this.pending.pose === undefined) {
      this.pending.pose = this.sentPose;
    }
    if (this.sentOrbit !== null && this.pending.orbit === undefined) {
      this.pending.orbit = this.sentOrbit;
    }
    if (this.sentOptions !== null) {
      this.pending.options = { ...this.sentOptions, ...this.pending.options };
    }
    this.requestFrame();
  }

  private handleDrop(): void {
    if (this.closed) {
      return;
    }
    this.socket = null;
    this.greeted = false;
    this.seq = 0;
    this.outstanding = [];
    this.lastDisplayed = 0;
    this.awaitingPng = null;
    this.flushBlocked = false;
    this.setStatus("disconnected");
    this.reconnectHandle = this.schedule(() => {
      this.reconnectHandle = null;
      this.connect();
    }, this.reconnectMs);
  }
}
