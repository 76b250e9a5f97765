import { describe, expect, it } from "vitest";

import { Metadata } from "../src/protocol.js";
import {
  ConnectionStatus,
  DisplayFrame,
  Session,
  SocketLike,
} from "../src/session.js";

const META: Metadata = {
  type: "metadata",
  asset_id: "0a1b2c3d4e5f6071",
  voxel_count: 512,
  resolution: 8,
  channels: 3,
  joints: ["lower", "upper"],
  base_image_size: 512,
};

const POSE_A = { rotations: [[0.1, 0, 0], [0, 0, 0]] };
const POSE_B = { rotations: [[0.9, 0, 0], [0, 0, 0.4]] };

class FakeScheduler {
  now = 0;
  private nextId = 1;
  private tasks: { id: number; at: number; fn: () => void }[] = [];

  schedule = (fn: () => void, ms: number): unknown => {
    const id = this.nextId++;
    this.tasks.push({ id, at: this.now + ms, fn });
    return id;
  };

  cancel = (handle: unknown): void => {
    this.tasks = this.tasks.filter((t) => t.id !== handle);
  };

  advance(ms: number): void {
    this.now += ms;
    for (;;) {
      const due = this.tasks
        .filter((t) => t.at <= this.now)
        .sort((a, b) => a.at - b.at)[0];
      if (due === undefined) {
        return;
      }
      this.tasks = this.tasks.filter((t) => t.id !== due.id);
      due.fn();
    }
  }
}

class FakeSocket implements SocketLike {
  binaryType = "blob";
  onopen: (() => void) | null = null;
  onmessage: ((event: { data: string | ArrayBuffer }) => void) | null = null;
  onclose: (() => void) | null = null;
  onerror: (() => void) | null = null;
  sent: string[] = [];

  send(data: string): void {
    this.sent.push(data);
  }

  close(): void {
    this.onclose?.();
  }

  open(): void {
    this.onopen?.();
  }

  drop(): void {
    this.onclose?.();
  }

  receive(message: object): void {
    this.onmessage?.({ data: JSON.stringify(message) });
  }

  receiveRaw(text: string): void {
    this.onmessage?.({ data: text });
  }

  receiveBinary(bytes = 8): void {
    this.onmessage?.({ data: new ArrayBuffer(bytes) });
  }

  types(): string[] {
    return this.sent.map((raw) => JSON.parse(raw).type as string);
  }

  parsed(index: number): Record<string, unknown> {
    return JSON.parse(this.sent[index]);
  }
}

function harness(options: { debounceMs?: number; reconnectMs?: number } = {}) {
  const scheduler = new FakeScheduler();
  const sockets: FakeSocket[] = [];
  const frames: DisplayFrame[] = [];
  const statuses: ConnectionStatus[] = [];
  const errors: [string, number | undefined][] = [];
  const metas: Metadata[] = [];
  const session = new Session({
    url: "ws://test/session",
    debounceMs: options.debounceMs ?? 30,
    reconnectMs: options.reconnectMs ?? 1000,
    socketFactory: () => {
      const socket = new FakeSocket();
      sockets.push(socket);
      return socket;
    },
    schedule: scheduler.schedule,
    cancel: scheduler.cancel,
    callbacks: {
      onFrame: (frame) => frames.push(frame),
      onStatus: (status) => statuses.push(status),
      onError: (message, seq) => errors.push([message, seq]),
      onMetadata: (meta) => metas.push(meta),
    },
  });
  session.connect();
  const socket = () => sockets[sockets.length - 1];
  return { session, scheduler, sockets, socket, frames, statuses, errors, metas };
}

/** Connect, open, and greet; the session then holds one outstanding
 * request for the initial canonical frame. */
function greeted(options: Parameters<typeof harness>[0] = {}) {
  const h = harness(options);
  h.socket().open();
  h.socket().receive(META);
  return h;
}

function answer(socket: FakeSocket, seq: number, renderMs = 5): void {
  socket.receive({ type: "frame_meta", seq, render_ms: renderMs });
  socket.receiveBinary();
}

describe("connection lifecycle", () => {
  it("requests the canonical frame after the greeting", () => {
    const h = greeted();
    expect(h.metas).toEqual([META]);
    expect(h.socket().sent).toHaveLength(1);
    expect(h.socket().parsed(0)).toEqual({ type: "request_frame", seq: 1 });
    expect(h.statuses).toEqual(["connecting", "connected"]);
  });

  it("sets arraybuffer transport on the socket", () => {
    const h = harness();
    expect(h.socket().binaryType).toBe("arraybuffer");
  });

  it("delivers the first frame with its render time", () => {
    const h = greeted();
    answer(h.socket(), 1, 23.5);
    expect(h.frames).toHaveLength(1);
    expect(h.frames[0].seq).toBe(1);
    expect(h.frames[0].renderMs).toBe(23.5);
    expect(h.frames[0].png.byteLength).toBe(8);
  });
});

describe("debounced input", () => {
  it("sends exactly one set_pose and one request_frame per settled change", () => {
    const h = greeted();
    answer(h.socket(), 1);
    h.session.setPose(POSE_A);
    h.scheduler.advance(29);
    expect(h.socket().sent).toHaveLength(1); // nothing before the debounce fires
    h.scheduler.advance(1);
    expect(h.socket().types()).toEqual(["request_frame", "set_pose", "request_frame"]);
    expect(h.socket().parsed(1).rotations).toEqual(POSE_A.rotations);
    expect(h.socket().parsed(2).seq).toBe(2);
  });

  it("coalesces a burst into one flush carrying the last value", () => {
    const h = greeted();
    answer(h.socket(), 1);
    for (let i = 0; i < 50; i++) {
      h.session.setPose(i === 49 ? POSE_B : POSE_A);
      h.scheduler.advance(0.5);
    }
    h.scheduler.advance(30);
    const poses = h.socket().sent.filter((m) => JSON.parse(m).type === "set_pose");
    expect(poses).toHaveLength(1);
    expect(JSON.parse(poses[0]).rotations).toEqual(POSE_B.rotations);
  });

  it("bounds flushes during a drag by duration over debounce", () => {
    const h = greeted();
    answer(h.socket(), 1);
    let seq = 1;
    for (let i = 0; i < 50; i++) {
      h.session.setOrbit({ azimuth: i / 50, elevation: 0.3, radius: 3 });
      h.scheduler.advance(3); // 150 ms drag
      while (h.socket().types().filter((t) => t === "request_frame").length > seq) {
        answer(h.socket(), ++seq); // server keeps up
      }
    }
    h.scheduler.advance(30);
    const cameras = h.socket().types().filter((t) => t === "set_camera");
    expect(cameras.length).toBeLessThanOrEqual(150 / 30 + 1);
    expect(cameras.length).toBeGreaterThan(0);
  });

  it("batches pose, camera, and options into one request", () => {
    const h = greeted();
    answer(h.socket(), 1);
    h.session.setPose(POSE_A);
    h.session.setOrbit({ azimuth: 1, elevation: 0.2, radius: 2.5 });
    h.session.setOptions({ scale: 0.5 });
    h.session.setOptions({ lambda_th: 0.001 });
    h.scheduler.advance(30);
    expect(h.socket().types()).toEqual([
      "request_frame",
      "set_pose",
      "set_camera",
      "set_options",
      "request_frame",
    ]);
    const options = h.socket().sent.map((m) => JSON.parse(m)).find(
      (m) => m.type === "set_options"
    );
    expect(options).toEqual({ type: "set_options", scale: 0.5, lambda_th: 0.001 });
  });
});

describe("frame accounting", () => {
  it("drops superseded replies silently", () => {
    const h = greeted();
    answer(h.socket(), 1);
    h.session.setPose(POSE_A);
    h.scheduler.advance(30);
    h.socket().receive({ type: "superseded", seq: 2 });
    expect(h.frames).toHaveLength(1);
    expect(h.errors).toHaveLength(0);
  });

  it("suppresses frames older than the newest displayed", () => {
    const h = greeted();
    h.session.setPose(POSE_A);
    h.scheduler.advance(30); // seq 2 in flight alongside seq 1
    answer(h.socket(), 2);
    answer(h.socket(), 1); // late completion must not regress the display
    expect(h.frames.map((f) => f.seq)).toEqual([2]);
  });

  it("keeps at most two requests unanswered", () => {
    const h = greeted(); // seq 1 unanswered
    h.session.setPose(POSE_A);
    h.scheduler.advance(30); // seq 2 unanswered
    h.session.setPose(POSE_B);
    h.scheduler.advance(60); // debounce fired, flush must hold
    expect(h.socket().types().filter((t) => t === "request_frame")).toHaveLength(2);
    answer(h.socket(), 1);
    // the blocked flush goes out as soon as a slot frees, with the latest pose
    const types = h.socket().types();
    expect(types.filter((t) => t === "request_frame")).toHaveLength(3);
    expect(JSON.parse(h.socket().sent[types.lastIndexOf("set_pose")]).rotations).toEqual(
      POSE_B.rotations
    );
  });

  it("frees the slot and surfaces the message on request errors", () => {
    const h = greeted();
    answer(h.socket(), 1);
    h.session.setPose(POSE_A);
    h.scheduler.advance(30);
    h.socket().receive({ type: "error", message: "pose has 5 joints", seq: 2 });
    expect(h.errors).toEqual([["pose has 5 joints", 2]]);
    h.session.setPose(POSE_B);
    h.scheduler.advance(30);
    expect(h.socket().types().filter((t) => t === "request_frame")).toHaveLength(3);
  });

  it("ignores binary data with no announced frame", () => {
    const h = greeted();
    h.socket().receiveBinary();
    expect(h.frames).toHaveLength(0);
    expect(h.errors).toHaveLength(0);
  });

  it("reports malformed server text without dying", () => {
    const h = greeted();
    h.socket().receiveRaw("{nope");
    expect(h.errors).toHaveLength(1);
    expect(h.errors[0][0]).toMatch(/malformed/);
    answer(h.socket(), 1);
    expect(h.frames).toHaveLength(1);
  });
});

describe("reconnect", () => {
  it("banners the drop, retries, and replays the sent state", () => {
    const h = greeted();
    answer(h.socket(), 1);
    h.session.setPose(POSE_A);
    h.scheduler.advance(30);
    answer(h.socket(), 2);
    h.session.setOrbit({ azimuth: 1.5, elevation: 0.1, radius: 4 });
    h.session.setOptions({ scale: 0.5 });
    h.scheduler.advance(30);
    answer(h.socket(), 3);

    h.socket().drop();
    expect(h.statuses.at(-1)).toBe("disconnected");
    expect(h.sockets).toHaveLength(1);
    h.scheduler.advance(1000);
    expect(h.sockets).toHaveLength(2);

    const fresh = h.socket();
    fresh.open();
    fresh.receive(META);
    expect(fresh.types()).toEqual([
      "set_pose",
      "set_camera",
      "set_options",
      "request_frame",
    ]);
    expect(fresh.parsed(0).rotations).toEqual(POSE_A.rotations);
    expect(fresh.parsed(1).orbit).toEqual({ azimuth: 1.5, elevation: 0.1, radius: 4 });
    expect(fresh.parsed(2).scale).toBe(0.5);
    expect(fresh.parsed(3).seq).toBe(1); // fresh connection, fresh numbering

    answer(fresh, 1);
    expect(h.frames.map((f) => f.seq)).toEqual([1, 2, 3, 1]);
    expect(h.statuses.at(-1)).toBe("connected");
  });

  it("keeps unsent changes made while offline", () => {
    const h = greeted();
    answer(h.socket(), 1);
    h.socket().drop();
    h.session.setPose(POSE_B);
    h.scheduler.advance(30); // debounce fires while disconnected: no crash
    h.scheduler.advance(970);
    const fresh = h.socket();
    fresh.open();
    fresh.receive(META);
    expect(fresh.types()).toEqual(["set_pose", "request_frame"]);
    expect(fresh.parsed(0).rotations).toEqual(POSE_B.rotations);
  });

  it("stops reconnecting once closed", () => {
    const h = greeted();
    h.session.close();
    h.scheduler.advance(10_000);
    expect(h.sockets).toHaveLength(1);
    expect(h.statuses.at(-1)).toBe("connected"); // no disconnected spam after close
  });
});
