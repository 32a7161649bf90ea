/**
 * The executor's framed wire protocol, from the consuming side.
 *
 * Each frame is a 4-byte big-endian length followed by one JSON message
 * envelope with exactly eleven fields; control frames carry their kind both
 * in `headers.frame` and in the payload. This file is an independent
 * implementation of that contract -- it shares no code with the executor.
 */

import * as net from "node:net";
import { randomUUID } from "node:crypto";
import { canonicalJson } from "./canonical";

/**
 * The payload tag is the message category; for control frames the body is
 * a nested { kind, data } pair carrying the frame kind and its fields.
 */
export interface ControlBody {
  kind: string;
  data: Record<string, unknown>;
}

export interface Envelope {
  id: string;
  session_id: string;
  sender: string;
  receiver: string | null;
  caller: string | null;
  payload: { kind: string; data: ControlBody };
  category: string;
  topic: string | null;
  priority: number;
  headers: Record<string, unknown>;
  timestamp: number;
}

export const FRAME = {
  submitGroup: "submit-group",
  groupResult: "group-result",
  policySync: "policy-sync",
  errorReply: "error-reply",
  shutdown: "shutdown",
} as const;

export function controlFrame(
  sender: string,
  kind: string,
  data: Record<string, unknown>,
  receiver = "peer",
): Envelope {
  return {
    id: randomUUID(),
    session_id: "",
    sender,
    receiver,
    caller: null,
    payload: { kind: "control", data: { kind, data } },
    category: "control",
    topic: null,
    priority: 0,
    headers: { frame: kind },
    timestamp: Date.now() / 1000,
  };
}

export function frameKind(message: Envelope): string {
  const fromHeaders = message.headers?.frame;
  if (typeof fromHeaders === "string" && fromHeaders.length > 0) {
    return fromHeaders;
  }
  return message.payload?.data?.kind ?? message.category;
}

export function controlData(message: Envelope): Record<string, unknown> {
  return message.payload.data.data ?? {};
}

/**
 * A socket with frame boundaries. `next()` resolves with the following
 * complete message, or null once the connection is gone.
 */
export class FrameSocket {
  private buffer: Buffer = Buffer.alloc(0);
  private inbox: Envelope[] = [];
  private waiters: Array<(m: Envelope | null) => void> = [];
  private closed = false;

  private constructor(private readonly socket: net.Socket) {
    socket.on("data", (chunk) => this.onData(chunk));
    socket.on("close", () => this.finish());
    socket.on("error", () => this.finish());
  }

  static connect(host: string, port: number, timeoutMs = 5000): Promise<FrameSocket> {
    return new Promise((resolve, reject) => {
      const socket = net.createConnection({ host, port });
      const timer = setTimeout(() => {
        socket.destroy();
        reject(new Error(`connect to ${host}:${port} timed out`));
      }, timeoutMs);
      socket.once("connect", () => {
        clearTimeout(timer);
        socket.setNoDelay(true);
        resolve(new FrameSocket(socket));
      });
      socket.once("error", (err) => {
        clearTimeout(timer);
        reject(err);
      });
    });
  }

  private onData(chunk: Buffer): void {
    this.buffer = Buffer.concat([this.buffer, chunk]);
    while (this.buffer.length >= 4) {
      const length = this.buffer.readUInt32BE(0);
      if (this.buffer.length < 4 + length) {
        return;
      }
      const body = this.buffer.subarray(4, 4 + length);
      this.buffer = this.buffer.subarray(4 + length);
      const message = JSON.parse(body.toString("utf-8")) as Envelope;
      const waiter = this.waiters.shift();
      if (waiter) {
        waiter(message);
      } else {
        this.inbox.push(message);
      }
    }
  }

  private finish(): void {
    if (this.closed) return;
    this.closed = true;
    for (const waiter of this.waiters.splice(0)) {
      waiter(null);
    }
  }

  send(message: Envelope): void {
    if (this.closed) {
      throw new Error("connection is closed");
    }
    const body = Buffer.from(canonicalJson(message), "utf-8");
    const header = Buffer.alloc(4);
    header.writeUInt32BE(body.length, 0);
    this.socket.write(Buffer.concat([header, body]));
  }

  next(): Promise<Envelope | null> {
    const queued = this.inbox.shift();
    if (queued !== undefined) {
      return Promise.resolve(queued);
    }
    if (this.closed) {
      return Promise.resolve(null);
    }
    return new Promise((resolve) => this.waiters.push(resolve));
  }

  get isClosed(): boolean {
    return this.closed;
  }

  close(): void {
    this.socket.destroy();
    this.finish();
  }

  /** Test hook: sever the transport abruptly, as a network fault would. */
  destroy(): void {
    this.socket.destroy();
  }
}
