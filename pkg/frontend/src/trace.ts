/**
 * Reader for the executor's trace file (a public file format: 4-byte
 * big-endian body length, 4-byte CRC32 of the body, canonical-JSON body).
 * Lets trainer-side tooling verify what the executor recorded without any
 * executor code.
 */

import { readFileSync } from "node:fs";
import { crc32 } from "node:zlib";

export interface TraceEvent {
  seq: number;
  kind: string;
  task_id: string;
  rollout_index: number;
  worker_id: string | null;
  payload: Record<string, unknown>;
  timestamp: number;
}

export function readTrace(path: string): TraceEvent[] {
  const data = readFileSync(path);
  const events: TraceEvent[] = [];
  let offset = 0;
  while (offset + 8 <= data.length) {
    const length = data.readUInt32BE(offset);
    const expectedCrc = data.readUInt32BE(offset + 4);
    const start = offset + 8;
    if (start + length > data.length) {
      break; // truncated tail
    }
    const body = data.subarray(start, start + length);
    if ((crc32(body) >>> 0) !== expectedCrc) {
      break; // corrupt record: stop at the valid prefix
    }
    events.push(JSON.parse(body.toString("utf-8")) as TraceEvent);
    offset = start + length;
  }
  return events;
}
