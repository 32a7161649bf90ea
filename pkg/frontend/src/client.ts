/**
 * Trainer session against a live executor.
 *
 * The loop this enables: request k rollouts per task, write the collected
 * groups as a training batch, fold the batch into a new parameter digest
 * (a stand-in for a real gradient update), and synchronize the new policy
 * version back into the executor so subsequent rollouts are labeled with
 * it. Group submission is idempotent executor-side, so a dropped
 * connection is handled by reconnecting and re-requesting whatever is
 * still missing.
 */

import { createHash } from "node:crypto";
import { readFileSync, writeFileSync } from "node:fs";
import { canonicalJson } from "./canonical";
import { Envelope, FRAME, FrameSocket, controlData, controlFrame, frameKind } from "./wire";

export interface TaskSpec {
  task_id: string;
  query: string;
  ground_truth?: string | null;
  max_steps?: number;
  priority?: number;
  seed?: number;
  meta?: Record<string, unknown>;
}

export interface TrajectoryDict {
  task_id: string;
  rollout_index: number;
  steps: unknown[];
  final_answer: string | null;
  status: string;
  reward: number | null;
  policy_version: number;
  elapsed?: number;
}

export interface GroupResult {
  task_id: string;
  k: number;
  trajectories: TrajectoryDict[];
  advantages: number[];
}

export interface PolicyVersion {
  version: number;
  params_digest: string;
}

const BATCH_HEADER_BASE = {
  format_version: 1,
  std_convention: "population",
  normalization: "trim+collapse",
};

export class TrainerSession {
  readonly host: string;
  readonly port: number;
  readonly name: string;
  /** number of sync calls issued; the executor's version must match it */
  trainingSteps = 0;
  currentVersion: PolicyVersion = { version: 0, params_digest: "" };
  batchLog: string[] = [];

  private conn: FrameSocket | null = null;
  private pendingGroups = new Map<string, GroupResult>();

  constructor(host: string, port: number, name = "trainer") {
    this.host = host;
    this.port = port;
    this.name = name;
  }

  async connect(): Promise<void> {
    let lastError: unknown = null;
    for (let attempt = 0; attempt < 30; attempt++) {
      try {
        this.conn = await FrameSocket.connect(this.host, this.port);
        return;
      } catch (err) {
        lastError = err;
        await sleep(100);
      }
    }
    throw new Error(`executor unreachable at ${this.host}:${this.port}: ${lastError}`);
  }

  private async ensureConnection(): Promise<FrameSocket> {
    if (this.conn === null || this.conn.isClosed) {
      await this.connect();
    }
    return this.conn as FrameSocket;
  }

  private async sendFrame(kind: string, data: Record<string, unknown>): Promise<void> {
    const conn = await this.ensureConnection();
    conn.send(controlFrame(this.name, kind, data));
  }

  private taskPayload(task: TaskSpec): Record<string, unknown> {
    return {
      task_id: task.task_id,
      query: task.query,
      ground_truth: task.ground_truth ?? null,
      rollout_index: 0,
      max_steps: task.max_steps ?? 8,
      priority: task.priority ?? 0,
      seed: task.seed ?? 0,
      meta: task.meta ?? {},
    };
  }

  /**
   * Submit one group per task and collect every result, resuming across
   * connection loss by re-requesting only the missing groups.
   */
  async requestRollouts(
    tasks: TaskSpec[],
    k: number,
    timeoutMs = 60_000,
  ): Promise<Map<string, GroupResult>> {
    const wanted = new Map(tasks.map((t) => [t.task_id, t]));
    const collected = new Map<string, GroupResult>();
    for (const [taskId, group] of this.pendingGroups) {
      if (wanted.has(taskId)) {
        collected.set(taskId, group);
        this.pendingGroups.delete(taskId);
      }
    }
    for (const task of tasks) {
      await this.sendFrame(FRAME.submitGroup, { task: this.taskPayload(task), k });
    }
    const deadline = Date.now() + timeoutMs;
    while (collected.size < wanted.size) {
      if (Date.now() > deadline) {
        const missing = [...wanted.keys()].filter((id) => !collected.has(id));
        throw new Error(`timed out waiting for groups: ${missing.join(", ")}`);
      }
      const conn = await this.ensureConnection();
      const message = await conn.next();
      if (message === null) {
        // connection lost mid-collection: reconnect, re-request the missing
        await this.connect();
        for (const [taskId, task] of wanted) {
          if (!collected.has(taskId)) {
            await this.sendFrame(FRAME.submitGroup, { task: this.taskPayload(task), k });
          }
        }
        continue;
      }
      this.dispatch(message, (group) => {
        if (wanted.has(group.task_id) && !collected.has(group.task_id)) {
          collected.set(group.task_id, group);
        } else {
          this.pendingGroups.set(group.task_id, group);
        }
      });
    }
    return collected;
  }

  private dispatch(message: Envelope, onGroup: (g: GroupResult) => void): void {
    const kind = frameKind(message);
    const data = controlData(message);
    if (kind === FRAME.groupResult) {
      onGroup(data as unknown as GroupResult);
    } else if (kind === FRAME.errorReply) {
      throw new Error(`executor rejected request: ${data.error}`);
    }
  }

  /**
   * Write the collected groups as a training batch: one header line, then
   * one record per trajectory ordered by (task_id, rollout_index) -- the
   * same layout the executor writes on its side of the protocol.
   */
  writeBatch(groups: Map<string, GroupResult>, path: string): void {
    const first = groups.values().next().value as GroupResult | undefined;
    if (!first) {
      throw new Error("no groups to write");
    }
    const records: Array<Record<string, unknown>> = [];
    for (const group of groups.values()) {
      const byIndex = [...group.trajectories].sort(
        (a, b) => a.rollout_index - b.rollout_index,
      );
      for (const t of byIndex) {
        records.push({
          task_id: t.task_id,
          rollout_index: t.rollout_index,
          steps: t.steps,
          reward: t.reward ?? 0,
          advantage: group.advantages[t.rollout_index],
          policy_version: t.policy_version,
        });
      }
    }
    records.sort((a, b) => {
      const ta = a.task_id as string;
      const tb = b.task_id as string;
      if (ta !== tb) return ta < tb ? -1 : 1;
      return (a.rollout_index as number) - (b.rollout_index as number);
    });
    const header = { ...BATCH_HEADER_BASE, k: first.k };
    const lines = [canonicalJson(header), ...records.map((r) => canonicalJson(r))];
    writeFileSync(path, lines.join("\n") + "\n", "utf-8");
    this.batchLog.push(path);
  }

  /**
   * The gradient update stand-in: evolve the parameter digest from the
   * previous digest and the batch content. Deterministic, so two trainers
   * fed the same batches agree on every digest.
   */
  fakeTrainStep(batchPath: string): string {
    const content = readFileSync(batchPath, "utf-8");
    return createHash("sha256")
      .update(this.currentVersion.params_digest)
      .update(content)
      .digest("hex");
  }

  /** Round-trip a policy sync; the executor's version must equal the
   * client's own step counter afterwards. */
  async sync(paramsDigest: string, timeoutMs = 10_000): Promise<PolicyVersion> {
    await this.sendFrame(FRAME.policySync, { params_digest: paramsDigest });
    const deadline = Date.now() + timeoutMs;
    const conn = await this.ensureConnection();
    while (Date.now() <= deadline) {
      const message = await conn.next();
      if (message === null) {
        throw new Error("connection lost during policy sync");
      }
      const kind = frameKind(message);
      const data = controlData(message);
      if (kind === FRAME.policySync) {
        this.trainingSteps += 1;
        this.currentVersion = {
          version: data.version as number,
          params_digest: (data.params_digest as string) ?? "",
        };
        if (this.currentVersion.version !== this.trainingSteps) {
          throw new Error(
            `executor version ${this.currentVersion.version} != ` +
              `client step counter ${this.trainingSteps}`,
          );
        }
        return this.currentVersion;
      }
      if (kind === FRAME.groupResult) {
        const group = data as unknown as GroupResult;
        this.pendingGroups.set(group.task_id, group);
      } else if (kind === FRAME.errorReply) {
        throw new Error(`executor rejected sync: ${data.error}`);
      }
    }
    throw new Error("timed out waiting for policy-sync acknowledgement");
  }

  /** Test hook: sever the transport as a network fault would. */
  dropConnection(): void {
    this.conn?.destroy();
  }

  close(): void {
    this.conn?.close();
    this.conn = null;
  }
}

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}
