/**
 * Gym-style binding to the magnaforge assembly environment.
 *
 * A Bridge owns one Python subprocess speaking line-delimited JSON; each
 * AssemblyEnv is an independent handle inside it. The binding performs no
 * arithmetic: observations, rewards, and termination flags are produced by
 * the core and cross the pipe as JSON doubles (shortest round-trip reprs
 * both ways, so values are bit-exact).
 */

import { spawn, ChildProcessWithoutNullStreams } from "node:child_process";
import { createInterface, Interface } from "node:readline";
import { fileURLToPath } from "node:url";
import * as path from "node:path";

import {
  BlueprintSummary,
  EnvConfigOverrides,
  FlatObservation,
  Response,
  Spaces,
  StepResult,
  toFlatObservation,
  WireObs,
  StepInfo,
} from "./protocol.js";

const HERE = path.dirname(fileURLToPath(import.meta.url));
const DEFAULT_SERVER = path.resolve(HERE, "..", "..", "bridge", "env_server.py");

interface Pending {
  resolve: (r: Response) => void;
  reject: (e: Error) => void;
}

export interface BridgeOptions {
  pythonBin?: string;
  serverPath?: string;
}

export class Bridge {
  private proc: ChildProcessWithoutNullStreams;
  private reader: Interface;
  private pending = new Map<number, Pending>();
  private nextId = 1;
  private closed = false;
  private stderrTail = "";

  constructor(options: BridgeOptions = {}) {
    const python = options.pythonBin ?? process.env.MAGNAFORGE_PYTHON ?? "python3";
    const server = options.serverPath ?? process.env.MAGNAFORGE_BRIDGE ?? DEFAULT_SERVER;
    this.proc = spawn(python, [server], { stdio: ["pipe", "pipe", "pipe"] });
    this.proc.stderr.on("data", (chunk: Buffer) => {
      this.stderrTail = (this.stderrTail + chunk.toString()).slice(-4000);
    });
    this.proc.on("exit", () => {
      this.closed = true;
      for (const [, p] of this.pending) {
        p.reject(new Error(`bridge process exited: ${this.stderrTail}`));
      }
      this.pending.clear();
    });
    this.reader = createInterface({ input: this.proc.stdout });
    this.reader.on("line", (line: string) => {
      if (!line.trim()) return;
      const msg = JSON.parse(line) as Response;
      const waiter = this.pending.get(msg.id);
      if (waiter) {
        this.pending.delete(msg.id);
        waiter.resolve(msg);
      }
    });
  }

  get pid(): number | undefined {
    return this.proc.pid;
  }

  request(op: string, fields: Record<string, unknown>): Promise<Response> {
    if (this.closed) {
      return Promise.reject(new Error("bridge is closed"));
    }
    const id = this.nextId++;
    const payload = JSON.stringify({ id, op, ...fields });
    return new Promise<Response>((resolve, reject) => {
      this.pending.set(id, { resolve, reject });
      this.proc.stdin.write(payload + "\n");
    }).then((msg) => {
      if (!msg.ok) {
        throw new Error(msg.error ?? "bridge error");
      }
      return msg;
    });
  }

  async close(): Promise<void> {
    if (this.closed) return;
    this.closed = true;
    this.proc.stdin.end();
    await new Promise<void>((resolve) => {
      const t = setTimeout(() => {
        this.proc.kill();
        resolve();
      }, 2000);
      this.proc.on("exit", () => {
        clearTimeout(t);
        resolve();
      });
    });
  }
}

export interface MakeEnvOptions {
  libraryPath: string;
  blocksetPath?: string;
  config?: EnvConfigOverrides;
  bridge?: Bridge;
}

export interface Action {
  /** one block index per gripper */
  choice: ArrayLike<number>;
  /** (n_blocks * move_dim) row-major block-local velocities */
  moves: ArrayLike<number>;
}

/** One environment handle; confined to a single caller. */
export class AssemblyEnv {
  private constructor(
    private bridge: Bridge,
    private ownsBridge: boolean,
    private handle: number,
    public readonly spaces: Spaces,
  ) {}

  private closed = false;

  static async make(options: MakeEnvOptions): Promise<AssemblyEnv> {
    const bridge = options.bridge ?? new Bridge();
    const owns = options.bridge === undefined;
    try {
      const resp = await bridge.request("make_env", {
        library_path: options.libraryPath,
        blockset_path: options.blocksetPath ?? null,
        config: options.config ?? null,
      });
      return new AssemblyEnv(
        bridge, owns, resp.handle as number, resp.spaces as Spaces,
      );
    } catch (e) {
      if (owns) await bridge.close();
      throw e;
    }
  }

  private guard(): void {
    if (this.closed) {
      throw new Error("environment handle is closed");
    }
  }

  async blueprints(): Promise<{ train: BlueprintSummary[]; test: BlueprintSummary[] }> {
    this.guard();
    const resp = await this.bridge.request("blueprints", { handle: this.handle });
    return {
      train: resp.train as BlueprintSummary[],
      test: resp.test as BlueprintSummary[],
    };
  }

  async reset(blueprintId: string, seed: number, presetId?: string): Promise<{
    obs: FlatObservation;
    info: StepInfo;
  }> {
    this.guard();
    const resp = await this.bridge.request("reset", {
      handle: this.handle,
      blueprint_id: blueprintId,
      seed,
      preset_id: presetId ?? null,
    });
    return {
      obs: toFlatObservation(resp.obs as WireObs),
      info: resp.info as StepInfo,
    };
  }

  /** Shape errors are raised here, before anything reaches the core. */
  private validateAction(action: Action): { choice: number[]; moves: number[] } {
    const { n_grippers, n_blocks, move_dim } = this.spaces.action;
    const choice = Array.from(action.choice, Number);
    const moves = Array.from(action.moves, Number);
    if (choice.length !== n_grippers) {
      throw new Error(`action.choice must have length ${n_grippers}, got ${choice.length}`);
    }
    for (const c of choice) {
      if (!Number.isInteger(c) || c < 0 || c >= n_blocks) {
        throw new Error(`gripper choice ${c} outside [0, ${n_blocks})`);
      }
    }
    if (moves.length !== n_blocks * move_dim) {
      throw new Error(
        `action.moves must have length ${n_blocks * move_dim}, got ${moves.length}`,
      );
    }
    for (const v of moves) {
      if (!Number.isFinite(v)) {
        throw new Error("action.moves entries must be finite");
      }
    }
    return { choice, moves };
  }

  async step(action: Action): Promise<StepResult> {
    this.guard();
    const wire = this.validateAction(action);
    const resp = await this.bridge.request("step", {
      handle: this.handle,
      action: wire,
    });
    return {
      obs: toFlatObservation(resp.obs as WireObs),
      reward: resp.reward as number,
      done: resp.done as boolean,
      info: resp.info as StepInfo,
    };
  }

  async close(): Promise<void> {
    if (this.closed) return;
    this.closed = true;
    await this.bridge.request("close", { handle: this.handle });
    if (this.ownsBridge) {
      await this.bridge.close();
    }
  }
}
