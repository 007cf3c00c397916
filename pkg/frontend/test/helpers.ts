import { execFileSync } from "node:child_process";
import { mkdtempSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import * as path from "node:path";
import { fileURLToPath } from "node:url";

const HERE = path.dirname(fileURLToPath(import.meta.url));
export const PYTHON = process.env.MAGNAFORGE_PYTHON ?? "python3";
export const SERVER_PATH = path.resolve(HERE, "..", "bridge", "env_server.py");
export const ORACLE_PATH = path.resolve(HERE, "oracle_rollout.py");

/** Deterministic 32-bit PRNG (mulberry32) for scripted actions. */
export function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a |= 0;
    a = (a + 0x6d2b79f5) | 0;
    let t = Math.imul(a ^ (a >>> 15), 1 | a);
    t = (t + Math.imul(t ^ (t >>> 7), 61 | t)) ^ t;
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

export interface ScriptedAction {
  choice: number[];
  moves: number[];
}

export function scriptedActions(
  seed: number,
  steps: number,
  nGrippers: number,
  nBlocks: number,
): ScriptedAction[] {
  const rand = mulberry32(seed);
  const actions: ScriptedAction[] = [];
  for (let t = 0; t < steps; t++) {
    const choice = Array.from({ length: nGrippers }, () =>
      Math.floor(rand() * nBlocks),
    );
    const moves = Array.from({ length: nBlocks * 6 }, () => (rand() * 2 - 1) * 0.8);
    actions.push({ choice, moves });
  }
  return actions;
}

let libraryPath: string | undefined;

/** Generate a blueprint library once per test run via the primary CLI. */
export function ensureLibrary(): string {
  if (!libraryPath) {
    const dir = mkdtempSync(path.join(tmpdir(), "magnaforge-ts-"));
    libraryPath = path.join(dir, "library.json");
    execFileSync(PYTHON, [
      "-m", "magnaforge.cli", "gen-blueprints",
      "--seed", "9", "--count", "8", "--min-blocks", "2", "--max-blocks", "5",
      "--out", libraryPath,
    ], { stdio: ["ignore", "ignore", "inherit"] });
  }
  return libraryPath;
}

export interface OracleResult {
  rewards: number[];
  dones: boolean[];
  successes: boolean[];
}

export function runOracle(job: {
  library_path: string;
  blueprint_id: string;
  seed: number;
  actions: ScriptedAction[];
  config?: Record<string, number>;
}): OracleResult {
  const dir = mkdtempSync(path.join(tmpdir(), "magnaforge-oracle-"));
  const jobPath = path.join(dir, "job.json");
  writeFileSync(jobPath, JSON.stringify(job));
  const out = execFileSync(PYTHON, [ORACLE_PATH, jobPath], { encoding: "utf8" });
  return JSON.parse(out) as OracleResult;
}
