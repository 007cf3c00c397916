import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { AssemblyEnv, Bridge } from "../src/env.js";
import { ensureLibrary, runOracle, scriptedActions } from "./helpers.js";

let bridge: Bridge;
let library: string;

beforeAll(() => {
  library = ensureLibrary();
  bridge = new Bridge();
});

afterAll(async () => {
  await bridge.close();
});

describe("cross-language parity", () => {
  it("reproduces a 100-step scripted trajectory bit-exactly", async () => {
    const env = await AssemblyEnv.make({ libraryPath: library, bridge });
    const bps = await env.blueprints();
    const blueprintId = bps.train[0].id;
    const seed = 20240311;
    const actions = scriptedActions(77, 100, 2, 16);

    await env.reset(blueprintId, seed);
    const rewards: number[] = [];
    const dones: boolean[] = [];
    const successes: boolean[] = [];
    for (const act of actions) {
      const r = await env.step(act);
      rewards.push(r.reward);
      dones.push(r.done);
      successes.push(r.info.success);
      if (r.done) break;
    }

    const oracle = runOracle({
      library_path: library, blueprint_id: blueprintId, seed, actions,
    });
    expect(rewards.length).toBe(oracle.rewards.length);
    for (let i = 0; i < rewards.length; i++) {
      // bit-exact: the binding adds no arithmetic
      expect(rewards[i]).toBe(oracle.rewards[i]);
    }
    expect(dones).toEqual(oracle.dones);
    expect(successes).toEqual(oracle.successes);
    await env.close();
  }, 120_000);

  it("holds across seeds and blueprints", async () => {
    const env = await AssemblyEnv.make({ libraryPath: library, bridge });
    const bps = await env.blueprints();
    for (const [k, bp] of bps.train.slice(0, 3).entries()) {
      const seed = 1000 + k;
      const actions = scriptedActions(500 + k, 30, 2, 16);
      await env.reset(bp.id, seed);
      const rewards: number[] = [];
      for (const act of actions) {
        const r = await env.step(act);
        rewards.push(r.reward);
        if (r.done) break;
      }
      const oracle = runOracle({
        library_path: library, blueprint_id: bp.id, seed, actions,
      });
      expect(rewards).toEqual(oracle.rewards);
    }
    await env.close();
  }, 120_000);
});
