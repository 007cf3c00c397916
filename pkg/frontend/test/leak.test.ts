import { readFileSync } from "node:fs";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { AssemblyEnv, Bridge } from "../src/env.js";
import { ensureLibrary, scriptedActions } from "./helpers.js";

// Default sized for CI; set LEAK_STEPS=1000000 for the full soak.
const LEAK_STEPS = Number(process.env.LEAK_STEPS ?? 20000);

let bridge: Bridge;
let library: string;

beforeAll(() => {
  library = ensureLibrary();
  bridge = new Bridge();
});

afterAll(async () => {
  await bridge.close();
});

function bridgeRssKiB(pid: number): number {
  const status = readFileSync(`/proc/${pid}/status`, "utf8");
  const match = /VmRSS:\s+(\d+)\s+kB/.exec(status);
  return match ? Number(match[1]) : 0;
}

describe("memory stability", () => {
  it(`does not grow over ${LEAK_STEPS} steps on one handle`, async () => {
    const env = await AssemblyEnv.make({ libraryPath: library, bridge });
    const bps = await env.blueprints();
    const actions = scriptedActions(3, 256, 2, 16);
    let episodeSeed = 0;
    await env.reset(bps.train[0].id, episodeSeed);

    const warmup = Math.floor(LEAK_STEPS / 4);
    let bridgeAfterWarmup = 0;
    let heapAfterWarmup = 0;
    for (let t = 0; t < LEAK_STEPS; t++) {
      const r = await env.step(actions[t % actions.length]);
      if (r.done) {
        episodeSeed += 1;
        await env.reset(bps.train[episodeSeed % bps.train.length].id, episodeSeed);
      }
      if (t === warmup) {
        if (global.gc) global.gc();
        bridgeAfterWarmup = bridgeRssKiB(bridge.pid!);
        heapAfterWarmup = process.memoryUsage().heapUsed;
      }
    }
    if (global.gc) global.gc();
    const bridgeEnd = bridgeRssKiB(bridge.pid!);
    const heapEnd = process.memoryUsage().heapUsed;

    // allow modest allocator noise; a real per-step leak would dwarf these
    expect(bridgeEnd - bridgeAfterWarmup).toBeLessThan(40 * 1024); // KiB
    expect(heapEnd - heapAfterWarmup).toBeLessThan(64 * 1024 * 1024); // bytes
    await env.close();
  }, 3_600_000);
});
