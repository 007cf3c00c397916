"""Stdio bridge exposing the assembly environment to foreign runtimes.

One JSON object per line on stdin/stdout. Floats cross the pipe as JSON
numbers: Python emits shortest round-trip reprs and parses back to the
nearest double, so float64 values survive both directions bit-exactly.
The bridge adds no arithmetic of its own.
"""

import json
import sys
import traceback

import numpy as np

from magnaforge.blocks import default_blockset, load_blockset, load_library
from magnaforge.env import Action, EnvConfig, MagneticAssemblyEnv
from magnaforge.observe import obs_dims


class Session:
    def __init__(self):
        self.handles = {}
        self.next_handle = 1

    def make_env(self, req):
        blockset = (
            load_blockset(req["blockset_path"]) if req.get("blockset_path")
            else default_blockset()
        )
        config = EnvConfig(**(req.get("config") or {}))
        library = load_library(req["library_path"], blockset)
        env = MagneticAssemblyEnv(blockset, config)
        handle = self.next_handle
        self.next_handle += 1
        self.handles[handle] = (env, library)
        return {"handle": handle, "spaces": self._spaces(env)}

    @staticmethod
    def _spaces(env):
        dims = obs_dims(env.blockset, env.config)
        return {
            "observation": dims,
            "action": {
                "n_grippers": env.config.n_grippers,
                "n_blocks": env.blockset.n_blocks,
                "move_dim": 6,
            },
        }

    def _env(self, req):
        handle = req["handle"]
        if handle not in self.handles:
            raise KeyError(f"unknown or closed handle {handle}")
        return self.handles[handle]

    @staticmethod
    def _pack_obs(obs):
        return {
            "nodes": [float(v) for v in obs.nodes.ravel()],
            "edges": [float(v) for v in obs.edges.ravel()],
            "edge_src": [int(v) for v in obs.edge_src],
            "edge_dst": [int(v) for v in obs.edge_dst],
            "globals": [float(v) for v in obs.globals],
        }

    @staticmethod
    def _pack_info(info):
        return {
            "success": bool(info["success"]),
            "reward_terms": {k: float(v) for k, v in info["reward_terms"].items()},
            "potential": float(info["potential"]),
        }

    def reset(self, req):
        env, library = self._env(req)
        blueprint = library.by_id(req["blueprint_id"])
        preset = library.by_id(req["preset_id"]) if req.get("preset_id") else None
        rng = np.random.default_rng(int(req["seed"]))
        result = env.reset(blueprint, rng, preset=preset)
        return {"obs": self._pack_obs(result.obs), "info": self._pack_info(result.info)}

    def step(self, req):
        env, _ = self._env(req)
        action = Action(
            np.asarray(req["action"]["choice"], dtype=np.int64),
            np.asarray(req["action"]["moves"], dtype=np.float64).reshape(
                env.blockset.n_blocks, 6
            ),
        )
        result = env.step(action)
        return {
            "obs": self._pack_obs(result.obs),
            "reward": float(result.reward),
            "done": bool(result.done),
            "info": self._pack_info(result.info),
        }

    def spaces(self, req):
        env, _ = self._env(req)
        return {"spaces": self._spaces(env)}

    def blueprints(self, req):
        _, library = self._env(req)
        return {
            "train": [
                {"id": bp.id, "n_blocks_used": bp.n_blocks_used} for bp in library.train
            ],
            "test": [
                {"id": bp.id, "n_blocks_used": bp.n_blocks_used} for bp in library.test
            ],
        }

    def close(self, req):
        handle = req["handle"]
        if handle in self.handles:
            del self.handles[handle]
        return {"closed": True}


def main():
    session = Session()
    ops = {
        "make_env": session.make_env,
        "reset": session.reset,
        "step": session.step,
        "spaces": session.spaces,
        "blueprints": session.blueprints,
        "close": session.close,
    }
    out = sys.stdout
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        req = json.loads(line)
        try:
            payload = ops[req["op"]](req)
            payload.update({"id": req.get("id"), "ok": True})
        except Exception as e:  # surfaced to the caller with the core's message
            payload = {
                "id": req.get("id"),
                "ok": False,
                "error": f"{type(e).__name__}: {e}",
                "trace": traceback.format_exc(limit=3),
            }
        out.write(json.dumps(payload) + "\n")
        out.flush()


if __name__ == "__main__":
    main()
