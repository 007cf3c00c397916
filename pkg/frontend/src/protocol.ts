/** Wire types for the line-delimited JSON bridge protocol. */

export interface ObservationSpaces {
  n_blocks: number;
  d_node: number;
  n_edges: number;
  d_edge: number;
  d_global: number;
}

export interface ActionSpaces {
  n_grippers: number;
  n_blocks: number;
  move_dim: number;
}

export interface Spaces {
  observation: ObservationSpaces;
  action: ActionSpaces;
}

export interface WireObs {
  nodes: number[];
  edges: number[];
  edge_src: number[];
  edge_dst: number[];
  globals: number[];
}

export interface StepInfo {
  success: boolean;
  reward_terms: Record<string, number>;
  potential: number;
}

export interface BlueprintSummary {
  id: string;
  n_blocks_used: number;
}

export interface EnvConfigOverrides {
  [key: string]: number;
}

interface ResponseBase {
  id: number;
  ok: boolean;
  error?: string;
}

export type Response = ResponseBase & Record<string, unknown>;

/** Row-major flat observation backed by typed arrays. */
export interface FlatObservation {
  /** (n_blocks * d_node) row-major */
  nodes: Float64Array;
  /** (n_edges * d_edge) row-major, destination-major edge order */
  edges: Float64Array;
  edgeSrc: Int32Array;
  edgeDst: Int32Array;
  /** (d_global) */
  globals: Float64Array;
}

export interface StepResult {
  obs: FlatObservation;
  reward: number;
  done: boolean;
  info: StepInfo;
}

export function toFlatObservation(wire: WireObs): FlatObservation {
  return {
    nodes: Float64Array.from(wire.nodes),
    edges: Float64Array.from(wire.edges),
    edgeSrc: Int32Array.from(wire.edge_src),
    edgeDst: Int32Array.from(wire.edge_dst),
    globals: Float64Array.from(wire.globals),
  };
}
