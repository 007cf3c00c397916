export { AssemblyEnv, Bridge } from "./env.js";
export type { Action, BridgeOptions, MakeEnvOptions } from "./env.js";
export type {
  ActionSpaces,
  BlueprintSummary,
  FlatObservation,
  ObservationSpaces,
  Spaces,
  StepInfo,
  StepResult,
} from "./protocol.js";
