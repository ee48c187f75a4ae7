/* tslint:disable */
/* eslint-disable */

/**
 * Twin experiment assimilated by a stochastic EnKF. Rows of
 * `[time, x_ref, y_ref, z_ref, x_a, y_a, z_a, rmse]` every `stride` steps.
 */
export function enkf_twin(seed: bigint, noise_std: number, steps_per_obs: number, ensemble_size: number, horizon: number, stride: number): Float64Array;

/**
 * Euclidean distance between the trajectory from `(x, y, z)` and one whose `x`
 * starts `eps` away, per kept step.
 */
export function separation(x: number, y: number, z: number, eps: number, dt: number, steps: number, stride: number): Float64Array;

/**
 * `[x, y, z]` per kept step, starting from `(x, y, z)`.
 */
export function simulate(x: number, y: number, z: number, dt: number, steps: number, stride: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly enkf_twin: (a: bigint, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly separation: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly simulate: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
