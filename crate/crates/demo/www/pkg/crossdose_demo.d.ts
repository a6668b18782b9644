/* tslint:disable */
/* eslint-disable */

/**
 * A hot-lesion phantom, its low-dose acquisition and the residual `y − x`.
 */
export class Simulation {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Bin edges followed by counts: `bins + 1` edges, then `bins` counts.
     */
    histogram(bins: number): Float64Array;
    low_dose_pixels(): Float32Array;
    constructor(size: number, dose_fraction: number, counts_per_suv: number, seed: number);
    reference_pixels(): Float32Array;
    residual_pixels(): Float32Array;
    /**
     * `[q05, q95, skewness, frac_negative, max_ld, max_fd]`, whole image
     * or lesion only.
     */
    stats(lesion: boolean): Float64Array;
    readonly size: number;
}

/**
 * Averaging-gap toy result: `[gap, standard_error, z]`, then per bin
 * `[x_mid, mixed, low_noise_optimum, high_noise_optimum]` (NaN where a dose
 * has too few samples in the bin).
 */
export function averaging_gap(ratio: number, mae: boolean, samples: number, bins: number, seed: number): Float64Array;

export function lr_schedule(total: number, lr_base: number, gamma: number, points: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_simulation_free: (a: number, b: number) => void;
    readonly averaging_gap: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly lr_schedule: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly simulation_histogram: (a: number, b: number) => [number, number, number, number];
    readonly simulation_low_dose_pixels: (a: number) => [number, number];
    readonly simulation_new: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly simulation_reference_pixels: (a: number) => [number, number];
    readonly simulation_residual_pixels: (a: number) => [number, number];
    readonly simulation_size: (a: number) => number;
    readonly simulation_stats: (a: number, b: number) => [number, number];
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
