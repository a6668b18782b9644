/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_simulation_free: (a: number, b: number) => void;
export const averaging_gap: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const lr_schedule: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const simulation_histogram: (a: number, b: number) => [number, number, number, number];
export const simulation_low_dose_pixels: (a: number) => [number, number];
export const simulation_new: (a: number, b: number, c: number, d: number) => [number, number, number];
export const simulation_reference_pixels: (a: number) => [number, number];
export const simulation_residual_pixels: (a: number) => [number, number];
export const simulation_size: (a: number) => number;
export const simulation_stats: (a: number, b: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
