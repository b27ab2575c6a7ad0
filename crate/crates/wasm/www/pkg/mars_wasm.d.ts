/* tslint:disable */
/* eslint-disable */

export function decode(word: number): string;

export function encode(first: boolean, count: number, spatial: number, chunk: number): number;

/**
 * Storage of a `k`x`k` conv layer with and without zero-skipping.
 */
export function storage(k: number, in_ch: number, out_ch: number, b_w: number, zero_groupset_ratio: number): string;

/**
 * Simulated speedup of one 3x3 layer on a `size`x`size` map across
 * `steps + 1` evenly spaced zero ratios in [0, 0.95].
 */
export function sweep(in_ch: number, out_ch: number, size: number, steps: number, seed: bigint): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly decode: (a: number) => [number, number, number, number];
    readonly encode: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly storage: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly sweep: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
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
