/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const decode: (a: number) => [number, number, number, number];
export const encode: (a: number, b: number, c: number, d: number) => [number, number, number];
export const storage: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const sweep: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
