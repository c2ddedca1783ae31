/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_edge: (a: number) => number;
export const demo_metrics_json: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const demo_new: (a: bigint, b: number) => [number, number, number];
export const demo_points_preview: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const demo_render: (a: number, b: number, c: number) => [number, number];
export const demo_slides: (a: number) => number;
export const demo_soft_prediction: (a: number, b: number, c: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
