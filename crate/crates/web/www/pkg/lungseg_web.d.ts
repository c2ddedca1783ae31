/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    edge(): number;
    /**
     * Metrics of the thresholded soft prediction against the annotation,
     * as a JSON object.
     */
    metrics_json(slide: number, radius: number, t: number): string;
    /**
     * Builds an 8-slide 128x128 phantom.
     */
    constructor(seed: bigint, lesion_hu_mean: number);
    /**
     * Row count and the first `max_rows` CSV rows of the point export
     * (`kind` is `ct` or `ground_truth`).
     */
    points_preview(kind: string, z_step: number, max_rows: number): string;
    /**
     * RGBA pixels of one slide through the HU window, with the lung tinted
     * blue and the lesion annotation red when `overlay` is set.
     */
    render(slide: number, overlay: boolean): Uint8Array;
    slides(): number;
    /**
     * Simulated soft prediction of one slide: the lesion annotation
     * box-blurred with `radius`, so its edges fade out.
     */
    soft_prediction(slide: number, radius: number): Float32Array;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_edge: (a: number) => number;
    readonly demo_metrics_json: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly demo_new: (a: bigint, b: number) => [number, number, number];
    readonly demo_points_preview: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly demo_render: (a: number, b: number, c: number) => [number, number];
    readonly demo_slides: (a: number) => number;
    readonly demo_soft_prediction: (a: number, b: number, c: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
