/* tslint:disable */
/* eslint-disable */

/**
 * Top-down and camera views of one synthetic sample.
 */
export class ScenePreview {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    readonly grid_x: number;
    readonly grid_y: number;
    /**
     * Class decoded from the finest feature level, row-major.
     */
    readonly image: Uint8Array;
    readonly image_h: number;
    readonly image_w: number;
    readonly queries: number;
    /**
     * 1 where a column holds at least one seed query.
     */
    readonly seeds: Uint8Array;
    /**
     * Label of the highest occupied voxel per column, `x`-major; 255 where
     * the column is occupied but unobserved.
     */
    readonly top: Uint8Array;
}

/**
 * Normalized anchor window centered on a texel, `(2r+1)^2` row-major.
 */
export function anchor_window_weights(sigma_u: number, sigma_v: number, delta_u: number, delta_v: number, radius: number): Float64Array;

/**
 * Input, local, global and blended planes concatenated, each
 * `size * size` row-major.
 */
export function refine_plane(size: number, seed: number, theta: number, beta: number): Float64Array;

/**
 * Seeded synthetic scene with its seed queries and rendered features.
 */
export function scene_preview(seed: number, noise_sigma: number, jitter: number, dropout: number): ScenePreview;

/**
 * Marker for unobserved voxels in [`ScenePreview::top`].
 */
export function unknown_label(): number;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_scenepreview_free: (a: number, b: number) => void;
    readonly anchor_window_weights: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly refine_plane: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly scene_preview: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly scenepreview_grid_x: (a: number) => number;
    readonly scenepreview_grid_y: (a: number) => number;
    readonly scenepreview_image: (a: number) => [number, number];
    readonly scenepreview_image_h: (a: number) => number;
    readonly scenepreview_image_w: (a: number) => number;
    readonly scenepreview_queries: (a: number) => number;
    readonly scenepreview_seeds: (a: number) => [number, number];
    readonly scenepreview_top: (a: number) => [number, number];
    readonly unknown_label: () => number;
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
