/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_scenepreview_free: (a: number, b: number) => void;
export const anchor_window_weights: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const refine_plane: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const scene_preview: (a: number, b: number, c: number, d: number) => [number, number, number];
export const scenepreview_grid_x: (a: number) => number;
export const scenepreview_grid_y: (a: number) => number;
export const scenepreview_image: (a: number) => [number, number];
export const scenepreview_image_h: (a: number) => number;
export const scenepreview_image_w: (a: number) => number;
export const scenepreview_queries: (a: number) => number;
export const scenepreview_seeds: (a: number) => [number, number];
export const scenepreview_top: (a: number) => [number, number];
export const unknown_label: () => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
