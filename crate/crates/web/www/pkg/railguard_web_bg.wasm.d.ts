/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_stationreplay_free: (a: number, b: number) => void;
export const efficiency: (a: number, b: number, c: number) => [number, number, number];
export const estimateHeight: (a: number, b: number, c: number) => [number, number, number];
export const scenarioNames: () => [number, number];
export const stationreplay_frameCount: (a: number) => number;
export const stationreplay_frameJson: (a: number, b: number) => [number, number];
export const stationreplay_height: (a: number) => number;
export const stationreplay_new: (a: number, b: number) => [number, number, number];
export const stationreplay_width: (a: number) => number;
export const stationreplay_zonesJson: (a: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
