/* tslint:disable */
/* eslint-disable */

/**
 * A scenario replayed through the pipeline, one JSON view per frame.
 */
export class StationReplay {
    free(): void;
    [Symbol.dispose](): void;
    frameCount(): number;
    /**
     * `{"frame","state","occupancy","detections","alerts"}`, or `null` past the end.
     */
    frameJson(index: number): string;
    constructor(scenario: string);
    /**
     * `[{"name","kind","polygon"}]`
     */
    zonesJson(): string;
    readonly height: number;
    readonly width: number;
}

/**
 * Accuracy (percent) per millisecond-watt.
 */
export function efficiency(accuracy_pct: number, latency_ms: number, power_w: number): number;

/**
 * Person height from the camera height and the two ground distances.
 */
export function estimateHeight(camera_height_m: number, ground_hit_m: number, head_dist_m: number): number;

/**
 * Built-in scenario names, comma separated.
 */
export function scenarioNames(): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_stationreplay_free: (a: number, b: number) => void;
    readonly efficiency: (a: number, b: number, c: number) => [number, number, number];
    readonly estimateHeight: (a: number, b: number, c: number) => [number, number, number];
    readonly scenarioNames: () => [number, number];
    readonly stationreplay_frameCount: (a: number) => number;
    readonly stationreplay_frameJson: (a: number, b: number) => [number, number];
    readonly stationreplay_height: (a: number) => number;
    readonly stationreplay_new: (a: number, b: number) => [number, number, number];
    readonly stationreplay_width: (a: number) => number;
    readonly stationreplay_zonesJson: (a: number) => [number, number];
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
