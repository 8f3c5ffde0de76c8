/* tslint:disable */
/* eslint-disable */

/**
 * One generated scene and the guidance currently derived from it.
 */
export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Input frame `t` as RGBA bytes.
     */
    frame_rgba(t: number): Uint8Array;
    /**
     * Number of guidance masks in frame `t`.
     */
    guidance_count(t: number): number;
    /**
     * Guidance of frame `t` as RGBA bytes; injected noise is white.
     */
    guidance_rgba(t: number): Uint8Array;
    height(): number;
    /**
     * Ground-truth instances of frame `t` as RGBA bytes.
     */
    instances_rgba(t: number): Uint8Array;
    constructor(preset: string, seed: number, num_moving: number, num_static: number, background: string, pan_x: number);
    num_frames(): number;
    score_guidance(): Scores;
    set_guidance(spurious_rate: number, drop_rate: number, seed: number, filtered: boolean): void;
    width(): number;
}

/**
 * Summary scores of a segmentation over every frame of a scene.
 */
export class Scores {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    all_ari: number;
    fg_ari: number;
    jaccard_bg: number;
    jaccard_fg: number;
    skipped_fg_frames: number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly __wbg_get_scores_all_ari: (a: number) => number;
    readonly __wbg_get_scores_fg_ari: (a: number) => number;
    readonly __wbg_get_scores_jaccard_bg: (a: number) => number;
    readonly __wbg_get_scores_jaccard_fg: (a: number) => number;
    readonly __wbg_get_scores_skipped_fg_frames: (a: number) => number;
    readonly __wbg_scores_free: (a: number, b: number) => void;
    readonly __wbg_set_scores_all_ari: (a: number, b: number) => void;
    readonly __wbg_set_scores_fg_ari: (a: number, b: number) => void;
    readonly __wbg_set_scores_jaccard_bg: (a: number, b: number) => void;
    readonly __wbg_set_scores_jaccard_fg: (a: number, b: number) => void;
    readonly __wbg_set_scores_skipped_fg_frames: (a: number, b: number) => void;
    readonly demo_frame_rgba: (a: number, b: number) => [number, number];
    readonly demo_guidance_count: (a: number, b: number) => number;
    readonly demo_guidance_rgba: (a: number, b: number) => [number, number];
    readonly demo_height: (a: number) => number;
    readonly demo_instances_rgba: (a: number, b: number) => [number, number];
    readonly demo_new: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number];
    readonly demo_num_frames: (a: number) => number;
    readonly demo_score_guidance: (a: number) => [number, number, number];
    readonly demo_set_guidance: (a: number, b: number, c: number, d: number, e: number) => [number, number];
    readonly demo_width: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
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
