/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const __wbg_get_scores_all_ari: (a: number) => number;
export const __wbg_get_scores_fg_ari: (a: number) => number;
export const __wbg_get_scores_jaccard_bg: (a: number) => number;
export const __wbg_get_scores_jaccard_fg: (a: number) => number;
export const __wbg_get_scores_skipped_fg_frames: (a: number) => number;
export const __wbg_scores_free: (a: number, b: number) => void;
export const __wbg_set_scores_all_ari: (a: number, b: number) => void;
export const __wbg_set_scores_fg_ari: (a: number, b: number) => void;
export const __wbg_set_scores_jaccard_bg: (a: number, b: number) => void;
export const __wbg_set_scores_jaccard_fg: (a: number, b: number) => void;
export const __wbg_set_scores_skipped_fg_frames: (a: number, b: number) => void;
export const demo_frame_rgba: (a: number, b: number) => [number, number];
export const demo_guidance_count: (a: number, b: number) => number;
export const demo_guidance_rgba: (a: number, b: number) => [number, number];
export const demo_height: (a: number) => number;
export const demo_instances_rgba: (a: number, b: number) => [number, number];
export const demo_new: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number];
export const demo_num_frames: (a: number) => number;
export const demo_score_guidance: (a: number) => [number, number, number];
export const demo_set_guidance: (a: number, b: number, c: number, d: number, e: number) => [number, number];
export const demo_width: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
