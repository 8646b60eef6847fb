/* tslint:disable */
/* eslint-disable */

/**
 * Parses a completion into its four sections, with the relevant and
 * irrelevant partition and citation coverage over `k` documents.
 */
export function parse_completion(completion: string, k: number): string;

/**
 * Ranks the pasted documents with BM25 and renders the top `k` into the
 * chosen prompt family.
 */
export function render_prompt(family: string, question: string, documents: string, k: number): string;

/**
 * Scores a prediction against gold answers, one per line.
 */
export function score_answer(prediction: string, gold: string, task: string): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly parse_completion: (a: number, b: number, c: number) => [number, number];
    readonly render_prompt: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number];
    readonly score_answer: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
