/* tslint:disable */
/* eslint-disable */

/**
 * Loads `src`, runs one packet given in hex and reports the XDP action.
 * `engine` is `interp` or `image`.
 */
export function run(src: string, packet_hex: string, engine: string, blind: boolean, seed: number): string;

/**
 * The bundled sample programs as `[name, source]` pairs.
 */
export function samples(): string;

/**
 * One abstract ALU transfer; see `absdom::parse_operand` for operand
 * syntax.
 */
export function tnum_eval(op: string, a: string, b: string, width: number): string;

/**
 * Verifies `src`. `limit` of 0 keeps the default complexity limit.
 */
export function verify_asm(src: string, pruning: boolean, limit: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly run: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number];
    readonly samples: () => [number, number];
    readonly tnum_eval: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number];
    readonly verify_asm: (a: number, b: number, c: number, d: number) => [number, number];
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
