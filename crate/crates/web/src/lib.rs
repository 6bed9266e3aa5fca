// Copyright 2026 The ubpf-forge Authors
// SPDX-License-Identifier: Apache-2.0

//! Browser bindings. Every export takes plain strings and returns a JSON
//! document; failures come back as `{"error": "..."}` so the page never has
//! to catch exceptions.

use serde_json::{json, Value};
use ubpf_forge::absdom;
use ubpf_forge::cfg::{check_cfg, to_dot};
use ubpf_forge::engine::{BlindConfig, ExecOptions, TraceEvent};
use ubpf_forge::isa::{format_asm, parse_asm};
use ubpf_forge::runtime::{Engine, LoadOptions, Runtime, RuntimeError};
use wasm_bindgen::prelude::wasm_bindgen;

fn error(e: impl ToString) -> Value {
    json!({ "error": e.to_string() })
}

/// Verifies `src`. `limit` of 0 keeps the default complexity limit.
#[wasm_bindgen]
pub fn verify_asm(src: &str, pruning: bool, limit: u32) -> String {
    verify_value(src, pruning, limit).to_string()
}

fn verify_value(src: &str, pruning: bool, limit: u32) -> Value {
    let p = match parse_asm(src) {
        Ok(p) => p,
        Err(e) => return error(e),
    };
    let dot = check_cfg(&p).map(|r| to_dot(&p, &r)).ok();
    let rt = Runtime::new();
    let mut opts = LoadOptions::default();
    opts.verifier.pruning_enabled = pruning;
    if limit > 0 {
        opts.verifier.complexity_limit = limit.into();
    }
    match rt.prog_load(p, &opts) {
        Ok(h) => {
            let loaded = rt.program(h).expect("just loaded");
            let v = &loaded.verified;
            json!({
                "verdict": "accept",
                "log": v.log,
                "stats": v.stats,
                "rewritten": format_asm(&loaded.transformed.program),
                "image": loaded.image.dump(),
                "dot": dot,
            })
        }
        Err(RuntimeError::Rejected(r)) => json!({
            "verdict": "reject",
            "property": r.property.to_string(),
            "kind": r.kind,
            "insn": r.insn,
            "log": r.log,
            "stats": r.stats,
            "dot": dot,
        }),
        Err(e) => error(e),
    }
}

/// Loads `src`, runs one packet given in hex and reports the XDP action.
/// `engine` is `interp` or `image`.
#[wasm_bindgen]
pub fn run(src: &str, packet_hex: &str, engine: &str, blind: bool, seed: u32) -> String {
    run_value(src, packet_hex, engine, blind, seed).unwrap_or_else(|e| e).to_string()
}

fn run_value(src: &str, packet_hex: &str, engine: &str, blind: bool, seed: u32) -> Result<Value, Value> {
    let clean: String = packet_hex.chars().filter(|c| c.is_ascii_hexdigit()).collect();
    let packet = hex::decode(clean).map_err(error)?;
    let engine = match engine {
        "interp" => Engine::Interp,
        "image" => Engine::Image,
        other => return Err(error(format!("unknown engine `{other}`"))),
    };
    let rt = Runtime::new();
    let mut opts = LoadOptions::default();
    opts.verifier.log_level = ubpf_forge::verifier::LogLevel::Quiet;
    opts.blind = blind.then_some(BlindConfig { seed: seed.into(), threshold: 0 });
    let h = rt.prog_load_asm(src, &opts).map_err(error)?;
    let exec = ExecOptions { seed: seed.into(), ..ExecOptions::default() };
    let r = rt.run_program(h, &packet, engine, &exec).map_err(error)?;
    let trace: Vec<String> = r
        .trace
        .iter()
        .map(|t| match t {
            TraceEvent::Value(v) => format!("{v:#x}"),
            TraceEvent::Bytes(b) => hex::encode(b),
        })
        .collect();
    let action = ubpf_forge::runtime::XdpAction::from_r0(r.r0);
    Ok(json!({ "action": action.name(), "r0": r.r0, "steps": r.steps, "trace": trace }))
}

/// One abstract ALU transfer; see `absdom::parse_operand` for operand
/// syntax.
#[wasm_bindgen]
pub fn tnum_eval(op: &str, a: &str, b: &str, width: u32) -> String {
    match absdom::eval(op, a, b, width) {
        Ok(e) => json!({
            "op": e.op,
            "a": e.a.to_string(),
            "b": e.b.to_string(),
            "result": e.result.to_string(),
            "tnum": e.result.tnum.to_string(),
            "pattern": e.pattern,
            "umin": e.result.umin.to_string(),
            "umax": e.result.umax.to_string(),
            "smin": e.result.smin.to_string(),
            "smax": e.result.smax.to_string(),
        })
        .to_string(),
        Err(e) => error(e).to_string(),
    }
}

/// The bundled sample programs as `[name, source]` pairs.
#[wasm_bindgen]
pub fn samples() -> String {
    json!([["drop-udp", ubpf_forge::samples::DROP_UDP], ["count-proto", ubpf_forge::samples::COUNT_PROTO]]).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: String) -> Value {
        serde_json::from_str(&s).unwrap()
    }

    fn udp_frame() -> String {
        let mut f = vec![0u8; 42];
        f[12] = 0x08;
        f[23] = 17;
        hex::encode(f)
    }

    #[test]
    fn verify_reports_both_verdicts() {
        let v = parse(verify_asm(ubpf_forge::samples::DROP_UDP, true, 0));
        assert_eq!(v["verdict"], "accept");
        assert!(v["dot"].as_str().unwrap().starts_with("digraph"));
        let v = parse(verify_asm("ldxdw r0, [r10-8]\nexit", true, 0));
        assert_eq!(v["verdict"], "reject");
        assert_eq!(v["kind"], "UninitializedStackRead");
        assert!(parse(verify_asm("bogus", true, 0))["error"].is_string());
    }

    #[test]
    fn run_drops_udp_on_both_engines() {
        for engine in ["interp", "image"] {
            let v = parse(run(ubpf_forge::samples::DROP_UDP, &udp_frame(), engine, true, 7));
            assert_eq!(v["action"], "DROP", "{v}");
            assert_eq!(v["r0"], 1);
        }
        assert!(parse(run("mov64 r0, 2\nexit", "", "jit", false, 0))["error"].is_string());
    }

    #[test]
    fn tnum_eval_returns_a_pattern() {
        let v = parse(tnum_eval("and", "x", "0xf0", 8));
        assert_eq!(v["pattern"], "xxxx0000");
        assert!(parse(tnum_eval("add", "q", "1", 8))["error"].is_string());
    }

    #[test]
    fn samples_are_listed() {
        assert_eq!(parse(samples()).as_array().unwrap().len(), 2);
    }
}
