// Copyright 2026 The ubpf-forge Authors
// SPDX-License-Identifier: Apache-2.0

//! Shared test support: a random program generator, a differential harness
//! over every execution path, and a reference-count model of the runtime.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use ubpf_forge::cfg::check_cfg;
use ubpf_forge::engine::{
    exec_image, interpret, lower, BlindConfig, ExecOptions, JitImage, MapInstance, MapSnapshot, TraceEvent,
};
use ubpf_forge::isa::{parse_asm, MapDef, Program};
use ubpf_forge::runtime::{Handle, LoadOptions, Runtime, RuntimeError};
use ubpf_forge::verifier::{verify, HelperRegistry, VerifiedProgram, VerifierConfig};
use ubpf_forge::xform::{transform, Transformed};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const WORK: [u8; 4] = [6, 7, 8, 9];
const ALU: [&str; 12] = ["add", "sub", "mul", "div", "mod", "or", "and", "xor", "lsh", "rsh", "arsh", "mov"];
const JMP: [&str; 11] = ["jeq", "jne", "jgt", "jge", "jlt", "jle", "jsgt", "jsge", "jslt", "jsle", "jset"];

fn work(r: &mut ChaCha8Rng) -> u8 {
    WORK[r.random_range(0..4)]
}

fn imm(r: &mut ChaCha8Rng) -> i64 {
    match r.random_range(0..4) {
        0 => r.random_range(-16..=16),
        1 => r.random_range(0..=255),
        2 => r.random_range(256..=0xffff),
        _ => r.random::<i32>() as i64,
    }
}

struct Gen<'a> {
    r: &'a mut ChaCha8Rng,
    out: String,
    labels: usize,
    uses_sub: bool,
}

impl Gen<'_> {
    fn line(&mut self, s: impl AsRef<str>) {
        self.out.push_str("    ");
        self.out.push_str(s.as_ref());
        self.out.push('\n');
    }

    fn local(&mut self) -> String {
        self.labels += 1;
        format!("s{}", self.labels)
    }

    /// Stores a key derived from a work register at r10-40 and points r2 at it.
    fn key(&mut self, mask: u32) {
        let k = work(self.r);
        self.line(format!("mov64 r1, r{k}"));
        self.line(format!("and64 r1, {mask}"));
        self.line("stxw [r10-40], r1");
    }

    fn map_args(&mut self, map: &str) {
        self.line(format!("lddw r1, map[{map}]"));
        self.line("mov64 r2, r10");
        self.line("add64 r2, -40");
    }

    fn alu(&mut self) {
        let w = if self.r.random_bool(0.5) { 64 } else { 32 };
        let d = work(self.r);
        match self.r.random_range(0..20) {
            0 => self.line(format!("neg{w} r{d}")),
            1 => {
                let e = if self.r.random_bool(0.5) { "be" } else { "le" };
                let bits = [16, 32, 64][self.r.random_range(0..3)];
                self.line(format!("{e}{bits} r{d}"));
            }
            2 => {
                let v: u64 = self.r.random();
                self.line(format!("lddw r{d}, {v:#x}"));
            }
            _ => {
                let op = ALU[self.r.random_range(0..ALU.len())];
                if self.r.random_bool(0.5) {
                    let s = work(self.r);
                    self.line(format!("{op}{w} r{d}, r{s}"));
                } else {
                    let v = if matches!(op, "lsh" | "rsh" | "arsh") { self.r.random_range(0..w) } else { imm(self.r) };
                    self.line(format!("{op}{w} r{d}, {v}"));
                }
            }
        }
    }

    fn branch(&mut self, target: &str) {
        let op = JMP[self.r.random_range(0..JMP.len())];
        let w = if self.r.random_bool(0.3) { "32" } else { "" };
        let d = work(self.r);
        if self.r.random_bool(0.5) {
            let s = work(self.r);
            self.line(format!("{op}{w} r{d}, r{s}, {target}"));
        } else {
            let v = imm(self.r);
            self.line(format!("{op}{w} r{d}, {v}, {target}"));
        }
    }

    fn block(&mut self, target: &str) {
        match self.r.random_range(0..100) {
            0..=39 => self.alu(),
            40..=57 => self.branch(target),
            58..=62 => {
                // A branch the verifier can decide, leaving dead code behind.
                let d = work(self.r);
                let v = imm(self.r);
                self.line(format!("mov64 r{d}, {v}"));
                self.branch(target);
            }
            63..=70 => {
                let slot = 8 * self.r.random_range(1..=4);
                let (size, bytes) = [("b", 1), ("h", 2), ("w", 4), ("dw", 8)][self.r.random_range(0..4)];
                let off = -(slot as i64) + bytes as i64 * self.r.random_range(0..8 / bytes) as i64;
                let d = work(self.r);
                match self.r.random_range(0..3) {
                    0 => self.line(format!("stx{size} [r10{off}], r{d}")),
                    1 => {
                        let v = imm(self.r);
                        self.line(format!("st{size} [r10{off}], {v}"));
                    }
                    _ => self.line(format!("ldx{size} r{d}, [r10{off}]")),
                }
            }
            71..=75 => {
                // Array counter: lookup, null check, read-modify-write.
                let skip = self.local();
                self.key(15);
                self.map_args("arr");
                self.line("call map_lookup_elem");
                self.line(format!("jeq r0, 0, {skip}"));
                let v = work(self.r);
                self.line("ldxdw r1, [r0+0]");
                self.line(format!("add64 r1, r{v}"));
                self.line("stxdw [r0+0], r1");
                self.out.push_str(&format!("{skip}:\n"));
            }
            76..=80 => {
                let (map, mask, flags) =
                    if self.r.random_bool(0.5) { ("arr", 15, [0, 2][self.r.random_range(0..2)]) } else { ("h", 7, self.r.random_range(0..3)) };
                self.key(mask);
                let v = work(self.r);
                self.line(format!("stxdw [r10-48], r{v}"));
                self.map_args(map);
                self.line("mov64 r3, r10");
                self.line("add64 r3, -48");
                self.line(format!("mov64 r4, {flags}"));
                self.line("call map_update_elem");
                let d = work(self.r);
                self.line(format!("add64 r{d}, r0"));
            }
            81..=84 => {
                let skip = self.local();
                self.key(7);
                self.map_args("h");
                self.line("call map_lookup_elem");
                self.line(format!("jeq r0, 0, {skip}"));
                let d = work(self.r);
                self.line(format!("ldxdw r{d}, [r0+0]"));
                self.out.push_str(&format!("{skip}:\n"));
            }
            85..=88 => {
                // Load through a hash value pointer after deleting its entry.
                let skip = self.local();
                self.key(7);
                self.map_args("h");
                self.line("call map_lookup_elem");
                self.line(format!("jeq r0, 0, {skip}"));
                self.line("stxdw [r10-56], r0");
                self.map_args("h");
                self.line("call map_delete_elem");
                let d = work(self.r);
                self.line(format!("add64 r{d}, r0"));
                self.line("ldxdw r1, [r10-56]");
                let d = work(self.r);
                self.line(format!("ldxdw r{d}, [r1+0]"));
                self.out.push_str(&format!("{skip}:\n"));
            }
            89..=91 => {
                self.key(7);
                self.map_args("h");
                self.line("call map_delete_elem");
                let d = work(self.r);
                self.line(format!("xor64 r{d}, r0"));
            }
            92..=95 => {
                self.uses_sub = true;
                let (a, b, d) = (work(self.r), work(self.r), work(self.r));
                self.line(format!("mov64 r1, r{a}"));
                self.line(format!("mov64 r2, r{b}"));
                self.line("call f");
                self.line(format!("mov64 r{d}, r0"));
            }
            _ => {
                let d = work(self.r);
                self.line(format!("mov64 r1, r{d}"));
                self.line("call trace_emit");
            }
        }
    }
}

/// A random XDP program over scalars, the stack, an array map and a hash
/// map. Every path ends by emitting r6..r9 and returning a mix of them.
pub fn random_program(r: &mut ChaCha8Rng) -> String {
    let blocks = r.random_range(4..24);
    let mut g = Gen { r, out: String::new(), labels: 0, uses_sub: false };
    g.out.push_str(".map arr array 4 8 8\n.map h hash 4 8 4\n");
    for d in WORK {
        let v = imm(g.r);
        g.line(format!("mov64 r{d}, {v}"));
    }
    for k in 1..=4 {
        let v = imm(g.r);
        g.line(format!("stdw [r10-{}], {v}", 8 * k));
    }
    g.line("ldxdw r2, [r1+0]");
    g.line("ldxdw r3, [r1+8]");
    g.line("mov64 r4, r2");
    g.line("add64 r4, 16");
    g.line("jgt r4, r3, b0");
    g.line("ldxdw r6, [r2+0]");
    g.line("ldxw r7, [r2+8]");
    g.line("ldxh r8, [r2+12]");
    g.line("ldxb r9, [r2+15]");
    for k in 0..blocks {
        g.out.push_str(&format!("b{k}:\n"));
        let target = g.r.random_range(k + 1..=blocks);
        g.block(&format!("b{target}"));
    }
    g.out.push_str(&format!("b{blocks}:\n"));
    for d in WORK {
        g.line(format!("mov64 r1, r{d}"));
        g.line("call trace_emit");
    }
    g.line("mov64 r0, r6");
    g.line("xor64 r0, r7");
    g.line("xor64 r0, r8");
    g.line("xor64 r0, r9");
    g.line("and64 r0, 3");
    g.line("exit");
    if g.uses_sub {
        g.out.push_str(".subprog f\n");
        g.line("mov64 r0, r1");
        let op = ALU[g.r.random_range(0..8)];
        g.line(format!("{op}64 r0, r2"));
        let v = imm(g.r);
        g.line(format!("xor64 r0, {v}"));
        g.line("exit");
    }
    g.out
}

pub fn random_packet(r: &mut ChaCha8Rng) -> Vec<u8> {
    let len = [0, 8, 15, 16, 20, 64][r.random_range(0..6)];
    (0..len).map(|_| r.random()).collect()
}

/// A program carried through every load stage.
pub struct Pipeline {
    pub original: Program,
    pub defs: Vec<MapDef>,
    pub verified: VerifiedProgram,
    pub transformed: Transformed,
    pub image: JitImage,
    pub blinded: Vec<JitImage>,
}

pub const BLIND_SEEDS: [u64; 3] = [11, 22, 33];

/// `None` if the program does not assemble or verify.
pub fn pipeline(src: &str, threshold: u64) -> Option<Pipeline> {
    let original = parse_asm(src).ok()?;
    let defs: Vec<MapDef> = original.map_refs().iter().map(|m| m.def.expect("generated maps have definitions")).collect();
    let reg = HelperRegistry::standard();
    let cfg = check_cfg(&original).ok()?;
    let verified = verify(&original, &reg, &defs, &cfg, &VerifierConfig::default()).ok()?;
    let transformed = transform(&original, &verified, &defs, &reg).expect("verified programs transform");
    let t = &transformed;
    let image = lower(&t.program, &t.untrusted_loads, None);
    let blinded = BLIND_SEEDS
        .iter()
        .map(|&seed| lower(&t.program, &t.untrusted_loads, Some(BlindConfig { seed, threshold })))
        .collect();
    Some(Pipeline { original, defs, verified, transformed, image, blinded })
}

/// Everything a run can observe.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub r0: u64,
    pub trace: Vec<TraceEvent>,
    pub packet: Vec<u8>,
    pub maps: Vec<MapSnapshot>,
}

pub enum Path<'a> {
    Interp(&'a Program),
    Image(&'a JitImage),
}

pub fn run(defs: &[MapDef], path: Path<'_>, packet: &[u8]) -> Result<Outcome, String> {
    let mut maps: Vec<MapInstance> = defs.iter().map(|d| MapInstance::new(*d)).collect();
    let opts = ExecOptions::default();
    let r = match path {
        Path::Interp(p) => interpret(p, packet, &mut maps, &opts),
        Path::Image(img) => exec_image(img, packet, &mut maps, &opts),
    }
    .map_err(|e| e.to_string())?;
    Ok(Outcome { r0: r.r0, trace: r.trace, packet: r.packet, maps: maps.iter().map(MapInstance::snapshot).collect() })
}

/// Runs `packet` through every path; `Err` names the first divergence.
pub fn differential(p: &Pipeline, packet: &[u8]) -> Result<Outcome, String> {
    let base = run(&p.defs, Path::Interp(&p.original), packet)?;
    let mut others = vec![
        ("rewritten", run(&p.defs, Path::Interp(&p.transformed.program), packet)),
        ("image", run(&p.defs, Path::Image(&p.image), packet)),
    ];
    for (k, img) in p.blinded.iter().enumerate() {
        others.push((["blinded-1", "blinded-2", "blinded-3"][k], run(&p.defs, Path::Image(img), packet)));
    }
    for (name, o) in others {
        match o {
            Ok(o) if o == base => {}
            Ok(o) => return Err(format!("{name} differs: {o:?} vs {base:?}")),
            Err(e) => return Err(format!("{name} failed: {e}")),
        }
    }
    Ok(base)
}

/// Immediates written in the source program, sign-extended to 64 bits.
pub fn source_immediates(p: &Program) -> BTreeSet<u64> {
    p.insns().iter().filter_map(|i| i.data_immediate()).map(|v| v as u64).collect()
}

/// Source immediates above 255 that appear verbatim in an image body,
/// either whole or as their low 32 bits.
pub fn leaked_immediates(p: &Program, img: &JitImage) -> Vec<u64> {
    let body: BTreeSet<u64> = img.body_immediates().into_iter().collect();
    source_immediates(p)
        .into_iter()
        .filter(|&v| (v as i64).unsigned_abs() > 255)
        .filter(|&v| body.contains(&v) || body.contains(&(v as u32 as u64)) || body.contains(&(v as u32 as i32 as i64 as u64)))
        .collect()
}

// ---- lifecycle model ----

#[derive(Clone, Debug)]
pub enum LifeOp {
    LoadProg,
    LoadWithMap(usize),
    CreateMap,
    Pin(usize, usize),
    Unpin(usize),
    Link(usize, usize),
    Get(usize),
    Put(usize),
}

pub const HOOKS: [&str; 2] = ["xdp@eth0", "xdp@eth1"];
const PATHS: [&str; 3] = ["/a", "/b", "/c"];

const PROG: &str = "mov64 r0, 2\nexit";
const MAP_PROG: &str = ".map m extern\nstw [r10-4], 0\nlddw r1, map[m]\nmov64 r2, r10\nadd64 r2, -4\n\
                        call map_lookup_elem\nmov64 r0, 2\nexit";

/// Counts as a plain reference-count oracle would replay them.
#[derive(Default)]
struct Model {
    refs: BTreeMap<Handle, u32>,
    /// References held through handles, a subset of `refs`.
    user: BTreeMap<Handle, u32>,
    is_map: BTreeSet<Handle>,
    is_prog: BTreeSet<Handle>,
    holds: BTreeMap<Handle, Vec<Handle>>,
    pins: BTreeMap<&'static str, Handle>,
    hooks: BTreeMap<&'static str, Handle>,
}

impl Model {
    fn create(&mut self, h: Handle) {
        self.refs.insert(h, 1);
        self.user.insert(h, 1);
    }

    fn put(&mut self, h: Handle) -> Result<(), String> {
        let mut stack = vec![h];
        while let Some(h) = stack.pop() {
            let n = self.refs.get_mut(&h).ok_or_else(|| format!("model lost {h}"))?;
            *n -= 1;
            if *n == 0 {
                self.refs.remove(&h);
                self.user.remove(&h);
                self.hooks.retain(|_, l| *l != h);
                stack.extend(self.holds.remove(&h).unwrap_or_default());
            }
        }
        Ok(())
    }
}

pub fn random_sequence(r: &mut ChaCha8Rng, len: usize) -> Vec<LifeOp> {
    (0..len)
        .map(|_| {
            let k = r.random_range(0..8);
            match r.random_range(0..8) {
                0 => LifeOp::LoadProg,
                1 => LifeOp::LoadWithMap(k),
                2 => LifeOp::CreateMap,
                3 => LifeOp::Pin(k, r.random_range(0..PATHS.len())),
                4 => LifeOp::Unpin(r.random_range(0..PATHS.len())),
                5 => LifeOp::Link(k, r.random_range(0..HOOKS.len())),
                6 => LifeOp::Get(k),
                _ => LifeOp::Put(k),
            }
        })
        .collect()
}

/// Replays `ops` against a fresh runtime and the model. `Err` describes
/// the first step where liveness or an error outcome differs.
pub fn check_lifecycle(ops: &[LifeOp]) -> Result<(), String> {
    let rt = Runtime::new();
    rt.add_hook(HOOKS[1], ubpf_forge::isa::ProgType::Xdp);
    let mut m = Model::default();
    let mut handles: Vec<Handle> = Vec::new();
    let pick = |handles: &Vec<Handle>, k: usize| handles.get(k % handles.len().max(1)).copied();
    for (step, op) in ops.iter().enumerate() {
        let outcome: Result<(), RuntimeError> = match *op {
            LifeOp::LoadProg => rt.prog_load_asm(PROG, &LoadOptions::default()).map(|h| {
                m.create(h);
                m.is_prog.insert(h);
                handles.push(h);
            }),
            LifeOp::LoadWithMap(k) => {
                let Some(map) = pick(&handles, k) else { continue };
                let mut opts = LoadOptions::default();
                opts.bindings.insert("m".into(), map);
                let expect_ok = m.refs.contains_key(&map) && m.is_map.contains(&map);
                let r = rt.prog_load_asm(MAP_PROG, &opts).map(|h| {
                    m.create(h);
                    m.is_prog.insert(h);
                    *m.refs.get_mut(&map).expect("live") += 1;
                    m.holds.insert(h, vec![map]);
                    handles.push(h);
                });
                if r.is_ok() != expect_ok {
                    return Err(format!("step {step}: load with {map} gave {r:?}"));
                }
                r.or(Ok(()))
            }
            LifeOp::CreateMap => rt.map_create(MapDef::new(ubpf_forge::isa::MapType::Array, 4, 8, 4)).map(|h| {
                m.create(h);
                m.is_map.insert(h);
                handles.push(h);
            }),
            LifeOp::Pin(k, p) => {
                let Some(h) = pick(&handles, k) else { continue };
                let r = rt.pin(h, PATHS[p]);
                let expect = if m.pins.contains_key(PATHS[p]) {
                    Err(RuntimeError::PathExists(PATHS[p].into()))
                } else if !m.refs.contains_key(&h) {
                    Err(RuntimeError::UnknownHandle(h))
                } else {
                    *m.refs.get_mut(&h).expect("live") += 1;
                    m.pins.insert(PATHS[p], h);
                    Ok(())
                };
                if r != expect {
                    return Err(format!("step {step}: pin {h} at {} gave {r:?}, expected {expect:?}", PATHS[p]));
                }
                Ok(())
            }
            LifeOp::Unpin(p) => {
                let r = rt.unpin(PATHS[p]);
                let expect = match m.pins.remove(PATHS[p]) {
                    Some(h) => {
                        m.put(h)?;
                        Ok(())
                    }
                    None => Err(RuntimeError::PathMissing(PATHS[p].into())),
                };
                if r != expect {
                    return Err(format!("step {step}: unpin {} gave {r:?}", PATHS[p]));
                }
                Ok(())
            }
            LifeOp::Link(k, hk) => {
                let Some(h) = pick(&handles, k) else { continue };
                let hook = HOOKS[hk];
                let r = rt.link_create(h, hook);
                let expect_ok = m.refs.contains_key(&h) && m.is_prog.contains(&h) && !m.hooks.contains_key(hook);
                match r {
                    Ok(l) if expect_ok => {
                        m.create(l);
                        *m.refs.get_mut(&h).expect("live") += 1;
                        m.holds.insert(l, vec![h]);
                        m.hooks.insert(hook, l);
                        handles.push(l);
                    }
                    Err(_) if !expect_ok => {}
                    other => return Err(format!("step {step}: link {h} to {hook} gave {other:?}")),
                }
                Ok(())
            }
            LifeOp::Get(k) => {
                let Some(h) = pick(&handles, k) else { continue };
                let r = rt.obj_get(h);
                if r.is_ok() != m.refs.contains_key(&h) {
                    return Err(format!("step {step}: get {h} gave {r:?}"));
                }
                if r.is_ok() {
                    *m.refs.get_mut(&h).expect("live") += 1;
                    *m.user.get_mut(&h).expect("live") += 1;
                }
                Ok(())
            }
            LifeOp::Put(k) => {
                let Some(h) = pick(&handles, k) else { continue };
                let r = rt.obj_put(h);
                let expect = match m.user.get_mut(&h) {
                    None => Err(RuntimeError::UnknownHandle(h)),
                    Some(0) => Err(RuntimeError::NotHeld(h)),
                    Some(n) => {
                        *n -= 1;
                        m.put(h)?;
                        Ok(())
                    }
                };
                if r != expect {
                    return Err(format!("step {step}: put {h} gave {r:?}, expected {expect:?}"));
                }
                Ok(())
            }
        };
        if let Err(e) = outcome {
            return Err(format!("step {step}: {op:?} failed: {e}"));
        }
        for &h in &handles {
            if rt.is_live(h) != m.refs.contains_key(&h) {
                return Err(format!("step {step} ({op:?}): {h} live={} but model says {}", rt.is_live(h), !rt.is_live(h)));
            }
            if let Some(&n) = m.refs.get(&h) {
                if rt.refcount(h) != Some(n) {
                    return Err(format!("step {step} ({op:?}): {h} has {:?} refs, model {n}", rt.refcount(h)));
                }
            }
        }
        for (hook, link) in rt.hooks() {
            let want = m.hooks.get(hook.as_str()).copied();
            if link != want {
                return Err(format!("step {step}: hook {hook} holds {link:?}, model {want:?}"));
            }
        }
    }
    Ok(())
}

/// Writes one summary line for a test report.
pub fn report(out: &mut String, name: &str, pass: bool, detail: impl std::fmt::Display) {
    let _ = writeln!(out, "{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}
