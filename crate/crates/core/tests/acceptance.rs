// Copyright 2026 The ubpf-forge Authors
// SPDX-License-Identifier: Apache-2.0

//! End-to-end acceptance run. Prints one PASS or FAIL line per criterion
//! and exits non-zero if any criterion fails.

mod common;

use common::{check_lifecycle, differential, leaked_immediates, pipeline, random_packet, random_program, random_sequence, rng};
use rand::Rng;
use std::time::Instant;
use ubpf_forge::absdom::{abs_alu, sext, wmask, AbsOp, ScalarAbs, Tnum};
use ubpf_forge::cfg::check_cfg;
use ubpf_forge::engine::ExecOptions;
use ubpf_forge::isa::{parse_asm, MapDef};
use ubpf_forge::runtime::{Engine, LoadOptions, Runtime, XdpAction};
use ubpf_forge::samples::{COUNT_PROTO, DROP_UDP};
use ubpf_forge::verifier::{verify, HelperRegistry, RejectKind, Rejection, SafetyProperty, VerifiedProgram, VerifierConfig};

type Verdict = (bool, String);

fn verify_src(src: &str, config: &VerifierConfig) -> Result<VerifiedProgram, Rejection> {
    let p = parse_asm(src).unwrap_or_else(|e| panic!("{e}\n{src}"));
    let defs: Vec<MapDef> = p.map_refs().iter().map(|m| m.def.expect("inline definitions")).collect();
    let cfg = check_cfg(&p).unwrap_or_else(|e| panic!("{e}\n{src}"));
    verify(&p, &HelperRegistry::standard(), &defs, &cfg, config)
}

// ---- AC1 ----

const W: u32 = 8;

/// Reference semantics at width `W`, written out independently of the
/// engine's ALU.
fn concrete(op: AbsOp, x: u64, y: u64) -> u64 {
    let sh = y % W as u64;
    let r = match op {
        AbsOp::Add => x + y,
        AbsOp::Sub => x.wrapping_sub(y),
        AbsOp::Mul => x * y,
        AbsOp::Div => x.checked_div(y).unwrap_or(0),
        AbsOp::Mod => x.checked_rem(y).unwrap_or(x),
        AbsOp::And => x & y,
        AbsOp::Or => x | y,
        AbsOp::Xor => x ^ y,
        AbsOp::Lsh => x << sh,
        AbsOp::Rsh => x >> sh,
        AbsOp::Arsh => ((x as u8 as i8) >> sh) as u8 as u64,
        AbsOp::Neg => (x as u8).wrapping_neg() as u64,
        AbsOp::Mov => y,
        AbsOp::End(..) => unreachable!("byte swaps are meaningless at 8 bits"),
    };
    r & 0xff
}

fn members(t: &Tnum) -> Vec<u64> {
    (0..256u64).filter(|&x| x & !t.mask == t.value).collect()
}

/// Tightest description of a set of 8-bit results.
struct Hull {
    and: u64,
    or: u64,
    umin: u64,
    umax: u64,
    smin: i64,
    smax: i64,
}

impl Hull {
    fn new() -> Hull {
        Hull { and: 0xff, or: 0, umin: u64::MAX, umax: 0, smin: i64::MAX, smax: i64::MIN }
    }

    fn add(&mut self, z: u64) {
        self.and &= z;
        self.or |= z;
        self.umin = self.umin.min(z);
        self.umax = self.umax.max(z);
        let s = z as u8 as i8 as i64;
        self.smin = self.smin.min(s);
        self.smax = self.smax.max(s);
    }

    fn tnum(&self) -> Tnum {
        Tnum { value: self.and, mask: self.and ^ self.or }
    }

    /// True when `r` admits every value this hull was built from.
    fn within(&self, r: &ScalarAbs) -> bool {
        let known = !r.tnum.mask & 0xff;
        (self.and ^ self.or) & known == 0
            && (self.and ^ r.tnum.value) & known == 0
            && r.umin <= self.umin
            && self.umax <= r.umax
            && r.smin <= self.smin
            && self.smax <= r.smax
    }
}

fn ac1() -> Verdict {
    let all: Vec<Tnum> = (0..256u64)
        .flat_map(|mask| (0..256u64).filter(move |v| v & mask == 0).map(move |value| Tnum { value, mask }))
        .collect();
    // Right operands: every mask, with a random value under each.
    let mut r = rng(1);
    let sample: Vec<Tnum> = (0..256u64)
        .map(|mask| Tnum { value: r.random::<u64>() & 0xff & !mask, mask })
        .collect();
    let left: Vec<(ScalarAbs, Vec<u64>)> = all.iter().map(|t| (ScalarAbs::from_tnum(*t, W), members(t))).collect();
    let right: Vec<(Tnum, ScalarAbs, Vec<u64>)> =
        sample.iter().map(|t| (*t, ScalarAbs::from_tnum(*t, W), members(t))).collect();
    let mut violations = 0u64;
    let mut first = None;
    let mut suboptimal_add = 0u64;
    let mut pairs = 0u64;
    for op in AbsOp::BINARY {
        for ((a, xs), ta) in left.iter().zip(&all) {
            for (tb, b, ys) in &right {
                let res = abs_alu(op, a, b, W);
                let mut hull = Hull::new();
                for &x in xs {
                    for &y in ys {
                        hull.add(concrete(op, x, y));
                    }
                }
                pairs += 1;
                if !hull.within(&res) {
                    violations += 1;
                    first.get_or_insert(format!("{op:?} {a} {b} -> {res}"));
                }
                if op == AbsOp::Add && Tnum::add(*ta, *tb).cast(W) != hull.tnum() {
                    suboptimal_add += 1;
                    first.get_or_insert(format!("add {ta:?} {tb:?} is not the tightest tnum"));
                }
            }
        }
    }
    debug_assert_eq!(wmask(W), 0xff);
    debug_assert_eq!(sext(0x80, W), -128);
    let detail = format!(
        "{} tnums x {} sampled, {} ops, {pairs} pairs, {violations} soundness violations, {suboptimal_add} non-optimal adds{}",
        all.len(),
        sample.len(),
        AbsOp::BINARY.len(),
        first.map(|f| format!(" (first: {f})")).unwrap_or_default()
    );
    (violations == 0 && suboptimal_add == 0 && all.len() == 6561, detail)
}

// ---- AC2 ----

const LOCKS: &str = ".map a array 4 16 1 lock\n";

fn rejected_corpus() -> Vec<(SafetyProperty, RejectKind, String)> {
    vec![
        (
            SafetyProperty::MemorySafety,
            RejectKind::OutOfBounds,
            "ldxdw r2, [r1+0]\nldxb r0, [r2+0]\nexit".into(),
        ),
        (
            SafetyProperty::TypeSafety,
            RejectKind::ArgTypeMismatch,
            ".map m array 4 8 4\nmov64 r1, 0\nmov64 r2, r10\ncall map_lookup_elem\nmov64 r0, 0\nexit".into(),
        ),
        (SafetyProperty::ResourceSafety, RejectKind::ResourceLeak, "call acquire_test_ref\nmov64 r0, 0\nexit".into()),
        (SafetyProperty::InformationLeakSafety, RejectKind::UninitializedStackRead, "ldxdw r0, [r10-8]\nexit".into()),
        (
            SafetyProperty::DataRaceFreedom,
            RejectKind::KernelStateAccess,
            format!("{LOCKS}lddw r1, map_value[a]+0\nstw [r1+0], 1\nmov64 r0, 0\nexit"),
        ),
        (
            SafetyProperty::Termination,
            RejectKind::ComplexityLimitExceeded,
            "mov64 r0, 0\njeq r0, 1, +1\nja -1\nexit".into(),
        ),
        (
            SafetyProperty::DeadlockFreedom,
            RejectKind::SecondLockHeld,
            format!("{LOCKS}lddw r1, map_value[a]+0\ncall spin_lock\nlddw r1, map_value[a]+0\ncall spin_lock\nmov64 r0, 0\nexit"),
        ),
        (SafetyProperty::ExecutionContextInvariants, RejectKind::UninitializedReturn, "exit".into()),
    ]
}

const ITER_LOOP: &str = "\
    mov64 r1, r10
    add64 r1, -8
    mov64 r2, 0
    mov64 r3, 1000000
    call iter_num_new
L:
    mov64 r1, r10
    add64 r1, -8
    call iter_num_next
    jeq r0, 0, done
    ja L
done:
    mov64 r1, r10
    add64 r1, -8
    call iter_num_destroy
    mov64 r0, 0
    exit";

const LOOKUP: &str = ".map m array 4 8 4
    stw [r10-4], 0
    lddw r1, map[m]
    mov64 r2, r10
    add64 r2, -4
    call map_lookup_elem
";

fn accepted_corpus() -> Vec<String> {
    vec![
        DROP_UDP.into(),
        COUNT_PROTO.into(),
        "mov64 r0, 2\nexit".into(),
        format!("{LOOKUP}    jeq r0, 0, out\n    ldxdw r1, [r0+0]\nout:\n    mov64 r0, 0\n    exit"),
        "call acquire_test_ref\nmov64 r1, r0\ncall release_test_ref\nmov64 r0, 0\nexit".into(),
        format!("{LOCKS}lddw r1, map_value[a]+0\ncall spin_lock\nlddw r1, map_value[a]+0\ncall spin_unlock\nmov64 r0, 0\nexit"),
        format!("{LOCKS}lddw r1, map_value[a]+0\nstw [r1+8], 1\nmov64 r0, 0\nexit"),
        "mov64 r1, 3\nL:\nsub64 r1, 1\njne r1, 0, L\nmov64 r0, 0\nexit".into(),
        ITER_LOOP.into(),
        "mov64 r1, 2\ncall f\nexit\n.subprog f\nmov64 r0, r1\nexit".into(),
        "stw [r10-8], 0\nldxw r0, [r10-8]\nexit".into(),
        "mov64 r6, 3\nstxdw [r10-16], r6\nmov64 r6, 99\nldxdw r0, [r10-16]\nexit".into(),
    ]
}

fn ac2() -> Verdict {
    let start = Instant::now();
    let mut problems = Vec::new();
    let rejected = rejected_corpus();
    let properties: std::collections::BTreeSet<String> = rejected.iter().map(|(p, ..)| format!("{p:?}")).collect();
    for (prop, kind, src) in &rejected {
        match verify_src(src, &VerifierConfig::default()) {
            Ok(_) => problems.push(format!("{prop:?} program accepted")),
            Err(r) if r.kind != *kind || r.property != *prop => {
                problems.push(format!("{prop:?} program rejected as {:?}/{:?}", r.property, r.kind))
            }
            Err(_) => {}
        }
    }
    let accepted = accepted_corpus();
    for (k, src) in accepted.iter().enumerate() {
        if let Err(r) = verify_src(src, &VerifierConfig::default()) {
            problems.push(format!("accepted program {k} rejected: {r}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = problems.is_empty() && rejected.len() == 8 && properties.len() == 8 && accepted.len() >= 10 && secs < 10.0;
    (pass, format!("{} rejected, {} accepted, {secs:.2}s {problems:?}", rejected.len(), accepted.len()))
}

// ---- AC3 ----

fn ipv4_frame(proto: u8) -> Vec<u8> {
    let mut f = vec![0u8; 14 + 20 + 8];
    f[0..6].copy_from_slice(&[0xff; 6]);
    f[6..12].copy_from_slice(&[0x02, 0, 0, 0, 0, 1]);
    f[12..14].copy_from_slice(&0x0800u16.to_be_bytes());
    let ip = &mut f[14..34];
    ip[0] = 0x45;
    ip[2..4].copy_from_slice(&28u16.to_be_bytes());
    ip[8] = 64;
    ip[9] = proto;
    ip[12..16].copy_from_slice(&[10, 0, 0, 1]);
    ip[16..20].copy_from_slice(&[10, 0, 0, 2]);
    f
}

fn ac3() -> Verdict {
    let rt = Runtime::new();
    let p = match rt.prog_load_asm(DROP_UDP, &LoadOptions::default()) {
        Ok(p) => p,
        Err(e) => return (false, format!("load failed: {e}")),
    };
    let link = rt.link_create(p, "xdp@eth0").expect("hook is free");
    let cases = [
        ("udp", ipv4_frame(17), XdpAction::Drop),
        ("tcp", ipv4_frame(6), XdpAction::Pass),
        ("runt", ipv4_frame(17)[..20].to_vec(), XdpAction::Pass),
    ];
    let mut matched = 0;
    let mut got = Vec::new();
    for (name, frame, want) in &cases {
        let action = rt.hook_dispatch("xdp@eth0", frame).map(|d| d.action);
        if action.as_ref() == Ok(want) {
            matched += 1;
        }
        got.push(format!("{name}={}", action.map(|a| a.name().to_string()).unwrap_or_else(|e| e.to_string())));
    }
    rt.obj_put(link).expect("link handle");
    rt.obj_put(p).expect("program handle");
    (matched == 3 && rt.objects().is_empty(), format!("{matched}/3 {}", got.join(" ")))
}

// ---- AC4 ----

fn diamonds(n: u32) -> String {
    let mut s = String::from("call get_prandom_u32\nmov64 r6, r0\n");
    for k in 0..n {
        s.push_str(&format!("jset r6, {}, +1\nmov64 r7, {k}\n", 1u32 << k));
    }
    s.push_str("mov64 r0, 0\nexit\n");
    s
}

fn ac4() -> Verdict {
    let src = diamonds(12);
    let with = verify_src(&src, &VerifierConfig::default());
    let without = verify_src(&src, &VerifierConfig { pruning_enabled: false, ..VerifierConfig::default() });
    match (with, without) {
        (Ok(a), Ok(b)) => {
            let (p, f) = (a.stats.states_explored, b.stats.states_explored);
            let pass = p * 10 <= f && f * 2 >= 1 << 12;
            (pass, format!("states explored {p} with pruning, {f} without (2^12 = 4096)"))
        }
        (a, b) => (false, format!("verdicts: pruning {:?}, no pruning {:?}", a.err().map(|r| r.kind), b.err().map(|r| r.kind))),
    }
}

// ---- AC5 ----

fn ac5() -> Verdict {
    const LIMIT: u64 = 1000;
    let config = VerifierConfig { complexity_limit: LIMIT, ..VerifierConfig::default() };
    // The counter is compared after the loop, so no two iterations share
    // a state and the loop never converges.
    let unconverging = ITER_LOOP
        .replace("    call iter_num_new\n", "    call iter_num_new\n    mov64 r6, 0\n")
        .replace("    jeq r0, 0, done\n", "    jeq r0, 0, done\n    add64 r6, 1\n")
        .replace("    mov64 r0, 0\n    exit", "    mov64 r0, 0\n    jgt r6, 7, +1\n    mov64 r0, 1\n    exit");
    let mut out = Vec::new();
    let mut pass = true;
    for (name, src) in [("jmp self", "mov64 r0, 0\njeq r0, 1, +1\nja -1\nexit".to_string()), ("iterator loop", unconverging)] {
        match verify_src(&src, &config) {
            Ok(v) => {
                pass = false;
                out.push(format!("{name} accepted after {} insns", v.stats.insns_processed));
            }
            Err(r) => {
                pass &= r.kind == RejectKind::ComplexityLimitExceeded && r.stats.insns_processed == LIMIT;
                out.push(format!("{name}: {:?} at {}", r.kind, r.stats.insns_processed));
            }
        }
    }
    (pass, format!("limit {LIMIT}: {}", out.join(", ")))
}

// ---- AC6 / AC7 ----

fn ac6_ac7() -> (Verdict, Verdict) {
    let start = Instant::now();
    let mut r = rng(2026);
    let (mut programs, mut generated, mut runs) = (0, 0, 0);
    let mut divergences = Vec::new();
    let mut leaks = Vec::new();
    while programs < 1000 {
        generated += 1;
        let src = random_program(&mut r);
        let Some(p) = pipeline(&src, 0) else { continue };
        programs += 1;
        for _ in 0..10 {
            let packet = random_packet(&mut r);
            runs += 1;
            if let Err(e) = differential(&p, &packet) {
                divergences.push(format!("program {programs} packet {}: {e}", hex::encode(&packet)));
            }
        }
        for img in &p.blinded {
            for v in leaked_immediates(&p.original, img).into_iter().chain(leaked_immediates(&p.transformed.program, img)) {
                leaks.push(format!("program {programs}: {v:#x}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ac6 = (
        divergences.is_empty() && secs < 120.0,
        format!(
            "{programs} verified programs ({generated} generated) x 10 inputs, {runs} runs over 6 paths, {} divergences, {secs:.1}s{}",
            divergences.len(),
            divergences.first().map(|d| format!(" (first: {d})")).unwrap_or_default()
        ),
    );
    let ac7 = (
        leaks.is_empty(),
        format!(
            "{} images at threshold 0, {} immediates above 255 visible{}",
            programs * 3,
            leaks.len(),
            leaks.first().map(|d| format!(" (first: {d})")).unwrap_or_default()
        ),
    );
    (ac6, ac7)
}

// ---- AC8 ----

fn ac8() -> Verdict {
    let mut r = rng(8);
    let mut divergences = 0;
    let mut first = None;
    for n in 0..10_000 {
        let ops = random_sequence(&mut r, 24);
        if let Err(e) = check_lifecycle(&ops) {
            divergences += 1;
            first.get_or_insert(format!("sequence {n}: {e}"));
        }
    }
    (divergences == 0, format!("10000 sequences of 24 ops, {divergences} divergences{}", first.map(|f| format!(" ({f})")).unwrap_or_default()))
}

// ---- AC9 ----

/// Looks up key 1 in a hash map, deletes it while still holding the
/// value pointer, then reads through the stale pointer into r6. The entry
/// holds 1, so r0 is 3 if the read sees stale data and 2 if it is
/// zero-filled.
const STALE_READ: &str = ".map h hash 4 8 4
    stw [r10-4], 1
    stdw [r10-16], 1
    lddw r1, map[h]
    mov64 r2, r10
    add64 r2, -4
    mov64 r3, r10
    add64 r3, -16
    mov64 r4, 0
    call map_update_elem
    lddw r1, map[h]
    mov64 r2, r10
    add64 r2, -4
    call map_lookup_elem
    jeq r0, 0, out
    mov64 r7, r0
    lddw r1, map[h]
    mov64 r2, r10
    add64 r2, -4
    call map_delete_elem
    mov64 r6, 5
    ldxdw r6, [r7+0]
    mov64 r0, r6
    add64 r0, 2
    and64 r0, 3
    exit
out:
    mov64 r0, 0
    exit";

fn ac9() -> Verdict {
    const EXPECTED: u64 = 2;
    let rt = Runtime::new();
    let p = match rt.prog_load_asm(STALE_READ, &LoadOptions::default()) {
        Ok(p) => p,
        Err(e) => return (false, format!("load failed: {e}")),
    };
    let loaded = rt.program(p).expect("live");
    let entries = loaded.image.exception_table().len();
    let mut got = Vec::new();
    let mut pass = entries > 0 && !loaded.transformed.untrusted_loads.is_empty();
    for engine in [Engine::Image, Engine::Interp] {
        match rt.run_program(p, &[], engine, &ExecOptions::default()) {
            Ok(r) => {
                pass &= r.r0 == EXPECTED;
                got.push(format!("{engine:?} r0={}", r.r0));
            }
            Err(e) => {
                pass = false;
                got.push(format!("{engine:?} failed: {e}"));
            }
        }
    }
    (pass, format!("{entries} exception entries, expected r0={EXPECTED}, {}", got.join(", ")))
}

fn main() {
    let mut lines = Vec::new();
    let mut record = |name: &str, (pass, detail): Verdict, start: Instant| {
        let line = format!("{} {name}: {detail} [{:.1}s]", if pass { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64());
        println!("{line}");
        lines.push(pass);
    };
    let t = Instant::now();
    record("AC1 tnum soundness and add optimality", ac1(), t);
    let t = Instant::now();
    record("AC2 safety-property corpus", ac2(), t);
    let t = Instant::now();
    record("AC3 drop-udp end to end", ac3(), t);
    let t = Instant::now();
    record("AC4 pruning effectiveness", ac4(), t);
    let t = Instant::now();
    record("AC5 termination enforcement", ac5(), t);
    let t = Instant::now();
    let (ac6, ac7) = ac6_ac7();
    record("AC6 transform preservation", ac6, t);
    record("AC7 blinding mitigation", ac7, t);
    let t = Instant::now();
    record("AC8 lifecycle model", ac8(), t);
    let t = Instant::now();
    record("AC9 exception-table zero fill", ac9(), t);
    let failed = lines.iter().filter(|p| !**p).count();
    println!("{} of {} criteria passed", lines.len() - failed, lines.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
