// Copyright 2026 The ubpf-forge Authors
// SPDX-License-Identifier: Apache-2.0

use super::*;
use crate::cfg::check_cfg;
use crate::isa::parse_asm;
use crate::samples;

fn verify_with(src: &str, config: &VerifierConfig) -> Result<VerifiedProgram, Rejection> {
    let p = parse_asm(src).unwrap();
    let maps: Vec<MapDef> = p.map_refs().iter().map(|m| m.def.unwrap()).collect();
    let cfg = check_cfg(&p).unwrap();
    verify(&p, &HelperRegistry::standard(), &maps, &cfg, config)
}

fn accept(src: &str) -> VerifiedProgram {
    match verify_with(src, &VerifierConfig::default()) {
        Ok(v) => v,
        Err(r) => panic!("rejected:\n{}", r.log),
    }
}

fn reject(src: &str) -> Rejection {
    match verify_with(src, &VerifierConfig::default()) {
        Ok(v) => panic!("accepted:\n{}", v.log),
        Err(r) => r,
    }
}

const LOOKUP: &str = ".map m array 4 8 4
    stw [r10-4], 0
    lddw r1, map[m]
    mov64 r2, r10
    add64 r2, -4
    call map_lookup_elem
";

#[test]
fn straight_line_program_visits_each_instruction_once() {
    let v = accept("mov64 r0, 0\nexit");
    assert_eq!(v.stats.insns_processed, 2);
    assert_eq!(v.stats.states_explored, 1);
    assert_eq!(v.seen, vec![true, true]);
}

#[test]
fn bare_exit_is_rejected() {
    let r = reject("exit");
    assert_eq!(r.kind, RejectKind::UninitializedReturn);
    assert_eq!(r.property, SafetyProperty::ExecutionContextInvariants);
    assert_eq!(r.insn, 0);
    assert!(r.log.ends_with(&format!("{r}\n")));
}

#[test]
fn sample_programs_are_accepted() {
    accept(samples::DROP_UDP);
    accept(samples::COUNT_PROTO);
}

#[test]
fn drop_udp_reads_packet_only_under_guards() {
    let guard_removed = samples::DROP_UDP.replace("jgt r4, r3, pass        ; IPv4 header", "mov64 r4, 0");
    let r = reject(&guard_removed);
    assert_eq!(r.kind, RejectKind::OutOfBounds);
}

#[test]
fn uninitialized_stack_read_is_an_information_leak() {
    let r = reject("ldxdw r0, [r10-8]\nexit");
    assert_eq!(r.kind, RejectKind::UninitializedStackRead);
    assert_eq!(r.property, SafetyProperty::InformationLeakSafety);
}

#[test]
fn partial_stack_write_leaves_other_bytes_invalid() {
    accept("stw [r10-8], 0\nldxw r0, [r10-8]\nexit");
    let r = reject("stw [r10-8], 0\nldxdw r0, [r10-8]\nexit");
    assert_eq!(r.kind, RejectKind::UninitializedStackRead);
}

#[test]
fn spilled_constant_fills_back_exactly() {
    accept("mov64 r6, 3\nstxdw [r10-16], r6\nmov64 r6, 99\nldxdw r0, [r10-16]\nexit");
    let r = reject("mov64 r6, 4\nstxdw [r10-16], r6\nldxdw r0, [r10-16]\nexit");
    assert_eq!(r.kind, RejectKind::BadReturnValue);
}

#[test]
fn lookup_result_must_be_null_checked() {
    let r = reject(&format!("{LOOKUP}    ldxdw r0, [r0+0]\n    mov64 r0, 0\n    exit"));
    assert_eq!(r.kind, RejectKind::NullDeref);
    assert_eq!(r.insn, 5);
}

#[test]
fn null_check_forks_into_null_and_value() {
    let src = format!("{LOOKUP}    jeq r0, 0, out\n    ldxdw r1, [r0+0]\nout:\n    mov64 r0, 0\n    exit");
    let v = accept(&src);
    assert_eq!(v.stats.states_explored, 2);
    assert_eq!(v.notes.branches[&5], BranchSeen { taken: true, fallthrough: true });
    assert_eq!(v.notes.map_calls[&4], CallSite::One(0));
}

#[test]
fn map_value_access_stops_at_value_size() {
    let ok = format!("{LOOKUP}    jeq r0, 0, out\n    ldxw r1, [r0+4]\nout:\n    mov64 r0, 0\n    exit");
    accept(&ok);
    let oob = ok.replace("ldxw r1, [r0+4]", "ldxw r1, [r0+8]");
    let r = reject(&oob);
    assert_eq!(r.kind, RejectKind::OutOfBounds);
    assert_eq!(r.property, SafetyProperty::MemorySafety);
}

#[test]
fn bounded_variable_packet_offset_is_accepted() {
    let src = "\
    ldxdw r2, [r1+0]
    ldxdw r3, [r1+8]
    mov64 r4, r2
    add64 r4, 1
    jgt r4, r3, out
    ldxb r5, [r2+0]
    and64 r5, 7
    add64 r2, r5
    mov64 r4, r2
    add64 r4, 1
    jgt r4, r3, out
    ldxb r0, [r2+0]
    and64 r0, 3
    exit
out:
    mov64 r0, 2
    exit";
    accept(src);
    let r = reject(&src.replace("and64 r5, 7", "lsh64 r5, 40"));
    assert_eq!(r.kind, RejectKind::BadPointerArithmetic);
    let r = reject(&src.replace("    jgt r4, r3, out\n    ldxb r0", "    ldxb r0"));
    assert_eq!(r.kind, RejectKind::OutOfBounds);
}

#[test]
fn jmp32_compares_the_signed_low_half() {
    // Low half of r7 may be negative even though the 64-bit value is not.
    let v = accept(
        "ldxdw r2, [r1+0]\nldxdw r3, [r1+8]\nmov64 r7, 5\nmov64 r4, r2\nadd64 r4, 4\njgt r4, r3, +1\n\
         ldxw r7, [r2+0]\njslt32 r7, -9, +2\nmov64 r0, 1\nexit\nmov64 r0, 2\nexit",
    );
    assert!(v.seen.iter().all(|&s| s));
    assert_eq!(v.notes.branches[&7], BranchSeen { taken: true, fallthrough: true });
}

#[test]
fn pointer_arithmetic_is_restricted() {
    assert_eq!(reject("mov64 r0, r1\nmul64 r0, 2\nexit").kind, RejectKind::BadPointerArithmetic);
    assert_eq!(reject("mov32 r0, r10\nexit").kind, RejectKind::BadPointerArithmetic);
    assert_eq!(reject("mov64 r0, r10\nexit").kind, RejectKind::PointerLeak);
    accept("mov64 r2, r10\nadd64 r2, -8\nmov64 r0, r10\nsub64 r0, r2\nsub64 r0, 6\nexit");
}

#[test]
fn context_is_read_only() {
    assert_eq!(reject("stdw [r1+0], 0\nmov64 r0, 0\nexit").kind, RejectKind::CtxWrite);
    assert_eq!(reject("ldxw r2, [r1+0]\nmov64 r0, 0\nexit").kind, RejectKind::InvalidCtxAccess);
}

#[test]
fn r10_cannot_be_written() {
    let r = reject("mov64 r10, 0\nmov64 r0, 0\nexit");
    assert_eq!(r.kind, RejectKind::WriteToR10);
}

#[test]
fn references_must_be_released_once() {
    let leak = reject("call acquire_test_ref\nmov64 r0, 0\nexit");
    assert_eq!(leak.kind, RejectKind::ResourceLeak);
    assert_eq!(leak.property, SafetyProperty::ResourceSafety);
    accept("call acquire_test_ref\nmov64 r1, r0\ncall release_test_ref\nmov64 r0, 0\nexit");
    let twice = reject(
        "call acquire_test_ref\nmov64 r6, r0\nmov64 r1, r6\ncall release_test_ref\n\
         mov64 r1, r6\ncall release_test_ref\nmov64 r0, 0\nexit",
    );
    assert_eq!(twice.kind, RejectKind::DoubleRelease);
    let forged = reject("mov64 r1, 1\ncall release_test_ref\nmov64 r0, 0\nexit");
    assert_eq!(forged.kind, RejectKind::ReleaseOfUnownedRef);
}

const LOCKS: &str = ".map a array 4 16 1 lock\n.map b array 4 16 1 lock\n";

#[test]
fn lock_pairs_are_checked() {
    accept(&format!(
        "{LOCKS}lddw r1, map_value[a]+0\ncall spin_lock\nlddw r1, map_value[a]+0\ncall spin_unlock\nmov64 r0, 0\nexit"
    ));
    let aa = reject(&format!(
        "{LOCKS}lddw r1, map_value[a]+0\ncall spin_lock\nlddw r1, map_value[a]+0\ncall spin_lock\nmov64 r0, 0\nexit"
    ));
    assert_eq!(aa.kind, RejectKind::SecondLockHeld);
    assert_eq!(aa.property, SafetyProperty::DeadlockFreedom);
    let ab = reject(&format!(
        "{LOCKS}lddw r1, map_value[a]+0\ncall spin_lock\nlddw r1, map_value[b]+0\ncall spin_unlock\nmov64 r0, 0\nexit"
    ));
    assert_eq!(ab.kind, RejectKind::LockRegionMismatch);
    let held = reject(&format!("{LOCKS}lddw r1, map_value[a]+0\ncall spin_lock\nmov64 r0, 0\nexit"));
    assert_eq!(held.kind, RejectKind::ExitWhileLocked);
}

#[test]
fn lock_word_is_off_limits() {
    let r = reject(&format!("{LOCKS}lddw r1, map_value[a]+0\nstw [r1+0], 1\nmov64 r0, 0\nexit"));
    assert_eq!(r.kind, RejectKind::KernelStateAccess);
    assert_eq!(r.property, SafetyProperty::DataRaceFreedom);
    accept(&format!("{LOCKS}lddw r1, map_value[a]+0\nstw [r1+8], 1\nmov64 r0, 0\nexit"));
}

#[test]
fn bounded_countdown_loop_is_accepted() {
    let v = accept("mov64 r1, 3\nL:\nsub64 r1, 1\njne r1, 0, L\nmov64 r0, 0\nexit");
    // Three iterations of two instructions plus the prologue and the tail.
    assert_eq!(v.stats.insns_processed, 1 + 3 * 2 + 2);
}

#[test]
fn infinite_loop_hits_the_complexity_limit() {
    let config = VerifierConfig { complexity_limit: 1000, ..VerifierConfig::default() };
    let r = verify_with("mov64 r0, 0\njeq r0, 1, +1\nja -1\nexit", &config).unwrap_err();
    assert_eq!(r.kind, RejectKind::ComplexityLimitExceeded);
    assert_eq!(r.property, SafetyProperty::Termination);
    assert_eq!(r.stats.insns_processed, 1000);
}

#[test]
fn iterator_loop_converges() {
    let src = "\
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
    let v = accept(src);
    assert!(v.stats.insns_processed < 40, "{:?}", v.stats);
    assert!(v.stats.pruned >= 1);
    let leak = reject(&src.replace("    call iter_num_destroy\n", ""));
    assert_eq!(leak.kind, RejectKind::ResourceLeak);
}

fn diamonds(n: u32) -> String {
    let mut s = String::from("call get_prandom_u32\nmov64 r6, r0\n");
    for k in 0..n {
        s.push_str(&format!("jset r6, {}, +1\nmov64 r7, {k}\n", 1u32 << k));
    }
    s.push_str("mov64 r0, 0\nexit\n");
    s
}

#[test]
fn pruning_collapses_independent_diamonds() {
    let src = diamonds(8);
    let pruned = accept(&src);
    let config = VerifierConfig { pruning_enabled: false, ..VerifierConfig::default() };
    let full = verify_with(&src, &config).unwrap();
    assert_eq!(full.stats.states_explored, 1 << 8);
    assert_eq!(full.stats.pruned, 0);
    assert!(pruned.stats.states_explored <= 2 * 8 + 1, "{:?}", pruned.stats);
    assert!(pruned.stats.pruned >= 8);
}

#[test]
fn precise_branch_inputs_block_pruning() {
    // r7 decides the final branch, so the two values reaching the join
    // must both be explored.
    let src = "call get_prandom_u32\njset r0, 1, +2\nmov64 r7, 0\nja +1\nmov64 r7, 5\n\
               jgt r7, 3, +2\nmov64 r0, 0\nexit\nmov64 r0, 1\nexit";
    let v = accept(src);
    assert_eq!(v.stats.pruned, 0);
    assert!(v.seen.iter().all(|s| *s));
}

#[test]
fn subprog_call_passes_arguments_and_returns_r0() {
    let src = "mov64 r1, 2\ncall f\nexit\n.subprog f\nmov64 r0, r1\nexit";
    accept(src);
    let r = reject("mov64 r1, 7\ncall f\nexit\n.subprog f\nmov64 r0, r1\nexit");
    assert_eq!(r.kind, RejectKind::BadReturnValue);
    let r = reject("call f\nmov64 r0, 0\nexit\n.subprog f\nmov64 r0, r10\nexit");
    assert_eq!(r.kind, RejectKind::NonScalarReturn);
}

#[test]
fn unknown_helper_is_rejected() {
    let r = reject("call 99\nmov64 r0, 0\nexit");
    assert_eq!(r.kind, RejectKind::UnknownHelper);
}

#[test]
fn helper_arguments_are_typed() {
    let r = reject(".map m array 4 8 4\nmov64 r1, 0\nmov64 r2, r10\ncall map_lookup_elem\nmov64 r0, 0\nexit");
    assert_eq!(r.kind, RejectKind::ArgTypeMismatch);
    assert_eq!(r.property, SafetyProperty::TypeSafety);
}

#[test]
fn hash_values_are_untrusted() {
    let base = ".map h hash 4 8 4
    stw [r10-4], 0
    lddw r1, map[h]
    mov64 r2, r10
    add64 r2, -4
    call map_lookup_elem
    jeq r0, 0, out
    BODY
out:
    mov64 r0, 0
    exit";
    let v = accept(&base.replace("BODY", "ldxdw r1, [r0+0]"));
    assert!(v.notes.untrusted_loads.contains(&6));
    let r = reject(&base.replace("BODY", "stdw [r0+0], 1"));
    assert_eq!(r.kind, RejectKind::UntrustedStore);
}

#[test]
fn log_shows_register_updates() {
    let v = accept("mov64 r0, 1\nexit");
    assert!(v.log.contains("0: mov64 r0, 1 ; r0=1"), "{}", v.log);
    let quiet = VerifierConfig { log_level: LogLevel::Quiet, ..VerifierConfig::default() };
    assert!(verify_with("mov64 r0, 1\nexit", &quiet).unwrap().log.is_empty());
}
