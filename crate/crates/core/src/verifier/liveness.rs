// Copyright 2026 The ubpf-forge Authors
// SPDX-License-Identifier: Apache-2.0

//! Static register liveness, used to skip dead registers when comparing
//! states for pruning.

use super::helpers::HelperRegistry;
use crate::cfg;
use crate::isa::{AluOp, Class, Program, SrcKind};

pub type RegMask = u16;

pub const CALLER_SAVED: RegMask = 0b11_1111; // r0-r5
pub const CALLEE_SAVED: RegMask = 0b11_1100_0000; // r6-r9
const ARGS: RegMask = 0b11_1110; // r1-r5

fn bit(r: u8) -> RegMask {
    1 << r
}

/// Registers read and written by one instruction.
pub fn uses_defs(p: &Program, helpers: &HelperRegistry, idx: usize) -> (RegMask, RegMask) {
    let insn = p.insn(idx);
    let (d, s) = (insn.dst, insn.src);
    let reg_src = insn.src_kind() == SrcKind::Reg;
    match insn.class() {
        Class::Alu32 | Class::Alu64 => match insn.alu_op() {
            Some(AluOp::Mov) => (if reg_src { bit(s) } else { 0 }, bit(d)),
            Some(AluOp::Neg) | Some(AluOp::End) => (bit(d), bit(d)),
            _ => (bit(d) | if reg_src { bit(s) } else { 0 }, bit(d)),
        },
        Class::Ld => (0, bit(d)),
        Class::Ldx => (bit(s), bit(d)),
        Class::St => (bit(d), 0),
        Class::Stx => (bit(d) | bit(s), 0),
        Class::Jmp | Class::Jmp32 => {
            if insn.is_exit() {
                (bit(0), 0)
            } else if insn.is_helper_call() {
                let n = helpers.get(insn.imm as u32).map_or(5, |h| h.args.len());
                (((1u16 << n) - 1) << 1, CALLER_SAVED)
            } else if insn.is_call() {
                (ARGS, CALLER_SAVED)
            } else if insn.is_cond_jump() {
                (bit(d) | if reg_src { bit(s) } else { 0 }, 0)
            } else {
                (0, 0)
            }
        }
    }
}

/// Per-instruction set of registers live on entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Liveness {
    live_in: Vec<RegMask>,
}

impl Liveness {
    pub fn compute(p: &Program, helpers: &HelperRegistry) -> Liveness {
        let n = p.len();
        let ud: Vec<(RegMask, RegMask)> = (0..n).map(|i| uses_defs(p, helpers, i)).collect();
        let succ: Vec<Vec<usize>> = (0..n).map(|i| cfg::successors(p, i).unwrap_or_default()).collect();
        let mut live_in = vec![0 as RegMask; n];
        let mut changed = true;
        while changed {
            changed = false;
            for i in (0..n).rev() {
                let out = succ[i].iter().fold(0, |acc, &t| acc | live_in[t]);
                let v = ud[i].0 | (out & !ud[i].1);
                if v != live_in[i] {
                    live_in[i] = v;
                    changed = true;
                }
            }
        }
        Liveness { live_in }
    }

    pub fn live_in(&self, idx: usize) -> RegMask {
        self.live_in.get(idx).copied().unwrap_or(0)
    }

    /// Registers of a suspended caller frame that matter after the call at
    /// `callsite` returns.
    pub fn caller_live(&self, callsite: usize) -> RegMask {
        self.live_in(callsite + 1) & CALLEE_SAVED
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::parse_asm;

    fn live(src: &str) -> Liveness {
        Liveness::compute(&parse_asm(src).unwrap(), &HelperRegistry::standard())
    }

    #[test]
    fn overwritten_register_is_dead() {
        let l = live("mov64 r7, 1\nmov64 r7, 2\nmov64 r0, r7\nexit");
        assert_eq!(l.live_in(0) & bit(7), 0);
        assert_eq!(l.live_in(1) & bit(7), 0);
        assert_ne!(l.live_in(2) & bit(7), 0);
        assert_eq!(l.live_in(3), bit(0));
    }

    #[test]
    fn loop_keeps_counter_live() {
        let l = live("mov64 r1, 3\nL: sub64 r1, 1\njne r1, 0, L\nmov64 r0, 0\nexit");
        assert_ne!(l.live_in(1) & bit(1), 0);
        assert_ne!(l.live_in(2) & bit(1), 0);
        assert_eq!(l.live_in(3) & bit(1), 0);
    }

    #[test]
    fn helper_call_uses_only_its_arguments() {
        let l = live("mov64 r1, 1\nmov64 r2, 2\ncall trace_emit\nexit");
        assert_eq!(l.live_in(2), bit(1));
        assert_eq!(l.live_in(1) & bit(2), 0);
    }
}
