// Copyright 2026 The ubpf-forge Authors
// SPDX-License-Identifier: Apache-2.0

//! Backward propagation of precision marks along an executed trace.

use super::liveness::{RegMask, CALLER_SAVED};
use super::state::{State, TraceEntry};
use crate::isa::{AluOp, Class, Program, SrcKind};
use std::collections::BTreeSet;

const ARGS: RegMask = 0b11_1110;

/// Registers and stack slots whose values must stay exact, per frame.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub(crate) struct Marks {
    pub regs: Vec<RegMask>,
    pub slots: BTreeSet<(usize, usize)>,
}

impl Marks {
    pub fn is_empty(&self) -> bool {
        self.regs.iter().all(|m| *m == 0) && self.slots.is_empty()
    }

    fn frame(&mut self, f: usize) -> &mut RegMask {
        if self.regs.len() <= f {
            self.regs.resize(f + 1, 0);
        }
        &mut self.regs[f]
    }

    pub fn mark_reg(&mut self, f: usize, r: u8) {
        *self.frame(f) |= 1 << r;
    }

    fn has(&mut self, f: usize, r: u8) -> bool {
        *self.frame(f) & (1 << r) != 0
    }

    fn clear(&mut self, f: usize, r: u8) {
        *self.frame(f) &= !(1 << r);
    }
}

/// Rewrites `m` from "needed after `e`" to "needed before `e`".
pub(crate) fn backtrack(p: &Program, e: &TraceEntry, m: &mut Marks) {
    let insn = p.insn(e.insn);
    let f = e.frame;
    let (d, s) = (insn.dst, insn.src);
    let reg_src = insn.src_kind() == SrcKind::Reg;
    match insn.class() {
        Class::Alu32 | Class::Alu64 => {
            if !m.has(f, d) {
                return;
            }
            match insn.alu_op() {
                Some(AluOp::Mov) => {
                    m.clear(f, d);
                    if reg_src {
                        m.mark_reg(f, s);
                    }
                }
                Some(AluOp::Neg) | Some(AluOp::End) => {}
                _ if reg_src => m.mark_reg(f, s),
                _ => {}
            }
        }
        Class::Ld => m.clear(f, d),
        Class::Ldx => {
            if m.has(f, d) {
                m.clear(f, d);
                if let Some(slot) = e.slot {
                    m.slots.insert(slot);
                }
            }
        }
        Class::St | Class::Stx => {
            if let Some(slot) = e.slot {
                if m.slots.remove(&slot) && insn.class() == Class::Stx {
                    m.mark_reg(f, s);
                }
            }
        }
        Class::Jmp | Class::Jmp32 => {
            if insn.is_exit() {
                if f > 0 && m.has(f - 1, 0) {
                    m.clear(f - 1, 0);
                    m.mark_reg(f, 0);
                }
            } else if insn.is_local_call() {
                let callee = m.regs.get(f + 1).copied().unwrap_or(0);
                *m.frame(f) |= callee & ARGS;
                m.regs.truncate(f + 1);
                m.slots.retain(|&(fr, _)| fr <= f);
            } else if insn.is_call() {
                *m.frame(f) &= !CALLER_SAVED;
            } else if insn.is_cond_jump() && reg_src && (m.has(f, d) || m.has(f, s)) {
                m.mark_reg(f, d);
                m.mark_reg(f, s);
            }
        }
    }
}

/// Sets the precise flag on every marked scalar of `st`. Marks on
/// non-scalars are dropped. Returns whether any flag changed.
pub(crate) fn apply(st: &mut State, m: &mut Marks) -> bool {
    let mut changed = false;
    for (f, frame) in st.frames.iter_mut().enumerate() {
        let Some(mask) = m.regs.get_mut(f) else { break };
        for r in 0..10u8 {
            if *mask & (1 << r) == 0 {
                continue;
            }
            let reg = &mut frame.regs[r as usize];
            if reg.is_scalar() {
                changed |= !reg.precise;
                reg.precise = true;
            } else {
                *mask &= !(1 << r);
            }
        }
    }
    let frames = st.frames.len();
    m.regs.truncate(frames);
    m.slots.retain(|&(f, k)| {
        if f >= frames {
            return false;
        }
        match st.frames[f].slots.get_mut(k).and_then(|s| s.spill.as_mut()) {
            Some(sp) if sp.is_scalar() => {
                changed |= !sp.precise;
                sp.precise = true;
                true
            }
            _ => false,
        }
    });
    changed
}
