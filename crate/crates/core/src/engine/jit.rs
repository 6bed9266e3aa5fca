// Copyright 2026 The ubpf-forge Authors
// SPDX-License-Identifier: Apache-2.0

//! Lowering to an internal op list that mirrors a native JIT: per-function
//! prologue and epilogue, a body mostly one op per instruction, an exception
//! table for loads through untrusted pointers, and read-only finalization.

use super::mem::Memory;
use super::{alu, bounds, endian, ExecError, ExecOptions, ExecResult, MapBackend, Vm, MAX_FRAMES};
use crate::absdom::CmpOp;
use crate::isa::{AluOp, Class, DirectOp, Endian, MemSize, Program, Pseudo, SrcKind, REG_COUNT};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// Scratch register holding blinded constants. Programs cannot name it.
pub const BLIND_REG: u8 = REG_COUNT as u8;

const CALLEE_SAVED: [u8; 5] = [6, 7, 8, 9, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Operand {
    Reg(u8),
    /// Already extended to 64 bits; 32-bit ops use the low half.
    Imm(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum LOp {
    Push(u8),
    Pop(u8),
    /// Allocates the function's stack and points r10 at its top.
    EnterFrame,
    LeaveFrame,
    Ret,
    Alu { op: AluOp, w: u32, dst: u8, src: Operand },
    End { order: Endian, bits: u32, dst: u8 },
    LoadImm { dst: u8, value: u64 },
    MapHandle { dst: u8, map: usize },
    /// Direct address of an array map's storage plus `off`.
    MapAddr { dst: u8, map: usize, off: i32 },
    Load { size: MemSize, dst: u8, base: u8, off: i16 },
    Store { size: MemSize, base: u8, off: i16, src: Operand },
    Jump { target: usize },
    Branch { op: CmpOp, w: u32, dst: u8, src: Operand, target: usize },
    CallHelper { id: u32 },
    CallDirect { op: DirectOp },
    CallLocal { func: usize },
    /// Leaves the body for the epilogue.
    Exit,
}

impl LOp {
    /// Immediates carried by this op.
    pub fn immediates(&self) -> Vec<u64> {
        match *self {
            LOp::Alu { src: Operand::Imm(v), .. }
            | LOp::Store { src: Operand::Imm(v), .. }
            | LOp::Branch { src: Operand::Imm(v), .. }
            | LOp::LoadImm { value: v, .. } => vec![v],
            LOp::MapAddr { off, .. } => vec![off as i64 as u64],
            _ => vec![],
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(BLIND_REG) => write!(f, "rB"),
            Operand::Reg(r) => write!(f, "r{r}"),
            Operand::Imm(v) => write!(f, "{:#x}", v),
        }
    }
}

impl fmt::Display for LOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = |r: u8| Operand::Reg(r);
        match *self {
            LOp::Push(x) => write!(f, "push {}", r(x)),
            LOp::Pop(x) => write!(f, "pop {}", r(x)),
            LOp::EnterFrame => write!(f, "enter_frame"),
            LOp::LeaveFrame => write!(f, "leave_frame"),
            LOp::Ret => write!(f, "ret"),
            LOp::Alu { op, w, dst, src } => write!(f, "{}{w} {}, {src}", op.mnemonic(), r(dst)),
            LOp::End { order, bits, dst } => {
                write!(f, "{}{bits} {}", if order == Endian::Be { "be" } else { "le" }, r(dst))
            }
            LOp::LoadImm { dst, value } => write!(f, "ld_imm {}, {value:#x}", r(dst)),
            LOp::MapHandle { dst, map } => write!(f, "map_handle {}, m{map}", r(dst)),
            LOp::MapAddr { dst, map, off } => write!(f, "map_addr {}, m{map}+{off}", r(dst)),
            LOp::Load { size, dst, base, off } => write!(f, "ldx{} {}, [{}{off:+}]", size.suffix(), r(dst), r(base)),
            LOp::Store { size, base, off, src } => write!(f, "st{} [{}{off:+}], {src}", size.suffix(), r(base)),
            LOp::Jump { target } => write!(f, "jmp @{target}"),
            LOp::Branch { op, w, dst, src, target } => write!(f, "j{op:?}{w} {}, {src}, @{target}", r(dst)),
            LOp::CallHelper { id } => write!(f, "call helper#{id}"),
            LOp::CallDirect { op } => write!(f, "call {}", op.name()),
            LOp::CallLocal { func } => write!(f, "call fn{func}"),
            LOp::Exit => write!(f, "exit"),
        }
    }
}

/// What to do when a covered load faults: zero the destination, go on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ExceptionEntry {
    pub dst: u8,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ImageFunc {
    pub prologue: Vec<LOp>,
    pub body: Vec<LOp>,
    pub epilogue: Vec<LOp>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlindConfig {
    pub seed: u64,
    /// Immediates whose magnitude is at most this stay in the clear.
    pub threshold: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct JitImage {
    funcs: Vec<ImageFunc>,
    /// Keyed by `(function, body index)`.
    exception_table: BTreeMap<(usize, usize), ExceptionEntry>,
    /// Body position of every source instruction.
    insn_map: Vec<(usize, usize)>,
    read_only: bool,
    blinded_sites: usize,
}

impl JitImage {
    pub fn funcs(&self) -> &[ImageFunc] {
        &self.funcs
    }

    pub fn exception_table(&self) -> &BTreeMap<(usize, usize), ExceptionEntry> {
        &self.exception_table
    }

    pub fn insn_position(&self, insn: usize) -> Option<(usize, usize)> {
        self.insn_map.get(insn).copied()
    }

    pub fn is_read_only(&self) -> bool {
        self.read_only
    }

    pub fn blinded_sites(&self) -> usize {
        self.blinded_sites
    }

    /// Total ops across all functions.
    pub fn len(&self) -> usize {
        self.funcs.iter().map(|f| f.prologue.len() + f.body.len() + f.epilogue.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn finalize(&mut self) {
        self.read_only = true;
    }

    pub fn patch(&mut self, func: usize, index: usize, op: LOp) -> Result<(), ExecError> {
        if self.read_only {
            return Err(ExecError::ReadOnlyImage);
        }
        let slot = self
            .funcs
            .get_mut(func)
            .and_then(|f| f.body.get_mut(index))
            .ok_or(ExecError::BadOperand { pc: index, what: "no such op".into() })?;
        *slot = op;
        Ok(())
    }

    pub fn add_exception(&mut self, func: usize, index: usize, e: ExceptionEntry) -> Result<(), ExecError> {
        if self.read_only {
            return Err(ExecError::ReadOnlyImage);
        }
        self.exception_table.insert((func, index), e);
        Ok(())
    }

    /// Every immediate in every function body.
    pub fn body_immediates(&self) -> Vec<u64> {
        self.funcs.iter().flat_map(|f| f.body.iter()).flat_map(LOp::immediates).collect()
    }

    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (k, f) in self.funcs.iter().enumerate() {
            out.push_str(&format!("fn{k}:\n"));
            for op in &f.prologue {
                out.push_str(&format!("  p  {op}\n"));
            }
            for (i, op) in f.body.iter().enumerate() {
                let mark = if self.exception_table.contains_key(&(k, i)) { " ; ex" } else { "" };
                out.push_str(&format!("  {i:<3}{op}{mark}\n"));
            }
            for op in &f.epilogue {
                out.push_str(&format!("  e  {op}\n"));
            }
        }
        out
    }
}

struct Blinder {
    rng: ChaCha8Rng,
    threshold: u64,
    sites: usize,
}

impl Blinder {
    fn wants(&self, v: u64) -> bool {
        (v as i64).unsigned_abs() > self.threshold
    }

    /// Ops that leave `v` in the blinding register.
    fn materialize(&mut self, v: u64, out: &mut Vec<LOp>) {
        let mut k = 0;
        while k == 0 {
            k = self.rng.next_u64();
        }
        self.sites += 1;
        out.push(LOp::LoadImm { dst: BLIND_REG, value: v ^ k });
        out.push(LOp::Alu { op: AluOp::Xor, w: 64, dst: BLIND_REG, src: Operand::Imm(k) });
    }

    fn operand(&mut self, src: Operand, out: &mut Vec<LOp>) -> Operand {
        match src {
            Operand::Imm(v) if self.wants(v) => {
                self.materialize(v, out);
                Operand::Reg(BLIND_REG)
            }
            s => s,
        }
    }
}

/// Body ops for one instruction. Branch targets are instruction indices
/// and are resolved once every instruction's position is known.
fn lower_insn(p: &Program, i: usize, blind: &mut Option<Blinder>) -> Vec<LOp> {
    let insn = *p.insn(i);
    let (d, s) = (insn.dst, insn.src);
    let w = |c: Class| if matches!(c, Class::Alu64 | Class::Jmp) { 64 } else { 32 };
    let src = || match insn.src_kind() {
        SrcKind::Reg => Operand::Reg(s),
        SrcKind::Imm => Operand::Imm(insn.imm as i64 as u64),
    };
    let mut out = Vec::new();
    let mut operand = |o: Operand, out: &mut Vec<LOp>| match blind {
        Some(b) => b.operand(o, out),
        None => o,
    };
    let size = insn.mem_size().unwrap_or(MemSize::DW);
    match insn.class() {
        Class::Alu32 | Class::Alu64 => match insn.alu_op() {
            Some(AluOp::End) => out.push(LOp::End {
                order: insn.byte_order().unwrap_or(Endian::Le),
                bits: insn.imm as u32,
                dst: d,
            }),
            Some(AluOp::Neg) => out.push(LOp::Alu { op: AluOp::Neg, w: w(insn.class()), dst: d, src: Operand::Reg(d) }),
            Some(op) => {
                let src = operand(src(), &mut out);
                out.push(LOp::Alu { op, w: w(insn.class()), dst: d, src });
            }
            None => {}
        },
        Class::Ld => match insn.pseudo() {
            Pseudo::MapRef => out.push(LOp::MapHandle { dst: d, map: insn.imm as usize }),
            Pseudo::MapValue => {
                let off = insn.wide_imm.unwrap_or(0);
                match blind {
                    Some(b) if b.wants(off as i64 as u64) => {
                        b.materialize(off as i64 as u64, &mut out);
                        out.push(LOp::MapAddr { dst: d, map: insn.imm as usize, off: 0 });
                        out.push(LOp::Alu { op: AluOp::Add, w: 64, dst: d, src: Operand::Reg(BLIND_REG) });
                    }
                    _ => out.push(LOp::MapAddr { dst: d, map: insn.imm as usize, off }),
                }
            }
            _ => {
                let v = insn.wide_value();
                match blind {
                    Some(b) if b.wants(v) => {
                        b.materialize(v, &mut out);
                        out.push(LOp::Alu { op: AluOp::Mov, w: 64, dst: d, src: Operand::Reg(BLIND_REG) });
                    }
                    _ => out.push(LOp::LoadImm { dst: d, value: v }),
                }
            }
        },
        Class::Ldx => out.push(LOp::Load { size, dst: d, base: s, off: insn.off }),
        Class::St => {
            let src = operand(Operand::Imm(insn.imm as i64 as u64), &mut out);
            out.push(LOp::Store { size, base: d, off: insn.off, src });
        }
        Class::Stx => out.push(LOp::Store { size, base: d, off: insn.off, src: Operand::Reg(s) }),
        Class::Jmp | Class::Jmp32 => {
            if insn.is_exit() {
                out.push(LOp::Exit);
            } else if insn.is_local_call() {
                let callee = p.jump_target(i).and_then(|t| p.subprogs().iter().position(|sp| sp.start == t));
                out.push(LOp::CallLocal { func: callee.unwrap_or(usize::MAX) });
            } else if insn.is_direct_call() {
                match DirectOp::from_id(insn.imm as u32) {
                    Some(op) => out.push(LOp::CallDirect { op }),
                    None => out.push(LOp::CallHelper { id: u32::MAX }),
                }
            } else if insn.is_call() {
                out.push(LOp::CallHelper { id: insn.imm as u32 });
            } else if insn.is_ja() {
                out.push(LOp::Jump { target: p.jump_target(i).unwrap_or(usize::MAX) });
            } else if let Ok(op) = CmpOp::from_insn(&insn) {
                let src = operand(src(), &mut out);
                let target = p.jump_target(i).unwrap_or(usize::MAX);
                out.push(LOp::Branch { op, w: w(insn.class()), dst: d, src, target });
            }
        }
    }
    out
}

/// Lowers a verified, transformed program. Loads at `untrusted` get
/// exception entries. The returned image is finalized.
pub fn lower(p: &Program, untrusted: &BTreeSet<usize>, blind: Option<BlindConfig>) -> JitImage {
    let mut blinder =
        blind.map(|c| Blinder { rng: ChaCha8Rng::seed_from_u64(c.seed), threshold: c.threshold, sites: 0 });
    // Size estimate: ops per instruction, which fixes every branch target.
    let per_insn: Vec<Vec<LOp>> = (0..p.len()).map(|i| lower_insn(p, i, &mut blinder)).collect();
    let mut insn_map = vec![(0, 0); p.len()];
    let mut funcs = Vec::with_capacity(p.subprogs().len());
    let mut exception_table = BTreeMap::new();
    for (k, sp) in p.subprogs().iter().enumerate() {
        let mut pos = 0;
        for i in sp.start..sp.end() {
            insn_map[i] = (k, pos);
            pos += per_insn[i].len();
        }
        let mut prologue: Vec<LOp> = CALLEE_SAVED.iter().map(|&r| LOp::Push(r)).collect();
        prologue.push(LOp::EnterFrame);
        let mut epilogue = vec![LOp::LeaveFrame];
        epilogue.extend(CALLEE_SAVED.iter().rev().map(|&r| LOp::Pop(r)));
        epilogue.push(LOp::Ret);
        funcs.push(ImageFunc { prologue, body: Vec::with_capacity(pos), epilogue });
    }
    for (i, ops) in per_insn.into_iter().enumerate() {
        let (k, _) = insn_map[i];
        let body = &mut funcs[k].body;
        for mut op in ops {
            match &mut op {
                LOp::Jump { target } | LOp::Branch { target, .. } => {
                    *target = insn_map.get(*target).map_or(usize::MAX, |t| t.1);
                }
                LOp::Load { dst, .. } if untrusted.contains(&i) => {
                    exception_table.insert((k, body.len()), ExceptionEntry { dst: *dst });
                }
                _ => {}
            }
            body.push(op);
        }
    }
    let blinded_sites = blinder.map_or(0, |b| b.sites);
    JitImage { funcs, exception_table, insn_map, read_only: true, blinded_sites }
}

struct Ret {
    func: usize,
    pos: usize,
}

/// Runs a finalized image. A faulting load consults the exception table.
pub fn exec_image(
    img: &JitImage,
    packet: &[u8],
    maps: &mut dyn MapBackend,
    opts: &ExecOptions,
) -> Result<ExecResult, ExecError> {
    if !img.read_only {
        return Err(ExecError::NotFinalized);
    }
    let mut vm = Vm::new(packet, maps, opts);
    let mut r = [0u64; REG_COUNT + 1];
    r[1] = vm.mem.ctx_addr();
    let mut saved: Vec<u64> = Vec::new();
    let mut calls: Vec<Ret> = Vec::new();
    let (mut func, mut pos) = (0usize, 0usize);
    loop {
        vm.tick()?;
        let f = img.funcs.get(func).ok_or(ExecError::BadOperand { pc: pos, what: "no such function".into() })?;
        let (pl, bl) = (f.prologue.len(), f.body.len());
        let op = if pos < pl {
            f.prologue[pos]
        } else if pos < pl + bl {
            f.body[pos - pl]
        } else {
            *f.epilogue.get(pos - pl - bl).ok_or(ExecError::BadOperand { pc: pos, what: "ran off epilogue".into() })?
        };
        let body_idx = pos.wrapping_sub(pl);
        let val = |r: &[u64; REG_COUNT + 1], o: Operand| match o {
            Operand::Reg(x) => r[x as usize],
            Operand::Imm(v) => v,
        };
        let mut next = pos + 1;
        match op {
            LOp::Push(x) => saved.push(r[x as usize]),
            LOp::Pop(x) => r[x as usize] = saved.pop().expect("balanced prologue"),
            LOp::EnterFrame => {
                if vm.mem.depth() >= MAX_FRAMES {
                    return Err(ExecError::CallDepth);
                }
                r[10] = vm.mem.push_stack();
            }
            LOp::LeaveFrame => vm.mem.pop_stack(),
            LOp::Ret => match calls.pop() {
                None => return Ok(vm.finish(r[0])),
                Some(ret) => {
                    func = ret.func;
                    next = ret.pos;
                }
            },
            LOp::Alu { op, w, dst, src } => r[dst as usize] = alu(op, w, r[dst as usize], val(&r, src)),
            LOp::End { order, bits, dst } => r[dst as usize] = endian(order, bits, r[dst as usize]),
            LOp::LoadImm { dst, value } => r[dst as usize] = value,
            LOp::MapHandle { dst, map } => r[dst as usize] = Vm::map_handle(map),
            LOp::MapAddr { dst, map, off } => r[dst as usize] = vm.map_value_addr(body_idx, map, off)?,
            LOp::Load { size, dst, base, off } => {
                let a = r[base as usize].wrapping_add(off as i64 as u64);
                r[dst as usize] = match vm.mem.load(a, size.bytes() as usize) {
                    Ok(v) => v,
                    Err(fault) => match img.exception_table.get(&(func, body_idx)) {
                        Some(e) => {
                            debug_assert_eq!(e.dst, dst);
                            0
                        }
                        None if Memory::is_untrusted(a) => {
                            return Err(ExecError::MissingExceptionEntry { func, index: body_idx })
                        }
                        None => return Err(bounds(body_idx, fault)),
                    },
                };
            }
            LOp::Store { size, base, off, src } => {
                let a = r[base as usize].wrapping_add(off as i64 as u64);
                vm.mem.store(a, size.bytes() as usize, val(&r, src)).map_err(|e| bounds(body_idx, e))?;
            }
            LOp::Jump { target } => next = pl + target,
            LOp::Branch { op, w, dst, src, target } => {
                if op.eval(r[dst as usize], val(&r, src), w) {
                    next = pl + target;
                }
            }
            LOp::CallHelper { id } => {
                r[0] = vm.call_helper(body_idx, id, [r[1], r[2], r[3], r[4], r[5]])?;
            }
            LOp::CallDirect { op } => {
                r[0] = vm.call_direct(body_idx, op, [r[1], r[2], r[3], r[4], r[5]])?;
            }
            LOp::CallLocal { func: callee } => {
                calls.push(Ret { func, pos: pos + 1 });
                func = callee;
                next = 0;
            }
            LOp::Exit => next = pl + bl,
        }
        pos = next;
    }
}
