// Copyright 2026 The ubpf-forge Authors
// SPDX-License-Identifier: Apache-2.0

//! Transfer functions for single instructions.

use super::error::{violation, RejectKind as K, VResult};
use super::helpers::{ArgKind, Effect, RetKind};
use super::state::{ByteTag, Frame, IterSlot, IterState, LockState, RefEntry, RefKind, RegState, RegType, Slot, State};
use super::Env;
use crate::absdom::{abs_alu, abs_refine_branch, wmask, AbsOp, CmpOp, ScalarAbs, Tnum};
use crate::cfg;
use crate::isa::{AluOp, Class, DirectOp, Instruction, MapDef, MapType, Pseudo, SrcKind, FRAME_REG};

pub(crate) enum Next {
    Continue,
    /// Continue with the current state; the returned one is explored later.
    Fork(State),
    End,
}

/// Largest magnitude a pointer offset may reach.
const MAX_OFF: i64 = 1 << 29;

fn kind_name(r: &RegState) -> &'static str {
    match r.rtype {
        RegType::NotInit => "uninitialized",
        RegType::Scalar => "scalar",
        RegType::PtrToCtx => "ctx",
        RegType::PtrToStack => "fp",
        RegType::PtrToPacket => "pkt",
        RegType::PtrToPacketEnd => "pkt_end",
        RegType::PtrToMapValue => "map_value",
        RegType::PtrToMapValueOrNull => "map_value_or_null",
        RegType::ConstMapPtr => "map_ptr",
    }
}

/// Unknown value of `bytes` bytes, zero-extended.
fn unknown_bytes(bytes: u64) -> ScalarAbs {
    if bytes >= 8 {
        ScalarAbs::unknown()
    } else {
        ScalarAbs::from_urange(0, wmask(bytes as u32 * 8), 64).expect("non-empty range")
    }
}

/// Whether `var + off` is a multiple of `size` for every value of `var`.
fn aligned(var: &ScalarAbs, off: i64, size: u64) -> bool {
    let t = Tnum::add(var.tnum, Tnum::constant(off as u64));
    let low = size - 1;
    t.mask & low == 0 && t.value & low == 0
}

/// Stack slot and byte within it for frame-relative address `addr < 0`.
fn byte_pos(addr: i64) -> (usize, usize) {
    let k = (-addr - 1) / 8;
    (k as usize, (addr + 8 * (k + 1)) as usize)
}

fn refined(st: &mut State, d: u8, s: Option<u8>, (a, b): (ScalarAbs, ScalarAbs), w: u32) -> bool {
    let merge = |old: ScalarAbs, new: ScalarAbs| if w == 32 { old.merge_low32(&new) } else { Some(new) };
    let Some(nd) = merge(st.reg(d).value, a) else { return false };
    st.reg_mut(d).value = nd;
    if let Some(s) = s {
        let Some(ns) = merge(st.reg(s).value, b) else { return false };
        st.reg_mut(s).value = ns;
    }
    true
}

impl<'a> Env<'a> {
    pub(super) fn step(&mut self, st: &mut State) -> VResult<Next> {
        let insn = *self.p.insn(st.insn);
        match insn.class() {
            Class::Alu32 | Class::Alu64 => self.alu(st, &insn).map(|_| self.advance(st)),
            Class::Ld => self.lddw(st, &insn).map(|_| self.advance(st)),
            Class::Ldx => self.load(st, &insn).map(|_| self.advance(st)),
            Class::St | Class::Stx => self.store(st, &insn).map(|_| self.advance(st)),
            Class::Jmp | Class::Jmp32 => {
                if insn.is_exit() {
                    self.exit(st)
                } else if insn.is_helper_call() {
                    self.helper_call(st, insn.imm as u32, None)
                } else if insn.is_direct_call() {
                    let op = DirectOp::from_id(insn.imm as u32)
                        .ok_or_else(|| violation(K::UnknownHelper, format!("unknown direct call {}", insn.imm)))?;
                    self.helper_call(st, op.helper(), Some(op))
                } else if insn.is_local_call() {
                    self.local_call(st)
                } else if insn.is_ja() {
                    st.insn = self.target(st.insn)?;
                    Ok(Next::Continue)
                } else {
                    self.cond_jump(st, &insn)
                }
            }
        }
    }

    fn advance(&self, st: &mut State) -> Next {
        st.insn += 1;
        Next::Continue
    }

    fn target(&self, idx: usize) -> VResult<usize> {
        self.p
            .jump_target(idx)
            .ok_or_else(|| violation(K::UnsupportedInstruction, "jump target outside the program"))
    }

    fn read(&self, st: &State, r: u8) -> VResult<RegState> {
        let reg = *st.reg(r);
        if !reg.is_init() {
            return Err(violation(K::UninitializedRegister, format!("r{r} is read before it is written")));
        }
        Ok(reg)
    }

    fn write(&self, st: &mut State, r: u8, v: RegState) -> VResult<()> {
        if r == FRAME_REG {
            return Err(violation(K::WriteToR10, "r10 is read-only"));
        }
        *st.reg_mut(r) = v;
        Ok(())
    }

    fn map_def(&self, k: usize) -> VResult<&'a MapDef> {
        self.maps.get(k).ok_or_else(|| violation(K::BadMapReference, format!("map {k} is not bound")))
    }

    // ---- ALU ----

    fn alu(&mut self, st: &mut State, insn: &Instruction) -> VResult<()> {
        let op = insn.alu_op().ok_or_else(|| violation(K::UnsupportedInstruction, "unknown ALU op"))?;
        let w = if insn.class() == Class::Alu64 { 64 } else { 32 };
        let d = insn.dst;
        if d == FRAME_REG {
            return Err(violation(K::WriteToR10, "r10 is read-only"));
        }
        // END encodes the byte order in the source bit.
        let reg_src = insn.src_kind() == SrcKind::Reg && op != AluOp::End;
        let src = if reg_src {
            self.read(st, insn.src)?
        } else if w == 64 {
            RegState::const_scalar(insn.imm as i64 as u64)
        } else {
            RegState::const_scalar(insn.imm as u32 as u64)
        };
        let narrow = |v: &ScalarAbs| if w == 32 { v.truncate(64, 32) } else { *v };
        let widen = |v: ScalarAbs| if w == 32 { v.zext(32, 64) } else { v };
        match op {
            AluOp::Mov => {
                if w == 64 {
                    let mut v = src;
                    v.precise = false;
                    return self.write(st, d, v);
                }
                if src.is_pointer() {
                    return Err(violation(K::BadPointerArithmetic, format!("32-bit move of {} pointer", kind_name(&src))));
                }
                self.write(st, d, RegState::scalar(widen(narrow(&src.value))))
            }
            AluOp::Neg | AluOp::End => {
                let dv = self.read(st, d)?;
                if dv.is_pointer() {
                    return Err(violation(K::BadPointerArithmetic, format!("{} on {} pointer", op.mnemonic(), kind_name(&dv))));
                }
                let aop = AbsOp::from_insn(insn).map_err(|e| violation(K::UnsupportedInstruction, e.to_string()))?;
                let r = if op == AluOp::End {
                    abs_alu(aop, &dv.value, &dv.value, 64)
                } else {
                    widen(abs_alu(aop, &narrow(&dv.value), &narrow(&dv.value), w))
                };
                self.write(st, d, RegState::scalar(r))
            }
            _ => {
                let dv = self.read(st, d)?;
                if dv.is_scalar() && src.is_scalar() {
                    let aop = AbsOp::from_insn(insn).map_err(|e| violation(K::UnsupportedInstruction, e.to_string()))?;
                    let r = widen(abs_alu(aop, &narrow(&dv.value), &narrow(&src.value), w));
                    return self.write(st, d, RegState::scalar(r));
                }
                let bad = || {
                    violation(
                        K::BadPointerArithmetic,
                        format!("{}{} {} with {}", op.mnemonic(), w, kind_name(&dv), kind_name(&src)),
                    )
                };
                if w != 64 {
                    return Err(bad());
                }
                let src_reg = reg_src.then_some(insn.src);
                let r = match (dv.is_pointer(), src.is_pointer(), op) {
                    (true, false, AluOp::Add) => self.ptr_add(st, dv, src, src_reg, false)?,
                    (true, false, AluOp::Sub) => self.ptr_add(st, dv, src, src_reg, true)?,
                    (false, true, AluOp::Add) => self.ptr_add(st, src, dv, Some(d), false)?,
                    (true, true, AluOp::Sub) => self.ptr_diff(&dv, &src).ok_or_else(bad)?,
                    _ => return Err(bad()),
                };
                self.write(st, d, r)
            }
        }
    }

    fn ptr_add(&mut self, st: &mut State, ptr: RegState, s: RegState, s_reg: Option<u8>, neg: bool) -> VResult<RegState> {
        let bad = |why: String| violation(K::BadPointerArithmetic, why);
        if !matches!(
            ptr.rtype,
            RegType::PtrToStack | RegType::PtrToMapValue | RegType::PtrToPacket | RegType::PtrToCtx
        ) {
            return Err(bad(format!("arithmetic on {} pointer", kind_name(&ptr))));
        }
        if let Some(r) = s_reg {
            self.mark_precise(st, &[r]);
        }
        let mut out = ptr;
        if let Some(c) = s.value.const_value() {
            let c = if neg { (c as i64).wrapping_neg() } else { c as i64 };
            let off = ptr.off as i128 + c as i128;
            if off.abs() > MAX_OFF as i128 {
                return Err(bad(format!("pointer offset {off} out of range")));
            }
            out.off = off as i64;
            return Ok(out);
        }
        if ptr.rtype == RegType::PtrToCtx {
            return Err(bad("variable offset added to ctx pointer".into()));
        }
        if s.value.smin < -MAX_OFF || s.value.smax > MAX_OFF {
            return Err(bad(format!("unbounded offset {} added to {} pointer", s.value, kind_name(&ptr))));
        }
        let var = abs_alu(if neg { AbsOp::Sub } else { AbsOp::Add }, &ptr.value, &s.value, 64);
        if var.smin < -MAX_OFF || var.smax > MAX_OFF {
            return Err(bad(format!("variable pointer offset {var} out of range")));
        }
        out.value = var;
        if ptr.rtype == RegType::PtrToPacket {
            out.id = self.fresh_id();
            out.range = 0;
        }
        Ok(out)
    }

    fn ptr_diff(&self, a: &RegState, b: &RegState) -> Option<RegState> {
        let same_region = match (a.rtype, b.rtype) {
            (RegType::PtrToStack, RegType::PtrToStack) => a.frame == b.frame,
            (RegType::PtrToMapValue, RegType::PtrToMapValue) => a.map == b.map && a.id == b.id,
            (RegType::PtrToPacket, RegType::PtrToPacket) => true,
            (RegType::PtrToPacketEnd, RegType::PtrToPacket) => return Some(RegState::unknown_scalar()),
            _ => false,
        };
        if !same_region {
            return None;
        }
        match (a.value.const_value(), b.value.const_value()) {
            (Some(x), Some(y)) if a.rtype != RegType::PtrToPacket || a.id == b.id => {
                let v = (a.off + x as i64).wrapping_sub(b.off + y as i64);
                Some(RegState::const_scalar(v as u64))
            }
            _ => Some(RegState::unknown_scalar()),
        }
    }

    fn lddw(&mut self, st: &mut State, insn: &Instruction) -> VResult<()> {
        let v = match insn.pseudo() {
            Pseudo::MapRef => {
                let k = insn.imm as usize;
                self.map_def(k)?;
                RegState { map: k, ..RegState::pointer(RegType::ConstMapPtr, 0) }
            }
            Pseudo::MapValue => {
                let k = insn.imm as usize;
                let def = self.map_def(k)?;
                if def.map_type != MapType::Array {
                    return Err(violation(
                        K::BadMapReference,
                        format!("direct value address of {} map {k}", def.map_type.name()),
                    ));
                }
                RegState { map: k, ..RegState::pointer(RegType::PtrToMapValue, insn.wide_imm.unwrap_or(0) as i64) }
            }
            _ => RegState::const_scalar(insn.wide_value()),
        };
        self.write(st, insn.dst, v)
    }

    // ---- memory ----

    fn deref_error(&self, base: &RegState, r: u8) -> Option<super::error::Violation> {
        Some(match base.rtype {
            RegType::Scalar if base.const_value() == Some(0) => violation(K::NullDeref, format!("r{r} is null")),
            RegType::Scalar => violation(K::ScalarDeref, format!("r{r} is a scalar, not a pointer")),
            RegType::PtrToMapValueOrNull => {
                violation(K::NullDeref, format!("r{r} may be null; compare it with 0 before use"))
            }
            RegType::PtrToPacketEnd | RegType::ConstMapPtr => {
                violation(K::InvalidDeref, format!("r{r} is a {} pointer and cannot be dereferenced", kind_name(base)))
            }
            _ => return None,
        })
    }

    /// Checks a `size`-byte access at `base + off`. Returns the stack frame
    /// and frame-relative address for stack accesses.
    fn check_access(
        &self,
        st: &State,
        base: &RegState,
        r: u8,
        off: i64,
        size: u64,
        write: bool,
    ) -> VResult<Option<(usize, i64)>> {
        if let Some(v) = self.deref_error(base, r) {
            return Err(v);
        }
        match base.rtype {
            RegType::PtrToStack => {
                let Some(var) = base.value.const_value() else {
                    return Err(violation(K::VariableStackAccess, format!("variable offset stack access via r{r}")));
                };
                let addr = base.off as i128 + var as i64 as i128 + off as i128;
                if addr < -(self.config.stack_size as i128) || addr + size as i128 > 0 {
                    return Err(violation(K::OutOfBounds, format!("stack access at fp{addr} size {size}")));
                }
                if base.frame >= st.frames.len() {
                    return Err(violation(K::DanglingStackPointer, format!("r{r} points into a returned frame")));
                }
                Ok(Some((base.frame, addr as i64)))
            }
            RegType::PtrToCtx => {
                if write {
                    return Err(violation(K::CtxWrite, "the context is read-only"));
                }
                let addr = base.off + off;
                if size != 8 || (addr != 0 && addr != 8) {
                    return Err(violation(K::InvalidCtxAccess, format!("ctx access at offset {addr} size {size}")));
                }
                Ok(None)
            }
            RegType::PtrToPacket => {
                let o = base.off + off;
                if base.value.smin < 0 {
                    return Err(violation(K::OutOfBounds, format!("packet pointer r{r} may have a negative offset")));
                }
                if o < 0 || o + size as i64 > base.range as i64 {
                    return Err(violation(
                        K::OutOfBounds,
                        format!("packet access [{o}, {}) outside proven range {}", o + size as i64, base.range),
                    ));
                }
                if !aligned(&base.value, o, size) {
                    return Err(violation(K::MisalignedAccess, format!("packet access at offset {o} size {size}")));
                }
                Ok(None)
            }
            RegType::PtrToMapValue => {
                let def = self.map_def(base.map)?;
                let o = base.off as i128 + off as i128;
                let lo = o + base.value.smin as i128;
                let hi = o + base.value.smax as i128 + size as i128;
                if lo < 0 || hi > def.value_size as i128 {
                    return Err(violation(
                        K::OutOfBounds,
                        format!("map value access [{lo}, {hi}) outside value size {}", def.value_size),
                    ));
                }
                if !aligned(&base.value, o as i64, size) {
                    return Err(violation(K::MisalignedAccess, format!("map value access at offset {o} size {size}")));
                }
                if def.spin_lock && lo < 4 {
                    return Err(violation(
                        K::KernelStateAccess,
                        format!("access to the lock word of map {} outside the lock helpers", base.map),
                    ));
                }
                Ok(None)
            }
            _ => unreachable!("non-pointer handled by deref_error"),
        }
    }

    fn load(&mut self, st: &mut State, insn: &Instruction) -> VResult<()> {
        let size = insn.mem_size().map(|s| s.bytes() as u64).unwrap_or(8);
        let (d, r) = (insn.dst, insn.src);
        if d == FRAME_REG {
            return Err(violation(K::WriteToR10, "r10 is read-only"));
        }
        let base = self.read(st, r)?;
        let off = insn.off as i64;
        let at = self.check_access(st, &base, r, off, size, false)?;
        let v = match base.rtype {
            RegType::PtrToStack => {
                let (f, addr) = at.expect("stack access");
                self.stack_read(st, f, addr, size)?
            }
            RegType::PtrToCtx => {
                if base.off + off == 0 {
                    RegState::pointer(RegType::PtrToPacket, 0)
                } else {
                    RegState::pointer(RegType::PtrToPacketEnd, 0)
                }
            }
            RegType::PtrToMapValue => {
                if self.map_def(base.map)?.map_type == MapType::Hash {
                    self.notes.untrusted_loads.insert(st.insn);
                }
                RegState::scalar(unknown_bytes(size))
            }
            _ => RegState::scalar(unknown_bytes(size)),
        };
        self.write(st, d, v)
    }

    fn stack_read(&mut self, st: &State, f: usize, addr: i64, size: u64) -> VResult<RegState> {
        let frame = &st.frames[f];
        if size == 8 && addr % 8 == 0 {
            let k = byte_pos(addr).0;
            let slot = frame.slot(k);
            self.step_slot = Some((f, k));
            if slot.iter.is_some() {
                return Err(violation(K::IterSlotAccess, format!("direct read of iterator at fp{addr}")));
            }
            if let Some(sp) = slot.spill {
                return Ok(sp);
            }
        }
        let mut all_zero = true;
        let mut bytes = [0u8; 8];
        let mut exact = true;
        for (n, a) in (addr..addr + size as i64).enumerate() {
            let (k, i) = byte_pos(a);
            let slot = frame.slot(k);
            if slot.iter.is_some() {
                return Err(violation(K::IterSlotAccess, format!("direct read of iterator at fp{a}")));
            }
            match slot.bytes[i] {
                ByteTag::Invalid => {
                    return Err(violation(K::UninitializedStackRead, format!("read of uninitialized stack byte fp{a}")))
                }
                ByteTag::Zero => {}
                ByteTag::Misc => {
                    all_zero = false;
                    exact = false;
                }
                ByteTag::Spill => {
                    let sp = slot.spill.expect("spill byte without spilled register");
                    if sp.is_pointer() {
                        return Err(violation(K::PointerLeak, format!("partial read of spilled pointer at fp{a}")));
                    }
                    all_zero = false;
                    match sp.value.const_value() {
                        Some(v) => bytes[n] = v.to_le_bytes()[i],
                        None => exact = false,
                    }
                }
            }
        }
        if all_zero {
            return Ok(RegState::const_scalar(0));
        }
        if exact {
            return Ok(RegState::const_scalar(u64::from_le_bytes(bytes)));
        }
        Ok(RegState::scalar(unknown_bytes(size)))
    }

    fn store(&mut self, st: &mut State, insn: &Instruction) -> VResult<()> {
        let size = insn.mem_size().map(|s| s.bytes() as u64).unwrap_or(8);
        let r = insn.dst;
        let base = self.read(st, r)?;
        let is_reg = insn.class() == Class::Stx;
        let value = if is_reg { self.read(st, insn.src)? } else { RegState::const_scalar(insn.imm as i64 as u64) };
        let at = self.check_access(st, &base, r, insn.off as i64, size, true)?;
        match base.rtype {
            RegType::PtrToStack => {
                let (f, addr) = at.expect("stack access");
                self.stack_write(st, f, addr, size, value)
            }
            RegType::PtrToMapValue => {
                if value.is_pointer() {
                    return Err(violation(K::PointerLeak, format!("{} pointer stored into a map value", kind_name(&value))));
                }
                if self.map_def(base.map)?.map_type == MapType::Hash {
                    return Err(violation(K::UntrustedStore, "store through a hash map value pointer"));
                }
                Ok(())
            }
            _ => {
                if value.is_pointer() {
                    return Err(violation(K::PointerLeak, format!("{} pointer stored into the packet", kind_name(&value))));
                }
                Ok(())
            }
        }
    }

    fn stack_write(&mut self, st: &mut State, f: usize, addr: i64, size: u64, value: RegState) -> VResult<()> {
        let frame = &mut st.frames[f];
        if size == 8 && addr % 8 == 0 {
            let k = byte_pos(addr).0;
            self.step_slot = Some((f, k));
            let slot = frame.slot_mut(k);
            if slot.iter.is_some() {
                return Err(violation(K::IterSlotAccess, format!("direct write to iterator at fp{addr}")));
            }
            *slot = Slot { bytes: [ByteTag::Spill; 8], spill: Some(value), iter: None };
            return Ok(());
        }
        if value.is_pointer() {
            return Err(violation(K::PointerLeak, format!("partial store of a pointer at fp{addr}")));
        }
        let zero = value.value.const_value().is_some_and(|v| v & wmask(size as u32 * 8) == 0);
        for a in addr..addr + size as i64 {
            let (k, i) = byte_pos(a);
            let slot = frame.slot_mut(k);
            if slot.iter.is_some() {
                return Err(violation(K::IterSlotAccess, format!("direct write to iterator at fp{a}")));
            }
            if let Some(sp) = slot.spill {
                if sp.is_pointer() {
                    return Err(violation(K::PointerLeak, format!("partial overwrite of spilled pointer at fp{a}")));
                }
                slot.spill = None;
                for b in slot.bytes.iter_mut() {
                    if *b == ByteTag::Spill {
                        *b = ByteTag::Misc;
                    }
                }
            }
            slot.bytes[i] = if zero { ByteTag::Zero } else { ByteTag::Misc };
        }
        Ok(())
    }

    /// Helper memory argument: `size` bytes readable at `ptr`.
    fn check_region(&mut self, st: &State, ptr: &RegState, r: u8, size: u64) -> VResult<()> {
        if !matches!(ptr.rtype, RegType::PtrToStack | RegType::PtrToPacket | RegType::PtrToMapValue)
            && self.deref_error(ptr, r).is_none()
        {
            return Err(violation(K::ArgTypeMismatch, format!("r{r} must point to memory, got {}", kind_name(ptr))));
        }
        if size == 0 {
            return Ok(());
        }
        if ptr.rtype == RegType::PtrToPacket {
            // Per-byte alignment does not apply to helper memory.
            let o = ptr.off;
            if ptr.value.smin < 0 || o < 0 || o + size as i64 > ptr.range as i64 {
                return Err(violation(
                    K::OutOfBounds,
                    format!("helper reads packet [{o}, {}) outside proven range {}", o + size as i64, ptr.range),
                ));
            }
            return Ok(());
        }
        if ptr.rtype == RegType::PtrToMapValue {
            let def = self.map_def(ptr.map)?;
            let lo = ptr.off as i128 + ptr.value.smin as i128;
            let hi = ptr.off as i128 + ptr.value.smax as i128 + size as i128;
            if lo < 0 || hi > def.value_size as i128 {
                return Err(violation(
                    K::OutOfBounds,
                    format!("helper reads map value [{lo}, {hi}) outside value size {}", def.value_size),
                ));
            }
            if def.spin_lock && lo < 4 {
                return Err(violation(K::KernelStateAccess, "helper memory overlaps the lock word"));
            }
            return Ok(());
        }
        let (f, addr) = self.check_access(st, ptr, r, 0, size, false)?.expect("stack access");
        let frame = &st.frames[f];
        for a in addr..addr + size as i64 {
            let (k, i) = byte_pos(a);
            let slot = frame.slot(k);
            if slot.iter.is_some() {
                return Err(violation(K::IterSlotAccess, format!("iterator at fp{a} passed as memory")));
            }
            match slot.bytes[i] {
                ByteTag::Invalid => {
                    return Err(violation(K::UninitializedStackRead, format!("helper reads uninitialized fp{a}")))
                }
                ByteTag::Spill if slot.spill.is_some_and(|s| s.is_pointer()) => {
                    return Err(violation(K::PointerLeak, format!("spilled pointer at fp{a} passed as memory")))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Stack slot named by an iterator argument.
    fn iter_slot(&self, st: &State, ptr: &RegState, r: u8) -> VResult<(usize, usize)> {
        let bad = || violation(K::ArgTypeMismatch, format!("r{r} must point to an 8-byte aligned stack slot"));
        if ptr.rtype != RegType::PtrToStack {
            return Err(bad());
        }
        let var = ptr.value.const_value().ok_or_else(bad)? as i64;
        let addr = ptr.off + var;
        if addr % 8 != 0 || addr >= 0 || addr < -(self.config.stack_size as i64) || ptr.frame >= st.frames.len() {
            return Err(bad());
        }
        Ok((ptr.frame, byte_pos(addr).0))
    }

    // ---- jumps ----

    fn cond_jump(&mut self, st: &mut State, insn: &Instruction) -> VResult<Next> {
        let idx = st.insn;
        let op = CmpOp::from_insn(insn).map_err(|e| violation(K::UnsupportedInstruction, e.to_string()))?;
        let w = if insn.class() == Class::Jmp32 { 32 } else { 64 };
        let target = self.target(idx)?;
        let d = insn.dst;
        let reg_src = insn.src_kind() == SrcKind::Reg;
        let dv = self.read(st, d)?;
        let sv = if reg_src {
            self.read(st, insn.src)?
        } else if w == 64 {
            RegState::const_scalar(insn.imm as i64 as u64)
        } else {
            RegState::const_scalar(insn.imm as u32 as u64)
        };
        let s = reg_src.then_some(insn.src);

        if s == Some(d) && op != CmpOp::Set {
            let taken = matches!(op, CmpOp::Eq | CmpOp::Ge | CmpOp::Le | CmpOp::Sge | CmpOp::Sle);
            return Ok(self.decided(st, idx, target, taken));
        }
        if dv.is_scalar() && sv.is_scalar() {
            return Ok(self.scalar_branch(st, op, w, d, s, target));
        }
        if dv.is_pointer() != sv.is_pointer() {
            let (ptr, scalar, ptr_reg) = if dv.is_pointer() { (dv, sv, d) } else { (sv, dv, insn.src) };
            if w == 64 && matches!(op, CmpOp::Eq | CmpOp::Ne) && scalar.const_value() == Some(0) {
                if ptr.rtype == RegType::PtrToMapValueOrNull {
                    return Ok(self.null_check(st, idx, target, ptr.id, op == CmpOp::Eq));
                }
                return Ok(self.decided(st, idx, target, op == CmpOp::Ne));
            }
            return Err(violation(
                K::PointerComparison,
                format!("r{ptr_reg} ({}) compared with a scalar", kind_name(&ptr)),
            ));
        }
        // Two pointers.
        let pkt_pair = |a: RegType, b: RegType| a == RegType::PtrToPacket && b == RegType::PtrToPacketEnd;
        if w == 64 && (pkt_pair(dv.rtype, sv.rtype) || pkt_pair(sv.rtype, dv.rtype)) {
            let (pkt, rel) = if dv.rtype == RegType::PtrToPacket { (dv, op) } else { (sv, swap(op)) };
            let o = pkt.off;
            let (on_taken, on_not) = match rel {
                CmpOp::Gt => (None, Some(o)),
                CmpOp::Ge => (None, Some(o + 1)),
                CmpOp::Lt => (Some(o + 1), None),
                CmpOp::Le => (Some(o), None),
                _ => (None, None),
            };
            let mut branch = st.clone();
            for (s, r) in [(&mut branch, on_taken), (&mut *st, on_not)] {
                if let Some(r) = r.filter(|r| *r > 0) {
                    s.for_each_reg(|reg| {
                        if reg.rtype == RegType::PtrToPacket && reg.id == pkt.id {
                            reg.range = reg.range.max(r as u64);
                        }
                    });
                }
            }
            return Ok(self.fork(st, branch, idx, target));
        }
        let comparable = dv.rtype == sv.rtype
            && match dv.rtype {
                RegType::PtrToStack => dv.frame == sv.frame,
                RegType::PtrToMapValue => dv.map == sv.map,
                RegType::PtrToPacket => true,
                _ => false,
            };
        if w == 64 && comparable && op != CmpOp::Set {
            let branch = st.clone();
            return Ok(self.fork(st, branch, idx, target));
        }
        Err(violation(
            K::PointerComparison,
            format!("comparison of {} with {} pointer", kind_name(&dv), kind_name(&sv)),
        ))
    }

    fn decided(&mut self, st: &mut State, idx: usize, target: usize, taken: bool) -> Next {
        self.note_branch(idx, taken, !taken);
        st.insn = if taken { target } else { idx + 1 };
        Next::Continue
    }

    fn fork(&mut self, st: &mut State, mut branch: State, idx: usize, target: usize) -> Next {
        self.note_branch(idx, true, true);
        branch.insn = target;
        st.insn = idx + 1;
        Next::Fork(branch)
    }

    fn scalar_branch(&mut self, st: &mut State, op: CmpOp, w: u32, d: u8, s: Option<u8>, target: usize) -> Next {
        let idx = st.insn;
        let narrow = |v: ScalarAbs| if w == 32 { v.truncate(64, 32) } else { v };
        let a = narrow(st.reg(d).value);
        let (op, b) = match s {
            Some(s) if s == d => (CmpOp::Ne, ScalarAbs::constant(0)),
            Some(s) => (op, narrow(st.reg(s).value)),
            None => {
                let insn = self.p.insn(idx);
                let imm = if w == 64 { insn.imm as i64 as u64 } else { insn.imm as u32 as u64 };
                (op, ScalarAbs::constant_w(imm, w))
            }
        };
        let s = s.filter(|&s| s != d);
        let r = abs_refine_branch(op, &a, &b, w);
        let mut branch = r.taken.map(|_| st.clone());
        let taken_ok = match (&mut branch, r.taken) {
            (Some(b), Some(pair)) => refined(b, d, s, pair, w),
            _ => false,
        };
        let not_ok = match r.not_taken {
            Some(pair) => refined(st, d, s, pair, w),
            None => false,
        };
        match (taken_ok, not_ok) {
            (false, false) => Next::End,
            (true, true) => self.fork(st, branch.expect("taken state"), idx, target),
            (taken, _) => {
                let mut regs = vec![d];
                regs.extend(s);
                if taken {
                    *st = branch.expect("taken state");
                }
                self.mark_precise(st, &regs);
                self.decided(st, idx, target, taken)
            }
        }
    }

    fn null_check(&mut self, st: &mut State, idx: usize, target: usize, id: u32, eq: bool) -> Next {
        let mut branch = st.clone();
        let (null_side, value_side) = if eq { (&mut branch, &mut *st) } else { (&mut *st, &mut branch) };
        null_side.for_each_reg(|r| {
            if r.rtype == RegType::PtrToMapValueOrNull && r.id == id {
                *r = RegState::const_scalar(0);
            }
        });
        value_side.for_each_reg(|r| {
            if r.rtype == RegType::PtrToMapValueOrNull && r.id == id {
                r.rtype = RegType::PtrToMapValue;
            }
        });
        self.fork(st, branch, idx, target)
    }

    // ---- calls ----

    fn helper_call(&mut self, st: &mut State, id: u32, direct: Option<DirectOp>) -> VResult<Next> {
        let idx = st.insn;
        let spec = *self
            .helpers
            .get(id)
            .ok_or_else(|| violation(K::UnknownHelper, format!("unknown helper {id}")))?;
        if st.lock.is_some() && !matches!(spec.effect, Effect::Lock | Effect::Unlock) {
            return Err(violation(K::CallWhileLocked, format!("call to {} while holding a lock", spec.name)));
        }
        let mut map: Option<usize> = None;
        let mut lock_target: Option<(usize, u32)> = None;
        let mut iter_at: Option<(usize, usize)> = None;
        let mut token: Option<u32> = None;
        let mut mem: Option<(RegState, u8)> = None;
        for (k, arg) in spec.args.iter().enumerate() {
            let r = k as u8 + 1;
            let v = self.read(st, r)?;
            let mismatch = |what: &str| {
                violation(K::ArgTypeMismatch, format!("{} arg r{r}: expected {what}, got {}", spec.name, kind_name(&v)))
            };
            match arg {
                ArgKind::ConstMapPtr => {
                    if v.rtype != RegType::ConstMapPtr {
                        return Err(mismatch("map reference"));
                    }
                    let def = self.map_def(v.map)?;
                    if let Some(op) = direct {
                        if DirectOp::for_helper(op.helper(), def.map_type) != Some(op) {
                            return Err(mismatch(&format!("map suitable for {}", op.name())));
                        }
                    }
                    map = Some(v.map);
                    self.note_map_call(idx, v.map);
                }
                ArgKind::MapKey | ArgKind::MapValue => {
                    let def = self.map_def(map.ok_or_else(|| mismatch("map reference first"))?)?;
                    let size = if *arg == ArgKind::MapKey { def.key_size } else { def.value_size };
                    if v.is_scalar() {
                        return Err(mismatch("pointer to memory"));
                    }
                    self.check_region(st, &v, r, size as u64)?;
                }
                ArgKind::Scalar => {
                    if !v.is_scalar() {
                        return Err(mismatch("scalar"));
                    }
                }
                ArgKind::MemPtr => {
                    if v.is_scalar() {
                        return Err(mismatch("pointer to memory"));
                    }
                    mem = Some((v, r));
                }
                ArgKind::MemSize => {
                    if !v.is_scalar() {
                        return Err(mismatch("scalar size"));
                    }
                    self.mark_precise(st, &[r]);
                    if v.value.umax > 1 << 29 {
                        return Err(mismatch("bounded size"));
                    }
                    let (p, pr) = mem.take().ok_or_else(|| mismatch("size after pointer"))?;
                    self.check_region(st, &p, pr, v.value.umax)?;
                }
                ArgKind::SpinLock => {
                    let def = if v.rtype == RegType::PtrToMapValue { Some(self.map_def(v.map)?) } else { None };
                    if !def.is_some_and(|d| d.spin_lock) || v.off != 0 || v.value.const_value() != Some(0) {
                        return Err(mismatch("pointer to the lock word of a lock map"));
                    }
                    lock_target = Some((v.map, v.id));
                }
                ArgKind::IterUninit => {
                    let (f, k) = self.iter_slot(st, &v, r)?;
                    if st.frames[f].slot(k).iter.is_some() {
                        return Err(mismatch("uninitialized iterator slot"));
                    }
                    iter_at = Some((f, k));
                }
                ArgKind::IterActive => {
                    let (f, k) = self.iter_slot(st, &v, r)?;
                    if st.frames[f].slot(k).iter.is_none() {
                        return Err(mismatch("live iterator"));
                    }
                    iter_at = Some((f, k));
                }
                ArgKind::RefToken => {
                    if !v.is_scalar() {
                        return Err(mismatch("reference"));
                    }
                    if v.ref_id != 0 && st.released.contains(&v.ref_id) {
                        return Err(violation(K::DoubleRelease, format!("reference {} released twice", v.ref_id)));
                    }
                    if v.ref_id == 0 || !st.refs.iter().any(|e| e.id == v.ref_id) {
                        return Err(violation(K::ReleaseOfUnownedRef, format!("r{r} does not hold an acquired reference")));
                    }
                    token = Some(v.ref_id);
                }
            }
        }

        let mut r0 = match spec.ret {
            RetKind::Zero => RegState::const_scalar(0),
            RetKind::MapValueOrNull => {
                RegState { map: map.unwrap_or(0), id: self.fresh_id(), ..RegState::pointer(RegType::PtrToMapValueOrNull, 0) }
            }
            RetKind::Srange(lo, hi) => RegState::scalar(ScalarAbs::from_srange(lo, hi, 64).expect("non-empty")),
            RetKind::Urange(lo, hi) => {
                RegState::scalar(ScalarAbs::from_urange(lo, hi, 64).expect("non-empty"))
            }
            RetKind::RefToken | RetKind::IterItem => {
                RegState::scalar(ScalarAbs::from_urange(1, u32::MAX as u64, 64).expect("non-empty"))
            }
        };
        let mut fork = None;
        match spec.effect {
            Effect::None => {}
            Effect::Acquire => {
                let id = self.fresh_id();
                st.refs.push(RefEntry { id, kind: RefKind::TestRef, site: idx });
                r0.ref_id = id;
            }
            Effect::Release => {
                let id = token.expect("checked");
                st.refs.retain(|e| e.id != id);
                st.released.push(id);
            }
            Effect::Lock => {
                let (m, id) = lock_target.expect("checked");
                if let Some(l) = st.lock {
                    return Err(violation(K::SecondLockHeld, format!("lock taken at {} is still held", l.site)));
                }
                st.lock = Some(LockState { map: m, id, site: idx });
            }
            Effect::Unlock => {
                let (m, id) = lock_target.expect("checked");
                match st.lock {
                    None => return Err(violation(K::UnlockWithoutLock, "no lock is held")),
                    Some(l) if l.map != m || l.id != id => {
                        return Err(violation(
                            K::LockRegionMismatch,
                            format!("unlock of map {m} does not match the lock taken at {}", l.site),
                        ))
                    }
                    Some(_) => st.lock = None,
                }
            }
            Effect::IterNew => {
                let (f, k) = iter_at.expect("checked");
                let id = self.fresh_id();
                *st.frames[f].slot_mut(k) = Slot {
                    bytes: [ByteTag::Misc; 8],
                    spill: None,
                    iter: Some(IterSlot { ref_id: id, state: IterState::Active, depth: 0 }),
                };
                st.refs.push(RefEntry { id, kind: RefKind::Iterator, site: idx });
            }
            Effect::IterDestroy => {
                let (f, k) = iter_at.expect("checked");
                let it = st.frames[f].slot(k).iter.expect("checked");
                *st.frames[f].slot_mut(k) = Slot::INVALID;
                st.refs.retain(|e| e.id != it.ref_id);
                st.released.push(it.ref_id);
            }
            Effect::IterNext => {
                let (f, k) = iter_at.expect("checked");
                let it = st.frames[f].slot(k).iter.expect("checked");
                if it.state == IterState::Active {
                    let mut item = st.clone();
                    if let Some(i) = item.frames[f].slot_mut(k).iter.as_mut() {
                        i.depth += 1;
                    }
                    clobber(item.cur_mut(), r0);
                    item.insn = idx + 1;
                    fork = Some(item);
                    if let Some(i) = st.frames[f].slot_mut(k).iter.as_mut() {
                        i.state = IterState::Drained;
                    }
                }
                r0 = RegState::const_scalar(0);
            }
        }
        clobber(st.cur_mut(), r0);
        st.insn = idx + 1;
        Ok(match fork {
            Some(item) => Next::Fork(item),
            None => Next::Continue,
        })
    }

    fn local_call(&mut self, st: &mut State) -> VResult<Next> {
        let idx = st.insn;
        if let Some(l) = st.lock {
            return Err(violation(K::CallWhileLocked, format!("call while holding the lock taken at {}", l.site)));
        }
        let callee = cfg::call_target(self.p, idx).map_err(|e| violation(K::UnsupportedInstruction, e.to_string()))?;
        if st.frames.len() >= self.config.max_call_depth {
            return Err(violation(
                K::CallDepthExceeded,
                format!("call depth would exceed {}", self.config.max_call_depth),
            ));
        }
        let mut frame = Frame::new(st.frames.len(), Some(idx), callee);
        for r in 1..=5 {
            frame.regs[r] = st.cur().regs[r];
        }
        st.frames.push(frame);
        st.insn = self.p.subprogs()[callee].start;
        Ok(Next::Continue)
    }

    fn exit(&mut self, st: &mut State) -> VResult<Next> {
        if let Some(l) = st.lock {
            return Err(violation(K::ExitWhileLocked, format!("lock taken at {} is still held", l.site)));
        }
        let r0 = *st.reg(0);
        if st.depth() > 0 {
            if !r0.is_init() {
                return Err(violation(K::UninitializedReturn, "r0 is not set before returning from a subprog"));
            }
            if r0.is_pointer() {
                return Err(violation(K::NonScalarReturn, format!("subprog returns a {} pointer", kind_name(&r0))));
            }
            let popped = st.frames.pop().expect("callee frame");
            let gone = st.depth() + 1;
            for fr in &st.frames {
                let dangling = fr.regs.iter().chain(fr.slots.iter().filter_map(|s| s.spill.as_ref()));
                if dangling.into_iter().any(|r| r.rtype == RegType::PtrToStack && r.frame >= gone) {
                    return Err(violation(K::DanglingStackPointer, "pointer to the returning frame's stack escapes"));
                }
            }
            let caller = st.cur_mut();
            caller.regs[0] = r0;
            for r in 1..=5 {
                caller.regs[r] = RegState::not_init();
            }
            st.insn = popped.callsite.expect("callee frame has a call site") + 1;
            return Ok(Next::Continue);
        }
        if let Some(e) = st.refs.first() {
            let what = match e.kind {
                RefKind::TestRef => "reference",
                RefKind::Iterator => "iterator",
            };
            return Err(violation(K::ResourceLeak, format!("{what} acquired at {} is not released", e.site)));
        }
        if !r0.is_init() {
            return Err(violation(K::UninitializedReturn, "r0 is not set before exit"));
        }
        if r0.is_pointer() {
            return Err(violation(K::PointerLeak, format!("program returns a {} pointer", kind_name(&r0))));
        }
        self.mark_precise(st, &[0]);
        if r0.value.umax > 3 {
            return Err(violation(K::BadReturnValue, format!("return value {} outside [0, 3]", r0.value)));
        }
        Ok(Next::End)
    }
}

fn swap(op: CmpOp) -> CmpOp {
    match op {
        CmpOp::Gt => CmpOp::Lt,
        CmpOp::Ge => CmpOp::Le,
        CmpOp::Lt => CmpOp::Gt,
        CmpOp::Le => CmpOp::Ge,
        CmpOp::Sgt => CmpOp::Slt,
        CmpOp::Sge => CmpOp::Sle,
        CmpOp::Slt => CmpOp::Sgt,
        CmpOp::Sle => CmpOp::Sge,
        other => other,
    }
}

/// Caller-saved registers after a helper returns.
fn clobber(frame: &mut Frame, r0: RegState) {
    frame.regs[0] = r0;
    for r in 1..=5 {
        frame.regs[r] = RegState::not_init();
    }
}
