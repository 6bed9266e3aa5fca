// Copyright 2026 The ubpf-forge Authors
// SPDX-License-Identifier: Apache-2.0

//! Scalar abstract domain: a tnum paired with unsigned and signed intervals.
//!
//! Every operation takes an explicit bit width `w` (1..=64). A value of
//! width `w` keeps its tnum and unsigned bounds inside the low `w` bits and
//! its signed bounds inside `[-2^(w-1), 2^(w-1))`. The verifier works at 64
//! bits and evaluates 32-bit instructions by truncating, computing at 32 and
//! zero-extending.

mod tnum;

pub use tnum::{sext, wmask, Tnum};

use crate::isa::{AluOp, Class, Endian, Instruction, JmpOp};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AbsError {
    #[error("opcode {0:#04x} has no abstract transfer function")]
    UnsupportedOp(u8),
    #[error("unknown operation `{0}`")]
    UnknownOp(String),
    #[error("bad operand `{0}`: expected x, an integer, lo..hi, value/mask or a pattern such as 0b1x0x")]
    BadOperand(String),
    #[error("width must be 8, 16, 32 or 64, got {0}")]
    BadWidth(u32),
}

fn smin_w(w: u32) -> i64 {
    if w >= 64 {
        i64::MIN
    } else {
        -(1i64 << (w - 1))
    }
}

fn smax_w(w: u32) -> i64 {
    if w >= 64 {
        i64::MAX
    } else {
        (1i64 << (w - 1)) - 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScalarAbs {
    pub tnum: Tnum,
    pub umin: u64,
    pub umax: u64,
    pub smin: i64,
    pub smax: i64,
}

/// Abstract ALU operation. Shift amounts are taken modulo the width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AbsOp {
    Add,
    Sub,
    Mul,
    Div,
    Mod,
    And,
    Or,
    Xor,
    Lsh,
    Rsh,
    Arsh,
    Neg,
    Mov,
    End(Endian, u32),
}

impl AbsOp {
    pub const BINARY: [AbsOp; 13] = [
        AbsOp::Add,
        AbsOp::Sub,
        AbsOp::Mul,
        AbsOp::Div,
        AbsOp::Mod,
        AbsOp::And,
        AbsOp::Or,
        AbsOp::Xor,
        AbsOp::Lsh,
        AbsOp::Rsh,
        AbsOp::Arsh,
        AbsOp::Neg,
        AbsOp::Mov,
    ];

    pub fn from_insn(insn: &Instruction) -> Result<AbsOp, AbsError> {
        let op = insn.alu_op().ok_or(AbsError::UnsupportedOp(insn.opcode))?;
        Ok(match op {
            AluOp::Add => AbsOp::Add,
            AluOp::Sub => AbsOp::Sub,
            AluOp::Mul => AbsOp::Mul,
            AluOp::Div => AbsOp::Div,
            AluOp::Mod => AbsOp::Mod,
            AluOp::And => AbsOp::And,
            AluOp::Or => AbsOp::Or,
            AluOp::Xor => AbsOp::Xor,
            AluOp::Lsh => AbsOp::Lsh,
            AluOp::Rsh => AbsOp::Rsh,
            AluOp::Arsh => AbsOp::Arsh,
            AluOp::Neg => AbsOp::Neg,
            AluOp::Mov => AbsOp::Mov,
            AluOp::End => AbsOp::End(insn.byte_order().unwrap_or(Endian::Le), insn.imm as u32),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            AbsOp::Add => "add",
            AbsOp::Sub => "sub",
            AbsOp::Mul => "mul",
            AbsOp::Div => "div",
            AbsOp::Mod => "mod",
            AbsOp::And => "and",
            AbsOp::Or => "or",
            AbsOp::Xor => "xor",
            AbsOp::Lsh => "lsh",
            AbsOp::Rsh => "rsh",
            AbsOp::Arsh => "arsh",
            AbsOp::Neg => "neg",
            AbsOp::Mov => "mov",
            AbsOp::End(Endian::Le, _) => "le",
            AbsOp::End(Endian::Be, _) => "be",
        }
    }

    pub fn from_name(s: &str) -> Option<AbsOp> {
        AbsOp::BINARY.into_iter().find(|op| op.name() == s)
    }
}

/// Branch comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize)]
pub enum CmpOp {
    Eq,
    Ne,
    Gt,
    Ge,
    Lt,
    Le,
    Sgt,
    Sge,
    Slt,
    Sle,
    Set,
}

impl CmpOp {
    pub const ALL: [CmpOp; 11] = [
        CmpOp::Eq,
        CmpOp::Ne,
        CmpOp::Gt,
        CmpOp::Ge,
        CmpOp::Lt,
        CmpOp::Le,
        CmpOp::Sgt,
        CmpOp::Sge,
        CmpOp::Slt,
        CmpOp::Sle,
        CmpOp::Set,
    ];

    pub fn from_insn(insn: &Instruction) -> Result<CmpOp, AbsError> {
        let unsupported = AbsError::UnsupportedOp(insn.opcode);
        if !matches!(insn.class(), Class::Jmp | Class::Jmp32) {
            return Err(unsupported);
        }
        Ok(match insn.jmp_op().ok_or(unsupported.clone())? {
            JmpOp::Jeq => CmpOp::Eq,
            JmpOp::Jne => CmpOp::Ne,
            JmpOp::Jgt => CmpOp::Gt,
            JmpOp::Jge => CmpOp::Ge,
            JmpOp::Jlt => CmpOp::Lt,
            JmpOp::Jle => CmpOp::Le,
            JmpOp::Jsgt => CmpOp::Sgt,
            JmpOp::Jsge => CmpOp::Sge,
            JmpOp::Jslt => CmpOp::Slt,
            JmpOp::Jsle => CmpOp::Sle,
            JmpOp::Jset => CmpOp::Set,
            JmpOp::Ja | JmpOp::Call | JmpOp::Exit => return Err(unsupported),
        })
    }

    /// The condition that holds when this one is false.
    pub fn negate(self) -> CmpOp {
        match self {
            CmpOp::Eq => CmpOp::Ne,
            CmpOp::Ne => CmpOp::Eq,
            CmpOp::Gt => CmpOp::Le,
            CmpOp::Ge => CmpOp::Lt,
            CmpOp::Lt => CmpOp::Ge,
            CmpOp::Le => CmpOp::Gt,
            CmpOp::Sgt => CmpOp::Sle,
            CmpOp::Sge => CmpOp::Slt,
            CmpOp::Slt => CmpOp::Sge,
            CmpOp::Sle => CmpOp::Sgt,
            // Not expressible as a CmpOp; callers handle JSET separately.
            CmpOp::Set => CmpOp::Set,
        }
    }

    /// Same relation with operands exchanged.
    fn swap(self) -> CmpOp {
        match self {
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

    /// Concrete evaluation on `w`-bit operands.
    pub fn eval(self, x: u64, y: u64, w: u32) -> bool {
        let (x, y) = (x & wmask(w), y & wmask(w));
        let (sx, sy) = (sext(x, w), sext(y, w));
        match self {
            CmpOp::Eq => x == y,
            CmpOp::Ne => x != y,
            CmpOp::Gt => x > y,
            CmpOp::Ge => x >= y,
            CmpOp::Lt => x < y,
            CmpOp::Le => x <= y,
            CmpOp::Sgt => sx > sy,
            CmpOp::Sge => sx >= sy,
            CmpOp::Slt => sx < sy,
            CmpOp::Sle => sx <= sy,
            CmpOp::Set => x & y != 0,
        }
    }
}

/// Outcome of refining both operands under a branch. `None` marks an
/// infeasible side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Refined {
    pub taken: Option<(ScalarAbs, ScalarAbs)>,
    pub not_taken: Option<(ScalarAbs, ScalarAbs)>,
}

impl ScalarAbs {
    pub fn constant_w(v: u64, w: u32) -> ScalarAbs {
        let v = v & wmask(w);
        ScalarAbs { tnum: Tnum::constant(v), umin: v, umax: v, smin: sext(v, w), smax: sext(v, w) }
    }

    pub fn constant(v: u64) -> ScalarAbs {
        Self::constant_w(v, 64)
    }

    pub fn unknown_w(w: u32) -> ScalarAbs {
        ScalarAbs { tnum: Tnum::unknown(w), umin: 0, umax: wmask(w), smin: smin_w(w), smax: smax_w(w) }
    }

    pub fn unknown() -> ScalarAbs {
        Self::unknown_w(64)
    }

    pub fn from_tnum(t: Tnum, w: u32) -> ScalarAbs {
        let mut a = Self::unknown_w(w);
        a.tnum = t.cast(w);
        a.sync(w).expect("a tnum alone is never empty")
    }

    /// Unsigned range `[lo, hi]`; `None` if empty.
    pub fn from_urange(lo: u64, hi: u64, w: u32) -> Option<ScalarAbs> {
        let mut a = Self::unknown_w(w);
        a.umin = lo;
        a.umax = hi;
        a.sync(w)
    }

    pub fn from_srange(lo: i64, hi: i64, w: u32) -> Option<ScalarAbs> {
        let mut a = Self::unknown_w(w);
        a.smin = lo;
        a.smax = hi;
        a.sync(w)
    }

    pub fn const_value(&self) -> Option<u64> {
        self.tnum.is_const().then_some(self.tnum.value)
    }

    pub fn is_unknown(&self, w: u32) -> bool {
        *self == Self::unknown_w(w)
    }

    pub fn contains_w(&self, x: u64, w: u32) -> bool {
        let x = x & wmask(w);
        let s = sext(x, w);
        self.tnum.contains(x) && self.umin <= x && x <= self.umax && self.smin <= s && s <= self.smax
    }

    pub fn contains(&self, x: u64) -> bool {
        self.contains_w(x, 64)
    }

    /// Every value of `other` is a value of `self`.
    pub fn includes(&self, other: &ScalarAbs) -> bool {
        self.tnum.includes(&other.tnum)
            && self.umin <= other.umin
            && other.umax <= self.umax
            && self.smin <= other.smin
            && other.smax <= self.smax
    }

    /// Mutual tightening of tnum, unsigned and signed bounds until a fixed
    /// point. `None` when the abstraction describes no value.
    pub fn sync(mut self, w: u32) -> Option<ScalarAbs> {
        let m = wmask(w);
        let sign = 1u64 << (w - 1);
        for _ in 0..8 {
            let before = self;
            if self.umin > self.umax || self.smin > self.smax {
                return None;
            }
            self.tnum = Tnum::intersect(self.tnum.cast(w), Tnum::range(self.umin, self.umax))?;
            if (self.smin < 0) == (self.smax < 0) {
                let r = Tnum::range(self.smin as u64 & m, self.smax as u64 & m);
                self.tnum = Tnum::intersect(self.tnum, r)?;
            }
            let t = self.tnum;
            self.umin = self.umin.max(t.value);
            self.umax = self.umax.min(t.value | t.mask);
            self.smin = self.smin.max(sext(t.value | (t.mask & sign), w));
            self.smax = self.smax.min(sext(t.value | (t.mask & !sign & m), w));
            if (self.umin & sign) == (self.umax & sign) {
                self.smin = self.smin.max(sext(self.umin, w));
                self.smax = self.smax.min(sext(self.umax, w));
            }
            if (self.smin < 0) == (self.smax < 0) {
                self.umin = self.umin.max(self.smin as u64 & m);
                self.umax = self.umax.min(self.smax as u64 & m);
            }
            if self.umin > self.umax || self.smin > self.smax {
                return None;
            }
            self.umin = t.next_ge(self.umin, w)?;
            self.umax = t.prev_le(self.umax, w)?;
            if self == before {
                return Some(self);
            }
        }
        Some(self)
    }

    /// Least upper bound. The result is re-synchronised, so it may be
    /// tighter than the plain hull when the joined tnum rules values out.
    pub fn join(&self, other: &ScalarAbs, w: u32) -> ScalarAbs {
        let j = ScalarAbs {
            tnum: Tnum::union(self.tnum, other.tnum),
            umin: self.umin.min(other.umin),
            umax: self.umax.max(other.umax),
            smin: self.smin.min(other.smin),
            smax: self.smax.max(other.smax),
        };
        j.sync(w).unwrap_or(j)
    }

    /// Greatest lower bound; `None` if the two share no value.
    pub fn meet(&self, other: &ScalarAbs, w: u32) -> Option<ScalarAbs> {
        ScalarAbs {
            tnum: Tnum::intersect(self.tnum, other.tnum)?,
            umin: self.umin.max(other.umin),
            umax: self.umax.min(other.umax),
            smin: self.smin.max(other.smin),
            smax: self.smax.min(other.smax),
        }
        .sync(w)
    }

    /// Low `to` bits of a `from`-bit value.
    pub fn truncate(&self, from: u32, to: u32) -> ScalarAbs {
        if to >= from {
            return *self;
        }
        let m = wmask(to);
        let mut r = ScalarAbs::unknown_w(to);
        r.tnum = self.tnum.cast(to);
        if self.umin >> to == self.umax >> to {
            r.umin = self.umin & m;
            r.umax = self.umax & m;
        }
        if self.smin >= smin_w(to) && self.smax <= smax_w(to) {
            r.smin = self.smin;
            r.smax = self.smax;
        }
        r.sync(to).unwrap_or_else(|| ScalarAbs::from_tnum(r.tnum, to))
    }

    /// Zero-extends a `from`-bit value to `to` bits.
    pub fn zext(&self, from: u32, to: u32) -> ScalarAbs {
        if to <= from {
            return *self;
        }
        let r = ScalarAbs {
            tnum: self.tnum,
            umin: self.umin,
            umax: self.umax,
            smin: self.umin as i64,
            smax: self.umax as i64,
        };
        r.sync(to).unwrap_or(r)
    }

    /// Replaces the low 32 bits of a 64-bit value with a refined 32-bit view.
    pub fn merge_low32(&self, low: &ScalarAbs) -> Option<ScalarAbs> {
        let hi_mask = !wmask(32);
        let t = Tnum::new(low.tnum.value, low.tnum.mask | hi_mask);
        let mut r = *self;
        r.tnum = Tnum::intersect(r.tnum, t)?;
        if self.umin >> 32 == self.umax >> 32 {
            let hi = self.umin & hi_mask;
            r.umin = r.umin.max(hi | low.umin);
            r.umax = r.umax.min(hi | low.umax);
        }
        r.sync(64)
    }
}

impl fmt::Display for ScalarAbs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(v) = self.const_value() {
            return write!(f, "{}", v as i64);
        }
        write!(f, "scalar(")?;
        let mut sep = "";
        if self.umin != 0 || self.umax != u64::MAX {
            write!(f, "u=[{}, {}]", self.umin, self.umax)?;
            sep = " ";
        }
        if self.smin != i64::MIN || self.smax != i64::MAX {
            write!(f, "{sep}s=[{}, {}]", self.smin, self.smax)?;
            sep = " ";
        }
        if self.tnum.mask != u64::MAX {
            write!(f, "{sep}t={}", self.tnum)?;
        }
        write!(f, ")")
    }
}

/// Unsigned result range from an exact integer interval, if it does not
/// straddle a multiple of `2^w`.
fn wrap_u(lo: i128, hi: i128, w: u32) -> (u64, u64) {
    let modulus = 1i128 << w;
    if lo.div_euclid(modulus) == hi.div_euclid(modulus) {
        (lo.rem_euclid(modulus) as u64, hi.rem_euclid(modulus) as u64)
    } else {
        (0, wmask(w))
    }
}

fn wrap_s(lo: i128, hi: i128, w: u32) -> (i64, i64) {
    let modulus = 1i128 << w;
    let base = smin_w(w) as i128;
    let (el, eh) = ((lo - base).div_euclid(modulus), (hi - base).div_euclid(modulus));
    if el == eh {
        ((lo - el * modulus) as i64, (hi - el * modulus) as i64)
    } else {
        (smin_w(w), smax_w(w))
    }
}

fn with_tnum(t: Tnum, w: u32) -> ScalarAbs {
    ScalarAbs { tnum: t.cast(w), ..ScalarAbs::unknown_w(w) }
}

fn finish(r: ScalarAbs, w: u32) -> ScalarAbs {
    // A sound transfer over non-empty inputs cannot produce an empty result;
    // fall back to the tnum alone if bounds and tnum ever disagree.
    r.sync(w).unwrap_or_else(|| ScalarAbs::from_tnum(r.tnum, w))
}

fn shift_const(op: AbsOp, a: &ScalarAbs, k: u32, w: u32) -> ScalarAbs {
    let m = wmask(w);
    match op {
        AbsOp::Lsh => {
            let mut r = with_tnum(a.tnum.lshift(k), w);
            if (a.umax as u128) << k <= m as u128 {
                r.umin = a.umin << k;
                r.umax = a.umax << k;
            }
            finish(r, w)
        }
        AbsOp::Rsh => {
            let mut r = with_tnum(a.tnum.rshift(k), w);
            r.umin = a.umin >> k;
            r.umax = a.umax >> k;
            finish(r, w)
        }
        _ => {
            let mut r = with_tnum(a.tnum.arshift(k, w), w);
            r.smin = a.smin >> k;
            r.smax = a.smax >> k;
            finish(r, w)
        }
    }
}

fn shift(op: AbsOp, a: &ScalarAbs, b: &ScalarAbs, w: u32) -> ScalarAbs {
    let amounts: Vec<u32> = if let Some(k) = b.const_value() {
        vec![(k % w as u64) as u32]
    } else if b.umax < w as u64 {
        (b.umin..=b.umax).filter(|&k| b.tnum.contains(k)).map(|k| k as u32).collect()
    } else if w.is_power_of_two() {
        let low = b.tnum.cast(w.trailing_zeros());
        (0..w).filter(|&k| low.contains(k as u64)).collect()
    } else {
        (0..w).collect()
    };
    let mut acc: Option<ScalarAbs> = None;
    for k in amounts {
        let r = shift_const(op, a, k, w);
        acc = Some(match acc {
            None => r,
            Some(prev) => prev.join(&r, w),
        });
    }
    acc.unwrap_or_else(|| ScalarAbs::unknown_w(w))
}

/// Abstract transfer for one ALU operation at width `w`. `b` is ignored by
/// unary operations.
pub fn abs_alu(op: AbsOp, a: &ScalarAbs, b: &ScalarAbs, w: u32) -> ScalarAbs {
    let m = wmask(w);
    match op {
        AbsOp::Mov => *b,
        AbsOp::Neg => abs_alu(AbsOp::Sub, &ScalarAbs::constant_w(0, w), a, w),
        AbsOp::Add => {
            let mut r = with_tnum(Tnum::add(a.tnum, b.tnum), w);
            (r.umin, r.umax) = wrap_u(a.umin as i128 + b.umin as i128, a.umax as i128 + b.umax as i128, w);
            (r.smin, r.smax) = wrap_s(a.smin as i128 + b.smin as i128, a.smax as i128 + b.smax as i128, w);
            finish(r, w)
        }
        AbsOp::Sub => {
            let mut r = with_tnum(Tnum::sub(a.tnum, b.tnum), w);
            (r.umin, r.umax) = wrap_u(a.umin as i128 - b.umax as i128, a.umax as i128 - b.umin as i128, w);
            (r.smin, r.smax) = wrap_s(a.smin as i128 - b.smax as i128, a.smax as i128 - b.smin as i128, w);
            finish(r, w)
        }
        AbsOp::Mul => {
            let mut r = with_tnum(Tnum::mul(a.tnum, b.tnum), w);
            let (lo, hi) = (a.umin as u128 * b.umin as u128, a.umax as u128 * b.umax as u128);
            if hi <= m as u128 {
                r.umin = lo as u64;
                r.umax = hi as u64;
            }
            let corners = [
                a.smin as i128 * b.smin as i128,
                a.smin as i128 * b.smax as i128,
                a.smax as i128 * b.smin as i128,
                a.smax as i128 * b.smax as i128,
            ];
            let (lo, hi) = (*corners.iter().min().unwrap(), *corners.iter().max().unwrap());
            (r.smin, r.smax) = wrap_s(lo, hi, w);
            finish(r, w)
        }
        AbsOp::Div => match b.const_value() {
            Some(0) => ScalarAbs::constant_w(0, w),
            Some(c) => ScalarAbs::from_urange(a.umin / c, a.umax / c, w).unwrap_or_else(|| ScalarAbs::unknown_w(w)),
            None => ScalarAbs::unknown_w(w),
        },
        AbsOp::Mod => match b.const_value() {
            Some(0) => *a,
            Some(c) if a.umax < c => *a,
            Some(c) => ScalarAbs::from_urange(0, c - 1, w).unwrap_or_else(|| ScalarAbs::unknown_w(w)),
            None => ScalarAbs::unknown_w(w),
        },
        AbsOp::And => {
            let mut r = with_tnum(Tnum::and(a.tnum, b.tnum), w);
            r.umax = a.umax.min(b.umax);
            if a.smin >= 0 && b.smin >= 0 {
                r.smin = 0;
                r.smax = a.smax.min(b.smax);
            }
            finish(r, w)
        }
        AbsOp::Or => {
            let mut r = with_tnum(Tnum::or(a.tnum, b.tnum), w);
            r.umin = a.umin.max(b.umin);
            finish(r, w)
        }
        AbsOp::Xor => finish(with_tnum(Tnum::xor(a.tnum, b.tnum), w), w),
        AbsOp::Lsh | AbsOp::Rsh | AbsOp::Arsh => shift(op, a, b, w),
        AbsOp::End(order, bits) => {
            if bits > w {
                return ScalarAbs::unknown_w(w);
            }
            match order {
                Endian::Le => a.truncate(w, bits).zext(bits, w),
                Endian::Be => finish(with_tnum(a.tnum.cast(bits).bswap(bits), w), w),
            }
        }
    }
}

fn refine_eq(a: &ScalarAbs, b: &ScalarAbs, w: u32) -> Option<(ScalarAbs, ScalarAbs)> {
    let m = a.meet(b, w)?;
    Some((m, m))
}

/// Removes the constant `c` from the edges of `a`'s ranges.
fn exclude_const(a: &ScalarAbs, c: u64, w: u32) -> Option<ScalarAbs> {
    if a.const_value() == Some(c) {
        return None;
    }
    let mut r = *a;
    if r.umin == c {
        r.umin += 1;
    }
    if r.umax == c {
        r.umax -= 1;
    }
    let s = sext(c, w);
    if r.smin == s {
        r.smin += 1;
    }
    if r.smax == s {
        r.smax -= 1;
    }
    r.sync(w)
}

fn refine_ne(a: &ScalarAbs, b: &ScalarAbs, w: u32) -> Option<(ScalarAbs, ScalarAbs)> {
    let a2 = match b.const_value() {
        Some(c) => exclude_const(a, c, w)?,
        None => *a,
    };
    let b2 = match a.const_value() {
        Some(c) => exclude_const(b, c, w)?,
        None => *b,
    };
    Some((a2, b2))
}

/// `a > b` (strict) or `a >= b`, unsigned.
fn refine_ugt(a: &ScalarAbs, b: &ScalarAbs, strict: bool, w: u32) -> Option<(ScalarAbs, ScalarAbs)> {
    let d = strict as u64;
    let (mut a2, mut b2) = (*a, *b);
    a2.umin = a.umin.max(b.umin.checked_add(d).filter(|&v| v <= wmask(w))?);
    b2.umax = b.umax.min(a.umax.checked_sub(d)?);
    Some((a2.sync(w)?, b2.sync(w)?))
}

fn refine_sgt(a: &ScalarAbs, b: &ScalarAbs, strict: bool, w: u32) -> Option<(ScalarAbs, ScalarAbs)> {
    let d = strict as i64;
    let (mut a2, mut b2) = (*a, *b);
    a2.smin = a.smin.max(b.smin.checked_add(d).filter(|&v| v <= smax_w(w))?);
    b2.smax = b.smax.min(a.smax.checked_sub(d).filter(|&v| v >= smin_w(w))?);
    Some((a2.sync(w)?, b2.sync(w)?))
}

fn refine_set(a: &ScalarAbs, b: &ScalarAbs, w: u32) -> Option<(ScalarAbs, ScalarAbs)> {
    let (amax, bmax) = (a.tnum.max(), b.tnum.max());
    if amax & bmax == 0 {
        return None;
    }
    let set_one = |x: &ScalarAbs, c: u64| -> Option<ScalarAbs> {
        let cand = x.tnum.max() & c;
        if cand.count_ones() == 1 {
            let mut r = *x;
            r.tnum = Tnum::new(r.tnum.value | cand, r.tnum.mask & !cand);
            r.sync(w)
        } else {
            Some(*x)
        }
    };
    let a2 = match b.const_value() {
        Some(c) => set_one(a, c)?,
        None => *a,
    };
    let b2 = match a.const_value() {
        Some(c) => set_one(b, c)?,
        None => *b,
    };
    Some((a2, b2))
}

fn refine_clear(a: &ScalarAbs, b: &ScalarAbs, w: u32) -> Option<(ScalarAbs, ScalarAbs)> {
    if a.tnum.value & b.tnum.value != 0 {
        return None;
    }
    let clear = |x: &ScalarAbs, c: u64| -> Option<ScalarAbs> {
        let mut r = *x;
        r.tnum = Tnum::new(r.tnum.value & !c, r.tnum.mask & !c);
        r.sync(w)
    };
    let a2 = match b.const_value() {
        Some(c) => clear(a, c)?,
        None => *a,
    };
    let b2 = match a.const_value() {
        Some(c) => clear(b, c)?,
        None => *b,
    };
    Some((a2, b2))
}

fn refine_one(cond: CmpOp, a: &ScalarAbs, b: &ScalarAbs, w: u32) -> Option<(ScalarAbs, ScalarAbs)> {
    match cond {
        CmpOp::Eq => refine_eq(a, b, w),
        CmpOp::Ne => refine_ne(a, b, w),
        CmpOp::Gt => refine_ugt(a, b, true, w),
        CmpOp::Ge => refine_ugt(a, b, false, w),
        CmpOp::Sgt => refine_sgt(a, b, true, w),
        CmpOp::Sge => refine_sgt(a, b, false, w),
        CmpOp::Lt | CmpOp::Le | CmpOp::Slt | CmpOp::Sle => {
            refine_one(cond.swap(), b, a, w).map(|(b2, a2)| (a2, b2))
        }
        CmpOp::Set => refine_set(a, b, w),
    }
}

/// Refines `a` and `b` for both outcomes of `a <cond> b` at width `w`.
pub fn abs_refine_branch(cond: CmpOp, a: &ScalarAbs, b: &ScalarAbs, w: u32) -> Refined {
    let taken = refine_one(cond, a, b, w);
    let not_taken = match cond {
        CmpOp::Set => refine_clear(a, b, w),
        _ => refine_one(cond.negate(), a, b, w),
    };
    Refined { taken, not_taken }
}

fn parse_int(s: &str) -> Option<u64> {
    let (neg, digits) = match s.strip_prefix('-') {
        Some(d) => (true, d),
        None => (false, s),
    };
    let v = match digits.strip_prefix("0x").or_else(|| digits.strip_prefix("0X")) {
        Some(h) => u64::from_str_radix(h, 16).ok()?,
        None => digits.parse::<u64>().ok()?,
    };
    Some(if neg { v.wrapping_neg() } else { v })
}

/// Parses one operand at width `w`: `x` (unknown), an integer, an
/// inclusive unsigned range `lo..hi`, a `value/mask` pair, or a bit
/// pattern over `0`, `1` and `x` (with an optional `0b` prefix).
pub fn parse_operand(s: &str, w: u32) -> Result<ScalarAbs, AbsError> {
    let bad = || AbsError::BadOperand(s.to_string());
    let s = s.trim();
    if s == "x" {
        return Ok(ScalarAbs::unknown_w(w));
    }
    if let Some((lo, hi)) = s.split_once("..") {
        let (lo, hi) = (parse_int(lo).ok_or_else(bad)?, parse_int(hi).ok_or_else(bad)?);
        return ScalarAbs::from_urange(lo & wmask(w), hi & wmask(w), w).ok_or_else(bad);
    }
    if let Some((v, m)) = s.split_once('/') {
        let (v, m) = (parse_int(v).ok_or_else(bad)?, parse_int(m).ok_or_else(bad)?);
        return Ok(ScalarAbs::from_tnum(Tnum::new(v, m), w));
    }
    if let Some(v) = parse_int(s) {
        return Ok(ScalarAbs::constant_w(v, w));
    }
    let bits = s.strip_prefix("0b");
    let body = bits.unwrap_or(s);
    if (bits.is_some() || body.contains('x')) && !body.is_empty() && body.len() <= w as usize {
        let mut t = Tnum::constant(0);
        for c in body.chars() {
            let (v, m) = match c {
                '0' => (0, 0),
                '1' => (1, 0),
                'x' => (0, 1),
                _ => return Err(bad()),
            };
            t = Tnum { value: t.value << 1 | v, mask: t.mask << 1 | m };
        }
        return Ok(ScalarAbs::from_tnum(t, w));
    }
    Err(bad())
}

/// One abstract transfer, as reported by `eval`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Eval {
    pub op: &'static str,
    pub width: u32,
    pub a: ScalarAbs,
    pub b: ScalarAbs,
    pub result: ScalarAbs,
    /// `result.tnum` as a bit pattern.
    pub pattern: String,
}

/// Applies the ALU operation named `op` (`add`, `lsh`, ...) to two parsed
/// operands.
pub fn eval(op: &str, a: &str, b: &str, w: u32) -> Result<Eval, AbsError> {
    if ![8, 16, 32, 64].contains(&w) {
        return Err(AbsError::BadWidth(w));
    }
    let op = AbsOp::from_name(op).ok_or_else(|| AbsError::UnknownOp(op.to_string()))?;
    let (a, b) = (parse_operand(a, w)?, parse_operand(b, w)?);
    let result = abs_alu(op, &a, &b, w);
    Ok(Eval { op: op.name(), width: w, a, b, result, pattern: result.tnum.pattern(w) })
}

pub fn abs_const(v: u64) -> ScalarAbs {
    ScalarAbs::constant(v)
}

pub fn abs_unknown() -> ScalarAbs {
    ScalarAbs::unknown()
}

pub fn abs_contains(a: &ScalarAbs, x: u64) -> bool {
    a.contains(x)
}

pub fn abs_join(a: &ScalarAbs, b: &ScalarAbs) -> ScalarAbs {
    a.join(b, 64)
}

#[cfg(test)]
mod tests {
    use super::*;

    const W: u32 = 8;

    #[test]
    fn operands_parse_in_every_form() {
        assert_eq!(parse_operand("x", W).unwrap(), ScalarAbs::unknown_w(W));
        assert_eq!(parse_operand("-1", W).unwrap(), ScalarAbs::constant_w(0xff, W));
        assert_eq!(parse_operand("0x10", W).unwrap(), ScalarAbs::constant_w(16, W));
        assert_eq!(parse_operand("10", W).unwrap(), ScalarAbs::constant_w(10, W));
        assert_eq!(parse_operand("0b1x", W).unwrap().tnum, Tnum { value: 2, mask: 1 });
        assert_eq!(parse_operand("1x0", W).unwrap().tnum, Tnum { value: 4, mask: 2 });
        assert_eq!(parse_operand("4/3", W).unwrap().tnum, Tnum { value: 4, mask: 3 });
        let r = parse_operand("3..9", W).unwrap();
        assert_eq!((r.umin, r.umax), (3, 9));
        assert!(parse_operand("0b12", W).is_err());
        assert!(parse_operand("9..3", W).is_err());
        assert!(parse_operand("", W).is_err());
    }

    #[test]
    fn eval_reports_a_pattern() {
        let e = eval("add", "0b1x", "1", W).unwrap();
        assert_eq!(e.pattern, "00000xxx");
        assert_eq!((e.result.umin, e.result.umax), (3, 4));
        assert!(e.result.contains_w(3, W) && e.result.contains_w(4, W));
        assert_eq!(eval("nope", "1", "1", W).unwrap_err(), AbsError::UnknownOp("nope".into()));
        assert_eq!(eval("add", "1", "1", 7).unwrap_err(), AbsError::BadWidth(7));
    }

    #[test]
    fn constants() {
        let z = abs_const(0);
        assert_eq!(z.tnum, Tnum::constant(0));
        assert_eq!((z.umin, z.umax, z.smin, z.smax), (0, 0, 0, 0));
        assert_eq!(abs_const(5).tnum, Tnum { value: 5, mask: 0 });
        let big = abs_const(1 << 63);
        assert_eq!((big.smin, big.smax), (i64::MIN, i64::MIN));
        assert_eq!((big.umin, big.umax), (1 << 63, 1 << 63));
    }

    #[test]
    fn unknown_is_top() {
        let u = abs_unknown();
        assert_eq!(u.tnum.mask, u64::MAX);
        for x in [0, 1, u64::MAX, 1 << 63, 12345] {
            assert!(abs_contains(&u, x));
        }
        assert_eq!(abs_join(&abs_const(9), &u), u);
    }

    #[test]
    fn add_constants_stays_constant() {
        let r = abs_alu(AbsOp::Add, &abs_const(5), &abs_const(3), 64);
        assert_eq!(r, abs_const(8));
    }

    #[test]
    fn add_of_bits() {
        let bit = ScalarAbs::from_tnum(Tnum::new(0, 1), W);
        let r = abs_alu(AbsOp::Add, &bit, &bit, W);
        assert_eq!(r.tnum, Tnum::new(0, 3));
        for x in 0..=2 {
            assert!(r.contains_w(x, W));
        }
    }

    #[test]
    fn and_with_mask() {
        let r = abs_alu(AbsOp::And, &ScalarAbs::unknown_w(W), &ScalarAbs::constant_w(0xf0, W), W);
        assert_eq!(r.tnum, Tnum::new(0, 0xf0));
        assert_eq!(r.umax, 0xf0);
    }

    #[test]
    fn contains_examples() {
        assert!(abs_contains(&abs_const(5), 5));
        assert!(!abs_contains(&abs_const(5), 6));
        let t = ScalarAbs::from_tnum(Tnum::new(2, 1), 64);
        assert!(abs_contains(&t, 3));
        assert!(!abs_contains(&t, 1));
    }

    #[test]
    fn join_examples() {
        assert_eq!(abs_join(&abs_const(4), &abs_const(4)), abs_const(4));
        assert_eq!(abs_join(&abs_const(4), &abs_const(5)).tnum, Tnum::new(4, 1));
    }

    #[test]
    fn jeq_pins_value() {
        let r = abs_refine_branch(CmpOp::Eq, &abs_unknown(), &abs_const(7), 64);
        assert_eq!(r.taken.unwrap().0, abs_const(7));
        assert!(r.not_taken.is_some());
    }

    #[test]
    fn jgt_splits_range() {
        let k = ScalarAbs::constant_w(10, W);
        let r = abs_refine_branch(CmpOp::Gt, &ScalarAbs::unknown_w(W), &k, W);
        assert_eq!(r.taken.unwrap().0.umin, 11);
        assert_eq!(r.not_taken.unwrap().0.umax, 10);
    }

    #[test]
    fn jset_on_single_bit() {
        let a = ScalarAbs::from_tnum(Tnum::new(0, 1), W);
        let r = abs_refine_branch(CmpOp::Set, &a, &ScalarAbs::constant_w(1, W), W);
        assert_eq!(r.taken.unwrap().0, ScalarAbs::constant_w(1, W));
        assert_eq!(r.not_taken.unwrap().0, ScalarAbs::constant_w(0, W));
    }

    #[test]
    fn decided_branch_has_one_side() {
        let a = ScalarAbs::from_urange(20, 30, 64).unwrap();
        let r = abs_refine_branch(CmpOp::Gt, &a, &abs_const(10), 64);
        assert!(r.taken.is_some());
        assert!(r.not_taken.is_none());
    }

    #[test]
    fn signed_range_crossing_zero() {
        let a = ScalarAbs::from_srange(-3, 3, 64).unwrap();
        assert_eq!((a.umin, a.umax), (0, u64::MAX));
        assert!(a.contains((-3i64) as u64) && a.contains(3) && !a.contains(4));
        let r = abs_refine_branch(CmpOp::Sge, &a, &abs_const(0), 64);
        let pos = r.taken.unwrap().0;
        assert_eq!((pos.umin, pos.umax), (0, 3));
    }

    #[test]
    fn truncate_and_zext() {
        let a = ScalarAbs::from_urange(0x1_0000_0005, 0x1_0000_0009, 64).unwrap();
        let lo = a.truncate(64, 32);
        assert_eq!((lo.umin, lo.umax), (5, 9));
        let z = lo.zext(32, 64);
        assert_eq!((z.smin, z.smax), (5, 9));
    }

    #[test]
    fn merge_low32_keeps_high_bits() {
        let a = ScalarAbs::from_urange(0x1_0000_0000, 0x1_0000_00ff, 64).unwrap();
        let low = ScalarAbs::constant_w(7, 32);
        let m = a.merge_low32(&low).unwrap();
        assert_eq!(m.const_value(), Some(0x1_0000_0007));
    }

    #[test]
    fn opcode_conversion_rejects_jumps() {
        let j = Instruction::ja(0);
        assert_eq!(AbsOp::from_insn(&j), Err(AbsError::UnsupportedOp(j.opcode)));
        let add = Instruction::alu64_imm(AluOp::Add, 1, 1);
        assert_eq!(CmpOp::from_insn(&add), Err(AbsError::UnsupportedOp(add.opcode)));
        assert_eq!(CmpOp::from_insn(&Instruction::exit()), Err(AbsError::UnsupportedOp(0x95)));
    }

    // Concrete w-bit semantics written out independently of the engine.
    fn conc(op: AbsOp, x: u64, y: u64, w: u32) -> u64 {
        let m = wmask(w);
        let r = match op {
            AbsOp::Add => x.wrapping_add(y),
            AbsOp::Sub => x.wrapping_sub(y),
            AbsOp::Mul => x.wrapping_mul(y),
            AbsOp::Div => if y == 0 { 0 } else { x / y },
            AbsOp::Mod => if y == 0 { x } else { x % y },
            AbsOp::And => x & y,
            AbsOp::Or => x | y,
            AbsOp::Xor => x ^ y,
            AbsOp::Lsh => x << (y % w as u64),
            AbsOp::Rsh => x >> (y % w as u64),
            AbsOp::Arsh => (sext(x, w) >> (y % w as u64)) as u64,
            AbsOp::Neg => x.wrapping_neg(),
            AbsOp::Mov => y,
            AbsOp::End(..) => unreachable!(),
        };
        r & m
    }

    fn tnums(w: u32) -> Vec<Tnum> {
        let mut out = Vec::new();
        for mask in 0..(1u64 << w) {
            for value in 0..(1u64 << w) {
                if value & mask == 0 {
                    out.push(Tnum { value, mask });
                }
            }
        }
        out
    }

    fn members(a: &ScalarAbs, w: u32) -> Vec<u64> {
        (0..(1u64 << w)).filter(|&x| a.contains_w(x, w)).collect()
    }

    /// Tnum-derived values plus a few interval-shaped ones.
    fn inputs(w: u32) -> Vec<ScalarAbs> {
        let mut v: Vec<ScalarAbs> = tnums(w).into_iter().map(|t| ScalarAbs::from_tnum(t, w)).collect();
        let top = wmask(w);
        for lo in (0..=top).step_by(3) {
            for hi in (lo..=top).step_by(5) {
                v.extend(ScalarAbs::from_urange(lo, hi, w));
                v.extend(ScalarAbs::from_srange(sext(lo, w), sext(lo, w).max(sext(hi, w)), w));
            }
        }
        v
    }

    #[test]
    fn alu_sound_exhaustive_5bit() {
        let w = 5;
        let ins = inputs(w);
        let sets: Vec<Vec<u64>> = ins.iter().map(|a| members(a, w)).collect();
        for op in AbsOp::BINARY {
            for (a, xs) in ins.iter().zip(&sets) {
                for (b, ys) in ins.iter().zip(&sets).step_by(7) {
                    let r = abs_alu(op, a, b, w);
                    for &x in xs {
                        for &y in ys {
                            let z = conc(op, x, y, w);
                            assert!(r.contains_w(z, w), "{op:?} {a} {b} -> {r} misses {z} ({x}, {y})");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn sync_is_idempotent() {
        let w = 5;
        for a in inputs(w) {
            assert_eq!(a.sync(w), Some(a));
        }
    }

    #[test]
    fn refine_sound_exhaustive_5bit() {
        let w = 5;
        let ins = inputs(w);
        let sets: Vec<Vec<u64>> = ins.iter().map(|a| members(a, w)).collect();
        for cond in CmpOp::ALL {
            for (a, xs) in ins.iter().zip(&sets).step_by(3) {
                for (b, ys) in ins.iter().zip(&sets).step_by(11) {
                    let r = abs_refine_branch(cond, a, b, w);
                    for &x in xs {
                        for &y in ys {
                            let side = if cond.eval(x, y, w) { r.taken } else { r.not_taken };
                            let (ra, rb) = side.unwrap_or_else(|| panic!("{cond:?} {a} {b}: feasible side dropped for ({x}, {y})"));
                            assert!(ra.contains_w(x, w) && rb.contains_w(y, w), "{cond:?} {a} {b} lost ({x}, {y})");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn end_sound_at_16bit() {
        let w = 16;
        let samples = [Tnum::new(0x1200, 0x00ff), Tnum::new(0, 0x0f0f), Tnum::new(0xab00, 0x0003)];
        for t in samples {
            let a = ScalarAbs::from_tnum(t, w);
            let r = abs_alu(AbsOp::End(Endian::Be, 16), &a, &a, w);
            for x in (0..=0xffffu64).filter(|&x| t.contains(x)) {
                assert!(r.contains_w((x as u16).swap_bytes() as u64, w));
            }
        }
    }
}
