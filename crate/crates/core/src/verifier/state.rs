// Copyright 2026 The ubpf-forge Authors
// SPDX-License-Identifier: Apache-2.0

use crate::absdom::ScalarAbs;
use crate::isa::REG_COUNT;
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RegType {
    NotInit,
    Scalar,
    PtrToCtx,
    PtrToStack,
    PtrToPacket,
    PtrToPacketEnd,
    PtrToMapValue,
    PtrToMapValueOrNull,
    ConstMapPtr,
}

impl RegType {
    pub fn is_pointer(self) -> bool {
        !matches!(self, RegType::NotInit | RegType::Scalar)
    }
}

/// Verifier knowledge about one register or spilled slot.
///
/// For scalars `value` is the value itself. For pointers it is the variable
/// part of the offset, and `off` the constant part.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RegState {
    pub rtype: RegType,
    pub value: ScalarAbs,
    pub off: i64,
    /// Map index for map pointers.
    pub map: usize,
    /// Pointer identity: shared by copies of one nullable or variable-offset
    /// pointer. Zero means none.
    pub id: u32,
    /// Proven readable packet bytes, in the constant-offset space of `id`.
    pub range: u64,
    /// Acquired reference carried by this value; zero means none.
    pub ref_id: u32,
    /// Owning frame for stack pointers.
    pub frame: usize,
    pub precise: bool,
}

impl RegState {
    pub const fn not_init() -> RegState {
        RegState {
            rtype: RegType::NotInit,
            value: ScalarAbs {
                tnum: crate::absdom::Tnum::UNKNOWN,
                umin: 0,
                umax: u64::MAX,
                smin: i64::MIN,
                smax: i64::MAX,
            },
            off: 0,
            map: 0,
            id: 0,
            range: 0,
            ref_id: 0,
            frame: 0,
            precise: false,
        }
    }

    pub fn scalar(value: ScalarAbs) -> RegState {
        RegState { rtype: RegType::Scalar, value, ..RegState::not_init() }
    }

    pub fn unknown_scalar() -> RegState {
        RegState::scalar(ScalarAbs::unknown())
    }

    pub fn const_scalar(v: u64) -> RegState {
        RegState::scalar(ScalarAbs::constant(v))
    }

    pub fn pointer(rtype: RegType, off: i64) -> RegState {
        RegState { rtype, value: ScalarAbs::constant(0), off, ..RegState::not_init() }
    }

    pub fn stack_ptr(frame: usize, off: i64) -> RegState {
        RegState { frame, ..RegState::pointer(RegType::PtrToStack, off) }
    }

    pub fn is_init(&self) -> bool {
        self.rtype != RegType::NotInit
    }

    pub fn is_scalar(&self) -> bool {
        self.rtype == RegType::Scalar
    }

    pub fn is_pointer(&self) -> bool {
        self.rtype.is_pointer()
    }

    pub fn const_value(&self) -> Option<u64> {
        if self.is_scalar() {
            self.value.const_value()
        } else {
            None
        }
    }
}

impl Default for RegState {
    fn default() -> Self {
        RegState::not_init()
    }
}

impl fmt::Display for RegState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let var = |f: &mut fmt::Formatter<'_>| -> fmt::Result {
            if self.value.const_value() != Some(0) {
                write!(f, ",var={}", self.value)?;
            }
            Ok(())
        };
        match self.rtype {
            RegType::NotInit => write!(f, "?"),
            RegType::Scalar => {
                if self.precise {
                    write!(f, "P")?;
                }
                write!(f, "{}", self.value)?;
                if self.ref_id != 0 {
                    write!(f, "[ref={}]", self.ref_id)?;
                }
                Ok(())
            }
            RegType::PtrToCtx => write!(f, "ctx(off={})", self.off),
            RegType::PtrToStack => {
                if self.frame == 0 {
                    write!(f, "fp{}", self.off)
                } else {
                    write!(f, "fp{}@{}", self.off, self.frame)
                }
            }
            RegType::PtrToPacket => {
                write!(f, "pkt(off={},r={}", self.off, self.range)?;
                if self.id != 0 {
                    write!(f, ",id={}", self.id)?;
                }
                var(f)?;
                write!(f, ")")
            }
            RegType::PtrToPacketEnd => write!(f, "pkt_end"),
            RegType::PtrToMapValue => {
                write!(f, "map_value(m{},off={}", self.map, self.off)?;
                var(f)?;
                write!(f, ")")
            }
            RegType::PtrToMapValueOrNull => {
                write!(f, "map_value_or_null(m{},id={},off={}", self.map, self.id, self.off)?;
                var(f)?;
                write!(f, ")")
            }
            RegType::ConstMapPtr => write!(f, "map_ptr(m{})", self.map),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ByteTag {
    Invalid,
    Misc,
    Zero,
    Spill,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum IterState {
    Active,
    Drained,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct IterSlot {
    pub ref_id: u32,
    pub state: IterState,
    /// Number of `iter_num_next` items produced on this path; informational.
    pub depth: u32,
}

/// One 8-byte stack slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Slot {
    pub bytes: [ByteTag; 8],
    pub spill: Option<RegState>,
    pub iter: Option<IterSlot>,
}

impl Slot {
    pub const INVALID: Slot = Slot { bytes: [ByteTag::Invalid; 8], spill: None, iter: None };
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Frame {
    pub regs: [RegState; REG_COUNT],
    /// `slots[k]` covers bytes `[fp - 8(k+1), fp - 8k)`. Grows on first
    /// write; slots past the end are invalid.
    pub slots: Vec<Slot>,
    /// Caller's call instruction; `None` for the main frame.
    pub callsite: Option<usize>,
    pub subprog: usize,
}

impl Frame {
    pub fn new(index: usize, callsite: Option<usize>, subprog: usize) -> Frame {
        let mut regs = [RegState::not_init(); REG_COUNT];
        regs[10] = RegState::stack_ptr(index, 0);
        Frame { regs, slots: Vec::new(), callsite, subprog }
    }

    pub fn slot(&self, k: usize) -> &Slot {
        self.slots.get(k).unwrap_or(&Slot::INVALID)
    }

    pub fn slot_mut(&mut self, k: usize) -> &mut Slot {
        if k >= self.slots.len() {
            self.slots.resize(k + 1, Slot::INVALID);
        }
        &mut self.slots[k]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RefKind {
    TestRef,
    Iterator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RefEntry {
    pub id: u32,
    pub kind: RefKind,
    pub site: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LockState {
    pub map: usize,
    pub id: u32,
    pub site: usize,
}

/// One executed instruction, with what backtracking needs to know about it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub insn: usize,
    pub frame: usize,
    /// Stack slot touched by a load or store, as `(frame, slot)`.
    pub slot: Option<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct State {
    pub frames: Vec<Frame>,
    pub refs: Vec<RefEntry>,
    pub released: Vec<u32>,
    pub lock: Option<LockState>,
    pub insn: usize,
    /// Most recent checkpoint on this path.
    pub cp: Option<usize>,
    /// Instructions executed since `cp`.
    pub trace: Vec<TraceEntry>,
}

impl State {
    pub fn cur(&self) -> &Frame {
        self.frames.last().expect("at least one frame")
    }

    pub fn cur_mut(&mut self) -> &mut Frame {
        self.frames.last_mut().expect("at least one frame")
    }

    pub fn depth(&self) -> usize {
        self.frames.len() - 1
    }

    pub fn reg(&self, r: u8) -> &RegState {
        &self.cur().regs[r as usize]
    }

    pub fn reg_mut(&mut self, r: u8) -> &mut RegState {
        &mut self.cur_mut().regs[r as usize]
    }

    /// Applies `f` to every register and spilled register in every frame.
    pub fn for_each_reg(&mut self, mut f: impl FnMut(&mut RegState)) {
        for fr in &mut self.frames {
            for r in fr.regs.iter_mut() {
                f(r);
            }
            for s in fr.slots.iter_mut() {
                if let Some(sp) = s.spill.as_mut() {
                    f(sp);
                }
            }
        }
    }
}
