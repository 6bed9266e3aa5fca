// Copyright 2026 The ubpf-forge Authors
// SPDX-License-Identifier: Apache-2.0

//! Instruction model, binary codec and the textual assembly format.
//!
//! The numeric opcode layout follows the de-facto eBPF encoding:
//! `opcode:8 | dst:4 | src:4 | offset:16 | imm:32`, little-endian. Only the
//! operation *names* are fixed by the instruction set description; the
//! numbers are a convention shared with the Linux implementation.

mod asm;
mod codec;

pub use asm::{format_asm, parse_asm};
pub use codec::{decode, encode};

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Number of architectural registers (`r0`..=`r10`).
pub const REG_COUNT: usize = 11;
/// Read-only frame pointer.
pub const FRAME_REG: u8 = 10;
/// Size in bytes of one encoding slot.
pub const SLOT_SIZE: usize = 8;

// Instruction classes (low three bits of the opcode).
pub const BPF_LD: u8 = 0x00;
pub const BPF_LDX: u8 = 0x01;
pub const BPF_ST: u8 = 0x02;
pub const BPF_STX: u8 = 0x03;
pub const BPF_ALU: u8 = 0x04;
pub const BPF_JMP: u8 = 0x05;
pub const BPF_JMP32: u8 = 0x06;
pub const BPF_ALU64: u8 = 0x07;

// Source operand bit for ALU/JMP classes.
pub const BPF_K: u8 = 0x00;
pub const BPF_X: u8 = 0x08;

// Memory access sizes.
pub const BPF_W: u8 = 0x00;
pub const BPF_H: u8 = 0x08;
pub const BPF_B: u8 = 0x10;
pub const BPF_DW: u8 = 0x18;

// Memory modes.
pub const BPF_IMM: u8 = 0x00;
pub const BPF_MEM: u8 = 0x60;

/// `lddw` opcode, the only wide instruction.
pub const LD_DW_IMM: u8 = BPF_LD | BPF_IMM | BPF_DW;

// `src` values that turn `lddw` into a pseudo load.
pub const PSEUDO_MAP_REF: u8 = 1;
pub const PSEUDO_MAP_VALUE: u8 = 2;

// `src` values for CALL.
pub const CALL_HELPER: u8 = 0;
pub const CALL_LOCAL: u8 = 1;
pub const CALL_DIRECT: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Class {
    Ld,
    Ldx,
    St,
    Stx,
    Alu32,
    Jmp,
    Jmp32,
    Alu64,
}

impl Class {
    pub fn from_opcode(opcode: u8) -> Class {
        match opcode & 0x07 {
            BPF_LD => Class::Ld,
            BPF_LDX => Class::Ldx,
            BPF_ST => Class::St,
            BPF_STX => Class::Stx,
            BPF_ALU => Class::Alu32,
            BPF_JMP => Class::Jmp,
            BPF_JMP32 => Class::Jmp32,
            _ => Class::Alu64,
        }
    }

    pub fn bits(self) -> u8 {
        match self {
            Class::Ld => BPF_LD,
            Class::Ldx => BPF_LDX,
            Class::St => BPF_ST,
            Class::Stx => BPF_STX,
            Class::Alu32 => BPF_ALU,
            Class::Jmp => BPF_JMP,
            Class::Jmp32 => BPF_JMP32,
            Class::Alu64 => BPF_ALU64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AluOp {
    Add,
    Sub,
    Mul,
    Div,
    Or,
    And,
    Lsh,
    Rsh,
    Neg,
    Mod,
    Xor,
    Mov,
    Arsh,
    End,
}

impl AluOp {
    pub const ALL: [AluOp; 14] = [
        AluOp::Add,
        AluOp::Sub,
        AluOp::Mul,
        AluOp::Div,
        AluOp::Or,
        AluOp::And,
        AluOp::Lsh,
        AluOp::Rsh,
        AluOp::Neg,
        AluOp::Mod,
        AluOp::Xor,
        AluOp::Mov,
        AluOp::Arsh,
        AluOp::End,
    ];

    pub fn bits(self) -> u8 {
        match self {
            AluOp::Add => 0x00,
            AluOp::Sub => 0x10,
            AluOp::Mul => 0x20,
            AluOp::Div => 0x30,
            AluOp::Or => 0x40,
            AluOp::And => 0x50,
            AluOp::Lsh => 0x60,
            AluOp::Rsh => 0x70,
            AluOp::Neg => 0x80,
            AluOp::Mod => 0x90,
            AluOp::Xor => 0xa0,
            AluOp::Mov => 0xb0,
            AluOp::Arsh => 0xc0,
            AluOp::End => 0xd0,
        }
    }

    pub fn from_bits(bits: u8) -> Option<AluOp> {
        AluOp::ALL.into_iter().find(|op| op.bits() == bits & 0xf0)
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            AluOp::Add => "add",
            AluOp::Sub => "sub",
            AluOp::Mul => "mul",
            AluOp::Div => "div",
            AluOp::Or => "or",
            AluOp::And => "and",
            AluOp::Lsh => "lsh",
            AluOp::Rsh => "rsh",
            AluOp::Neg => "neg",
            AluOp::Mod => "mod",
            AluOp::Xor => "xor",
            AluOp::Mov => "mov",
            AluOp::Arsh => "arsh",
            AluOp::End => "end",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JmpOp {
    Ja,
    Jeq,
    Jgt,
    Jge,
    Jset,
    Jne,
    Jsgt,
    Jsge,
    Call,
    Exit,
    Jlt,
    Jle,
    Jslt,
    Jsle,
}

impl JmpOp {
    pub const ALL: [JmpOp; 14] = [
        JmpOp::Ja,
        JmpOp::Jeq,
        JmpOp::Jgt,
        JmpOp::Jge,
        JmpOp::Jset,
        JmpOp::Jne,
        JmpOp::Jsgt,
        JmpOp::Jsge,
        JmpOp::Call,
        JmpOp::Exit,
        JmpOp::Jlt,
        JmpOp::Jle,
        JmpOp::Jslt,
        JmpOp::Jsle,
    ];

    pub fn bits(self) -> u8 {
        match self {
            JmpOp::Ja => 0x00,
            JmpOp::Jeq => 0x10,
            JmpOp::Jgt => 0x20,
            JmpOp::Jge => 0x30,
            JmpOp::Jset => 0x40,
            JmpOp::Jne => 0x50,
            JmpOp::Jsgt => 0x60,
            JmpOp::Jsge => 0x70,
            JmpOp::Call => 0x80,
            JmpOp::Exit => 0x90,
            JmpOp::Jlt => 0xa0,
            JmpOp::Jle => 0xb0,
            JmpOp::Jslt => 0xc0,
            JmpOp::Jsle => 0xd0,
        }
    }

    pub fn from_bits(bits: u8) -> Option<JmpOp> {
        JmpOp::ALL.into_iter().find(|op| op.bits() == bits & 0xf0)
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            JmpOp::Ja => "ja",
            JmpOp::Jeq => "jeq",
            JmpOp::Jgt => "jgt",
            JmpOp::Jge => "jge",
            JmpOp::Jset => "jset",
            JmpOp::Jne => "jne",
            JmpOp::Jsgt => "jsgt",
            JmpOp::Jsge => "jsge",
            JmpOp::Call => "call",
            JmpOp::Exit => "exit",
            JmpOp::Jlt => "jlt",
            JmpOp::Jle => "jle",
            JmpOp::Jslt => "jslt",
            JmpOp::Jsle => "jsle",
        }
    }

    /// Conditional jumps only.
    pub fn is_conditional(self) -> bool {
        !matches!(self, JmpOp::Ja | JmpOp::Call | JmpOp::Exit)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MemSize {
    B,
    H,
    W,
    DW,
}

impl MemSize {
    pub fn bytes(self) -> u32 {
        match self {
            MemSize::B => 1,
            MemSize::H => 2,
            MemSize::W => 4,
            MemSize::DW => 8,
        }
    }

    pub fn bits(self) -> u8 {
        match self {
            MemSize::B => BPF_B,
            MemSize::H => BPF_H,
            MemSize::W => BPF_W,
            MemSize::DW => BPF_DW,
        }
    }

    pub fn from_bits(bits: u8) -> MemSize {
        match bits & 0x18 {
            BPF_B => MemSize::B,
            BPF_H => MemSize::H,
            BPF_W => MemSize::W,
            _ => MemSize::DW,
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            MemSize::B => "b",
            MemSize::H => "h",
            MemSize::W => "w",
            MemSize::DW => "dw",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SrcKind {
    Imm,
    Reg,
}

/// What the immediate of a wide load or call refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pseudo {
    None,
    /// `lddw rD, map[..]`: immediate indexes `Program::map_refs`.
    MapRef,
    /// `lddw rD, map_value[..]+off`: address of an array map's value storage.
    MapValue,
    /// Call to a subprog, immediate is a slot-relative offset.
    LocalCall,
    /// Call rewritten to a direct map-implementation entry point.
    DirectCall,
}

/// Byte order selector of `END` instructions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Endian {
    Le,
    Be,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IsaError {
    #[error("slot {slot}: unknown opcode {opcode:#04x}")]
    UnknownOpcode { slot: usize, opcode: u8 },
    #[error("slot {slot}: wide instruction is missing its second slot")]
    TruncatedWideInstruction { slot: usize },
    #[error("slot {slot}: register index {reg} out of range")]
    BadRegisterIndex { slot: usize, reg: u8 },
    #[error("slot {slot}: {reason}")]
    MalformedInstruction { slot: usize, reason: String },
    #[error("byte length {0} is not a multiple of 8")]
    BadLength(usize),
    #[error("invalid program: {0}")]
    InvalidProgram(String),
    #[error("line {line}, column {col}: {msg}")]
    SyntaxError { line: usize, col: usize, msg: String },
    #[error("line {line}: undefined label `{label}`")]
    UndefinedLabel { line: usize, label: String },
    #[error("line {line}: duplicate label `{label}`")]
    DuplicateLabel { line: usize, label: String },
}

/// One decoded instruction. `lddw` is a single `Instruction` that carries
/// its second slot in `wide_imm`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub opcode: u8,
    pub dst: u8,
    pub src: u8,
    /// Jump displacement in slots, or memory displacement in bytes.
    pub off: i16,
    pub imm: i32,
    pub wide_imm: Option<i32>,
}

impl Instruction {
    pub const fn raw(opcode: u8, dst: u8, src: u8, off: i16, imm: i32) -> Self {
        Instruction { opcode, dst, src, off, imm, wide_imm: None }
    }

    fn alu(class: u8, op: AluOp, src_kind: SrcKind, dst: u8, src: u8, imm: i32) -> Self {
        let sk = if src_kind == SrcKind::Reg { BPF_X } else { BPF_K };
        Self::raw(class | op.bits() | sk, dst, src, 0, imm)
    }

    pub fn alu64_imm(op: AluOp, dst: u8, imm: i32) -> Self {
        Self::alu(BPF_ALU64, op, SrcKind::Imm, dst, 0, imm)
    }

    pub fn alu64_reg(op: AluOp, dst: u8, src: u8) -> Self {
        Self::alu(BPF_ALU64, op, SrcKind::Reg, dst, src, 0)
    }

    pub fn alu32_imm(op: AluOp, dst: u8, imm: i32) -> Self {
        Self::alu(BPF_ALU, op, SrcKind::Imm, dst, 0, imm)
    }

    pub fn alu32_reg(op: AluOp, dst: u8, src: u8) -> Self {
        Self::alu(BPF_ALU, op, SrcKind::Reg, dst, src, 0)
    }

    pub fn mov64_imm(dst: u8, imm: i32) -> Self {
        Self::alu64_imm(AluOp::Mov, dst, imm)
    }

    pub fn mov64_reg(dst: u8, src: u8) -> Self {
        Self::alu64_reg(AluOp::Mov, dst, src)
    }

    pub fn neg64(dst: u8) -> Self {
        Self::alu64_imm(AluOp::Neg, dst, 0)
    }

    pub fn endian(order: Endian, dst: u8, bits: i32) -> Self {
        let sk = if order == Endian::Be { SrcKind::Reg } else { SrcKind::Imm };
        Self::alu(BPF_ALU, AluOp::End, sk, dst, 0, bits)
    }

    pub fn ja(off: i16) -> Self {
        Self::raw(BPF_JMP | JmpOp::Ja.bits(), 0, 0, off, 0)
    }

    pub fn jmp_imm(op: JmpOp, dst: u8, imm: i32, off: i16) -> Self {
        Self::raw(BPF_JMP | op.bits() | BPF_K, dst, 0, off, imm)
    }

    pub fn jmp_reg(op: JmpOp, dst: u8, src: u8, off: i16) -> Self {
        Self::raw(BPF_JMP | op.bits() | BPF_X, dst, src, off, 0)
    }

    pub fn jmp32_imm(op: JmpOp, dst: u8, imm: i32, off: i16) -> Self {
        Self::raw(BPF_JMP32 | op.bits() | BPF_K, dst, 0, off, imm)
    }

    pub fn jmp32_reg(op: JmpOp, dst: u8, src: u8, off: i16) -> Self {
        Self::raw(BPF_JMP32 | op.bits() | BPF_X, dst, src, off, 0)
    }

    pub fn call_helper(id: u32) -> Self {
        Self::raw(BPF_JMP | JmpOp::Call.bits(), 0, CALL_HELPER, 0, id as i32)
    }

    pub fn call_local(rel_slots: i32) -> Self {
        Self::raw(BPF_JMP | JmpOp::Call.bits(), 0, CALL_LOCAL, 0, rel_slots)
    }

    pub fn call_direct(id: u32) -> Self {
        Self::raw(BPF_JMP | JmpOp::Call.bits(), 0, CALL_DIRECT, 0, id as i32)
    }

    pub fn exit() -> Self {
        Self::raw(BPF_JMP | JmpOp::Exit.bits(), 0, 0, 0, 0)
    }

    pub fn ldx(size: MemSize, dst: u8, base: u8, off: i16) -> Self {
        Self::raw(BPF_LDX | BPF_MEM | size.bits(), dst, base, off, 0)
    }

    pub fn st_imm(size: MemSize, base: u8, off: i16, imm: i32) -> Self {
        Self::raw(BPF_ST | BPF_MEM | size.bits(), base, 0, off, imm)
    }

    pub fn stx(size: MemSize, base: u8, off: i16, src: u8) -> Self {
        Self::raw(BPF_STX | BPF_MEM | size.bits(), base, src, off, 0)
    }

    pub fn lddw(dst: u8, value: u64) -> Self {
        Instruction {
            opcode: LD_DW_IMM,
            dst,
            src: 0,
            off: 0,
            imm: value as u32 as i32,
            wide_imm: Some((value >> 32) as u32 as i32),
        }
    }

    pub fn ld_map(dst: u8, map_index: u32) -> Self {
        Instruction {
            opcode: LD_DW_IMM,
            dst,
            src: PSEUDO_MAP_REF,
            off: 0,
            imm: map_index as i32,
            wide_imm: Some(0),
        }
    }

    pub fn ld_map_value(dst: u8, map_index: u32, value_off: i32) -> Self {
        Instruction {
            opcode: LD_DW_IMM,
            dst,
            src: PSEUDO_MAP_VALUE,
            off: 0,
            imm: map_index as i32,
            wide_imm: Some(value_off),
        }
    }

    pub fn class(&self) -> Class {
        Class::from_opcode(self.opcode)
    }

    pub fn is_alu(&self) -> bool {
        matches!(self.class(), Class::Alu32 | Class::Alu64)
    }

    pub fn is_jmp_class(&self) -> bool {
        matches!(self.class(), Class::Jmp | Class::Jmp32)
    }

    pub fn alu_op(&self) -> Option<AluOp> {
        if self.is_alu() {
            AluOp::from_bits(self.opcode)
        } else {
            None
        }
    }

    pub fn jmp_op(&self) -> Option<JmpOp> {
        if self.is_jmp_class() {
            JmpOp::from_bits(self.opcode)
        } else {
            None
        }
    }

    pub fn src_kind(&self) -> SrcKind {
        if self.opcode & BPF_X != 0 {
            SrcKind::Reg
        } else {
            SrcKind::Imm
        }
    }

    pub fn mem_size(&self) -> Option<MemSize> {
        match self.class() {
            Class::Ld | Class::Ldx | Class::St | Class::Stx => Some(MemSize::from_bits(self.opcode)),
            _ => None,
        }
    }

    pub fn byte_order(&self) -> Option<Endian> {
        (self.alu_op() == Some(AluOp::End)).then(|| {
            if self.src_kind() == SrcKind::Reg {
                Endian::Be
            } else {
                Endian::Le
            }
        })
    }

    pub fn is_wide(&self) -> bool {
        self.opcode == LD_DW_IMM
    }

    /// Slots this instruction occupies in the binary stream.
    pub fn slots(&self) -> usize {
        if self.is_wide() {
            2
        } else {
            1
        }
    }

    /// Full 64-bit constant of a plain `lddw`.
    pub fn wide_value(&self) -> u64 {
        (self.imm as u32 as u64) | ((self.wide_imm.unwrap_or(0) as u32 as u64) << 32)
    }

    pub fn pseudo(&self) -> Pseudo {
        if self.is_wide() {
            match self.src {
                PSEUDO_MAP_REF => Pseudo::MapRef,
                PSEUDO_MAP_VALUE => Pseudo::MapValue,
                _ => Pseudo::None,
            }
        } else if self.jmp_op() == Some(JmpOp::Call) && self.class() == Class::Jmp {
            match self.src {
                CALL_LOCAL => Pseudo::LocalCall,
                CALL_DIRECT => Pseudo::DirectCall,
                _ => Pseudo::None,
            }
        } else {
            Pseudo::None
        }
    }

    pub fn is_exit(&self) -> bool {
        self.class() == Class::Jmp && self.jmp_op() == Some(JmpOp::Exit)
    }

    pub fn is_call(&self) -> bool {
        self.class() == Class::Jmp && self.jmp_op() == Some(JmpOp::Call)
    }

    pub fn is_helper_call(&self) -> bool {
        self.is_call() && self.src == CALL_HELPER
    }

    pub fn is_local_call(&self) -> bool {
        self.is_call() && self.src == CALL_LOCAL
    }

    pub fn is_direct_call(&self) -> bool {
        self.is_call() && self.src == CALL_DIRECT
    }

    pub fn is_ja(&self) -> bool {
        self.class() == Class::Jmp && self.jmp_op() == Some(JmpOp::Ja)
    }

    pub fn is_cond_jump(&self) -> bool {
        self.jmp_op().is_some_and(JmpOp::is_conditional)
    }

    /// Immediate operand used as data (excludes call ids, map indices and
    /// `END` widths). Used by constant blinding.
    pub fn data_immediate(&self) -> Option<i64> {
        match self.class() {
            Class::Alu32 | Class::Alu64 => match self.alu_op()? {
                AluOp::Neg | AluOp::End => None,
                _ if self.src_kind() == SrcKind::Imm => Some(self.imm as i64),
                _ => None,
            },
            Class::Jmp | Class::Jmp32 if self.is_cond_jump() && self.src_kind() == SrcKind::Imm => {
                Some(self.imm as i64)
            }
            Class::St => Some(self.imm as i64),
            Class::Ld if self.pseudo() == Pseudo::None => Some(self.wide_value() as i64),
            _ => None,
        }
    }

    /// Checks field validity for this opcode; `slot` is only used in errors.
    pub fn validate(&self, slot: usize) -> Result<(), IsaError> {
        let bad = |reason: &str| IsaError::MalformedInstruction { slot, reason: reason.to_string() };
        let unknown = IsaError::UnknownOpcode { slot, opcode: self.opcode };
        for reg in [self.dst, self.src] {
            // `src` doubles as pseudo selector for lddw/call; range is checked below.
            if reg as usize >= REG_COUNT && !(self.is_wide() || self.is_call()) {
                return Err(IsaError::BadRegisterIndex { slot, reg });
            }
        }
        if self.dst as usize >= REG_COUNT {
            return Err(IsaError::BadRegisterIndex { slot, reg: self.dst });
        }
        if self.wide_imm.is_some() != self.is_wide() {
            return Err(bad("wide immediate present on a narrow instruction"));
        }
        match self.class() {
            Class::Alu32 | Class::Alu64 => {
                let op = self.alu_op().ok_or(unknown.clone())?;
                if self.off != 0 {
                    return Err(bad("ALU offset must be zero"));
                }
                match op {
                    AluOp::Neg => {
                        if self.src_kind() == SrcKind::Reg {
                            return Err(unknown);
                        }
                        if self.src != 0 || self.imm != 0 {
                            return Err(bad("neg takes no source"));
                        }
                    }
                    AluOp::End => {
                        if self.class() != Class::Alu32 {
                            return Err(unknown);
                        }
                        if self.src != 0 || !matches!(self.imm, 16 | 32 | 64) {
                            return Err(bad("end width must be 16, 32 or 64"));
                        }
                    }
                    _ => match self.src_kind() {
                        SrcKind::Imm if self.src != 0 => return Err(bad("source register set on immediate form")),
                        SrcKind::Reg if self.imm != 0 => return Err(bad("immediate set on register form")),
                        _ => {}
                    },
                }
            }
            Class::Jmp | Class::Jmp32 => {
                let op = self.jmp_op().ok_or(unknown.clone())?;
                let is32 = self.class() == Class::Jmp32;
                match op {
                    JmpOp::Ja => {
                        if is32 || self.src_kind() == SrcKind::Reg {
                            return Err(unknown);
                        }
                        if self.dst != 0 || self.src != 0 || self.imm != 0 {
                            return Err(bad("ja takes only an offset"));
                        }
                    }
                    JmpOp::Exit => {
                        if is32 || self.src_kind() == SrcKind::Reg {
                            return Err(unknown);
                        }
                        if self.dst != 0 || self.src != 0 || self.off != 0 || self.imm != 0 {
                            return Err(bad("exit takes no operands"));
                        }
                    }
                    JmpOp::Call => {
                        if is32 || self.src_kind() == SrcKind::Reg {
                            return Err(unknown);
                        }
                        if self.dst != 0 || self.off != 0 {
                            return Err(bad("call takes only an immediate"));
                        }
                        if self.src > CALL_DIRECT {
                            return Err(bad("unknown call kind"));
                        }
                    }
                    _ => match self.src_kind() {
                        SrcKind::Imm if self.src != 0 => return Err(bad("source register set on immediate form")),
                        SrcKind::Reg if self.imm != 0 => return Err(bad("immediate set on register form")),
                        _ => {}
                    },
                }
            }
            Class::Ld => {
                if self.opcode != LD_DW_IMM {
                    return Err(unknown);
                }
                if self.off != 0 {
                    return Err(bad("lddw offset must be zero"));
                }
                match self.src {
                    0 => {}
                    PSEUDO_MAP_REF => {
                        if self.imm < 0 || self.wide_imm != Some(0) {
                            return Err(bad("bad map reference"));
                        }
                    }
                    PSEUDO_MAP_VALUE => {
                        if self.imm < 0 {
                            return Err(bad("bad map reference"));
                        }
                    }
                    _ => return Err(bad("unknown pseudo load")),
                }
            }
            Class::Ldx => {
                if self.opcode & 0xe0 != BPF_MEM {
                    return Err(unknown);
                }
                if self.imm != 0 {
                    return Err(bad("ldx immediate must be zero"));
                }
            }
            Class::St => {
                if self.opcode & 0xe0 != BPF_MEM {
                    return Err(unknown);
                }
                if self.src != 0 {
                    return Err(bad("st source must be zero"));
                }
            }
            Class::Stx => {
                if self.opcode & 0xe0 != BPF_MEM {
                    return Err(unknown);
                }
                if self.imm != 0 {
                    return Err(bad("stx immediate must be zero"));
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&asm::format_insn(self, None))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MapType {
    Array,
    Hash,
}

impl MapType {
    pub fn name(self) -> &'static str {
        match self {
            MapType::Array => "array",
            MapType::Hash => "hash",
        }
    }
}

/// Declared shape of a map. `spin_lock` reserves a 4-byte lock word at value
/// offset 0 that programs may only touch through the lock helpers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MapDef {
    pub map_type: MapType,
    pub key_size: u32,
    pub value_size: u32,
    pub max_entries: u32,
    #[serde(default)]
    pub spin_lock: bool,
}

impl MapDef {
    pub fn new(map_type: MapType, key_size: u32, value_size: u32, max_entries: u32) -> Self {
        MapDef { map_type, key_size, value_size, max_entries, spin_lock: false }
    }
}

/// Map named by the program. `def` is `None` for maps that must be bound to
/// an existing object at load time.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MapRef {
    pub name: String,
    pub def: Option<MapDef>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum ProgType {
    #[default]
    Xdp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Subprog {
    pub start: usize,
    pub len: usize,
}

impl Subprog {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn contains(&self, idx: usize) -> bool {
        idx >= self.start && idx < self.end()
    }
}

/// An instruction sequence partitioned into subprogs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Program {
    insns: Vec<Instruction>,
    subprogs: Vec<Subprog>,
    prog_type: ProgType,
    map_refs: Vec<MapRef>,
    /// Slot number of each instruction, plus one trailing entry for the end.
    slot_starts: Vec<usize>,
}

impl Program {
    pub fn new(
        insns: Vec<Instruction>,
        subprogs: Vec<Subprog>,
        prog_type: ProgType,
        map_refs: Vec<MapRef>,
    ) -> Result<Self, IsaError> {
        let slot_starts = slot_table(&insns);
        let prog = Program { insns, subprogs, prog_type, map_refs, slot_starts };
        prog.check_invariants()?;
        Ok(prog)
    }

    /// Builds a program whose subprog table is derived from local call targets.
    pub fn from_insns(insns: Vec<Instruction>, map_refs: Vec<MapRef>) -> Result<Self, IsaError> {
        let slots = slot_table(&insns);
        let mut starts = vec![0usize];
        for (i, insn) in insns.iter().enumerate() {
            if insn.is_local_call() {
                let target = slots[i] as i64 + 1 + insn.imm as i64;
                match usize::try_from(target).ok().and_then(|t| slots[..insns.len()].binary_search(&t).ok()) {
                    Some(t) => starts.push(t),
                    None => {
                        return Err(IsaError::InvalidProgram(format!(
                            "instruction {i}: call target is not an instruction boundary"
                        )))
                    }
                }
            }
        }
        starts.sort_unstable();
        starts.dedup();
        let subprogs = if insns.is_empty() { Vec::new() } else { subprogs_from_starts(&starts, insns.len()) };
        Program::new(insns, subprogs, ProgType::Xdp, map_refs)
    }

    fn check_invariants(&self) -> Result<(), IsaError> {
        let n = self.insns.len();
        let mut expect = 0;
        for sp in &self.subprogs {
            if sp.start != expect || sp.len == 0 {
                return Err(IsaError::InvalidProgram(format!(
                    "subprog table does not partition the program at instruction {expect}"
                )));
            }
            expect = sp.end();
        }
        if expect != n {
            return Err(IsaError::InvalidProgram("subprog table does not cover the program".into()));
        }
        for (i, insn) in self.insns.iter().enumerate() {
            if matches!(insn.pseudo(), Pseudo::MapRef | Pseudo::MapValue)
                && insn.imm as usize >= self.map_refs.len()
            {
                return Err(IsaError::InvalidProgram(format!(
                    "instruction {i}: map index {} has no map reference",
                    insn.imm
                )));
            }
        }
        Ok(())
    }

    pub fn insns(&self) -> &[Instruction] {
        &self.insns
    }

    pub fn insn(&self, idx: usize) -> &Instruction {
        &self.insns[idx]
    }

    pub fn len(&self) -> usize {
        self.insns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.insns.is_empty()
    }

    /// Subprog partition; never empty for a non-empty program.
    pub fn subprogs(&self) -> &[Subprog] {
        &self.subprogs
    }

    pub fn prog_type(&self) -> ProgType {
        self.prog_type
    }

    pub fn map_refs(&self) -> &[MapRef] {
        &self.map_refs
    }

    pub fn with_map_refs(mut self, map_refs: Vec<MapRef>) -> Result<Self, IsaError> {
        self.map_refs = map_refs;
        self.check_invariants()?;
        Ok(self)
    }

    pub fn slot_count(&self) -> usize {
        *self.slot_starts.last().unwrap_or(&0)
    }

    pub fn slot_of(&self, idx: usize) -> usize {
        self.slot_starts[idx]
    }

    pub fn index_of_slot(&self, slot: usize) -> Option<usize> {
        self.slot_starts[..self.insns.len()].binary_search(&slot).ok()
    }

    /// Branch target of a jump or local call, as an instruction index.
    /// `None` if the target is outside the program or inside a wide load.
    pub fn jump_target(&self, idx: usize) -> Option<usize> {
        let insn = &self.insns[idx];
        let rel = if insn.is_local_call() {
            insn.imm as i64
        } else if insn.jmp_op().is_some_and(|op| op != JmpOp::Call && op != JmpOp::Exit) {
            insn.off as i64
        } else {
            return None;
        };
        let target = self.slot_starts[idx] as i64 + 1 + rel;
        if target < 0 {
            return None;
        }
        self.index_of_slot(target as usize)
    }

    /// Slot-relative displacement that makes `from` jump to `to`.
    pub fn displacement(&self, from: usize, to: usize) -> i64 {
        self.slot_starts[to] as i64 - self.slot_starts[from] as i64 - 1
    }

    pub fn subprog_of(&self, idx: usize) -> usize {
        self.subprogs.iter().position(|sp| sp.contains(idx)).unwrap_or(0)
    }

    pub fn subprog_index_at(&self, start: usize) -> Option<usize> {
        self.subprogs.iter().position(|sp| sp.start == start)
    }
}

fn slot_table(insns: &[Instruction]) -> Vec<usize> {
    let mut out = Vec::with_capacity(insns.len() + 1);
    let mut slot = 0;
    for insn in insns {
        out.push(slot);
        slot += insn.slots();
    }
    out.push(slot);
    out
}

pub(crate) fn subprogs_from_starts(starts: &[usize], len: usize) -> Vec<Subprog> {
    let mut out = Vec::with_capacity(starts.len());
    for (k, &s) in starts.iter().enumerate() {
        let end = starts.get(k + 1).copied().unwrap_or(len);
        out.push(Subprog { start: s, len: end - s });
    }
    out
}

/// Stable helper identifiers shared by the assembler, verifier and runtime.
pub mod helper_ids {
    pub const MAP_LOOKUP_ELEM: u32 = 1;
    pub const MAP_UPDATE_ELEM: u32 = 2;
    pub const MAP_DELETE_ELEM: u32 = 3;
    pub const TRACE_EMIT: u32 = 4;
    pub const ACQUIRE_TEST_REF: u32 = 5;
    pub const RELEASE_TEST_REF: u32 = 6;
    pub const SPIN_LOCK: u32 = 7;
    pub const SPIN_UNLOCK: u32 = 8;
    pub const ITER_NUM_NEW: u32 = 9;
    pub const ITER_NUM_NEXT: u32 = 10;
    pub const ITER_NUM_DESTROY: u32 = 11;
    pub const GET_PRANDOM_U32: u32 = 12;
    pub const TRACE_EMIT_MEM: u32 = 13;

    pub const NAMES: &[(u32, &str)] = &[
        (MAP_LOOKUP_ELEM, "map_lookup_elem"),
        (MAP_UPDATE_ELEM, "map_update_elem"),
        (MAP_DELETE_ELEM, "map_delete_elem"),
        (TRACE_EMIT, "trace_emit"),
        (ACQUIRE_TEST_REF, "acquire_test_ref"),
        (RELEASE_TEST_REF, "release_test_ref"),
        (SPIN_LOCK, "spin_lock"),
        (SPIN_UNLOCK, "spin_unlock"),
        (ITER_NUM_NEW, "iter_num_new"),
        (ITER_NUM_NEXT, "iter_num_next"),
        (ITER_NUM_DESTROY, "iter_num_destroy"),
        (GET_PRANDOM_U32, "get_prandom_u32"),
        (TRACE_EMIT_MEM, "trace_emit_mem"),
    ];

    pub fn name(id: u32) -> Option<&'static str> {
        NAMES.iter().find(|(i, _)| *i == id).map(|(_, n)| *n)
    }

    pub fn by_name(name: &str) -> Option<u32> {
        NAMES.iter().find(|(_, n)| *n == name).map(|(i, _)| *i)
    }
}

/// Entry points of map implementations that `call direct:<name>` resolves to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DirectOp {
    ArrayLookup,
    ArrayUpdate,
    ArrayDelete,
    HashLookup,
    HashUpdate,
    HashDelete,
}

impl DirectOp {
    pub const ALL: [DirectOp; 6] = [
        DirectOp::ArrayLookup,
        DirectOp::ArrayUpdate,
        DirectOp::ArrayDelete,
        DirectOp::HashLookup,
        DirectOp::HashUpdate,
        DirectOp::HashDelete,
    ];

    pub fn id(self) -> u32 {
        match self {
            DirectOp::ArrayLookup => 1,
            DirectOp::ArrayUpdate => 2,
            DirectOp::ArrayDelete => 3,
            DirectOp::HashLookup => 4,
            DirectOp::HashUpdate => 5,
            DirectOp::HashDelete => 6,
        }
    }

    pub fn from_id(id: u32) -> Option<DirectOp> {
        DirectOp::ALL.into_iter().find(|op| op.id() == id)
    }

    pub fn name(self) -> &'static str {
        match self {
            DirectOp::ArrayLookup => "array_lookup",
            DirectOp::ArrayUpdate => "array_update",
            DirectOp::ArrayDelete => "array_delete",
            DirectOp::HashLookup => "hash_lookup",
            DirectOp::HashUpdate => "hash_update",
            DirectOp::HashDelete => "hash_delete",
        }
    }

    pub fn from_name(name: &str) -> Option<DirectOp> {
        DirectOp::ALL.into_iter().find(|op| op.name() == name)
    }

    /// The generic helper this entry point stands in for.
    pub fn helper(self) -> u32 {
        match self {
            DirectOp::ArrayLookup | DirectOp::HashLookup => helper_ids::MAP_LOOKUP_ELEM,
            DirectOp::ArrayUpdate | DirectOp::HashUpdate => helper_ids::MAP_UPDATE_ELEM,
            DirectOp::ArrayDelete | DirectOp::HashDelete => helper_ids::MAP_DELETE_ELEM,
        }
    }

    pub fn for_helper(helper: u32, map_type: MapType) -> Option<DirectOp> {
        use helper_ids::*;
        Some(match (helper, map_type) {
            (MAP_LOOKUP_ELEM, MapType::Array) => DirectOp::ArrayLookup,
            (MAP_UPDATE_ELEM, MapType::Array) => DirectOp::ArrayUpdate,
            (MAP_DELETE_ELEM, MapType::Array) => DirectOp::ArrayDelete,
            (MAP_LOOKUP_ELEM, MapType::Hash) => DirectOp::HashLookup,
            (MAP_UPDATE_ELEM, MapType::Hash) => DirectOp::HashUpdate,
            (MAP_DELETE_ELEM, MapType::Hash) => DirectOp::HashDelete,
            _ => return None,
        })
    }
}
