// Copyright 2026 The ubpf-forge Authors
// SPDX-License-Identifier: Apache-2.0

//! Program execution: a reference interpreter and a lowered image with
//! prologue, epilogue, exception table and optional constant blinding.

mod interp;
mod jit;
pub mod maps;
pub mod mem;

pub use interp::interpret;
pub use jit::{exec_image, lower, BlindConfig, ExceptionEntry, ImageFunc, JitImage, LOp, Operand, BLIND_REG};
pub use maps::{MapBackend, MapError, MapInstance, MapSnapshot, ValueLoc};

use crate::absdom::sext;
use crate::isa::{helper_ids as id, AluOp, DirectOp, Endian, MapType};
use mem::{Fault, Memory};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

/// Calls nested deeper than this abort the run; verified programs stay far
/// below it.
pub const MAX_FRAMES: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecError {
    #[error("fuel exhausted after {0} steps")]
    FuelExhausted(u64),
    #[error("instruction {pc}: access of {size} bytes at {addr:#x} is out of bounds")]
    BoundsViolation { pc: usize, addr: u64, size: usize },
    #[error("function {func} op {index}: faulting load has no exception entry")]
    MissingExceptionEntry { func: usize, index: usize },
    #[error("image is read-only")]
    ReadOnlyImage,
    #[error("image is not finalized")]
    NotFinalized,
    #[error("instruction {pc}: call to unknown helper {id}")]
    UnknownHelper { pc: usize, id: u32 },
    #[error("instruction {pc}: {what}")]
    BadOperand { pc: usize, what: String },
    #[error("call depth exceeds {MAX_FRAMES}")]
    CallDepth,
}

/// Something a program reported through the trace helpers.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum TraceEvent {
    Value(u64),
    Bytes(Vec<u8>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExecOptions {
    pub fuel: u64,
    pub stack_size: usize,
    /// Seeds `get_prandom_u32`.
    pub seed: u64,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions { fuel: 1_000_000, stack_size: 512, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ExecResult {
    pub r0: u64,
    pub trace: Vec<TraceEvent>,
    /// Packet contents after the run.
    pub packet: Vec<u8>,
    pub steps: u64,
}

/// Concrete ALU semantics. Division by zero yields 0 and modulo by zero
/// leaves the dividend. 32-bit results are zero-extended.
pub fn alu(op: AluOp, w: u32, dst: u64, src: u64) -> u64 {
    let m = if w == 32 { u32::MAX as u64 } else { u64::MAX };
    let (a, b) = (dst & m, src & m);
    let sh = (b & (w as u64 - 1)) as u32;
    let r = match op {
        AluOp::Add => a.wrapping_add(b),
        AluOp::Sub => a.wrapping_sub(b),
        AluOp::Mul => a.wrapping_mul(b),
        AluOp::Div => a.checked_div(b).unwrap_or(0),
        AluOp::Mod => a.checked_rem(b).unwrap_or(a),
        AluOp::Or => a | b,
        AluOp::And => a & b,
        AluOp::Xor => a ^ b,
        AluOp::Lsh => a << sh,
        AluOp::Rsh => a >> sh,
        AluOp::Arsh => (sext(a, w) >> sh) as u64,
        AluOp::Neg => a.wrapping_neg(),
        AluOp::Mov => b,
        AluOp::End => a,
    };
    r & m
}

/// Byte swap or truncation of the low `bits` bits.
pub fn endian(order: Endian, bits: u32, v: u64) -> u64 {
    match (order, bits) {
        (Endian::Le, 16) => v & 0xffff,
        (Endian::Le, 32) => v & 0xffff_ffff,
        (Endian::Be, 16) => (v as u16).swap_bytes() as u64,
        (Endian::Be, 32) => (v as u32).swap_bytes() as u64,
        (Endian::Be, _) => v.swap_bytes(),
        (Endian::Le, _) => v,
    }
}

/// State shared by both execution engines for one run.
pub(crate) struct Vm<'m> {
    pub mem: Memory<'m>,
    pub trace: Vec<TraceEvent>,
    rng: ChaCha8Rng,
    next_ref: u64,
    pub steps: u64,
    fuel: u64,
}

const ERR: u64 = -1i64 as u64;

impl<'m> Vm<'m> {
    pub fn new(packet: &[u8], maps: &'m mut dyn MapBackend, opts: &ExecOptions) -> Vm<'m> {
        Vm {
            mem: Memory::new(packet.to_vec(), maps, opts.stack_size),
            trace: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(opts.seed),
            next_ref: 1,
            steps: 0,
            fuel: opts.fuel,
        }
    }

    pub fn tick(&mut self) -> Result<(), ExecError> {
        if self.steps >= self.fuel {
            return Err(ExecError::FuelExhausted(self.steps));
        }
        self.steps += 1;
        Ok(())
    }

    pub fn finish(self, r0: u64) -> ExecResult {
        ExecResult { r0, trace: self.trace, packet: self.mem.packet, steps: self.steps }
    }

    fn map_index(&self, pc: usize, handle: u64) -> Result<usize, ExecError> {
        let (region, k) = mem::split(handle);
        if region != mem::REGION_MAP_HANDLE || self.mem.maps.map(k as usize).is_none() {
            return Err(ExecError::BadOperand { pc, what: format!("{handle:#x} is not a map handle") });
        }
        Ok(k as usize)
    }

    fn read(&mut self, pc: usize, a: u64, size: usize) -> Result<Vec<u8>, ExecError> {
        self.mem.read_lenient(a, size).map_err(|f| bounds(pc, f))
    }

    pub fn call_direct(&mut self, pc: usize, op: DirectOp, args: [u64; 5]) -> Result<u64, ExecError> {
        self.call_helper(pc, op.helper(), args)
    }

    pub fn call_helper(&mut self, pc: usize, helper: u32, a: [u64; 5]) -> Result<u64, ExecError> {
        Ok(match helper {
            id::MAP_LOOKUP_ELEM => {
                let k = self.map_index(pc, a[0])?;
                let def = *self.mem.maps.map(k).expect("checked").def();
                let key = self.read(pc, a[1], def.key_size as usize)?;
                match self.mem.maps.map(k).expect("checked").lookup(&key) {
                    None => 0,
                    Some(ValueLoc::Array(i)) => mem::addr(mem::REGION_ARRAY + k as u32, i * def.value_size),
                    Some(loc) => self.mem.hash_handle(k, loc),
                }
            }
            id::MAP_UPDATE_ELEM => {
                let k = self.map_index(pc, a[0])?;
                let def = *self.mem.maps.map(k).expect("checked").def();
                let key = self.read(pc, a[1], def.key_size as usize)?;
                let value = self.read(pc, a[2], def.value_size as usize)?;
                match self.mem.maps.map_mut(k).expect("checked").update(&key, &value, a[3]) {
                    Ok(()) => 0,
                    Err(_) => ERR,
                }
            }
            id::MAP_DELETE_ELEM => {
                let k = self.map_index(pc, a[0])?;
                let def = *self.mem.maps.map(k).expect("checked").def();
                let key = self.read(pc, a[1], def.key_size as usize)?;
                match self.mem.maps.map_mut(k).expect("checked").delete(&key) {
                    Ok(()) => 0,
                    Err(_) => ERR,
                }
            }
            id::TRACE_EMIT => {
                self.trace.push(TraceEvent::Value(a[0]));
                0
            }
            id::TRACE_EMIT_MEM => {
                let bytes = self.read(pc, a[0], a[1] as usize)?;
                self.trace.push(TraceEvent::Bytes(bytes));
                0
            }
            id::ACQUIRE_TEST_REF => {
                let r = self.next_ref;
                self.next_ref += 1;
                r
            }
            id::RELEASE_TEST_REF => 0,
            id::SPIN_LOCK | id::SPIN_UNLOCK => {
                let v = (helper == id::SPIN_LOCK) as u64;
                self.mem.store(a[0], maps::LOCK_WORD, v).map_err(|f| bounds(pc, f))?;
                0
            }
            id::ITER_NUM_NEW => {
                let (start, end) = (a[1] as u32, a[2] as u32);
                let slot = start.min(end) as u64 | (end as u64) << 32;
                self.mem.store(a[0], 8, slot).map_err(|f| bounds(pc, f))?;
                0
            }
            id::ITER_NUM_NEXT => {
                let slot = self.mem.load(a[0], 8).map_err(|f| bounds(pc, f))?;
                let (cur, end) = (slot as u32, (slot >> 32) as u32);
                if cur < end {
                    let next = cur + 1;
                    self.mem.store(a[0], 4, next as u64).map_err(|f| bounds(pc, f))?;
                    next as u64
                } else {
                    0
                }
            }
            id::ITER_NUM_DESTROY => {
                self.mem.store(a[0], 8, 0).map_err(|f| bounds(pc, f))?;
                0
            }
            id::GET_PRANDOM_U32 => self.rng.next_u32() as u64,
            _ => return Err(ExecError::UnknownHelper { pc, id: helper }),
        })
    }

    /// Address loaded by `lddw rD, map[k]`.
    pub fn map_handle(k: usize) -> u64 {
        mem::addr(mem::REGION_MAP_HANDLE, k as u32)
    }

    /// Address loaded by `lddw rD, map_value[k]+off`.
    pub fn map_value_addr(&self, pc: usize, k: usize, off: i32) -> Result<u64, ExecError> {
        match self.mem.maps.map(k).map(|m| m.def().map_type) {
            Some(MapType::Array) => Ok(mem::addr(mem::REGION_ARRAY + k as u32, off as u32)),
            _ => Err(ExecError::BadOperand { pc, what: format!("map {k} has no direct value address") }),
        }
    }
}

pub(crate) fn bounds(pc: usize, f: Fault) -> ExecError {
    ExecError::BoundsViolation { pc, addr: f.addr, size: f.size }
}
