// Copyright 2026 The ubpf-forge Authors
// SPDX-License-Identifier: Apache-2.0

use super::{Instruction, IsaError, MapRef, Program, Pseudo, LD_DW_IMM, SLOT_SIZE};

fn read_slot(bytes: &[u8]) -> (u8, u8, u8, i16, i32) {
    let opcode = bytes[0];
    let dst = bytes[1] & 0x0f;
    let src = bytes[1] >> 4;
    let off = i16::from_le_bytes([bytes[2], bytes[3]]);
    let imm = i32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    (opcode, dst, src, off, imm)
}

fn write_slot(out: &mut Vec<u8>, opcode: u8, dst: u8, src: u8, off: i16, imm: i32) {
    out.push(opcode);
    out.push((src << 4) | (dst & 0x0f));
    out.extend_from_slice(&off.to_le_bytes());
    out.extend_from_slice(&imm.to_le_bytes());
}

/// Decodes a raw slot stream. Subprogs are recovered from local call
/// targets; map references come back as unbound placeholders named `mapN`.
pub fn decode(bytes: &[u8]) -> Result<Program, IsaError> {
    if !bytes.len().is_multiple_of(SLOT_SIZE) {
        return Err(IsaError::BadLength(bytes.len()));
    }
    let nslots = bytes.len() / SLOT_SIZE;
    let mut insns = Vec::new();
    let mut slot = 0;
    while slot < nslots {
        let (opcode, dst, src, off, imm) = read_slot(&bytes[slot * SLOT_SIZE..]);
        let mut insn = Instruction::raw(opcode, dst, src, off, imm);
        if opcode == LD_DW_IMM {
            if slot + 1 >= nslots {
                return Err(IsaError::TruncatedWideInstruction { slot });
            }
            let (op2, dst2, src2, off2, imm2) = read_slot(&bytes[(slot + 1) * SLOT_SIZE..]);
            if op2 != 0 || dst2 != 0 || src2 != 0 || off2 != 0 {
                return Err(IsaError::MalformedInstruction {
                    slot: slot + 1,
                    reason: "second slot of a wide load must carry only an immediate".into(),
                });
            }
            insn.wide_imm = Some(imm2);
        }
        insn.validate(slot)?;
        slot += insn.slots();
        insns.push(insn);
    }
    let nmaps = insns
        .iter()
        .filter(|i| matches!(i.pseudo(), Pseudo::MapRef | Pseudo::MapValue))
        .map(|i| i.imm as usize + 1)
        .max()
        .unwrap_or(0);
    let map_refs = (0..nmaps).map(|k| MapRef { name: format!("map{k}"), def: None }).collect();
    Program::from_insns(insns, map_refs)
}

pub fn encode(p: &Program) -> Vec<u8> {
    let mut out = Vec::with_capacity(p.slot_count() * SLOT_SIZE);
    for insn in p.insns() {
        write_slot(&mut out, insn.opcode, insn.dst, insn.src, insn.off, insn.imm);
        if let Some(hi) = insn.wide_imm {
            write_slot(&mut out, 0, 0, 0, 0, hi);
        }
    }
    out
}
