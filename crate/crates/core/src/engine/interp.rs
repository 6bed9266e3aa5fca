// Copyright 2026 The ubpf-forge Authors
// SPDX-License-Identifier: Apache-2.0

use super::mem::Memory;
use super::{alu, bounds, endian, ExecError, ExecOptions, ExecResult, MapBackend, Vm, MAX_FRAMES};
use crate::absdom::CmpOp;
use crate::isa::{AluOp, Class, DirectOp, Endian, Program, Pseudo, SrcKind, REG_COUNT};

struct Saved {
    ret: usize,
    regs: [u64; 5],
}

/// Runs `p` on `packet`. Loads that fault on a removed hash value read as
/// zero; any other fault is an error.
pub fn interpret(
    p: &Program,
    packet: &[u8],
    maps: &mut dyn MapBackend,
    opts: &ExecOptions,
) -> Result<ExecResult, ExecError> {
    let mut vm = Vm::new(packet, maps, opts);
    let mut r = [0u64; REG_COUNT];
    r[1] = vm.mem.ctx_addr();
    r[10] = vm.mem.push_stack();
    let mut frames: Vec<Saved> = Vec::new();
    let mut pc = 0usize;
    loop {
        vm.tick()?;
        let insn = *p.insn(pc);
        let (d, s) = (insn.dst as usize, insn.src as usize);
        let src = |r: &[u64; REG_COUNT], w: u32| match insn.src_kind() {
            SrcKind::Reg => r[s],
            SrcKind::Imm if w == 32 => insn.imm as u32 as u64,
            SrcKind::Imm => insn.imm as i64 as u64,
        };
        let mut next = pc + 1;
        match insn.class() {
            Class::Alu32 | Class::Alu64 => {
                let w = if insn.class() == Class::Alu64 { 64 } else { 32 };
                let op = insn.alu_op().ok_or_else(|| bad(pc, "unknown ALU op"))?;
                r[d] = if op == AluOp::End {
                    endian(insn.byte_order().unwrap_or(Endian::Le), insn.imm as u32, r[d])
                } else {
                    alu(op, w, r[d], src(&r, w))
                };
            }
            Class::Ld => {
                r[d] = match insn.pseudo() {
                    Pseudo::MapRef => Vm::map_handle(insn.imm as usize),
                    Pseudo::MapValue => vm.map_value_addr(pc, insn.imm as usize, insn.wide_imm.unwrap_or(0))?,
                    _ => insn.wide_value(),
                };
            }
            Class::Ldx => {
                let size = insn.mem_size().map_or(8, |m| m.bytes()) as usize;
                let a = r[s].wrapping_add(insn.off as i64 as u64);
                r[d] = match vm.mem.load(a, size) {
                    Ok(v) => v,
                    Err(_) if Memory::is_untrusted(a) => 0,
                    Err(f) => return Err(bounds(pc, f)),
                };
            }
            Class::St | Class::Stx => {
                let size = insn.mem_size().map_or(8, |m| m.bytes()) as usize;
                let a = r[d].wrapping_add(insn.off as i64 as u64);
                let v = if insn.class() == Class::Stx { r[s] } else { insn.imm as i64 as u64 };
                vm.mem.store(a, size, v).map_err(|f| bounds(pc, f))?;
            }
            Class::Jmp | Class::Jmp32 => {
                if insn.is_exit() {
                    match frames.pop() {
                        None => return Ok(vm.finish(r[0])),
                        Some(f) => {
                            vm.mem.pop_stack();
                            r[6..].copy_from_slice(&f.regs);
                            next = f.ret;
                        }
                    }
                } else if insn.is_local_call() {
                    if frames.len() + 1 >= MAX_FRAMES {
                        return Err(ExecError::CallDepth);
                    }
                    let mut saved = [0u64; 5];
                    saved.copy_from_slice(&r[6..]);
                    frames.push(Saved { ret: pc + 1, regs: saved });
                    r[10] = vm.mem.push_stack();
                    next = p.jump_target(pc).ok_or_else(|| bad(pc, "bad call target"))?;
                } else if insn.is_call() {
                    let args = [r[1], r[2], r[3], r[4], r[5]];
                    r[0] = if insn.is_direct_call() {
                        let op = DirectOp::from_id(insn.imm as u32).ok_or_else(|| bad(pc, "unknown direct call"))?;
                        vm.call_direct(pc, op, args)?
                    } else {
                        vm.call_helper(pc, insn.imm as u32, args)?
                    };
                } else if insn.is_ja() {
                    next = p.jump_target(pc).ok_or_else(|| bad(pc, "bad jump target"))?;
                } else {
                    let w = if insn.class() == Class::Jmp32 { 32 } else { 64 };
                    let op = CmpOp::from_insn(&insn).map_err(|e| bad(pc, &e.to_string()))?;
                    if op.eval(r[d], src(&r, w), w) {
                        next = p.jump_target(pc).ok_or_else(|| bad(pc, "bad jump target"))?;
                    }
                }
            }
        }
        pc = next;
        if pc >= p.len() {
            return Err(bad(pc, "fell off the end of the program"));
        }
    }
}

fn bad(pc: usize, what: &str) -> ExecError {
    ExecError::BadOperand { pc, what: what.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::MapInstance;
    use crate::isa::parse_asm;

    fn run(src: &str, packet: &[u8]) -> Result<ExecResult, ExecError> {
        let p = parse_asm(src).unwrap();
        let mut maps: Vec<MapInstance> = p.map_refs().iter().map(|m| MapInstance::new(m.def.unwrap())).collect();
        interpret(&p, packet, &mut maps, &ExecOptions::default())
    }

    #[test]
    fn returns_r0() {
        assert_eq!(run("mov64 r0, 7\nexit", &[]).unwrap().r0, 7);
        assert_eq!(run("mov64 r0, 7\ndiv64 r0, 0\nexit", &[]).unwrap().r0, 0);
    }

    #[test]
    fn drop_udp_sample() {
        let mut udp = vec![0u8; 42];
        udp[12] = 0x08;
        udp[23] = 17;
        let mut tcp = udp.clone();
        tcp[23] = 6;
        let src = crate::samples::DROP_UDP;
        assert_eq!(run(src, &udp).unwrap().r0, 1);
        assert_eq!(run(src, &tcp).unwrap().r0, 2);
        assert_eq!(run(src, &udp[..10]).unwrap().r0, 2);
    }

    #[test]
    fn local_calls_preserve_callee_saved_registers() {
        let src = "mov64 r6, 5\nmov64 r1, 2\ncall f\nadd64 r0, r6\nexit\n.subprog f\nmov64 r6, 100\nmov64 r0, r1\nexit";
        assert_eq!(run(src, &[]).unwrap().r0, 7);
    }

    #[test]
    fn iterator_counts_items() {
        let src = "mov64 r1, r10\nadd64 r1, -8\nmov64 r2, 3\nmov64 r3, 7\ncall iter_num_new\nmov64 r6, 0\n\
                   L:\nmov64 r1, r10\nadd64 r1, -8\ncall iter_num_next\njeq r0, 0, done\nadd64 r6, r0\nja L\n\
                   done:\nmov64 r1, r10\nadd64 r1, -8\ncall iter_num_destroy\nmov64 r0, r6\nexit";
        assert_eq!(run(src, &[]).unwrap().r0, 4 + 5 + 6 + 7);
    }

    #[test]
    fn fuel_bounds_execution() {
        let p = parse_asm("mov64 r0, 0\nja -1\nexit").unwrap();
        let opts = ExecOptions { fuel: 50, ..ExecOptions::default() };
        let e = interpret(&p, &[], &mut Vec::new(), &opts).unwrap_err();
        assert_eq!(e, ExecError::FuelExhausted(50));
    }

    #[test]
    fn prandom_is_seeded() {
        let p = parse_asm("call get_prandom_u32\nexit").unwrap();
        let a = ExecOptions { seed: 1, ..ExecOptions::default() };
        let b = ExecOptions { seed: 2, ..ExecOptions::default() };
        let ra = interpret(&p, &[], &mut Vec::new(), &a).unwrap().r0;
        assert_eq!(interpret(&p, &[], &mut Vec::new(), &a).unwrap().r0, ra);
        assert_ne!(interpret(&p, &[], &mut Vec::new(), &b).unwrap().r0, ra);
    }

    #[test]
    fn array_lookup_returns_value_address() {
        let src = ".map a array 4 8 2\nstw [r10-4], 1\nlddw r1, map[a]\nmov64 r2, r10\nadd64 r2, -4\n\
                   call map_lookup_elem\nstdw [r0+0], 42\nldxdw r0, [r0+0]\nexit";
        let p = parse_asm(src).unwrap();
        let mut maps = vec![MapInstance::new(p.map_refs()[0].def.unwrap())];
        let r = interpret(&p, &[], &mut maps, &ExecOptions::default()).unwrap();
        assert_eq!(r.r0, 42);
        assert_eq!(maps[0].get(&1u32.to_le_bytes()).unwrap(), 42u64.to_le_bytes().to_vec());
    }
}
