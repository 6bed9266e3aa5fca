// Copyright 2026 The ubpf-forge Authors
// SPDX-License-Identifier: Apache-2.0

//! Rewrites applied after verification: dead-code elimination and map
//! helper inlining or devirtualization.

use crate::isa::{
    subprogs_from_starts, AluOp, DirectOp, Instruction, IsaError, JmpOp, MapDef, MapType, MemSize, Program,
};
use crate::verifier::{BranchSeen, CallSite, HelperRegistry, VerifiedProgram};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum XformError {
    #[error("instruction {insn}: jump displacement {disp} does not fit after rewriting")]
    OffsetFixup { insn: usize, disp: i64 },
    #[error(transparent)]
    Isa(#[from] IsaError),
}

/// Instruction plus the index it jumps or calls to, in the program being built.
#[derive(Clone, Copy)]
struct Item {
    insn: Instruction,
    target: Option<usize>,
}

fn items_of(p: &Program) -> Vec<Item> {
    (0..p.len()).map(|i| Item { insn: *p.insn(i), target: p.jump_target(i) }).collect()
}

fn assemble(p: &Program, items: Vec<Item>, mut starts: Vec<usize>) -> Result<Program, XformError> {
    let mut slots = Vec::with_capacity(items.len() + 1);
    let mut s = 0usize;
    for it in &items {
        slots.push(s);
        s += it.insn.slots();
    }
    slots.push(s);
    let mut insns: Vec<Instruction> = items.iter().map(|it| it.insn).collect();
    for (k, it) in items.iter().enumerate() {
        let Some(t) = it.target else { continue };
        let disp = slots[t] as i64 - slots[k] as i64 - 1;
        if insns[k].is_local_call() {
            insns[k].imm = i32::try_from(disp).map_err(|_| XformError::OffsetFixup { insn: k, disp })?;
        } else {
            insns[k].off = i16::try_from(disp).map_err(|_| XformError::OffsetFixup { insn: k, disp })?;
        }
    }
    starts.sort_unstable();
    starts.dedup();
    let subprogs = subprogs_from_starts(&starts, insns.len());
    Ok(Program::new(insns, subprogs, p.prog_type(), p.map_refs().to_vec())?)
}

/// Removes instructions no path reached and resolves branches that went
/// only one way. Returns the new program and, per old instruction, its new
/// index if it was kept.
pub fn eliminate_dead_code(
    p: &Program,
    seen: &[bool],
    branches: &BTreeMap<usize, BranchSeen>,
) -> Result<(Program, Vec<Option<usize>>), XformError> {
    let n = p.len();
    let decided = |i: usize| branches.get(&i).filter(|b| b.taken != b.fallthrough).copied();
    let kept: Vec<bool> = (0..n)
        .map(|i| seen[i] && !(p.insn(i).is_cond_jump() && decided(i).is_some_and(|b| b.fallthrough)))
        .collect();
    // First kept instruction at or after each old index, in new numbering.
    let mut next_kept = vec![0usize; n + 1];
    let mut count = kept.iter().filter(|k| **k).count();
    next_kept[n] = count;
    for i in (0..n).rev() {
        if kept[i] {
            count -= 1;
        }
        next_kept[i] = count;
    }
    let mut items = Vec::with_capacity(n);
    let mut remap = vec![None; n];
    for (i, it) in items_of(p).into_iter().enumerate() {
        if !kept[i] {
            continue;
        }
        remap[i] = Some(items.len());
        let target = it.target.map(|t| next_kept[t]);
        let insn = if it.insn.is_cond_jump() && decided(i).is_some_and(|b| b.taken) {
            Instruction::ja(0)
        } else {
            it.insn
        };
        items.push(Item { insn, target });
    }
    let starts = p
        .subprogs()
        .iter()
        .filter(|sp| (sp.start..sp.end()).any(|i| kept[i]))
        .map(|sp| next_kept[sp.start])
        .collect();
    Ok((assemble(p, items, starts)?, remap))
}

/// Inline sequence for a map helper, with jump targets relative to its start.
fn inline_template(helper: u32, def: &MapDef, map: usize) -> Option<Vec<Item>> {
    let max = i32::try_from(def.max_entries).ok()?;
    let vs = i32::try_from(def.value_size).ok()?;
    if helper != crate::isa::helper_ids::MAP_LOOKUP_ELEM || def.map_type != MapType::Array {
        return None;
    }
    let at = |insn| Item { insn, target: None };
    Some(vec![
        at(Instruction::ld_map_value(1, map as u32, 0)),
        at(Instruction::ldx(MemSize::W, 0, 2, 0)),
        Item { insn: Instruction::jmp_imm(JmpOp::Jge, 0, max, 0), target: Some(6) },
        at(Instruction::alu64_imm(AluOp::Mul, 0, vs)),
        at(Instruction::alu64_reg(AluOp::Add, 0, 1)),
        Item { insn: Instruction::ja(0), target: Some(7) },
        at(Instruction::mov64_imm(0, 0)),
    ])
}

/// Replaces map helper calls whose map is known statically: lookups in
/// array maps are inlined, the rest call the map implementation directly.
/// Returns the new program and the new index of each old instruction.
pub fn rewrite_map_helpers(
    p: &Program,
    maps: &[MapDef],
    helpers: &HelperRegistry,
    calls: &BTreeMap<usize, CallSite>,
) -> Result<(Program, Vec<usize>), XformError> {
    let old = items_of(p);
    let mut expansion: Vec<Option<Vec<Item>>> = vec![None; p.len()];
    for (i, it) in old.iter().enumerate() {
        if !it.insn.is_helper_call() {
            continue;
        }
        let id = it.insn.imm as u32;
        let (Some(spec), Some(CallSite::One(m))) = (helpers.get(id), calls.get(&i)) else { continue };
        let Some(def) = maps.get(*m) else { continue };
        if !spec.is_map_op() {
            continue;
        }
        let inlined = if spec.inline_for.contains(&def.map_type) { inline_template(id, def, *m) } else { None };
        expansion[i] = inlined.or_else(|| {
            DirectOp::for_helper(id, def.map_type)
                .map(|op| vec![Item { insn: Instruction::call_direct(op.id()), target: None }])
        });
    }
    let mut start = Vec::with_capacity(p.len() + 1);
    let mut k = 0;
    for e in &expansion {
        start.push(k);
        k += e.as_ref().map_or(1, Vec::len);
    }
    start.push(k);
    let mut items = Vec::with_capacity(k);
    for (i, it) in old.into_iter().enumerate() {
        match expansion[i].take() {
            Some(seq) => {
                let base = start[i];
                items.extend(seq.into_iter().map(|s| Item { insn: s.insn, target: s.target.map(|t| base + t) }));
            }
            None => items.push(Item { insn: it.insn, target: it.target.map(|t| start[t]) }),
        }
    }
    let starts = p.subprogs().iter().map(|sp| start[sp.start]).collect();
    start.pop();
    Ok((assemble(p, items, starts)?, start))
}

/// Result of the full post-verification pipeline.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transformed {
    pub program: Program,
    /// Loads through hash map value pointers, in new numbering.
    pub untrusted_loads: BTreeSet<usize>,
    pub removed: usize,
    pub inlined: usize,
    pub direct_calls: usize,
}

pub fn transform(
    p: &Program,
    v: &VerifiedProgram,
    maps: &[MapDef],
    helpers: &HelperRegistry,
) -> Result<Transformed, XformError> {
    let (dce, remap) = eliminate_dead_code(p, &v.seen, &v.notes.branches)?;
    let calls = v
        .notes
        .map_calls
        .iter()
        .filter_map(|(i, c)| remap[*i].map(|j| (j, *c)))
        .collect();
    let (out, start) = rewrite_map_helpers(&dce, maps, helpers, &calls)?;
    let untrusted_loads =
        v.notes.untrusted_loads.iter().filter_map(|i| remap[*i]).map(|j| start[j]).collect();
    let mut inlined = 0;
    let mut direct_calls = 0;
    for j in 0..dce.len() {
        let width = start.get(j + 1).copied().unwrap_or(out.len()) - start[j];
        if width > 1 {
            inlined += 1;
        } else if out.insn(start[j]).is_direct_call() && !dce.insn(j).is_direct_call() {
            direct_calls += 1;
        }
    }
    Ok(Transformed { program: out, untrusted_loads, removed: p.len() - dce.len(), inlined, direct_calls })
}
