// Copyright 2026 The ubpf-forge Authors
// SPDX-License-Identifier: Apache-2.0

//! Line-oriented assembly text.
//!
//! ```text
//! .map counters array 4 8 16
//!     ldxdw r2, [r1+0]
//!     jeq r2, 0, out
//!     call map_lookup_elem
//! out:
//!     mov64 r0, 2
//!     exit
//! .subprog helper
//!     ...
//! ```
//! Jump operands are labels or signed slot displacements (`+3`, `-1`).

use super::{
    helper_ids, subprogs_from_starts, AluOp, Class, DirectOp, Endian, Instruction, IsaError, JmpOp, MapDef,
    MapRef, MapType, MemSize, Program, ProgType, Pseudo, SrcKind,
};
use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

const HEADER: &str = "; ubpf-forge assembly";

enum Fixup {
    None,
    /// Jump offset to a label, stored in `off`.
    Jump(String),
    /// `call NAME`: subprog label, helper name or helper number.
    Call(String),
    Map(String),
}

struct Pending {
    insn: Instruction,
    fixup: Fixup,
    line: usize,
    col: usize,
}

struct Cursor<'a> {
    line: usize,
    text: &'a str,
    /// Byte offset of `text` within the original line.
    base: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, at: &str, msg: impl Into<String>) -> IsaError {
        let col = self.base + (at.as_ptr() as usize).saturating_sub(self.text.as_ptr() as usize) + 1;
        IsaError::SyntaxError { line: self.line, col, msg: msg.into() }
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn parse_int(s: &str) -> Option<i128> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let v = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i128::from_str_radix(hex, 16).ok()?
    } else {
        if body.is_empty() || !body.chars().all(|c| c.is_ascii_digit()) {
            return None;
        }
        body.parse::<i128>().ok()?
    };
    Some(if neg { -v } else { v })
}

fn parse_reg(cur: &Cursor, s: &str) -> Result<u8, IsaError> {
    let t = s.trim();
    t.strip_prefix('r')
        .and_then(|n| n.parse::<u8>().ok())
        .filter(|&n| n <= 10 && !t[1..].starts_with('0') || t == "r0")
        .ok_or_else(|| cur.err(s, format!("expected register r0..r10, found `{t}`")))
}

fn parse_imm32(cur: &Cursor, s: &str) -> Result<i32, IsaError> {
    match parse_int(s) {
        Some(v) if (i32::MIN as i128..=u32::MAX as i128).contains(&v) => Ok(v as i64 as u32 as i32),
        Some(_) => Err(cur.err(s, "immediate does not fit in 32 bits")),
        None => Err(cur.err(s, format!("expected immediate, found `{}`", s.trim()))),
    }
}

fn parse_mem(cur: &Cursor, s: &str) -> Result<(u8, i16), IsaError> {
    let t = s.trim();
    let inner = t
        .strip_prefix('[')
        .and_then(|x| x.strip_suffix(']'))
        .ok_or_else(|| cur.err(s, "expected memory operand `[rN+off]`"))?;
    let split = inner.find(['+', '-']);
    let (reg, off) = match split {
        Some(p) => (&inner[..p], &inner[p..]),
        None => (inner, "0"),
    };
    let reg = parse_reg(cur, reg)?;
    let off = parse_int(&off.replace(' ', ""))
        .filter(|v| (i16::MIN as i128..=i16::MAX as i128).contains(v))
        .ok_or_else(|| cur.err(s, "memory offset must fit in 16 bits"))?;
    Ok((reg, off as i16))
}

fn operands<'a>(cur: &Cursor, rest: &'a str, n: usize, mnemonic: &str) -> Result<Vec<&'a str>, IsaError> {
    let ops: Vec<&str> = if rest.trim().is_empty() { Vec::new() } else { rest.split(',').collect() };
    if ops.len() != n {
        return Err(cur.err(rest, format!("`{mnemonic}` takes {n} operand(s), found {}", ops.len())));
    }
    Ok(ops)
}

fn alu_op_by_name(name: &str) -> Option<AluOp> {
    AluOp::ALL.into_iter().find(|op| op.mnemonic() == name && !matches!(op, AluOp::End))
}

fn jmp_op_by_name(name: &str) -> Option<JmpOp> {
    JmpOp::ALL.into_iter().find(|op| op.is_conditional() && op.mnemonic() == name)
}

fn mem_size_by_suffix(s: &str) -> Option<MemSize> {
    [MemSize::B, MemSize::H, MemSize::W, MemSize::DW].into_iter().find(|m| m.suffix() == s)
}

fn parse_target(cur: &Cursor, s: &str) -> Result<(i16, Fixup), IsaError> {
    let t = s.trim();
    if t.starts_with('+') || t.starts_with('-') {
        let v = parse_int(t)
            .filter(|v| (i16::MIN as i128..=i16::MAX as i128).contains(v))
            .ok_or_else(|| cur.err(s, "jump displacement must fit in 16 bits"))?;
        Ok((v as i16, Fixup::None))
    } else if is_ident(t) {
        Ok((0, Fixup::Jump(t.to_string())))
    } else {
        Err(cur.err(s, format!("expected label or displacement, found `{t}`")))
    }
}

fn parse_insn(cur: &Cursor, mnemonic: &str, rest: &str) -> Result<(Instruction, Fixup), IsaError> {
    let m = mnemonic;
    // ALU: add64, mov32, neg64, le16, be32 ...
    for (suffix, class) in [("64", Class::Alu64), ("32", Class::Alu32)] {
        if let Some(base) = m.strip_suffix(suffix) {
            if base == "neg" {
                let ops = operands(cur, rest, 1, m)?;
                let dst = parse_reg(cur, ops[0])?;
                let insn = match class {
                    Class::Alu64 => Instruction::alu64_imm(AluOp::Neg, dst, 0),
                    _ => Instruction::alu32_imm(AluOp::Neg, dst, 0),
                };
                return Ok((insn, Fixup::None));
            }
            if let Some(op) = alu_op_by_name(base) {
                let ops = operands(cur, rest, 2, m)?;
                let dst = parse_reg(cur, ops[0])?;
                let src_txt = ops[1].trim();
                let insn = if src_txt.starts_with('r') {
                    let src = parse_reg(cur, ops[1])?;
                    match class {
                        Class::Alu64 => Instruction::alu64_reg(op, dst, src),
                        _ => Instruction::alu32_reg(op, dst, src),
                    }
                } else {
                    let imm = parse_imm32(cur, ops[1])?;
                    match class {
                        Class::Alu64 => Instruction::alu64_imm(op, dst, imm),
                        _ => Instruction::alu32_imm(op, dst, imm),
                    }
                };
                return Ok((insn, Fixup::None));
            }
        }
    }
    for (prefix, order) in [("le", Endian::Le), ("be", Endian::Be)] {
        if let Some(bits) = m.strip_prefix(prefix) {
            if let Ok(bits @ (16 | 32 | 64)) = bits.parse::<i32>() {
                let ops = operands(cur, rest, 1, m)?;
                let dst = parse_reg(cur, ops[0])?;
                return Ok((Instruction::endian(order, dst, bits), Fixup::None));
            }
        }
    }
    match m {
        "exit" => {
            operands(cur, rest, 0, m)?;
            return Ok((Instruction::exit(), Fixup::None));
        }
        "ja" => {
            let ops = operands(cur, rest, 1, m)?;
            let (off, fix) = parse_target(cur, ops[0])?;
            return Ok((Instruction::ja(off), fix));
        }
        "call" => {
            let ops = operands(cur, rest, 1, m)?;
            let t = ops[0].trim();
            if let Some(name) = t.strip_prefix("direct:") {
                let id = DirectOp::from_name(name)
                    .map(DirectOp::id)
                    .or_else(|| name.parse::<u32>().ok())
                    .ok_or_else(|| cur.err(ops[0], format!("unknown direct call `{name}`")))?;
                return Ok((Instruction::call_direct(id), Fixup::None));
            }
            if t.starts_with('+') || t.starts_with('-') {
                let v = parse_int(t)
                    .filter(|v| (i32::MIN as i128..=i32::MAX as i128).contains(v))
                    .ok_or_else(|| cur.err(ops[0], "call displacement must fit in 32 bits"))?;
                return Ok((Instruction::call_local(v as i32), Fixup::None));
            }
            if let Some(v) = parse_int(t) {
                let id = u32::try_from(v).map_err(|_| cur.err(ops[0], "helper id out of range"))?;
                return Ok((Instruction::call_helper(id), Fixup::None));
            }
            if is_ident(t) {
                return Ok((Instruction::call_helper(0), Fixup::Call(t.to_string())));
            }
            return Err(cur.err(ops[0], format!("bad call target `{t}`")));
        }
        "lddw" => {
            let ops: Vec<&str> = rest.splitn(2, ',').collect();
            if ops.len() != 2 {
                return Err(cur.err(rest, "`lddw` takes 2 operands"));
            }
            let dst = parse_reg(cur, ops[0])?;
            let v = ops[1].trim();
            if let Some(name) = v.strip_prefix("map[").and_then(|x| x.strip_suffix(']')) {
                return Ok((Instruction::ld_map(dst, 0), Fixup::Map(name.trim().to_string())));
            }
            if let Some(body) = v.strip_prefix("map_value[") {
                let close = body.find(']').ok_or_else(|| cur.err(ops[1], "missing `]`"))?;
                let name = body[..close].trim().to_string();
                let tail = body[close + 1..].replace(' ', "");
                let off = if tail.is_empty() {
                    0
                } else {
                    parse_int(&tail)
                        .filter(|x| (i32::MIN as i128..=i32::MAX as i128).contains(x))
                        .ok_or_else(|| cur.err(ops[1], "bad map value offset"))? as i32
                };
                return Ok((Instruction::ld_map_value(dst, 0, off), Fixup::Map(name)));
            }
            let value = parse_int(v)
                .filter(|x| (i64::MIN as i128..=u64::MAX as i128).contains(x))
                .ok_or_else(|| cur.err(ops[1], format!("expected 64-bit immediate, found `{v}`")))?;
            return Ok((Instruction::lddw(dst, value as i64 as u64), Fixup::None));
        }
        _ => {}
    }
    if let Some(sz) = m.strip_prefix("ldx").and_then(mem_size_by_suffix) {
        let ops = operands(cur, rest, 2, m)?;
        let dst = parse_reg(cur, ops[0])?;
        let (base, off) = parse_mem(cur, ops[1])?;
        return Ok((Instruction::ldx(sz, dst, base, off), Fixup::None));
    }
    if let Some(sz) = m.strip_prefix("stx").and_then(mem_size_by_suffix) {
        let ops = operands(cur, rest, 2, m)?;
        let (base, off) = parse_mem(cur, ops[0])?;
        let src = parse_reg(cur, ops[1])?;
        return Ok((Instruction::stx(sz, base, off, src), Fixup::None));
    }
    if let Some(sz) = m.strip_prefix("st").and_then(mem_size_by_suffix) {
        let ops = operands(cur, rest, 2, m)?;
        let (base, off) = parse_mem(cur, ops[0])?;
        let imm = parse_imm32(cur, ops[1])?;
        return Ok((Instruction::st_imm(sz, base, off, imm), Fixup::None));
    }
    let (base, is32) = match m.strip_suffix("32") {
        Some(b) => (b, true),
        None => (m, false),
    };
    if let Some(op) = jmp_op_by_name(base) {
        let ops = operands(cur, rest, 3, m)?;
        let dst = parse_reg(cur, ops[0])?;
        let (off, fix) = parse_target(cur, ops[2])?;
        let insn = if ops[1].trim().starts_with('r') {
            let src = parse_reg(cur, ops[1])?;
            if is32 {
                Instruction::jmp32_reg(op, dst, src, off)
            } else {
                Instruction::jmp_reg(op, dst, src, off)
            }
        } else {
            let imm = parse_imm32(cur, ops[1])?;
            if is32 {
                Instruction::jmp32_imm(op, dst, imm, off)
            } else {
                Instruction::jmp_imm(op, dst, imm, off)
            }
        };
        return Ok((insn, fix));
    }
    Err(cur.err(mnemonic, format!("unknown mnemonic `{mnemonic}`")))
}

fn parse_map_directive(cur: &Cursor, args: &str) -> Result<MapRef, IsaError> {
    let words: Vec<&str> = args.split_whitespace().collect();
    let name = *words.first().ok_or_else(|| cur.err(args, "`.map` needs a name"))?;
    if !is_ident(name) {
        return Err(cur.err(name, format!("bad map name `{name}`")));
    }
    if words.len() == 2 && words[1] == "extern" {
        return Ok(MapRef { name: name.to_string(), def: None });
    }
    if words.len() != 5 && !(words.len() == 6 && words[5] == "lock") {
        return Err(cur.err(args, "expected `.map <name> <array|hash> <key_size> <value_size> <max_entries> [lock]`"));
    }
    let map_type = match words[1] {
        "array" => MapType::Array,
        "hash" => MapType::Hash,
        other => return Err(cur.err(words[1], format!("unknown map type `{other}`"))),
    };
    let num = |w: &str| -> Result<u32, IsaError> {
        parse_int(w)
            .and_then(|v| u32::try_from(v).ok())
            .ok_or_else(|| cur.err(w, format!("expected size, found `{w}`")))
    };
    let mut def = MapDef::new(map_type, num(words[2])?, num(words[3])?, num(words[4])?);
    def.spin_lock = words.len() == 6;
    Ok(MapRef { name: name.to_string(), def: Some(def) })
}

/// Parses assembly text into a [`Program`].
pub fn parse_asm(text: &str) -> Result<Program, IsaError> {
    let mut pending: Vec<Pending> = Vec::new();
    let mut labels: HashMap<String, (usize, usize)> = HashMap::new(); // name -> (insn index, line)
    let mut subprog_starts = vec![0usize];
    let mut subprog_names: HashMap<String, usize> = HashMap::new();
    let mut map_refs: Vec<MapRef> = Vec::new();
    let mut last_subprog_line = 0;

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let code = raw.split(';').next().unwrap_or("");
        let mut cur = Cursor { line, text: code, base: 0 };
        let mut body = code.trim();
        if body.is_empty() {
            continue;
        }
        if let Some(rest) = body.strip_prefix(".map") {
            let m = parse_map_directive(&cur, rest)?;
            if map_refs.iter().any(|r| r.name == m.name) {
                return Err(IsaError::DuplicateLabel { line, label: m.name });
            }
            map_refs.push(m);
            continue;
        }
        if let Some(rest) = body.strip_prefix(".subprog") {
            let name = rest.trim();
            if !is_ident(name) {
                return Err(cur.err(rest, "`.subprog` needs a name"));
            }
            let at = pending.len();
            if labels.insert(name.to_string(), (at, line)).is_some() {
                return Err(IsaError::DuplicateLabel { line, label: name.to_string() });
            }
            if at != 0 {
                if subprog_starts.last() == Some(&at) {
                    return Err(cur.err(rest, "empty subprog"));
                }
                subprog_starts.push(at);
            }
            subprog_names.insert(name.to_string(), at);
            last_subprog_line = line;
            continue;
        }
        if body.starts_with('.') && !body.contains(':') {
            return Err(cur.err(body, format!("unknown directive `{}`", body.split_whitespace().next().unwrap_or(""))));
        }
        // Labels, possibly followed by an instruction.
        while let Some(colon) = body.find(':') {
            let name = body[..colon].trim();
            if !is_ident(name) {
                break;
            }
            if labels.insert(name.to_string(), (pending.len(), line)).is_some() {
                return Err(IsaError::DuplicateLabel { line, label: name.to_string() });
            }
            body = body[colon + 1..].trim();
        }
        if body.is_empty() {
            continue;
        }
        cur.text = body;
        let (mnemonic, rest) = match body.find(char::is_whitespace) {
            Some(p) => (&body[..p], &body[p..]),
            None => (body, ""),
        };
        let col = (body.as_ptr() as usize - code.as_ptr() as usize) + 1;
        cur.base = col - 1;
        let (insn, fixup) = parse_insn(&cur, mnemonic, rest)?;
        pending.push(Pending { insn, fixup, line, col });
    }
    if pending.len() == *subprog_starts.last().unwrap_or(&0) && subprog_starts.len() > 1 {
        return Err(IsaError::SyntaxError { line: last_subprog_line, col: 1, msg: "empty subprog".into() });
    }

    // Slot numbering for label resolution.
    let mut slots = Vec::with_capacity(pending.len() + 1);
    let mut s = 0usize;
    for p in &pending {
        slots.push(s);
        s += p.insn.slots();
    }
    slots.push(s);

    let mut insns = Vec::with_capacity(pending.len());
    for (i, p) in pending.iter().enumerate() {
        let mut insn = p.insn;
        match &p.fixup {
            Fixup::None => {}
            Fixup::Jump(label) => {
                let &(target, _) = labels
                    .get(label)
                    .ok_or_else(|| IsaError::UndefinedLabel { line: p.line, label: label.clone() })?;
                let disp = slots[target] as i64 - slots[i] as i64 - 1;
                insn.off = i16::try_from(disp).map_err(|_| IsaError::SyntaxError {
                    line: p.line,
                    col: p.col,
                    msg: format!("jump to `{label}` is out of 16-bit range"),
                })?;
            }
            Fixup::Call(name) => {
                if let Some(&(target, _)) = labels.get(name) {
                    let disp = slots[target] as i64 - slots[i] as i64 - 1;
                    insn = Instruction::call_local(disp as i32);
                } else if let Some(id) = helper_ids::by_name(name) {
                    insn = Instruction::call_helper(id);
                } else {
                    return Err(IsaError::UndefinedLabel { line: p.line, label: name.clone() });
                }
            }
            Fixup::Map(name) => {
                let idx = map_refs
                    .iter()
                    .position(|m| &m.name == name)
                    .ok_or_else(|| IsaError::UndefinedLabel { line: p.line, label: name.clone() })?;
                insn.imm = idx as i32;
            }
        }
        insns.push(insn);
    }
    let subprogs = if insns.is_empty() { Vec::new() } else { subprogs_from_starts(&subprog_starts, insns.len()) };
    Program::new(insns, subprogs, ProgType::Xdp, map_refs)
}

fn fmt_mem(base: u8, off: i16) -> String {
    if off < 0 {
        format!("[r{base}-{}]", -(off as i32))
    } else {
        format!("[r{base}+{off}]")
    }
}

fn fmt_disp(d: i64) -> String {
    if d < 0 {
        format!("{d}")
    } else {
        format!("+{d}")
    }
}

/// Formats one instruction. `ctx` supplies label names and map names when
/// the instruction is formatted as part of a whole program.
pub(crate) fn format_insn(insn: &Instruction, ctx: Option<(&Program, usize, &dyn Fn(usize) -> String)>) -> String {
    let class = insn.class();
    match class {
        Class::Alu32 | Class::Alu64 => {
            let width = if class == Class::Alu64 { "64" } else { "32" };
            let op = match insn.alu_op() {
                Some(op) => op,
                None => return format!(".raw {:#04x}", insn.opcode),
            };
            match op {
                AluOp::Neg => format!("neg{width} r{}", insn.dst),
                AluOp::End => {
                    let order = if insn.byte_order() == Some(Endian::Be) { "be" } else { "le" };
                    format!("{order}{} r{}", insn.imm, insn.dst)
                }
                _ => match insn.src_kind() {
                    SrcKind::Reg => format!("{}{width} r{}, r{}", op.mnemonic(), insn.dst, insn.src),
                    SrcKind::Imm => format!("{}{width} r{}, {}", op.mnemonic(), insn.dst, insn.imm),
                },
            }
        }
        Class::Jmp | Class::Jmp32 => {
            let op = match insn.jmp_op() {
                Some(op) => op,
                None => return format!(".raw {:#04x}", insn.opcode),
            };
            let target = |disp: i64| -> String {
                if let Some((p, idx, name)) = ctx {
                    if let Some(t) = p.jump_target(idx) {
                        return name(t);
                    }
                }
                fmt_disp(disp)
            };
            match op {
                JmpOp::Exit => "exit".to_string(),
                JmpOp::Ja => format!("ja {}", target(insn.off as i64)),
                JmpOp::Call => match insn.pseudo() {
                    Pseudo::LocalCall => format!("call {}", target(insn.imm as i64)),
                    Pseudo::DirectCall => match DirectOp::from_id(insn.imm as u32) {
                        Some(d) => format!("call direct:{}", d.name()),
                        None => format!("call direct:{}", insn.imm as u32),
                    },
                    _ => match helper_ids::name(insn.imm as u32) {
                        Some(n) => format!("call {n}"),
                        None => format!("call {}", insn.imm as u32),
                    },
                },
                _ => {
                    let suffix = if class == Class::Jmp32 { "32" } else { "" };
                    let rhs = match insn.src_kind() {
                        SrcKind::Reg => format!("r{}", insn.src),
                        SrcKind::Imm => format!("{}", insn.imm),
                    };
                    format!("{}{suffix} r{}, {rhs}, {}", op.mnemonic(), insn.dst, target(insn.off as i64))
                }
            }
        }
        Class::Ld => {
            let map_name = |k: i32| -> String {
                ctx.and_then(|(p, _, _)| p.map_refs().get(k as usize).map(|m| m.name.clone()))
                    .unwrap_or_else(|| format!("map{k}"))
            };
            match insn.pseudo() {
                Pseudo::MapRef => format!("lddw r{}, map[{}]", insn.dst, map_name(insn.imm)),
                Pseudo::MapValue => {
                    let off = insn.wide_imm.unwrap_or(0);
                    if off == 0 {
                        format!("lddw r{}, map_value[{}]", insn.dst, map_name(insn.imm))
                    } else {
                        format!("lddw r{}, map_value[{}]{}", insn.dst, map_name(insn.imm), fmt_disp(off as i64))
                    }
                }
                _ => format!("lddw r{}, {:#x}", insn.dst, insn.wide_value()),
            }
        }
        Class::Ldx => format!(
            "ldx{} r{}, {}",
            insn.mem_size().unwrap_or(MemSize::DW).suffix(),
            insn.dst,
            fmt_mem(insn.src, insn.off)
        ),
        Class::St => format!(
            "st{} {}, {}",
            insn.mem_size().unwrap_or(MemSize::DW).suffix(),
            fmt_mem(insn.dst, insn.off),
            insn.imm
        ),
        Class::Stx => format!(
            "stx{} {}, r{}",
            insn.mem_size().unwrap_or(MemSize::DW).suffix(),
            fmt_mem(insn.dst, insn.off),
            insn.src
        ),
    }
}

/// Renders a program back into assembly that [`parse_asm`] reads to the
/// same [`Program`].
pub fn format_asm(p: &Program) -> String {
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    for m in p.map_refs() {
        match &m.def {
            Some(d) => {
                let _ = write!(
                    out,
                    ".map {} {} {} {} {}",
                    m.name,
                    d.map_type.name(),
                    d.key_size,
                    d.value_size,
                    d.max_entries
                );
                if d.spin_lock {
                    out.push_str(" lock");
                }
                out.push('\n');
            }
            None => {
                let _ = writeln!(out, ".map {} extern", m.name);
            }
        }
    }
    let subprog_name: HashMap<usize, usize> =
        p.subprogs().iter().enumerate().map(|(k, sp)| (sp.start, k)).collect();
    let name_of = |t: usize| -> String {
        match subprog_name.get(&t) {
            Some(&k) if k > 0 => format!("sub{k}"),
            _ => format!("L{t}"),
        }
    };
    let targets: BTreeSet<usize> = (0..p.len()).filter_map(|i| p.jump_target(i)).collect();
    for (i, insn) in p.insns().iter().enumerate() {
        match subprog_name.get(&i) {
            Some(&k) if k > 0 => {
                let _ = writeln!(out, ".subprog sub{k}");
            }
            _ => {
                if targets.contains(&i) {
                    let _ = writeln!(out, "L{i}:");
                }
            }
        }
        let _ = writeln!(out, "    {}", format_insn(insn, Some((p, i, &name_of))));
    }
    out
}
