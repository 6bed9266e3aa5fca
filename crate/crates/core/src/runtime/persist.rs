// Copyright 2026 The ubpf-forge Authors
// SPDX-License-Identifier: Apache-2.0

//! The pin registry on disk: one JSON object per line in `pins.jsonl`.
//! Every pinned object is written together with the objects it holds
//! references on, so a reload rebuilds the same graph.

use super::{Handle, LoadOptions, Payload, Runtime, RuntimeError};
use crate::engine::{BlindConfig, MapInstance, MapSnapshot};
use crate::isa::{format_asm, ProgType};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const STATE_FILE: &str = "pins.jsonl";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StateError {
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("{path}:{line}: {msg}")]
    Corrupt { path: PathBuf, line: usize, msg: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PinRecord {
    Map {
        id: u32,
        #[serde(flatten)]
        snapshot: MapSnapshot,
    },
    Program {
        id: u32,
        asm: String,
        /// Map object ids, one per map the program names.
        maps: Vec<u32>,
        complexity_limit: u64,
        blind: Option<(u64, u64)>,
    },
    Link {
        id: u32,
        prog: u32,
        hook: String,
    },
    Pin {
        path: String,
        id: u32,
    },
}

fn io(path: &Path, e: impl ToString) -> StateError {
    StateError::Io { path: path.to_path_buf(), msg: e.to_string() }
}

fn records(rt: &Runtime) -> Vec<PinRecord> {
    let reg = rt.lock();
    // Pinned objects and everything they reference, dependencies first.
    let mut order: Vec<Handle> = Vec::new();
    let mut seen = BTreeSet::new();
    fn visit(reg: &super::Registry, h: Handle, seen: &mut BTreeSet<Handle>, order: &mut Vec<Handle>) {
        if !seen.insert(h) {
            return;
        }
        let deps = match reg.objects.get(&h).map(|o| &o.payload) {
            Some(Payload::Program(p)) => p.maps.clone(),
            Some(Payload::Link { prog, .. }) => vec![*prog],
            _ => vec![],
        };
        for d in deps {
            visit(reg, d, seen, order);
        }
        order.push(h);
    }
    for &h in reg.pins.values() {
        visit(&reg, h, &mut seen, &mut order);
    }
    let mut out = Vec::new();
    for h in order {
        let Some(obj) = reg.objects.get(&h) else { continue };
        out.push(match &obj.payload {
            Payload::Map(m) => {
                PinRecord::Map { id: h.0, snapshot: m.lock().unwrap_or_else(|e| e.into_inner()).snapshot() }
            }
            Payload::Program(p) => PinRecord::Program {
                id: h.0,
                asm: format_asm(&p.source),
                maps: p.maps.iter().map(|m| m.0).collect(),
                complexity_limit: p.complexity_limit,
                blind: p.blind.map(|b| (b.seed, b.threshold)),
            },
            Payload::Link { prog, hook } => PinRecord::Link { id: h.0, prog: prog.0, hook: hook.clone() },
        });
    }
    out.extend(reg.pins.iter().map(|(path, h)| PinRecord::Pin { path: path.clone(), id: h.0 }));
    out
}

pub(super) fn save(rt: &Runtime, dir: &Path) -> Result<(), StateError> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let path = dir.join(STATE_FILE);
    let tmp = dir.join(format!("{STATE_FILE}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| io(&tmp, e))?;
    for r in records(rt) {
        let line = serde_json::to_string(&r).map_err(|e| io(&tmp, e))?;
        writeln!(f, "{line}").map_err(|e| io(&tmp, e))?;
    }
    f.sync_all().map_err(|e| io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| io(&path, e))
}

pub(super) fn load(rt: &Runtime, dir: &Path) -> Result<(), RuntimeError> {
    let path = dir.join(STATE_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(io(&path, e).into()),
    };
    let corrupt =
        |line: usize, msg: String| RuntimeError::State(StateError::Corrupt { path: path.clone(), line, msg });
    // Saved id to the handle recreated for it.
    let mut ids: BTreeMap<u32, Handle> = BTreeMap::new();
    let lookup = |ids: &BTreeMap<u32, Handle>, id: u32, line: usize| {
        ids.get(&id).copied().ok_or_else(|| corrupt(line, format!("reference to unknown object {id}")))
    };
    for (n, raw) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let line = n + 1;
        let rec: PinRecord = serde_json::from_str(raw).map_err(|e| corrupt(line, e.to_string()))?;
        match rec {
            PinRecord::Map { id, snapshot } => {
                let m = MapInstance::restore(&snapshot).map_err(|e| corrupt(line, e.to_string()))?;
                ids.insert(id, rt.map_insert(m)?);
            }
            PinRecord::Program { id, asm, maps, complexity_limit, blind } => {
                let p = crate::isa::parse_asm(&asm)?;
                if p.map_refs().len() != maps.len() {
                    return Err(corrupt(line, "map count does not match the program".into()));
                }
                let mut opts = LoadOptions::default();
                opts.verifier.complexity_limit = complexity_limit;
                opts.blind = blind.map(|(seed, threshold)| BlindConfig { seed, threshold });
                for (m, id) in p.map_refs().iter().zip(maps) {
                    opts.bindings.insert(m.name.clone(), lookup(&ids, id, line)?);
                }
                ids.insert(id, rt.prog_load(p, &opts)?);
            }
            PinRecord::Link { id, prog, hook } => {
                rt.add_hook(&hook, ProgType::Xdp);
                ids.insert(id, rt.link_create(lookup(&ids, prog, line)?, &hook)?);
            }
            PinRecord::Pin { path, id } => {
                let h = lookup(&ids, id, line)?;
                let mut reg = rt.lock();
                if reg.pins.contains_key(&path) {
                    return Err(RuntimeError::PathExists(path));
                }
                Runtime::take_ref(&mut reg, h, false)?;
                reg.pins.insert(path, h);
            }
        }
    }
    // Only pins and inter-object references keep objects alive now.
    let mut reg = rt.lock();
    for h in ids.into_values() {
        Runtime::drop_ref(&mut reg, h, true)?;
    }
    Ok(())
}
