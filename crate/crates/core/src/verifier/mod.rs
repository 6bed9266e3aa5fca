// Copyright 2026 The ubpf-forge Authors
// SPDX-License-Identifier: Apache-2.0

//! Symbolic-execution verifier.
//!
//! Paths are explored depth first from a worklist of forked states. At
//! pruning points the current state is checkpointed; once every path below a
//! checkpoint has finished it joins the cache, and later states that it
//! subsumes are dropped. Scalars that decide branches, offset pointers or
//! size helper memory are marked precise and the marks are pushed back
//! through the trace into the checkpoints they depend on.

mod check;
mod error;
pub mod helpers;
mod liveness;
mod precision;
mod prune;
pub mod state;

pub use error::{RejectKind, Rejection, SafetyProperty};
pub use helpers::{ArgKind, Effect, HelperRegistry, HelperSpec, RetKind};
pub use liveness::Liveness;
pub use state::{RegState, RegType};

use crate::cfg::CfgReport;
use crate::isa::{helper_ids, MapDef, Program};
use check::Next;
use error::{violation, Violation};
use precision::Marks;
use serde::Serialize;
use state::{Frame, State, TraceEntry};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

/// Traces longer than this force a non-cacheable checkpoint, which bounds
/// the size of every state copied on a fork.
const MAX_TRACE: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum LogLevel {
    /// Only the final `REJECT` line.
    Quiet,
    #[default]
    Normal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerifierConfig {
    /// Instructions simulated across all paths before giving up.
    pub complexity_limit: u64,
    pub stack_size: usize,
    pub max_call_depth: usize,
    pub pruning_enabled: bool,
    pub log_level: LogLevel,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        VerifierConfig {
            complexity_limit: 100_000,
            stack_size: 512,
            max_call_depth: 8,
            pruning_enabled: true,
            log_level: LogLevel::Normal,
        }
    }
}

/// Which outcomes of a conditional jump some path took.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BranchSeen {
    pub taken: bool,
    pub fallthrough: bool,
}

/// Maps a map helper call site was seen with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CallSite {
    One(usize),
    Many,
}

/// Facts gathered during exploration for later passes.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Notes {
    pub branches: BTreeMap<usize, BranchSeen>,
    pub map_calls: BTreeMap<usize, CallSite>,
    /// Loads through pointers into hash map values.
    pub untrusted_loads: BTreeSet<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Stats {
    pub insns_processed: u64,
    /// Paths started: the initial one plus one per fork.
    pub states_explored: u64,
    pub pruned: u64,
    pub checkpoints: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct VerifiedProgram {
    pub seen: Vec<bool>,
    pub notes: Notes,
    pub log: String,
    pub stats: Stats,
}

struct Checkpoint {
    state: State,
    parent: Option<usize>,
    /// Live paths below this checkpoint, counting child checkpoints.
    pending: u32,
    /// Trace from the parent checkpoint to this one.
    segment: Vec<TraceEntry>,
    /// Joins the cache once `pending` reaches zero.
    cacheable: bool,
}

pub(crate) struct Env<'a> {
    p: &'a Program,
    helpers: &'a HelperRegistry,
    maps: &'a [MapDef],
    config: &'a VerifierConfig,
    points: &'a BTreeSet<usize>,
    iter_sites: BTreeSet<usize>,
    live: Liveness,
    cps: Vec<Checkpoint>,
    /// Checkpoints that may prune, by instruction: finished ones, plus
    /// every checkpoint at an iterator site.
    cache: HashMap<usize, Vec<usize>>,
    worklist: Vec<(State, usize)>,
    next_id: u32,
    seen: Vec<bool>,
    notes: Notes,
    stats: Stats,
    log: String,
    /// Stack slot touched by the instruction being simulated.
    step_slot: Option<(usize, usize)>,
}

/// Explores every feasible path of `p`. `maps[k]` describes the map named
/// by `p.map_refs()[k]`.
pub fn verify(
    p: &Program,
    helpers: &HelperRegistry,
    maps: &[MapDef],
    cfg: &CfgReport,
    config: &VerifierConfig,
) -> Result<VerifiedProgram, Rejection> {
    let iter_sites = (0..p.len())
        .filter(|&i| p.insn(i).is_helper_call() && p.insn(i).imm as u32 == helper_ids::ITER_NUM_NEXT)
        .collect();
    let mut env = Env {
        p,
        helpers,
        maps,
        config,
        points: &cfg.pruning_points,
        iter_sites,
        live: Liveness::compute(p, helpers),
        cps: Vec::new(),
        cache: HashMap::new(),
        worklist: Vec::new(),
        next_id: 1,
        seen: vec![false; p.len()],
        notes: Notes::default(),
        stats: Stats::default(),
        log: String::new(),
        step_slot: None,
    };
    match env.run() {
        Ok(()) => Ok(VerifiedProgram { seen: env.seen, notes: env.notes, log: env.log, stats: env.stats }),
        Err((v, insn)) => {
            let kind = v.kind;
            let mut r = Rejection {
                property: kind.property(),
                kind,
                insn,
                detail: v.detail,
                log: String::new(),
                stats: env.stats,
            };
            let _ = writeln!(env.log, "{r}");
            r.log = env.log;
            Err(r)
        }
    }
}

impl<'a> Env<'a> {
    fn logging(&self) -> bool {
        self.config.log_level == LogLevel::Normal
    }

    fn tracking(&self) -> bool {
        self.config.pruning_enabled
    }

    pub(crate) fn fresh_id(&mut self) -> u32 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    fn initial_state(&self) -> State {
        let mut main = Frame::new(0, None, 0);
        main.regs[1] = RegState::pointer(RegType::PtrToCtx, 0);
        State { frames: vec![main], refs: Vec::new(), released: Vec::new(), lock: None, insn: 0, cp: None, trace: Vec::new() }
    }

    fn run(&mut self) -> Result<(), (Violation, usize)> {
        self.stats.states_explored = 1;
        let init = self.initial_state();
        self.worklist.push((init, usize::MAX));
        while let Some((mut st, from)) = self.worklist.pop() {
            if self.logging() && from != usize::MAX {
                let _ = writeln!(self.log, "from {from} to {}:", st.insn);
            }
            loop {
                let idx = st.insn;
                if self.tracking() {
                    if let Some(c) = self.find_subsuming(&st) {
                        self.stats.pruned += 1;
                        if self.logging() {
                            let _ = writeln!(self.log, "{idx}: safe (pruned against checkpoint {c})");
                        }
                        self.inherit_precision(&mut st, c);
                        self.finish_path(st.cp);
                        break;
                    }
                    let cacheable = self.points.contains(&idx) || self.iter_sites.contains(&idx);
                    if cacheable || st.trace.len() >= MAX_TRACE {
                        self.checkpoint(&mut st, cacheable);
                    }
                }
                if self.stats.insns_processed >= self.config.complexity_limit {
                    let detail = format!(
                        "processed {} instructions, limit is {}",
                        self.stats.insns_processed, self.config.complexity_limit
                    );
                    return Err((violation(RejectKind::ComplexityLimitExceeded, detail), idx));
                }
                self.stats.insns_processed += 1;
                self.seen[idx] = true;
                self.step_slot = None;
                let depth = st.depth();
                let before = self.logging().then(|| st.cur().regs);
                let next = match self.step(&mut st) {
                    Ok(n) => n,
                    Err(v) => {
                        if self.logging() {
                            let _ = writeln!(self.log, "{idx}: {}", self.p.insn(idx));
                        }
                        return Err((v, idx));
                    }
                };
                if let Some(before) = before {
                    self.log_step(idx, depth, &before, &st, &next);
                }
                let entry = TraceEntry { insn: idx, frame: depth, slot: self.step_slot };
                match next {
                    Next::Continue => {
                        if self.tracking() {
                            st.trace.push(entry);
                        }
                    }
                    Next::Fork(mut other) => {
                        if self.tracking() {
                            st.trace.push(entry);
                            other.trace.push(entry);
                            if let Some(c) = st.cp {
                                self.cps[c].pending += 1;
                            }
                        }
                        self.stats.states_explored += 1;
                        self.worklist.push((other, idx));
                    }
                    Next::End => {
                        self.finish_path(st.cp);
                        break;
                    }
                }
            }
        }
        Ok(())
    }

    fn log_step(&mut self, idx: usize, depth: usize, before: &[RegState; 11], st: &State, next: &Next) {
        let mut line = format!("{idx}: {}", self.p.insn(idx));
        let mut delta = String::new();
        match next {
            Next::End => {}
            _ if st.depth() != depth => {
                let _ = write!(delta, " frame{}", st.depth());
            }
            _ => {
                for (r, (b, a)) in before.iter().zip(st.cur().regs.iter()).enumerate() {
                    if b != a {
                        let _ = write!(delta, " r{r}={a}");
                    }
                }
            }
        }
        if !delta.is_empty() {
            line.push_str(" ;");
            line.push_str(&delta);
        }
        line.push('\n');
        self.log.push_str(&line);
    }

    fn find_subsuming(&self, st: &State) -> Option<usize> {
        let iter_site = self.iter_sites.contains(&st.insn);
        let list = self.cache.get(&st.insn)?;
        list.iter()
            .rev()
            .copied()
            .find(|&c| (iter_site || self.cps[c].pending == 0) && prune::states_equal(&self.cps[c].state, st, &self.live))
    }

    fn checkpoint(&mut self, st: &mut State, cacheable: bool) {
        let segment = std::mem::take(&mut st.trace);
        let mut snap = st.clone();
        snap.cp = None;
        let id = self.cps.len();
        let iter_site = self.iter_sites.contains(&st.insn);
        self.cps.push(Checkpoint { state: snap, parent: st.cp, pending: 1, segment, cacheable: cacheable && !iter_site });
        if cacheable && iter_site {
            self.cache.entry(st.insn).or_default().push(id);
        }
        self.stats.checkpoints += 1;
        st.cp = Some(id);
    }

    fn finish_path(&mut self, mut cp: Option<usize>) {
        while let Some(c) = cp {
            self.cps[c].pending -= 1;
            if self.cps[c].pending > 0 {
                break;
            }
            if self.cps[c].cacheable {
                self.cache.entry(self.cps[c].state.insn).or_default().push(c);
            }
            cp = self.cps[c].parent;
        }
    }

    /// Marks registers of the current frame precise and propagates the
    /// requirement backwards.
    pub(crate) fn mark_precise(&mut self, st: &mut State, regs: &[u8]) {
        if !self.tracking() {
            return;
        }
        let f = st.depth();
        let mut m = Marks::default();
        for &r in regs {
            let reg = &mut st.frames[f].regs[r as usize];
            if reg.is_scalar() && !reg.precise {
                reg.precise = true;
                m.mark_reg(f, r);
            }
        }
        self.propagate(st, m);
    }

    fn propagate(&mut self, st: &State, mut m: Marks) {
        if m.is_empty() {
            return;
        }
        for e in st.trace.iter().rev() {
            precision::backtrack(self.p, e, &mut m);
        }
        let mut cp = st.cp;
        while let Some(c) = cp {
            if m.is_empty() || !precision::apply(&mut self.cps[c].state, &mut m) {
                break;
            }
            for e in self.cps[c].segment.iter().rev() {
                precision::backtrack(self.p, e, &mut m);
            }
            cp = self.cps[c].parent;
        }
    }

    /// After pruning against checkpoint `c`, whatever was precise there must
    /// be precise along the pruned path too.
    fn inherit_precision(&mut self, st: &mut State, c: usize) {
        let mut m = Marks::default();
        let top = st.depth();
        for (f, (of, cf)) in self.cps[c].state.frames.iter().zip(st.frames.iter_mut()).enumerate() {
            let mask = if f == top {
                self.live.live_in(st.insn)
            } else {
                self.live.caller_live(self.cps[c].state.frames[f + 1].callsite.unwrap_or(0))
            };
            for r in 0..10u8 {
                let (o, cur) = (&of.regs[r as usize], &mut cf.regs[r as usize]);
                if mask & (1 << r) != 0 && o.is_scalar() && o.precise && cur.is_scalar() && !cur.precise {
                    cur.precise = true;
                    m.mark_reg(f, r);
                }
            }
            for (k, os) in of.slots.iter().enumerate() {
                if os.spill.is_some_and(|s| s.is_scalar() && s.precise) {
                    if let Some(cs) = cf.slots.get_mut(k).and_then(|s| s.spill.as_mut()) {
                        if cs.is_scalar() && !cs.precise {
                            cs.precise = true;
                            m.slots.insert((f, k));
                        }
                    }
                }
            }
        }
        self.propagate(st, m);
    }

    fn note_branch(&mut self, idx: usize, taken: bool, fallthrough: bool) {
        let e = self.notes.branches.entry(idx).or_default();
        e.taken |= taken;
        e.fallthrough |= fallthrough;
    }

    fn note_map_call(&mut self, idx: usize, map: usize) {
        let e = self.notes.map_calls.entry(idx).or_insert(CallSite::One(map));
        if *e != CallSite::One(map) {
            *e = CallSite::Many;
        }
    }
}

#[cfg(test)]
mod tests;
