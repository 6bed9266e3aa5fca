// Copyright 2026 The ubpf-forge Authors
// SPDX-License-Identifier: Apache-2.0

//! Control-flow graph construction and the structural checks that run before
//! symbolic execution.
//!
//! Each subprog is walked separately with an explicit-stack depth-first
//! search. Local calls do not produce CFG edges; they go into the subprog
//! call graph, which must be acyclic.

use crate::isa::Program;
use serde::Serialize;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum EdgeKind {
    Tree,
    Back,
    ForwardOrCross,
}

impl EdgeKind {
    pub fn label(self) -> &'static str {
        match self {
            EdgeKind::Tree => "tree",
            EdgeKind::Back => "back",
            EdgeKind::ForwardOrCross => "forward/cross",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub kind: EdgeKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CfgReport {
    pub visited: Vec<bool>,
    pub edges: Vec<Edge>,
    pub back_edges: Vec<Edge>,
    pub pruning_points: BTreeSet<usize>,
    /// `(caller subprog, callee subprog)` pairs, deduplicated.
    pub subprog_call_graph: Vec<(usize, usize)>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CfgError {
    #[error("program is empty")]
    EmptyProgram,
    #[error("instruction {0} is unreachable")]
    UnreachableInstruction(usize),
    #[error("instruction {0} falls through past the end of its subprog")]
    FallthroughOffSubprog(usize),
    #[error("instruction {0} jumps outside the program or into the middle of a wide load")]
    JumpOutOfRange(usize),
    #[error("instruction {from} jumps into another subprog at {to}")]
    CrossSubprogJump { from: usize, to: usize },
    #[error("instruction {0} calls an address that is not a subprog entry")]
    BadCallTarget(usize),
    #[error("subprog {0} is reachable from itself through calls")]
    RecursiveCall(usize),
}

/// Intra-subprog successors of `idx`: fallthrough first, then the branch
/// target. Errors describe structurally invalid edges.
pub fn successors(p: &Program, idx: usize) -> Result<Vec<usize>, CfgError> {
    let insn = p.insn(idx);
    let sp = p.subprogs()[p.subprog_of(idx)];
    let mut out = Vec::with_capacity(2);
    if insn.is_exit() {
        return Ok(out);
    }
    let falls_through = !insn.is_ja();
    if falls_through {
        if idx + 1 >= sp.end() {
            return Err(CfgError::FallthroughOffSubprog(idx));
        }
        out.push(idx + 1);
    }
    if insn.is_ja() || insn.is_cond_jump() {
        let t = p.jump_target(idx).ok_or(CfgError::JumpOutOfRange(idx))?;
        if !sp.contains(t) {
            return Err(CfgError::CrossSubprogJump { from: idx, to: t });
        }
        if !out.contains(&t) {
            out.push(t);
        }
    }
    Ok(out)
}

/// Callee subprog index of a local call at `idx`.
pub fn call_target(p: &Program, idx: usize) -> Result<usize, CfgError> {
    let t = p.jump_target(idx).ok_or(CfgError::JumpOutOfRange(idx))?;
    p.subprog_index_at(t).ok_or(CfgError::BadCallTarget(idx))
}

pub fn check_cfg(p: &Program) -> Result<CfgReport, CfgError> {
    if p.is_empty() {
        return Err(CfgError::EmptyProgram);
    }
    let n = p.len();
    // 0 = undiscovered, 1 = on stack, 2 = finished
    let mut state = vec![0u8; n];
    let mut edges = Vec::new();
    let mut calls = BTreeSet::new();

    for (k, sp) in p.subprogs().iter().enumerate() {
        let mut stack: Vec<(usize, Vec<usize>, usize)> = Vec::new();
        state[sp.start] = 1;
        stack.push((sp.start, successors(p, sp.start)?, 0));
        while let Some((node, succs, next)) = stack.last_mut() {
            let node = *node;
            if *next == 0 && p.insn(node).is_local_call() {
                calls.insert((k, call_target(p, node)?));
            }
            if *next < succs.len() {
                let t = succs[*next];
                *next += 1;
                let kind = match state[t] {
                    0 => EdgeKind::Tree,
                    1 => EdgeKind::Back,
                    _ => EdgeKind::ForwardOrCross,
                };
                edges.push(Edge { from: node, to: t, kind });
                if kind == EdgeKind::Tree {
                    state[t] = 1;
                    let s = successors(p, t)?;
                    stack.push((t, s, 0));
                }
            } else {
                state[node] = 2;
                stack.pop();
            }
        }
    }

    let subprog_call_graph: Vec<(usize, usize)> = calls.into_iter().collect();
    check_call_graph(p, &subprog_call_graph)?;
    if let Some(i) = state.iter().position(|&s| s == 0) {
        return Err(CfgError::UnreachableInstruction(i));
    }

    let back_edges: Vec<Edge> = edges.iter().copied().filter(|e| e.kind == EdgeKind::Back).collect();
    let mut report = CfgReport {
        visited: vec![true; n],
        edges,
        back_edges,
        pruning_points: BTreeSet::new(),
        subprog_call_graph,
    };
    report.pruning_points = mark_pruning_points(p, &report);
    Ok(report)
}

fn check_call_graph(p: &Program, graph: &[(usize, usize)]) -> Result<(), CfgError> {
    let ns = p.subprogs().len();
    let mut adj = vec![Vec::new(); ns];
    for &(a, b) in graph {
        adj[a].push(b);
    }
    // Cycle detection by colouring DFS from every subprog.
    let mut color = vec![0u8; ns];
    for root in 0..ns {
        if color[root] != 0 {
            continue;
        }
        let mut stack = vec![(root, 0usize)];
        color[root] = 1;
        while let Some((v, i)) = stack.last_mut() {
            let v = *v;
            if *i < adj[v].len() {
                let u = adj[v][*i];
                *i += 1;
                match color[u] {
                    0 => {
                        color[u] = 1;
                        stack.push((u, 0));
                    }
                    1 => return Err(CfgError::RecursiveCall(u)),
                    _ => {}
                }
            } else {
                color[v] = 2;
                stack.pop();
            }
        }
    }
    let mut reached = vec![false; ns];
    reached[0] = true;
    let mut work = vec![0];
    while let Some(v) = work.pop() {
        for &u in &adj[v] {
            if !reached[u] {
                reached[u] = true;
                work.push(u);
            }
        }
    }
    match reached.iter().position(|r| !r) {
        Some(k) => Err(CfgError::UnreachableInstruction(p.subprogs()[k].start)),
        None => Ok(()),
    }
}

/// Targets with more than one incoming edge, back-edge targets, and the
/// instruction after every call.
pub fn mark_pruning_points(p: &Program, r: &CfgReport) -> BTreeSet<usize> {
    let mut indeg = vec![0usize; p.len()];
    for e in &r.edges {
        indeg[e.to] += 1;
    }
    let mut out: BTreeSet<usize> = (0..p.len()).filter(|&i| indeg[i] > 1).collect();
    out.extend(r.back_edges.iter().map(|e| e.to));
    for (i, insn) in p.insns().iter().enumerate() {
        if insn.is_call() && i + 1 < p.len() {
            out.insert(i + 1);
        }
    }
    out.retain(|&i| r.visited[i]);
    out
}

/// Graphviz rendering with edge kinds as labels.
pub fn to_dot(p: &Program, r: &CfgReport) -> String {
    let mut s = String::from("digraph cfg {\n    node [shape=box, fontname=monospace];\n");
    for (k, sp) in p.subprogs().iter().enumerate() {
        let _ = writeln!(s, "    subgraph cluster_{k} {{\n        label=\"subprog {k}\";");
        for i in sp.start..sp.end() {
            let text = p.insn(i).to_string().replace('"', "\\\"");
            let shape = if r.pruning_points.contains(&i) { ", peripheries=2" } else { "" };
            let _ = writeln!(s, "        n{i} [label=\"{i}: {text}\"{shape}];");
        }
        s.push_str("    }\n");
    }
    for e in &r.edges {
        let style = match e.kind {
            EdgeKind::Back => ", style=dashed, color=red",
            EdgeKind::ForwardOrCross => ", style=dotted",
            EdgeKind::Tree => "",
        };
        let _ = writeln!(s, "    n{} -> n{} [label=\"{}\"{style}];", e.from, e.to, e.kind.label());
    }
    for (i, insn) in p.insns().iter().enumerate() {
        if insn.is_local_call() {
            if let Some(t) = p.jump_target(i) {
                let _ = writeln!(s, "    n{i} -> n{t} [label=\"call\", style=bold];");
            }
        }
    }
    s.push_str("}\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::parse_asm;

    fn cfg(src: &str) -> Result<CfgReport, CfgError> {
        check_cfg(&parse_asm(src).unwrap())
    }

    #[test]
    fn single_exit() {
        let r = cfg("exit").unwrap();
        assert_eq!(r.visited, vec![true]);
        assert!(r.edges.is_empty());
        assert!(r.pruning_points.is_empty());
    }

    #[test]
    fn skipped_instruction_is_unreachable() {
        assert_eq!(cfg("ja +1\nmov64 r0, 0\nexit"), Err(CfgError::UnreachableInstruction(1)));
    }

    #[test]
    fn countdown_loop_has_one_back_edge() {
        let r = cfg("mov64 r1, 3\nL: sub64 r1, 1\njne r1, 0, L\nmov64 r0, 0\nexit").unwrap();
        assert_eq!(r.back_edges, vec![Edge { from: 2, to: 1, kind: EdgeKind::Back }]);
        assert_eq!(r.pruning_points, BTreeSet::from([1]));
    }

    #[test]
    fn straight_line_has_no_pruning_points() {
        let r = cfg("mov64 r0, 0\nadd64 r0, 1\nexit").unwrap();
        assert!(r.pruning_points.is_empty());
        assert!(r.edges.iter().all(|e| e.kind == EdgeKind::Tree));
    }

    #[test]
    fn diamond_join_is_pruning_point() {
        let r = cfg("mov64 r0, 0\njeq r1, 0, A\nmov64 r0, 1\nA: exit").unwrap();
        assert_eq!(r.pruning_points, BTreeSet::from([3]));
        assert!(r.edges.iter().any(|e| e.kind == EdgeKind::ForwardOrCross && e.to == 3));
    }

    #[test]
    fn fallthrough_into_next_subprog() {
        let src = "call f\nmov64 r0, 0\n.subprog f\nmov64 r0, 1\nexit";
        assert_eq!(cfg(src), Err(CfgError::FallthroughOffSubprog(1)));
    }

    #[test]
    fn jump_out_of_range_and_into_wide_load() {
        assert_eq!(cfg("ja +5\nexit"), Err(CfgError::JumpOutOfRange(0)));
        assert_eq!(cfg("ja +1\nlddw r0, 1\nexit"), Err(CfgError::JumpOutOfRange(0)));
    }

    #[test]
    fn cross_subprog_jump() {
        let src = "call f\nja g\n.subprog f\ng: mov64 r0, 1\nexit";
        assert_eq!(cfg(src), Err(CfgError::CrossSubprogJump { from: 1, to: 2 }));
    }

    #[test]
    fn recursion_rejected() {
        let src = "call f\nexit\n.subprog f\ncall f\nexit";
        assert_eq!(cfg(src), Err(CfgError::RecursiveCall(1)));
    }

    #[test]
    fn uncalled_subprog_is_unreachable() {
        let src = "mov64 r0, 0\nexit\n.subprog f\nmov64 r0, 1\nexit";
        assert_eq!(cfg(src), Err(CfgError::UnreachableInstruction(2)));
    }

    #[test]
    fn call_adds_graph_edge_and_pruning_point() {
        let src = "call f\nexit\n.subprog f\nmov64 r0, 1\nexit";
        let r = cfg(src).unwrap();
        assert_eq!(r.subprog_call_graph, vec![(0, 1)]);
        assert!(r.pruning_points.contains(&1));
    }

    #[test]
    fn dot_labels_back_edges() {
        let p = parse_asm("mov64 r1, 3\nL: sub64 r1, 1\njne r1, 0, L\nmov64 r0, 0\nexit").unwrap();
        let dot = to_dot(&p, &check_cfg(&p).unwrap());
        assert!(dot.contains("n2 -> n1 [label=\"back\""));
        assert!(dot.starts_with("digraph cfg {"));
    }
}
