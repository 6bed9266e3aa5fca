// Copyright 2026 The ubpf-forge Authors
// SPDX-License-Identifier: Apache-2.0

//! State subsumption: does a fully explored state cover the current one?

use super::liveness::{Liveness, RegMask};
use super::state::{ByteTag, RegType, RegState, Slot, State};

/// Injective pairing of old ids to current ids.
#[derive(Default)]
struct IdMap {
    pairs: Vec<(u32, u32)>,
}

impl IdMap {
    fn check(&mut self, old: u32, cur: u32) -> bool {
        if old == 0 || cur == 0 {
            return old == cur;
        }
        for &(o, c) in &self.pairs {
            if o == old || c == cur {
                return o == old && c == cur;
            }
        }
        self.pairs.push((old, cur));
        true
    }
}

fn regsafe(old: &RegState, cur: &RegState, ids: &mut IdMap) -> bool {
    if old.rtype == RegType::NotInit {
        return true;
    }
    if old.rtype != cur.rtype {
        return false;
    }
    match old.rtype {
        RegType::NotInit => true,
        RegType::Scalar => {
            (!old.precise || old.value.includes(&cur.value))
                && (old.ref_id == 0 && cur.ref_id == 0 || ids.check(old.ref_id, cur.ref_id))
        }
        RegType::PtrToCtx | RegType::PtrToPacketEnd => old.off == cur.off,
        RegType::ConstMapPtr => old.map == cur.map,
        RegType::PtrToStack => old.frame == cur.frame && old.off == cur.off && old.value.includes(&cur.value),
        RegType::PtrToPacket => {
            old.off == cur.off
                && old.range <= cur.range
                && old.value.includes(&cur.value)
                && ids.check(old.id, cur.id)
        }
        RegType::PtrToMapValue | RegType::PtrToMapValueOrNull => {
            old.map == cur.map && old.off == cur.off && old.value.includes(&cur.value) && ids.check(old.id, cur.id)
        }
    }
}

fn slotsafe(old: &Slot, cur: &Slot, ids: &mut IdMap) -> bool {
    if let Some(oi) = old.iter {
        return match cur.iter {
            Some(ci) => oi.state == ci.state && ids.check(oi.ref_id, ci.ref_id),
            None => false,
        };
    }
    if let Some(os) = &old.spill {
        if let Some(cs) = &cur.spill {
            return regsafe(os, cs, ids);
        }
        if os.is_scalar() && !os.precise {
            return cur.iter.is_none() && cur.bytes.iter().all(|b| matches!(b, ByteTag::Misc | ByteTag::Zero));
        }
        return false;
    }
    if old.bytes.iter().all(|b| *b == ByteTag::Invalid) {
        return true;
    }
    if cur.iter.is_some() {
        return false;
    }
    old.bytes.iter().zip(cur.bytes.iter()).all(|(o, c)| match o {
        ByteTag::Invalid => true,
        ByteTag::Misc => match c {
            ByteTag::Misc | ByteTag::Zero => true,
            ByteTag::Spill => cur.spill.is_some_and(|s| s.is_scalar()),
            ByteTag::Invalid => false,
        },
        ByteTag::Zero => *c == ByteTag::Zero,
        ByteTag::Spill => false,
    })
}

/// True when every path from `cur` behaves like some path already explored
/// from `old`, so `cur` need not be explored. Iterator depth is not
/// compared.
pub(crate) fn states_equal(old: &State, cur: &State, live: &Liveness) -> bool {
    if old.insn != cur.insn || old.frames.len() != cur.frames.len() {
        return false;
    }
    let mut ids = IdMap::default();
    let top = cur.frames.len() - 1;
    for (k, (of, cf)) in old.frames.iter().zip(cur.frames.iter()).enumerate() {
        if of.callsite != cf.callsite || of.subprog != cf.subprog {
            return false;
        }
        let mask: RegMask = if k == top { live.live_in(cur.insn) } else { live.caller_live(cur.frames[k + 1].callsite.unwrap_or(0)) };
        for r in 0..10 {
            if mask & (1 << r) != 0 && !regsafe(&of.regs[r], &cf.regs[r], &mut ids) {
                return false;
            }
        }
        let n = of.slots.len().max(cf.slots.len());
        for s in 0..n {
            if !slotsafe(of.slot(s), cf.slot(s), &mut ids) {
                return false;
            }
        }
    }
    if old.refs.len() != cur.refs.len() {
        return false;
    }
    for (o, c) in old.refs.iter().zip(cur.refs.iter()) {
        if o.kind != c.kind || !ids.check(o.id, c.id) {
            return false;
        }
    }
    match (&old.lock, &cur.lock) {
        (None, None) => true,
        (Some(o), Some(c)) => o.map == c.map && ids.check(o.id, c.id),
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::absdom::ScalarAbs;
    use crate::isa::parse_asm;
    use crate::verifier::helpers::HelperRegistry;
    use crate::verifier::state::Frame;

    fn state_with_r1(r1: RegState) -> State {
        let mut f = Frame::new(0, None, 0);
        f.regs[1] = r1;
        State { frames: vec![f], refs: vec![], released: vec![], lock: None, insn: 0, cp: None, trace: vec![] }
    }

    fn r1_live() -> Liveness {
        let p = parse_asm("mov64 r0, r1\nexit").unwrap();
        Liveness::compute(&p, &HelperRegistry::standard())
    }

    #[test]
    fn identical_states_are_equal() {
        let s = state_with_r1(RegState::const_scalar(3));
        assert!(states_equal(&s, &s, &r1_live()));
    }

    #[test]
    fn imprecise_scalar_compares_by_type() {
        let old = state_with_r1(RegState::unknown_scalar());
        let cur = state_with_r1(RegState::const_scalar(3));
        assert!(states_equal(&old, &cur, &r1_live()));
        let old = state_with_r1(RegState::const_scalar(4));
        assert!(states_equal(&old, &cur, &r1_live()));
    }

    #[test]
    fn precise_scalar_needs_inclusion() {
        let mut r = RegState::scalar(ScalarAbs::from_urange(0, 10, 64).unwrap());
        r.precise = true;
        let old = state_with_r1(r);
        assert!(states_equal(&old, &state_with_r1(RegState::const_scalar(3)), &r1_live()));
        assert!(!states_equal(&old, &state_with_r1(RegState::const_scalar(11)), &r1_live()));
    }

    #[test]
    fn pointer_does_not_match_scalar() {
        let old = state_with_r1(RegState::unknown_scalar());
        let cur = state_with_r1(RegState::pointer(RegType::PtrToPacket, 0));
        assert!(!states_equal(&old, &cur, &r1_live()));
    }

    #[test]
    fn dead_register_is_ignored() {
        let p = parse_asm("mov64 r0, 0\nexit").unwrap();
        let live = Liveness::compute(&p, &HelperRegistry::standard());
        let old = state_with_r1(RegState::unknown_scalar());
        let cur = state_with_r1(RegState::pointer(RegType::PtrToPacket, 0));
        assert!(states_equal(&old, &cur, &live));
    }

    #[test]
    fn id_mapping_is_injective() {
        let mut ids = IdMap::default();
        assert!(ids.check(1, 5));
        assert!(ids.check(1, 5));
        assert!(!ids.check(2, 5));
        assert!(!ids.check(1, 6));
        assert!(!ids.check(0, 6));
        assert!(ids.check(0, 0));
    }
}
