// Copyright 2026 The ubpf-forge Authors
// SPDX-License-Identifier: Apache-2.0

use crate::isa::{helper_ids as id, MapType};

/// Contract for one argument register.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArgKind {
    /// `lddw rX, map[..]` result.
    ConstMapPtr,
    /// Readable memory of the map's key size.
    MapKey,
    /// Readable memory of the map's value size.
    MapValue,
    /// Any initialized scalar.
    Scalar,
    /// Readable memory whose length is the next argument.
    MemPtr,
    /// Constant-bounded length for the preceding `MemPtr`.
    MemSize,
    /// Map value pointer at the lock word of a map declared with a lock.
    SpinLock,
    /// Stack slot that does not yet hold a live iterator.
    IterUninit,
    /// Stack slot holding an iterator created by `iter_num_new`.
    IterActive,
    /// Scalar carrying a reference from an acquiring helper.
    RefToken,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RetKind {
    /// Always 0.
    Zero,
    MapValueOrNull,
    Srange(i64, i64),
    Urange(u64, u64),
    /// Scalar in `[1, u32::MAX]` carrying a fresh reference.
    RefToken,
    /// 0 at the end of iteration, otherwise `[1, u32::MAX]`.
    IterItem,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Effect {
    None,
    Acquire,
    Release,
    Lock,
    Unlock,
    IterNew,
    IterNext,
    IterDestroy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HelperSpec {
    pub id: u32,
    pub name: &'static str,
    pub args: &'static [ArgKind],
    pub ret: RetKind,
    pub effect: Effect,
    /// Map types for which xform replaces the call with an inline sequence.
    pub inline_for: &'static [MapType],
}

impl HelperSpec {
    /// True when the first argument names a map and the call can be
    /// rewritten to a direct call.
    pub fn is_map_op(&self) -> bool {
        self.args.first() == Some(&ArgKind::ConstMapPtr)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HelperRegistry {
    specs: Vec<HelperSpec>,
}

const U32_MAX: u64 = u32::MAX as u64;

impl HelperRegistry {
    pub fn empty() -> HelperRegistry {
        HelperRegistry { specs: Vec::new() }
    }

    /// Every helper the runtime implements.
    pub fn standard() -> HelperRegistry {
        use ArgKind::*;
        let spec = |id, name, args, ret, effect| HelperSpec { id, name, args, ret, effect, inline_for: &[] };
        let mut lookup = spec(
            id::MAP_LOOKUP_ELEM,
            "map_lookup_elem",
            &[ConstMapPtr, MapKey],
            RetKind::MapValueOrNull,
            Effect::None,
        );
        lookup.inline_for = &[MapType::Array];
        HelperRegistry {
            specs: vec![
                lookup,
                spec(
                    id::MAP_UPDATE_ELEM,
                    "map_update_elem",
                    &[ConstMapPtr, MapKey, MapValue, Scalar],
                    RetKind::Srange(-1, 0),
                    Effect::None,
                ),
                spec(id::MAP_DELETE_ELEM, "map_delete_elem", &[ConstMapPtr, MapKey], RetKind::Srange(-1, 0), Effect::None),
                spec(id::TRACE_EMIT, "trace_emit", &[Scalar], RetKind::Zero, Effect::None),
                spec(id::ACQUIRE_TEST_REF, "acquire_test_ref", &[], RetKind::RefToken, Effect::Acquire),
                spec(id::RELEASE_TEST_REF, "release_test_ref", &[RefToken], RetKind::Zero, Effect::Release),
                spec(id::SPIN_LOCK, "spin_lock", &[SpinLock], RetKind::Zero, Effect::Lock),
                spec(id::SPIN_UNLOCK, "spin_unlock", &[SpinLock], RetKind::Zero, Effect::Unlock),
                spec(id::ITER_NUM_NEW, "iter_num_new", &[IterUninit, Scalar, Scalar], RetKind::Zero, Effect::IterNew),
                spec(id::ITER_NUM_NEXT, "iter_num_next", &[IterActive], RetKind::IterItem, Effect::IterNext),
                spec(id::ITER_NUM_DESTROY, "iter_num_destroy", &[IterActive], RetKind::Zero, Effect::IterDestroy),
                spec(id::GET_PRANDOM_U32, "get_prandom_u32", &[], RetKind::Urange(0, U32_MAX), Effect::None),
                spec(id::TRACE_EMIT_MEM, "trace_emit_mem", &[MemPtr, MemSize], RetKind::Zero, Effect::None),
            ],
        }
    }

    pub fn register(&mut self, spec: HelperSpec) {
        self.specs.retain(|s| s.id != spec.id);
        self.specs.push(spec);
    }

    pub fn get(&self, id: u32) -> Option<&HelperSpec> {
        self.specs.iter().find(|s| s.id == id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &HelperSpec> {
        self.specs.iter()
    }
}

impl Default for HelperRegistry {
    fn default() -> Self {
        HelperRegistry::standard()
    }
}
