// Copyright 2026 The ubpf-forge Authors
// SPDX-License-Identifier: Apache-2.0

use serde::Serialize;
use std::fmt;
use thiserror::Error;

/// The safety properties a rejected program violates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum SafetyProperty {
    MemorySafety,
    TypeSafety,
    ResourceSafety,
    InformationLeakSafety,
    DataRaceFreedom,
    Termination,
    DeadlockFreedom,
    ExecutionContextInvariants,
}

impl SafetyProperty {
    pub const ALL: [SafetyProperty; 8] = [
        SafetyProperty::MemorySafety,
        SafetyProperty::TypeSafety,
        SafetyProperty::ResourceSafety,
        SafetyProperty::InformationLeakSafety,
        SafetyProperty::DataRaceFreedom,
        SafetyProperty::Termination,
        SafetyProperty::DeadlockFreedom,
        SafetyProperty::ExecutionContextInvariants,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SafetyProperty::MemorySafety => "Memory Safety",
            SafetyProperty::TypeSafety => "Type Safety",
            SafetyProperty::ResourceSafety => "Resource Safety",
            SafetyProperty::InformationLeakSafety => "Information Leak Safety",
            SafetyProperty::DataRaceFreedom => "Data Race Freedom",
            SafetyProperty::Termination => "Termination",
            SafetyProperty::DeadlockFreedom => "Deadlock Freedom",
            SafetyProperty::ExecutionContextInvariants => "Upholding Execution Context Invariants",
        }
    }
}

impl fmt::Display for SafetyProperty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum RejectKind {
    // memory
    OutOfBounds,
    MisalignedAccess,
    NullDeref,
    ScalarDeref,
    InvalidDeref,
    VariableStackAccess,
    UntrustedStore,
    DanglingStackPointer,
    IterSlotAccess,
    CallDepthExceeded,
    // types
    ArgTypeMismatch,
    BadPointerArithmetic,
    NonScalarReturn,
    BadMapReference,
    // resources
    ResourceLeak,
    ExitWhileLocked,
    ReleaseOfUnownedRef,
    DoubleRelease,
    // information leaks
    UninitializedStackRead,
    UninitializedRegister,
    PointerLeak,
    PointerComparison,
    // data races
    KernelStateAccess,
    // termination
    ComplexityLimitExceeded,
    // locks
    SecondLockHeld,
    UnlockWithoutLock,
    LockRegionMismatch,
    CallWhileLocked,
    // context
    UninitializedReturn,
    BadReturnValue,
    CtxWrite,
    InvalidCtxAccess,
    WriteToR10,
    UnknownHelper,
    UnsupportedInstruction,
}

impl RejectKind {
    pub fn property(self) -> SafetyProperty {
        use RejectKind::*;
        use SafetyProperty::*;
        match self {
            OutOfBounds | MisalignedAccess | NullDeref | ScalarDeref | InvalidDeref | VariableStackAccess
            | UntrustedStore | DanglingStackPointer | IterSlotAccess | CallDepthExceeded => MemorySafety,
            ArgTypeMismatch | BadPointerArithmetic | NonScalarReturn | BadMapReference => TypeSafety,
            ResourceLeak | ExitWhileLocked | ReleaseOfUnownedRef | DoubleRelease => ResourceSafety,
            UninitializedStackRead | UninitializedRegister | PointerLeak | PointerComparison => InformationLeakSafety,
            KernelStateAccess => DataRaceFreedom,
            ComplexityLimitExceeded => Termination,
            SecondLockHeld | UnlockWithoutLock | LockRegionMismatch | CallWhileLocked => DeadlockFreedom,
            UninitializedReturn | BadReturnValue | CtxWrite | InvalidCtxAccess | WriteToR10 | UnknownHelper
            | UnsupportedInstruction => ExecutionContextInvariants,
        }
    }
}

impl fmt::Display for RejectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// A verification failure. `log` holds the full verifier log whose last
/// line is the `REJECT` line.
#[derive(Clone, Debug, Error, PartialEq, Eq, Serialize)]
#[error("REJECT {property} at {insn}: {kind}: {detail}")]
pub struct Rejection {
    pub property: SafetyProperty,
    pub kind: RejectKind,
    pub insn: usize,
    pub detail: String,
    pub log: String,
    pub stats: super::Stats,
}

/// Rejection before the log is attached.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Violation {
    pub kind: RejectKind,
    pub detail: String,
}

pub(crate) fn violation(kind: RejectKind, detail: impl Into<String>) -> Violation {
    Violation { kind, detail: detail.into() }
}

pub(crate) type VResult<T> = Result<T, Violation>;
