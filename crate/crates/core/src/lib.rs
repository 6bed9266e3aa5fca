// Copyright 2026 The ubpf-forge Authors
// SPDX-License-Identifier: Apache-2.0

pub mod absdom;
pub mod cfg;
pub mod engine;
pub mod isa;
pub mod runtime;
pub mod samples;
pub mod verifier;
pub mod xform;
