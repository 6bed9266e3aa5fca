// Copyright 2026 The ubpf-forge Authors
// SPDX-License-Identifier: Apache-2.0

mod common;

use common::{check_lifecycle, random_sequence, rng, LifeOp};

#[test]
fn random_sequences_match_the_model() {
    let mut r = rng(5);
    for n in 0..500 {
        let ops = random_sequence(&mut r, 24);
        if let Err(e) = check_lifecycle(&ops) {
            panic!("sequence {n}: {e}\n{ops:?}");
        }
    }
}

#[test]
fn pinned_program_outlives_its_creator() {
    check_lifecycle(&[LifeOp::LoadProg, LifeOp::Pin(0, 0), LifeOp::Put(0), LifeOp::Get(0), LifeOp::Unpin(0)]).unwrap();
}

#[test]
fn link_keeps_program_and_map_alive() {
    let ops = [
        LifeOp::CreateMap,
        LifeOp::LoadWithMap(0),
        LifeOp::Link(1, 0),
        LifeOp::Put(0),
        LifeOp::Put(1),
        LifeOp::Link(1, 0),
        LifeOp::Put(2),
    ];
    check_lifecycle(&ops).unwrap();
}
