// Copyright 2026 The ubpf-forge Authors
// SPDX-License-Identifier: Apache-2.0

//! Ready-made programs used by the CLI, the demo page and tests.

/// XDP program that drops IPv4 UDP frames and passes everything else.
pub const DROP_UDP: &str = "\
; drop IPv4 UDP, pass the rest
    ldxdw r2, [r1+0]        ; data
    ldxdw r3, [r1+8]        ; data_end
    mov64 r4, r2
    add64 r4, 14
    jgt r4, r3, pass        ; ethernet header
    ldxh r5, [r2+12]
    be16 r5
    jne r5, 0x0800, pass    ; ethertype IPv4
    mov64 r4, r2
    add64 r4, 34
    jgt r4, r3, pass        ; IPv4 header
    ldxb r5, [r2+23]
    jne r5, 17, pass        ; protocol UDP
    mov64 r0, 1             ; DROP
    exit
pass:
    mov64 r0, 2             ; PASS
    exit
";

/// Counts frames per protocol byte in an array map.
pub const COUNT_PROTO: &str = "\
.map counters array 4 8 256
    ldxdw r2, [r1+0]
    ldxdw r3, [r1+8]
    mov64 r4, r2
    add64 r4, 24
    jgt r4, r3, out
    ldxb r5, [r2+23]
    stxw [r10-4], r5
    lddw r1, map[counters]
    mov64 r2, r10
    add64 r2, -4
    call map_lookup_elem
    jeq r0, 0, out
    ldxdw r1, [r0+0]
    add64 r1, 1
    stxdw [r0+0], r1
out:
    mov64 r0, 2
    exit
";
