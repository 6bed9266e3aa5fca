// Copyright 2026 The ubpf-forge Authors
// SPDX-License-Identifier: Apache-2.0

//! Flat 64-bit address space made of regions: the high 32 bits of an
//! address select the region, the low 32 bits are the offset in it.

use super::maps::{MapBackend, ValueLoc};

pub const REGION_CTX: u32 = 0x1;
pub const REGION_PACKET: u32 = 0x2;
/// Map handles loaded by `lddw rD, map[..]`; not dereferenceable.
pub const REGION_MAP_HANDLE: u32 = 0x3;
/// Stack of call depth `d` lives in `REGION_STACK + d`.
pub const REGION_STACK: u32 = 0x10;
/// Storage of array map `k` lives in `REGION_ARRAY + k`.
pub const REGION_ARRAY: u32 = 0x100;
/// Hash values handed out during one run, numbered from here.
pub const REGION_HASH: u32 = 0x1_0000;

/// Size of the XDP context: packet start and end addresses.
pub const CTX_SIZE: usize = 16;

pub fn addr(region: u32, off: u32) -> u64 {
    (region as u64) << 32 | off as u64
}

pub fn split(a: u64) -> (u32, u32) {
    ((a >> 32) as u32, a as u32)
}

/// An access outside every live region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fault {
    pub addr: u64,
    pub size: usize,
}

pub struct Memory<'m> {
    ctx: [u8; CTX_SIZE],
    pub packet: Vec<u8>,
    stacks: Vec<Vec<u8>>,
    stack_size: usize,
    pub maps: &'m mut dyn MapBackend,
    /// Hash value handles: `(map, location)`.
    handles: Vec<(usize, ValueLoc)>,
}

impl<'m> Memory<'m> {
    pub fn new(packet: Vec<u8>, maps: &'m mut dyn MapBackend, stack_size: usize) -> Memory<'m> {
        let mut ctx = [0u8; CTX_SIZE];
        ctx[..8].copy_from_slice(&addr(REGION_PACKET, 0).to_le_bytes());
        ctx[8..].copy_from_slice(&addr(REGION_PACKET, packet.len() as u32).to_le_bytes());
        Memory { ctx, packet, stacks: Vec::new(), stack_size, maps, handles: Vec::new() }
    }

    pub fn ctx_addr(&self) -> u64 {
        addr(REGION_CTX, 0)
    }

    /// Allocates a zeroed stack for a new frame and returns its frame pointer.
    pub fn push_stack(&mut self) -> u64 {
        self.stacks.push(vec![0; self.stack_size]);
        addr(REGION_STACK + self.stacks.len() as u32 - 1, self.stack_size as u32)
    }

    pub fn pop_stack(&mut self) {
        self.stacks.pop();
    }

    pub fn depth(&self) -> usize {
        self.stacks.len()
    }

    /// Address of a hash value, reusing the handle of an earlier lookup.
    pub fn hash_handle(&mut self, map: usize, loc: ValueLoc) -> u64 {
        let h = match self.handles.iter().position(|&e| e == (map, loc)) {
            Some(h) => h,
            None => {
                self.handles.push((map, loc));
                self.handles.len() - 1
            }
        };
        addr(REGION_HASH + h as u32, 0)
    }

    fn slice(&mut self, a: u64, size: usize, write: bool) -> Result<&mut [u8], Fault> {
        let fault = Fault { addr: a, size };
        let (region, off) = split(a);
        let off = off as usize;
        let bytes: &mut [u8] = match region {
            REGION_CTX if !write => &mut self.ctx,
            REGION_PACKET => &mut self.packet,
            r if (REGION_STACK..REGION_ARRAY).contains(&r) => {
                self.stacks.get_mut((r - REGION_STACK) as usize).ok_or(fault)?
            }
            r if (REGION_ARRAY..REGION_HASH).contains(&r) => {
                let m = self.maps.map_mut((r - REGION_ARRAY) as usize).ok_or(fault)?;
                m.array_data_mut().ok_or(fault)?
            }
            r if r >= REGION_HASH => {
                let (map, loc) = *self.handles.get((r - REGION_HASH) as usize).ok_or(fault)?;
                self.maps.map_mut(map).and_then(|m| m.value_mut(loc)).ok_or(fault)?
            }
            _ => return Err(fault),
        };
        let end = off.checked_add(size).ok_or(fault)?;
        bytes.get_mut(off..end).ok_or(fault)
    }

    pub fn load(&mut self, a: u64, size: usize) -> Result<u64, Fault> {
        let s = self.slice(a, size, false)?;
        let mut buf = [0u8; 8];
        buf[..size].copy_from_slice(s);
        Ok(u64::from_le_bytes(buf))
    }

    pub fn store(&mut self, a: u64, size: usize, v: u64) -> Result<(), Fault> {
        let s = self.slice(a, size, true)?;
        s.copy_from_slice(&v.to_le_bytes()[..size]);
        Ok(())
    }

    pub fn read(&mut self, a: u64, size: usize) -> Result<Vec<u8>, Fault> {
        Ok(self.slice(a, size, false)?.to_vec())
    }

    /// Like `read`, but a value whose hash entry is gone reads as zeros.
    pub fn read_lenient(&mut self, a: u64, size: usize) -> Result<Vec<u8>, Fault> {
        match self.read(a, size) {
            Err(_) if split(a).0 >= REGION_HASH => Ok(vec![0; size]),
            r => r,
        }
    }

    pub fn is_untrusted(a: u64) -> bool {
        split(a).0 >= REGION_HASH
    }
}
