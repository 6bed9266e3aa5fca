// Copyright 2026 The ubpf-forge Authors
// SPDX-License-Identifier: Apache-2.0

//! Array and hash map storage.

use crate::isa::{MapDef, MapType};
use serde::{Deserialize, Serialize};
use std::hash::{DefaultHasher, Hash, Hasher};
use thiserror::Error;

/// Bytes at the start of a lock map value reserved for the lock word.
pub const LOCK_WORD: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MapError {
    #[error("key must be {expected} bytes, got {got}")]
    KeySize { expected: u32, got: usize },
    #[error("value must be {expected} bytes, got {got}")]
    ValueSize { expected: u32, got: usize },
    #[error("key not found")]
    NotFound,
    #[error("key already exists")]
    Exists,
    #[error("map is full")]
    Full,
    #[error("array elements cannot be deleted")]
    NotDeletable,
    #[error("unsupported update flags {0}")]
    BadFlags(u64),
}

/// Update flags.
pub const UPDATE_ANY: u64 = 0;
pub const UPDATE_NOEXIST: u64 = 1;
pub const UPDATE_EXIST: u64 = 2;

/// Where a value lives. Hash locations carry the slot generation so that a
/// location held across a delete no longer resolves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ValueLoc {
    Array(u32),
    Hash { slot: usize, generation: u32 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Bucket {
    Empty,
    Tombstone,
    Full { key: Vec<u8>, value: Vec<u8> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct HashTable {
    buckets: Vec<Bucket>,
    generations: Vec<u32>,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Storage {
    Array(Vec<u8>),
    Hash(HashTable),
}

/// A map instance: fixed-size array or open-addressing hash table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MapInstance {
    def: MapDef,
    storage: Storage,
}

fn bucket_of(key: &[u8], cap: usize) -> usize {
    let mut h = DefaultHasher::new();
    key.hash(&mut h);
    (h.finish() as usize) & (cap - 1)
}

impl MapInstance {
    pub fn new(def: MapDef) -> MapInstance {
        let storage = match def.map_type {
            MapType::Array => Storage::Array(vec![0; def.max_entries as usize * def.value_size as usize]),
            MapType::Hash => {
                let cap = (def.max_entries as usize * 2).max(2).next_power_of_two();
                Storage::Hash(HashTable { buckets: vec![Bucket::Empty; cap], generations: vec![0; cap], len: 0 })
            }
        };
        MapInstance { def, storage }
    }

    pub fn def(&self) -> &MapDef {
        &self.def
    }

    pub fn len(&self) -> usize {
        match &self.storage {
            Storage::Array(_) => self.def.max_entries as usize,
            Storage::Hash(t) => t.len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_key(&self, key: &[u8]) -> Result<(), MapError> {
        if key.len() != self.def.key_size as usize {
            return Err(MapError::KeySize { expected: self.def.key_size, got: key.len() });
        }
        Ok(())
    }

    fn array_index(&self, key: &[u8]) -> Option<u32> {
        let idx = u32::from_le_bytes(key.get(..4)?.try_into().ok()?);
        (idx < self.def.max_entries).then_some(idx)
    }

    /// Probes for `key`; returns the matching slot or the first free one.
    fn probe(t: &HashTable, key: &[u8]) -> (Option<usize>, Option<usize>) {
        let cap = t.buckets.len();
        let start = bucket_of(key, cap);
        let mut free = None;
        for n in 0..cap {
            let i = (start + n) & (cap - 1);
            match &t.buckets[i] {
                Bucket::Empty => return (None, free.or(Some(i))),
                Bucket::Tombstone => free = free.or(Some(i)),
                Bucket::Full { key: k, .. } if k == key => return (Some(i), free),
                Bucket::Full { .. } => {}
            }
        }
        (None, free)
    }

    pub fn lookup(&self, key: &[u8]) -> Option<ValueLoc> {
        self.check_key(key).ok()?;
        match &self.storage {
            Storage::Array(_) => self.array_index(key).map(ValueLoc::Array),
            Storage::Hash(t) => {
                let slot = Self::probe(t, key).0?;
                Some(ValueLoc::Hash { slot, generation: t.generations[slot] })
            }
        }
    }

    pub fn value(&self, loc: ValueLoc) -> Option<&[u8]> {
        let vs = self.def.value_size as usize;
        match (&self.storage, loc) {
            (Storage::Array(a), ValueLoc::Array(i)) => a.get(i as usize * vs..(i as usize + 1) * vs),
            (Storage::Hash(t), ValueLoc::Hash { slot, generation }) => match t.buckets.get(slot)? {
                Bucket::Full { value, .. } if t.generations[slot] == generation => Some(value),
                _ => None,
            },
            _ => None,
        }
    }

    pub fn value_mut(&mut self, loc: ValueLoc) -> Option<&mut [u8]> {
        let vs = self.def.value_size as usize;
        match (&mut self.storage, loc) {
            (Storage::Array(a), ValueLoc::Array(i)) => a.get_mut(i as usize * vs..(i as usize + 1) * vs),
            (Storage::Hash(t), ValueLoc::Hash { slot, generation }) => {
                let live = t.generations.get(slot) == Some(&generation);
                match t.buckets.get_mut(slot)? {
                    Bucket::Full { value, .. } if live => Some(value),
                    _ => None,
                }
            }
            _ => None,
        }
    }

    /// Backing bytes of an array map, all values back to back.
    pub fn array_data(&self) -> Option<&[u8]> {
        match &self.storage {
            Storage::Array(a) => Some(a),
            Storage::Hash(_) => None,
        }
    }

    pub fn array_data_mut(&mut self) -> Option<&mut [u8]> {
        match &mut self.storage {
            Storage::Array(a) => Some(a),
            Storage::Hash(_) => None,
        }
    }

    pub fn get(&self, key: &[u8]) -> Option<Vec<u8>> {
        self.lookup(key).and_then(|l| self.value(l)).map(<[u8]>::to_vec)
    }

    /// Stores `value` under `key`. The lock word of lock maps is kept.
    pub fn update(&mut self, key: &[u8], value: &[u8], flags: u64) -> Result<(), MapError> {
        self.check_key(key)?;
        if value.len() != self.def.value_size as usize {
            return Err(MapError::ValueSize { expected: self.def.value_size, got: value.len() });
        }
        if flags > UPDATE_EXIST {
            return Err(MapError::BadFlags(flags));
        }
        let keep = if self.def.spin_lock { LOCK_WORD.min(value.len()) } else { 0 };
        let vs = value.len();
        let index = self.array_index(key);
        match &mut self.storage {
            Storage::Array(a) => {
                if flags == UPDATE_NOEXIST {
                    return Err(MapError::Exists);
                }
                let i = index.ok_or(MapError::NotFound)? as usize;
                a[i * vs + keep..(i + 1) * vs].copy_from_slice(&value[keep..]);
                Ok(())
            }
            Storage::Hash(t) => match Self::probe(t, key) {
                (Some(slot), _) => {
                    if flags == UPDATE_NOEXIST {
                        return Err(MapError::Exists);
                    }
                    if let Bucket::Full { value: v, .. } = &mut t.buckets[slot] {
                        v[keep..].copy_from_slice(&value[keep..]);
                    }
                    Ok(())
                }
                (None, free) => {
                    if flags == UPDATE_EXIST {
                        return Err(MapError::NotFound);
                    }
                    let slot = match free {
                        Some(s) if t.len < self.def.max_entries as usize => s,
                        _ => return Err(MapError::Full),
                    };
                    let mut v = value.to_vec();
                    v[..keep].fill(0);
                    t.buckets[slot] = Bucket::Full { key: key.to_vec(), value: v };
                    t.generations[slot] = t.generations[slot].wrapping_add(1);
                    t.len += 1;
                    Ok(())
                }
            },
        }
    }

    pub fn delete(&mut self, key: &[u8]) -> Result<(), MapError> {
        self.check_key(key)?;
        match &mut self.storage {
            Storage::Array(_) => Err(MapError::NotDeletable),
            Storage::Hash(t) => {
                let slot = Self::probe(t, key).0.ok_or(MapError::NotFound)?;
                t.buckets[slot] = Bucket::Tombstone;
                t.generations[slot] = t.generations[slot].wrapping_add(1);
                t.len -= 1;
                Ok(())
            }
        }
    }

    /// Every present entry, sorted by key.
    pub fn entries(&self) -> Vec<(Vec<u8>, Vec<u8>)> {
        let mut out: Vec<(Vec<u8>, Vec<u8>)> = match &self.storage {
            Storage::Array(a) => {
                let vs = self.def.value_size as usize;
                (0..self.def.max_entries)
                    .map(|i| (i.to_le_bytes().to_vec(), a[i as usize * vs..(i as usize + 1) * vs].to_vec()))
                    .collect()
            }
            Storage::Hash(t) => t
                .buckets
                .iter()
                .filter_map(|b| match b {
                    Bucket::Full { key, value } => Some((key.clone(), value.clone())),
                    _ => None,
                })
                .collect(),
        };
        out.sort();
        out
    }

    pub fn snapshot(&self) -> MapSnapshot {
        MapSnapshot { def: self.def, entries: self.entries() }
    }

    pub fn restore(s: &MapSnapshot) -> Result<MapInstance, MapError> {
        let mut m = MapInstance::new(s.def);
        let lock = s.def.spin_lock;
        for (k, v) in &s.entries {
            m.update(k, v, UPDATE_ANY)?;
            if lock {
                if let Some(dst) = m.lookup(k).and_then(|l| m.value_mut(l)) {
                    dst[..LOCK_WORD].copy_from_slice(&v[..LOCK_WORD]);
                }
            }
        }
        Ok(m)
    }
}

/// Serializable map contents.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapSnapshot {
    pub def: MapDef,
    #[serde(with = "hex_pairs")]
    pub entries: Vec<(Vec<u8>, Vec<u8>)>,
}

mod hex_pairs {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[(Vec<u8>, Vec<u8>)], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|(k, v)| (hex::encode(k), hex::encode(v))).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<(Vec<u8>, Vec<u8>)>, D::Error> {
        let raw: Vec<(String, String)> = Vec::deserialize(d)?;
        raw.into_iter()
            .map(|(k, v)| Ok((hex::decode(k).map_err(serde::de::Error::custom)?, hex::decode(v).map_err(serde::de::Error::custom)?)))
            .collect()
    }
}

/// Maps visible to one execution, indexed like the program's map references.
pub trait MapBackend {
    fn map(&self, k: usize) -> Option<&MapInstance>;
    fn map_mut(&mut self, k: usize) -> Option<&mut MapInstance>;
}

impl MapBackend for [MapInstance] {
    fn map(&self, k: usize) -> Option<&MapInstance> {
        self.get(k)
    }

    fn map_mut(&mut self, k: usize) -> Option<&mut MapInstance> {
        self.get_mut(k)
    }
}

impl MapBackend for Vec<MapInstance> {
    fn map(&self, k: usize) -> Option<&MapInstance> {
        self.get(k)
    }

    fn map_mut(&mut self, k: usize) -> Option<&mut MapInstance> {
        self.get_mut(k)
    }
}
