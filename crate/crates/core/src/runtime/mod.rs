// Copyright 2026 The ubpf-forge Authors
// SPDX-License-Identifier: Apache-2.0

//! Object lifecycle: programs, maps and links with reference counts, a pin
//! registry, hook points with at most one attached link, and packet dispatch.

mod persist;

pub use persist::{PinRecord, StateError};

use crate::cfg::{check_cfg, CfgError};
use crate::engine::{
    exec_image, interpret, lower, BlindConfig, ExecError, ExecOptions, ExecResult, JitImage, MapBackend,
    MapError, MapInstance,
};
use crate::isa::{parse_asm, IsaError, MapDef, MapType, ProgType, Program};
use crate::verifier::{verify, HelperRegistry, Rejection, VerifiedProgram, VerifierConfig};
use crate::xform::{transform, Transformed, XformError};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use thiserror::Error;

/// An object reference. Handles are never reused within one runtime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Handle(pub u32);

impl fmt::Display for Handle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum ObjectKind {
    Program,
    Map,
    Link,
}

impl fmt::Display for ObjectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObjectKind::Program => "program",
            ObjectKind::Map => "map",
            ObjectKind::Link => "link",
        })
    }
}

/// XDP verdicts. Return values outside this set count as `Aborted`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum XdpAction {
    Aborted = 0,
    Drop = 1,
    Pass = 2,
    Tx = 3,
}

impl XdpAction {
    pub fn from_r0(r0: u64) -> XdpAction {
        match r0 {
            1 => XdpAction::Drop,
            2 => XdpAction::Pass,
            3 => XdpAction::Tx,
            _ => XdpAction::Aborted,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            XdpAction::Aborted => "ABORTED",
            XdpAction::Drop => "DROP",
            XdpAction::Pass => "PASS",
            XdpAction::Tx => "TX",
        }
    }
}

impl fmt::Display for XdpAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum Engine {
    Interp,
    #[default]
    Image,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuntimeError {
    #[error(transparent)]
    Parse(#[from] IsaError),
    #[error("control-flow check failed: {0}")]
    Cfg(#[from] CfgError),
    #[error("{0}")]
    Rejected(Box<Rejection>),
    #[error("rewrite failed: {0}")]
    Xform(#[from] XformError),
    #[error("invalid map definition: {0}")]
    InvalidDef(String),
    #[error("map `{0}` is not bound to any map object")]
    UnboundMap(String),
    #[error("map `{name}` is bound to {handle} whose definition differs")]
    MapMismatch { name: String, handle: Handle },
    #[error("unknown handle {0}")]
    UnknownHandle(Handle),
    #[error("no user reference held on {0}")]
    NotHeld(Handle),
    #[error("{handle} is a {actual}, expected a {expected}")]
    WrongKind { handle: Handle, expected: ObjectKind, actual: ObjectKind },
    #[error("pin path `{0}` already exists")]
    PathExists(String),
    #[error("pin path `{0}` does not exist")]
    PathMissing(String),
    #[error("no hook named `{0}`")]
    UnknownHook(String),
    #[error("hook `{0}` already has a program attached")]
    HookBusy(String),
    #[error("program type does not match hook `{0}`")]
    TypeMismatch(String),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    State(#[from] StateError),
}

impl From<Rejection> for RuntimeError {
    fn from(r: Rejection) -> Self {
        RuntimeError::Rejected(Box::new(r))
    }
}

#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    pub verifier: VerifierConfig,
    pub blind: Option<BlindConfig>,
    /// Binds map names in the program to existing map objects. Unbound
    /// names with a definition get a fresh map; unbound `extern` names are
    /// looked up as pin paths.
    pub bindings: BTreeMap<String, Handle>,
}

/// A program that passed every load stage.
#[derive(Debug)]
pub struct LoadedProgram {
    pub source: Program,
    pub verified: VerifiedProgram,
    pub transformed: Transformed,
    pub image: JitImage,
    pub blind: Option<BlindConfig>,
    pub complexity_limit: u64,
    /// Map objects, indexed like `source.map_refs()`.
    pub maps: Vec<Handle>,
}

#[derive(Debug)]
enum Payload {
    Program(Arc<LoadedProgram>),
    Map(Arc<Mutex<MapInstance>>),
    Link { prog: Handle, hook: String },
}

#[derive(Debug)]
struct Object {
    refs: u32,
    /// The part of `refs` held through handles; the rest belongs to pins
    /// and to other objects.
    user: u32,
    payload: Payload,
}

impl Object {
    fn kind(&self) -> ObjectKind {
        match self.payload {
            Payload::Program(_) => ObjectKind::Program,
            Payload::Map(_) => ObjectKind::Map,
            Payload::Link { .. } => ObjectKind::Link,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ObjectInfo {
    pub handle: Handle,
    pub kind: ObjectKind,
    pub refs: u32,
    pub pins: Vec<String>,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Dispatch {
    pub action: XdpAction,
    pub r0: u64,
}

#[derive(Debug)]
struct Hook {
    prog_type: ProgType,
    link: Option<Handle>,
}

#[derive(Debug, Default)]
struct Registry {
    objects: BTreeMap<Handle, Object>,
    next: u32,
    pins: BTreeMap<String, Handle>,
    hooks: BTreeMap<String, Hook>,
}

/// Map instances bound to one run, locked for its duration.
struct Bound<'a> {
    guards: Vec<MutexGuard<'a, MapInstance>>,
    index: Vec<usize>,
}

impl MapBackend for Bound<'_> {
    fn map(&self, k: usize) -> Option<&MapInstance> {
        self.index.get(k).map(|&g| &*self.guards[g])
    }

    fn map_mut(&mut self, k: usize) -> Option<&mut MapInstance> {
        let g = *self.index.get(k)?;
        Some(&mut *self.guards[g])
    }
}

pub fn validate_def(d: &MapDef) -> Result<(), RuntimeError> {
    let bad = |m: &str| Err(RuntimeError::InvalidDef(m.to_string()));
    if d.key_size == 0 || d.value_size == 0 || d.max_entries == 0 {
        return bad("sizes and max_entries must be positive");
    }
    if d.map_type == MapType::Array && d.key_size != 4 {
        return bad("array keys are 4 bytes");
    }
    if d.spin_lock && (d.value_size as usize) < crate::engine::maps::LOCK_WORD {
        return bad("value is too small for a lock word");
    }
    if d.key_size > 512 || d.value_size > 1 << 16 || d.max_entries > 1 << 20 {
        return bad("map is too large");
    }
    Ok(())
}

/// The object registry. All operations take `&self` and are safe to call
/// from several threads.
#[derive(Debug)]
pub struct Runtime {
    reg: Mutex<Registry>,
    helpers: HelperRegistry,
    state_dir: Option<PathBuf>,
}

impl Default for Runtime {
    fn default() -> Self {
        Runtime::new()
    }
}

impl Runtime {
    /// An in-memory runtime with one hook, `xdp@eth0`.
    pub fn new() -> Runtime {
        let rt = Runtime { reg: Mutex::default(), helpers: HelperRegistry::standard(), state_dir: None };
        rt.add_hook("xdp@eth0", ProgType::Xdp);
        rt
    }

    /// A runtime whose pin registry lives in `dir`, reloaded now and
    /// rewritten after every pin change and `save`.
    pub fn open(dir: &Path) -> Result<Runtime, RuntimeError> {
        let mut rt = Runtime::new();
        rt.state_dir = Some(dir.to_path_buf());
        persist::load(&rt, dir)?;
        Ok(rt)
    }

    pub fn helpers(&self) -> &HelperRegistry {
        &self.helpers
    }

    fn lock(&self) -> MutexGuard<'_, Registry> {
        self.reg.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn insert(reg: &mut Registry, payload: Payload) -> Handle {
        reg.next += 1;
        let h = Handle(reg.next);
        reg.objects.insert(h, Object { refs: 1, user: 1, payload });
        h
    }

    fn take_ref(reg: &mut Registry, h: Handle, user: bool) -> Result<(), RuntimeError> {
        let obj = reg.objects.get_mut(&h).ok_or(RuntimeError::UnknownHandle(h))?;
        obj.refs += 1;
        obj.user += u32::from(user);
        Ok(())
    }

    /// Drops one reference and destroys everything that reaches zero. A
    /// user drop fails unless a handle reference is outstanding, so it can
    /// never release a reference owned by a pin or another object.
    fn drop_ref(reg: &mut Registry, h: Handle, user: bool) -> Result<(), RuntimeError> {
        let obj = reg.objects.get_mut(&h).ok_or(RuntimeError::UnknownHandle(h))?;
        if user {
            if obj.user == 0 {
                return Err(RuntimeError::NotHeld(h));
            }
            obj.user -= 1;
        }
        obj.refs -= 1;
        let mut dead = if obj.refs == 0 { vec![h] } else { vec![] };
        while let Some(h) = dead.pop() {
            let Some(obj) = reg.objects.remove(&h) else { continue };
            log::debug!("destroying {} {h}", obj.kind());
            let owned: Vec<Handle> = match obj.payload {
                Payload::Program(p) => p.maps.clone(),
                Payload::Map(_) => vec![],
                Payload::Link { prog, hook } => {
                    if let Some(hp) = reg.hooks.get_mut(&hook) {
                        if hp.link == Some(h) {
                            hp.link = None;
                        }
                    }
                    vec![prog]
                }
            };
            for o in owned {
                if let Some(x) = reg.objects.get_mut(&o) {
                    x.refs -= 1;
                    if x.refs == 0 {
                        dead.push(o);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn add_hook(&self, name: &str, prog_type: ProgType) {
        self.lock().hooks.entry(name.to_string()).or_insert(Hook { prog_type, link: None });
    }

    pub fn hooks(&self) -> Vec<(String, Option<Handle>)> {
        self.lock().hooks.iter().map(|(n, h)| (n.clone(), h.link)).collect()
    }

    pub fn map_create(&self, def: MapDef) -> Result<Handle, RuntimeError> {
        validate_def(&def)?;
        let m = Arc::new(Mutex::new(MapInstance::new(def)));
        Ok(Self::insert(&mut self.lock(), Payload::Map(m)))
    }

    pub(crate) fn map_insert(&self, m: MapInstance) -> Result<Handle, RuntimeError> {
        validate_def(m.def())?;
        Ok(Self::insert(&mut self.lock(), Payload::Map(Arc::new(Mutex::new(m)))))
    }

    fn map_arc(&self, h: Handle) -> Result<Arc<Mutex<MapInstance>>, RuntimeError> {
        let reg = self.lock();
        match &reg.objects.get(&h).ok_or(RuntimeError::UnknownHandle(h))?.payload {
            Payload::Map(m) => Ok(m.clone()),
            other => Err(wrong(h, ObjectKind::Map, other)),
        }
    }

    /// Runs `f` on the map while holding its lock.
    pub fn with_map<T>(&self, h: Handle, f: impl FnOnce(&mut MapInstance) -> T) -> Result<T, RuntimeError> {
        let m = self.map_arc(h)?;
        let mut g = m.lock().unwrap_or_else(|e| e.into_inner());
        Ok(f(&mut g))
    }

    pub fn map_lookup(&self, h: Handle, key: &[u8]) -> Result<Option<Vec<u8>>, RuntimeError> {
        self.with_map(h, |m| m.get(key))
    }

    pub fn map_update(&self, h: Handle, key: &[u8], value: &[u8], flags: u64) -> Result<(), RuntimeError> {
        Ok(self.with_map(h, |m| m.update(key, value, flags))??)
    }

    pub fn map_delete(&self, h: Handle, key: &[u8]) -> Result<(), RuntimeError> {
        Ok(self.with_map(h, |m| m.delete(key))??)
    }

    /// Parses and loads assembly text.
    pub fn prog_load_asm(&self, src: &str, opts: &LoadOptions) -> Result<Handle, RuntimeError> {
        self.prog_load(parse_asm(src)?, opts)
    }

    /// Runs the control-flow check, the verifier, the rewrites and the
    /// lowering, then registers the program with one reference.
    pub fn prog_load(&self, p: Program, opts: &LoadOptions) -> Result<Handle, RuntimeError> {
        // Maps created for this load; released if a later stage fails.
        let mut created = Vec::new();
        let result = self.bind_maps(&p, opts, &mut created).and_then(|maps| self.build(p, opts, maps));
        let mut reg = self.lock();
        match result {
            Ok(loaded) => {
                for h in &loaded.maps {
                    if created.contains(h) {
                        // The creation reference passes to the program.
                        if let Some(o) = reg.objects.get_mut(h) {
                            o.user -= 1;
                        }
                    } else {
                        Self::take_ref(&mut reg, *h, false)?;
                    }
                }
                Ok(Self::insert(&mut reg, Payload::Program(Arc::new(loaded))))
            }
            Err(e) => {
                for h in created {
                    Self::drop_ref(&mut reg, h, true)?;
                }
                Err(e)
            }
        }
    }

    fn bind_maps(&self, p: &Program, opts: &LoadOptions, created: &mut Vec<Handle>) -> Result<Vec<Handle>, RuntimeError> {
        let mut out = Vec::with_capacity(p.map_refs().len());
        for m in p.map_refs() {
            let bound = match opts.bindings.get(&m.name) {
                Some(&h) => Some(h),
                None if m.def.is_none() => self.lock().pins.get(&m.name).copied(),
                None => None,
            };
            let h = match (bound, m.def) {
                (Some(h), def) => {
                    let actual = *self.map_arc(h)?.lock().unwrap_or_else(|e| e.into_inner()).def();
                    if def.is_some_and(|d| d != actual) {
                        return Err(RuntimeError::MapMismatch { name: m.name.clone(), handle: h });
                    }
                    h
                }
                (None, Some(def)) => {
                    let h = self.map_create(def)?;
                    created.push(h);
                    h
                }
                (None, None) => return Err(RuntimeError::UnboundMap(m.name.clone())),
            };
            out.push(h);
        }
        Ok(out)
    }

    fn build(&self, p: Program, opts: &LoadOptions, maps: Vec<Handle>) -> Result<LoadedProgram, RuntimeError> {
        let defs = maps
            .iter()
            .map(|&h| self.with_map(h, |m| *m.def()))
            .collect::<Result<Vec<_>, _>>()?;
        let cfg = check_cfg(&p)?;
        let verified = verify(&p, &self.helpers, &defs, &cfg, &opts.verifier)?;
        let transformed = transform(&p, &verified, &defs, &self.helpers)?;
        let image = lower(&transformed.program, &transformed.untrusted_loads, opts.blind);
        log::debug!(
            "loaded: {} insns, {} removed, {} inlined, {} image ops",
            p.len(),
            transformed.removed,
            transformed.inlined,
            image.len()
        );
        Ok(LoadedProgram {
            source: p,
            verified,
            transformed,
            image,
            blind: opts.blind,
            complexity_limit: opts.verifier.complexity_limit,
            maps,
        })
    }

    pub fn program(&self, h: Handle) -> Result<Arc<LoadedProgram>, RuntimeError> {
        let reg = self.lock();
        match &reg.objects.get(&h).ok_or(RuntimeError::UnknownHandle(h))?.payload {
            Payload::Program(p) => Ok(p.clone()),
            other => Err(wrong(h, ObjectKind::Program, other)),
        }
    }

    pub fn obj_get(&self, h: Handle) -> Result<(), RuntimeError> {
        Self::take_ref(&mut self.lock(), h, true)
    }

    pub fn obj_put(&self, h: Handle) -> Result<(), RuntimeError> {
        Self::drop_ref(&mut self.lock(), h, true)?;
        self.autosave()
    }

    pub fn refcount(&self, h: Handle) -> Option<u32> {
        self.lock().objects.get(&h).map(|o| o.refs)
    }

    pub fn is_live(&self, h: Handle) -> bool {
        self.lock().objects.contains_key(&h)
    }

    pub fn pin(&self, h: Handle, path: &str) -> Result<(), RuntimeError> {
        {
            let mut reg = self.lock();
            if reg.pins.contains_key(path) {
                return Err(RuntimeError::PathExists(path.to_string()));
            }
            Self::take_ref(&mut reg, h, false)?;
            reg.pins.insert(path.to_string(), h);
        }
        self.autosave()
    }

    pub fn unpin(&self, path: &str) -> Result<(), RuntimeError> {
        {
            let mut reg = self.lock();
            let h = reg.pins.remove(path).ok_or_else(|| RuntimeError::PathMissing(path.to_string()))?;
            Self::drop_ref(&mut reg, h, false)?;
        }
        self.autosave()
    }

    /// Takes a new reference on a pinned object.
    pub fn obj_get_pinned(&self, path: &str) -> Result<Handle, RuntimeError> {
        let mut reg = self.lock();
        let h = *reg.pins.get(path).ok_or_else(|| RuntimeError::PathMissing(path.to_string()))?;
        Self::take_ref(&mut reg, h, true)?;
        Ok(h)
    }

    pub fn pins(&self) -> BTreeMap<String, Handle> {
        self.lock().pins.clone()
    }

    /// Attaches a program to a hook. The link holds a reference on the
    /// program; closing the last link reference detaches it.
    pub fn link_create(&self, prog: Handle, hook: &str) -> Result<Handle, RuntimeError> {
        let mut reg = self.lock();
        let obj = reg.objects.get(&prog).ok_or(RuntimeError::UnknownHandle(prog))?;
        let prog_type = match &obj.payload {
            Payload::Program(p) => p.source.prog_type(),
            _ => return Err(RuntimeError::TypeMismatch(hook.to_string())),
        };
        let hp = reg.hooks.get(hook).ok_or_else(|| RuntimeError::UnknownHook(hook.to_string()))?;
        if hp.prog_type != prog_type {
            return Err(RuntimeError::TypeMismatch(hook.to_string()));
        }
        if hp.link.is_some() {
            return Err(RuntimeError::HookBusy(hook.to_string()));
        }
        Self::take_ref(&mut reg, prog, false)?;
        let link = Self::insert(&mut reg, Payload::Link { prog, hook: hook.to_string() });
        reg.hooks.get_mut(hook).expect("checked").link = Some(link);
        Ok(link)
    }

    /// Runs a loaded program directly.
    pub fn run_program(
        &self,
        h: Handle,
        packet: &[u8],
        engine: Engine,
        opts: &ExecOptions,
    ) -> Result<ExecResult, RuntimeError> {
        let prog = self.program(h)?;
        let arcs = prog.maps.iter().map(|&m| self.map_arc(m)).collect::<Result<Vec<_>, _>>()?;
        // Lock each distinct map once, in handle order.
        let mut order: Vec<usize> = (0..arcs.len()).collect();
        order.sort_by_key(|&i| prog.maps[i]);
        order.dedup_by_key(|i| prog.maps[*i]);
        let mut guards = Vec::with_capacity(order.len());
        let mut index = vec![0; arcs.len()];
        for &i in &order {
            guards.push(arcs[i].lock().unwrap_or_else(|e| e.into_inner()));
        }
        for (k, h) in prog.maps.iter().enumerate() {
            index[k] = order.iter().position(|&i| prog.maps[i] == *h).expect("present");
        }
        let mut bound = Bound { guards, index };
        let r = match engine {
            Engine::Interp => interpret(&prog.transformed.program, packet, &mut bound, opts)?,
            Engine::Image => exec_image(&prog.image, packet, &mut bound, opts)?,
        };
        Ok(r)
    }

    /// Runs the program attached to `hook` on one packet. An empty hook
    /// passes every packet.
    pub fn hook_dispatch(&self, hook: &str, packet: &[u8]) -> Result<Dispatch, RuntimeError> {
        self.hook_dispatch_with(hook, packet, Engine::Image, &ExecOptions::default())
    }

    pub fn hook_dispatch_with(
        &self,
        hook: &str,
        packet: &[u8],
        engine: Engine,
        opts: &ExecOptions,
    ) -> Result<Dispatch, RuntimeError> {
        let prog = {
            let reg = self.lock();
            let hp = reg.hooks.get(hook).ok_or_else(|| RuntimeError::UnknownHook(hook.to_string()))?;
            match hp.link.and_then(|l| reg.objects.get(&l)) {
                Some(Object { payload: Payload::Link { prog, .. }, .. }) => *prog,
                _ => return Ok(Dispatch { action: XdpAction::Pass, r0: XdpAction::Pass as u64 }),
            }
        };
        let r = self.run_program(prog, packet, engine, opts)?;
        Ok(Dispatch { action: XdpAction::from_r0(r.r0), r0: r.r0 })
    }

    pub fn objects(&self) -> Vec<ObjectInfo> {
        let reg = self.lock();
        reg.objects
            .iter()
            .map(|(&h, o)| {
                let detail = match &o.payload {
                    Payload::Program(p) => format!(
                        "{} insns, {} after rewrite, maps [{}]",
                        p.source.len(),
                        p.transformed.program.len(),
                        p.maps.iter().map(Handle::to_string).collect::<Vec<_>>().join(", ")
                    ),
                    Payload::Map(m) => {
                        let m = m.lock().unwrap_or_else(|e| e.into_inner());
                        let d = m.def();
                        format!(
                            "{} key {} value {} max {}, {} entries",
                            d.map_type.name(),
                            d.key_size,
                            d.value_size,
                            d.max_entries,
                            m.len()
                        )
                    }
                    Payload::Link { prog, hook } => format!("{prog} on {hook}"),
                };
                let pins = reg.pins.iter().filter(|(_, &p)| p == h).map(|(k, _)| k.clone()).collect();
                ObjectInfo { handle: h, kind: o.kind(), refs: o.refs, pins, detail }
            })
            .collect()
    }

    /// Writes the pin registry to the state directory, if there is one.
    pub fn save(&self) -> Result<(), RuntimeError> {
        match &self.state_dir {
            Some(dir) => Ok(persist::save(self, dir)?),
            None => Ok(()),
        }
    }

    fn autosave(&self) -> Result<(), RuntimeError> {
        self.save()
    }
}

fn wrong(handle: Handle, expected: ObjectKind, actual: &Payload) -> RuntimeError {
    let actual = match actual {
        Payload::Program(_) => ObjectKind::Program,
        Payload::Map(_) => ObjectKind::Map,
        Payload::Link { .. } => ObjectKind::Link,
    };
    RuntimeError::WrongKind { handle, expected, actual }
}
