// Copyright 2026 The ubpf-forge Authors
// SPDX-License-Identifier: Apache-2.0

//! `ubpf-forge`: assemble, check, verify and run eBPF programs in user
//! space. Exit status is 0 on success, 1 on usage, parse or runtime errors
//! and 2 when a program is rejected.

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use thiserror::Error;
use ubpf_forge::absdom;
use ubpf_forge::cfg::{check_cfg, to_dot, CfgError};
use ubpf_forge::engine::{BlindConfig, ExecOptions};
use ubpf_forge::isa::{decode, encode, format_asm, parse_asm, IsaError, MapDef, MapType, Program};
use ubpf_forge::runtime::{Engine, Handle, LoadOptions, LoadedProgram, Runtime, RuntimeError};
use ubpf_forge::verifier::{LogLevel, Rejection};

#[derive(Parser)]
#[command(name = "ubpf-forge", version, about = "User-space eBPF toolchain and runtime")]
struct Cli {
    /// Directory holding the pin registry. Without it every invocation
    /// starts from an empty runtime.
    #[arg(long, global = true, env = "UBPF_FORGE_STATE")]
    state_dir: Option<PathBuf>,
    /// Diagnostic logging on stderr: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Assemble text into the binary encoding.
    Asm {
        input: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Print a program as assembly text.
    Disasm { input: Option<PathBuf> },
    /// Check the control-flow graph and print it as Graphviz DOT.
    Cfg {
        input: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Verify a program and print the verifier log.
    Verify {
        input: Option<PathBuf>,
        #[command(flatten)]
        verifier: VerifierFlags,
        /// Append instruction and state counts.
        #[arg(long)]
        stats: bool,
        /// Print only the verdict.
        #[arg(long, short)]
        quiet: bool,
        #[arg(long)]
        json: bool,
        /// Also print the rewritten program or its lowered image.
        #[arg(long, value_enum)]
        emit: Option<Emit>,
    },
    /// Load a program, attach it to a scratch hook and run one packet.
    Run {
        input: Option<PathBuf>,
        #[command(flatten)]
        exec: ExecFlags,
        #[command(flatten)]
        verifier: VerifierFlags,
        #[arg(long)]
        json: bool,
    },
    /// Evaluate one abstract ALU operation.
    Absdom {
        #[command(subcommand)]
        cmd: AbsdomCmd,
    },
    /// Load a program and pin it.
    Load {
        input: Option<PathBuf>,
        #[arg(long)]
        pin: String,
        #[command(flatten)]
        verifier: VerifierFlags,
        #[command(flatten)]
        blind: BlindFlags,
    },
    /// Create a map and pin it.
    MapCreate {
        #[arg(value_enum)]
        kind: MapKind,
        key_size: u32,
        value_size: u32,
        max_entries: u32,
        #[arg(long)]
        pin: String,
    },
    /// Print the entries of a pinned map as JSON.
    MapDump { path: String },
    /// Attach a pinned program to a hook and pin the link.
    Link {
        prog: String,
        hook: String,
        #[arg(long)]
        pin: String,
    },
    /// Run one packet through whatever is attached to a hook.
    Dispatch {
        hook: String,
        #[command(flatten)]
        exec: ExecFlags,
    },
    /// Pin an already pinned object under another path.
    Pin { from: String, to: String },
    /// Remove a pin, destroying the object if nothing else holds it.
    Unpin { path: String },
    /// List live objects.
    Objects {
        #[arg(long)]
        json: bool,
    },
}

#[derive(Subcommand)]
enum AbsdomCmd {
    /// OPERANDS: x, an integer, lo..hi, value/mask, or a pattern like 0b1x0x.
    Eval {
        op: String,
        a: String,
        #[arg(default_value = "0")]
        b: String,
        #[arg(long, default_value_t = 64)]
        width: u32,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct VerifierFlags {
    /// Turn off state pruning.
    #[arg(long)]
    no_pruning: bool,
    /// Complexity limit in simulated instructions.
    #[arg(long)]
    limit: Option<u64>,
}

#[derive(Args)]
struct BlindFlags {
    /// Blind immediates in the lowered image.
    #[arg(long)]
    blind: bool,
    /// Immediates up to this magnitude stay in the clear.
    #[arg(long, default_value_t = 0)]
    blind_threshold: u64,
    /// Seeds blinding and `get_prandom_u32`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExecFlags {
    /// Packet bytes in hex.
    #[arg(long, default_value = "")]
    packet: String,
    #[arg(long, value_enum, default_value_t = EngineArg::Image)]
    engine: EngineArg,
    /// Execution step budget.
    #[arg(long)]
    fuel: Option<u64>,
    #[command(flatten)]
    blind: BlindFlags,
}

#[derive(Clone, Copy, ValueEnum)]
enum EngineArg {
    Interp,
    Image,
}

#[derive(Clone, Copy, ValueEnum)]
enum Emit {
    PostXform,
    Image,
}

#[derive(Clone, Copy, ValueEnum)]
enum MapKind {
    Array,
    Hash,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("{0}")]
    Parse(#[from] IsaError),
    #[error("control-flow check failed: {0}")]
    Cfg(#[from] CfgError),
    #[error("{0}")]
    Rejected(Box<Rejection>),
    #[error("{0}")]
    Runtime(RuntimeError),
    #[error("{0}")]
    Absdom(#[from] absdom::AbsError),
}

impl From<RuntimeError> for CliError {
    fn from(e: RuntimeError) -> Self {
        match e {
            RuntimeError::Parse(e) => CliError::Parse(e),
            RuntimeError::Cfg(e) => CliError::Cfg(e),
            RuntimeError::Rejected(r) => CliError::Rejected(r),
            other => CliError::Runtime(other),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Cfg(_) | CliError::Rejected(_) => 2,
            _ => 1,
        }
    }
}

type Out<'a> = &'a mut dyn Write;

fn io_err(path: &str, e: impl ToString) -> CliError {
    CliError::Io { path: path.to_string(), msg: e.to_string() }
}

fn read_input(input: &Option<PathBuf>) -> Result<(String, Vec<u8>), CliError> {
    match input {
        Some(p) if p.as_os_str() != "-" => {
            let name = p.display().to_string();
            Ok((name.clone(), std::fs::read(p).map_err(|e| io_err(&name, e))?))
        }
        _ => {
            let mut buf = Vec::new();
            std::io::stdin().read_to_end(&mut buf).map_err(|e| io_err("<stdin>", e))?;
            Ok(("<stdin>".into(), buf))
        }
    }
}

/// Binary input is recognised by a `.bin` extension or a NUL byte, which
/// assembly text never contains.
fn read_program(input: &Option<PathBuf>) -> Result<Program, CliError> {
    let (name, bytes) = read_input(input)?;
    let is_bin = input.as_deref().and_then(Path::extension).is_some_and(|e| e == "bin") || bytes.contains(&0);
    if is_bin {
        return Ok(decode(&bytes)?);
    }
    let text = String::from_utf8(bytes).map_err(|_| io_err(&name, "not UTF-8 text"))?;
    Ok(parse_asm(&text)?)
}

fn open_runtime(state_dir: &Option<PathBuf>) -> Result<Runtime, CliError> {
    Ok(match state_dir {
        Some(d) => Runtime::open(d)?,
        None => Runtime::new(),
    })
}

fn need_state(state_dir: &Option<PathBuf>, cmd: &str) -> Result<(), CliError> {
    match state_dir {
        Some(_) => Ok(()),
        None => Err(CliError::Usage(format!("`{cmd}` needs --state-dir or UBPF_FORGE_STATE"))),
    }
}

fn load_options(v: &VerifierFlags, b: &BlindFlags, quiet: bool) -> LoadOptions {
    let mut opts = LoadOptions::default();
    opts.verifier.pruning_enabled = !v.no_pruning;
    if let Some(l) = v.limit {
        opts.verifier.complexity_limit = l;
    }
    if quiet {
        opts.verifier.log_level = LogLevel::Quiet;
    }
    opts.blind = b.blind.then_some(BlindConfig { seed: b.seed, threshold: b.blind_threshold });
    opts
}

fn exec_options(e: &ExecFlags) -> ExecOptions {
    let mut opts = ExecOptions { seed: e.blind.seed, ..ExecOptions::default() };
    if let Some(f) = e.fuel {
        opts.fuel = f;
    }
    opts
}

fn packet(e: &ExecFlags) -> Result<Vec<u8>, CliError> {
    let clean: String = e.packet.chars().filter(|c| !c.is_whitespace() && *c != ':').collect();
    hex::decode(&clean).map_err(|err| CliError::Usage(format!("--packet: {err}")))
}

fn engine(e: &ExecFlags) -> Engine {
    match e.engine {
        EngineArg::Interp => Engine::Interp,
        EngineArg::Image => Engine::Image,
    }
}

fn write_stats(out: Out, s: &ubpf_forge::verifier::Stats) -> std::io::Result<()> {
    writeln!(out, "insns_processed: {}", s.insns_processed)?;
    writeln!(out, "states_explored: {}", s.states_explored)?;
    writeln!(out, "pruned: {}", s.pruned)?;
    writeln!(out, "checkpoints: {}", s.checkpoints)
}

fn emit(out: Out, what: Emit, p: &LoadedProgram) -> std::io::Result<()> {
    match what {
        Emit::PostXform => write!(out, "{}", format_asm(&p.transformed.program)),
        Emit::Image => write!(out, "{}", p.image.dump()),
    }
}

fn pinned(rt: &Runtime, path: &str) -> Result<Handle, CliError> {
    Ok(rt.obj_get_pinned(path)?)
}

#[allow(clippy::too_many_arguments)]
fn cmd_verify(
    out: Out,
    input: &Option<PathBuf>,
    state_dir: &Option<PathBuf>,
    flags: &VerifierFlags,
    stats: bool,
    quiet: bool,
    json: bool,
    what: Option<Emit>,
) -> Result<(), CliError> {
    let p = read_program(input)?;
    let rt = open_runtime(state_dir)?;
    let opts = load_options(flags, &BlindFlags { blind: false, blind_threshold: 0, seed: 0 }, quiet);
    match rt.prog_load(p, &opts) {
        Ok(h) => {
            let loaded = rt.program(h)?;
            let v = &loaded.verified;
            if json {
                let mut doc = json!({ "verdict": "accept", "stats": v.stats, "log": v.log });
                if let Some(what) = what {
                    let mut text = Vec::new();
                    emit(&mut text, what, &loaded).map_err(|e| io_err("<stdout>", e))?;
                    doc["emit"] = String::from_utf8_lossy(&text).into();
                }
                writeln!(out, "{doc}")
            } else {
                (|| {
                    if !quiet {
                        write!(out, "{}", v.log)?;
                    }
                    writeln!(out, "ACCEPT")?;
                    if stats {
                        write_stats(out, &v.stats)?;
                    }
                    if let Some(what) = what {
                        emit(out, what, &loaded)?;
                    }
                    Ok(())
                })()
            }
            .map_err(|e| io_err("<stdout>", e))
        }
        Err(RuntimeError::Rejected(r)) => {
            let res = if json {
                writeln!(
                    out,
                    "{}",
                    json!({
                        "verdict": "reject",
                        "property": r.property.to_string(),
                        "kind": r.kind,
                        "insn": r.insn,
                        "detail": r.detail,
                        "stats": r.stats,
                        "log": r.log,
                    })
                )
            } else {
                (|| {
                    if quiet {
                        writeln!(out, "{r}")?;
                    } else {
                        write!(out, "{}", r.log)?;
                    }
                    if stats {
                        write_stats(out, &r.stats)?;
                    }
                    Ok(())
                })()
            };
            res.map_err(|e| io_err("<stdout>", e))?;
            Err(CliError::Rejected(r))
        }
        Err(e) => Err(e.into()),
    }
}

const SCRATCH_HOOK: &str = "xdp@run";

fn cmd_run(
    out: Out,
    input: &Option<PathBuf>,
    state_dir: &Option<PathBuf>,
    exec: &ExecFlags,
    verifier: &VerifierFlags,
    json: bool,
) -> Result<(), CliError> {
    let p = read_program(input)?;
    let pkt = packet(exec)?;
    let rt = open_runtime(state_dir)?;
    rt.add_hook(SCRATCH_HOOK, p.prog_type());
    let prog = rt.prog_load(p, &load_options(verifier, &exec.blind, true))?;
    let link = rt.link_create(prog, SCRATCH_HOOK)?;
    let result = rt.hook_dispatch_with(SCRATCH_HOOK, &pkt, engine(exec), &exec_options(exec));
    rt.obj_put(link)?;
    rt.obj_put(prog)?;
    let d = result?;
    let res = if json {
        writeln!(out, "{}", json!({ "action": d.action.name(), "r0": d.r0 }))
    } else {
        writeln!(out, "{} r0={}", d.action.name(), d.r0)
    };
    res.map_err(|e| io_err("<stdout>", e))
}

fn run(cli: Cli, out: Out) -> Result<(), CliError> {
    let w = |r: std::io::Result<()>| r.map_err(|e| io_err("<stdout>", e));
    let sd = &cli.state_dir;
    match cli.cmd {
        Cmd::Asm { input, output } => {
            let (name, bytes) = read_input(&input)?;
            let text = String::from_utf8(bytes).map_err(|_| io_err(&name, "not UTF-8 text"))?;
            let bin = encode(&parse_asm(&text)?);
            match output {
                Some(p) => std::fs::write(&p, bin).map_err(|e| io_err(&p.display().to_string(), e)),
                None => w(out.write_all(&bin)),
            }
        }
        Cmd::Disasm { input } => w(write!(out, "{}", format_asm(&read_program(&input)?))),
        Cmd::Cfg { input, json } => {
            let p = read_program(&input)?;
            let r = check_cfg(&p)?;
            if json {
                w(writeln!(out, "{}", json!(r)))
            } else {
                w(write!(out, "{}", to_dot(&p, &r)))
            }
        }
        Cmd::Verify { input, verifier, stats, quiet, json, emit } => {
            cmd_verify(out, &input, sd, &verifier, stats, quiet, json, emit)
        }
        Cmd::Run { input, exec, verifier, json } => cmd_run(out, &input, sd, &exec, &verifier, json),
        Cmd::Absdom { cmd: AbsdomCmd::Eval { op, a, b, width, json } } => {
            let e = absdom::eval(&op, &a, &b, width)?;
            if json {
                w(writeln!(out, "{}", json!(e)))
            } else {
                w(writeln!(out, "{} {} {} = {}\ntnum {} ({})", e.a, e.op, e.b, e.result, e.result.tnum, e.pattern))
            }
        }
        Cmd::Load { input, pin, verifier, blind } => {
            need_state(sd, "load")?;
            let p = read_program(&input)?;
            let rt = open_runtime(sd)?;
            let h = rt.prog_load(p, &load_options(&verifier, &blind, true))?;
            rt.pin(h, &pin)?;
            rt.obj_put(h)?;
            w(writeln!(out, "program {h} pinned at {pin}"))
        }
        Cmd::MapCreate { kind, key_size, value_size, max_entries, pin } => {
            need_state(sd, "map-create")?;
            let rt = open_runtime(sd)?;
            let t = match kind {
                MapKind::Array => MapType::Array,
                MapKind::Hash => MapType::Hash,
            };
            let h = rt.map_create(MapDef::new(t, key_size, value_size, max_entries))?;
            rt.pin(h, &pin)?;
            rt.obj_put(h)?;
            w(writeln!(out, "map {h} pinned at {pin}"))
        }
        Cmd::MapDump { path } => {
            need_state(sd, "map-dump")?;
            let rt = open_runtime(sd)?;
            let h = pinned(&rt, &path)?;
            let snap = rt.with_map(h, |m| m.snapshot());
            rt.obj_put(h)?;
            w(writeln!(out, "{}", json!(snap?)))
        }
        Cmd::Link { prog, hook, pin } => {
            need_state(sd, "link")?;
            let rt = open_runtime(sd)?;
            let p = pinned(&rt, &prog)?;
            let linked = rt.link_create(p, &hook);
            rt.obj_put(p)?;
            let l = linked?;
            rt.pin(l, &pin)?;
            rt.obj_put(l)?;
            w(writeln!(out, "link {l} pinned at {pin}"))
        }
        Cmd::Dispatch { hook, exec } => {
            need_state(sd, "dispatch")?;
            let pkt = packet(&exec)?;
            let rt = open_runtime(sd)?;
            let d = rt.hook_dispatch_with(&hook, &pkt, engine(&exec), &exec_options(&exec))?;
            rt.save()?;
            w(writeln!(out, "{} r0={}", d.action.name(), d.r0))
        }
        Cmd::Pin { from, to } => {
            need_state(sd, "pin")?;
            let rt = open_runtime(sd)?;
            let h = pinned(&rt, &from)?;
            let r = rt.pin(h, &to);
            rt.obj_put(h)?;
            r?;
            w(writeln!(out, "{h} pinned at {to}"))
        }
        Cmd::Unpin { path } => {
            need_state(sd, "unpin")?;
            open_runtime(sd)?.unpin(&path)?;
            Ok(())
        }
        Cmd::Objects { json } => {
            let rt = open_runtime(sd)?;
            let objs = rt.objects();
            if json {
                return w(writeln!(out, "{}", json!(objs)));
            }
            for o in objs {
                w(writeln!(
                    out,
                    "{}\t{:?}\trefs={}\tpins={}\t{}",
                    o.handle,
                    o.kind,
                    o.refs,
                    o.pins.join(","),
                    o.detail
                ))?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::new().filter_level(cli.log_level).init();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match run(cli, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = out.flush();
            eprintln!("ubpf-forge: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
