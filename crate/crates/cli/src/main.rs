//! `gradmap`: train MNIST models and render gradient sensitivity maps.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or model error, 3 internal
//! invariant violation (including a replay that does not reproduce).

mod args;
mod commands;
mod manifest;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use args::{AttributeArgs, DiffArgs, GridArgs, ProbeArgs, ReplayArgs, SweepArgs, TrainArgs};
use manifest::{sha256_file, RunManifest, RunRecord};

#[derive(Parser)]
#[command(name = "gradmap", version, about = "Gradient sensitivity maps for MNIST classifiers")]
struct Cli {
    /// Worker threads for attribution (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    #[command(flatten)]
    Run(Invocation),
    /// Re-run a manifest and check that every output is reproduced bitwise
    Replay(ReplayArgs),
}

/// A command that produces files and a manifest.
#[derive(Subcommand, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Invocation {
    /// Train the MNIST CNN and write a checkpoint
    Train(TrainArgs),
    /// Compute one sensitivity map
    Attribute(AttributeArgs),
    /// Grid of maps over noise levels or sample counts
    Sweep(SweepArgs),
    /// Gradient fluctuation along a small random direction
    Probe(ProbeArgs),
    /// Blue-gray-red difference of two class maps
    Diff(DiffArgs),
    /// Compose PNG cells into a labelled grid
    Grid(GridArgs),
}

/// Appends `suffix` to the file name of `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn relocate(path: &Path, dir: &Path) -> PathBuf {
    dir.join(path.file_name().unwrap_or(path.as_os_str()))
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::Train(_) => "train",
            Invocation::Attribute(_) => "attribute",
            Invocation::Sweep(_) => "sweep",
            Invocation::Probe(_) => "probe",
            Invocation::Diff(_) => "diff",
            Invocation::Grid(_) => "grid",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Invocation::Train(a) => Some(a.seed),
            Invocation::Attribute(a) => Some(a.seed),
            Invocation::Sweep(a) => Some(a.seed),
            Invocation::Probe(a) => Some(a.seed),
            Invocation::Diff(a) => Some(a.seed),
            Invocation::Grid(_) => None,
        }
    }

    fn manifest_path(&self) -> PathBuf {
        match self {
            Invocation::Train(a) => sibling(&a.out, ".manifest.json"),
            Invocation::Sweep(a) => sibling(&a.out, ".manifest.json"),
            Invocation::Grid(a) => sibling(&a.out, ".manifest.json"),
            Invocation::Attribute(a) => a.out_dir.join("manifest.json"),
            Invocation::Probe(a) => a.out_dir.join("manifest.json"),
            Invocation::Diff(a) => a.out_dir.join("manifest.json"),
        }
    }

    /// Moves every output into `dir`, keeping file names.
    fn redirect(&mut self, dir: &Path) {
        match self {
            Invocation::Train(a) => a.out = relocate(&a.out, dir),
            Invocation::Sweep(a) => a.out = relocate(&a.out, dir),
            Invocation::Grid(a) => a.out = relocate(&a.out, dir),
            Invocation::Attribute(a) => a.out_dir = dir.to_path_buf(),
            Invocation::Probe(a) => a.out_dir = dir.to_path_buf(),
            Invocation::Diff(a) => a.out_dir = dir.to_path_buf(),
        }
    }

    /// Runs the command and writes its manifest.
    fn execute(&self) -> Result<PathBuf> {
        let path = self.manifest_path();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let record: RunRecord = match self {
            Invocation::Train(a) => commands::train(a)?,
            Invocation::Attribute(a) => commands::attribute(a)?,
            Invocation::Sweep(a) => commands::sweep(a)?,
            Invocation::Probe(a) => commands::probe(a)?,
            Invocation::Diff(a) => commands::diff(a)?,
            Invocation::Grid(a) => commands::grid(a)?,
        };
        RunManifest::build(self, &record)?.write(&path)?;
        Ok(path)
    }
}

/// Bad flag combinations that clap cannot express; exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Replayed outputs differ from the manifest; exit code 3.
#[derive(Debug)]
struct ReplayMismatch(Vec<String>);

impl fmt::Display for ReplayMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "replay did not reproduce: {}", self.0.join(", "))
    }
}

impl std::error::Error for ReplayMismatch {}

/// Input changed since the manifest was written; exit code 2.
#[derive(Debug)]
struct InputChanged(String);

impl fmt::Display for InputChanged {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "input {} differs from the manifest", self.0)
    }
}

impl std::error::Error for InputChanged {}

fn replay(args: &ReplayArgs) -> Result<()> {
    let original = RunManifest::read(&args.manifest)?;
    for (path, hash) in &original.inputs {
        if sha256_file(Path::new(path))? != *hash {
            return Err(InputChanged(path.clone()).into());
        }
    }
    let mut inv = original.invocation.clone();
    if let Some(dir) = &args.out_dir {
        inv.redirect(dir);
    }
    let written = inv.execute()?;
    let dir = written.parent().unwrap_or(Path::new("."));
    let mut bad = Vec::new();
    for (name, hash) in &original.outputs {
        let p = dir.join(name);
        if !p.exists() || sha256_file(&p)? != *hash {
            bad.push(name.clone());
        }
    }
    if !bad.is_empty() {
        return Err(ReplayMismatch(bad).into());
    }
    println!("replay: {} outputs reproduced bitwise in {}", original.outputs.len(), dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(UsageError("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Run(inv) => {
            let path = inv.execute()?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Replay(args) => replay(&args),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<ReplayMismatch>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<gradmap::Error>() {
            return match e {
                gradmap::Error::Invariant(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
        Err(_) => ExitCode::from(3),
    }
}
