//! `skyprior` command-line tool.
//!
//! Exit codes: 0 success, 2 usage, 3 numeric failure, 4 I/O or format failure.

mod args;
mod commands;
mod failure;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command, ReplayArgs};
use failure::Failure;
use manifest::{file_digest, RunManifest};

fn absolute(path: &mut PathBuf) {
    if let Ok(p) = std::fs::canonicalize(&*path) {
        *path = p;
    }
}

/// Input paths are recorded absolute so a manifest replays from anywhere.
fn absolutize_inputs(command: &mut Command) {
    match command {
        Command::Synth(a) => [&mut a.scene, &mut a.psf, &mut a.noise].into_iter().flatten().for_each(absolute),
        Command::Restore(a) => {
            absolute(&mut a.input);
            [&mut a.psfs, &mut a.resume].into_iter().flatten().for_each(absolute);
        }
        Command::Coadd(a) => absolute(&mut a.input),
        Command::Metrics(a) => {
            absolute(&mut a.img);
            absolute(&mut a.truth);
            a.catalog.iter_mut().for_each(absolute);
        }
        Command::Export(a) => absolute(&mut a.input),
        Command::Gradcheck(_) | Command::Replay(_) => {}
    }
}

fn init_pool(threads: usize) -> Result<(), Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::usage(format!("cannot start {threads} worker threads: {e}")))
}

fn resolve_threads(requested: Option<usize>) -> Result<usize, Failure> {
    match requested {
        Some(0) => Err(Failure::usage("--threads must be at least 1")),
        Some(t) => Ok(t),
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn replay(a: &ReplayArgs, threads: Option<usize>) -> Result<(), Failure> {
    let recorded = RunManifest::read(&a.manifest)?;
    for (path, want) in &recorded.inputs {
        let got = file_digest(Path::new(path))?;
        if &got != want {
            return Err(Failure::format(format!("input {path} changed since the recorded run")));
        }
    }
    let mut command = recorded.command.clone();
    let out = match &a.out {
        Some(o) => o.clone(),
        None => {
            let dir = a.manifest.parent().unwrap_or(Path::new(".")).join("replay");
            if commands::writes_file(&command) {
                let name = recorded.outputs.keys().next().cloned().unwrap_or_else(|| "output".into());
                dir.join(name)
            } else {
                dir
            }
        }
    };
    if commands::writes_file(&command) {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
        }
    }
    commands::redirect(&mut command, out);
    let threads = resolve_threads(threads.or(Some(recorded.threads)))?;
    init_pool(threads)?;
    let fresh = commands::execute(&command, threads)?;
    let mut differing = Vec::new();
    for (name, want) in &recorded.outputs {
        let same = fresh.outputs.get(name) == Some(want);
        println!("{} {name}", if same { "same" } else { "DIFFERS" });
        if !same {
            differing.push(name.clone());
        }
    }
    if differing.is_empty() {
        println!("replay reproduced {} outputs", recorded.outputs.len());
        Ok(())
    } else {
        Err(Failure::numeric(format!("replay differs in {}", differing.join(", "))))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut command = cli.command;
    if let Command::Replay(a) = &command {
        return replay(a, cli.threads);
    }
    absolutize_inputs(&mut command);
    let threads = resolve_threads(cli.threads)?;
    init_pool(threads)?;
    commands::execute(&command, threads).map(|_| ())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
