use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use issf::experiment::{run_experiment, ExperimentSpec, RunManifest, Stage};

#[derive(Parser)]
#[command(name = "issf", version, about = "Input-to-state safety certification and simulation")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Grid-check the certificates declared in a spec.
    Certify(Common),
    /// Integrate every initial condition and write trajectories and events.
    Simulate(Common),
    /// Build the safety gains and admissibility witnesses.
    Gains(Common),
    /// Tabulate the smallest safe initial distance per input bound.
    Envelope(Common),
    /// Run the full pipeline of a spec (bundled `paper_sec4` when --spec is omitted).
    ReproducePaper(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment JSON file, or `bundled:<name>`.
    #[arg(long)]
    spec: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the spec.
    #[arg(long)]
    seed: Option<u64>,
}

fn load(spec: Option<&str>, fallback: Option<&str>) -> Result<ExperimentSpec> {
    let src = spec
        .or(fallback)
        .context("--spec is required for this verb")?;
    let parsed = match src.strip_prefix("bundled:") {
        Some(name) => ExperimentSpec::bundled(name),
        None => ExperimentSpec::from_file(src.as_ref()),
    };
    parsed.with_context(|| format!("loading spec {src}"))
}

fn stages_for(verb: &Verb) -> Option<Vec<Stage>> {
    match verb {
        Verb::Certify(_) => Some(vec![Stage::Certify]),
        Verb::Simulate(_) => Some(vec![Stage::Simulate, Stage::Plot]),
        Verb::Gains(_) => Some(vec![Stage::Gains]),
        Verb::Envelope(_) => Some(vec![Stage::Gains, Stage::Envelope]),
        Verb::ReproducePaper(_) => None,
    }
}

fn report(manifest: &RunManifest) {
    for s in &manifest.stages {
        match &s.message {
            Some(m) => println!("{:<9} {:<8} {:>8.2}s  {m}", s.stage, s.status, s.seconds),
            None => println!("{:<9} {:<8} {:>8.2}s", s.stage, s.status, s.seconds),
        }
    }
    println!("{} files, digest {}", manifest.files.len(), manifest.digest);
}

fn run(cli: Cli) -> Result<bool> {
    let stages = stages_for(&cli.verb);
    let (common, fallback) = match &cli.verb {
        Verb::ReproducePaper(c) => (c, Some("bundled:paper_sec4")),
        Verb::Certify(c) | Verb::Simulate(c) | Verb::Gains(c) | Verb::Envelope(c) => (c, None),
    };
    let mut spec = load(common.spec.as_deref(), fallback)?;
    if let Some(seed) = common.seed {
        spec = spec.with_seed(seed);
    }
    if let Some(stages) = stages {
        spec = spec.with_stages(stages);
    }
    let (manifest, _) = run_experiment(&spec, &common.out)
        .with_context(|| format!("running {} into {}", spec.name, common.out.display()))?;
    report(&manifest);
    Ok(manifest.ok())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
