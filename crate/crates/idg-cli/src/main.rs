//! `idg` command-line entry point.
//!
//! Exit codes: 0 when every check passed, 2 when the run finished but raised
//! flags, 1 on errors.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use idg::cli::{cmd_generate, cmd_offline, cmd_online, cmd_repro_paper, cmd_verify, CliError, Outcome};
use idg::scenario::Scenario;

#[derive(Parser)]
#[command(name = "idg", version, about = "Inverse differential game identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate ground-truth demonstrations.
    Generate(Common),
    /// Offline identification and forward verification.
    Offline(Common),
    /// Offline identification followed by the online learner.
    Online(Common),
    /// Forward-solve the scenario's verify parameters and compare.
    Verify(Common),
    /// Run the bundled example experiments and print the comparison table.
    ReproPaper(ReproArgs),
}

#[derive(Args)]
struct Common {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    #[command(flatten)]
    shared: Shared,
}

#[derive(Args)]
struct ReproArgs {
    /// Directory holding the three example scenario files; bundled copies are used when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[command(flatten)]
    shared: Shared,
}

#[derive(Args)]
struct Shared {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a scenario field, e.g. `online.tau=[8]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Shared {
    fn overrides(&self) -> Vec<String> {
        let mut v = self.set.clone();
        if let Some(s) = self.seed {
            v.push(format!("seed={s}"));
        }
        v
    }
}

fn run(cli: Cli) -> Result<Outcome, CliError> {
    let scenario_cmd = |c: &Common, f: fn(&Scenario, &std::path::Path) -> Result<Outcome, CliError>| {
        let sc = Scenario::load(&c.scenario, &c.shared.overrides())?;
        f(&sc, &c.shared.out)
    };
    match &cli.command {
        Command::Generate(c) => scenario_cmd(c, cmd_generate),
        Command::Offline(c) => scenario_cmd(c, cmd_offline),
        Command::Online(c) => scenario_cmd(c, cmd_online),
        Command::Verify(c) => scenario_cmd(c, cmd_verify),
        Command::ReproPaper(r) => cmd_repro_paper(r.scenario.as_deref(), &r.shared.out, &r.shared.overrides()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(o) => {
            // a closed pipe (e.g. `| head`) is not an error of the run
            let mut out = std::io::stdout().lock();
            let _ = write!(out, "{}", o.summary);
            for f in &o.files {
                let _ = writeln!(out, "wrote {}", f.display());
            }
            if o.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
