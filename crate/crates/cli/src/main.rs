// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use vtpm_core::bench::report::{
    self, boottime_csv, memory_rows, parse_samples_csv, samples_ms, write_memoverhead, write_samples, MemoryRow,
};
use vtpm_core::bench::scenario::RunOptions;
use vtpm_core::bench::{emit_report, run_scenario, SampleSet, Scenario};
use vtpm_core::microvm::{boot, OverheadBreakdown};
use vtpm_core::pool::{CostModel, PoolState, Provisioner, CTRL_SOCKET, STATE_DIR_ENV, STATE_FILE};
use vtpm_core::swtpm::{serve, ServerConfig};
use vtpm_core::virtio::DEFAULT_QUEUE_SIZE;
use vtpm_core::{LocalProvisioner, MockTpmState, Setup, VmConfig};

#[derive(Parser)]
#[command(name = "vtpmctl", version, about = "vTPM pool and microVM boot benchmark")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Provision instances (identity, TPM state) under a state directory.
    Provision {
        #[arg(long)]
        count: usize,
        #[arg(long, env = STATE_DIR_ENV)]
        state_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        cost: CostArgs,
    },
    /// Run the backend server of a provisioned instance until CTRL_SHUTDOWN.
    Serve {
        #[arg(long)]
        instance: String,
        #[arg(long, env = STATE_DIR_ENV)]
        state_dir: PathBuf,
    },
    /// Boot one VM from a TOML config and print its record.
    RunVm {
        #[arg(long)]
        config: PathBuf,
        /// Instance directory parent for TPM setups; a temp dir if unset.
        #[arg(long, env = STATE_DIR_ENV)]
        state_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        cost: CostArgs,
    },
    /// Run a boot-time scenario and write sample, CDF and summary files.
    Bench {
        #[arg(long, default_value = "serial500")]
        scenario: Scenario,
        /// Comma-separated setups.
        #[arg(long, value_delimiter = ',', default_value = "baseline,ondemand,pool")]
        setup: Vec<Setup>,
        /// Overrides the scenario's boot count (the scenario becomes `custom`).
        #[arg(long)]
        total: Option<usize>,
        /// Overrides the scenario's worker count (the scenario becomes `custom`).
        #[arg(long)]
        concurrency: Option<usize>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, env = STATE_DIR_ENV)]
        state_dir: Option<PathBuf>,
        #[command(flatten)]
        cost: CostArgs,
    },
    /// Recompute summary and CDF files from `samples_*.csv` in a directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory; defaults to the input directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Copy)]
struct CostArgs {
    /// SHA-256 rounds in per-instance seed derivation.
    #[arg(long, default_value_t = CostModel::default().seed_derivation_rounds)]
    rounds: u32,
}

impl CostArgs {
    fn model(self) -> CostModel {
        CostModel {
            seed_derivation_rounds: self.rounds,
        }
    }
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Run(String),
}

fn run<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Run(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vtpmctl: {e}");
            match e {
                CliError::Usage(_) => ExitCode::from(2),
                CliError::Run(_) => ExitCode::from(1),
            }
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Provision {
            count,
            state_dir,
            seed,
            cost,
        } => provision(count, &state_dir, seed, cost.model()),
        Cmd::Serve { instance, state_dir } => serve_instance(&state_dir.join(instance)),
        Cmd::RunVm {
            config,
            state_dir,
            seed,
            cost,
        } => run_vm(&config, state_dir, seed, cost.model()),
        Cmd::Bench {
            scenario,
            setup,
            total,
            concurrency,
            seed,
            out,
            state_dir,
            cost,
        } => {
            let scenario = match (total, concurrency) {
                (None, None) => scenario,
                (t, c) => Scenario::Custom {
                    total: t.unwrap_or(scenario.total()),
                    concurrency: c.unwrap_or(scenario.concurrency()),
                },
            };
            scenario.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let opts = RunOptions {
                state_dir,
                cost: cost.model(),
                ..RunOptions::default()
            };
            bench(scenario, &setup, seed, &out, &opts)
        }
        Cmd::Report { input, out } => {
            let out = out.unwrap_or_else(|| input.clone());
            report_dir(&input, &out)
        }
    }
}

fn provision(count: usize, state_dir: &Path, seed: u64, cost: CostModel) -> Result<(), CliError> {
    let p = LocalProvisioner::new(state_dir, seed).with_cost(cost);
    for _ in 0..count {
        // The server is stopped right away; `serve` brings the instance up later.
        let mut inst = p.provision().map_err(run)?;
        println!("{}\t{}", inst.instance.instance_id, inst.instance.state_dir.display());
        inst.server.stop();
    }
    Ok(())
}

fn serve_instance(dir: &Path) -> Result<(), CliError> {
    let state_file = dir.join(STATE_FILE);
    let tpm = MockTpmState::load(&state_file).map_err(|e| CliError::Run(format!("{}: {e}", state_file.display())))?;
    let ctrl = dir.join(CTRL_SOCKET);
    let mut handle = serve(tpm, ServerConfig::new(&ctrl).with_state_file(state_file)).map_err(run)?;
    println!("{}", ctrl.display());
    handle.join();
    Ok(())
}

fn run_vm(config: &Path, state_dir: Option<PathBuf>, seed: u64, cost: CostModel) -> Result<(), CliError> {
    let text = fs::read_to_string(config).map_err(|e| CliError::Usage(format!("{}: {e}", config.display())))?;
    let cfg = VmConfig::from_toml(&text).map_err(|e| CliError::Usage(format!("{}: {e}", config.display())))?;
    let tmp;
    let dir = match state_dir {
        Some(d) => d,
        None => {
            tmp = tempfile::Builder::new().prefix("vm").tempdir().map_err(run)?;
            tmp.path().to_path_buf()
        }
    };
    let prov = LocalProvisioner::new(dir, seed).with_cost(cost);
    let pool = match cfg.setup {
        Setup::Pool => Some(PoolState::create(1, &prov).map_err(run)?),
        _ => None,
    };
    let rec = boot(&cfg, 0, pool.as_ref(), Some(&prov)).map_err(run)?;
    println!("{}", vtpm_core::microvm::BOOT_RECORD_CSV_HEADER);
    println!("{}", rec.csv_row());
    if let Some(pcr) = rec.pcr_after_boot() {
        let hex: String = pcr.iter().map(|b| format!("{b:02x}")).collect();
        println!("pcr{}={hex}", vtpm_core::microvm::KERNEL_PCR);
    }
    Ok(())
}

fn default_memory() -> Vec<MemoryRow> {
    memory_rows(&OverheadBreakdown::for_queue(DEFAULT_QUEUE_SIZE))
}

fn bench(scenario: Scenario, setups: &[Setup], seed: u64, out: &Path, opts: &RunOptions) -> Result<(), CliError> {
    if setups.is_empty() {
        return Err(CliError::Usage("no setups given".into()));
    }
    let mut sets = Vec::new();
    for &setup in setups {
        let outcome = run_scenario(scenario, setup, seed, opts).map_err(run)?;
        write_samples(out, scenario.name(), setup.label(), &outcome.records).map_err(run)?;
        eprintln!(
            "{scenario} {setup}: {} boots in {:.2?} (pool setup {:.2?})",
            outcome.records.len(),
            outcome.wall,
            outcome.pool_setup
        );
        sets.push(outcome.samples());
    }
    summarize(out, scenario.name(), &sets)
}

fn summarize(out: &Path, scenario: &str, sets: &[SampleSet]) -> Result<(), CliError> {
    let memory = default_memory();
    let baseline = Setup::Baseline.label();
    if sets.iter().any(|s| s.label == baseline) {
        emit_report(out, scenario, sets, baseline, &memory).map_err(run)?;
        print!("{}", boottime_csv(sets, baseline).map_err(run)?);
    } else {
        for set in sets {
            fs::write(out.join(format!("cdf_{scenario}_{}.csv", set.label)), report::cdf_csv(set)).map_err(run)?;
        }
        write_memoverhead(out, &memory).map_err(run)?;
    }
    Ok(())
}

fn report_dir(input: &Path, out: &Path) -> Result<(), CliError> {
    let entries = fs::read_dir(input).map_err(|e| CliError::Usage(format!("{}: {e}", input.display())))?;
    let mut by_scenario: BTreeMap<String, Vec<SampleSet>> = BTreeMap::new();
    let mut names: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    names.sort();
    for path in names {
        let Some(stem) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("samples_"))
            .and_then(|n| n.strip_suffix(".csv"))
        else {
            continue;
        };
        let Some((scenario, setup)) = stem.rsplit_once('_') else {
            continue;
        };
        let text = fs::read_to_string(&path).map_err(run)?;
        let records = parse_samples_csv(&path, &text).map_err(run)?;
        by_scenario
            .entry(scenario.to_string())
            .or_default()
            .push(SampleSet::new(setup, samples_ms(&records)));
    }
    if by_scenario.is_empty() {
        return Err(CliError::Run(format!("no samples_*.csv files in {}", input.display())));
    }
    fs::create_dir_all(out).map_err(run)?;
    for (scenario, mut sets) in by_scenario {
        let order = |l: &str| Setup::ALL.iter().position(|s| s.label() == l).unwrap_or(usize::MAX);
        sets.sort_by_key(|s| order(&s.label));
        summarize(out, &scenario, &sets)?;
    }
    Ok(())
}
