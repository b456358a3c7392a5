// SPDX-License-Identifier: Apache-2.0

//! Boot-time scenarios: `total` boots spread over `concurrency` workers.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use thiserror::Error;

use super::report::samples_ms;
use super::stats::SampleSet;
use crate::microvm::{boot, BootError, BootRecord, Setup, VmConfig, DEFAULT_MEM_SIZE};
use crate::pool::{CostModel, LocalProvisioner, PoolError, PoolState, Provisioner};
use crate::virtio::DEFAULT_QUEUE_SIZE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    /// 500 boots, one at a time.
    Serial500,
    /// 1000 boots, 50 at a time.
    Concurrent1000,
    Custom { total: usize, concurrency: usize },
}

impl Scenario {
    pub fn total(self) -> usize {
        match self {
            Scenario::Serial500 => 500,
            Scenario::Concurrent1000 => 1000,
            Scenario::Custom { total, .. } => total,
        }
    }

    pub fn concurrency(self) -> usize {
        match self {
            Scenario::Serial500 => 1,
            Scenario::Concurrent1000 => 50,
            Scenario::Custom { concurrency, .. } => concurrency,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Serial500 => "serial500",
            Scenario::Concurrent1000 => "concurrent1000",
            Scenario::Custom { .. } => "custom",
        }
    }

    pub fn validate(self) -> Result<(), RunFailure> {
        let (total, concurrency) = (self.total(), self.concurrency());
        if total == 0 || concurrency == 0 {
            return Err(RunFailure::InvalidScenario(format!(
                "total ({total}) and concurrency ({concurrency}) must be positive"
            )));
        }
        if concurrency > total {
            return Err(RunFailure::InvalidScenario(format!(
                "concurrency {concurrency} exceeds total {total}"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "serial500" => Ok(Scenario::Serial500),
            "concurrent1000" => Ok(Scenario::Concurrent1000),
            // Sizes come from the caller.
            "custom" => Ok(Scenario::Custom {
                total: 0,
                concurrency: 1,
            }),
            other => Err(format!("unknown scenario `{other}` (serial500, concurrent1000, custom)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum RunFailure {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("pool setup: {0}")]
    PoolSetup(#[source] PoolError),
    /// The pool ran dry; `vm_id` is the first VM that found it empty.
    #[error("pool exhausted at vm {vm_id} ({failed} boots failed)")]
    PoolExhausted { vm_id: u64, failed: usize },
    /// Every failed boot, sorted by vm id.
    #[error("{} boots failed, first vm {}: {}", .0.len(), .0[0].0, .0[0].1)]
    Boots(Vec<(u64, BootError)>),
    #[error("state dir: {0}")]
    StateDir(#[source] std::io::Error),
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Parent of the per-run directory; the system temp dir if unset.
    pub state_dir: Option<PathBuf>,
    pub cost: CostModel,
    pub mem_size: u64,
    pub queue_size: u16,
    /// Pool size for the pool setup; `total` if unset.
    pub pool_capacity: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            state_dir: None,
            cost: CostModel::default(),
            mem_size: DEFAULT_MEM_SIZE,
            queue_size: DEFAULT_QUEUE_SIZE,
            pool_capacity: None,
        }
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub scenario: Scenario,
    pub setup: Setup,
    /// Sorted by `vm_id`.
    pub records: Vec<BootRecord>,
    /// Pool creation time; zero for the other setups.
    pub pool_setup: Duration,
    /// Wall time of the boot phase.
    pub wall: Duration,
}

impl RunOutcome {
    pub fn samples(&self) -> SampleSet {
        SampleSet::new(self.setup.label(), samples_ms(&self.records))
    }
}

/// Boots `scenario.total()` VMs of `setup`. For the pool setup the pool is
/// filled before the first boot and its creation is not part of any sample.
pub fn run_scenario(
    scenario: Scenario,
    setup: Setup,
    seed: u64,
    opts: &RunOptions,
) -> Result<RunOutcome, RunFailure> {
    scenario.validate()?;
    let parent = opts.state_dir.clone().unwrap_or_else(std::env::temp_dir);
    std::fs::create_dir_all(&parent).map_err(RunFailure::StateDir)?;
    // Socket paths must stay well below the sun_path limit.
    let run_dir = tempfile::Builder::new()
        .prefix("vr")
        .tempdir_in(&parent)
        .map_err(RunFailure::StateDir)?;
    let provisioner = LocalProvisioner::new(run_dir.path(), seed).with_cost(opts.cost);

    let t0 = Instant::now();
    let pool = match setup {
        Setup::Pool => {
            let n = opts.pool_capacity.unwrap_or(scenario.total());
            Some(PoolState::create(n, &provisioner).map_err(RunFailure::PoolSetup)?)
        }
        _ => None,
    };
    let pool_setup = if pool.is_some() { t0.elapsed() } else { Duration::ZERO };

    let cfg = VmConfig {
        mem_size: opts.mem_size,
        setup,
        queue_size: opts.queue_size,
        tpm_endpoint: None,
    };
    let total = scenario.total() as u64;
    let next = AtomicU64::new(0);
    let records = Mutex::new(Vec::with_capacity(total as usize));
    let failures = Mutex::new(Vec::new());

    let started = Instant::now();
    std::thread::scope(|s| {
        for _ in 0..scenario.concurrency() {
            s.spawn(|| loop {
                let vm_id = next.fetch_add(1, Ordering::Relaxed);
                if vm_id >= total {
                    break;
                }
                let prov: &dyn Provisioner = &provisioner;
                match boot(&cfg, vm_id, pool.as_ref(), Some(prov)) {
                    Ok(rec) => records.lock().unwrap().push(rec),
                    Err(fail) => failures.lock().unwrap().push((vm_id, fail.error)),
                }
            });
        }
    });
    let wall = started.elapsed();
    drop(pool);

    let mut failures = failures.into_inner().unwrap();
    if !failures.is_empty() {
        failures.sort_by_key(|f| f.0);
        if let Some((vm_id, _)) = failures
            .iter()
            .find(|(_, e)| matches!(e, BootError::Pool(PoolError::PoolExhausted)))
        {
            return Err(RunFailure::PoolExhausted {
                vm_id: *vm_id,
                failed: failures.len(),
            });
        }
        return Err(RunFailure::Boots(failures));
    }
    let mut records = records.into_inner().unwrap();
    records.sort_by_key(|r| r.vm_id);
    Ok(RunOutcome {
        scenario,
        setup,
        records,
        pool_setup,
        wall,
    })
}
