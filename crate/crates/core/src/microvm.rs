// SPDX-License-Identifier: Apache-2.0

//! Simulated microVM lifecycle.
//!
//! A boot allocates guest memory and the TPM queue, obtains a vTPM according
//! to the setup, runs a fixed guest workload through the virtio device,
//! writes the boot-timer magic, and shuts down.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::device::{DeviceError, VtpmDevice};
use crate::mock_tpm::{extend_body, MockTpmState, PcrValue, STATE_FILE_LEN};
use crate::pool::{
    identity_blob_len, provision_on_demand, BackendEndpoint, PoolError, PoolState, ProvisionedInstance,
    Provisioner, VtpmInstance,
};
use crate::swtpm::{connect_ctrl, CtrlClient, DataChannel, ProtoError};
use crate::virtio::{DriverError, GuestDriver, GuestMemory, MemoryError, QueueError, QueueLayout, Virtqueue};
use crate::wire::{self, CommandCode, WireError, MAX_TPM_FRAME};

/// Guest address of the TPM queue's descriptor table.
pub const QUEUE_BASE: u64 = 0x0010_0000;
/// Guest address of the driver's command/response buffers.
pub const BUFFER_BASE: u64 = 0x0020_0000;
/// MMIO address of the boot-timer device.
pub const BOOT_TIMER_ADDR: u64 = 0xD000_0000;
/// Value the guest writes to the boot timer when init starts.
pub const BOOT_TIMER_MAGIC: u32 = 0xF17E_C4C7;

pub const DEFAULT_MEM_SIZE: u64 = 128 << 20;
/// PCR the workload measures the kernel into.
pub const KERNEL_PCR: u32 = 11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setup {
    Baseline,
    #[serde(rename = "ondemand")]
    OnDemand,
    Pool,
}

impl Setup {
    pub const ALL: [Setup; 3] = [Setup::Baseline, Setup::OnDemand, Setup::Pool];

    pub fn label(self) -> &'static str {
        match self {
            Setup::Baseline => "baseline",
            Setup::OnDemand => "ondemand",
            Setup::Pool => "pool",
        }
    }

    pub fn uses_tpm(self) -> bool {
        self != Setup::Baseline
    }
}

impl fmt::Display for Setup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Setup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Setup::Baseline),
            "ondemand" | "on-demand" => Ok(Setup::OnDemand),
            "pool" => Ok(Setup::Pool),
            other => Err(format!("unknown setup `{other}`")),
        }
    }
}

/// VM configuration. Serializes as a flat `key = value` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VmConfig {
    #[serde(default = "default_mem_size")]
    pub mem_size: u64,
    pub setup: Setup,
    #[serde(default = "default_queue_size")]
    pub queue_size: u16,
    /// Filled in at boot from the pool or provisioner.
    #[serde(skip)]
    pub tpm_endpoint: Option<BackendEndpoint>,
}

fn default_mem_size() -> u64 {
    DEFAULT_MEM_SIZE
}

fn default_queue_size() -> u16 {
    crate::virtio::queue::DEFAULT_QUEUE_SIZE
}

impl VmConfig {
    pub fn new(setup: Setup) -> Self {
        VmConfig {
            mem_size: DEFAULT_MEM_SIZE,
            setup,
            queue_size: default_queue_size(),
            tpm_endpoint: None,
        }
    }

    pub fn with_mem_size(mut self, bytes: u64) -> Self {
        self.mem_size = bytes;
        self
    }

    pub fn from_toml(s: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Error)]
pub enum BootError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("pool setup requires a pool")]
    MissingPool,
    #[error("on-demand setup requires a provisioner")]
    MissingProvisioner,
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("backend: {0}")]
    Backend(#[from] ProtoError),
    #[error("device: {0}")]
    Device(#[from] DeviceError),
    #[error("queue: {0}")]
    Queue(#[from] QueueError),
    #[error("driver: {0}")]
    Driver(#[from] DriverError),
    #[error("guest memory: {0}")]
    Memory(#[from] MemoryError),
    #[error("response frame: {0}")]
    Wire(#[from] WireError),
    #[error("{code} failed with rc {rc:#x}")]
    Tpm { code: CommandCode, rc: u32 },
    #[error("device did not complete the request")]
    NoCompletion,
    #[error("boot timer was never written")]
    TimerNotFired,
}

/// Per-VM outcome, one CSV row in the benchmark output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BootRecord {
    pub vm_id: u64,
    pub setup: Setup,
    /// Harness clock: boot entry to shutdown complete.
    pub t_total: Duration,
    /// Boot-timer clock: VM start to the guest's magic write.
    pub t_internal: Duration,
    pub tpm_rc_ok: bool,
    pub bytes_overhead: u64,
    pub instance_id: Option<String>,
    /// Every TPM response frame in workload order.
    pub transcript: Vec<Vec<u8>>,
    pub failed: bool,
}

pub const BOOT_RECORD_CSV_HEADER: &str = "vm_id,setup,t_total_ns,t_internal_ns,tpm_rc_ok,bytes_overhead";

impl BootRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.vm_id,
            self.setup,
            self.t_total.as_nanos(),
            self.t_internal.as_nanos(),
            self.tpm_rc_ok,
            self.bytes_overhead
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<BootRecord, String> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return Err(format!("expected 6 fields, got {}", f.len()));
        }
        let num = |s: &str| s.parse::<u64>().map_err(|e| format!("`{s}`: {e}"));
        Ok(BootRecord {
            vm_id: num(f[0])?,
            setup: f[1].parse()?,
            t_total: Duration::from_nanos(num(f[2])?),
            t_internal: Duration::from_nanos(num(f[3])?),
            tpm_rc_ok: f[4].parse().map_err(|e| format!("`{}`: {e}", f[4]))?,
            bytes_overhead: num(f[5])?,
            instance_id: None,
            transcript: Vec::new(),
            failed: false,
        })
    }

    pub fn pcr_after_boot(&self) -> Option<Vec<u8>> {
        let read = self.transcript.get(4)?;
        wire::decode_response(read).ok().map(|r| r.body)
    }
}

/// Boot-internal clock and the duration it reports.
pub fn boot_timer_elapsed(record: &BootRecord) -> Duration {
    record.t_internal
}

/// `|t_total - t_internal| / t_total`; `None` for failed or zero-length boots.
pub fn timer_agreement(record: &BootRecord) -> Option<f64> {
    if record.failed || record.t_total.is_zero() {
        return None;
    }
    let total = record.t_total.as_secs_f64();
    Some((total - record.t_internal.as_secs_f64()).abs() / total)
}

#[derive(Debug, Error)]
#[error("vm {} boot failed: {error}", record.vm_id)]
pub struct BootFailure {
    pub error: BootError,
    pub record: Box<BootRecord>,
}

/// Minimal MMIO device latching the time of the guest's magic write.
#[derive(Debug)]
pub struct BootTimer {
    start: Instant,
    fired: Option<Duration>,
}

impl BootTimer {
    pub fn start() -> Self {
        BootTimer {
            start: Instant::now(),
            fired: None,
        }
    }

    pub fn mmio_write(&mut self, offset: u64, data: &[u8]) {
        if offset == 0 && data == BOOT_TIMER_MAGIC.to_le_bytes() && self.fired.is_none() {
            self.fired = Some(self.start.elapsed());
        }
    }

    pub fn elapsed(&self) -> Option<Duration> {
        self.fired
    }
}

/// The fixed guest workload. The boot-timer write happens after the fifth
/// command.
pub fn guest_workload() -> Vec<(CommandCode, Vec<u8>)> {
    let kernel: PcrValue = Sha256::digest(b"kernel").into();
    vec![
        (CommandCode::Startup, vec![0, 0]),
        (CommandCode::SelfTest, Vec::new()),
        (CommandCode::GetRandom, 16u16.to_be_bytes().to_vec()),
        (CommandCode::PcrExtendSimple, extend_body(KERNEL_PCR, &kernel)),
        (CommandCode::PcrReadSimple, KERNEL_PCR.to_be_bytes().to_vec()),
        (CommandCode::Shutdown, vec![0, 0]),
    ]
}

const TIMER_AFTER: usize = 5;

/// Per-VM host bytes by owner, excluding guest memory and pool bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OverheadBreakdown {
    /// VMM structures every VM has.
    pub vmm_base: u64,
    /// VMM-side TPM additions: device, queue shadow, backend client.
    pub vmm_tpm: u64,
    /// The vTPM backend instance: responder, state, identity, framing.
    pub backend: u64,
}

impl OverheadBreakdown {
    pub fn for_queue(queue_size: u16) -> Self {
        let vmm_base = (std::mem::size_of::<VmConfig>() + std::mem::size_of::<BootTimer>()
            + std::mem::size_of::<GuestMemory>()) as u64;
        let shadow = QueueLayout::contiguous(queue_size.max(1).next_power_of_two(), 0)
            .map(|l| Virtqueue::new(l).shadow_bytes())
            .unwrap_or(0);
        let vmm_tpm = (std::mem::size_of::<VtpmDevice<DataChannel>>()
            + std::mem::size_of::<Virtqueue>()
            + shadow
            + std::mem::size_of::<CtrlClient>()
            + MAX_TPM_FRAME) as u64;
        let backend = (std::mem::size_of::<MockTpmState>()
            + STATE_FILE_LEN
            + identity_blob_len("vtpm-000000".len())
            + MAX_TPM_FRAME) as u64;
        OverheadBreakdown {
            vmm_base,
            vmm_tpm,
            backend,
        }
    }

    pub fn vmm_only(&self, setup: Setup) -> u64 {
        self.vmm_base + if setup.uses_tpm() { self.vmm_tpm } else { 0 }
    }

    pub fn total(&self, setup: Setup) -> u64 {
        self.vmm_only(setup) + if setup.uses_tpm() { self.backend } else { 0 }
    }
}

/// Deterministic per-VM overhead for `cfg`.
pub fn measure_overhead(cfg: &VmConfig) -> u64 {
    OverheadBreakdown::for_queue(cfg.queue_size).total(cfg.setup)
}

enum Lease<'a> {
    Pooled(&'a PoolState, VtpmInstance),
    OnDemand(ProvisionedInstance),
}

impl Lease<'_> {
    fn instance(&self) -> &VtpmInstance {
        match self {
            Lease::Pooled(_, i) => i,
            Lease::OnDemand(p) => &p.instance,
        }
    }

    fn release(self) -> Result<(), PoolError> {
        match self {
            Lease::Pooled(pool, i) => pool.retire(&i.instance_id),
            Lease::OnDemand(p) => {
                p.destroy();
                Ok(())
            }
        }
    }
}

/// Boots one VM. Failures still carry a record, flagged `failed`.
pub fn boot(
    cfg: &VmConfig,
    vm_id: u64,
    pool: Option<&PoolState>,
    provisioner: Option<&dyn Provisioner>,
) -> Result<BootRecord, BootFailure> {
    let harness_start = Instant::now();
    let mut record = BootRecord {
        vm_id,
        setup: cfg.setup,
        t_total: Duration::ZERO,
        t_internal: Duration::ZERO,
        tpm_rc_ok: !cfg.setup.uses_tpm(),
        bytes_overhead: 0,
        instance_id: None,
        transcript: Vec::new(),
        failed: false,
    };
    let mut shutdown_at = None;
    let result = run_vm(cfg, pool, provisioner, &mut record, &mut shutdown_at);
    // Releasing the backend lease happens after the VM is down and is not
    // part of the boot.
    record.t_total = shutdown_at.unwrap_or_else(Instant::now) - harness_start;
    record.bytes_overhead = measure_overhead(cfg);
    match result {
        Ok(()) => Ok(record),
        Err(error) => {
            record.failed = true;
            record.tpm_rc_ok = false;
            Err(BootFailure {
                error,
                record: Box::new(record),
            })
        }
    }
}

fn run_vm(
    cfg: &VmConfig,
    pool: Option<&PoolState>,
    provisioner: Option<&dyn Provisioner>,
    record: &mut BootRecord,
    shutdown_at: &mut Option<Instant>,
) -> Result<(), BootError> {
    let mut timer = BootTimer::start();
    let layout = QueueLayout::contiguous(cfg.queue_size, QUEUE_BASE)?;
    let buffers_end = BUFFER_BASE + GuestDriver::buffer_bytes(cfg.queue_size);
    if cfg.mem_size < buffers_end {
        return Err(BootError::Config(format!(
            "mem_size {} is below the {buffers_end}-byte minimum",
            cfg.mem_size
        )));
    }
    let mem = GuestMemory::new(cfg.mem_size);
    let mut driver = GuestDriver::new(mem.clone(), layout, BUFFER_BASE)?;
    let mmio_write = |timer: &mut BootTimer, addr: u64, data: &[u8]| {
        if addr == BOOT_TIMER_ADDR {
            timer.mmio_write(0, data);
        }
    };

    if !cfg.setup.uses_tpm() {
        mmio_write(&mut timer, BOOT_TIMER_ADDR, &BOOT_TIMER_MAGIC.to_le_bytes());
        record.t_internal = timer.elapsed().ok_or(BootError::TimerNotFired)?;
        *shutdown_at = Some(Instant::now());
        return Ok(());
    }

    let lease = match cfg.setup {
        Setup::Pool => {
            let pool = pool.ok_or(BootError::MissingPool)?;
            Lease::Pooled(pool, pool.acquire()?)
        }
        Setup::OnDemand => {
            let p = provisioner.ok_or(BootError::MissingProvisioner)?;
            Lease::OnDemand(provision_on_demand(p)?)
        }
        Setup::Baseline => unreachable!(),
    };
    record.instance_id = Some(lease.instance().instance_id.clone());

    let mut endpoint = lease.instance().endpoint.clone();
    let outcome = (|| -> Result<(), BootError> {
        let mut ctrl = connect_ctrl(&endpoint.ctrl_path)?;
        ctrl.ctrl_init()?;
        let data_path = endpoint.proposed_data_path();
        let data = ctrl.ctrl_set_data_channel(&data_path)?;
        endpoint.data_path = data_path;

        let notifications = Arc::new(AtomicU64::new(0));
        let n = notifications.clone();
        let mut device = VtpmDevice::new(data);
        device.activate(
            mem.clone(),
            Virtqueue::new(layout),
            Box::new(move || {
                n.fetch_add(1, Ordering::Relaxed);
            }),
        )?;

        for (i, (code, body)) in guest_workload().into_iter().enumerate() {
            if i == TIMER_AFTER {
                mmio_write(&mut timer, BOOT_TIMER_ADDR, &BOOT_TIMER_MAGIC.to_le_bytes());
            }
            let frame = wire::encode_command(code, &body)?;
            driver.submit(&frame, MAX_TPM_FRAME as u32)?;
            device.process_queue()?;
            let done = driver.poll_used()?.ok_or(BootError::NoCompletion)?;
            let resp = wire::decode_response(&done.data)?;
            record.transcript.push(done.data);
            if !resp.is_success() {
                return Err(BootError::Tpm { code, rc: resp.rc });
            }
        }
        record.t_internal = timer.elapsed().ok_or(BootError::TimerNotFired)?;
        record.tpm_rc_ok = true;
        ctrl.ctrl_shutdown()?;
        *shutdown_at = Some(Instant::now());
        Ok(())
    })();
    let released = lease.release();
    outcome?;
    released?;
    Ok(())
}
