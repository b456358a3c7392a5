// SPDX-License-Identifier: Apache-2.0

//! Single-use vTPM pool.
//!
//! Instances are provisioned and started eagerly when the pool is created.
//! Each is granted to exactly one VM, in provisioning order, and retired
//! when that VM shuts down. Retired instances are never handed out again.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, MutexGuard};
use std::time::SystemTime;

use ed25519_dalek::{Signer, SigningKey};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mock_tpm::MockTpmState;
use crate::swtpm::{serve, ServerConfig, ServerHandle};

pub const STATE_DIR_ENV: &str = "VTPM_STATE_DIR";
pub const IDENTITY_FILE: &str = "identity.blob";
pub const STATE_FILE: &str = "tpmstate";
pub const CTRL_SOCKET: &str = "ctrl.sock";
pub const DATA_SOCKET: &str = "data.sock";

const IDENTITY_MAGIC: &[u8; 8] = b"VTPMID01";

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("pool exhausted")]
    PoolExhausted,
    #[error("instance {id} cannot leave state {from:?}")]
    InvalidTransition { id: String, from: InstanceStatus },
    #[error("unknown instance {0}")]
    UnknownInstance(String),
    #[error("provisioning failed: {0}")]
    ProvisionFailure(String),
}

impl PoolError {
    fn provision(context: &str, e: impl fmt::Display) -> Self {
        PoolError::ProvisionFailure(format!("{context}: {e}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InstanceStatus {
    Ready,
    InUse,
    Retired,
}

/// Where a vTPM backend listens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackendEndpoint {
    pub instance_id: String,
    pub ctrl_path: PathBuf,
    /// Empty until the data channel has been negotiated.
    pub data_path: PathBuf,
}

impl BackendEndpoint {
    pub fn new(instance_id: impl Into<String>, ctrl_path: impl Into<PathBuf>) -> Self {
        BackendEndpoint {
            instance_id: instance_id.into(),
            ctrl_path: ctrl_path.into(),
            data_path: PathBuf::new(),
        }
    }

    /// Data socket next to the control socket.
    pub fn proposed_data_path(&self) -> PathBuf {
        self.ctrl_path
            .parent()
            .map(|p| p.join(DATA_SOCKET))
            .unwrap_or_else(|| PathBuf::from(DATA_SOCKET))
    }
}

#[derive(Clone, Debug)]
pub struct VtpmInstance {
    pub instance_id: String,
    pub endpoint: BackendEndpoint,
    pub state_dir: PathBuf,
    pub provisioned_at: SystemTime,
    pub status: InstanceStatus,
}

/// A freshly provisioned, running instance.
pub struct ProvisionedInstance {
    pub instance: VtpmInstance,
    pub server: ServerHandle,
}

impl fmt::Debug for ProvisionedInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProvisionedInstance")
            .field("instance", &self.instance)
            .finish_non_exhaustive()
    }
}

impl ProvisionedInstance {
    /// Stops the server and removes the state directory.
    pub fn destroy(mut self) {
        self.server.stop();
        let _ = fs::remove_dir_all(&self.instance.state_dir);
    }
}

pub trait Provisioner: Send + Sync {
    fn provision(&self) -> Result<ProvisionedInstance, PoolError>;
}

/// Knobs for how expensive provisioning is.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostModel {
    /// SHA-256 iterations used to derive the instance's TPM seed from its
    /// identity key.
    pub seed_derivation_rounds: u32,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            seed_derivation_rounds: 20_000,
        }
    }
}

/// Provisions instances under `state_dir/<instance_id>/`: a fresh ed25519
/// identity key endorsed by a host key, a TPM state file, and a running
/// backend server.
pub struct LocalProvisioner {
    state_dir: PathBuf,
    prefix: String,
    seed: u64,
    cost: CostModel,
    host_key: SigningKey,
    next: AtomicU64,
}

impl fmt::Debug for LocalProvisioner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LocalProvisioner")
            .field("state_dir", &self.state_dir)
            .field("prefix", &self.prefix)
            .field("seed", &self.seed)
            .field("cost", &self.cost)
            .finish_non_exhaustive()
    }
}

impl LocalProvisioner {
    pub fn new(state_dir: impl Into<PathBuf>, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let mut host = [0u8; 32];
        rng.fill_bytes(&mut host);
        LocalProvisioner {
            state_dir: state_dir.into(),
            prefix: "vtpm".into(),
            seed,
            cost: CostModel::default(),
            host_key: SigningKey::from_bytes(&host),
            next: AtomicU64::new(0),
        }
    }

    /// Uses `$VTPM_STATE_DIR`.
    pub fn from_env(seed: u64) -> Result<Self, PoolError> {
        let dir = std::env::var_os(STATE_DIR_ENV)
            .ok_or_else(|| PoolError::ProvisionFailure(format!("{STATE_DIR_ENV} is not set")))?;
        Ok(Self::new(dir, seed))
    }

    pub fn with_cost(mut self, cost: CostModel) -> Self {
        self.cost = cost;
        self
    }

    pub fn with_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.prefix = prefix.into();
        self
    }

    pub fn state_dir(&self) -> &Path {
        &self.state_dir
    }

    pub fn cost(&self) -> CostModel {
        self.cost
    }

    fn provision_in(&self, serial: u64, id: &str, dir: &Path) -> Result<ProvisionedInstance, PoolError> {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(serial);
        let mut secret = [0u8; 32];
        rng.fill_bytes(&mut secret);
        let key = SigningKey::from_bytes(&secret);
        let identity = identity_blob(id, &key, &self.host_key);
        let rng_seed = derive_tpm_seed(&secret, id, self.cost.seed_derivation_rounds);

        fs::write(dir.join(IDENTITY_FILE), &identity).map_err(|e| PoolError::provision("identity", e))?;
        let state_file = dir.join(STATE_FILE);
        let tpm = MockTpmState::new(rng_seed);
        tpm.save(&state_file).map_err(|e| PoolError::provision("state", e))?;

        let ctrl_path = dir.join(CTRL_SOCKET);
        let server = serve(tpm, ServerConfig::new(&ctrl_path).with_state_file(state_file))
            .map_err(|e| PoolError::provision("serve", e))?;
        Ok(ProvisionedInstance {
            instance: VtpmInstance {
                instance_id: id.to_string(),
                endpoint: BackendEndpoint::new(id, ctrl_path),
                state_dir: dir.to_path_buf(),
                provisioned_at: SystemTime::now(),
                status: InstanceStatus::Ready,
            },
            server,
        })
    }
}

impl Provisioner for LocalProvisioner {
    fn provision(&self) -> Result<ProvisionedInstance, PoolError> {
        let serial = self.next.fetch_add(1, Ordering::Relaxed);
        let id = format!("{}-{serial:06}", self.prefix);
        let dir = self.state_dir.join(&id);
        fs::create_dir_all(&self.state_dir).map_err(|e| PoolError::provision("state dir", e))?;
        fs::create_dir(&dir).map_err(|e| PoolError::provision("instance dir", e))?;
        self.provision_in(serial, &id, &dir).inspect_err(|_| {
            let _ = fs::remove_dir_all(&dir);
        })
    }
}

/// `magic | id_len u16 BE | id | instance pubkey | host pubkey | host signature`.
/// The signature covers `id | instance pubkey`.
pub fn identity_blob(id: &str, key: &SigningKey, host: &SigningKey) -> Vec<u8> {
    let public = key.verifying_key().to_bytes();
    let mut signed = id.as_bytes().to_vec();
    signed.extend_from_slice(&public);
    let sig = host.sign(&signed).to_bytes();

    let mut out = Vec::with_capacity(8 + 2 + id.len() + 32 + 32 + 64);
    out.extend_from_slice(IDENTITY_MAGIC);
    out.extend_from_slice(&(id.len() as u16).to_be_bytes());
    out.extend_from_slice(id.as_bytes());
    out.extend_from_slice(&public);
    out.extend_from_slice(&host.verifying_key().to_bytes());
    out.extend_from_slice(&sig);
    out
}

pub fn identity_blob_len(id_len: usize) -> usize {
    IDENTITY_MAGIC.len() + 2 + id_len + 32 + 32 + 64
}

/// Iterated SHA-256 over the identity secret.
pub fn derive_tpm_seed(secret: &[u8; 32], id: &str, rounds: u32) -> u64 {
    let mut d: [u8; 32] = Sha256::new()
        .chain_update(secret)
        .chain_update(id.as_bytes())
        .finalize()
        .into();
    for _ in 0..rounds {
        d = Sha256::digest(d).into();
    }
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Provisions `n` ready instances up front.
pub fn create_pool(n: usize, p: &dyn Provisioner) -> Result<PoolState, PoolError> {
    PoolState::create(n, p)
}

/// Synchronous single-instance provisioning for the on-demand setup. The
/// instance is returned already in use.
pub fn provision_on_demand(p: &dyn Provisioner) -> Result<ProvisionedInstance, PoolError> {
    let mut inst = p.provision()?;
    inst.instance.status = InstanceStatus::InUse;
    Ok(inst)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PoolCounters {
    pub capacity: usize,
    pub ready: usize,
    pub in_use: usize,
    pub retired: usize,
    pub handed_out: usize,
}

/// What happens to a retired instance's state directory.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RetirePolicy {
    #[default]
    Remove,
    /// Renamed to `<instance_id>.retired`.
    Archive,
}

struct Slot {
    instance: VtpmInstance,
    server: Option<ServerHandle>,
}

struct PoolInner {
    slots: Vec<Slot>,
    index: HashMap<String, usize>,
    next_ready: usize,
    retired: usize,
}

pub struct PoolState {
    capacity: usize,
    policy: RetirePolicy,
    inner: Mutex<PoolInner>,
}

impl fmt::Debug for PoolState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PoolState")
            .field("counters", &self.counters())
            .finish()
    }
}

impl PoolState {
    /// Provisions `n` instances up front. On failure every instance
    /// provisioned so far is stopped and removed.
    pub fn create(n: usize, p: &dyn Provisioner) -> Result<Self, PoolError> {
        let mut slots: Vec<Slot> = Vec::with_capacity(n);
        for _ in 0..n {
            match p.provision() {
                Ok(pi) => slots.push(Slot {
                    instance: pi.instance,
                    server: Some(pi.server),
                }),
                Err(e) => {
                    for s in slots {
                        if let Some(server) = s.server {
                            ProvisionedInstance {
                                instance: s.instance,
                                server,
                            }
                            .destroy();
                        }
                    }
                    return Err(e);
                }
            }
        }
        let index = slots
            .iter()
            .enumerate()
            .map(|(i, s)| (s.instance.instance_id.clone(), i))
            .collect();
        Ok(PoolState {
            capacity: n,
            policy: RetirePolicy::default(),
            inner: Mutex::new(PoolInner {
                slots,
                index,
                next_ready: 0,
                retired: 0,
            }),
        })
    }

    pub fn with_retire_policy(mut self, policy: RetirePolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn lock(&self) -> MutexGuard<'_, PoolInner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Grants the oldest ready instance.
    pub fn acquire(&self) -> Result<VtpmInstance, PoolError> {
        let mut inner = self.lock();
        let i = inner.next_ready;
        let slot = inner.slots.get_mut(i).ok_or(PoolError::PoolExhausted)?;
        debug_assert_eq!(slot.instance.status, InstanceStatus::Ready);
        slot.instance.status = InstanceStatus::InUse;
        let granted = slot.instance.clone();
        inner.next_ready += 1;
        Ok(granted)
    }

    /// Marks an in-use instance retired, stops its server and disposes of its
    /// state directory.
    pub fn retire(&self, instance_id: &str) -> Result<(), PoolError> {
        let (server, dir) = {
            let mut inner = self.lock();
            let &i = inner
                .index
                .get(instance_id)
                .ok_or_else(|| PoolError::UnknownInstance(instance_id.to_string()))?;
            let slot = &mut inner.slots[i];
            if slot.instance.status != InstanceStatus::InUse {
                return Err(PoolError::InvalidTransition {
                    id: instance_id.to_string(),
                    from: slot.instance.status,
                });
            }
            slot.instance.status = InstanceStatus::Retired;
            let out = (slot.server.take(), slot.instance.state_dir.clone());
            inner.retired += 1;
            out
        };
        if let Some(mut server) = server {
            server.stop();
        }
        dispose(&dir, self.policy);
        Ok(())
    }

    pub fn counters(&self) -> PoolCounters {
        let inner = self.lock();
        let handed_out = inner.next_ready;
        PoolCounters {
            capacity: self.capacity,
            ready: inner.slots.len() - handed_out,
            in_use: handed_out - inner.retired,
            retired: inner.retired,
            handed_out,
        }
    }

    /// Status of every instance, in provisioning order.
    pub fn statuses(&self) -> Vec<(String, InstanceStatus)> {
        self.lock()
            .slots
            .iter()
            .map(|s| (s.instance.instance_id.clone(), s.instance.status))
            .collect()
    }
}

impl Drop for PoolState {
    fn drop(&mut self) {
        let inner = self.inner.get_mut().unwrap_or_else(|e| e.into_inner());
        for slot in inner.slots.iter_mut() {
            if let Some(mut server) = slot.server.take() {
                server.stop();
                let _ = fs::remove_dir_all(&slot.instance.state_dir);
            }
        }
    }
}

fn dispose(dir: &Path, policy: RetirePolicy) {
    let res: io::Result<()> = match policy {
        RetirePolicy::Remove => fs::remove_dir_all(dir),
        RetirePolicy::Archive => {
            let mut archived = dir.as_os_str().to_owned();
            archived.push(".retired");
            fs::rename(dir, archived)
        }
    };
    if let Err(e) = res {
        if e.kind() != io::ErrorKind::NotFound {
            eprintln!("vtpm pool: cannot dispose of {}: {e}", dir.display());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cheap(dir: &Path) -> LocalProvisioner {
        LocalProvisioner::new(dir, 1).with_cost(CostModel {
            seed_derivation_rounds: 1,
        })
    }

    #[test]
    fn empty_pool_is_exhausted() {
        let tmp = tempfile::tempdir().unwrap();
        let pool = PoolState::create(0, &cheap(tmp.path())).unwrap();
        assert!(matches!(pool.acquire(), Err(PoolError::PoolExhausted)));
    }

    #[test]
    fn fresh_pool_counters() {
        let tmp = tempfile::tempdir().unwrap();
        let pool = PoolState::create(10, &cheap(tmp.path())).unwrap();
        assert_eq!(
            pool.counters(),
            PoolCounters {
                capacity: 10,
                ready: 10,
                in_use: 0,
                retired: 0,
                handed_out: 0
            }
        );
        assert!(pool.statuses().iter().all(|(_, s)| *s == InstanceStatus::Ready));
    }

    #[test]
    fn fifo_grants_and_transitions() {
        let tmp = tempfile::tempdir().unwrap();
        let pool = PoolState::create(3, &cheap(tmp.path())).unwrap();
        let a = pool.acquire().unwrap();
        let b = pool.acquire().unwrap();
        assert_eq!(a.instance_id, "vtpm-000000");
        assert_eq!(b.instance_id, "vtpm-000001");
        assert_eq!(a.status, InstanceStatus::InUse);

        assert!(matches!(pool.retire("vtpm-000002"), Err(PoolError::InvalidTransition { from: InstanceStatus::Ready, .. })));
        pool.retire(&a.instance_id).unwrap();
        assert!(!a.state_dir.exists());
        assert!(matches!(pool.retire(&a.instance_id), Err(PoolError::InvalidTransition { from: InstanceStatus::Retired, .. })));
        assert!(matches!(pool.retire("nope"), Err(PoolError::UnknownInstance(_))));
        let c = pool.counters();
        assert_eq!((c.ready, c.in_use, c.retired, c.handed_out), (1, 1, 1, 2));
    }

    #[test]
    fn lifecycle_sweep() {
        let tmp = tempfile::tempdir().unwrap();
        let pool = PoolState::create(8, &cheap(tmp.path())).unwrap();
        for _ in 0..8 {
            let i = pool.acquire().unwrap();
            pool.retire(&i.instance_id).unwrap();
        }
        let c = pool.counters();
        assert_eq!((c.handed_out, c.retired, c.ready, c.in_use), (8, 8, 0, 0));
        assert!(matches!(pool.acquire(), Err(PoolError::PoolExhausted)));
    }

    #[test]
    fn archive_policy_keeps_state() {
        let tmp = tempfile::tempdir().unwrap();
        let pool = PoolState::create(1, &cheap(tmp.path()))
            .unwrap()
            .with_retire_policy(RetirePolicy::Archive);
        let i = pool.acquire().unwrap();
        pool.retire(&i.instance_id).unwrap();
        let archived = tmp.path().join("vtpm-000000.retired");
        assert!(archived.join(IDENTITY_FILE).exists());
        assert!(archived.join(STATE_FILE).exists());
        assert!(!archived.join(CTRL_SOCKET).exists());
    }

    #[test]
    fn provisioned_layout_and_identity() {
        let tmp = tempfile::tempdir().unwrap();
        let p = cheap(tmp.path());
        let pi = p.provision().unwrap();
        let dir = tmp.path().join("vtpm-000000");
        assert_eq!(pi.instance.state_dir, dir);
        assert!(dir.join(CTRL_SOCKET).exists());
        let blob = fs::read(dir.join(IDENTITY_FILE)).unwrap();
        assert_eq!(&blob[..8], IDENTITY_MAGIC);
        assert_eq!(blob.len(), 8 + 2 + 11 + 32 + 32 + 64);
        let st = MockTpmState::load(&dir.join(STATE_FILE)).unwrap();
        assert_eq!(st.rng_seed(), pi.server.tpm_snapshot().rng_seed());
        assert_eq!(pi.instance.endpoint.proposed_data_path(), dir.join(DATA_SOCKET));
        assert!(pi.instance.endpoint.data_path.as_os_str().is_empty());
        pi.destroy();
        assert!(!dir.exists());
    }

    #[test]
    fn provisioning_is_seeded() {
        let t1 = tempfile::tempdir().unwrap();
        let t2 = tempfile::tempdir().unwrap();
        let a = cheap(t1.path()).provision().unwrap();
        let b = cheap(t2.path()).provision().unwrap();
        assert_eq!(
            fs::read(a.instance.state_dir.join(IDENTITY_FILE)).unwrap(),
            fs::read(b.instance.state_dir.join(IDENTITY_FILE)).unwrap()
        );
        assert_eq!(a.server.tpm_snapshot().rng_seed(), b.server.tpm_snapshot().rng_seed());
    }

    #[test]
    fn seed_derivation_depends_on_rounds() {
        let s = [7u8; 32];
        assert_ne!(derive_tpm_seed(&s, "a", 1), derive_tpm_seed(&s, "a", 2));
        assert_ne!(derive_tpm_seed(&s, "a", 1), derive_tpm_seed(&s, "b", 1));
    }
}
