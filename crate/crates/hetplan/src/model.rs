//! Cluster, model, profile and plan types, plus their JSON representations.
//!
//! Memory is held in bytes internally. Cluster and profile documents carry
//! GiB floats and are converted on load.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sharding::UnitShardPlan;

pub const GIB: f64 = (1u64 << 30) as f64;
pub const DEFAULT_MEM_CAP_FRACTION: f64 = 0.80;
pub const DEFAULT_UNEVEN_OVERHEAD: f64 = 0.15;
pub const DEFAULT_BYTES_PER_PARAM_STATE: u32 = 16;

pub fn gib_to_bytes(gib: f64) -> f64 {
    gib * GIB
}

pub fn bytes_to_gib(bytes: f64) -> f64 {
    bytes / GIB
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpuSpec {
    pub id: String,
    pub memory_capacity: u64,
    pub profile_key: String,
}

/// Collective latencies for one FSDP unit under even sharding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommProfile {
    #[serde(rename = "allgather_ms")]
    pub allgather_even: f64,
    #[serde(rename = "reducescatter_ms")]
    pub reducescatter_even: f64,
    #[serde(default = "default_uneven_overhead")]
    pub uneven_overhead: f64,
}

fn default_uneven_overhead() -> f64 {
    DEFAULT_UNEVEN_OVERHEAD
}

fn default_mem_cap_fraction() -> f64 {
    DEFAULT_MEM_CAP_FRACTION
}

fn default_bytes_per_param_state() -> u32 {
    DEFAULT_BYTES_PER_PARAM_STATE
}

/// Ordered GPU list. Position in `gpus` is the GPU index used everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub gpus: Vec<GpuSpec>,
    pub comm: CommProfile,
    pub mem_cap_fraction: f64,
}

impl ClusterSpec {
    pub fn new(gpus: Vec<GpuSpec>, comm: CommProfile, mem_cap_fraction: f64) -> Result<Self> {
        let c = ClusterSpec {
            gpus,
            comm,
            mem_cap_fraction,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.gpus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gpus.is_empty()
    }

    /// Capacity after the cap fraction, in bytes.
    pub fn effective_capacity(&self, gpu: usize) -> f64 {
        self.mem_cap_fraction * self.gpus[gpu].memory_capacity as f64
    }

    pub fn total_effective_capacity(&self) -> f64 {
        (0..self.len()).map(|i| self.effective_capacity(i)).sum()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.gpus.iter().position(|g| g.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gpus.is_empty() {
            return Err(Error::Validation("cluster has no GPUs".into()));
        }
        let mut seen = BTreeSet::new();
        for g in &self.gpus {
            if !seen.insert(g.id.as_str()) {
                return Err(Error::Validation(format!("duplicate GPU id {:?}", g.id)));
            }
            if g.memory_capacity == 0 {
                return Err(Error::Validation(format!(
                    "GPU {:?} has nonpositive memory capacity",
                    g.id
                )));
            }
            if g.profile_key.is_empty() {
                return Err(Error::Validation(format!("GPU {:?} has empty profile_key", g.id)));
            }
        }
        if !(self.mem_cap_fraction > 0.0 && self.mem_cap_fraction <= 1.0) {
            return Err(Error::Validation(format!(
                "mem_cap_fraction {} outside (0, 1]",
                self.mem_cap_fraction
            )));
        }
        let c = &self.comm;
        if !(c.allgather_even > 0.0 && c.reducescatter_even > 0.0) {
            return Err(Error::Validation("collective latencies must be positive".into()));
        }
        if !(c.uneven_overhead >= 0.0) {
            return Err(Error::Validation("uneven_overhead must be nonnegative".into()));
        }
        Ok(())
    }

    /// Checks every `profile_key` against the set of known profiles.
    pub fn check_profiles<'a>(&self, keys: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let known: BTreeSet<&str> = keys.into_iter().collect();
        for g in &self.gpus {
            if !known.contains(g.profile_key.as_str()) {
                return Err(Error::Validation(format!(
                    "GPU {:?} references unknown profile_key {:?}",
                    g.id, g.profile_key
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub layers: u32,
    pub params_per_layer: u64,
    #[serde(default = "default_bytes_per_param_state")]
    pub bytes_per_param_state: u32,
    pub global_batch: u32,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.params_per_layer == 0 || self.global_batch == 0 {
            return Err(Error::Validation(
                "layers, params_per_layer and global_batch must be >= 1".into(),
            ));
        }
        if self.bytes_per_param_state == 0 {
            return Err(Error::Validation("bytes_per_param_state must be >= 1".into()));
        }
        Ok(())
    }

    pub fn total_params(&self) -> u64 {
        self.layers as u64 * self.params_per_layer
    }

    /// Bytes of parameters, gradients and optimizer moments for the whole model.
    pub fn state_bytes(&self) -> f64 {
        self.bytes_per_param_state as f64 * self.total_params() as f64
    }

    pub fn with_batch(mut self, global_batch: u32) -> Self {
        self.global_batch = global_batch;
        self
    }
}

/// Profiled per-microbatch latency of one layer, in milliseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct ComputeProfile {
    pub profile_key: String,
    pub points_fwd: Vec<(u32, f64)>,
    pub points_bwd: Vec<(u32, f64)>,
}

/// Profiled compute memory (bytes) by microbatch size.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryProfile {
    pub profile_key: String,
    pub points: Vec<(u32, f64)>,
}

fn check_contiguous(what: &str, points: &[(u32, f64)]) -> Result<()> {
    for (i, &(m, v)) in points.iter().enumerate() {
        if m as usize != i + 1 {
            return Err(Error::Validation(format!(
                "{what}: microbatch sizes must be 1, 2, 3, ... (found {m} at position {i})"
            )));
        }
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Validation(format!("{what}: value at m={m} must be positive")));
        }
    }
    Ok(())
}

impl ComputeProfile {
    pub fn validate(&self) -> Result<()> {
        check_contiguous(&format!("{} fwd", self.profile_key), &self.points_fwd)?;
        check_contiguous(&format!("{} bwd", self.profile_key), &self.points_bwd)
    }
}

impl MemoryProfile {
    pub fn validate(&self) -> Result<()> {
        check_contiguous(&format!("{} memory", self.profile_key), &self.points)?;
        if self.points.windows(2).any(|w| w[1].1 <= w[0].1) {
            return Err(Error::Validation(format!(
                "{} memory: compute memory must strictly increase with m",
                self.profile_key
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuAssignment {
    pub gpu_id: String,
    pub microbatch: u32,
    pub num_microbatches: u32,
    pub batch: u32,
    pub state_ratio: f64,
    pub predicted_compute_mem_bytes: f64,
    pub predicted_state_mem_bytes: f64,
}

impl GpuAssignment {
    pub fn is_idle(&self) -> bool {
        self.batch == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub global_batch: u32,
    pub assignments: Vec<GpuAssignment>,
    pub predicted_layer_fwd_ms: f64,
    pub predicted_layer_bwd_ms: f64,
    pub predicted_iteration_ms: f64,
    /// Minimized objective: max over GPUs of per-GPU forward+backward layer time.
    pub dp_objective_ms: f64,
    pub uneven_sharding_used: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_shards: Option<UnitShardPlan>,
}

// ---- documents ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuDoc {
    pub id: String,
    pub memory_gib: f64,
    pub profile_key: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterDoc {
    pub gpus: Vec<GpuDoc>,
    pub comm: CommProfile,
    #[serde(default = "default_mem_cap_fraction")]
    pub mem_cap_fraction: f64,
}

impl TryFrom<ClusterDoc> for ClusterSpec {
    type Error = Error;

    fn try_from(doc: ClusterDoc) -> Result<Self> {
        let gpus = doc
            .gpus
            .into_iter()
            .map(|g| {
                if !(g.memory_gib > 0.0) || !g.memory_gib.is_finite() {
                    return Err(Error::Validation(format!(
                        "GPU {:?} has nonpositive memory capacity",
                        g.id
                    )));
                }
                Ok(GpuSpec {
                    id: g.id,
                    memory_capacity: gib_to_bytes(g.memory_gib).round() as u64,
                    profile_key: g.profile_key,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ClusterSpec::new(gpus, doc.comm, doc.mem_cap_fraction)
    }
}

impl From<&ClusterSpec> for ClusterDoc {
    fn from(c: &ClusterSpec) -> Self {
        ClusterDoc {
            gpus: c
                .gpus
                .iter()
                .map(|g| GpuDoc {
                    id: g.id.clone(),
                    memory_gib: bytes_to_gib(g.memory_capacity as f64),
                    profile_key: g.profile_key.clone(),
                })
                .collect(),
            comm: c.comm,
            mem_cap_fraction: c.mem_cap_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileDoc {
    pub profile_key: String,
    pub fwd_ms: Vec<(u32, f64)>,
    pub bwd_ms: Vec<(u32, f64)>,
    pub compute_mem_gib: Vec<(u32, f64)>,
}

impl ProfileDoc {
    pub fn into_profiles(self) -> Result<(ComputeProfile, MemoryProfile)> {
        let compute = ComputeProfile {
            profile_key: self.profile_key.clone(),
            points_fwd: self.fwd_ms,
            points_bwd: self.bwd_ms,
        };
        let memory = MemoryProfile {
            profile_key: self.profile_key,
            points: self
                .compute_mem_gib
                .into_iter()
                .map(|(m, g)| (m, gib_to_bytes(g)))
                .collect(),
        };
        compute.validate()?;
        memory.validate()?;
        Ok((compute, memory))
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ProfileFile {
    One(ProfileDoc),
    Many(Vec<ProfileDoc>),
}

// ---- parsing and loading ----

pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn parse_cluster(text: &str) -> Result<ClusterSpec> {
    parse_json::<ClusterDoc>(text)?.try_into()
}

pub fn parse_model(text: &str) -> Result<ModelSpec> {
    let m: ModelSpec = parse_json(text)?;
    m.validate()?;
    Ok(m)
}

/// Accepts a single profile object or an array of them.
pub fn parse_profiles(text: &str) -> Result<Vec<ProfileDoc>> {
    let docs = match parse_json::<ProfileFile>(text) {
        Ok(ProfileFile::One(d)) => vec![d],
        Ok(ProfileFile::Many(v)) => v,
        // untagged errors are uninformative; retry as a single object for the message
        Err(_) => vec![parse_json::<ProfileDoc>(text)?],
    };
    if docs.is_empty() {
        return Err(Error::Validation("profile file contains no profiles".into()));
    }
    Ok(docs)
}

pub fn load_cluster(path: impl AsRef<Path>) -> Result<ClusterSpec> {
    parse_cluster(&read(path.as_ref())?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelSpec> {
    parse_model(&read(path.as_ref())?)
}

pub fn load_profiles(path: impl AsRef<Path>) -> Result<Vec<ProfileDoc>> {
    parse_profiles(&read(path.as_ref())?)
}

pub fn load_plan(path: impl AsRef<Path>) -> Result<TrainPlan> {
    parse_json(&read(path.as_ref())?)
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    parse_json(&read(path.as_ref())?)
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

pub fn save_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_json_pretty(value)).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const CLUSTER_A: &str = r#"{
        "gpus": [
            {"id": "a6000-0", "memory_gib": 48, "profile_key": "A6000"},
            {"id": "l4-0", "memory_gib": 24, "profile_key": "L4"},
            {"id": "l4-1", "memory_gib": 24, "profile_key": "L4"},
            {"id": "p40-0", "memory_gib": 24, "profile_key": "P40"},
            {"id": "p40-1", "memory_gib": 24, "profile_key": "P40"},
            {"id": "p40-2", "memory_gib": 24, "profile_key": "P40"},
            {"id": "p100-0", "memory_gib": 12, "profile_key": "P100"},
            {"id": "p100-1", "memory_gib": 12, "profile_key": "P100"}
        ],
        "comm": {"allgather_ms": 8.0, "reducescatter_ms": 10.0}
    }"#;

    #[test]
    fn cluster_a_loads_with_defaults() {
        let c = parse_cluster(CLUSTER_A).unwrap();
        assert_eq!(c.len(), 8);
        assert_eq!(c.mem_cap_fraction, 0.8);
        assert_eq!(c.comm.uneven_overhead, 0.15);
        assert_eq!(c.gpus[6].memory_capacity, 12 << 30);
        assert!((c.effective_capacity(6) - 9.6 * GIB).abs() < 1.0);
    }

    #[test]
    fn single_gpu_cluster() {
        let c = parse_cluster(
            r#"{"gpus":[{"id":"g","memory_gib":16,"profile_key":"V100"}],
                "comm":{"allgather_ms":1,"reducescatter_ms":1}}"#,
        )
        .unwrap();
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn duplicate_id_rejected() {
        let err = parse_cluster(
            r#"{"gpus":[{"id":"g","memory_gib":16,"profile_key":"V"},
                        {"id":"g","memory_gib":16,"profile_key":"V"}],
                "comm":{"allgather_ms":1,"reducescatter_ms":1}}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(ref s) if s.contains("duplicate")));
    }

    #[test]
    fn unknown_fields_and_bad_capacity_rejected() {
        let unknown = r#"{"gpus":[{"id":"g","memory_gib":16,"profile_key":"V","x":1}],
                "comm":{"allgather_ms":1,"reducescatter_ms":1}}"#;
        assert!(matches!(parse_cluster(unknown), Err(Error::Parse(_))));
        let zero = r#"{"gpus":[{"id":"g","memory_gib":0,"profile_key":"V"}],
                "comm":{"allgather_ms":1,"reducescatter_ms":1}}"#;
        assert!(matches!(parse_cluster(zero), Err(Error::Validation(_))));
        assert!(matches!(parse_cluster("{"), Err(Error::Parse(_))));
    }

    #[test]
    fn dangling_profile_key() {
        let c = parse_cluster(CLUSTER_A).unwrap();
        assert!(c.check_profiles(["A6000", "L4", "P40", "P100"]).is_ok());
        assert!(c.check_profiles(["A6000", "L4", "P40"]).is_err());
    }

    #[test]
    fn model_state_bytes() {
        let m = parse_model(r#"{"layers":24,"params_per_layer":1000,"global_batch":8}"#).unwrap();
        assert_eq!(m.bytes_per_param_state, 16);
        assert_eq!(m.state_bytes(), 16.0 * 24_000.0);
        assert!(parse_model(r#"{"layers":0,"params_per_layer":1,"global_batch":1}"#).is_err());
    }

    #[test]
    fn profile_shapes() {
        let one = r#"{"profile_key":"k","fwd_ms":[[1,1.0],[2,2.0]],"bwd_ms":[[1,2.0],[2,4.0]],
                      "compute_mem_gib":[[1,1.0],[2,1.5]]}"#;
        let docs = parse_profiles(one).unwrap();
        assert_eq!(docs.len(), 1);
        let (c, m) = docs[0].clone().into_profiles().unwrap();
        assert_eq!(c.points_fwd.len(), 2);
        assert_eq!(m.points[1].1, 1.5 * GIB);
        let gap = r#"{"profile_key":"k","fwd_ms":[[1,1.0],[3,2.0]],"bwd_ms":[[1,2.0],[3,4.0]],
                      "compute_mem_gib":[[1,1.0],[3,1.5]]}"#;
        assert!(parse_profiles(gap).unwrap()[0].clone().into_profiles().is_err());
        let flat_mem = r#"{"profile_key":"k","fwd_ms":[[1,1.0]],"bwd_ms":[[1,2.0]],
                      "compute_mem_gib":[[1,1.0],[2,1.0]]}"#;
        assert!(parse_profiles(flat_mem).unwrap()[0].clone().into_profiles().is_err());
        assert!(parse_profiles("[]").is_err());
    }
}
