//! Compute-latency, compute-memory and collective-latency models.
//!
//! Latency inside the profiled range is an exact table lookup; beyond it an
//! affine least-squares fit over the upper (saturated) part of the profile is
//! extrapolated. Compute memory is affine in the microbatch size and does not
//! depend on the number of microbatches.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClusterSpec, CommProfile, ComputeProfile, MemoryProfile, ProfileDoc};
use crate::scalar::Scalar;

/// Extrapolation gap above which a fit is flagged.
pub const CONTINUITY_WARN_REL: f64 = 0.10;
/// Allowed relative spread of compute-memory slopes within one cluster.
pub const MEMORY_SLOPE_SPREAD: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyModel<T> {
    /// `table[m - 1]` is the profiled latency for microbatch `m`.
    pub table: Vec<T>,
    pub slope: T,
    pub intercept: T,
}

impl<T: Scalar> LatencyModel<T> {
    /// Purely affine model with no profiled table.
    pub fn affine(intercept: T, slope: T) -> Self {
        LatencyModel {
            table: Vec::new(),
            slope,
            intercept,
        }
    }

    pub fn max_profiled(&self) -> u32 {
        self.table.len() as u32
    }

    /// Single-microbatch latency in ms.
    #[inline]
    pub fn eval(&self, m: u32) -> T {
        if m == 0 {
            return T::zero();
        }
        match self.table.get(m as usize - 1) {
            Some(&v) => v,
            None => self.intercept + self.slope * T::count(m as u64),
        }
    }

    /// Latency of `l` microbatches of size `m` run back to back.
    #[inline]
    pub fn total(&self, m: u32, l: u32) -> T {
        T::count(l as u64) * self.eval(m)
    }

    pub fn cast<U: Scalar>(&self) -> LatencyModel<U> {
        LatencyModel {
            table: self.table.iter().map(|v| U::lit(v.as_f64())).collect(),
            slope: U::lit(self.slope.as_f64()),
            intercept: U::lit(self.intercept.as_f64()),
        }
    }
}

/// `T_f(m, l)` / `T_b(m, l)`.
pub fn total_latency<T: Scalar>(model: &LatencyModel<T>, m: u32, l: u32) -> T {
    model.total(m, l)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryModel<T> {
    /// Bytes per unit of microbatch size.
    pub slope: T,
    /// Bytes at m = 0 (framework floor).
    pub intercept: T,
}

impl<T: Scalar> MemoryModel<T> {
    #[inline]
    pub fn eval(&self, m: u32) -> T {
        self.intercept + self.slope * T::count(m as u64)
    }

    pub fn cast<U: Scalar>(&self) -> MemoryModel<U> {
        MemoryModel {
            slope: U::lit(self.slope.as_f64()),
            intercept: U::lit(self.intercept.as_f64()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub slope: f64,
    pub intercept: f64,
    /// Largest |fit - point| / point over the points used in the fit.
    pub max_residual_rel: f64,
    /// |eval(m_max) - fit(m_max)| / eval(m_max); zero for memory fits.
    pub continuity_gap_rel: f64,
}

impl FitDiagnostics {
    pub fn warning(&self) -> Option<String> {
        (self.continuity_gap_rel > CONTINUITY_WARN_REL).then(|| {
            format!(
                "extrapolation departs from last profiled point by {:.1}%",
                100.0 * self.continuity_gap_rel
            )
        })
    }
}

/// Ordinary least squares, returning `(slope, intercept)`.
fn least_squares<T: Scalar>(points: &[(u32, T)]) -> (T, T) {
    let n = T::count(points.len() as u64);
    let mean_x = points.iter().fold(T::zero(), |a, p| a + T::count(p.0 as u64)) / n;
    let mean_y = points.iter().fold(T::zero(), |a, p| a + p.1) / n;
    let (mut sxy, mut sxx) = (T::zero(), T::zero());
    for &(x, y) in points {
        let dx = T::count(x as u64) - mean_x;
        sxy += dx * (y - mean_y);
        sxx += dx * dx;
    }
    let slope = sxy / sxx;
    (slope, mean_y - slope * mean_x)
}

fn max_residual<T: Scalar>(points: &[(u32, T)], slope: T, intercept: T) -> f64 {
    points
        .iter()
        .map(|&(x, y)| ((intercept + slope * T::count(x as u64) - y) / y).abs().as_f64())
        .fold(0.0, f64::max)
}

pub fn default_linear_regime_start(max_profiled: u32) -> u32 {
    max_profiled.div_ceil(2).max(1)
}

/// Fits one latency curve. `linear_regime_start` defaults to `ceil(m_max / 2)`.
pub fn fit_latency_points<T: Scalar>(
    what: &str,
    points: &[(u32, f64)],
    linear_regime_start: Option<u32>,
) -> Result<(LatencyModel<T>, FitDiagnostics)> {
    let max_m = points.last().map_or(0, |p| p.0);
    let start = linear_regime_start.unwrap_or_else(|| default_linear_regime_start(max_m));
    let linear: Vec<(u32, T)> = points
        .iter()
        .filter(|p| p.0 >= start)
        .map(|&(m, v)| (m, T::lit(v)))
        .collect();
    if linear.len() < 2 {
        return Err(Error::InsufficientPoints {
            what: format!("{what} (linear regime from m={start})"),
            needed: 2,
            got: linear.len(),
        });
    }
    let (slope, intercept) = least_squares(&linear);
    if !(slope > T::zero()) {
        return Err(Error::Validation(format!(
            "{what}: fitted latency slope {slope} is not positive"
        )));
    }
    let table: Vec<T> = points.iter().map(|p| T::lit(p.1)).collect();
    let last = *table.last().expect("nonempty");
    let gap = ((last - (intercept + slope * T::count(max_m as u64))) / last).abs();
    let diag = FitDiagnostics {
        slope: slope.as_f64(),
        intercept: intercept.as_f64(),
        max_residual_rel: max_residual(&linear, slope, intercept),
        continuity_gap_rel: gap.as_f64(),
    };
    Ok((
        LatencyModel {
            table,
            slope,
            intercept,
        },
        diag,
    ))
}

/// Fits forward and backward latency models from a compute profile.
pub fn fit_latency<T: Scalar>(
    profile: &ComputeProfile,
    linear_regime_start: Option<u32>,
) -> Result<(LatencyModel<T>, LatencyModel<T>)> {
    profile.validate()?;
    let key = &profile.profile_key;
    let (f, _) = fit_latency_points(&format!("{key} fwd"), &profile.points_fwd, linear_regime_start)?;
    let (b, _) = fit_latency_points(&format!("{key} bwd"), &profile.points_bwd, linear_regime_start)?;
    Ok((f, b))
}

pub fn fit_memory_points<T: Scalar>(
    what: &str,
    points: &[(u32, f64)],
) -> Result<(MemoryModel<T>, FitDiagnostics)> {
    if points.len() < 2 {
        return Err(Error::InsufficientPoints {
            what: what.to_string(),
            needed: 2,
            got: points.len(),
        });
    }
    let pts: Vec<(u32, T)> = points.iter().map(|&(m, v)| (m, T::lit(v))).collect();
    let (slope, intercept) = least_squares(&pts);
    if !(slope > T::zero()) {
        return Err(Error::Validation(format!(
            "{what}: fitted memory slope {slope} is not positive"
        )));
    }
    let diag = FitDiagnostics {
        slope: slope.as_f64(),
        intercept: intercept.as_f64(),
        max_residual_rel: max_residual(&pts, slope, intercept),
        continuity_gap_rel: 0.0,
    };
    Ok((MemoryModel { slope, intercept }, diag))
}

pub fn fit_memory<T: Scalar>(profile: &MemoryProfile) -> Result<MemoryModel<T>> {
    if profile.points.len() >= 2 {
        profile.validate()?;
    }
    fit_memory_points(&format!("{} memory", profile.profile_key), &profile.points).map(|r| r.0)
}

/// AllGather and ReduceScatter latency for one unit; uneven sharding scales
/// both by `1 + uneven_overhead`.
pub fn collective_latency<T: Scalar>(comm: &CommProfile, uneven: bool) -> (T, T) {
    let factor = if uneven { 1.0 + comm.uneven_overhead } else { 1.0 };
    (
        T::lit(comm.allgather_even * factor),
        T::lit(comm.reducescatter_even * factor),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuPerf<T> {
    pub fwd: LatencyModel<T>,
    pub bwd: LatencyModel<T>,
    pub memory: MemoryModel<T>,
}

impl<T: Scalar> GpuPerf<T> {
    pub fn cast<U: Scalar>(&self) -> GpuPerf<U> {
        GpuPerf {
            fwd: self.fwd.cast(),
            bwd: self.bwd.cast(),
            memory: self.memory.cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileDiagnostics {
    pub fwd: FitDiagnostics,
    pub bwd: FitDiagnostics,
    pub memory: FitDiagnostics,
}

/// One fitted profile as written by `hetplan fit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FittedProfile {
    pub profile_key: String,
    pub models: GpuPerf<f64>,
    pub diagnostics: ProfileDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FittedModels {
    pub profiles: Vec<FittedProfile>,
}

impl FittedModels {
    pub fn from_docs(docs: &[ProfileDoc], linear_regime_start: Option<u32>) -> Result<Self> {
        let mut profiles = Vec::with_capacity(docs.len());
        for doc in docs {
            profiles.push(fit_profile(doc, linear_regime_start)?);
        }
        Ok(FittedModels { profiles })
    }

    pub fn get(&self, key: &str) -> Option<&FittedProfile> {
        self.profiles.iter().find(|p| p.profile_key == key)
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        for p in &self.profiles {
            for (name, d) in [("fwd", &p.diagnostics.fwd), ("bwd", &p.diagnostics.bwd)] {
                if let Some(w) = d.warning() {
                    out.push(format!("{} {}: {}", p.profile_key, name, w));
                }
            }
        }
        out
    }
}

pub fn fit_profile(doc: &ProfileDoc, linear_regime_start: Option<u32>) -> Result<FittedProfile> {
    let (compute, memory) = doc.clone().into_profiles()?;
    let key = &compute.profile_key;
    let (fwd, fd) = fit_latency_points(&format!("{key} fwd"), &compute.points_fwd, linear_regime_start)?;
    let (bwd, bd) = fit_latency_points(&format!("{key} bwd"), &compute.points_bwd, linear_regime_start)?;
    let (mem, md) = fit_memory_points(&format!("{key} memory"), &memory.points)?;
    Ok(FittedProfile {
        profile_key: key.clone(),
        models: GpuPerf {
            fwd,
            bwd,
            memory: mem,
        },
        diagnostics: ProfileDiagnostics {
            fwd: fd,
            bwd: bd,
            memory: md,
        },
    })
}

/// Per-GPU models in cluster order plus the collective model.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPerf<T> {
    pub gpus: Vec<GpuPerf<T>>,
    pub comm: CommProfile,
    /// Largest compute-memory slope in the cluster, used for aggregate bounds.
    pub shared_mem_slope: T,
}

impl<T: Scalar> ClusterPerf<T> {
    /// Resolves every GPU's profile key and checks that compute-memory slopes
    /// agree within [`MEMORY_SLOPE_SPREAD`].
    pub fn new(cluster: &ClusterSpec, by_key: &BTreeMap<String, GpuPerf<T>>) -> Result<Self> {
        cluster.check_profiles(by_key.keys().map(String::as_str))?;
        let gpus: Vec<GpuPerf<T>> = cluster
            .gpus
            .iter()
            .map(|g| by_key[&g.profile_key].clone())
            .collect();
        let (lo, hi) = gpus.iter().fold((T::infinity(), T::zero()), |(lo, hi), g| {
            (lo.min(g.memory.slope), hi.max(g.memory.slope))
        });
        if (hi - lo) / hi > T::lit(MEMORY_SLOPE_SPREAD) {
            return Err(Error::Validation(format!(
                "compute-memory slopes differ by more than {:.0}% across the cluster ({lo} .. {hi} bytes per sample)",
                100.0 * MEMORY_SLOPE_SPREAD
            )));
        }
        Ok(ClusterPerf {
            gpus,
            comm: cluster.comm,
            shared_mem_slope: hi,
        })
    }

    pub fn from_fitted(cluster: &ClusterSpec, fitted: &FittedModels) -> Result<Self> {
        let by_key = fitted
            .profiles
            .iter()
            .map(|p| (p.profile_key.clone(), p.models.cast::<T>()))
            .collect();
        Self::new(cluster, &by_key)
    }

    pub fn collectives(&self, uneven: bool) -> (T, T) {
        collective_latency(&self.comm, uneven)
    }

    /// Conservative aggregate compute memory for total microbatch mass `k`:
    /// every GPU's nonnegative intercept plus the shared slope times `k`.
    pub fn aggregate_compute_bound(&self, k: u32) -> T {
        let floor = self
            .gpus
            .iter()
            .fold(T::zero(), |a, g| a + g.memory.intercept.max(T::zero()));
        floor + self.shared_mem_slope * T::count(k as u64)
    }
}
