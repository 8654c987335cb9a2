//! Per-unit parameter sharding from per-GPU state ratios.
//!
//! Every transformer layer is one FSDP unit. Units are processed in layer
//! order; a unit is sharded evenly whenever the remaining per-GPU budgets
//! allow it, otherwise it is filled from the GPUs with the largest remaining
//! budget. Uneven units pay the collective overhead, so the aim is to keep
//! their number low.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;

pub const RATIO_SUM_TOLERANCE: f64 = 1e-9;

/// One unit's contiguous flat-parameter split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitShard {
    pub sizes: Vec<u64>,
    pub offsets: Vec<u64>,
}

impl UnitShard {
    fn from_sizes(sizes: Vec<u64>) -> Self {
        let offsets = sizes
            .iter()
            .scan(0u64, |acc, &s| {
                let o = *acc;
                *acc += s;
                Some(o)
            })
            .collect();
        UnitShard { sizes, offsets }
    }

    /// True when sizes differ by at most one parameter.
    pub fn is_even(&self) -> bool {
        let max = self.sizes.iter().copied().max().unwrap_or(0);
        let min = self.sizes.iter().copied().min().unwrap_or(0);
        max - min <= 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitShardPlan {
    pub units: u32,
    pub params_per_layer: u64,
    pub shards: Vec<UnitShard>,
    pub uneven_units: u32,
}

impl UnitShardPlan {
    pub fn fractions(&self, unit: usize) -> Vec<f64> {
        self.shards[unit]
            .sizes
            .iter()
            .map(|&s| s as f64 / self.params_per_layer as f64)
            .collect()
    }

    pub fn gpu_totals(&self) -> Vec<u64> {
        let n = self.shards.first().map_or(0, |s| s.sizes.len());
        let mut totals = vec![0u64; n];
        for shard in &self.shards {
            for (t, s) in totals.iter_mut().zip(&shard.sizes) {
                *t += s;
            }
        }
        totals
    }
}

pub fn check_ratios(ratios: &[f64]) -> Result<()> {
    let sum: f64 = ratios.iter().sum();
    if ratios.is_empty() || (sum - 1.0).abs() > RATIO_SUM_TOLERANCE {
        return Err(Error::RatioSum(sum));
    }
    if ratios.iter().any(|r| !(0.0..=1.0 + RATIO_SUM_TOLERANCE).contains(r)) {
        return Err(Error::Validation("state ratios must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Integer per-GPU parameter totals by largest remainder.
pub(crate) fn integer_targets(ratios: &[f64], total: u64) -> Vec<u64> {
    let raw: Vec<f64> = ratios.iter().map(|r| r.max(0.0) * total as f64).collect();
    let mut out: Vec<u64> = raw.iter().map(|x| x.floor() as u64).collect();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    let frac = |i: usize| raw[i] - raw[i].floor();
    let assigned: u64 = out.iter().sum();
    if assigned < total {
        order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
        for k in 0..(total - assigned) as usize {
            out[order[k % order.len()]] += 1;
        }
    } else if assigned > total {
        order.sort_by(|&a, &b| frac(a).total_cmp(&frac(b)).then(a.cmp(&b)));
        let mut excess = assigned - total;
        for &i in order.iter().cycle() {
            if excess == 0 {
                break;
            }
            if out[i] > 0 {
                out[i] -= 1;
                excess -= 1;
            }
        }
    }
    out
}

/// GPU indices by remaining budget, largest first, ties by index.
fn by_budget_desc(budget: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..budget.len()).collect();
    order.sort_by(|&a, &b| budget[b].cmp(&budget[a]).then(a.cmp(&b)));
    order
}

pub(crate) fn even_vector(budget: &[u64], params: u64) -> Vec<u64> {
    let n = budget.len() as u64;
    let mut v = vec![params / n; budget.len()];
    for &i in by_budget_desc(budget).iter().take((params % n) as usize) {
        v[i] += 1;
    }
    v
}

pub(crate) fn fill_largest_first(budget: &[u64], params: u64) -> Vec<u64> {
    let mut v = vec![0u64; budget.len()];
    let mut left = params;
    for i in by_budget_desc(budget) {
        let take = budget[i].min(left);
        v[i] = take;
        left -= take;
    }
    v
}

pub fn assign_unit_shards(ratios: &[f64], model: &ModelSpec) -> Result<UnitShardPlan> {
    check_ratios(ratios)?;
    if model.layers == 0 {
        return Err(Error::Validation("model has no layers".into()));
    }
    let params = model.params_per_layer;
    let mut budget = integer_targets(ratios, model.total_params());
    let mut shards = Vec::with_capacity(model.layers as usize);
    let mut uneven_units = 0;
    for _ in 0..model.layers {
        let even = even_vector(&budget, params);
        let sizes = if even.iter().zip(&budget).all(|(e, b)| e <= b) {
            even
        } else {
            fill_largest_first(&budget, params)
        };
        for (b, s) in budget.iter_mut().zip(&sizes) {
            *b -= s;
        }
        let shard = UnitShard::from_sizes(sizes);
        if !shard.is_even() {
            uneven_units += 1;
        }
        shards.push(shard);
    }
    debug_assert!(budget.iter().all(|&b| b == 0));
    Ok(UnitShardPlan {
        units: model.layers,
        params_per_layer: params,
        shards,
        uneven_units,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(layers: u32, params: u64) -> ModelSpec {
        ModelSpec {
            layers,
            params_per_layer: params,
            bytes_per_param_state: 16,
            global_batch: 1,
        }
    }

    #[test]
    fn three_to_one_over_two_units() {
        let plan = assign_unit_shards(&[0.75, 0.25], &model(2, 1000)).unwrap();
        assert_eq!(plan.fractions(0), vec![0.5, 0.5]);
        assert_eq!(plan.fractions(1), vec![1.0, 0.0]);
        assert_eq!(plan.uneven_units, 1);
        assert_eq!(plan.shards[1].offsets, vec![0, 1000]);
    }

    #[test]
    fn equal_ratios_are_all_even() {
        for layers in 1..6 {
            let plan = assign_unit_shards(&[1.0 / 3.0; 3], &model(layers, 1001)).unwrap();
            assert_eq!(plan.uneven_units, 0, "layers={layers}");
        }
    }

    #[test]
    fn single_holder() {
        let plan = assign_unit_shards(&[1.0, 0.0], &model(3, 10)).unwrap();
        assert_eq!(plan.uneven_units, 3);
        assert!(plan.shards.iter().all(|s| s.sizes == vec![10, 0]));
    }

    #[test]
    fn ratio_sum_error() {
        assert!(matches!(
            assign_unit_shards(&[0.5, 0.4], &model(2, 10)),
            Err(Error::RatioSum(_))
        ));
    }

    #[test]
    fn targets_are_exact() {
        let t = integer_targets(&[0.3, 0.3, 0.4], 10);
        assert_eq!(t.iter().sum::<u64>(), 10);
        assert_eq!(t, vec![3, 3, 4]);
    }

    // Exhaustive minimum over {even, concentrate-on-one, exact-remainder} per unit.
    fn exhaustive_min(budget: Vec<u64>, units_left: u32, params: u64) -> Option<u32> {
        if units_left == 0 {
            return budget.iter().all(|&b| b == 0).then_some(0);
        }
        let n = budget.len();
        let mut candidates = vec![even_vector(&budget, params)];
        for g in 0..n {
            let mut v = vec![0; n];
            v[g] = params;
            candidates.push(v);
            let take = budget[g].min(params);
            let mut rest = budget.clone();
            rest[g] = 0;
            let mut v = fill_largest_first(&rest, params - take);
            v[g] = take;
            candidates.push(v);
        }
        let mut best: Option<u32> = None;
        for v in candidates {
            if v.iter().sum::<u64>() != params || v.iter().zip(&budget).any(|(s, b)| s > b) {
                continue;
            }
            let next: Vec<u64> = budget.iter().zip(&v).map(|(b, s)| b - s).collect();
            let uneven = !UnitShard::from_sizes(v).is_even() as u32;
            if let Some(rest) = exhaustive_min(next, units_left - 1, params) {
                best = Some(best.map_or(rest + uneven, |b| b.min(rest + uneven)));
            }
        }
        best
    }

    #[test]
    fn greedy_matches_exhaustive_small() {
        let params = 12;
        let grids: &[&[f64]] = &[
            &[0.75, 0.25],
            &[0.5, 0.5],
            &[0.6, 0.4],
            &[0.9, 0.1],
            &[0.5, 0.25, 0.25],
            &[0.2, 0.3, 0.5],
            &[0.7, 0.2, 0.1],
            &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            &[1.0, 0.0, 0.0],
        ];
        for ratios in grids {
            for layers in 1..=4 {
                let m = model(layers, params);
                let greedy = assign_unit_shards(ratios, &m).unwrap();
                let targets = integer_targets(ratios, m.total_params());
                let best = exhaustive_min(targets, layers, params).unwrap();
                assert_eq!(greedy.uneven_units, best, "ratios={ratios:?} layers={layers}");
            }
        }
    }
}
