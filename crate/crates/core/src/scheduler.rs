//! When to grow, which neurons to grow, and how many.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::growth::{branch_param_cost, verify_function_preservation, GrowthBranch, GrowthEvent, PreservationReport};
use crate::hessian::{SplittingSpectrum, SADDLE_THRESHOLD};
use crate::model::Model;
use crate::tensor::Tensor;

/// Order in which eligible neurons are pooled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Largest-magnitude negative eigenvalues first.
    #[default]
    MostNegative,
    /// Negative eigenvalues closest to zero first.
    NearestZero,
}

/// Total-parameter ceiling: growth stops once the count reaches
/// `params − tolerance`, and never pushes it past `params + tolerance`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamTarget {
    pub params: usize,
    pub tolerance: usize,
}

impl ParamTarget {
    pub fn contains(&self, count: usize) -> bool {
        count + self.tolerance >= self.params && count <= self.params + self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub initial_warmup: usize,
    pub scaling_interval: usize,
    /// Parameters a single event may add.
    pub parameter_budget: usize,
    /// Minimum eligible-neuron count for a layer to take part in an event.
    pub layer_threshold: usize,
    pub target: Option<ParamTarget>,
    pub scaling_factor: f32,
    pub selection: Selection,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.initial_warmup == 0 || self.scaling_interval == 0 || self.parameter_budget == 0 || self.layer_threshold == 0 {
            return Err(Error::Config(
                "initial_warmup, scaling_interval, parameter_budget and layer_threshold must be positive".into(),
            ));
        }
        if !(self.scaling_factor > 0.0 && self.scaling_factor.is_finite()) {
            return Err(Error::Config(format!("scaling factor must be positive, got {}", self.scaling_factor)));
        }
        Ok(())
    }

    /// Budget for an event at `current_params`, capped so the target ceiling
    /// is never exceeded.
    pub fn event_budget(&self, current_params: usize) -> usize {
        match self.target {
            Some(t) => self.parameter_budget.min((t.params + t.tolerance).saturating_sub(current_params)),
            None => self.parameter_budget,
        }
    }
}

/// Whether a growth event takes place at the start of `epoch`.
pub fn should_scale(epoch: usize, cfg: &ScheduleConfig, current_params: usize) -> bool {
    let on_grid = epoch >= cfg.initial_warmup && (epoch - cfg.initial_warmup) % cfg.scaling_interval == 0;
    let below_target = cfg
        .target
        .is_none_or(|t| current_params + t.tolerance < t.params);
    on_grid && below_target
}

/// Epochs in `[0, total_epochs)` on the warmup/interval grid.
pub fn event_epochs(initial_warmup: usize, scaling_interval: usize, total_epochs: usize) -> Vec<usize> {
    if scaling_interval == 0 {
        return Vec::new();
    }
    (initial_warmup..total_epochs).step_by(scaling_interval).collect()
}

/// Per-event budget that spreads `target − base` evenly over the scheduled
/// events.
pub fn default_parameter_budget(base_params: usize, target_params: usize, events: usize) -> usize {
    target_params.saturating_sub(base_params) / events.max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub layer_id: String,
    /// Ascending neuron indices.
    pub indices: Vec<usize>,
    /// Minimum eigenvalue of each selected neuron, aligned with `indices`.
    pub eigvals: Vec<f32>,
    pub in_dim: usize,
}

impl PlanEntry {
    pub fn param_cost(&self) -> usize {
        branch_param_cost(self.indices.len(), self.in_dim)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthPlan {
    pub event_epoch: usize,
    /// Sorted by layer id.
    pub entries: Vec<PlanEntry>,
    pub projected_param_delta: usize,
}

impl GrowthPlan {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn neuron_count(&self) -> usize {
        self.entries.iter().map(|e| e.indices.len()).sum()
    }
}

struct Candidate<'a> {
    layer: &'a SplittingSpectrum,
    index: usize,
    value: f32,
}

fn candidate_order(selection: Selection, a: &Candidate<'_>, b: &Candidate<'_>) -> Ordering {
    let primary = match selection {
        Selection::MostNegative => a.value.total_cmp(&b.value),
        Selection::NearestZero => b.value.total_cmp(&a.value),
    };
    primary
        .then_with(|| a.layer.layer_id.cmp(&b.layer.layer_id))
        .then(a.index.cmp(&b.index))
}

/// Plan under `cfg.parameter_budget`.
pub fn build_plan(spectra: &[SplittingSpectrum], cfg: &ScheduleConfig) -> Result<GrowthPlan> {
    build_plan_with_budget(spectra, cfg, cfg.parameter_budget)
}

/// Selects neurons from same-epoch spectra.
///
/// Layers with fewer than `layer_threshold` eligible neurons are dropped. The
/// remaining eligible neurons are pooled across layers, ordered by
/// eigenvalue (ties by layer id, then index) and taken in that order until
/// the next one would exceed `budget`.
pub fn build_plan_with_budget(spectra: &[SplittingSpectrum], cfg: &ScheduleConfig, budget: usize) -> Result<GrowthPlan> {
    let event_epoch = match spectra.first() {
        Some(s) => s.epoch,
        None => {
            return Ok(GrowthPlan {
                event_epoch: 0,
                entries: Vec::new(),
                projected_param_delta: 0,
            })
        }
    };
    let mut seen = HashSet::new();
    for s in spectra {
        if s.epoch != event_epoch {
            return Err(Error::Plan(format!(
                "spectra from epochs {event_epoch} and {} cannot be mixed",
                s.epoch
            )));
        }
        if !seen.insert(s.layer_id.as_str()) {
            return Err(Error::Plan(format!("layer {} appears twice", s.layer_id)));
        }
        if s.in_dim == 0 {
            return Err(Error::Plan(format!("layer {} has no fan-in recorded", s.layer_id)));
        }
    }

    let mut pool: Vec<Candidate<'_>> = spectra
        .iter()
        .map(|s| (s, s.eligible()))
        .filter(|(_, eligible)| eligible.len() >= cfg.layer_threshold)
        .flat_map(|(s, eligible)| {
            eligible.into_iter().map(move |index| Candidate {
                layer: s,
                index,
                value: s.min_eigvals[index],
            })
        })
        .collect();
    pool.sort_by(|a, b| candidate_order(cfg.selection, a, b));

    let mut delta = 0usize;
    let mut picked: BTreeMap<&str, (Vec<(usize, f32)>, usize)> = BTreeMap::new();
    for c in pool {
        let cost = branch_param_cost(1, c.layer.in_dim);
        if delta + cost > budget {
            break;
        }
        delta += cost;
        picked
            .entry(&c.layer.layer_id)
            .or_insert_with(|| (Vec::new(), c.layer.in_dim))
            .0
            .push((c.index, c.value));
    }
    let entries = picked
        .into_iter()
        .map(|(layer_id, (mut sel, in_dim))| {
            sel.sort_by_key(|p| p.0);
            PlanEntry {
                layer_id: layer_id.to_string(),
                indices: sel.iter().map(|p| p.0).collect(),
                eigvals: sel.iter().map(|p| p.1).collect(),
                in_dim,
            }
        })
        .collect();
    Ok(GrowthPlan {
        event_epoch,
        entries,
        projected_param_delta: delta,
    })
}

/// Result of executing a plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppliedPlan {
    pub events: Vec<GrowthEvent>,
    pub actual_param_delta: usize,
    /// `(layer_id, branch index)` of every branch added.
    pub branches: Vec<(String, usize)>,
    pub preservation: Option<PreservationReport>,
}

/// Grows every plan entry with `cfg.scaling_factor`. All entries are checked
/// before the model is touched, so a rejected plan leaves it unchanged.
/// Function preservation is measured on `probes` when any are given.
pub fn apply_plan(model: &mut Model, plan: &GrowthPlan, cfg: &ScheduleConfig, probes: &[Tensor]) -> Result<AppliedPlan> {
    let mut layers = HashSet::new();
    for e in &plan.entries {
        if !layers.insert(e.layer_id.as_str()) {
            return Err(Error::Plan(format!("layer {} appears twice", e.layer_id)));
        }
        let layer = model.layer(&e.layer_id).ok_or_else(|| Error::UnknownLayer(e.layer_id.clone()))?;
        if !layer.role().is_growth_eligible() {
            return Err(Error::Plan(format!("{} is not growth-eligible", e.layer_id)));
        }
        if layer.in_dim() != e.in_dim {
            return Err(Error::Plan(format!(
                "{} has fan-in {}, plan assumed {}",
                e.layer_id,
                layer.in_dim(),
                e.in_dim
            )));
        }
        if e.eigvals.len() != e.indices.len() || e.eigvals.iter().any(|v| (*v as f64) >= SADDLE_THRESHOLD) {
            return Err(Error::Plan(format!("{} includes a neuron without a saddle signal", e.layer_id)));
        }
        GrowthBranch::initialize(layer, &e.indices, cfg.scaling_factor, plan.event_epoch)?;
    }
    let projected: usize = plan.entries.iter().map(PlanEntry::param_cost).sum();
    if projected != plan.projected_param_delta {
        return Err(Error::Plan(format!(
            "entries cost {projected} but the plan projects {}",
            plan.projected_param_delta
        )));
    }

    let before = model.param_count();
    let mut events = Vec::with_capacity(plan.entries.len());
    let mut branches = Vec::with_capacity(plan.entries.len());
    for e in &plan.entries {
        events.push(model.grow(&e.layer_id, &e.indices, cfg.scaling_factor, plan.event_epoch)?);
        let k = model.layer(&e.layer_id).expect("validated above").branches.len() - 1;
        branches.push((e.layer_id.clone(), k));
    }
    let actual = model.param_count() - before;
    debug_assert_eq!(actual, projected);
    let preservation = if probes.is_empty() || branches.is_empty() {
        None
    } else {
        Some(verify_function_preservation(model, &branches, probes)?)
    };
    Ok(AppliedPlan {
        events,
        actual_param_delta: actual,
        branches,
        preservation,
    })
}

/// One event of an accounting-only schedule replay.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayEvent {
    pub epoch: usize,
    pub budget: usize,
    pub delta: usize,
    pub total: usize,
}

/// Runs the schedule's parameter arithmetic without a model: every event
/// fills its budget with neurons of fan-in `in_dim`, assuming enough
/// eligible neurons exist.
pub fn replay_accounting(base_params: usize, cfg: &ScheduleConfig, total_epochs: usize, in_dim: usize) -> Vec<ReplayEvent> {
    let cost = branch_param_cost(1, in_dim);
    let mut total = base_params;
    let mut out = Vec::new();
    for epoch in 0..total_epochs {
        if !should_scale(epoch, cfg, total) {
            continue;
        }
        let budget = cfg.event_budget(total);
        let delta = budget / cost * cost;
        total += delta;
        out.push(ReplayEvent {
            epoch,
            budget,
            delta,
            total,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hessian::Curvature;

    fn cfg() -> ScheduleConfig {
        ScheduleConfig {
            initial_warmup: 50,
            scaling_interval: 30,
            parameter_budget: 300,
            layer_threshold: 1,
            target: None,
            scaling_factor: 0.2,
            selection: Selection::MostNegative,
        }
    }

    fn spectrum(id: &str, vals: &[f32], in_dim: usize) -> SplittingSpectrum {
        SplittingSpectrum {
            layer_id: id.into(),
            epoch: 5,
            min_eigvals: vals.to_vec(),
            negative_mass: 0.0,
            batch_count: 1,
            in_dim,
            curvature: Curvature::Splitting,
        }
    }

    #[test]
    fn warmup_boundary() {
        assert!(should_scale(50, &cfg(), 0));
        assert!(!should_scale(49, &cfg(), 0));
        assert!(!should_scale(51, &cfg(), 0));
    }

    #[test]
    fn target_stops_scaling() {
        let c = ScheduleConfig {
            target: Some(ParamTarget {
                params: 1000,
                tolerance: 100,
            }),
            ..cfg()
        };
        assert!(should_scale(80, &c, 899));
        assert!(!should_scale(80, &c, 900));
        assert_eq!(c.event_budget(1050), 50);
    }

    #[test]
    fn greedy_takes_most_negative_prefix() {
        let s = [spectrum("a", &[-5.0, -3.0, -1.0], 64)];
        let plan = build_plan(&s, &cfg()).unwrap();
        assert_eq!(plan.entries[0].indices, vec![0, 1]);
        assert_eq!(plan.projected_param_delta, 260);
    }

    #[test]
    fn nearest_zero_switch() {
        let s = [spectrum("a", &[-5.0, -3.0, -1.0], 64)];
        let c = ScheduleConfig {
            selection: Selection::NearestZero,
            ..cfg()
        };
        assert_eq!(build_plan(&s, &c).unwrap().entries[0].indices, vec![1, 2]);
    }

    #[test]
    fn mixed_epochs_rejected() {
        let mut b = spectrum("b", &[-1.0], 4);
        b.epoch = 6;
        assert!(build_plan(&[spectrum("a", &[-1.0], 4), b], &cfg()).is_err());
    }

    #[test]
    fn empty_spectra_give_empty_plan() {
        assert!(build_plan(&[], &cfg()).unwrap().is_empty());
        assert!(build_plan(&[spectrum("a", &[0.0, 1.0], 4)], &cfg()).unwrap().is_empty());
    }

    #[test]
    fn event_grid() {
        assert_eq!(event_epochs(20, 10, 60), vec![20, 30, 40, 50]);
        assert_eq!(default_parameter_budget(100, 500, 4), 100);
    }
}
