use hetgrow::hessian::{Curvature, SplittingSpectrum};
use hetgrow::scheduler::{GrowthPlan, ScheduleConfig, Selection};

pub fn cfg(budget: usize, threshold: usize) -> ScheduleConfig {
    ScheduleConfig {
        initial_warmup: 50,
        scaling_interval: 30,
        parameter_budget: budget,
        layer_threshold: threshold,
        target: None,
        scaling_factor: 0.2,
        selection: Selection::MostNegative,
    }
}

pub fn spectrum(id: &str, in_dim: usize, vals: Vec<f32>) -> SplittingSpectrum {
    SplittingSpectrum {
        layer_id: id.into(),
        epoch: 50,
        negative_mass: vals.iter().filter(|v| **v < 0.0).map(|v| -(*v as f64)).sum(),
        min_eigvals: vals,
        batch_count: 4,
        in_dim,
        curvature: Curvature::Splitting,
    }
}

pub fn selected(plan: &GrowthPlan) -> Vec<(String, Vec<usize>)> {
    plan.entries.iter().map(|e| (e.layer_id.clone(), e.indices.clone())).collect()
}

/// Largest neuron set that fits the budget and contains, with every member,
/// all neurons ranked ahead of it, found by enumerating all subsets.
pub fn brute_force(spectra: &[SplittingSpectrum], budget: usize, threshold: usize) -> Vec<(String, Vec<usize>)> {
    let mut pool: Vec<(f32, String, usize, usize)> = Vec::new();
    for s in spectra {
        let elig: Vec<usize> = (0..s.min_eigvals.len()).filter(|&i| s.min_eigvals[i] < -1e-6).collect();
        if elig.len() >= threshold {
            pool.extend(elig.into_iter().map(|i| (s.min_eigvals[i], s.layer_id.clone(), i, 2 * (s.in_dim + 1))));
        }
    }
    let ahead = |a: &(f32, String, usize, usize), b: &(f32, String, usize, usize)| {
        (a.0, &a.1, a.2) < (b.0, &b.1, b.2)
    };
    let n = pool.len();
    let mut best: Option<(usize, u32)> = None;
    for mask in 0u32..(1 << n) {
        let cost: usize = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| pool[i].3).sum();
        if cost > budget {
            continue;
        }
        let closed = (0..n)
            .filter(|&i| mask >> i & 1 == 1)
            .all(|i| (0..n).all(|j| !ahead(&pool[j], &pool[i]) || mask >> j & 1 == 1));
        let size = mask.count_ones() as usize;
        if closed && best.is_none_or(|(s, _)| size > s) {
            best = Some((size, mask));
        }
    }
    let mask = best.map_or(0, |b| b.1);
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    for s in spectra {
        let mut idx: Vec<usize> = (0..n)
            .filter(|&i| mask >> i & 1 == 1 && pool[i].1 == s.layer_id)
            .map(|i| pool[i].2)
            .collect();
        idx.sort_unstable();
        if !idx.is_empty() {
            out.push((s.layer_id.clone(), idx));
        }
    }
    out.sort();
    out
}
