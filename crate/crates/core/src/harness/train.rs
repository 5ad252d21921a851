use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::{epoch_order, load_dataset, random_hflip, DataSplits, Dataset};
use super::optim::{clip_grad_norm, cosine_lr, AdamW};
use crate::error::{Error, Result};
use crate::growth::PreservationReport;
use crate::hessian::{export_spectrum, layer_spectrum, median, SplittingSpectrum};
use crate::model::{save_checkpoint, Batch, ForwardPass, Model};
use crate::scheduler::{apply_plan, build_plan_with_budget, should_scale, GrowthPlan, ScheduleConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSummary {
    pub layers: usize,
    pub neurons: usize,
    pub param_delta: usize,
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_top1: f64,
    pub eval_top5: f64,
    pub param_count: usize,
    pub flops_estimate: u64,
    pub growth_event: Option<EventSummary>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchGradNorm {
    pub layer_id: String,
    pub branch: usize,
    pub w_plus: f64,
    pub w_minus: f64,
}

/// Diagnostics of one growth event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventReport {
    pub epoch: usize,
    pub params_before: usize,
    pub params_after: usize,
    pub budget: usize,
    pub plan: GrowthPlan,
    pub actual_param_delta: usize,
    pub preservation: Option<PreservationReport>,
    /// Loss on the first analysis batch right before growth.
    pub loss_before: f64,
    /// Loss on the same batch right after growth.
    pub loss_after: f64,
    /// Gradient norms of the new `W₊`/`W₋` on the first analysis batch.
    pub branch_grad_norms: Vec<BranchGradNorm>,
    /// Median `|λ|` over negative minimum eigenvalues of all analyzed layers.
    pub median_negative_magnitude: Option<f64>,
    pub spectra: Vec<SplittingSpectrum>,
}

/// One line of `plan_log.jsonl`.
#[derive(Serialize)]
struct PlanLogLine<'a> {
    epoch: usize,
    entries: &'a GrowthPlan,
    projected_delta: usize,
    actual_delta: usize,
    cumulative_params: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub samples: usize,
}

pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<MetricsRecord>,
    pub events: Vec<EventReport>,
    /// Optimizer steps taken.
    pub iterations: usize,
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
}

/// Mean loss of `model` on one batch in `f32`, no gradients.
pub fn batch_loss(model: &Model, batch: &Batch) -> Result<f64> {
    let mut pass = ForwardPass::<f32>::eval(model);
    let loss = pass.loss(&batch.images, &batch.labels)?;
    Ok(pass.graph.scalar(loss)? as f64)
}

/// Loss and top-1/top-5 accuracy over a whole dataset, in dataset order.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<EvalResult> {
    let order: Vec<usize> = (0..data.len()).collect();
    let classes = model.config().num_classes;
    let k = classes.min(5);
    let (mut loss, mut top1, mut top5) = (0.0f64, 0usize, 0usize);
    for batch in data.batches(&order, batch_size.max(1)) {
        let mut pass = ForwardPass::<f32>::eval(model);
        let logits = pass.logits(&batch.images)?;
        let l = pass.graph.cross_entropy(logits, &batch.labels)?;
        loss += pass.graph.scalar(l)? as f64 * batch.len() as f64;
        for (row, &label) in pass.graph.value(logits).chunks_exact(classes).zip(&batch.labels) {
            let target = row[label];
            // rank = number of classes scoring strictly higher, ties to the lower index
            let rank = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > target || (v == target && j < label))
                .count();
            top1 += usize::from(rank == 0);
            top5 += usize::from(rank < k);
        }
    }
    let n = data.len().max(1) as f64;
    Ok(EvalResult {
        loss: loss / n,
        top1: top1 as f64 / n,
        top5: top5 as f64 / n,
        samples: data.len(),
    })
}

fn branch_grad_norms(model: &Model, branches: &[(String, usize)], batch: &Batch) -> Result<Vec<BranchGradNorm>> {
    if branches.is_empty() {
        return Ok(Vec::new());
    }
    let names = |(id, k): &(String, usize)| [format!("{id}.branches.{k}.w_plus"), format!("{id}.branches.{k}.w_minus")];
    let mut pass = ForwardPass::<f32>::train(model).only_trainable(branches.iter().flat_map(names));
    let loss = pass.loss(&batch.images, &batch.labels)?;
    pass.graph.backward(loss)?;
    let norm = |name: &str| -> Result<f64> {
        let v = pass.param_var(name).ok_or(Error::NoGraph)?;
        let g = pass.graph.grad(v).ok_or(Error::NoGraph)?;
        Ok(g.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt())
    };
    branches
        .iter()
        .map(|b| {
            let [p, m] = names(b);
            Ok(BranchGradNorm {
                layer_id: b.0.clone(),
                branch: b.1,
                w_plus: norm(&p)?,
                w_minus: norm(&m)?,
            })
        })
        .collect()
}

fn jsonl<T: Serialize>(w: &mut impl Write, path: &Path, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn growth_event(
    model: &mut Model,
    cfg: &RunConfig,
    schedule: &ScheduleConfig,
    epoch: usize,
    batches: &[Batch],
    run_dir: &Path,
) -> Result<EventReport> {
    let opts = &cfg.schedule.spectrum;
    let held = &batches[batches.len().saturating_sub(opts.max_batches)..];
    let probe = held.first().ok_or_else(|| Error::Dataset("no batches for spectrum estimation".into()))?;
    let loss_before = batch_loss(model, probe)?;

    let layer_ids: Vec<String> = model
        .growable_layers()
        .into_iter()
        .filter(|l| cfg.schedule.analyzed_roles.contains(&l.role()))
        .map(|l| l.id().to_string())
        .collect();
    let spectra = layer_ids
        .iter()
        .map(|id| layer_spectrum(model, id, epoch, held, opts))
        .collect::<Result<Vec<_>>>()?;
    if !spectra.is_empty() {
        export_spectrum(&spectra, run_dir.join("spectra"))?;
    }
    let negatives: Vec<f64> = spectra
        .iter()
        .flat_map(|s| s.min_eigvals.iter().filter(|v| **v < 0.0).map(|v| -(*v as f64)))
        .collect();

    let params_before = model.param_count();
    let budget = schedule.event_budget(params_before);
    let plan = build_plan_with_budget(&spectra, schedule, budget)?;
    let probes: Vec<_> = held.iter().map(|b| b.images.clone()).collect();
    let applied = apply_plan(model, &plan, schedule, &probes)?;
    let loss_after = batch_loss(model, probe)?;
    let branch_grad_norms = branch_grad_norms(model, &applied.branches, probe)?;

    let report = EventReport {
        epoch,
        params_before,
        params_after: model.param_count(),
        budget,
        plan,
        actual_param_delta: applied.actual_param_delta,
        preservation: applied.preservation,
        loss_before,
        loss_after,
        branch_grad_norms,
        median_negative_magnitude: median(negatives),
        spectra,
    };
    if report.preservation.is_some_and(|p| !p.is_preserved()) {
        let dump = run_dir.join(format!("growth_failure_epoch{epoch}.json"));
        fs::write(&dump, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::io(&dump, e))?;
        return Err(Error::Growth(format!(
            "function preservation violated at epoch {epoch}: {:?}; diagnostics in {}",
            report.preservation,
            dump.display()
        )));
    }
    Ok(report)
}

/// Loads the configured dataset and trains.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_dataset(&cfg.dataset, cfg.seed, cfg.model.num_classes)?;
    train_with_data(cfg, &data)
}

/// Trains on already-loaded data, growing the model on schedule. Each epoch
/// runs the growth event (if due), then a train pass, then an eval pass.
/// Writes `config.toml`, `metrics.jsonl`, `plan_log.jsonl`, spectra and
/// `final.ckpt` under the run directory.
pub fn train_with_data(cfg: &RunConfig, data: &DataSplits) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let run_dir = cfg.run_dir();
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let cfg_path = run_dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;
    let open = |name: &str| -> Result<(BufWriter<File>, PathBuf)> {
        let p = run_dir.join(name);
        let f = File::create(&p).map_err(|e| Error::io(&p, e))?;
        Ok((BufWriter::new(f), p))
    };
    let (mut metrics_out, metrics_path) = open("metrics.jsonl")?;
    let (mut plan_out, plan_path) = open("plan_log.jsonl")?;

    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let schedule = cfg.schedule.resolve(model.param_count(), cfg.epochs)?;
    let mut opt = AdamW::new(&cfg.optimizer);
    opt.register(&model);
    let peak = cfg.optimizer.peak_lr(cfg.batch_size);
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut events = Vec::new();
    let mut it = 0usize;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(data.train.len(), cfg.seed, epoch);
        let mut batches = data.train.batches(&order, cfg.batch_size);

        let mut summary = None;
        if let Some(s) = schedule.as_ref().filter(|s| should_scale(epoch, s, model.param_count())) {
            let report = growth_event(&mut model, cfg, s, epoch, &batches, &run_dir)?;
            jsonl(
                &mut plan_out,
                &plan_path,
                &PlanLogLine {
                    epoch,
                    entries: &report.plan,
                    projected_delta: report.plan.projected_param_delta,
                    actual_delta: report.actual_param_delta,
                    cumulative_params: report.params_after,
                },
            )?;
            summary = Some(EventSummary {
                layers: report.plan.entries.len(),
                neurons: report.plan.neuron_count(),
                param_delta: report.actual_param_delta,
            });
            opt.register(&model);
            events.push(report);
        }

        let mut flip_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f11b);
        flip_rng.set_stream(epoch as u64);
        let mut loss_sum = 0.0f64;
        for batch in &mut batches {
            if cfg.dataset.hflip {
                random_hflip(batch, &mut flip_rng);
            }
            let mut pass = ForwardPass::<f32>::train(&model);
            let loss = pass.loss(&batch.images, &batch.labels)?;
            let value = pass.graph.scalar(loss)? as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            loss_sum += value * batch.len() as f64;
            pass.graph.backward(loss)?;
            let grads = pass.param_grads();
            drop(pass);
            model.zero_grad();
            model.accumulate_grads(&grads)?;
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut model, c);
            }
            opt.step(&mut model, cosine_lr(&cfg.lr_schedule, peak, it, steps_per_epoch, cfg.epochs));
            it += 1;
        }
        model.zero_grad();

        let eval = evaluate(&model, &data.eval, cfg.batch_size)?;
        let record = MetricsRecord {
            epoch,
            train_loss: loss_sum / data.train.len().max(1) as f64,
            eval_loss: eval.loss,
            eval_top1: eval.top1,
            eval_top5: eval.top5,
            param_count: model.param_count(),
            flops_estimate: model.flop_estimate(),
            growth_event: summary,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        jsonl(&mut metrics_out, &metrics_path, &record)?;
        metrics.push(record);
    }

    let checkpoint = run_dir.join("final.ckpt");
    save_checkpoint(&model, &checkpoint)?;
    Ok(TrainOutcome {
        model,
        metrics,
        events,
        iterations: it,
        run_dir,
        checkpoint,
    })
}
