use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hetgrow::harness::{evaluate, load_dataset, train, DatasetConfig, RunConfig};
use hetgrow::hessian::{export_spectrum, layer_spectrum, parse_spectrum_csv, LinearCurvature, SpectrumOptions};
use hetgrow::model::{load_checkpoint, Model, ModelConfig, Role};
use hetgrow::scheduler::{build_plan, ScheduleConfig, Selection};

#[derive(Parser)]
#[command(name = "hetgrow", version, about = "Grow vision transformers at their saddle neurons while training")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Override the run or dataset seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root directory for every file written.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Worker threads for parallel curvature analysis.
    #[arg(long, global = true)]
    device_threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train (and grow) a model from a TOML run config.
    Train { config: PathBuf },
    /// Evaluate a checkpoint on a dataset's eval split.
    Eval {
        checkpoint: PathBuf,
        /// synthetic[:SEED], idx:DIR or cifar:DIR
        dataset: String,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
    },
    /// Export per-neuron eigenvalue spectra of a checkpoint.
    Spectra {
        checkpoint: PathBuf,
        dataset: String,
        /// Layer ids or roles (qkv, proj, fc1, fc2).
        #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
        layers: Vec<String>,
        #[arg(long, default_value_t = 4)]
        batches: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        /// Treatment of layers without an elementwise nonlinearity.
        #[arg(long, value_parser = parse_linear, default_value = "block_hessian")]
        linear: LinearCurvature,
        /// Epoch label used in file names.
        #[arg(long, default_value_t = 0)]
        epoch: usize,
        #[arg(long, default_value = "offline")]
        run_id: String,
    },
    /// Print the growth plan for a set of spectrum CSV files.
    Plan {
        /// Only print the plan; nothing is applied.
        #[arg(long, required = true)]
        dry_run: bool,
        #[arg(long, required = true, num_args = 1..)]
        spectra: Vec<PathBuf>,
        /// Checkpoint supplying each layer's fan-in.
        #[arg(long, conflicts_with = "fan_in", required_unless_present = "fan_in")]
        checkpoint: Option<PathBuf>,
        /// Fan-in shared by all layers.
        #[arg(long)]
        fan_in: Option<usize>,
        #[arg(long)]
        budget: usize,
        #[arg(long, default_value_t = 8)]
        threshold: usize,
        #[arg(long, default_value_t = 0.2)]
        scaling_factor: f32,
        #[arg(long, value_parser = parse_selection, default_value = "most_negative")]
        selection: Selection,
    },
    /// Parameter and FLOP table for a config file or preset
    /// (deit-s, deit-s-reduced, desk).
    Count { config: String },
}

fn parse_linear(s: &str) -> Result<LinearCurvature, String> {
    match s {
        "block_hessian" => Ok(LinearCurvature::BlockHessian),
        "strict_zero" => Ok(LinearCurvature::StrictZero),
        _ => Err("expected block_hessian or strict_zero".into()),
    }
}

fn parse_selection(s: &str) -> Result<Selection, String> {
    match s {
        "most_negative" => Ok(Selection::MostNegative),
        "nearest_zero" => Ok(Selection::NearestZero),
        _ => Err("expected most_negative or nearest_zero".into()),
    }
}

fn dataset(spec: &str, seed: Option<u64>) -> Result<DatasetConfig> {
    let mut cfg = DatasetConfig::parse_shorthand(spec)?;
    if cfg.seed.is_none() {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<Model> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_train(global: &Global, path: &Path) -> Result<()> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &global.output_dir {
        cfg.output_dir = dir.clone();
    }
    let out = train(&cfg)?;
    let last = out.metrics.last().context("no epochs were run")?;
    println!("run_dir      {}", out.run_dir.display());
    println!("checkpoint   {}", out.checkpoint.display());
    println!("events       {}", out.events.len());
    println!("params       {}", last.param_count);
    println!("eval_loss    {:.6}", last.eval_loss);
    println!("eval_top1    {:.4}", last.eval_top1);
    println!("eval_top5    {:.4}", last.eval_top5);
    Ok(())
}

fn cmd_eval(global: &Global, ckpt: &Path, spec: &str, batch_size: usize) -> Result<()> {
    let model = load_model(ckpt)?;
    let data = load_dataset(&dataset(spec, global.seed)?, global.seed.unwrap_or(0), model.config().num_classes)?;
    let r = evaluate(&model, &data.eval, batch_size)?;
    println!("samples {}", r.samples);
    println!("loss {:.6}", r.loss);
    println!("top1 {:.4}", r.top1);
    println!("top5 {:.4}", r.top5);
    Ok(())
}

fn resolve_layers(model: &Model, requested: &[String]) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for r in requested {
        if let Ok(role) = r.parse::<Role>() {
            ids.extend(model.growable_layers().into_iter().filter(|l| l.role() == role).map(|l| l.id().to_string()));
        } else if model.layer(r).is_some() {
            ids.push(r.clone());
        } else {
            bail!("unknown layer `{r}`");
        }
    }
    if ids.is_empty() {
        bail!("no growth-eligible layers selected");
    }
    Ok(ids)
}

#[allow(clippy::too_many_arguments)]
fn cmd_spectra(
    global: &Global,
    ckpt: &Path,
    spec: &str,
    layers: &[String],
    batches: usize,
    batch_size: usize,
    linear: LinearCurvature,
    epoch: usize,
    run_id: &str,
) -> Result<()> {
    let model = load_model(ckpt)?;
    let data = load_dataset(&dataset(spec, global.seed)?, global.seed.unwrap_or(0), model.config().num_classes)?;
    let order: Vec<usize> = (0..data.train.len()).collect();
    let held = data.train.batches(&order, batch_size);
    let opts = SpectrumOptions {
        max_batches: batches,
        linear,
    };
    let spectra = resolve_layers(&model, layers)?
        .iter()
        .map(|id| layer_spectrum(&model, id, epoch, &held, &opts))
        .collect::<hetgrow::Result<Vec<_>>>()?;
    let root = global.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let written = export_spectrum(&spectra, root.join(run_id).join("spectra"))?;
    for s in &spectra {
        println!(
            "{}  curvature={}  eligible={}/{}  negative_mass={:.6e}",
            s.layer_id,
            s.curvature.as_str(),
            s.eligible().len(),
            s.out_dim(),
            s.negative_mass
        );
    }
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_plan(
    files: &[PathBuf],
    checkpoint: Option<&Path>,
    fan_in: Option<usize>,
    budget: usize,
    threshold: usize,
    scaling_factor: f32,
    selection: Selection,
) -> Result<()> {
    let mut spectra = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
        spectra.extend(parse_spectrum_csv(&text).with_context(|| format!("parsing {}", f.display()))?);
    }
    let fan_ins: HashMap<String, usize> = match checkpoint {
        Some(p) => load_model(p)?
            .layers()
            .into_iter()
            .map(|l| (l.id().to_string(), l.in_dim()))
            .collect(),
        None => HashMap::new(),
    };
    for s in &mut spectra {
        s.in_dim = match (fan_in, fan_ins.get(&s.layer_id)) {
            (Some(d), _) => d,
            (None, Some(&d)) => d,
            (None, None) => bail!("checkpoint has no layer `{}`", s.layer_id),
        };
    }
    let cfg = ScheduleConfig {
        initial_warmup: 1,
        scaling_interval: 1,
        parameter_budget: budget,
        layer_threshold: threshold,
        target: None,
        scaling_factor,
        selection,
    };
    cfg.validate()?;
    let plan = build_plan(&spectra, &cfg)?;
    println!("{}", serde_json::to_string_pretty(&plan)?);
    if plan.is_empty() {
        eprintln!("empty plan: no layer has {threshold} or more neurons below the saddle threshold");
    }
    Ok(())
}

fn cmd_count(spec: &str) -> Result<()> {
    let rows: Vec<(String, ModelConfig)> = match spec {
        "deit-s" => vec![("deit-s".into(), ModelConfig::deit_small())],
        "deit-s-reduced" => vec![("deit-s /2,/2".into(), ModelConfig::deit_small_reduced())],
        "desk" => vec![("desk".into(), ModelConfig::desk())],
        path => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
            let cfg = match RunConfig::from_toml(&text) {
                Ok(run) => run.model,
                Err(run_err) => toml::from_str::<ModelConfig>(&text)
                    .map_err(|_| run_err)
                    .with_context(|| format!("{path} is neither a run config nor a model config"))?,
            };
            vec![(path.to_string(), cfg)]
        }
    };
    println!("{:<24} {:>8} {:>8} {:>14} {:>10} {:>9}", "config", "fc", "attn", "params", "params(M)", "GFLOPs");
    for (name, cfg) in rows {
        let model = Model::new(cfg.clone(), 0)?;
        let p = model.param_count();
        let f = model.flop_estimate();
        println!(
            "{name:<24} {:>8} {:>8} {p:>14} {:>10.2} {:>9.3}",
            format!("/{}", cfg.fc_reduce),
            format!("/{}", cfg.attn_reduce),
            p as f64 / 1e6,
            f as f64 / 1e9
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.device_threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    let g = &cli.global;
    match cli.command {
        Command::Train { config } => cmd_train(g, &config),
        Command::Eval {
            checkpoint,
            dataset,
            batch_size,
        } => cmd_eval(g, &checkpoint, &dataset, batch_size),
        Command::Spectra {
            checkpoint,
            dataset,
            layers,
            batches,
            batch_size,
            linear,
            epoch,
            run_id,
        } => cmd_spectra(g, &checkpoint, &dataset, &layers, batches, batch_size, linear, epoch, &run_id),
        Command::Plan {
            dry_run: _,
            spectra,
            checkpoint,
            fan_in,
            budget,
            threshold,
            scaling_factor,
            selection,
        } => cmd_plan(&spectra, checkpoint.as_deref(), fan_in, budget, threshold, scaling_factor, selection),
        Command::Count { config } => cmd_count(&config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
