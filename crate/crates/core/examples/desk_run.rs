//! Trains the desk-scale configuration once and prints per-epoch metrics.
//!
//! `cargo run --release --example desk_run -- [SEED] [OUTPUT_DIR] [--baseline]`

use hetgrow::harness::{train, RunConfig};

fn main() -> hetgrow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed = args.first().and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut cfg = RunConfig::desk(seed);
    if let Some(dir) = args.get(1).filter(|a| !a.starts_with("--")) {
        cfg.output_dir = dir.into();
    }
    if args.iter().any(|a| a == "--baseline") {
        cfg.schedule.enabled = false;
        cfg.run_id = format!("{}-baseline", cfg.run_id);
    }
    let out = train(&cfg)?;
    for m in &out.metrics {
        println!(
            "epoch {:>3}  loss {:.4}  eval {:.4}  top1 {:.3}  params {:>7}  {:.1}s{}",
            m.epoch,
            m.train_loss,
            m.eval_loss,
            m.eval_top1,
            m.param_count,
            m.wall_time_s,
            m.growth_event.map_or(String::new(), |e| format!("  +{} neurons", e.neurons))
        );
    }
    for e in &out.events {
        println!(
            "event {}: budget {} delta {} |Δloss| {:.2e} median|λ-| {:?}",
            e.epoch,
            e.budget,
            e.actual_param_delta,
            (e.loss_after - e.loss_before).abs(),
            e.median_negative_magnitude
        );
    }
    Ok(())
}
