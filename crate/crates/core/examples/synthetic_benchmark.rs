//! Full pipeline vs target-only baseline and ablations on the synthetic suite.
//!
//! `cargo run --release --example synthetic_benchmark [seeds] [pretrain_steps]`
//!
//! Environment: `BENCH_CACHE` (backbone file to load or save), `WARM_CACHE`
//! (directory of warmed source prefixes), `VARIANTS` (comma list out of
//! full, baseline, no-warmup, no-options), and budget overrides
//! `WARMUP_STEPS`, `WARMUP_LR`, `TARGET_WARMUP_STEPS`, `TARGET_WARMUP_LR`,
//! `TRANSFER_STEPS`, `TRANSFER_LR`.

use std::path::Path;
use std::time::Instant;

use cpner::backbone::BackboneModel;
use cpner::bench::{BenchConfig, Benchmark};
use cpner::pipeline::{Ablation, PipelineConfig, SourceInput};
use cpner::prefixstore::{load_prefix, save_prefix};

fn env<T: std::str::FromStr>(key: &str) -> Option<T> {
    std::env::var(key).ok().and_then(|v| v.parse().ok())
}

fn warmed(bench: &Benchmark, cfg: &PipelineConfig, cache: Option<&Path>) -> Result<Vec<SourceInput>, Box<dyn std::error::Error>> {
    let Some(dir) = cache else { return Ok(bench.warmed_sources(cfg)?) };
    std::fs::create_dir_all(dir)?;
    let mut sources = bench.sources()?;
    for s in &mut sources {
        let path = dir.join(format!("{}-{}.cpnp", s.domain.name, cfg.with_options()));
        s.prefix = Some(if path.exists() {
            load_prefix(&path)?
        } else {
            let w = cpner::pipeline::warm_source(&bench.model, &bench.vocab, s, cfg)?;
            save_prefix(&w, &path)?;
            w
        });
    }
    Ok(sources)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).map_or(Ok(5), |s| s.parse())?;
    let mut bcfg = BenchConfig::default();
    if let Some(s) = args.get(2) {
        bcfg.pretrain.steps = s.parse()?;
    }
    let t = Instant::now();
    let cache: Option<String> = env("BENCH_CACHE");
    let bench = match cache.as_deref().map(Path::new) {
        Some(c) if c.exists() => Benchmark::with_model(bcfg, BackboneModel::load(c)?)?,
        other => {
            let b = Benchmark::build(bcfg)?;
            if let Some(c) = other {
                b.model.save(c)?;
            }
            let l = &b.pretrain_losses;
            let mean = |s: &[f32]| s.iter().sum::<f32>() / s.len().max(1) as f32;
            println!(
                "pretrained {} steps in {:.0?}: loss {:.3} -> {:.3}",
                l.len(),
                t.elapsed(),
                mean(&l[..20.min(l.len())]),
                mean(&l[l.len().saturating_sub(50)..])
            );
            b
        }
    };
    println!("vocabulary {}, backbone {}", bench.vocab.len(), &bench.model.content_hash()[..16]);

    let mut base = PipelineConfig::default();
    if let Some(n) = env("WARMUP_STEPS") {
        base.source_warmup.steps = n;
    }
    if let Some(x) = env("WARMUP_LR") {
        base.source_warmup.learning_rate = x;
    }
    if let Some(n) = env("TARGET_WARMUP_STEPS") {
        base.target_warmup.steps = n;
    }
    if let Some(x) = env("TARGET_WARMUP_LR") {
        base.target_warmup.learning_rate = x;
    }
    if let Some(n) = env("TRANSFER_STEPS") {
        base.transfer.steps = n;
    }
    if let Some(x) = env("TRANSFER_LR") {
        base.transfer.learning_rate = x;
    }
    let warm_cache: Option<String> = env("WARM_CACHE");
    let wanted: String = env("VARIANTS").unwrap_or_else(|| "full,baseline,no-warmup,no-options".into());

    let variants = [
        ("full", Ablation::default()),
        ("baseline", Ablation { no_sources: true, ..Ablation::default() }),
        ("no-warmup", Ablation { no_warmup: true, ..Ablation::default() }),
        ("no-options", Ablation { no_options: true, ..Ablation::default() }),
    ];
    for (name, ablation) in variants {
        if !wanted.split(',').any(|w| w.trim() == name) {
            continue;
        }
        let cfg = PipelineConfig { ablation, ..base.clone() };
        let t = Instant::now();
        let sources = if cfg.ablation.no_sources || cfg.ablation.no_warmup { bench.sources()? } else { warmed(&bench, &cfg, warm_cache.as_deref().map(Path::new))? };
        let runs = bench.run_seeds(&sources, &cfg, 0..seeds)?;
        if let Some(r) = runs[0].report.as_ref() {
            let w: Vec<String> = r.sources.iter().map(|s| format!("{:.3}/{:.3}->{:.3}", s.entity_sim, s.prefix_sim, s.weight)).collect();
            println!("  weights {}", w.join(" "));
        }
        for (seed, r) in runs.iter().enumerate() {
            let m = &r.metrics;
            println!(
                "  {name} seed {seed}: test span F1 {:.4} mention F1 {:.4} dev {:.4} step {}",
                m.test.span.f1, m.test.mention.f1, m.dev_f1, m.selected_step
            );
        }
        let mean = runs.iter().map(|r| r.metrics.test.span.f1).sum::<f64>() / runs.len() as f64;
        println!("{name}: mean span F1 {mean:.4} ({:.0?})", t.elapsed());
    }
    Ok(())
}
