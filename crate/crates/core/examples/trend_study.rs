//! Trains SA and RX variants on a synthetic corpus and prints test DER and
//! per-block probes. Settings come from environment variables:
//!
//! `CONFIGS` (comma list of sa, rx, res, aux), `BLOCKS`, `SEEDS`, `EPOCHS`,
//! `N_TRAIN`, `N_TEST`, `NOISE`, `LR_SCALE`, `WARMUP`, `BATCH`.

use std::env;
use std::time::Instant;

use rxeend::metrics::{aggregate, evaluate, probe_blocks, EvalParams, Recording};
use rxeend::model::{AuxMode, ModelConfig};
use rxeend::simulator::{gen_dialogues, Dialogue, DialogueSpec};
use rxeend::trainer::{train_with, TrainConfig};

fn var<T: std::str::FromStr>(name: &str, default: T) -> T {
    env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn recordings(corpus: &[Dialogue]) -> Vec<Recording<'_>> {
    corpus
        .iter()
        .map(|d| Recording { id: &d.id, features: &d.features.data, labels: &d.labels })
        .collect()
}

fn main() -> rxeend::Result<()> {
    let noise: f64 = var("NOISE", 1.0);
    let spec = DialogueSpec { noise_std: noise, ..DialogueSpec::default() };
    let train_set = gen_dialogues(var("N_TRAIN", 500), &spec)?;
    let test_set = gen_dialogues(var("N_TEST", 100), &spec.with_seed(1_000_007))?;
    let blocks: usize = var("BLOCKS", 4);
    let configs = env::var("CONFIGS").unwrap_or_else(|_| "sa,rx".into());
    let seeds: u64 = var("SEEDS", 1);
    for name in configs.split(',') {
        let base = ModelConfig { blocks, ..ModelConfig::small() };
        let (residual, aux) = match name {
            "sa" => (false, AuxMode::None),
            "rx" => (true, AuxMode::Indiv),
            "res" => (true, AuxMode::None),
            "aux" => (false, AuxMode::Indiv),
            "shared" => (true, AuxMode::Shared),
            other => panic!("unknown config {other}"),
        };
        let model = ModelConfig { residual, aux_mode: aux, ..base };
        for seed in 0..seeds {
            let tc = TrainConfig {
                epochs: var("EPOCHS", 20),
                batch_size: var("BATCH", 8),
                warmup_steps: var("WARMUP", 200),
                lr_scale: var("LR_SCALE", 1.0),
                seed,
                ..TrainConfig::default()
            };
            let start = Instant::now();
            let out = train_with(&model, &tc, &train_set, |e| {
                println!("  {name} P={blocks} seed={seed} {e}");
                Ok(())
            })?;
            let m = &out.best.model;
            let recs = recordings(&test_set);
            let params = EvalParams::default();
            let der = aggregate(&evaluate(m, &recs, &params)?)?.der;
            let probe: Vec<String> = probe_blocks(m, &recs, &params)?
                .iter()
                .map(|r| format!("{:.2}", 100.0 * r.der))
                .collect();
            println!(
                "RESULT {name} P={blocks} seed={seed} best_epoch={} test_der={:.2}% probe=[{}] secs={:.0}",
                out.best.epoch,
                100.0 * der,
                probe.join(" "),
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
