use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rxeend::checkpoint::Checkpoint;
use rxeend::metrics::{
    self, aggregate, evaluate, overlap_ratio, probe_blocks, score_posterior, DerReport, DerTotals,
    EvalParams, Recording, SegmentList,
};
use rxeend::model::{AuxMode, ModelConfig};
use rxeend::simulator::{gen_corpus, load_corpus, Dialogue, DialogueSpec};
use rxeend::trainer::train_with;
use rxeend::{Error, Result};

use crate::config::RunConfig;
use crate::{
    Aux, DecodeArgs, DumpArgs, EvalArgs, GenDataArgs, Preset, ProbeArgs, ScoreArgs, Switch,
    TrainArgs,
};

pub const CONFIG_ECHO: &str = "config.toml";
pub const TRAIN_LOG: &str = "train.log";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ckpt";

/// Overlap-ratio bands for the evaluation breakdown.
pub const OVERLAP_BUCKETS: [(&str, f64, f64); 3] = [
    ("low", 0.0, 0.2345),
    ("mid", 0.2345, 0.3085),
    ("high", 0.3085, f64::INFINITY),
];

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), |p| RunConfig::load(p))
}

fn require(flag: Option<&PathBuf>, file: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or(file)
        .cloned()
        .ok_or_else(|| Error::Config(format!("no {what} given (flag or [paths] entry)")))
}

fn recordings(corpus: &[Dialogue]) -> Vec<Recording<'_>> {
    corpus
        .iter()
        .map(|d| Recording {
            id: &d.id,
            features: &d.features.data,
            labels: &d.labels,
        })
        .collect()
}

fn report_fields(r: &DerReport) -> String {
    format!(
        "DER={:.4} miss={:.4} false_alarm={:.4} confusion={:.4} speech_sec={:.2} collar_sec={:.2}",
        r.der, r.miss, r.false_alarm, r.confusion, r.scored_speech_sec, r.excluded_collar_sec
    )
}

fn totals_fields(t: &DerTotals) -> String {
    match t.report() {
        Ok(r) => report_fields(&r),
        Err(_) => "DER=undefined".to_string(),
    }
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let d = DialogueSpec::default();
    let spec = DialogueSpec {
        num_speakers: a.speakers,
        total_frames: a.frames,
        mean_utt_frames: a.mean_utt.unwrap_or(d.mean_utt_frames),
        mean_pause_frames: a.mean_pause.unwrap_or(d.mean_pause_frames),
        target_overlap: a.overlap,
        seed: a.seed,
        noise_std: a.noise.unwrap_or(d.noise_std),
        speaker_sig_std: a.signature_std.unwrap_or(d.speaker_sig_std),
    };
    spec.validate()?;
    println!("seed={}", spec.seed);
    let manifest = gen_corpus(a.n, &spec, &a.out)?;
    let (lo, hi) = manifest
        .entries
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| {
            (lo.min(e.overlap), hi.max(e.overlap))
        });
    println!("out={}", a.out.display());
    println!("dialogues={}", manifest.entries.len());
    println!("frames={}", spec.total_frames);
    println!("target_overlap={:.4}", spec.target_overlap);
    println!("mean_overlap={:.4}", manifest.mean_overlap());
    println!("min_overlap={lo:.4}");
    println!("max_overlap={hi:.4}");
    Ok(())
}

fn apply_train_flags(cfg: &mut RunConfig, a: &TrainArgs) -> Result<()> {
    if let Some(p) = a.preset {
        let name = match p {
            Preset::Base => "base",
            Preset::Deep => "deep",
            Preset::Large => "large",
            Preset::Small => "small",
        };
        let m = ModelConfig::preset(name)?;
        cfg.model.blocks = m.blocks;
        cfg.model.d_model = m.d_model;
        cfg.model.heads = m.heads;
        cfg.model.ffn_units = m.ffn_units;
    }
    if let Some(r) = a.residual {
        cfg.model.residual = r == Switch::On;
    }
    if let Some(x) = a.aux {
        let mode = match x {
            Aux::None => AuxMode::None,
            Aux::Shared => AuxMode::Shared,
            Aux::Indiv => AuxMode::Indiv,
        };
        cfg.model.aux_mode = mode.to_string();
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.warmup_steps {
        cfg.train.warmup_steps = v;
    }
    if let Some(v) = a.lr_scale {
        cfg.train.lr_scale = v;
    }
    cfg.paths.corpus = Some(require(a.corpus.as_ref(), cfg.paths.corpus.as_ref(), "corpus")?);
    cfg.paths.run_dir = Some(require(a.run_dir.as_ref(), cfg.paths.run_dir.as_ref(), "run directory")?);
    Ok(())
}

fn append_log(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_ref())?;
    apply_train_flags(&mut cfg, a)?;
    let model_cfg = cfg.model.to_config()?;
    let train_cfg = cfg.train.to_config()?;
    cfg.eval.to_params()?;
    let corpus_dir = cfg.paths.corpus.clone().expect("resolved above");
    let run_dir = cfg.paths.run_dir.clone().expect("resolved above");

    println!("seed={}", train_cfg.seed);
    let corpus = load_corpus(&corpus_dir)?;
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let echo = run_dir.join(CONFIG_ECHO);
    rxeend::io::write_text(&echo, &format!("# seed={}\n{}", train_cfg.seed, cfg.to_toml()))?;
    let log = run_dir.join(TRAIN_LOG);
    append_log(
        &log,
        &format!(
            "# seed={} corpus={} dialogues={} columns: epoch total diar aux val_der",
            train_cfg.seed,
            corpus_dir.display(),
            corpus.len()
        ),
    )?;
    println!("run_dir={}", run_dir.display());
    println!("dialogues={}", corpus.len());

    let outcome = train_with(&model_cfg, &train_cfg, &corpus, |e| {
        append_log(&log, &e.to_string())?;
        println!(
            "epoch={} total={:.6} diar={:.6} aux={:.6} val_der={:.6}",
            e.epoch, e.total, e.diar, e.aux, e.val_der
        );
        Ok(())
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(Error::Divergence {
            epoch,
            reason,
            last_good,
        }) => {
            append_log(&log, &format!("# diverged at epoch {epoch}: {reason}"))?;
            if let Some(ck) = &last_good {
                let path = run_dir.join(LAST_GOOD_CHECKPOINT);
                ck.save(&path)?;
                println!("last_good={}", path.display());
            }
            return Err(Error::Divergence {
                epoch,
                reason,
                last_good,
            });
        }
        Err(e) => return Err(e),
    };
    outcome.best.save(&run_dir.join(BEST_CHECKPOINT))?;
    outcome.last.save(&run_dir.join(FINAL_CHECKPOINT))?;
    println!("best_epoch={}", outcome.best.epoch);
    match outcome.best_val_der {
        Some(d) => println!("best_val_der={d:.6}"),
        None => println!("best_val_der=none"),
    }
    Ok(())
}

fn eval_params(cfg: &RunConfig, d: &DecodeArgs) -> Result<EvalParams> {
    let mut e = cfg.eval.clone();
    if let Some(v) = d.threshold {
        e.threshold = v;
    }
    if let Some(v) = d.median {
        e.median_window = v;
    }
    if let Some(v) = d.collar {
        e.collar = v;
    }
    e.to_params()
}

fn print_params(p: &EvalParams) {
    println!(
        "threshold={:.4} median_window={} collar={:.4}",
        p.threshold, p.median_window, p.collar_sec
    );
}

pub fn bucket_of(rho: f64) -> &'static str {
    OVERLAP_BUCKETS
        .iter()
        .find(|(_, lo, hi)| rho >= *lo && rho < *hi)
        .map_or(OVERLAP_BUCKETS[0].0, |b| b.0)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let cfg = load_config(a.config.as_ref())?;
    let params = eval_params(&cfg, &a.decode)?;
    let corpus_dir = require(a.corpus.as_ref(), cfg.paths.corpus.as_ref(), "corpus")?;
    let checkpoint = match a.reference_as_hypothesis {
        true => None,
        false => {
            let path = require(a.checkpoint.as_ref(), cfg.paths.checkpoint.as_ref(), "checkpoint")?;
            Some((Checkpoint::load(&path)?, path))
        }
    };
    let seed = checkpoint.as_ref().map_or(cfg.train.seed, |(c, _)| c.train_config.seed);
    println!("seed={seed}");
    match &checkpoint {
        Some((_, path)) => println!("checkpoint={}", path.display()),
        None => println!("checkpoint=reference"),
    }
    println!("corpus={}", corpus_dir.display());
    print_params(&params);

    let corpus = load_corpus(&corpus_dir)?;
    let recs = recordings(&corpus);
    let totals = match &checkpoint {
        Some((ck, _)) => evaluate(&ck.model, &recs, &params)?,
        None => recs
            .iter()
            .map(|r| score_posterior(&r.labels.to_tensor::<f32>(), r.labels, r.id, &params))
            .collect::<Result<Vec<_>>>()?,
    };

    println!("# per recording");
    let mut buckets = vec![(0usize, DerTotals::default()); OVERLAP_BUCKETS.len()];
    for (r, t) in recs.iter().zip(&totals) {
        let rho = overlap_ratio(r.labels).unwrap_or(0.0);
        let name = bucket_of(rho);
        let b = OVERLAP_BUCKETS.iter().position(|x| x.0 == name).expect("known bucket");
        buckets[b].0 += 1;
        buckets[b].1.add(t);
        println!("recording={} rho={rho:.4} bucket={name} {}", r.id, totals_fields(t));
    }
    println!("# by overlap ratio");
    for ((name, lo, hi), (n, t)) in OVERLAP_BUCKETS.iter().zip(&buckets) {
        let hi = if hi.is_finite() { format!("{hi:.4}") } else { "inf".into() };
        println!("bucket={name} rho_min={lo:.4} rho_max={hi} recordings={n} {}", totals_fields(t));
    }
    println!("# aggregate");
    println!("aggregate recordings={} {}", totals.len(), report_fields(&aggregate(&totals)?));
    Ok(())
}

pub fn probe(a: &ProbeArgs) -> Result<()> {
    let cfg = load_config(a.config.as_ref())?;
    let params = eval_params(&cfg, &a.decode)?;
    let corpus_dir = require(a.corpus.as_ref(), cfg.paths.corpus.as_ref(), "corpus")?;
    let path = require(a.checkpoint.as_ref(), cfg.paths.checkpoint.as_ref(), "checkpoint")?;
    let ck = Checkpoint::load(&path)?;
    println!("seed={}", ck.train_config.seed);
    println!("checkpoint={}", path.display());
    println!("corpus={}", corpus_dir.display());
    print_params(&params);
    let corpus = load_corpus(&corpus_dir)?;
    let reports = probe_blocks(&ck.model, &recordings(&corpus), &params)?;
    for (p, r) in reports.iter().enumerate() {
        println!("block={} {}", p + 1, report_fields(r));
    }
    Ok(())
}

pub fn score(a: &ScoreArgs) -> Result<()> {
    if !(a.collar >= 0.0) {
        return Err(Error::Config(format!("collar must be >= 0, got {}", a.collar)));
    }
    let reference = SegmentList::read(&a.reference)?;
    let hypothesis = SegmentList::read(&a.hyp)?;
    println!("seed=none");
    println!("ref={}", a.reference.display());
    println!("hyp={}", a.hyp.display());
    println!("collar={:.4}", a.collar);
    let r = metrics::der(&reference, &hypothesis, a.collar, metrics::DEFAULT_RESOLUTION_SEC)?;
    println!("{}", report_fields(&r));
    Ok(())
}

pub fn dump_embeddings(a: &DumpArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    let d = corpus
        .iter()
        .find(|d| d.id == a.recording)
        .ok_or_else(|| Error::Config(format!("recording `{}` not in corpus", a.recording)))?;
    let e = metrics::dump_embeddings(&ck.model, &d.features.data, &d.labels, a.block, &a.out)?;
    println!("seed={}", ck.train_config.seed);
    println!("recording={}", d.id);
    println!("block={}", a.block);
    println!("rows={} dim={}", e.rows(), e.cols());
    println!("out={}", a.out.display());
    println!("labels={}", metrics::embedding_labels_path(&a.out).display());
    Ok(())
}
