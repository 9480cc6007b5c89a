//! Adam with a warm-up learning-rate schedule over chunked dialogues.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, RngState};
use crate::error::{Error, Result};
use crate::losses::total_loss_on_tape;
use crate::metrics::{aggregate, evaluate, EvalParams, Recording, DEFAULT_COLLAR_SEC};
use crate::model::{Dropout, Model, ModelConfig};
use crate::simulator::Dialogue;
use crate::tensor::{Tape, Tensor};

/// Stream of the RNG that picks the validation split; kept apart from the
/// shuffling/dropout stream so the split does not depend on training order.
const SPLIT_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub chunk_frames: usize,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            chunk_frames: 500,
            batch_size: 8,
            warmup_steps: 25_000,
            lr_scale: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            grad_clip: 5.0,
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.chunk_frames == 0 || self.batch_size == 0 {
            return bad("chunk_frames and batch_size must be positive");
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be >= 1");
        }
        if !(self.lr_scale > 0.0) {
            return bad("lr_scale must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0 && self.grad_clip > 0.0) {
            return bad("adam_eps and grad_clip must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// `k * D^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn noam_lr(step: u64, d_model: usize, warmup: u64, k: f64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Contract("learning-rate step counts from 1".into()));
    }
    if warmup == 0 || d_model == 0 {
        return Err(Error::Contract("warmup and model width must be positive".into()));
    }
    let s = step as f64;
    Ok(k * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

/// First and second moments plus the number of updates taken.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn zeros(params: &[Tensor<f32>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update with global-norm clipping. Returns the pre-clip
/// gradient norm.
pub fn adam_step(
    names: &[String],
    params: &mut [Tensor<f32>],
    grads: &[Vec<f32>],
    state: &mut AdamState,
    lr: f64,
    config: &TrainConfig,
) -> Result<f64> {
    if params.len() != grads.len() || params.len() != state.m.len() || names.len() != params.len() {
        return Err(Error::dim("adam_step", &[params.len()], &[grads.len()]));
    }
    let mut sq = 0.0f64;
    for ((name, p), g) in names.iter().zip(params.iter()).zip(grads) {
        if g.len() != p.numel() {
            return Err(Error::dim("adam_step", p.shape(), &[g.len()]));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
        sq += g.iter().map(|v| (*v as f64).powi(2)).sum::<f64>();
    }
    let norm = sq.sqrt();
    let clip = if norm > config.grad_clip {
        config.grad_clip / norm
    } else {
        1.0
    };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i][j] as f64 * clip;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * g;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * g * g;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + config.adam_eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(norm)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub diar: f64,
    pub aux: f64,
    pub val_der: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:.6} {:.6} {:.6} {:.6}",
            self.epoch, self.total, self.diar, self.aux, self.val_der
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Lowest validation DER; the initial model when no epoch ran.
    pub best: Checkpoint,
    pub best_val_der: Option<f64>,
    pub log: Vec<EpochLog>,
}

/// Seeded split into (train, validation) indices. A single dialogue is used
/// for both; a zero fraction validates on the training set.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    if n < 2 || val_fraction <= 0.0 {
        return (idx.clone(), idx);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    idx.shuffle(&mut rng);
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// `(dialogue, start, end)` windows of at most `chunk` frames; the last
/// window of a dialogue may be shorter.
fn chunks(corpus: &[Dialogue], indices: &[usize], chunk: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for &i in indices {
        let t = corpus[i].frames();
        let mut start = 0;
        while start < t {
            let end = (start + chunk).min(t);
            out.push((i, start, end));
            start = end;
        }
    }
    out
}

fn validation_params() -> EvalParams {
    EvalParams {
        median_window: 1,
        collar_sec: DEFAULT_COLLAR_SEC,
        ..EvalParams::default()
    }
}

/// Corpus DER used for model selection: threshold 0.5, no median filter.
pub fn validation_der(model: &Model<f32>, corpus: &[Dialogue], indices: &[usize]) -> Result<f64> {
    let recs: Vec<Recording> = indices
        .iter()
        .map(|&i| Recording {
            id: &corpus[i].id,
            features: &corpus[i].features.data,
            labels: &corpus[i].labels,
        })
        .collect();
    Ok(aggregate(&evaluate(model, &recs, &validation_params())?)?.der)
}

struct Loop<'a> {
    model: Model<f32>,
    train: &'a TrainConfig,
    adam: AdamState,
    rng: ChaCha8Rng,
}

impl Loop<'_> {
    fn checkpoint(&self, epoch: usize) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train_config: self.train.clone(),
            optimizer: Some(self.adam.clone()),
            rng: RngState {
                seed: self.train.seed,
                word_pos: self.rng.get_word_pos(),
            },
            epoch,
        }
    }

    /// One chunk's forward/backward; returns (total, diar, aux) and adds the
    /// gradients into `acc`.
    fn chunk_step(
        &mut self,
        x: &Tensor<f32>,
        y: &crate::labels::LabelMatrix,
        acc: &mut [Vec<f32>],
    ) -> Result<(f64, f64, f64)> {
        let cfg = self.model.config().clone();
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let mut dropout = Dropout {
            rate: cfg.dropout,
            rng: &mut self.rng,
        };
        let out = self
            .model
            .forward_on_tape(&mut tape, &bound, xv, Some(&mut dropout), false)?;
        let (loss, report) = total_loss_on_tape(&mut tape, y, &out.posteriors, &cfg)?;
        if !report.total.is_finite() {
            return Err(Error::Divergence {
                epoch: 0,
                reason: format!("loss is {}", report.total),
                last_good: None,
            });
        }
        tape.backward(loss)?;
        for (a, v) in acc.iter_mut().zip(bound.vars()) {
            if let Some(g) = tape.grad(*v) {
                for (s, d) in a.iter_mut().zip(g.data()) {
                    *s += *d;
                }
            }
        }
        Ok((report.total, report.diar, report.aux))
    }

    fn epoch(&mut self, corpus: &[Dialogue], windows: &mut [(usize, usize, usize)]) -> Result<(f64, f64, f64)> {
        windows.shuffle(&mut self.rng);
        let mut sums = (0.0, 0.0, 0.0);
        let d_model = self.model.config().d_model;
        for batch in windows.chunks(self.train.batch_size) {
            let mut acc: Vec<Vec<f32>> =
                self.model.params().iter().map(|p| vec![0.0; p.numel()]).collect();
            for &(i, start, end) in batch {
                let d = &corpus[i];
                let x = d.features.data.slice_rows(start, end);
                let y = d.labels.slice_frames(start, end);
                let (t, di, au) = self.chunk_step(&x, &y, &mut acc)?;
                sums.0 += t;
                sums.1 += di;
                sums.2 += au;
            }
            let scale = 1.0 / batch.len() as f32;
            for a in &mut acc {
                a.iter_mut().for_each(|v| *v *= scale);
            }
            let lr = noam_lr(
                self.adam.step + 1,
                d_model,
                self.train.warmup_steps,
                self.train.lr_scale,
            )?;
            let names = self.model.names().to_vec();
            adam_step(&names, self.model.params_mut(), &acc, &mut self.adam, lr, self.train)?;
        }
        let n = windows.len().max(1) as f64;
        Ok((sums.0 / n, sums.1 / n, sums.2 / n))
    }
}

fn run(
    model: Model<f32>,
    train: &TrainConfig,
    corpus: &[Dialogue],
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    train.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let (train_idx, val_idx) = split_indices(corpus.len(), train.val_fraction, train.seed);
    let mut windows = chunks(corpus, &train_idx, train.chunk_frames);
    let mut state = Loop {
        adam: AdamState::zeros(model.params()),
        model,
        train,
        rng: ChaCha8Rng::seed_from_u64(train.seed),
    };
    let initial = state.checkpoint(0);
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut log = Vec::with_capacity(train.epochs);
    for epoch in 1..=train.epochs {
        let last_good = || Some(Box::new(best.as_ref().map_or(&initial, |b| &b.1).clone()));
        let (total, diar, aux) = match state.epoch(corpus, &mut windows) {
            Ok(v) => v,
            Err(Error::Divergence { reason, .. }) => {
                return Err(Error::Divergence {
                    epoch,
                    reason,
                    last_good: last_good(),
                })
            }
            Err(e @ Error::NonFiniteGradient(_)) => {
                return Err(Error::Divergence {
                    epoch,
                    reason: e.to_string(),
                    last_good: last_good(),
                })
            }
            Err(e) => return Err(e),
        };
        let val_der = validation_der(&state.model, corpus, &val_idx)?;
        let entry = EpochLog {
            epoch,
            total,
            diar,
            aux,
            val_der,
        };
        on_epoch(&entry)?;
        log.push(entry);
        if best.as_ref().is_none_or(|(b, _)| val_der < *b) {
            best = Some((val_der, state.checkpoint(epoch)));
        }
    }
    let last = state.checkpoint(train.epochs);
    let (best_val_der, best) = match best {
        Some((d, c)) => (Some(d), c),
        None => (None, initial),
    };
    Ok(TrainOutcome {
        last,
        best,
        best_val_der,
        log,
    })
}

/// Trains a freshly initialized model (parameter seed = `train.seed`).
pub fn train(model: &ModelConfig, train: &TrainConfig, corpus: &[Dialogue]) -> Result<TrainOutcome> {
    train_with(model, train, corpus, |_| Ok(()))
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    model: &ModelConfig,
    train: &TrainConfig,
    corpus: &[Dialogue],
    on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    run(Model::new(model.clone(), train.seed)?, train, corpus, on_epoch)
}

/// Continues training from `checkpoint`'s parameters with a fresh optimizer.
pub fn finetune(
    checkpoint: &Checkpoint,
    expected: &ModelConfig,
    corpus: &[Dialogue],
    train: &TrainConfig,
) -> Result<TrainOutcome> {
    finetune_with(checkpoint, expected, corpus, train, |_| Ok(()))
}

pub fn finetune_with(
    checkpoint: &Checkpoint,
    expected: &ModelConfig,
    corpus: &[Dialogue],
    train: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    if checkpoint.model_config() != expected {
        return Err(Error::Config(format!(
            "checkpoint model config {:?} does not match {:?}",
            checkpoint.model_config(),
            expected
        )));
    }
    run(checkpoint.model.clone(), train, corpus, on_epoch)
}
