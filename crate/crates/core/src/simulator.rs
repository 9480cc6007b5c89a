//! Synthetic two-speaker dialogues at the feature level.
//!
//! Each speaker alternates pauses and utterances with geometric durations.
//! The pause mean is tuned by bisection until the dialogue's overlap ratio
//! lands near the target. Features superpose a per-dialogue Gaussian
//! signature for every active speaker on top of Gaussian noise.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, FEATURE_DIM};
use crate::io;
use crate::labels::LabelMatrix;
use crate::losses::MAX_EXHAUSTIVE_SPEAKERS;
use crate::metrics::overlap_ratio;
use crate::tensor::Tensor;

/// Accepted distance between measured and target overlap ratio.
pub const OVERLAP_TOLERANCE: f64 = 0.05;
/// Targets at or above this ratio are rejected as unattainable.
pub const MAX_TARGET_OVERLAP: f64 = 0.95;
const BISECTION_STEPS: usize = 60;
const TUNING_ATTEMPTS: u64 = 64;
const PAUSE_RANGE: (f64, f64) = (1e-4, 1e5);
const FEATURE_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct DialogueSpec {
    pub num_speakers: usize,
    pub total_frames: usize,
    pub mean_utt_frames: f64,
    /// Starting point for the pause-mean search.
    pub mean_pause_frames: f64,
    pub target_overlap: f64,
    pub seed: u64,
    pub noise_std: f64,
    pub speaker_sig_std: f64,
}

impl Default for DialogueSpec {
    fn default() -> Self {
        Self {
            num_speakers: 2,
            total_frames: 200,
            mean_utt_frames: 20.0,
            mean_pause_frames: 10.0,
            target_overlap: 0.34,
            seed: 7,
            noise_std: 1.0,
            speaker_sig_std: 1.0,
        }
    }
}

impl DialogueSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(2..=MAX_EXHAUSTIVE_SPEAKERS).contains(&self.num_speakers) {
            return bad(format!(
                "num_speakers must be in 2..={MAX_EXHAUSTIVE_SPEAKERS}, got {}",
                self.num_speakers
            ));
        }
        if self.total_frames < 50 {
            return bad(format!("total_frames must be >= 50, got {}", self.total_frames));
        }
        if !(self.target_overlap >= 0.0 && self.target_overlap < 1.0) {
            return bad(format!("target_overlap must be in [0, 1), got {}", self.target_overlap));
        }
        if !(self.mean_utt_frames > 0.0 && self.mean_pause_frames > 0.0) {
            return bad("mean durations must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.speaker_sig_std >= 0.0) {
            return bad("standard deviations must be non-negative".into());
        }
        Ok(())
    }

    /// The spec with another seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    /// `key = value` lines; floats use round-trip formatting.
    pub fn to_text(&self) -> String {
        format!(
            "num_speakers = {}\ntotal_frames = {}\nmean_utt_frames = {:?}\nmean_pause_frames = {:?}\n\
             target_overlap = {:?}\nseed = {}\nnoise_std = {:?}\nspeaker_sig_std = {:?}\n",
            self.num_speakers,
            self.total_frames,
            self.mean_utt_frames,
            self.mean_pause_frames,
            self.target_overlap,
            self.seed,
            self.noise_std,
            self.speaker_sig_std
        )
    }

    pub fn from_text(source: &str, text: &str) -> Result<Self> {
        let mut spec = Self::default();
        let mut seen = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: source.to_string(),
                line: i + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err("expected `key = value`".into()))?;
            let num = |v: &str| v.parse::<f64>().map_err(|_| err(format!("bad number {v:?}")));
            let int = |v: &str| v.parse::<u64>().map_err(|_| err(format!("bad integer {v:?}")));
            match key {
                "num_speakers" => spec.num_speakers = int(value)? as usize,
                "total_frames" => spec.total_frames = int(value)? as usize,
                "mean_utt_frames" => spec.mean_utt_frames = num(value)?,
                "mean_pause_frames" => spec.mean_pause_frames = num(value)?,
                "target_overlap" => spec.target_overlap = num(value)?,
                "seed" => spec.seed = int(value)?,
                "noise_std" => spec.noise_std = num(value)?,
                "speaker_sig_std" => spec.speaker_sig_std = num(value)?,
                _ => return Err(err(format!("unknown key {key:?}"))),
            }
            if seen.insert(key.to_string(), ()).is_some() {
                return Err(err(format!("duplicate key {key:?}")));
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Geometric duration on `{1, 2, ...}` with the given mean, by inverse CDF.
fn speech_duration(u: f64, mean: f64) -> usize {
    if mean <= 1.0 {
        return 1;
    }
    let q = 1.0 - 1.0 / mean;
    ((1.0 - u).ln() / q.ln()).ceil().max(1.0) as usize
}

/// Geometric duration on `{0, 1, ...}` with the given mean, by inverse CDF.
fn pause_duration(u: f64, mean: f64) -> usize {
    let q = mean / (1.0 + mean);
    ((1.0 - u).ln() / q.ln()).floor().max(0.0) as usize
}

fn duration_rng(seed: u64, attempt: u64, speaker: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((attempt << 8) | speaker as u64);
    rng
}

fn labels_for(spec: &DialogueSpec, pause_mean: f64, attempt: u64) -> LabelMatrix {
    let (t_total, s_count) = (spec.total_frames, spec.num_speakers);
    let mut y = LabelMatrix::zeros(t_total, s_count);
    for s in 0..s_count {
        // The k-th duration always consumes the k-th uniform, so labels move
        // monotonically with the pause mean.
        let mut rng = duration_rng(spec.seed, attempt, s);
        let mut t = 0;
        while t < t_total {
            t += pause_duration(rng.random::<f64>(), pause_mean);
            let len = speech_duration(rng.random::<f64>(), spec.mean_utt_frames);
            for f in t..(t + len).min(t_total) {
                y.set(f, s, true);
            }
            t += len;
        }
    }
    y
}

/// Labels for a fixed pause mean, without overlap tuning.
pub fn gen_labels_with_pause(spec: &DialogueSpec, pause_mean: f64) -> Result<LabelMatrix> {
    spec.validate()?;
    if !(pause_mean > 0.0) {
        return Err(Error::Config(format!("pause mean must be positive, got {pause_mean}")));
    }
    Ok(labels_for(spec, pause_mean, 0))
}

fn measured(y: &LabelMatrix) -> Option<f64> {
    overlap_ratio(y).ok()
}

/// Labels whose overlap ratio is within [`OVERLAP_TOLERANCE`] of the target.
pub fn gen_labels(spec: &DialogueSpec) -> Result<LabelMatrix> {
    spec.validate()?;
    if spec.target_overlap >= MAX_TARGET_OVERLAP {
        return Err(Error::Tuning(format!(
            "target overlap {} is not attainable (limit {MAX_TARGET_OVERLAP})",
            spec.target_overlap
        )));
    }
    let target = spec.target_overlap;
    let accept = |y: &LabelMatrix| measured(y).is_some_and(|r| (r - target).abs() <= OVERLAP_TOLERANCE);
    for attempt in 0..TUNING_ATTEMPTS {
        let y = labels_for(spec, spec.mean_pause_frames, attempt);
        if accept(&y) {
            return Ok(y);
        }
        let (mut lo, mut hi) = (PAUSE_RANGE.0.ln(), PAUSE_RANGE.1.ln());
        for _ in 0..BISECTION_STEPS {
            let mid = 0.5 * (lo + hi);
            let y = labels_for(spec, mid.exp(), attempt);
            if accept(&y) {
                return Ok(y);
            }
            // Longer pauses lower the overlap ratio; no speech at all counts
            // as too little overlap.
            match measured(&y) {
                Some(r) if r > target => lo = mid,
                _ => hi = mid,
            }
        }
    }
    Err(Error::Tuning(format!(
        "no pause mean reached overlap {target} +/- {OVERLAP_TOLERANCE} in {TUNING_ATTEMPTS} attempts"
    )))
}

fn signature_rng(spec: &DialogueSpec, speakers: usize) -> (Vec<Vec<f64>>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(FEATURE_STREAM);
    let signatures = (0..speakers)
        .map(|_| {
            (0..FEATURE_DIM)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    spec.speaker_sig_std * z
                })
                .collect()
        })
        .collect();
    (signatures, rng)
}

/// The signature vectors `mu_s` a dialogue with this seed uses.
pub fn speaker_signatures(spec: &DialogueSpec, speakers: usize) -> Vec<Vec<f64>> {
    signature_rng(spec, speakers).0
}

/// Frame `t` is the sum of the active speakers' signatures plus Gaussian
/// noise; signatures and noise are drawn from the dialogue seed.
pub fn labels_to_features(labels: &LabelMatrix, spec: &DialogueSpec) -> Result<FeatureMatrix> {
    let (signatures, mut rng) = signature_rng(spec, labels.speakers());
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let mut data = Vec::with_capacity(labels.frames() * FEATURE_DIM);
    for t in 0..labels.frames() {
        for j in 0..FEATURE_DIM {
            let mut v = spec.noise_std * normal();
            for (s, mu) in signatures.iter().enumerate() {
                if labels.get(t, s) == 1 {
                    v += mu[j];
                }
            }
            data.push(v as f32);
        }
    }
    FeatureMatrix::new(Tensor::new(vec![labels.frames(), FEATURE_DIM], data)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dialogue {
    pub id: String,
    pub labels: LabelMatrix,
    pub features: FeatureMatrix,
    pub measured_overlap: f64,
    pub seed: u64,
}

impl Dialogue {
    pub fn frames(&self) -> usize {
        self.labels.frames()
    }
}

pub fn dialogue_id(index: usize) -> String {
    format!("dlg{index:05}")
}

pub fn gen_dialogue(id: &str, spec: &DialogueSpec) -> Result<Dialogue> {
    let labels = gen_labels(spec)?;
    let features = labels_to_features(&labels, spec)?;
    let measured_overlap = overlap_ratio(&labels)?;
    Ok(Dialogue {
        id: id.to_string(),
        labels,
        features,
        measured_overlap,
        seed: spec.seed,
    })
}

/// Dialogue `i` uses seed `spec.seed + i`.
pub fn gen_dialogues(n: usize, spec: &DialogueSpec) -> Result<Vec<Dialogue>> {
    (0..n)
        .map(|i| gen_dialogue(&dialogue_id(i), &spec.with_seed(spec.seed.wrapping_add(i as u64))))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub frames: usize,
    pub overlap: f64,
}

impl fmt::Display for ManifestEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {:.6}", self.id, self.seed, self.frames, self.overlap)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const SPEC_FILE: &str = "spec.txt";

impl Manifest {
    pub fn mean_overlap(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().map(|e| e.overlap).sum::<f64>() / self.entries.len() as f64
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|e| format!("{e}\n")).collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = io::read_text(path)?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: &str| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: msg.to_string(),
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            let [id, seed, frames, overlap] = f[..] else {
                return Err(err("expected `id seed frames overlap`"));
            };
            entries.push(ManifestEntry {
                id: id.to_string(),
                seed: seed.parse().map_err(|_| err("bad seed"))?,
                frames: frames.parse().map_err(|_| err("bad frame count"))?,
                overlap: overlap.parse().map_err(|_| err("bad overlap"))?,
            });
        }
        Ok(Self { entries })
    }
}

fn write_dialogue(dir: &Path, d: &Dialogue) -> Result<()> {
    io::write_matrix(&dir.join(format!("{}.feat", d.id)), &d.features.data)?;
    io::write_labels(&dir.join(format!("{}.lab", d.id)), &d.labels)
}

/// Writes `n` dialogues plus `manifest.txt` and `spec.txt` into `dir`.
pub fn gen_corpus(n: usize, spec: &DialogueSpec, dir: &Path) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::default();
    for i in 0..n {
        let id = dialogue_id(i);
        let d = gen_dialogue(&id, &spec.with_seed(spec.seed.wrapping_add(i as u64)))?;
        write_dialogue(dir, &d)?;
        manifest.entries.push(ManifestEntry {
            id,
            seed: d.seed,
            frames: d.frames(),
            overlap: d.measured_overlap,
        });
    }
    io::write_text(&dir.join(SPEC_FILE), &spec.to_text())?;
    io::write_text(&dir.join(MANIFEST_FILE), &manifest.to_text())?;
    Ok(manifest)
}

pub fn read_spec(dir: &Path) -> Result<DialogueSpec> {
    let path = dir.join(SPEC_FILE);
    DialogueSpec::from_text(&path.display().to_string(), &io::read_text(&path)?)
}

/// Rebuilds every dialogue listed in `dir`'s manifest from its seed and
/// writes it to `out`.
pub fn regenerate_corpus(dir: &Path, out: &Path) -> Result<Manifest> {
    let spec = read_spec(dir)?;
    let manifest = Manifest::read(&dir.join(MANIFEST_FILE))?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for e in &manifest.entries {
        let d = gen_dialogue(&e.id, &spec.with_seed(e.seed))?;
        write_dialogue(out, &d)?;
    }
    io::write_text(&out.join(SPEC_FILE), &spec.to_text())?;
    io::write_text(&out.join(MANIFEST_FILE), &manifest.to_text())?;
    Ok(manifest)
}

pub fn load_corpus(dir: &Path) -> Result<Vec<Dialogue>> {
    let manifest = Manifest::read(&dir.join(MANIFEST_FILE))?;
    manifest
        .entries
        .iter()
        .map(|e| {
            let features =
                FeatureMatrix::new(io::read_matrix(&dir.join(format!("{}.feat", e.id)))?)?;
            let labels = io::read_labels(&dir.join(format!("{}.lab", e.id)))?;
            if labels.frames() != features.frames() {
                return Err(Error::dim(
                    "load_corpus",
                    &[features.frames()],
                    &[labels.frames()],
                ));
            }
            Ok(Dialogue {
                id: e.id.clone(),
                measured_overlap: overlap_ratio(&labels)?,
                labels,
                features,
                seed: e.seed,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
