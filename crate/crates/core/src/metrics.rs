//! Diarization error rate with a reference-boundary collar, posterior
//! decoding, overlap ratio, per-block probes and embedding export.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::features::FRAME_STEP_SEC;
use crate::io;
use crate::labels::LabelMatrix;
use crate::model::Model;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MEDIAN_WINDOW: usize = 11;
pub const DEFAULT_COLLAR_SEC: f64 = 0.25;
pub const DEFAULT_RESOLUTION_SEC: f64 = 0.01;

/// Beyond this many speakers per side the speaker mapping is greedy.
const EXHAUSTIVE_MAPPING_LIMIT: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub recording: String,
    pub start: f64,
    pub end: f64,
    pub speaker: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SegmentList {
    pub segments: Vec<Segment>,
}

impl SegmentList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn push(&mut self, recording: &str, start: f64, end: f64, speaker: &str) {
        self.segments.push(Segment {
            recording: recording.to_string(),
            start,
            end,
            speaker: speaker.to_string(),
        });
    }

    pub fn extend(&mut self, other: SegmentList) {
        self.segments.extend(other.segments);
    }

    pub fn recordings(&self) -> BTreeSet<&str> {
        self.segments.iter().map(|s| s.recording.as_str()).collect()
    }

    /// Parses `<recording> <start> <end> <speaker>` lines. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn parse(source: &str, text: &str) -> Result<Self> {
        let mut out = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: source.to_string(),
                line: i + 1,
                msg,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [rec, start, end, spk] = fields[..] else {
                return Err(err(format!("expected 4 fields, found {}", fields.len())));
            };
            let num = |tok: &str| -> Result<f64> {
                tok.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("bad time {tok:?}")))
            };
            let (start, end) = (num(start)?, num(end)?);
            if start < 0.0 {
                return Err(err(format!("negative start time {start}")));
            }
            if start >= end {
                return Err(err(format!("segment end {end} is not after start {start}")));
            }
            out.push(rec, start, end, spk);
        }
        Ok(out)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&path.display().to_string(), &io::read_text(path)?)
    }

    pub fn format(&self) -> String {
        let mut out = String::new();
        for s in &self.segments {
            writeln!(out, "{} {:.2} {:.2} {}", s.recording, s.start, s.end, s.speaker)
                .expect("writing to a String");
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        io::write_text(path, &self.format())
    }
}

pub fn speaker_name(s: usize) -> String {
    format!("spk{s}")
}

fn activity_to_segments(
    out: &mut SegmentList,
    active: &[bool],
    frame_step: f64,
    recording: &str,
    speaker: &str,
) {
    let mut t = 0;
    while t < active.len() {
        if !active[t] {
            t += 1;
            continue;
        }
        let start = t;
        while t < active.len() && active[t] {
            t += 1;
        }
        out.push(recording, start as f64 * frame_step, t as f64 * frame_step, speaker);
    }
}

/// Majority filter over an odd window; frames beyond the ends replicate the
/// boundary frame.
pub fn median_filter(bits: &[bool], window: usize) -> Result<Vec<bool>> {
    if window % 2 == 0 {
        return Err(Error::Config(format!("median window must be odd, got {window}")));
    }
    let half = window / 2;
    let n = bits.len();
    Ok((0..n)
        .map(|t| {
            let ones = (0..window)
                .filter(|k| bits[(t + k).saturating_sub(half).min(n - 1)])
                .count();
            ones > half
        })
        .collect())
}

/// Reference segments from a label matrix, speakers named `spk0`, `spk1`, ...
pub fn labels_to_segments(labels: &LabelMatrix, frame_step: f64, recording: &str) -> SegmentList {
    let mut out = SegmentList::new();
    for s in 0..labels.speakers() {
        let active: Vec<bool> = (0..labels.frames()).map(|t| labels.get(t, s) == 1).collect();
        activity_to_segments(&mut out, &active, frame_step, recording, &speaker_name(s));
    }
    out
}

/// Thresholds each speaker column, median-filters it and merges runs of
/// active frames into segments on frame edges.
pub fn decode<R: Real>(
    posterior: &Tensor<R>,
    threshold: f64,
    median_window: usize,
    frame_step: f64,
    recording: &str,
) -> Result<SegmentList> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    if median_window % 2 == 0 {
        return Err(Error::Config(format!(
            "median window must be odd, got {median_window}"
        )));
    }
    let (frames, speakers) = posterior.dims2()?;
    let mut out = SegmentList::new();
    for s in 0..speakers {
        let raw: Vec<bool> = (0..frames)
            .map(|t| posterior.get(t, s).as_f64() > threshold)
            .collect();
        let active = median_filter(&raw, median_window)?;
        activity_to_segments(&mut out, &active, frame_step, recording, &speaker_name(s));
    }
    Ok(out)
}

/// Error durations in seconds, summable across recordings.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DerTotals {
    pub miss_sec: f64,
    pub false_alarm_sec: f64,
    pub confusion_sec: f64,
    pub scored_speech_sec: f64,
    pub excluded_collar_sec: f64,
}

impl DerTotals {
    pub fn add(&mut self, other: &DerTotals) {
        self.miss_sec += other.miss_sec;
        self.false_alarm_sec += other.false_alarm_sec;
        self.confusion_sec += other.confusion_sec;
        self.scored_speech_sec += other.scored_speech_sec;
        self.excluded_collar_sec += other.excluded_collar_sec;
    }

    pub fn report(&self) -> Result<DerReport> {
        let speech = self.scored_speech_sec;
        if speech <= 0.0 {
            return Err(Error::Undefined(
                "DER needs scored reference speech, found none".into(),
            ));
        }
        let errors = self.miss_sec + self.false_alarm_sec + self.confusion_sec;
        Ok(DerReport {
            der: errors / speech,
            miss: self.miss_sec / speech,
            false_alarm: self.false_alarm_sec / speech,
            confusion: self.confusion_sec / speech,
            scored_speech_sec: speech,
            excluded_collar_sec: self.excluded_collar_sec,
            totals: *self,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DerReport {
    pub der: f64,
    pub miss: f64,
    pub false_alarm: f64,
    pub confusion: f64,
    pub scored_speech_sec: f64,
    pub excluded_collar_sec: f64,
    pub totals: DerTotals,
}

/// Time-weighted aggregate of several recordings' totals.
pub fn aggregate<'a>(totals: impl IntoIterator<Item = &'a DerTotals>) -> Result<DerReport> {
    let mut sum = DerTotals::default();
    for t in totals {
        sum.add(t);
    }
    sum.report()
}

fn frame_index(sec: f64, resolution: f64) -> usize {
    (sec / resolution).round().max(0.0) as usize
}

/// Per-speaker frame activity of one recording.
fn speaker_activity(
    segments: &[&Segment],
    frames: usize,
    resolution: f64,
) -> Vec<Vec<bool>> {
    let names: BTreeSet<&str> = segments.iter().map(|s| s.speaker.as_str()).collect();
    names
        .iter()
        .map(|name| {
            let mut active = vec![false; frames];
            for s in segments.iter().filter(|s| s.speaker == *name) {
                let (a, b) = (frame_index(s.start, resolution), frame_index(s.end, resolution));
                active[a.min(frames)..b.min(frames)].fill(true);
            }
            active
        })
        .collect()
}

/// One-to-one reference-to-hypothesis mapping maximizing total overlap.
fn optimal_mapping(overlap: &[Vec<usize>], hyp_count: usize) -> Vec<Option<usize>> {
    let ref_count = overlap.len();
    if ref_count > EXHAUSTIVE_MAPPING_LIMIT || hyp_count > EXHAUSTIVE_MAPPING_LIMIT {
        return greedy_mapping(overlap, hyp_count);
    }
    fn search(
        i: usize,
        overlap: &[Vec<usize>],
        used: &mut [bool],
        cur: &mut Vec<Option<usize>>,
        score: usize,
        best: &mut (usize, Vec<Option<usize>>),
    ) {
        if i == overlap.len() {
            if score > best.0 || best.1.is_empty() {
                *best = (score, cur.clone());
            }
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                cur.push(Some(j));
                search(i + 1, overlap, used, cur, score + overlap[i][j], best);
                cur.pop();
                used[j] = false;
            }
        }
        cur.push(None);
        search(i + 1, overlap, used, cur, score, best);
        cur.pop();
    }
    let mut best = (0, Vec::new());
    search(0, overlap, &mut vec![false; hyp_count], &mut Vec::new(), 0, &mut best);
    best.1
}

fn greedy_mapping(overlap: &[Vec<usize>], hyp_count: usize) -> Vec<Option<usize>> {
    let mut pairs: Vec<(usize, usize, usize)> = overlap
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().map(move |(j, &o)| (o, i, j)))
        .filter(|(o, _, _)| *o > 0)
        .collect();
    pairs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut mapping = vec![None; overlap.len()];
    let mut used = vec![false; hyp_count];
    for (_, i, j) in pairs {
        if mapping[i].is_none() && !used[j] {
            mapping[i] = Some(j);
            used[j] = true;
        }
    }
    mapping
}

fn recording_totals(
    reference: &[&Segment],
    hypothesis: &[&Segment],
    collar: f64,
    resolution: f64,
) -> DerTotals {
    let frames = reference
        .iter()
        .chain(hypothesis)
        .map(|s| frame_index(s.end, resolution))
        .max()
        .unwrap_or(0);
    let refs = speaker_activity(reference, frames, resolution);
    let hyps = speaker_activity(hypothesis, frames, resolution);

    let mut scored = vec![true; frames];
    if collar > 0.0 {
        for s in reference {
            for b in [s.start, s.end] {
                let lo = frame_index(b - collar, resolution).min(frames);
                let hi = frame_index(b + collar, resolution).min(frames);
                scored[lo..hi].fill(false);
            }
        }
    }

    let overlap: Vec<Vec<usize>> = refs
        .iter()
        .map(|r| {
            hyps.iter()
                .map(|h| (0..frames).filter(|&t| scored[t] && r[t] && h[t]).count())
                .collect()
        })
        .collect();
    let mapping = optimal_mapping(&overlap, hyps.len());

    let (mut miss, mut fa, mut conf, mut speech, mut excluded) = (0usize, 0, 0, 0, 0);
    for t in 0..frames {
        if !scored[t] {
            excluded += 1;
            continue;
        }
        let nr = refs.iter().filter(|r| r[t]).count();
        let nh = hyps.iter().filter(|h| h[t]).count();
        let correct = refs
            .iter()
            .zip(&mapping)
            .filter(|(r, m)| r[t] && m.is_some_and(|j| hyps[j][t]))
            .count();
        speech += nr;
        miss += nr.saturating_sub(nh);
        fa += nh.saturating_sub(nr);
        conf += nr.min(nh) - correct;
    }
    let sec = |n: usize| n as f64 * resolution;
    DerTotals {
        miss_sec: sec(miss),
        false_alarm_sec: sec(fa),
        confusion_sec: sec(conf),
        scored_speech_sec: sec(speech),
        excluded_collar_sec: sec(excluded),
    }
}

/// Error totals over every recording in either list; each recording gets
/// its own speaker mapping.
pub fn der_totals(
    reference: &SegmentList,
    hypothesis: &SegmentList,
    collar_sec: f64,
    resolution_sec: f64,
) -> Result<DerTotals> {
    if !(collar_sec >= 0.0) {
        return Err(Error::Config(format!("collar must be >= 0, got {collar_sec}")));
    }
    if !(resolution_sec > 0.0) {
        return Err(Error::Config(format!(
            "resolution must be > 0, got {resolution_sec}"
        )));
    }
    let mut recordings = reference.recordings();
    recordings.extend(hypothesis.recordings());
    let mut sum = DerTotals::default();
    for rec in recordings {
        let pick = |l: &'_ SegmentList| -> Vec<Segment> {
            l.segments.iter().filter(|s| s.recording == rec).cloned().collect()
        };
        let (r, h) = (pick(reference), pick(hypothesis));
        let r: Vec<&Segment> = r.iter().collect();
        let h: Vec<&Segment> = h.iter().collect();
        sum.add(&recording_totals(&r, &h, collar_sec, resolution_sec));
    }
    Ok(sum)
}

/// Frame-discretized DER. Frames within `collar_sec` of a reference boundary
/// are not scored.
pub fn der(
    reference: &SegmentList,
    hypothesis: &SegmentList,
    collar_sec: f64,
    resolution_sec: f64,
) -> Result<DerReport> {
    der_totals(reference, hypothesis, collar_sec, resolution_sec)?.report()
}

/// Fraction of speech frames with two or more active speakers.
pub fn overlap_ratio(labels: &LabelMatrix) -> Result<f64> {
    if labels.speakers() < 2 {
        return Err(Error::Contract(format!(
            "overlap ratio needs at least 2 speakers, got {}",
            labels.speakers()
        )));
    }
    let mut speech = 0usize;
    let mut overlap = 0usize;
    for t in 0..labels.frames() {
        let n = labels.active_count(t);
        speech += (n >= 1) as usize;
        overlap += (n >= 2) as usize;
    }
    if speech == 0 {
        return Err(Error::Undefined("overlap ratio of a recording without speech".into()));
    }
    Ok(overlap as f64 / speech as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalParams {
    pub threshold: f64,
    pub median_window: usize,
    pub collar_sec: f64,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            median_window: DEFAULT_MEDIAN_WINDOW,
            collar_sec: DEFAULT_COLLAR_SEC,
        }
    }
}

/// A recording to score: features plus reference labels.
#[derive(Clone, Copy, Debug)]
pub struct Recording<'a> {
    pub id: &'a str,
    pub features: &'a Tensor<f32>,
    pub labels: &'a LabelMatrix,
}

/// Scores one posterior matrix against reference labels.
pub fn score_posterior<R: Real>(
    posterior: &Tensor<R>,
    labels: &LabelMatrix,
    recording: &str,
    params: &EvalParams,
) -> Result<DerTotals> {
    let reference = labels_to_segments(labels, FRAME_STEP_SEC, recording);
    let hypothesis = decode(
        posterior,
        params.threshold,
        params.median_window,
        FRAME_STEP_SEC,
        recording,
    )?;
    der_totals(&reference, &hypothesis, params.collar_sec, DEFAULT_RESOLUTION_SEC)
}

/// Final-block error totals of every recording.
pub fn evaluate(
    model: &Model<f32>,
    recordings: &[Recording<'_>],
    params: &EvalParams,
) -> Result<Vec<DerTotals>> {
    recordings
        .iter()
        .map(|r| {
            let (_, post) = model.forward(r.features, false)?;
            score_posterior(post.last(), r.labels, r.id, params)
        })
        .collect()
}

/// Corpus DER of every block `1..=P`, decoding each block's embeddings
/// through its head (the final head when no auxiliary heads were trained).
pub fn probe_blocks(
    model: &Model<f32>,
    recordings: &[Recording<'_>],
    params: &EvalParams,
) -> Result<Vec<DerReport>> {
    let blocks = model.config().blocks;
    let mut totals = vec![DerTotals::default(); blocks];
    for r in recordings {
        let posteriors = model.all_block_posteriors(r.features)?;
        for (p, post) in posteriors.iter().enumerate() {
            totals[p].add(&score_posterior(post, r.labels, r.id, params)?);
        }
    }
    totals.iter().map(DerTotals::report).collect()
}

/// `E^p` of one recording, `1 <= p <= P`.
pub fn block_embeddings(model: &Model<f32>, features: &Tensor<f32>, p: usize) -> Result<Tensor<f32>> {
    let blocks = model.config().blocks;
    if p == 0 || p > blocks {
        return Err(Error::Contract(format!(
            "block index {p} outside 1..={blocks}"
        )));
    }
    let (mut emb, _) = model.forward(features, false)?;
    Ok(emb.layers.swap_remove(p))
}

/// Path of the frame-label file written next to an embedding dump.
pub fn embedding_labels_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".lab");
    PathBuf::from(name)
}

/// Writes `E^p` as a matrix file at `out` and the frame-aligned labels at
/// [`embedding_labels_path`]`(out)`.
pub fn dump_embeddings(
    model: &Model<f32>,
    features: &Tensor<f32>,
    labels: &LabelMatrix,
    p: usize,
    out: &Path,
) -> Result<Tensor<f32>> {
    let e = block_embeddings(model, features, p)?;
    if labels.frames() != e.rows() {
        return Err(Error::dim("dump_embeddings", &[e.rows()], &[labels.frames()]));
    }
    io::write_matrix(out, &e)?;
    io::write_labels(&embedding_labels_path(out), labels)?;
    Ok(e)
}
