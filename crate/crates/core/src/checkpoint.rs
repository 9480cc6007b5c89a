//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RXEE" | version u32 | meta_len u32 | meta (UTF-8 key=value lines)
//! | record_count u32 | records... | crc32 u32
//! record = name_len u32 | name | ndim u32 | dims u32... | f32 data
//! ```
//!
//! The CRC covers every preceding byte. Optimizer moments are stored as
//! records named `adam.m/<param>` and `adam.v/<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::trainer::{AdamState, TrainConfig};

pub const MAGIC: &[u8; 4] = b"RXEE";
pub const FORMAT_VERSION: u32 = 1;

/// Position of the training RNG: its seed plus the number of 32-bit words
/// consumed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub train_config: TrainConfig,
    pub optimizer: Option<AdamState>,
    pub rng: RngState,
    pub epoch: usize,
}

fn model_meta(c: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("model.blocks", c.blocks.to_string()),
        ("model.d_model", c.d_model.to_string()),
        ("model.heads", c.heads.to_string()),
        ("model.ffn_units", c.ffn_units.to_string()),
        ("model.speakers", c.speakers.to_string()),
        ("model.residual", c.residual.to_string()),
        ("model.aux_mode", c.aux_mode.to_string()),
        ("model.lambda", format!("{:?}", c.lambda)),
        ("model.input_dim", c.input_dim.to_string()),
        ("model.dropout", format!("{:?}", c.dropout)),
        ("model.head_sharing", c.head_sharing.to_string()),
    ]
}

fn train_meta(c: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("train.epochs", c.epochs.to_string()),
        ("train.chunk_frames", c.chunk_frames.to_string()),
        ("train.batch_size", c.batch_size.to_string()),
        ("train.warmup_steps", c.warmup_steps.to_string()),
        ("train.lr_scale", format!("{:?}", c.lr_scale)),
        ("train.beta1", format!("{:?}", c.beta1)),
        ("train.beta2", format!("{:?}", c.beta2)),
        ("train.adam_eps", format!("{:?}", c.adam_eps)),
        ("train.grad_clip", format!("{:?}", c.grad_clip)),
        ("train.seed", c.seed.to_string()),
        ("train.val_fraction", format!("{:?}", c.val_fraction)),
    ]
}

struct Meta(BTreeMap<String, String>);

impl Meta {
    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .0
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key {key}")))?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("bad value {raw:?} for {key}")))
    }
}

fn parse_model_config(m: &Meta) -> Result<ModelConfig> {
    Ok(ModelConfig {
        blocks: m.get("model.blocks")?,
        d_model: m.get("model.d_model")?,
        heads: m.get("model.heads")?,
        ffn_units: m.get("model.ffn_units")?,
        speakers: m.get("model.speakers")?,
        residual: m.get("model.residual")?,
        aux_mode: m.get("model.aux_mode")?,
        lambda: m.get("model.lambda")?,
        input_dim: m.get("model.input_dim")?,
        dropout: m.get("model.dropout")?,
        head_sharing: m.get("model.head_sharing")?,
    })
}

fn parse_train_config(m: &Meta) -> Result<TrainConfig> {
    Ok(TrainConfig {
        epochs: m.get("train.epochs")?,
        chunk_frames: m.get("train.chunk_frames")?,
        batch_size: m.get("train.batch_size")?,
        warmup_steps: m.get("train.warmup_steps")?,
        lr_scale: m.get("train.lr_scale")?,
        beta1: m.get("train.beta1")?,
        beta2: m.get("train.beta2")?,
        adam_eps: m.get("train.adam_eps")?,
        grad_clip: m.get("train.grad_clip")?,
        seed: m.get("train.seed")?,
        val_fraction: m.get("train.val_fraction")?,
    })
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len())?;
    for d in t.shape() {
        put_u32(out, *d)?;
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))
    }

    fn record(&mut self) -> Result<(String, Tensor<f32>)> {
        let name = self.string()?;
        let ndim = self.u32()?;
        let shape = (0..ndim).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("record too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

impl Checkpoint {
    pub fn model_config(&self) -> &ModelConfig {
        self.model.config()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = String::new();
        let mut pairs = model_meta(self.model.config());
        pairs.extend(train_meta(&self.train_config));
        pairs.push(("rng.seed", self.rng.seed.to_string()));
        pairs.push(("rng.word_pos", self.rng.word_pos.to_string()));
        pairs.push(("epoch", self.epoch.to_string()));
        if let Some(opt) = &self.optimizer {
            pairs.push(("adam.step", opt.step.to_string()));
        }
        for (k, v) in pairs {
            meta.push_str(&format!("{k}={v}\n"));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_u32(&mut out, meta.len())?;
        out.extend_from_slice(meta.as_bytes());

        let names = self.model.names();
        let moments = self.optimizer.as_ref().map_or(0, |_| 2 * names.len());
        put_u32(&mut out, names.len() + moments)?;
        for (name, t) in self.model.named_params() {
            put_record(&mut out, name, t)?;
        }
        if let Some(opt) = &self.optimizer {
            for (prefix, tensors) in [(ADAM_M, &opt.m), (ADAM_V, &opt.v)] {
                for (name, t) in names.iter().zip(tensors) {
                    put_record(&mut out, &format!("{prefix}{name}"), t)?;
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("missing RXEE magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()? as u32;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("CRC mismatch".into()));
        }

        let meta_len = r.u32()?;
        let meta_text = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let meta = Meta(
            meta_text
                .lines()
                .filter_map(|l| l.split_once('='))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        );
        let model_config = parse_model_config(&meta)?;
        let train_config = parse_train_config(&meta)?;

        let count = r.u32()?;
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for _ in 0..count {
            let (name, t) = r.record()?;
            if name.starts_with(ADAM_M) {
                m.push(t);
            } else if name.starts_with(ADAM_V) {
                v.push(t);
            } else {
                params.push((name, t));
            }
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after records".into()));
        }
        let model = Model::from_named(model_config, params)?;
        let optimizer = match meta.0.contains_key("adam.step") {
            true => {
                let shapes_match = m.len() == model.params().len()
                    && v.len() == m.len()
                    && model
                        .params()
                        .iter()
                        .zip(m.iter().zip(&v))
                        .all(|(p, (a, b))| p.shape() == a.shape() && p.shape() == b.shape());
                if !shapes_match {
                    return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
                }
                Some(AdamState {
                    step: meta.get("adam.step")?,
                    m,
                    v,
                })
            }
            false => None,
        };
        Ok(Self {
            model,
            train_config,
            optimizer,
            rng: RngState {
                seed: meta.get("rng.seed")?,
                word_pos: meta.get("rng.word_pos")?,
            },
            epoch: meta.get("epoch")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
