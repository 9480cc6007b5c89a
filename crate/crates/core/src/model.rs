//! Encoder stack: input embedding, `P` encoder (or residual) blocks and
//! linear + sigmoid posterior heads.
//!
//! Blocks are pre-norm transformer encoders without positional encoding:
//!
//! ```text
//! E1   = E + Dropout(MHSA(LN1(E)))
//! Eout = E1 + Dropout(FFN(LN2(E1)))
//! ```
//!
//! A residual block adds one more identity path around the whole block,
//! `E + block(E)`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

pub use crate::features::FEATURE_DIM;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Which auxiliary loss supervises blocks `1..P-1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuxMode {
    None,
    Shared,
    Indiv,
}

impl fmt::Display for AuxMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AuxMode::None => "none",
            AuxMode::Shared => "shared",
            AuxMode::Indiv => "indiv",
        })
    }
}

impl FromStr for AuxMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AuxMode::None),
            "shared" => Ok(AuxMode::Shared),
            "indiv" => Ok(AuxMode::Indiv),
            other => Err(Error::Config(format!(
                "aux mode must be none, shared or indiv (got `{other}`)"
            ))),
        }
    }
}

/// Whether blocks `1..P-1` reuse the final output head or own one each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadSharing {
    Shared,
    PerBlock,
}

impl fmt::Display for HeadSharing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadSharing::Shared => "shared",
            HeadSharing::PerBlock => "per-block",
        })
    }
}

impl FromStr for HeadSharing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(HeadSharing::Shared),
            "per-block" | "per_block" => Ok(HeadSharing::PerBlock),
            other => Err(Error::Config(format!(
                "head sharing must be shared or per-block (got `{other}`)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_units: usize,
    pub speakers: usize,
    pub residual: bool,
    pub aux_mode: AuxMode,
    pub lambda: f64,
    pub input_dim: usize,
    pub dropout: f64,
    pub head_sharing: HeadSharing,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::base()
    }
}

impl ModelConfig {
    /// Four blocks, 256 attention units, four heads, 1024 feed-forward units.
    pub fn base() -> Self {
        Self {
            blocks: 4,
            d_model: 256,
            heads: 4,
            ffn_units: 1024,
            speakers: 2,
            residual: true,
            aux_mode: AuxMode::Indiv,
            lambda: 1.0,
            input_dim: FEATURE_DIM,
            dropout: 0.1,
            head_sharing: HeadSharing::Shared,
        }
    }

    pub fn deep() -> Self {
        Self {
            blocks: 8,
            ..Self::base()
        }
    }

    pub fn large() -> Self {
        Self {
            d_model: 512,
            heads: 8,
            ..Self::base()
        }
    }

    /// Desk-scale preset used by the trend experiments.
    pub fn small() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            ffn_units: 256,
            ..Self::base()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "base" => Ok(Self::base()),
            "deep" => Ok(Self::deep()),
            "large" => Ok(Self::large()),
            "small" => Ok(Self::small()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected base, deep, large or small)"
            ))),
        }
    }

    /// Plain SA-EEND: no outer residual, no auxiliary loss.
    pub fn into_sa(self) -> Self {
        Self {
            residual: false,
            aux_mode: AuxMode::None,
            ..self
        }
    }

    /// RX-EEND: residual blocks trained with the individual auxiliary loss.
    pub fn into_rx(self) -> Self {
        Self {
            residual: true,
            aux_mode: AuxMode::Indiv,
            ..self
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.blocks < 1 {
            return fail("block count must be at least 1".into());
        }
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "attention units {} must be a positive multiple of the head count {}",
                self.d_model, self.heads
            ));
        }
        if self.speakers < 2 {
            return fail(format!("speaker count must be at least 2, got {}", self.speakers));
        }
        if self.ffn_units == 0 || self.input_dim == 0 {
            return fail("feed-forward width and input dimension must be positive".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct LinearIdx {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct NormIdx {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct BlockIdx {
    norm1: NormIdx,
    query: LinearIdx,
    key: LinearIdx,
    value: LinearIdx,
    out: LinearIdx,
    norm2: NormIdx,
    ff1: LinearIdx,
    ff2: LinearIdx,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: LinearIdx,
    embed_norm: NormIdx,
    blocks: Vec<BlockIdx>,
    heads: Vec<LinearIdx>,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

struct LayoutBuilder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> LinearIdx {
        LinearIdx {
            weight: self.add(
                format!("{prefix}.weight"),
                vec![fan_in, fan_out],
                Init::Xavier { fan_in, fan_out },
            ),
            bias: self.add(format!("{prefix}.bias"), vec![fan_out], Init::Zeros),
        }
    }

    fn norm(&mut self, prefix: &str, dim: usize) -> NormIdx {
        NormIdx {
            gain: self.add(format!("{prefix}.gain"), vec![dim], Init::Ones),
            bias: self.add(format!("{prefix}.bias"), vec![dim], Init::Zeros),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
    let d = cfg.d_model;
    let mut b = LayoutBuilder { specs: Vec::new() };
    let embed = b.linear("embed.linear", cfg.input_dim, d);
    let embed_norm = b.norm("embed.norm", d);
    let blocks = (0..cfg.blocks)
        .map(|p| {
            let pre = format!("blocks.{}", p + 1);
            BlockIdx {
                norm1: b.norm(&format!("{pre}.norm1"), d),
                query: b.linear(&format!("{pre}.attn.query"), d, d),
                key: b.linear(&format!("{pre}.attn.key"), d, d),
                value: b.linear(&format!("{pre}.attn.value"), d, d),
                out: b.linear(&format!("{pre}.attn.out"), d, d),
                norm2: b.norm(&format!("{pre}.norm2"), d),
                ff1: b.linear(&format!("{pre}.ffn.inner"), d, cfg.ffn_units),
                ff2: b.linear(&format!("{pre}.ffn.outer"), cfg.ffn_units, d),
            }
        })
        .collect();
    let heads = match cfg.head_sharing {
        HeadSharing::Shared => vec![b.linear("head", d, cfg.speakers)],
        HeadSharing::PerBlock => (0..cfg.blocks)
            .map(|p| b.linear(&format!("heads.{}", p + 1), d, cfg.speakers))
            .collect(),
    };
    (
        Layout {
            embed,
            embed_norm,
            blocks,
            heads,
        },
        b.specs,
    )
}

/// Tape handles of a linear map `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gain: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct EmbedVars {
    pub linear: LinearVars,
    pub norm: NormVars,
}

/// Tape handles of one encoder block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub norm1: NormVars,
    pub query: LinearVars,
    pub key: LinearVars,
    pub value: LinearVars,
    pub out: LinearVars,
    pub norm2: NormVars,
    pub ff1: LinearVars,
    pub ff2: LinearVars,
}

/// Every model parameter registered on one tape, in parameter order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
    embed: EmbedVars,
    blocks: Vec<BlockVars>,
    heads: Vec<LinearVars>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn embed(&self) -> EmbedVars {
        self.embed
    }

    /// Block `p`, counted from 1.
    pub fn block(&self, p: usize) -> BlockVars {
        self.blocks[p - 1]
    }

    pub fn final_head(&self) -> LinearVars {
        *self.heads.last().expect("at least one head")
    }
}

/// Training-time dropout source.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply<R: Real>(&mut self, tape: &mut Tape<R>, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let scale = R::of(1.0 / keep);
        let n = tape.value(x).numel();
        let mask = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    scale
                } else {
                    R::zero()
                }
            })
            .collect();
        tape.mul_const(x, mask)
    }
}

pub fn linear<R: Real>(tape: &mut Tape<R>, x: Var, p: LinearVars) -> Result<Var> {
    let h = tape.matmul(x, p.weight)?;
    tape.add_row(h, p.bias)
}

/// `Norm(Linear(x_t))` for every frame.
pub fn embed_input<R: Real>(tape: &mut Tape<R>, x: Var, p: EmbedVars) -> Result<Var> {
    let h = linear(tape, x, p.linear)?;
    tape.layer_norm(h, p.norm.gain, p.norm.bias, R::of(LAYER_NORM_EPS))
}

/// Multi-head scaled dot-product self-attention over all frames. Returns the
/// output projection and the per-head `T x T` attention weights.
pub fn self_attention<R: Real>(
    tape: &mut Tape<R>,
    x: Var,
    p: &BlockVars,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = tape.value(x).cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "attention units {d} not divisible by {heads} heads"
        )));
    }
    let dk = d / heads;
    let q = linear(tape, x, p.query)?;
    let k = linear(tape, x, p.key)?;
    let v = linear(tape, x, p.value)?;
    let scale = R::of(1.0 / (dk as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let att = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(att, vh)?);
        weights.push(att);
    }
    let joined = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    Ok((linear(tape, joined, p.out)?, weights))
}

/// Pre-norm transformer encoder block.
pub fn encoder_block<R: Real>(
    tape: &mut Tape<R>,
    e_in: Var,
    p: &BlockVars,
    heads: usize,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<Var> {
    let eps = R::of(LAYER_NORM_EPS);
    let n1 = tape.layer_norm(e_in, p.norm1.gain, p.norm1.bias, eps)?;
    let (att, _) = self_attention(tape, n1, p, heads)?;
    let att = match dropout.as_deref_mut() {
        Some(d) => d.apply(tape, att)?,
        None => att,
    };
    let e1 = tape.add(e_in, att)?;
    let n2 = tape.layer_norm(e1, p.norm2.gain, p.norm2.bias, eps)?;
    let inner = linear(tape, n2, p.ff1)?;
    let inner = tape.relu(inner);
    let ff = linear(tape, inner, p.ff2)?;
    let ff = match dropout {
        Some(d) => d.apply(tape, ff)?,
        None => ff,
    };
    tape.add(e1, ff)
}

/// `E + encoder_block(E)`.
pub fn residual_block<R: Real>(
    tape: &mut Tape<R>,
    e_in: Var,
    p: &BlockVars,
    heads: usize,
    dropout: Option<&mut Dropout<'_>>,
) -> Result<Var> {
    let inner = encoder_block(tape, e_in, p, heads, dropout)?;
    tape.add(e_in, inner)
}

/// `sigmoid(Linear(e_t))` for every frame.
pub fn head<R: Real>(tape: &mut Tape<R>, e: Var, p: LinearVars) -> Result<Var> {
    let logits = linear(tape, e, p)?;
    Ok(tape.sigmoid(logits))
}

/// Hidden states `E^0 ..= E^P`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet<R = f32> {
    pub layers: Vec<Tensor<R>>,
}

/// Per-block posteriors; index `p - 1` holds block `p`. The final block is
/// always present.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSet<R = f32> {
    pub blocks: Vec<Option<Tensor<R>>>,
}

impl<R: Real> PosteriorSet<R> {
    pub fn last(&self) -> &Tensor<R> {
        self.blocks
            .last()
            .and_then(Option::as_ref)
            .expect("final posterior is always computed")
    }

    /// Posteriors of blocks `1..P-1`, if all of them were computed.
    pub fn auxiliary(&self) -> Option<Vec<&Tensor<R>>> {
        let n = self.blocks.len();
        self.blocks[..n.saturating_sub(1)]
            .iter()
            .map(Option::as_ref)
            .collect()
    }
}

/// Tape handles produced by [`Model::forward_on_tape`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub embeddings: Vec<Var>,
    pub posteriors: Vec<Option<Var>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<R = f32> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<R>>,
}

impl<R: Real> Model<R> {
    /// Freshly initialized model: Xavier-uniform linear maps, zero biases,
    /// unit norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (_, specs) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape, init) in specs {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![R::zero(); n],
                Init::Ones => vec![R::one(); n],
                Init::Xavier { fan_in, fan_out } => {
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n)
                        .map(|_| R::of(rng.random_range(-limit..limit)))
                        .collect()
                }
            };
            names.push(name);
            params.push(Tensor::new(shape, data)?);
        }
        Ok(Self {
            config,
            names,
            params,
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes against
    /// the layout implied by `config`.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor<R>)>) -> Result<Self> {
        config.validate()?;
        let (_, specs) = build_layout(&config);
        if specs.len() != named.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for ((name, shape, _), (got_name, tensor)) in specs.into_iter().zip(named) {
            if name != got_name || tensor.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter mismatch: expected {name} {shape:?}, found {got_name} {:?}",
                    tensor.shape()
                )));
            }
            names.push(name);
            params.push(tensor);
        }
        Ok(Self {
            config,
            names,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<R>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<R>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<R>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn cast<S: Real>(&self) -> Model<S> {
        Model {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Registers every parameter on `tape`; trainable when `trainable`.
    pub fn bind(&self, tape: &mut Tape<R>, trainable: bool) -> BoundParams {
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        self.bind_vars(vars)
    }

    /// Wraps caller-registered parameter handles (in parameter order).
    pub fn bind_vars(&self, vars: Vec<Var>) -> BoundParams {
        let (layout, _) = build_layout(&self.config);
        let lin = |l: LinearIdx| LinearVars {
            weight: vars[l.weight],
            bias: vars[l.bias],
        };
        let norm = |n: NormIdx| NormVars {
            gain: vars[n.gain],
            bias: vars[n.bias],
        };
        let embed = EmbedVars {
            linear: lin(layout.embed),
            norm: norm(layout.embed_norm),
        };
        let blocks = layout
            .blocks
            .iter()
            .map(|b| BlockVars {
                norm1: norm(b.norm1),
                query: lin(b.query),
                key: lin(b.key),
                value: lin(b.value),
                out: lin(b.out),
                norm2: norm(b.norm2),
                ff1: lin(b.ff1),
                ff2: lin(b.ff2),
            })
            .collect();
        let heads = layout.heads.iter().map(|h| lin(*h)).collect();
        BoundParams {
            vars,
            embed,
            blocks,
            heads,
        }
    }

    /// Head applied to block `p`'s embeddings. Without auxiliary training
    /// every block is read through the final head.
    fn head_for_block(&self, bound: &BoundParams, p: usize) -> LinearVars {
        match (self.config.head_sharing, self.config.aux_mode) {
            (HeadSharing::PerBlock, AuxMode::Shared | AuxMode::Indiv) => bound.heads[p - 1],
            _ => bound.final_head(),
        }
    }

    /// Records the forward pass. Posteriors for blocks below `P` are produced
    /// when auxiliary losses are enabled or `want_all_blocks` is set.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<R>,
        bound: &BoundParams,
        x: Var,
        mut dropout: Option<&mut Dropout<'_>>,
        want_all_blocks: bool,
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        let width = tape.value(x).cols();
        if width != cfg.input_dim || tape.value(x).shape().len() != 2 {
            return Err(Error::dim(
                "embed_input",
                tape.value(x).shape(),
                &[cfg.input_dim],
            ));
        }
        let all = want_all_blocks || cfg.aux_mode != AuxMode::None;
        let mut embeddings = Vec::with_capacity(cfg.blocks + 1);
        let mut posteriors = Vec::with_capacity(cfg.blocks);
        let mut e = embed_input(tape, x, bound.embed)?;
        embeddings.push(e);
        for p in 1..=cfg.blocks {
            let bp = bound.block(p);
            e = if cfg.residual {
                residual_block(tape, e, &bp, cfg.heads, dropout.as_deref_mut())?
            } else {
                encoder_block(tape, e, &bp, cfg.heads, dropout.as_deref_mut())?
            };
            embeddings.push(e);
            posteriors.push(if all || p == cfg.blocks {
                Some(head(tape, e, self.head_for_block(bound, p))?)
            } else {
                None
            });
        }
        Ok(ForwardVars {
            embeddings,
            posteriors,
        })
    }

    /// Evaluation forward pass (no dropout, no gradients).
    pub fn forward(
        &self,
        x: &Tensor<R>,
        want_all_blocks: bool,
    ) -> Result<(EmbeddingSet<R>, PosteriorSet<R>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward_on_tape(&mut tape, &bound, xv, None, want_all_blocks)?;
        let layers = out
            .embeddings
            .iter()
            .map(|v| tape.value(*v).clone())
            .collect();
        let blocks = out
            .posteriors
            .iter()
            .map(|v| v.map(|v| tape.value(v).clone()))
            .collect();
        Ok((EmbeddingSet { layers }, PosteriorSet { blocks }))
    }

    /// Posteriors of every block read through the appropriate head, used
    /// by the per-block probe.
    pub fn all_block_posteriors(&self, x: &Tensor<R>) -> Result<Vec<Tensor<R>>> {
        let (_, post) = self.forward(x, true)?;
        Ok(post.blocks.into_iter().flatten().collect())
    }
}
