//! Contextual token embeddings `[T,D]`: a lookup table, learned positions
//! and an optional stack of post-norm self-attention layers.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::params::{Bound, ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::text::{Vocabulary, PAD};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingKind {
    /// Frozen table, typically read from a vector file; no positions.
    Static,
    /// Trainable table plus learned positions, no attention layers.
    Trainable,
    /// Trainable table, learned positions and `layers` attention layers.
    Transformer,
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingKind::Static => "static",
            EmbeddingKind::Trainable => "trainable",
            EmbeddingKind::Transformer => "transformer",
        })
    }
}

impl FromStr for EmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Self::Static),
            "trainable" => Ok(Self::Trainable),
            "transformer" => Ok(Self::Transformer),
            _ => Err(Error::Config(format!("unknown embedding kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub kind: EmbeddingKind,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EmbeddingKind::Transformer,
            layers: 2,
            heads: 4,
            dim: 128,
            ffn_dim: 512,
            max_len: 128,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if self.max_len < 2 {
            return Err(Error::Config(format!("max_len {} < 2", self.max_len)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("encoder dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Attention layers actually built for this kind.
    pub fn effective_layers(&self) -> usize {
        match self.kind {
            EmbeddingKind::Transformer => self.layers,
            _ => 0,
        }
    }
}

/// `table[ids[t]] + positional[t]`. PAD lookups never receive gradient.
pub fn embed(g: &mut Graph, ids: &[usize], table: Var, positional: Option<Var>) -> Result<Var> {
    let x = g.gather_rows(table, ids, Some(PAD))?;
    match positional {
        None => Ok(x),
        Some(pos) => {
            let max_len = g.shape(pos)[0];
            if ids.len() > max_len {
                return Err(shape_err(format!("sequence of {} ids exceeds max_len {max_len}", ids.len())));
            }
            let p = g.slice_rows(pos, 0, ids.len())?;
            g.add(x, p)
        }
    }
}

/// Graph handles of one self-attention block (`x·W + b` convention). Keys
/// carry no bias: a key bias shifts every score in a row equally and
/// cancels in the softmax.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Multi-head scaled dot-product self-attention over `x[T,D]`. Key
/// positions at or beyond `valid_len` are masked out. Returns the output
/// and the per-head attention weight matrices `[T,T]`.
pub fn attention(g: &mut Graph, x: Var, p: &AttentionVars, heads: usize, valid_len: usize) -> Result<(Var, Vec<Var>)> {
    let (t_len, d) = g.value(x).dims2()?;
    if heads == 0 || d % heads != 0 {
        return Err(shape_err(format!("attention: width {d} not divisible by {heads} heads")));
    }
    if valid_len == 0 || valid_len > t_len {
        return Err(shape_err(format!("attention: valid length {valid_len} outside 1..={t_len}")));
    }
    let dh = d / heads;
    let affine = |g: &mut Graph, w: Var, b: Var| -> Result<Var> {
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    };
    let q = affine(g, p.wq, p.bq)?;
    let k = g.matmul(x, p.wk)?;
    let v = affine(g, p.wv, p.bv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let probs = g.masked_softmax(scores, valid_len)?;
        outs.push(g.matmul(probs, vh)?);
        weights.push(probs);
    }
    let joined = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    let y = g.matmul(joined, p.wo)?;
    Ok((g.add_bias(y, p.bo)?, weights))
}

#[derive(Debug, Clone)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new(params: &mut ParamSet, name: &str, input: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            w: params.add(format!("{name}.w"), Tensor::glorot(&[input, output], input, output, rng)),
            b: params.add(format!("{name}.b"), Tensor::zeros(&[output])),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        g.add_bias(y, p[self.b])
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(params: &mut ParamSet, name: &str, d: usize) -> Self {
        Self {
            gain: params.add(format!("{name}.gain"), Tensor::filled(&[d], 1.0)),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gain], p[self.bias], LAYER_NORM_EPS)
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    q: Dense,
    wk: ParamId,
    v: Dense,
    o: Dense,
    norm1: Norm,
    ff1: Dense,
    ff2: Dense,
    norm2: Norm,
}

impl EncoderLayer {
    fn new(params: &mut ParamSet, prefix: &str, cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let d = cfg.dim;
        Self {
            q: Dense::new(params, &format!("{prefix}.attn.q"), d, d, rng),
            wk: params.add(format!("{prefix}.attn.k.w"), Tensor::glorot(&[d, d], d, d, rng)),
            v: Dense::new(params, &format!("{prefix}.attn.v"), d, d, rng),
            o: Dense::new(params, &format!("{prefix}.attn.o"), d, d, rng),
            norm1: Norm::new(params, &format!("{prefix}.norm1"), d),
            ff1: Dense::new(params, &format!("{prefix}.ff1"), d, cfg.ffn_dim, rng),
            ff2: Dense::new(params, &format!("{prefix}.ff2"), cfg.ffn_dim, d, rng),
            norm2: Norm::new(params, &format!("{prefix}.norm2"), d),
        }
    }

    fn attention_vars(&self, p: &Bound) -> AttentionVars {
        AttentionVars {
            wq: p[self.q.w],
            bq: p[self.q.b],
            wk: p[self.wk],
            wv: p[self.v.w],
            bv: p[self.v.b],
            wo: p[self.o.w],
            bo: p[self.o.b],
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        cfg: &EncoderConfig,
        len: usize,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        let (a, _) = attention(g, x, &self.attention_vars(p), cfg.heads, len)?;
        let a = g.dropout(a, cfg.dropout, mode, rng)?;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, p, x)?;
        let f = self.ff1.forward(g, p, x)?;
        let f = g.relu(f);
        let f = self.ff2.forward(g, p, f)?;
        let f = g.dropout(f, cfg.dropout, mode, rng)?;
        let x = g.add(x, f)?;
        self.norm2.forward(g, p, x)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    table: ParamId,
    positional: Option<ParamId>,
    layers: Vec<EncoderLayer>,
}

impl Encoder {
    /// Allocates encoder parameters. `table` overrides the initial
    /// embedding matrix and is required for [`EmbeddingKind::Static`].
    pub fn new(
        cfg: &EncoderConfig,
        vocab_size: usize,
        table: Option<Tensor>,
        params: &mut ParamSet,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let table = match table {
            Some(t) => {
                if t.shape() != [vocab_size, d] {
                    return Err(shape_err(format!(
                        "embedding table {:?} does not match [{vocab_size}, {d}]",
                        t.shape()
                    )));
                }
                t
            }
            None if cfg.kind == EmbeddingKind::Static => {
                return Err(Error::Config("static embeddings need a vector file".into()))
            }
            None => Tensor::glorot(&[vocab_size, d], vocab_size, d, rng),
        };
        let table = zero_pad_row(table);
        let table = if cfg.kind == EmbeddingKind::Static {
            params.add_frozen("embed.table", table)
        } else {
            params.add("embed.table", table)
        };
        let positional = (cfg.kind != EmbeddingKind::Static)
            .then(|| params.add("embed.pos", Tensor::glorot(&[cfg.max_len, d], cfg.max_len, d, rng)));
        let layers =
            (0..cfg.effective_layers()).map(|l| EncoderLayer::new(params, &format!("enc.l{l}"), cfg, rng)).collect();
        Ok(Self { config: cfg.clone(), table, positional, layers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn table(&self) -> ParamId {
        self.table
    }

    pub fn positional(&self) -> Option<ParamId> {
        self.positional
    }

    /// Embeds `ids` and runs the attention stack; positions `>= len` are
    /// padding and are masked as attention keys.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        ids: &[usize],
        len: usize,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        if ids.len() > self.config.max_len {
            return Err(shape_err(format!("sequence of {} ids exceeds max_len {}", ids.len(), self.config.max_len)));
        }
        let mut x = embed(g, ids, p[self.table], self.positional.map(|id| p[id]))?;
        for layer in &self.layers {
            x = layer.forward(g, p, x, &self.config, len, mode, rng)?;
        }
        Ok(x)
    }
}

fn zero_pad_row(mut t: Tensor) -> Tensor {
    let d = t.shape()[1];
    t.data_mut()[PAD * d..(PAD + 1) * d].fill(0.0);
    t
}

/// An embedding matrix read from a vector file, plus the vocabulary tokens
/// the file did not cover.
#[derive(Debug, Clone)]
pub struct StaticVectors {
    pub table: Tensor,
    pub missing: Vec<char>,
}

impl StaticVectors {
    pub fn coverage(&self, vocab: &Vocabulary) -> f64 {
        let total = vocab.chars().len();
        if total == 0 {
            return 1.0;
        }
        (total - self.missing.len()) as f64 / total as f64
    }
}

/// Parses `<token> <v1> … <vD>` lines. Tokens that are not single
/// vocabulary characters are ignored; vocabulary entries missing from the
/// file keep a Glorot draw. The PAD row is always zero.
pub fn parse_static_vectors(content: &str, vocab: &Vocabulary, rng: &mut Rng) -> Result<StaticVectors> {
    let mut dim = None;
    let mut rows: HashMap<char, Vec<f64>> = HashMap::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values = fields
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse { line: line_no, msg: format!("bad value {f:?}") })
            })
            .collect::<Result<Vec<f64>>>()?;
        match dim {
            None if values.is_empty() => return Err(Error::Parse { line: line_no, msg: "no vector values".into() }),
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::Parse { line: line_no, msg: format!("expected {d} values, found {}", values.len()) })
            }
            Some(_) => {}
        }
        let mut chars = token.chars();
        if let (Some(c), None) = (chars.next(), chars.next()) {
            rows.entry(c).or_insert(values);
        }
    }
    let d = dim.ok_or_else(|| Error::Parse { line: 0, msg: "empty vector file".into() })?;
    let v = vocab.len();
    let mut table = Tensor::glorot(&[v, d], v, d, rng);
    let mut missing = Vec::new();
    for (i, &c) in vocab.chars().iter().enumerate() {
        match rows.get(&c) {
            Some(row) => {
                let id = i + crate::text::RESERVED;
                table.data_mut()[id * d..(id + 1) * d].copy_from_slice(row);
            }
            None => missing.push(c),
        }
    }
    Ok(StaticVectors { table: zero_pad_row(table), missing })
}

pub fn load_static_vectors(path: impl AsRef<Path>, vocab: &Vocabulary, rng: &mut Rng) -> Result<StaticVectors> {
    let content = fs::read_to_string(path)?;
    parse_static_vectors(&content, vocab, rng)
}
