//! Encoder plus head, bound to a vocabulary.

use crate::config::TrainConfig;
use crate::encoder::{load_static_vectors, EmbeddingKind, Encoder};
use crate::error::{Error, Result};
use crate::graph::{softmax, Graph, Mode, Var};
use crate::heads::{build_head, Head, HeadKind};
use crate::params::{Bound, ParamSet};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::text::{encode_pad, tokenize, Vocabulary};

/// A text encoded for the model: padded ids, true length and label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub len: usize,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub params: ParamSet,
    pub encoder: Encoder,
    pub head: Head,
}

impl Model {
    /// Fresh model; the embedding table comes from `config.vectors` when set.
    pub fn new(config: &TrainConfig, vocab: Vocabulary) -> Result<Self> {
        let mut rng = Rng::derive(config.seed, &[0]);
        let table = match &config.vectors {
            Some(path) => {
                let sv = load_static_vectors(path, &vocab, &mut rng)?;
                if sv.table.shape()[1] != config.encoder.dim {
                    return Err(Error::Config(format!(
                        "vector file has width {}, config dim is {}",
                        sv.table.shape()[1],
                        config.encoder.dim
                    )));
                }
                Some(sv.table)
            }
            None => None,
        };
        Self::with_table(config, vocab, table, &mut rng)
    }

    pub fn with_table(config: &TrainConfig, vocab: Vocabulary, table: Option<Tensor>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let encoder = Encoder::new(&config.encoder, vocab.len(), table, &mut params, rng)?;
        let head = build_head(&config.head_config(), encoder.dim(), &mut params, rng)?;
        Ok(Self { config: config.clone(), vocab, params, encoder, head })
    }

    /// Same layout as [`Model::new`] with placeholder values; used when the
    /// values are about to be overwritten from a checkpoint.
    pub(crate) fn skeleton(config: &TrainConfig, vocab: Vocabulary) -> Result<Self> {
        let table =
            (config.encoder.kind == EmbeddingKind::Static).then(|| Tensor::zeros(&[vocab.len(), config.encoder.dim]));
        Self::with_table(config, vocab, table, &mut Rng::new(0))
    }

    pub fn kind(&self) -> HeadKind {
        self.head.kind()
    }

    pub fn max_len(&self) -> usize {
        self.config.encoder.max_len
    }

    pub fn encode_text(&self, text: &str) -> Result<(Vec<usize>, usize)> {
        encode_pad(&tokenize(text), self.max_len(), &self.vocab)
    }

    pub fn encode(&self, text: &str, label: usize) -> Result<Encoded> {
        let (ids, len) = self.encode_text(text)?;
        Ok(Encoded { ids, len, label })
    }

    /// Records the forward pass for one sequence; returns logits `[1,2]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        ids: &[usize],
        len: usize,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        let emb = self.encoder.forward(g, p, ids, len, mode, rng)?;
        self.head.forward(g, p, emb, len, mode, rng)
    }

    /// Eval-mode logits.
    pub fn logits(&self, ids: &[usize], len: usize) -> Result<[f64; 2]> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let out = self.forward(&mut g, &p, ids, len, Mode::Eval, &mut Rng::new(0))?;
        let d = g.value(out).data();
        if !d.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite logits {d:?}")));
        }
        Ok([d[0], d[1]])
    }

    /// Predicted label and its softmax probability.
    pub fn predict(&self, text: &str) -> Result<(usize, f64)> {
        let (ids, len) = self.encode_text(text)?;
        let probs = softmax(&self.logits(&ids, len)?);
        let label = argmax(&probs);
        Ok((label, probs[label]))
    }
}

/// Index of the largest value, first on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
