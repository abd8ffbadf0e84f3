//! The five classification heads. Each maps encoder output `emb[T,D]` to
//! two logits `[1,2]` (class 0 legal, class 1 illegal).

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Mode, Padding, Var};
use crate::params::{Bound, ParamId, ParamSet};
use crate::recurrent::BiLstm;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Linear,
    TextCnn,
    BiLstm,
    Rcnn,
    Dpcnn,
}

impl HeadKind {
    pub const ALL: [HeadKind; 5] =
        [HeadKind::Linear, HeadKind::TextCnn, HeadKind::BiLstm, HeadKind::Dpcnn, HeadKind::Rcnn];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Linear => "linear",
            HeadKind::TextCnn => "textcnn",
            HeadKind::BiLstm => "bilstm",
            HeadKind::Rcnn => "rcnn",
            HeadKind::Dpcnn => "dpcnn",
        }
    }

    /// Model label used in benchmark tables.
    pub fn table_name(self) -> &'static str {
        match self {
            HeadKind::Linear => "Baseline",
            HeadKind::TextCnn => "CNN",
            HeadKind::BiLstm => "RNN",
            HeadKind::Rcnn => "RCNN",
            HeadKind::Dpcnn => "DPCNN",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| Error::Config(format!("unknown head {s:?}")))
    }
}

/// Head hyperparameters for every architecture; only the fields of the
/// selected kind are used. Defaults are the full-size settings.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSettings {
    pub kernel_sizes: Vec<usize>,
    pub kernels_per_size: usize,
    pub layers: usize,
    pub hidden: usize,
    pub channels: usize,
    pub kernel: usize,
    pub pool_window: usize,
    pub pool_stride: usize,
    pub dropout: f64,
}

impl Default for HeadSettings {
    fn default() -> Self {
        Self {
            kernel_sizes: vec![2, 3, 4],
            kernels_per_size: 100,
            layers: 2,
            hidden: 768,
            channels: 250,
            kernel: 3,
            pool_window: 3,
            pool_stride: 2,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadConfig {
    Linear,
    TextCnn { kernel_sizes: Vec<usize>, kernels_per_size: usize, dropout: f64 },
    BiLstm { layers: usize, hidden: usize, dropout: f64 },
    Rcnn { layers: usize, hidden: usize, dropout: f64 },
    Dpcnn { channels: usize, kernel: usize, pool_window: usize, pool_stride: usize, dropout: f64 },
}

impl HeadConfig {
    pub fn from_settings(kind: HeadKind, s: &HeadSettings) -> Self {
        match kind {
            HeadKind::Linear => HeadConfig::Linear,
            HeadKind::TextCnn => HeadConfig::TextCnn {
                kernel_sizes: s.kernel_sizes.clone(),
                kernels_per_size: s.kernels_per_size,
                dropout: s.dropout,
            },
            HeadKind::BiLstm => HeadConfig::BiLstm { layers: s.layers, hidden: s.hidden, dropout: s.dropout },
            HeadKind::Rcnn => HeadConfig::Rcnn { layers: s.layers, hidden: s.hidden, dropout: s.dropout },
            HeadKind::Dpcnn => HeadConfig::Dpcnn {
                channels: s.channels,
                kernel: s.kernel,
                pool_window: s.pool_window,
                pool_stride: s.pool_stride,
                dropout: s.dropout,
            },
        }
    }

    /// Full-size defaults for `kind`.
    pub fn full_size(kind: HeadKind) -> Self {
        Self::from_settings(kind, &HeadSettings::default())
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            HeadConfig::Linear => HeadKind::Linear,
            HeadConfig::TextCnn { .. } => HeadKind::TextCnn,
            HeadConfig::BiLstm { .. } => HeadKind::BiLstm,
            HeadConfig::Rcnn { .. } => HeadKind::Rcnn,
            HeadConfig::Dpcnn { .. } => HeadKind::Dpcnn,
        }
    }

    /// Shortest padded sequence the head accepts.
    pub fn min_len(&self) -> usize {
        match self {
            HeadConfig::TextCnn { kernel_sizes, .. } => kernel_sizes.iter().copied().max().unwrap_or(1),
            HeadConfig::Dpcnn { pool_window, .. } => *pool_window,
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        let rate = |p: f64| {
            if (0.0..1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("dropout {p} outside [0, 1)")))
            }
        };
        match self {
            HeadConfig::Linear => Ok(()),
            HeadConfig::TextCnn { kernel_sizes, kernels_per_size, dropout } => {
                if kernel_sizes.is_empty() {
                    return Err(Error::Config("kernel_sizes is empty".into()));
                }
                for &w in kernel_sizes {
                    positive("kernel size", w)?;
                }
                positive("kernels_per_size", *kernels_per_size)?;
                rate(*dropout)
            }
            HeadConfig::BiLstm { layers, hidden, dropout } | HeadConfig::Rcnn { layers, hidden, dropout } => {
                positive("layers", *layers)?;
                positive("hidden", *hidden)?;
                rate(*dropout)
            }
            HeadConfig::Dpcnn { channels, kernel, pool_window, pool_stride, dropout } => {
                positive("channels", *channels)?;
                positive("kernel", *kernel)?;
                positive("pool_stride", *pool_stride)?;
                if *pool_window < 2 {
                    return Err(Error::Config("pool_window must be at least 2".into()));
                }
                rate(*dropout)
            }
        }
    }
}

/// Fully connected output layer `x[1,in]·W[in,2] + b`.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub w: ParamId,
    pub b: ParamId,
}

impl Classifier {
    fn new(params: &mut ParamSet, input: usize, rng: &mut Rng) -> Self {
        Self {
            w: params.add("head.fc.w", Tensor::glorot(&[input, NUM_CLASSES], input, NUM_CLASSES, rng)),
            b: params.add("head.fc.b", Tensor::zeros(&[NUM_CLASSES])),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, feature: Var) -> Result<Var> {
        let n = g.value(feature).len();
        let x = if g.shape(feature) == [1, n] { feature } else { g.reshape(feature, &[1, n])? };
        let y = g.matmul(x, p[self.w])?;
        g.add_bias(y, p[self.b])
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

const DPCNN_BLOCK_GAIN: f64 = 0.1;

impl Conv {
    fn new(params: &mut ParamSet, name: &str, kernels: usize, width: usize, input: usize, rng: &mut Rng) -> Self {
        Self::with_gain(params, name, kernels, width, input, 1.0, rng)
    }

    fn with_gain(
        params: &mut ParamSet,
        name: &str,
        kernels: usize,
        width: usize,
        input: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let mut w = Tensor::glorot(&[kernels, width, input], width * input, width * kernels, rng);
        w.data_mut().iter_mut().for_each(|v| *v *= gain);
        Self { w: params.add(format!("{name}.w"), w), b: params.add(format!("{name}.b"), Tensor::zeros(&[kernels])) }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var, padding: Padding) -> Result<Var> {
        g.conv1d(x, p[self.w], p[self.b], padding)
    }
}

#[derive(Debug, Clone)]
pub struct LinearHead {
    pub fc: Classifier,
}

impl LinearHead {
    /// Logits from the CLS position only.
    pub fn forward(&self, g: &mut Graph, p: &Bound, emb: Var) -> Result<Var> {
        let cls = g.slice_rows(emb, 0, 1)?;
        self.fc.forward(g, p, cls)
    }
}

#[derive(Debug, Clone)]
pub struct TextCnnHead {
    pub convs: Vec<(usize, Conv)>,
    pub dropout: f64,
    pub fc: Classifier,
}

impl TextCnnHead {
    /// Per kernel width: valid conv, relu, max over time; the pooled maps
    /// are concatenated before dropout and the classifier.
    pub fn forward(&self, g: &mut Graph, p: &Bound, emb: Var, mode: Mode, rng: &mut Rng) -> Result<Var> {
        let feature = self.features(g, p, emb)?;
        let feature = g.dropout(feature, self.dropout, mode, rng)?;
        self.fc.forward(g, p, feature)
    }

    /// Concatenated max-over-time features, `[#widths · kernels]`.
    pub fn features(&self, g: &mut Graph, p: &Bound, emb: Var) -> Result<Var> {
        let t_len = g.shape(emb)[0];
        let widest = self.convs.iter().map(|(w, _)| *w).max().unwrap_or(1);
        if t_len < widest {
            return Err(Error::SequenceTooShort { len: t_len, min: widest });
        }
        let mut pooled = Vec::with_capacity(self.convs.len());
        for (_, conv) in &self.convs {
            let c = conv.forward(g, p, emb, Padding::Valid)?;
            let c = g.relu(c);
            pooled.push(g.max_over_time(c)?);
        }
        g.concat(&pooled, 0)
    }
}

#[derive(Debug, Clone)]
pub struct BiLstmHead {
    pub lstm: BiLstm,
    pub dropout: f64,
    pub fc: Classifier,
}

impl BiLstmHead {
    pub fn forward(&self, g: &mut Graph, p: &Bound, emb: Var, len: usize, mode: Mode, rng: &mut Rng) -> Result<Var> {
        let seq = true_prefix(g, emb, len)?;
        let (_, fin) = self.lstm.forward(g, p, seq, self.dropout, mode, rng)?;
        let fin = g.dropout(fin, self.dropout, mode, rng)?;
        self.fc.forward(g, p, fin)
    }
}

#[derive(Debug, Clone)]
pub struct RcnnHead {
    pub lstm: BiLstm,
    pub dropout: f64,
    pub fc: Classifier,
}

impl RcnnHead {
    /// BiLSTM outputs joined with the embeddings, relu, max over time.
    pub fn forward(&self, g: &mut Graph, p: &Bound, emb: Var, len: usize, mode: Mode, rng: &mut Rng) -> Result<Var> {
        let seq = true_prefix(g, emb, len)?;
        let (outputs, _) = self.lstm.forward(g, p, seq, self.dropout, mode, rng)?;
        let joined = g.concat(&[outputs, seq], 1)?;
        let act = g.relu(joined);
        let pooled = g.max_over_time(act)?;
        let pooled = g.dropout(pooled, self.dropout, mode, rng)?;
        self.fc.forward(g, p, pooled)
    }
}

#[derive(Debug, Clone)]
pub struct DpcnnHead {
    pub region: Conv,
    pub conv: Conv,
    pub pool_window: usize,
    pub pool_stride: usize,
    pub dropout: f64,
    pub fc: Classifier,
}

impl DpcnnHead {
    pub fn forward(&self, g: &mut Graph, p: &Bound, emb: Var, mode: Mode, rng: &mut Rng) -> Result<Var> {
        self.forward_with_schedule(g, p, emb, mode, rng).map(|(logits, _)| logits)
    }

    /// Also returns the sequence length after every pooling block.
    pub fn forward_with_schedule(
        &self,
        g: &mut Graph,
        p: &Bound,
        emb: Var,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(Var, Vec<usize>)> {
        let t_len = g.shape(emb)[0];
        if t_len < self.pool_window {
            return Err(Error::SequenceTooShort { len: t_len, min: self.pool_window });
        }
        let region = self.region.forward(g, p, emb, Padding::Same)?;
        let y = self.conv_pair(g, p, region)?;
        let mut x = g.add(region, y)?;
        let mut schedule = Vec::new();
        while g.shape(x)[0] >= self.pool_window {
            let pooled = g.max_pool_1d(x, self.pool_window, self.pool_stride)?;
            let y = self.conv_pair(g, p, pooled)?;
            x = g.add(pooled, y)?;
            schedule.push(g.shape(x)[0]);
        }
        let feature = g.max_over_time(x)?;
        let feature = g.dropout(feature, self.dropout, mode, rng)?;
        Ok((self.fc.forward(g, p, feature)?, schedule))
    }

    /// Two rounds of relu then same-padded convolution.
    fn conv_pair(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut y = x;
        for _ in 0..2 {
            y = g.relu(y);
            y = self.conv.forward(g, p, y, Padding::Same)?;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub enum Head {
    Linear(LinearHead),
    TextCnn(TextCnnHead),
    BiLstm(BiLstmHead),
    Rcnn(RcnnHead),
    Dpcnn(DpcnnHead),
}

/// Allocates and initializes head parameters for encoder width `d`.
pub fn build_head(cfg: &HeadConfig, d: usize, params: &mut ParamSet, rng: &mut Rng) -> Result<Head> {
    cfg.validate()?;
    if d == 0 {
        return Err(shape_err("embedding width must be positive"));
    }
    Ok(match cfg {
        HeadConfig::Linear => Head::Linear(LinearHead { fc: Classifier::new(params, d, rng) }),
        HeadConfig::TextCnn { kernel_sizes, kernels_per_size, dropout } => {
            let convs = kernel_sizes
                .iter()
                .map(|&w| (w, Conv::new(params, &format!("head.conv{w}"), *kernels_per_size, w, d, rng)))
                .collect();
            let fc = Classifier::new(params, kernel_sizes.len() * kernels_per_size, rng);
            Head::TextCnn(TextCnnHead { convs, dropout: *dropout, fc })
        }
        HeadConfig::BiLstm { layers, hidden, dropout } => {
            let lstm = BiLstm::new(params, "head.lstm", d, *hidden, *layers, rng);
            let fc = Classifier::new(params, 2 * hidden, rng);
            Head::BiLstm(BiLstmHead { lstm, dropout: *dropout, fc })
        }
        HeadConfig::Rcnn { layers, hidden, dropout } => {
            let lstm = BiLstm::new(params, "head.lstm", d, *hidden, *layers, rng);
            let fc = Classifier::new(params, 2 * hidden + d, rng);
            Head::Rcnn(RcnnHead { lstm, dropout: *dropout, fc })
        }
        HeadConfig::Dpcnn { channels, kernel, pool_window, pool_stride, dropout } => {
            let region = Conv::new(params, "head.region", *channels, *kernel, d, rng);
            // The block conv is applied many times on a residual path; a
            // small start keeps the logits out of saturation at init.
            let conv = Conv::with_gain(params, "head.conv", *channels, *kernel, *channels, DPCNN_BLOCK_GAIN, rng);
            let fc = Classifier::new(params, *channels, rng);
            Head::Dpcnn(DpcnnHead {
                region,
                conv,
                pool_window: *pool_window,
                pool_stride: *pool_stride,
                dropout: *dropout,
                fc,
            })
        }
    })
}

impl Head {
    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Linear(_) => HeadKind::Linear,
            Head::TextCnn(_) => HeadKind::TextCnn,
            Head::BiLstm(_) => HeadKind::BiLstm,
            Head::Rcnn(_) => HeadKind::Rcnn,
            Head::Dpcnn(_) => HeadKind::Dpcnn,
        }
    }

    /// Logits `[1,2]` for `emb[T,D]` whose first `len` rows are real tokens.
    pub fn forward(&self, g: &mut Graph, p: &Bound, emb: Var, len: usize, mode: Mode, rng: &mut Rng) -> Result<Var> {
        match self {
            Head::Linear(h) => h.forward(g, p, emb),
            Head::TextCnn(h) => h.forward(g, p, emb, mode, rng),
            Head::BiLstm(h) => h.forward(g, p, emb, len, mode, rng),
            Head::Rcnn(h) => h.forward(g, p, emb, len, mode, rng),
            Head::Dpcnn(h) => h.forward(g, p, emb, mode, rng),
        }
    }
}

fn true_prefix(g: &mut Graph, emb: Var, len: usize) -> Result<Var> {
    let t_len = g.shape(emb)[0];
    if len == 0 || len > t_len {
        return Err(shape_err(format!("true length {len} outside 1..={t_len}")));
    }
    if len == t_len {
        Ok(emb)
    } else {
        g.slice_rows(emb, 0, len)
    }
}
