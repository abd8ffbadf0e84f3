//! Gradient-check suites behind `textheads gradcheck`: one per primitive
//! operation and one full encoder+head model per architecture.

use crate::config::TrainConfig;
use crate::encoder::{attention, AttentionVars, EmbeddingKind, EncoderConfig, LAYER_NORM_EPS};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport, DEFAULT_EPS};
use crate::graph::{Activation, Graph, Mode, Padding, Var};
use crate::heads::{HeadKind, HeadSettings};
use crate::model::Model;
use crate::params::Bound;
use crate::recurrent::{bilstm, lstm_cell, LstmVars};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::text::{build_vocab, Dataset, Example};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub report: GradCheckReport,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.passes(TOLERANCE)
    }
}

type LossFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    params: Vec<Tensor>,
    f: LossFn,
}

/// Reduces `y` to a scalar through fixed pseudo-random weights so every
/// output coordinate contributes.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(Tensor::uniform(&shape, 1.0, &mut Rng::new(seed)));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn case(name: &'static str, params: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Case {
    Case { name, params, f: Box::new(f) }
}

fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = Rng::derive(seed, &[7]);
    let mut u = |shape: &[usize]| Tensor::uniform(shape, 1.0, &mut rng);
    vec![
        case("matmul", vec![u(&[3, 4]), u(&[4, 2])], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 1)
        }),
        case("transpose", vec![u(&[3, 2])], |g, v| {
            let y = g.transpose(v[0])?;
            project(g, y, 2)
        }),
        case("add", vec![u(&[2, 3]), u(&[2, 3])], |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, 3)
        }),
        case("add_bias", vec![u(&[4, 3]), u(&[3])], |g, v| {
            let y = g.add_bias(v[0], v[1])?;
            project(g, y, 4)
        }),
        case("mul", vec![u(&[2, 3]), u(&[2, 3])], |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, 5)
        }),
        case("scale", vec![u(&[5])], |g, v| {
            let y = g.scale(v[0], -1.7);
            project(g, y, 6)
        }),
        case("sum", vec![u(&[2, 2])], |g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.sum(y))
        }),
        case("relu", vec![u(&[3, 4])], |g, v| {
            let y = g.activation(Activation::Relu, v[0]);
            project(g, y, 8)
        }),
        case("tanh", vec![u(&[3, 4])], |g, v| {
            let y = g.activation(Activation::Tanh, v[0]);
            project(g, y, 9)
        }),
        case("sigmoid", vec![u(&[3, 4])], |g, v| {
            let y = g.activation(Activation::Sigmoid, v[0]);
            project(g, y, 10)
        }),
        case("concat", vec![u(&[3, 2]), u(&[3, 4]), u(&[2, 6])], |g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            let y = g.concat(&[y, v[2]], 0)?;
            project(g, y, 11)
        }),
        case("slice", vec![u(&[4, 5])], |g, v| {
            let a = g.slice_cols(v[0], 1, 3)?;
            let b = g.slice_rows(a, 2, 2)?;
            let c = g.reshape(b, &[6])?;
            project(g, c, 12)
        }),
        case("gather_rows", vec![u(&[6, 3])], |g, v| {
            let y = g.gather_rows(v[0], &[2, 5, 2, 0, 1], Some(0))?;
            project(g, y, 13)
        }),
        case("conv1d_valid", vec![u(&[7, 3]), u(&[4, 3, 3]), u(&[4])], |g, v| {
            let y = g.conv1d(v[0], v[1], v[2], Padding::Valid)?;
            project(g, y, 14)
        }),
        case("conv1d_same", vec![u(&[6, 2]), u(&[3, 4, 2]), u(&[3])], |g, v| {
            let y = g.conv1d(v[0], v[1], v[2], Padding::Same)?;
            project(g, y, 15)
        }),
        case("max_over_time", vec![u(&[7, 5])], |g, v| {
            let y = g.max_over_time(v[0])?;
            project(g, y, 16)
        }),
        case("max_pool_1d", vec![u(&[9, 3])], |g, v| {
            let y = g.max_pool_1d(v[0], 3, 2)?;
            project(g, y, 17)
        }),
        case("dropout", vec![u(&[4, 4])], |g, v| {
            let y = g.dropout(v[0], 0.3, Mode::Train, &mut Rng::new(99))?;
            project(g, y, 18)
        }),
        case("masked_softmax", vec![u(&[3, 5])], |g, v| {
            let y = g.masked_softmax(v[0], 4)?;
            project(g, y, 19)
        }),
        case("layer_norm", vec![u(&[3, 6]), u(&[6]), u(&[6])], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)?;
            project(g, y, 20)
        }),
        case("softmax_cross_entropy", vec![u(&[4, 3])], |g, v| g.softmax_cross_entropy(v[0], &[0, 2, 1, 2])),
        case("lstm_cell", vec![u(&[1, 3]), u(&[1, 2]), u(&[1, 2]), u(&[3, 8]), u(&[2, 8]), u(&[8])], |g, v| {
            let (h, c) = lstm_cell(g, v[0], v[1], v[2], LstmVars { w: v[3], u: v[4], b: v[5] })?;
            let y = g.concat(&[h, c], 1)?;
            project(g, y, 22)
        }),
        case(
            "bilstm",
            vec![
                u(&[4, 3]),
                u(&[3, 8]),
                u(&[2, 8]),
                u(&[8]),
                u(&[3, 8]),
                u(&[2, 8]),
                u(&[8]),
                u(&[4, 8]),
                u(&[2, 8]),
                u(&[8]),
                u(&[4, 8]),
                u(&[2, 8]),
                u(&[8]),
            ],
            |g, v| {
                let lv = |i: usize| LstmVars { w: v[i], u: v[i + 1], b: v[i + 2] };
                let layers = [(lv(1), lv(4)), (lv(7), lv(10))];
                let (out, fin) = bilstm(g, v[0], &layers, 0.0, Mode::Eval, &mut Rng::new(0))?;
                let a = project(g, out, 23)?;
                let b = project(g, fin, 24)?;
                g.add(a, b)
            },
        ),
        case(
            "attention",
            vec![u(&[5, 4]), u(&[4, 4]), u(&[4]), u(&[4, 4]), u(&[4, 4]), u(&[4]), u(&[4, 4]), u(&[4])],
            |g, v| {
                let p = AttentionVars { wq: v[1], bq: v[2], wk: v[3], wv: v[4], bv: v[5], wo: v[6], bo: v[7] };
                let (y, _) = attention(g, v[0], &p, 2, 4)?;
                project(g, y, 25)
            },
        ),
    ]
}

/// Grad-checks every primitive at random points.
pub fn ops_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    op_cases(seed)
        .into_iter()
        .map(|c| {
            let report = grad_check(&c.f, &c.params, DEFAULT_EPS)?;
            Ok(CheckOutcome { name: c.name.to_string(), report })
        })
        .collect()
}

/// Desk-scale configuration used for the full-model checks: encoder width
/// 16, hidden 8, channels 8, sequence length 12.
pub fn desk_config(head: HeadKind, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        epochs: 1,
        learning_rate: 1e-3,
        seed,
        head,
        head_settings: HeadSettings {
            kernel_sizes: vec![2, 3, 4],
            kernels_per_size: 8,
            layers: 2,
            hidden: 8,
            channels: 8,
            kernel: 3,
            pool_window: 3,
            pool_stride: 2,
            dropout: 0.1,
        },
        encoder: EncoderConfig {
            kind: EmbeddingKind::Transformer,
            layers: 1,
            heads: 2,
            dim: 16,
            ffn_dim: 32,
            max_len: 12,
            dropout: 0.1,
        },
        vectors: None,
    }
}

fn check_model(head: HeadKind, seed: u64) -> Result<GradCheckReport> {
    let texts = [(1, "某某实施了诈骗行为"), (0, "双方签订合同")];
    let ds = Dataset::new(texts.iter().map(|&(l, t)| Example { label: l, text: t.into() }).collect());
    let model = Model::new(&desk_config(head, seed), build_vocab(&ds, 1))?;
    let encoded: Vec<_> = ds.iter().map(|e| model.encode(&e.text, e.label)).collect::<Result<_>>()?;
    let params: Vec<Tensor> = model.params.iter().map(|(_, p)| (*p.value).clone()).collect();
    grad_check(
        |g, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            let mut rng = Rng::new(0);
            let logits = encoded
                .iter()
                .map(|e| model.forward(g, &bound, &e.ids, e.len, Mode::Eval, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let stacked = g.concat(&logits, 0)?;
            let targets: Vec<usize> = encoded.iter().map(|e| e.label).collect();
            g.softmax_cross_entropy(stacked, &targets)
        },
        &params,
        DEFAULT_EPS,
    )
}

/// Grad-checks encoder+head end to end for every architecture.
pub fn model_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    HeadKind::ALL
        .into_iter()
        .map(|k| Ok(CheckOutcome { name: format!("model/{k}"), report: check_model(k, seed)? }))
        .collect()
}

/// A doubling op whose backward rule has the wrong sign; a working
/// checker must flag it with relative error 2.
pub fn canary(seed: u64) -> Result<CheckOutcome> {
    let x = Tensor::uniform(&[6], 1.0, &mut Rng::new(seed));
    let report = grad_check(
        |g, v| {
            let doubled = Tensor::vector(g.value(v[0]).data().iter().map(|a| 2.0 * a).collect());
            let y = g.custom(&[v[0]], doubled, Box::new(|_, _, up| vec![up.iter().map(|u| -2.0 * u).collect()]));
            project(g, y, 26)
        },
        &[x],
        DEFAULT_EPS,
    )?;
    Ok(CheckOutcome { name: "canary/sign-flip".into(), report })
}
