use textheads::encoder::{
    attention, embed, parse_static_vectors, AttentionVars, EmbeddingKind, Encoder, EncoderConfig,
};
use textheads::gradcheck::{grad_check, DEFAULT_EPS};
use textheads::params::{Bound, ParamSet};
use textheads::text::{build_vocab, PAD};
use textheads::{Dataset, Error, Example, Graph, Mode, Rng, Tensor, Var};

fn identity(d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[d, d]);
    for i in 0..d {
        t.data_mut()[i * d + i] = 1.0;
    }
    t
}

fn row_times(x: &[f64], w: &Tensor, b: &[f64]) -> Vec<f64> {
    let cols = w.shape()[1];
    (0..cols).map(|c| b[c] + x.iter().enumerate().map(|(r, v)| v * w.at(r, c)).sum::<f64>()).collect()
}

struct Weights {
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
}

impl Weights {
    fn random(d: usize, rng: &mut Rng) -> Self {
        Self {
            wq: Tensor::uniform(&[d, d], 1.0, rng),
            bq: Tensor::uniform(&[d], 1.0, rng),
            wk: Tensor::uniform(&[d, d], 1.0, rng),
            wv: Tensor::uniform(&[d, d], 1.0, rng),
            bv: Tensor::uniform(&[d], 1.0, rng),
            wo: Tensor::uniform(&[d, d], 1.0, rng),
            bo: Tensor::uniform(&[d], 1.0, rng),
        }
    }

    fn bind(&self, g: &mut Graph) -> AttentionVars {
        AttentionVars {
            wq: g.constant(self.wq.clone()),
            bq: g.constant(self.bq.clone()),
            wk: g.constant(self.wk.clone()),
            wv: g.constant(self.wv.clone()),
            bv: g.constant(self.bv.clone()),
            wo: g.constant(self.wo.clone()),
            bo: g.constant(self.bo.clone()),
        }
    }
}

fn run_attention(x: &Tensor, w: &Weights, heads: usize, valid: usize) -> (Tensor, Vec<Tensor>) {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars = w.bind(&mut g);
    let (y, probs) = attention(&mut g, xv, &vars, heads, valid).unwrap();
    (g.value(y).clone(), probs.iter().map(|&p| g.value(p).clone()).collect())
}

#[test]
fn zero_query_key_projections_average_the_values() {
    let mut rng = Rng::new(1);
    let (t, d) = (5, 4);
    let mut w = Weights::random(d, &mut rng);
    w.wq = Tensor::zeros(&[d, d]);
    w.bq = Tensor::zeros(&[d]);
    w.wk = Tensor::zeros(&[d, d]);
    w.wo = identity(d);
    w.bo = Tensor::zeros(&[d]);
    let x = Tensor::uniform(&[t, d], 1.0, &mut rng);
    for valid in 1..=t {
        let (y, probs) = run_attention(&x, &w, 2, valid);
        for p in &probs {
            for r in 0..t {
                for c in 0..t {
                    let want = if c < valid { 1.0 / valid as f64 } else { 0.0 };
                    assert!((p.at(r, c) - want).abs() < 1e-15);
                }
            }
        }
        let values: Vec<Vec<f64>> = (0..valid).map(|r| row_times(x.row(r), &w.wv, w.bv.data())).collect();
        let mean: Vec<f64> = (0..d).map(|c| values.iter().map(|v| v[c]).sum::<f64>() / valid as f64).collect();
        for r in 0..t {
            for (c, m) in mean.iter().enumerate() {
                assert!((y.at(r, c) - m).abs() < 1e-12, "valid={valid} row {r}");
            }
        }
    }
}

#[test]
fn single_position_passes_its_value_through() {
    let mut rng = Rng::new(2);
    let w = Weights::random(6, &mut rng);
    let x = Tensor::uniform(&[1, 6], 1.0, &mut rng);
    let (y, probs) = run_attention(&x, &w, 3, 1);
    assert!(probs.iter().all(|p| p.data() == [1.0]));
    let v = row_times(x.row(0), &w.wv, w.bv.data());
    let want = row_times(&v, &w.wo, w.bo.data());
    assert!(y.data().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn attention_rows_sum_to_one() {
    let mut rng = Rng::new(3);
    for trial in 0..50 {
        let t = 1 + rng.below(9);
        let heads = 1 + rng.below(3);
        let d = heads * (1 + rng.below(3));
        let valid = 1 + rng.below(t);
        let w = Weights::random(d, &mut rng);
        let x = Tensor::uniform(&[t, d], 2.0, &mut rng);
        let (_, probs) = run_attention(&x, &w, heads, valid);
        assert_eq!(probs.len(), heads);
        for p in &probs {
            for r in 0..t {
                let row = p.row(r);
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12, "trial {trial}");
                assert!(row[valid..].iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn padded_positions_do_not_reach_valid_rows() {
    let mut rng = Rng::new(4);
    let (t, d, valid) = (7, 4, 4);
    let w = Weights::random(d, &mut rng);
    let x = Tensor::uniform(&[t, d], 1.0, &mut rng);
    let mut x2 = x.clone();
    for v in &mut x2.data_mut()[valid * d..] {
        *v += 5.0;
    }
    let (a, _) = run_attention(&x, &w, 2, valid);
    let (b, _) = run_attention(&x2, &w, 2, valid);
    assert_eq!(&a.data()[..valid * d], &b.data()[..valid * d]);
}

#[test]
fn attention_shape_errors() {
    let mut rng = Rng::new(5);
    let w = Weights::random(4, &mut rng);
    let mut g = Graph::new();
    let x = g.constant(Tensor::uniform(&[3, 4], 1.0, &mut rng));
    let vars = w.bind(&mut g);
    assert!(matches!(attention(&mut g, x, &vars, 3, 3), Err(Error::Shape(_))));
    assert!(matches!(attention(&mut g, x, &vars, 2, 0), Err(Error::Shape(_))));
    assert!(matches!(attention(&mut g, x, &vars, 2, 4), Err(Error::Shape(_))));
}

fn small(kind: EmbeddingKind, layers: usize) -> EncoderConfig {
    EncoderConfig { kind, layers, heads: 2, dim: 4, ffn_dim: 8, max_len: 6, dropout: 0.1 }
}

fn encode(enc: &Encoder, params: &ParamSet, ids: &[usize], len: usize) -> Tensor {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let y = enc.forward(&mut g, &p, ids, len, Mode::Eval, &mut Rng::new(0)).unwrap();
    g.value(y).clone()
}

#[test]
fn zero_layers_is_the_embedding() {
    for cfg in [small(EmbeddingKind::Trainable, 2), small(EmbeddingKind::Transformer, 0)] {
        let mut params = ParamSet::new();
        let enc = Encoder::new(&cfg, 10, None, &mut params, &mut Rng::new(6)).unwrap();
        assert_eq!(params.len(), 2);
        let ids = [4, 9, PAD, 3];
        let got = encode(&enc, &params, &ids, 3);
        let table = params.get(enc.table());
        let pos = params.get(enc.positional().unwrap());
        for (t, &id) in ids.iter().enumerate() {
            for c in 0..4 {
                let want = table.at(id, c) + pos.at(t, c);
                assert_eq!(got.at(t, c), want);
            }
        }
        assert!(table.row(PAD).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn output_is_t_by_d_for_every_length() {
    let cfg = small(EmbeddingKind::Transformer, 2);
    let mut params = ParamSet::new();
    let enc = Encoder::new(&cfg, 12, None, &mut params, &mut Rng::new(7)).unwrap();
    for t in 1..=cfg.max_len {
        let ids: Vec<usize> = (0..t).map(|i| 3 + i % 9).collect();
        let y = encode(&enc, &params, &ids, t);
        assert_eq!(y.shape(), [t, cfg.dim]);
        assert!(y.is_finite());
    }
    let too_long = vec![3; cfg.max_len + 1];
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    assert!(enc.forward(&mut g, &p, &too_long, 3, Mode::Eval, &mut Rng::new(0)).is_err());
}

#[test]
fn invalid_encoder_configs() {
    let mut params = ParamSet::new();
    let mut rng = Rng::new(0);
    let bad = [
        EncoderConfig { heads: 3, ..small(EmbeddingKind::Transformer, 1) },
        EncoderConfig { max_len: 1, ..small(EmbeddingKind::Transformer, 1) },
        EncoderConfig { dropout: 1.0, ..small(EmbeddingKind::Transformer, 1) },
    ];
    for cfg in bad {
        assert!(matches!(Encoder::new(&cfg, 10, None, &mut params, &mut rng), Err(Error::Config(_))));
    }
    let stat = small(EmbeddingKind::Static, 0);
    assert!(matches!(Encoder::new(&stat, 10, None, &mut params, &mut rng), Err(Error::Config(_))));
    assert!(Encoder::new(&stat, 10, Some(Tensor::zeros(&[9, 4])), &mut params, &mut rng).is_err());
}

#[test]
fn static_table_is_frozen_and_positionless() {
    let mut params = ParamSet::new();
    let table = Tensor::uniform(&[10, 4], 1.0, &mut Rng::new(8));
    let enc =
        Encoder::new(&small(EmbeddingKind::Static, 3), 10, Some(table.clone()), &mut params, &mut Rng::new(8)).unwrap();
    assert!(enc.positional().is_none());
    assert!(!params.param(enc.table()).trainable);
    let y = encode(&enc, &params, &[5, PAD, 7], 2);
    assert_eq!(y.row(0), table.row(5));
    assert_eq!(y.row(1), &[0.0; 4]);
    assert_eq!(y.row(2), table.row(7));
}

#[test]
fn one_layer_encoder_gradient_on_four_tokens() {
    let cfg = small(EmbeddingKind::Transformer, 1);
    let mut params = ParamSet::new();
    let enc = Encoder::new(&cfg, 9, None, &mut params, &mut Rng::new(10)).unwrap();
    let mut rng = Rng::new(11);
    // layer-norm gains and biases start at 1 and 0; move them off that point
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        if params.param(id).name.contains("norm") {
            for v in params.get_mut(id).data_mut() {
                *v += rng.uniform_range(-0.5, 0.5);
            }
        }
    }
    let tensors: Vec<Tensor> = params.iter().map(|(_, p)| (*p.value).clone()).collect();
    let proj = Tensor::uniform(&[4, cfg.dim], 1.0, &mut rng);
    let tokens = [3, 7, 4, 8];
    let report = grad_check(
        |g, vars: &[Var]| {
            let p = Bound::from_vars(vars.to_vec());
            let y = enc.forward(g, &p, &tokens, 4, Mode::Eval, &mut Rng::new(0))?;
            let r = g.constant(proj.clone());
            let s = g.mul(y, r)?;
            Ok(g.sum(s))
        },
        &tensors,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(report.coordinates > 0);
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn embedding_rejects_ids_past_the_table() {
    let mut g = Graph::new();
    let table = g.param(Tensor::zeros(&[5, 2]));
    assert!(matches!(embed(&mut g, &[1, 5], table, None), Err(Error::Vocab(_))));
    let pos = g.constant(Tensor::zeros(&[2, 2]));
    assert!(embed(&mut g, &[1, 2, 3], table, Some(pos)).is_err());
}

#[test]
fn static_vectors_report_coverage() {
    let ds = Dataset::new(vec![Example::new(1, "诈骗诈骗行为").unwrap(), Example::new(0, "合同").unwrap()]);
    let vocab = build_vocab(&ds, 1);
    let mut rng = Rng::new(12);
    let sv = parse_static_vectors("诈 1 2 3\n骗 4 5 6\nxyz 0 0 0\n", &vocab, &mut rng).unwrap();
    assert_eq!(sv.table.shape(), [vocab.len(), 3]);
    assert_eq!(sv.table.row(vocab.id('诈')), &[1.0, 2.0, 3.0]);
    assert_eq!(sv.table.row(vocab.id('骗')), &[4.0, 5.0, 6.0]);
    assert!(sv.table.row(PAD).iter().all(|&v| v == 0.0));
    let mut missing = sv.missing.clone();
    missing.sort();
    let mut want = vec!['行', '为', '合', '同'];
    want.sort();
    assert_eq!(missing, want);
    assert!((sv.coverage(&vocab) - 2.0 / 6.0).abs() < 1e-12);
    assert!(sv.table.row(vocab.id('合')).iter().any(|&v| v != 0.0));
    match parse_static_vectors("诈 1 2\n骗 1\n", &vocab, &mut rng) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
    assert!(matches!(parse_static_vectors("诈 1 x\n", &vocab, &mut rng), Err(Error::Parse { line: 1, .. })));
}
