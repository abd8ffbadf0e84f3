//! LSTM cell and the stacked bidirectional LSTM used by the BiLSTM and
//! RCNN heads.

use crate::error::{shape_err, Result};
use crate::graph::{Activation, Graph, Mode, Var};
use crate::params::{Bound, ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Graph handles of one LSTM direction: input weights `[D,4H]`, recurrent
/// weights `[H,4H]` and bias `[4H]`, gate blocks ordered i, f, g, o.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w: Var,
    pub u: Var,
    pub b: Var,
}

/// One LSTM step on a row vector `x[1,D]` with state `h, c` of shape `[1,H]`.
pub fn lstm_cell(g: &mut Graph, x: Var, h: Var, c: Var, p: LstmVars) -> Result<(Var, Var)> {
    let xw = g.matmul(x, p.w)?;
    let xw = g.add_bias(xw, p.b)?;
    lstm_step(g, xw, h, c, p.u)
}

/// Step given the already-projected input `x·W + b`.
fn lstm_step(g: &mut Graph, xw: Var, h: Var, c: Var, u: Var) -> Result<(Var, Var)> {
    let hidden = g.shape(u)[0];
    if g.shape(h) != [1, hidden] || g.shape(c) != [1, hidden] || g.shape(xw) != [1, 4 * hidden] {
        return Err(shape_err(format!(
            "lstm: state {:?}/{:?} and gates {:?} disagree with hidden size {hidden}",
            g.shape(h),
            g.shape(c),
            g.shape(xw)
        )));
    }
    let hu = g.matmul(h, u)?;
    let gates = g.add(xw, hu)?;
    let i = g.slice_cols(gates, 0, hidden)?;
    let f = g.slice_cols(gates, hidden, hidden)?;
    let cand = g.slice_cols(gates, 2 * hidden, hidden)?;
    let o = g.slice_cols(gates, 3 * hidden, hidden)?;
    let i = g.activation(Activation::Sigmoid, i);
    let f = g.activation(Activation::Sigmoid, f);
    let cand = g.activation(Activation::Tanh, cand);
    let o = g.activation(Activation::Sigmoid, o);
    let fc = g.mul(f, c)?;
    let ig = g.mul(i, cand)?;
    let c_next = g.add(fc, ig)?;
    let tc = g.activation(Activation::Tanh, c_next);
    let h_next = g.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// Runs one direction over `seq[T,D]`, returning the hidden state at each
/// timestep in input order.
fn run_direction(g: &mut Graph, seq: Var, p: LstmVars, reverse: bool) -> Result<Vec<Var>> {
    let t_len = g.shape(seq)[0];
    let hidden = g.shape(p.u)[0];
    let proj = g.matmul(seq, p.w)?;
    let proj = g.add_bias(proj, p.b)?;
    let mut h = g.constant(Tensor::zeros(&[1, hidden]));
    let mut c = g.constant(Tensor::zeros(&[1, hidden]));
    let mut out = vec![h; t_len];
    let steps: Box<dyn Iterator<Item = usize>> = if reverse { Box::new((0..t_len).rev()) } else { Box::new(0..t_len) };
    for t in steps {
        let xw = g.slice_rows(proj, t, 1)?;
        (h, c) = lstm_step(g, xw, h, c, p.u)?;
        out[t] = h;
    }
    Ok(out)
}

/// Stacked bidirectional LSTM over `seq[T,D]`.
///
/// Returns per-timestep outputs `[T,2H]` of the top layer and the final
/// state `[1,2H]` = (forward state at T−1, backward state at 0). Dropout
/// is applied to the outputs of every layer but the last.
pub fn bilstm(
    g: &mut Graph,
    seq: Var,
    layers: &[(LstmVars, LstmVars)],
    dropout: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Var, Var)> {
    let t_len = g.value(seq).dims2()?.0;
    if layers.is_empty() {
        return Err(shape_err("bilstm: no layers"));
    }
    let mut input = seq;
    let mut last = None;
    for (li, &(fwd, bwd)) in layers.iter().enumerate() {
        let hf = run_direction(g, input, fwd, false)?;
        let hb = run_direction(g, input, bwd, true)?;
        let rows = hf.iter().zip(&hb).map(|(&a, &b)| g.concat(&[a, b], 1)).collect::<Result<Vec<_>>>()?;
        let outputs = g.concat(&rows, 0)?;
        let final_state = g.concat(&[hf[t_len - 1], hb[0]], 1)?;
        last = Some((outputs, final_state));
        if li + 1 < layers.len() {
            input = g.dropout(outputs, dropout, mode, rng)?;
        }
    }
    Ok(last.expect("at least one layer"))
}

/// Parameter ids of a stacked BiLSTM.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub hidden: usize,
    pub layers: Vec<(LstmParams, LstmParams)>,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
}

impl LstmParams {
    pub fn new(params: &mut ParamSet, prefix: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let w = Tensor::glorot(&[input, 4 * hidden], input, 4 * hidden, rng);
        let u = Tensor::glorot(&[hidden, 4 * hidden], hidden, 4 * hidden, rng);
        let mut b = Tensor::zeros(&[4 * hidden]);
        b.data_mut()[hidden..2 * hidden].fill(1.0);
        Self {
            w: params.add(format!("{prefix}.w"), w),
            u: params.add(format!("{prefix}.u"), u),
            b: params.add(format!("{prefix}.b"), b),
        }
    }

    pub fn bind(&self, p: &Bound) -> LstmVars {
        LstmVars { w: p[self.w], u: p[self.u], b: p[self.b] }
    }
}

impl BiLstm {
    pub fn new(params: &mut ParamSet, prefix: &str, input: usize, hidden: usize, layers: usize, rng: &mut Rng) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let d = if l == 0 { input } else { 2 * hidden };
                (
                    LstmParams::new(params, &format!("{prefix}.l{l}.fwd"), d, hidden, rng),
                    LstmParams::new(params, &format!("{prefix}.l{l}.bwd"), d, hidden, rng),
                )
            })
            .collect();
        Self { hidden, layers }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        seq: Var,
        dropout: f64,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(Var, Var)> {
        let vars: Vec<_> = self.layers.iter().map(|(f, b)| (f.bind(p), b.bind(p))).collect();
        bilstm(g, seq, &vars, dropout, mode, rng)
    }
}
