//! Recurrent temporal encoder: LSTM or stabilised sLSTM cells followed by
//! windowed attention pooling over the final hidden states.
//!
//! Gate weights are packed column-wise in the order `[i | f | o | c]`:
//! `{prefix}.w_x` is `D×4n`, `{prefix}.w_h` is `n×4n`, `{prefix}.b` is `4n`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{log_sigmoid, xavier_uniform, Params, Tape, Tensor, Var};

pub const CELL: &str = "cell";
pub const ATTN: &str = "attn";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    #[default]
    Slstm,
}

/// Forget-gate activation of the sLSTM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ForgetMode {
    #[default]
    Sigmoid,
    Exp,
}

/// Handles of the packed cell weights on a tape.
#[derive(Clone, Copy, Debug)]
pub struct CellWeights {
    pub w_x: Var,
    pub w_h: Var,
    pub b: Var,
    pub hidden: usize,
}

impl CellWeights {
    pub fn bind(tape: &mut Tape, params: &Params, prefix: &str) -> Result<Self> {
        let w_x = tape.param(&format!("{prefix}.w_x"), params.get(&format!("{prefix}.w_x"))?);
        let w_h = tape.param(&format!("{prefix}.w_h"), params.get(&format!("{prefix}.w_h"))?);
        let b = tape.param(&format!("{prefix}.b"), params.get(&format!("{prefix}.b"))?);
        let (n, four_n) = tape.value(w_h).dims2();
        if four_n != 4 * n || tape.value(w_x).dims2().1 != four_n || tape.value(b).numel() != four_n {
            return Err(Error::dim("cell weights", tape.value(w_x).shape(), tape.value(w_h).shape()));
        }
        Ok(Self { w_x, w_h, b, hidden: n })
    }
}

pub fn init_cell_params<R: Rng>(rng: &mut R, params: &mut Params, prefix: &str, input: usize, hidden: usize) {
    params.insert(
        format!("{prefix}.w_x"),
        xavier_uniform(rng, &[input, 4 * hidden], input, 4 * hidden),
    );
    params.insert(
        format!("{prefix}.w_h"),
        xavier_uniform(rng, &[hidden, 4 * hidden], hidden, 4 * hidden),
    );
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[4 * hidden]));
}

pub fn init_attention_params<R: Rng>(
    rng: &mut R,
    params: &mut Params,
    prefix: &str,
    input: usize,
    hidden: usize,
    window: usize,
) {
    params.insert(
        format!("{prefix}.proj"),
        xavier_uniform(rng, &[input + hidden, hidden], input + hidden, hidden),
    );
    params.insert(
        format!("{prefix}.w"),
        xavier_uniform(rng, &[window, hidden], hidden, window),
    );
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[window, hidden]));
}

struct Gates {
    i: Var,
    f: Var,
    o: Var,
    c: Var,
}

/// Splits a `1×4n` pre-activation after adding the recurrent term and bias.
fn preactivations(tape: &mut Tape, x_part: Var, h: Var, w: &CellWeights) -> Result<Gates> {
    let hh = tape.matmul(h, w.w_h)?;
    let s = tape.add(x_part, hh)?;
    let pre = tape.add_row(s, w.b)?;
    let n = w.hidden;
    Ok(Gates {
        i: tape.slice_cols(pre, 0, n)?,
        f: tape.slice_cols(pre, n, n)?,
        o: tape.slice_cols(pre, 2 * n, n)?,
        c: tape.slice_cols(pre, 3 * n, n)?,
    })
}

fn lstm_from_preact(tape: &mut Tape, x_part: Var, h: Var, c: Var, w: &CellWeights) -> Result<(Var, Var)> {
    let g = preactivations(tape, x_part, h, w)?;
    let i = tape.sigmoid(g.i);
    let f = tape.sigmoid(g.f);
    let o = tape.sigmoid(g.o);
    let u = tape.tanh(g.c);
    let fc = tape.mul(f, c)?;
    let iu = tape.mul(i, u)?;
    let c_new = tape.add(fc, iu)?;
    let tc = tape.tanh(c_new);
    let h_new = tape.mul(o, tc)?;
    Ok((h_new, c_new))
}

/// Classic LSTM step with sigmoid gates. `x`, `h`, `c` are row vectors.
pub fn lstm_step(tape: &mut Tape, x: Var, h: Var, c: Var, w: &CellWeights) -> Result<(Var, Var)> {
    let xw = tape.matmul(x, w.w_x)?;
    lstm_from_preact(tape, xw, h, c, w)
}

/// sLSTM running state. `c` and `n` are stored scaled by `exp(-m)`, where `m`
/// is the log-domain stabiliser; `c / n` and therefore `h` are unaffected.
#[derive(Clone, Debug)]
pub struct SLstmState {
    pub c: Var,
    pub n: Var,
    pub h: Var,
    /// Stabiliser values; `None` before the first step.
    pub m: Option<Vec<f64>>,
}

impl SLstmState {
    pub fn zeros(tape: &mut Tape, hidden: usize) -> Self {
        let z = tape.constant(Tensor::zeros(&[1, hidden]));
        Self {
            c: z,
            n: z,
            h: z,
            m: None,
        }
    }
}

fn slstm_from_preact(
    tape: &mut Tape,
    x_part: Var,
    s: &SLstmState,
    w: &CellWeights,
    mode: ForgetMode,
) -> Result<SLstmState> {
    let g = preactivations(tape, x_part, s.h, w)?;
    let log_f = match mode {
        ForgetMode::Sigmoid => tape.log_sigmoid(g.f),
        ForgetMode::Exp => g.f,
    };
    let u = tape.tanh(g.c);
    let o = tape.sigmoid(g.o);
    let i_pre = tape.value(g.i).data().to_vec();

    let (c_new, n_new, m_new) = match &s.m {
        None => {
            // Empty memory: m = ĩ so the input gate is exactly 1.
            let m_t = i_pre;
            let m_var = tape.constant(Tensor::new(vec![1, w.hidden], m_t.clone())?);
            let shifted = tape.sub(g.i, m_var)?;
            let i_s = tape.exp(shifted);
            let c = tape.mul(i_s, u)?;
            (c, i_s, m_t)
        }
        Some(m_prev) => {
            let lf = tape.value(log_f).data();
            let m_t: Vec<f64> = (0..w.hidden)
                .map(|k| (lf[k] + m_prev[k]).max(i_pre[k]))
                .collect();
            let m_var = tape.constant(Tensor::new(vec![1, w.hidden], m_t.clone())?);
            let shift_f = tape.constant(Tensor::new(
                vec![1, w.hidden],
                m_prev.iter().zip(&m_t).map(|(a, b)| a - b).collect(),
            )?);
            let i_shift = tape.sub(g.i, m_var)?;
            let i_s = tape.exp(i_shift);
            let f_shift = tape.add(log_f, shift_f)?;
            let f_s = tape.exp(f_shift);
            let fc = tape.mul(f_s, s.c)?;
            let iu = tape.mul(i_s, u)?;
            let c = tape.add(fc, iu)?;
            let fnn = tape.mul(f_s, s.n)?;
            let nn = tape.add(fnn, i_s)?;
            (c, nn, m_t)
        }
    };
    let ratio = tape.div(c_new, n_new)?;
    let tr = tape.tanh(ratio);
    let h = tape.mul(o, tr)?;
    Ok(SLstmState {
        c: c_new,
        n: n_new,
        h,
        m: Some(m_new),
    })
}

/// One sLSTM step: exponential input gate, sigmoid or exponential forget gate,
/// normaliser state, and `h = o ⊙ tanh(c / n)`.
pub fn slstm_step(
    tape: &mut Tape,
    x: Var,
    s: &SLstmState,
    w: &CellWeights,
    mode: ForgetMode,
) -> Result<SLstmState> {
    let xw = tape.matmul(x, w.w_x)?;
    slstm_from_preact(tape, xw, s, w, mode)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecurrentConfig {
    pub cell: CellKind,
    pub forget: ForgetMode,
    /// Attention window length `w`.
    pub window: usize,
}

/// Runs the cell over every row of `features` (`T×D`) and returns all hidden
/// states in order.
pub fn run_cell(
    tape: &mut Tape,
    features: Var,
    params: &Params,
    cfg: &RecurrentConfig,
) -> Result<Vec<Var>> {
    let w = CellWeights::bind(tape, params, CELL)?;
    let t_len = tape.value(features).dims2().0;
    let xw_all = tape.matmul(features, w.w_x)?;
    let mut hidden = Vec::with_capacity(t_len);
    match cfg.cell {
        CellKind::Lstm => {
            let z = tape.constant(Tensor::zeros(&[1, w.hidden]));
            let (mut h, mut c) = (z, z);
            for t in 0..t_len {
                let xr = tape.slice_rows(xw_all, t, 1)?;
                (h, c) = lstm_from_preact(tape, xr, h, c, &w)?;
                check_finite(tape, &[h, c], t, xr)?;
                hidden.push(h);
            }
        }
        CellKind::Slstm => {
            let mut s = SLstmState::zeros(tape, w.hidden);
            for t in 0..t_len {
                let xr = tape.slice_rows(xw_all, t, 1)?;
                s = slstm_from_preact(tape, xr, &s, &w, cfg.forget)?;
                check_finite(tape, &[s.h, s.c, s.n], t, xr)?;
                hidden.push(s.h);
            }
        }
    }
    Ok(hidden)
}

fn check_finite(tape: &Tape, vars: &[Var], step: usize, pre: Var) -> Result<()> {
    if vars.iter().all(|&v| tape.value(v).all_finite()) {
        return Ok(());
    }
    let max_pre = tape
        .value(pre)
        .data()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    Err(Error::Numerical(format!(
        "recurrent state became non-finite at step {step} (max |input pre-activation| {max_pre:.3e})"
    )))
}

/// Attention over a `w×n` window of hidden states.
///
/// `W_a = W ⊙ (1 · gᵀ) + b` where `g = [x_t, h_prev] P` projects the
/// concatenated context to `n` dims; scores are row means of `W_a`, weights
/// their softmax, and the output `ReLU(Σ α_i h_i)`. Returns `(l, α)` with
/// shapes `1×n` and `1×w`.
pub fn attention_pool(
    tape: &mut Tape,
    window: Var,
    x_t: Var,
    h_prev: Var,
    params: &Params,
    prefix: &str,
) -> Result<(Var, Var)> {
    let proj = tape.param(&format!("{prefix}.proj"), params.get(&format!("{prefix}.proj"))?);
    let w = tape.param(&format!("{prefix}.w"), params.get(&format!("{prefix}.w"))?);
    let b = tape.param(&format!("{prefix}.b"), params.get(&format!("{prefix}.b"))?);
    let (wl, n) = tape.value(w).dims2();
    if tape.value(window).dims2() != (wl, n) {
        return Err(Error::dim("attention_pool", tape.value(window).shape(), &[wl, n]));
    }
    let ctx = tape.concat_cols(&[x_t, h_prev])?;
    let g = tape.matmul(ctx, proj)?;
    let wg = tape.mul_row(w, g)?;
    let wa = tape.add(wg, b)?;
    let e = tape.row_mean(wa);
    let e_row = tape.reshape(e, &[1, wl])?;
    let alpha = tape.softmax(e_row);
    let pooled = tape.matmul(alpha, window)?;
    Ok((tape.relu(pooled), alpha))
}

/// Sequence embedding: run the cell, then (if `attention`) pool the final
/// window of `w` hidden states, left-padded with zeros when `T < w`; otherwise
/// return the last hidden state.
pub fn axlstm_forward(
    tape: &mut Tape,
    features: Var,
    params: &Params,
    cfg: &RecurrentConfig,
    attention: bool,
) -> Result<(Var, Option<Var>)> {
    let t_len = tape.value(features).dims2().0;
    if t_len == 0 {
        return Err(Error::Data("empty feature sequence".into()));
    }
    let hidden = run_cell(tape, features, params, cfg)?;
    let last = *hidden.last().unwrap();
    if !attention {
        return Ok((last, None));
    }
    let n = tape.value(last).numel();
    let zero = tape.constant(Tensor::zeros(&[1, n]));
    let w = cfg.window;
    let mut rows = Vec::with_capacity(w);
    for k in 0..w {
        // window position k holds step t_len - w + k
        let idx = (t_len + k) as isize - w as isize;
        rows.push(if idx < 0 { zero } else { hidden[idx as usize] });
    }
    let window = tape.stack_rows(&rows)?;
    let x_t = tape.slice_rows(features, t_len - 1, 1)?;
    let h_prev = if t_len >= 2 { hidden[t_len - 2] } else { zero };
    let (l, alpha) = attention_pool(tape, window, x_t, h_prev, params, ATTN)?;
    Ok((l, Some(alpha)))
}

/// sLSTM step in plain `f64` without a stabiliser; only finite for moderate
/// pre-activations. Returns `(c, n, h)`.
pub fn slstm_step_naive(
    x: &[f64],
    h: &[f64],
    c: &[f64],
    nrm: &[f64],
    w_x: &Tensor,
    w_h: &Tensor,
    b: &Tensor,
    mode: ForgetMode,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hidden = h.len();
    let pre: Vec<f64> = (0..4 * hidden)
        .map(|j| {
            let mut s = b.data()[j];
            for (k, xv) in x.iter().enumerate() {
                s += xv * w_x.at(k, j);
            }
            for (k, hv) in h.iter().enumerate() {
                s += hv * w_h.at(k, j);
            }
            s
        })
        .collect();
    let mut c2 = vec![0.0; hidden];
    let mut n2 = vec![0.0; hidden];
    let mut h2 = vec![0.0; hidden];
    for k in 0..hidden {
        let i = pre[k].exp();
        let f = match mode {
            ForgetMode::Sigmoid => log_sigmoid(pre[hidden + k]).exp(),
            ForgetMode::Exp => pre[hidden + k].exp(),
        };
        let o = 1.0 / (1.0 + (-pre[2 * hidden + k]).exp());
        let u = pre[3 * hidden + k].tanh();
        c2[k] = f * c[k] + i * u;
        n2[k] = f * nrm[k] + i;
        h2[k] = o * (c2[k] / n2[k]).tanh();
    }
    (c2, n2, h2)
}
