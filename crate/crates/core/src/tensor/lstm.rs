use rand::Rng;

use crate::error::{Error, Result};

use super::{Tape, Tensor};

/// Parameters of one LSTM direction with fused gate weights.
///
/// `w_x` is `[4d, d_in]`, `w_h` is `[4d, d]`, `b` is `[4d]`; gate rows are
/// ordered input, forget, cell candidate, output.
#[derive(Clone)]
pub struct LstmCellParams {
    pub w_x: Tensor,
    pub w_h: Tensor,
    pub b: Tensor,
}

impl LstmCellParams {
    pub fn init(d_in: usize, d: usize, rng: &mut impl Rng) -> LstmCellParams {
        let limit_x = (6.0 / (d_in + d) as f64).sqrt();
        let limit_h = (6.0 / (2 * d) as f64).sqrt();
        LstmCellParams {
            w_x: Tensor::param_uniform(vec![4 * d, d_in], limit_x, rng),
            w_h: Tensor::param_uniform(vec![4 * d, d], limit_h, rng),
            b: Tensor::param(vec![4 * d], vec![0.0; 4 * d]).expect("lstm bias"),
        }
    }

    pub fn zeros(d_in: usize, d: usize) -> LstmCellParams {
        LstmCellParams {
            w_x: Tensor::param(vec![4 * d, d_in], vec![0.0; 4 * d * d_in]).expect("w_x"),
            w_h: Tensor::param(vec![4 * d, d], vec![0.0; 4 * d * d]).expect("w_h"),
            b: Tensor::param(vec![4 * d], vec![0.0; 4 * d]).expect("b"),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w_h.dims2().1
    }

    pub fn input_size(&self) -> usize {
        self.w_x.dims2().1
    }

    pub fn collect_named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w_x"), self.w_x.clone()));
        out.push((format!("{prefix}.w_h"), self.w_h.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

/// One step of the standard LSTM recurrence, composed from tape primitives
/// so gradients flow without a dedicated backward rule.
pub fn lstm_cell(
    tape: &Tape,
    x: &Tensor,
    h: &Tensor,
    c: &Tensor,
    p: &LstmCellParams,
) -> Result<(Tensor, Tensor)> {
    let d = p.hidden_size();
    if x.dims2().0 != p.input_size() || h.dims2().0 != d || c.dims2().0 != d {
        return Err(Error::ShapeMismatch {
            op: "lstm_cell",
            lhs: x.shape(),
            rhs: p.w_x.shape(),
        });
    }
    let pre = tape.add(
        &tape.add(&tape.matmul(&p.w_x, x)?, &tape.matmul(&p.w_h, h)?)?,
        &p.b,
    )?;
    let i = tape.sigmoid(&tape.slice_rows(&pre, 0, d)?);
    let f = tape.sigmoid(&tape.slice_rows(&pre, d, d)?);
    let g = tape.tanh(&tape.slice_rows(&pre, 2 * d, d)?);
    let o = tape.sigmoid(&tape.slice_rows(&pre, 3 * d, d)?);
    let c_next = tape.add(&tape.mul(&f, c)?, &tape.mul(&i, &g)?)?;
    let h_next = tape.mul(&o, &tape.tanh(&c_next))?;
    Ok((h_next, c_next))
}

/// Forward and backward direction parameters of a BiLSTM.
#[derive(Clone)]
pub struct BiLstmParams {
    pub fwd: LstmCellParams,
    pub bwd: LstmCellParams,
}

impl BiLstmParams {
    pub fn init(d_in: usize, d: usize, rng: &mut impl Rng) -> BiLstmParams {
        BiLstmParams {
            fwd: LstmCellParams::init(d_in, d, rng),
            bwd: LstmCellParams::init(d_in, d, rng),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.fwd.hidden_size()
    }

    pub fn collect_named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.fwd.collect_named(&format!("{prefix}.fwd"), out);
        self.bwd.collect_named(&format!("{prefix}.bwd"), out);
    }
}

pub struct BiLstmOut {
    /// Per-position `[2d]` vectors, forward state stacked over backward.
    pub states: Vec<Tensor>,
    /// Final hidden state of the forward pass (after the last position).
    pub fwd_final: Tensor,
    /// Final hidden state of the backward pass (after position 0).
    pub bwd_final: Tensor,
}

impl BiLstmOut {
    /// Stack the per-position states into a `[2d, len]` matrix.
    pub fn matrix(&self, tape: &Tape) -> Result<Tensor> {
        tape.concat(&self.states, 1)
    }
}

/// Run a BiLSTM over a sequence of `[d_in]` input vectors.
pub fn bilstm(tape: &Tape, inputs: &[Tensor], p: &BiLstmParams) -> Result<BiLstmOut> {
    if inputs.is_empty() {
        return Err(Error::contract("bilstm over an empty sequence"));
    }
    let d = p.hidden_size();
    let len = inputs.len();

    let mut h = Tensor::zeros(vec![d]);
    let mut c = Tensor::zeros(vec![d]);
    let mut fwd_states = Vec::with_capacity(len);
    for x in inputs {
        let (hn, cn) = lstm_cell(tape, x, &h, &c, &p.fwd)?;
        fwd_states.push(hn.clone());
        h = hn;
        c = cn;
    }
    let fwd_final = h;

    let mut h = Tensor::zeros(vec![d]);
    let mut c = Tensor::zeros(vec![d]);
    let mut bwd_states = vec![Tensor::zeros(vec![d]); len];
    for (i, x) in inputs.iter().enumerate().rev() {
        let (hn, cn) = lstm_cell(tape, x, &h, &c, &p.bwd)?;
        bwd_states[i] = hn.clone();
        h = hn;
        c = cn;
    }
    let bwd_final = h;

    let states = fwd_states
        .iter()
        .zip(&bwd_states)
        .map(|(f, b)| tape.concat(&[f.clone(), b.clone()], 0))
        .collect::<Result<Vec<_>>>()?;

    Ok(BiLstmOut {
        states,
        fwd_final,
        bwd_final,
    })
}
