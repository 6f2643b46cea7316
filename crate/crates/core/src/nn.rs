//! Shared layer helpers: initialization and dropout, plus the recurrent cells.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::CellKind;
use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Glorot-uniform `rows × cols` matrix (fan-in = cols, fan-out = rows).
pub fn xavier<F: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(&[rows, cols], |_| F::of(rng.random_range(-bound..bound)))
        .with_requires_grad(true)
}

pub fn zeros<F: Scalar>(shape: &[usize]) -> Tensor<F> {
    Tensor::zeros(shape).with_requires_grad(true)
}

/// Inverted dropout: kept units are scaled by `1 / (1 - p)` so the
/// deterministic network needs no rescaling. Identity when `rng` is `None`
/// or `p == 0`.
pub fn dropout<F: Scalar>(
    g: &mut Graph<'_, F>,
    x: Var,
    p: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = F::of(1.0 / (1.0 - p));
    let shape = g.shape(x).to_vec();
    let mask = (0..g.value(x).len())
        .map(|_| {
            if rng.random::<f64>() < p {
                F::zero()
            } else {
                keep
            }
        })
        .collect();
    let m = g.constant(&shape, mask)?;
    g.mul(x, m)
}

/// `W x + b` for a vector or a matrix of column inputs.
pub fn linear<F: Scalar>(g: &mut Graph<'_, F>, w: ParamId, b: ParamId, x: Var) -> Result<Var> {
    let w = g.param(w);
    let b = g.param(b);
    let y = g.matmul(w, x)?;
    g.add_bias(y, b)
}

/// Parameters of one recurrent direction.
///
/// LSTM gates are stacked as input, forget, cell candidate, output:
/// `c' = f ⊙ c + i ⊙ g`, `h' = o ⊙ tanh(c')`.
///
/// GRU gates are stacked as reset, update, candidate:
/// `n = tanh(W_n x + b_n + r ⊙ (U_n h + b_hn))`, `h' = (1 - z) ⊙ n + z ⊙ h`.
#[derive(Clone, Debug)]
pub struct RecurrentParams {
    pub cell: CellKind,
    pub hidden: usize,
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    /// Recurrent candidate bias, GRU only.
    pub b_hn: Option<ParamId>,
}

impl RecurrentParams {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        cell: CellKind,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let gates = match cell {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        };
        let w_x = store.insert(format!("{prefix}.w_x"), xavier(gates * hidden, input, rng));
        let w_h = store.insert(format!("{prefix}.w_h"), xavier(gates * hidden, hidden, rng));
        let b = store.insert(format!("{prefix}.b"), zeros(&[gates * hidden]));
        let b_hn = (cell == CellKind::Gru)
            .then(|| store.insert(format!("{prefix}.b_hn"), zeros(&[hidden])));
        RecurrentParams {
            cell,
            hidden,
            w_x,
            w_h,
            b,
            b_hn,
        }
    }

    /// Runs over the columns of `x` (`input × N`), left to right or right to
    /// left, from a zero state. States are returned in position order.
    pub fn run<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var, reverse: bool) -> Result<Vec<Var>> {
        let n = g.shape(x)[1];
        let h_size = self.hidden;
        let xs = linear(g, self.w_x, self.b, x)?;
        let w_h = g.param(self.w_h);
        let mut h = g.constant(&[h_size], vec![F::zero(); h_size])?;
        let mut c = h;
        let mut states = vec![h; n];
        let order: Vec<usize> = if reverse {
            (0..n).rev().collect()
        } else {
            (0..n).collect()
        };
        for (step, t) in order.into_iter().enumerate() {
            let xt = g.column(xs, t)?;
            match self.cell {
                CellKind::Lstm => {
                    let z = if step == 0 {
                        xt
                    } else {
                        let rec = g.matmul(w_h, h)?;
                        g.add(xt, rec)?
                    };
                    let i_f = g.slice_rows(z, 0, 2 * h_size)?;
                    let i_f = g.sigmoid(i_f);
                    let i = g.slice_rows(i_f, 0, h_size)?;
                    let f = g.slice_rows(i_f, h_size, h_size)?;
                    let cand = g.slice_rows(z, 2 * h_size, h_size)?;
                    let cand = g.tanh(cand);
                    let o = g.slice_rows(z, 3 * h_size, h_size)?;
                    let o = g.sigmoid(o);
                    let ig = g.mul(i, cand)?;
                    c = if step == 0 {
                        ig
                    } else {
                        let fc = g.mul(f, c)?;
                        g.add(fc, ig)?
                    };
                    let tc = g.tanh(c);
                    h = g.mul(o, tc)?;
                }
                CellKind::Gru => {
                    let b_hn = g.param(self.b_hn.expect("GRU has a candidate bias"));
                    let rec = g.matmul(w_h, h)?;
                    let x_rz = g.slice_rows(xt, 0, 2 * h_size)?;
                    let h_rz = g.slice_rows(rec, 0, 2 * h_size)?;
                    let rz = g.add(x_rz, h_rz)?;
                    let rz = g.sigmoid(rz);
                    let r = g.slice_rows(rz, 0, h_size)?;
                    let z = g.slice_rows(rz, h_size, h_size)?;
                    let x_n = g.slice_rows(xt, 2 * h_size, h_size)?;
                    let h_n = g.slice_rows(rec, 2 * h_size, h_size)?;
                    let h_n = g.add(h_n, b_hn)?;
                    let gated = g.mul(r, h_n)?;
                    let pre = g.add(x_n, gated)?;
                    let cand = g.tanh(pre);
                    let diff = g.sub(h, cand)?;
                    let keep = g.mul(z, diff)?;
                    h = g.add(cand, keep)?;
                }
            }
            states[t] = h;
        }
        Ok(states)
    }
}

/// Two recurrent directions whose states are concatenated per position.
#[derive(Clone, Debug)]
pub struct BiRecurrent {
    pub forward: RecurrentParams,
    pub backward: RecurrentParams,
}

impl BiRecurrent {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        cell: CellKind,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        BiRecurrent {
            forward: RecurrentParams::init(store, &format!("{prefix}.fwd"), cell, input, hidden, rng),
            backward: RecurrentParams::init(store, &format!("{prefix}.bwd"), cell, input, hidden, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden
    }

    /// `(2·hidden) × N` output: forward states on top, backward below.
    pub fn run<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let fwd = self.forward.run(g, x, false)?;
        let bwd = self.backward.run(g, x, true)?;
        let f = g.stack_columns(&fwd)?;
        let b = g.stack_columns(&bwd)?;
        g.concat(&[f, b])
    }
}
