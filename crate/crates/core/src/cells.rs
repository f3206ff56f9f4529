//! RNN and LSTM step updates, their reverse-mode derivatives, and layer
//! stacking.
//!
//! The LSTM follows the six-line update
//!
//! ```text
//! i = σ(W_xi x + W_hi h' + b_i)      f = σ(W_xf x + W_hf h' + b_f)
//! o = σ(W_xo x + W_ho h' + b_o)      g = tanh(W_xc x + W_hc h' + b_c)
//! c = f ⊙ c' + i ⊙ g                 h = o ⊙ tanh(c)
//! ```
//!
//! Cells emit `h` only; mapping hidden states to outputs is the job of the
//! prediction layer in [`crate::model`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemv_acc, gemv_t_acc, ger_acc, sigmoid_scalar, Tensor};

/// Initial forget-gate bias.
pub const FORGET_BIAS_INIT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nonlinearity {
    Sigmoid,
    Tanh,
}

impl Nonlinearity {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Sigmoid => sigmoid_scalar(x),
            Nonlinearity::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    fn deriv_from_output(self, y: f64) -> f64 {
        match self {
            Nonlinearity::Sigmoid => y * (1.0 - y),
            Nonlinearity::Tanh => 1.0 - y * y,
        }
    }
}

fn check_vec(op: &'static str, t: &[f64], n: usize) -> Result<()> {
    if t.len() != n {
        return Err(Error::Shape {
            op,
            left: vec![n],
            right: vec![t.len()],
        });
    }
    Ok(())
}

fn init_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Tensor {
    let s = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(&[rows, cols], s, rng)
}

/// Parameters of `h_t = g(W_xh x_t + W_hh h_{t-1} + b_h)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnCellParams {
    pub w_xh: Tensor,
    pub w_hh: Tensor,
    pub b_h: Tensor,
    pub g: Nonlinearity,
}

impl RnnCellParams {
    pub fn zeros(input: usize, hidden: usize, g: Nonlinearity) -> Self {
        RnnCellParams {
            w_xh: Tensor::zeros(&[hidden, input]),
            w_hh: Tensor::zeros(&[hidden, hidden]),
            b_h: Tensor::zeros(&[hidden]),
            g,
        }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, g: Nonlinearity, rng: &mut R) -> Self {
        let fan_in = input + hidden;
        RnnCellParams {
            w_xh: init_matrix(hidden, input, fan_in, rng),
            w_hh: init_matrix(hidden, hidden, fan_in, rng),
            b_h: Tensor::zeros(&[hidden]),
            g,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.b_h.len()
    }

    pub fn input_size(&self) -> usize {
        self.w_xh.shape()[1]
    }
}

/// Forward values kept for [`rnn_step_backward`].
#[derive(Clone, Debug)]
pub struct RnnCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub h: Vec<f64>,
}

/// One vanilla RNN update.
pub fn rnn_step(p: &RnnCellParams, x: &Tensor, h_prev: &Tensor) -> Result<Tensor> {
    let (h, _) = rnn_step_cached(p, x.data(), h_prev.data())?;
    Ok(Tensor::vector(h))
}

pub(crate) fn rnn_step_cached(p: &RnnCellParams, x: &[f64], h_prev: &[f64]) -> Result<(Vec<f64>, RnnCache)> {
    check_vec("rnn_step input", x, p.input_size())?;
    check_vec("rnn_step h_prev", h_prev, p.hidden_size())?;
    let mut a = p.b_h.data().to_vec();
    gemv_acc(&p.w_xh, x, &mut a);
    gemv_acc(&p.w_hh, h_prev, &mut a);
    let h: Vec<f64> = a.iter().map(|&v| p.g.apply(v)).collect();
    let cache = RnnCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        h: h.clone(),
    };
    Ok((h, cache))
}

/// Gradients produced by one cell's backward step.
#[derive(Clone, Debug)]
pub struct StepGrads<P> {
    pub x: Tensor,
    pub h_prev: Tensor,
    /// Absent for RNN cells.
    pub c_prev: Option<Tensor>,
    pub params: P,
}

/// Reverse-mode derivative of [`rnn_step`] given the upstream gradient on `h_t`.
pub fn rnn_step_backward(p: &RnnCellParams, cache: &RnnCache, grad_h: &Tensor) -> Result<StepGrads<RnnCellParams>> {
    check_vec("rnn_step_backward grad_h", grad_h.data(), p.hidden_size())?;
    let mut grads = RnnCellParams::zeros(p.input_size(), p.hidden_size(), p.g);
    let mut dx = vec![0.0; p.input_size()];
    let mut dh_prev = vec![0.0; p.hidden_size()];
    rnn_backward_into(p, cache, grad_h.data(), &mut grads, &mut dx, &mut dh_prev);
    Ok(StepGrads {
        x: Tensor::vector(dx),
        h_prev: Tensor::vector(dh_prev),
        c_prev: None,
        params: grads,
    })
}

fn rnn_backward_into(
    p: &RnnCellParams,
    cache: &RnnCache,
    dh: &[f64],
    grads: &mut RnnCellParams,
    dx: &mut [f64],
    dh_prev: &mut [f64],
) {
    let da: Vec<f64> = dh
        .iter()
        .zip(&cache.h)
        .map(|(&d, &h)| d * p.g.deriv_from_output(h))
        .collect();
    ger_acc(&mut grads.w_xh, &da, &cache.x);
    ger_acc(&mut grads.w_hh, &da, &cache.h_prev);
    for (b, d) in grads.b_h.data_mut().iter_mut().zip(&da) {
        *b += d;
    }
    gemv_t_acc(&p.w_xh, &da, dx);
    gemv_t_acc(&p.w_hh, &da, dh_prev);
}

/// The twelve LSTM weight blocks, four gates of `(W_x•, W_h•, b_•)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCellParams {
    pub w_xi: Tensor,
    pub w_hi: Tensor,
    pub b_i: Tensor,
    pub w_xf: Tensor,
    pub w_hf: Tensor,
    pub b_f: Tensor,
    pub w_xo: Tensor,
    pub w_ho: Tensor,
    pub b_o: Tensor,
    pub w_xc: Tensor,
    pub w_hc: Tensor,
    pub b_c: Tensor,
}

impl LstmCellParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let wx = || Tensor::zeros(&[hidden, input]);
        let wh = || Tensor::zeros(&[hidden, hidden]);
        let b = || Tensor::zeros(&[hidden]);
        LstmCellParams {
            w_xi: wx(),
            w_hi: wh(),
            b_i: b(),
            w_xf: wx(),
            w_hf: wh(),
            b_f: b(),
            w_xo: wx(),
            w_ho: wh(),
            b_o: b(),
            w_xc: wx(),
            w_hc: wh(),
            b_c: b(),
        }
    }

    /// Uniform `[-1/√fan_in, 1/√fan_in]` weights, zero biases except the
    /// forget gate, which starts at [`FORGET_BIAS_INIT`].
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let fan_in = input + hidden;
        let mut p = LstmCellParams::zeros(input, hidden);
        for (w_x, w_h) in [
            (&mut p.w_xi, &mut p.w_hi),
            (&mut p.w_xf, &mut p.w_hf),
            (&mut p.w_xo, &mut p.w_ho),
            (&mut p.w_xc, &mut p.w_hc),
        ] {
            *w_x = init_matrix(hidden, input, fan_in, rng);
            *w_h = init_matrix(hidden, hidden, fan_in, rng);
        }
        p.b_f.fill(FORGET_BIAS_INIT);
        p
    }

    pub fn hidden_size(&self) -> usize {
        self.b_i.len()
    }

    pub fn input_size(&self) -> usize {
        self.w_xi.shape()[1]
    }
}

/// Gate values of one LSTM step.
#[derive(Clone, Debug, PartialEq)]
pub struct GateActivations {
    pub i: Tensor,
    pub f: Tensor,
    pub o: Tensor,
    pub g: Tensor,
}

/// Forward values kept for [`lstm_step_backward`].
#[derive(Clone, Debug)]
pub struct LstmCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub gates: GateActivations,
    pub tanh_c: Vec<f64>,
}

/// One LSTM update, returning `(h_t, c_t, gates)`.
pub fn lstm_step(
    p: &LstmCellParams,
    x: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
) -> Result<(Tensor, Tensor, GateActivations)> {
    let (h, c, cache) = lstm_step_cached(p, x.data(), h_prev.data(), c_prev.data())?;
    Ok((Tensor::vector(h), Tensor::vector(c), cache.gates))
}

pub(crate) fn lstm_step_cached(
    p: &LstmCellParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, LstmCache)> {
    let n = p.hidden_size();
    check_vec("lstm_step input", x, p.input_size())?;
    check_vec("lstm_step h_prev", h_prev, n)?;
    check_vec("lstm_step c_prev", c_prev, n)?;

    let pre = |w_x: &Tensor, w_h: &Tensor, b: &Tensor| {
        let mut a = b.data().to_vec();
        gemv_acc(w_x, x, &mut a);
        gemv_acc(w_h, h_prev, &mut a);
        a
    };
    let i: Vec<f64> = pre(&p.w_xi, &p.w_hi, &p.b_i).into_iter().map(sigmoid_scalar).collect();
    let f: Vec<f64> = pre(&p.w_xf, &p.w_hf, &p.b_f).into_iter().map(sigmoid_scalar).collect();
    let o: Vec<f64> = pre(&p.w_xo, &p.w_ho, &p.b_o).into_iter().map(sigmoid_scalar).collect();
    let g: Vec<f64> = pre(&p.w_xc, &p.w_hc, &p.b_c).into_iter().map(f64::tanh).collect();

    let c: Vec<f64> = (0..n).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let h: Vec<f64> = (0..n).map(|k| o[k] * tanh_c[k]).collect();

    let cache = LstmCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        gates: GateActivations {
            i: Tensor::vector(i),
            f: Tensor::vector(f),
            o: Tensor::vector(o),
            g: Tensor::vector(g),
        },
        tanh_c,
    };
    Ok((h, c, cache))
}

/// Reverse-mode derivative of [`lstm_step`] given upstream gradients on
/// `h_t` and `c_t`.
pub fn lstm_step_backward(
    p: &LstmCellParams,
    cache: &LstmCache,
    grad_h: &Tensor,
    grad_c: &Tensor,
) -> Result<StepGrads<LstmCellParams>> {
    let n = p.hidden_size();
    check_vec("lstm_step_backward grad_h", grad_h.data(), n)?;
    check_vec("lstm_step_backward grad_c", grad_c.data(), n)?;
    let mut grads = LstmCellParams::zeros(p.input_size(), n);
    let mut dx = vec![0.0; p.input_size()];
    let mut dh_prev = vec![0.0; n];
    let mut dc_prev = vec![0.0; n];
    lstm_backward_into(
        p,
        cache,
        grad_h.data(),
        grad_c.data(),
        &mut grads,
        &mut dx,
        &mut dh_prev,
        &mut dc_prev,
    );
    Ok(StepGrads {
        x: Tensor::vector(dx),
        h_prev: Tensor::vector(dh_prev),
        c_prev: Some(Tensor::vector(dc_prev)),
        params: grads,
    })
}

#[allow(clippy::too_many_arguments)]
fn lstm_backward_into(
    p: &LstmCellParams,
    cache: &LstmCache,
    dh: &[f64],
    dc_next: &[f64],
    grads: &mut LstmCellParams,
    dx: &mut [f64],
    dh_prev: &mut [f64],
    dc_prev: &mut [f64],
) {
    let n = p.hidden_size();
    let gates = &cache.gates;
    let (i, f, o, g) = (gates.i.data(), gates.f.data(), gates.o.data(), gates.g.data());
    let mut da_i = vec![0.0; n];
    let mut da_f = vec![0.0; n];
    let mut da_o = vec![0.0; n];
    let mut da_g = vec![0.0; n];
    for k in 0..n {
        let tc = cache.tanh_c[k];
        let d_o = dh[k] * tc;
        let dc = dc_next[k] + dh[k] * o[k] * (1.0 - tc * tc);
        da_i[k] = dc * g[k] * i[k] * (1.0 - i[k]);
        da_f[k] = dc * cache.c_prev[k] * f[k] * (1.0 - f[k]);
        da_o[k] = d_o * o[k] * (1.0 - o[k]);
        da_g[k] = dc * i[k] * (1.0 - g[k] * g[k]);
        dc_prev[k] += dc * f[k];
    }
    for (da, w_x, w_h, gw_x, gw_h, gb) in [
        (&da_i, &p.w_xi, &p.w_hi, &mut grads.w_xi, &mut grads.w_hi, &mut grads.b_i),
        (&da_f, &p.w_xf, &p.w_hf, &mut grads.w_xf, &mut grads.w_hf, &mut grads.b_f),
        (&da_o, &p.w_xo, &p.w_ho, &mut grads.w_xo, &mut grads.w_ho, &mut grads.b_o),
        (&da_g, &p.w_xc, &p.w_hc, &mut grads.w_xc, &mut grads.w_hc, &mut grads.b_c),
    ] {
        ger_acc(gw_x, da, &cache.x);
        ger_acc(gw_h, da, &cache.h_prev);
        for (b, d) in gb.data_mut().iter_mut().zip(da) {
            *b += d;
        }
        gemv_t_acc(w_x, da, dx);
        gemv_t_acc(w_h, da, dh_prev);
    }
}

/// Hidden (and, for LSTMs, memory-cell) vector of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    pub h: Tensor,
    pub c: Option<Tensor>,
}

/// Per-layer state of a recurrent stack.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub layers: Vec<LayerState>,
}

impl RecurrentState {
    /// All-zero state for `layers` (`h_0 = 0`, `c_0 = 0`).
    pub fn zeros(layers: &[Cell]) -> Self {
        RecurrentState {
            layers: layers
                .iter()
                .map(|cell| LayerState {
                    h: Tensor::zeros(&[cell.hidden_size()]),
                    c: cell.is_lstm().then(|| Tensor::zeros(&[cell.hidden_size()])),
                })
                .collect(),
        }
    }

    pub fn top_h(&self) -> &Tensor {
        &self.layers.last().expect("non-empty stack").h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Rnn,
    Lstm,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::Rnn => "rnn",
            CellKind::Lstm => "lstm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rnn" => Ok(CellKind::Rnn),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(crate::error::Error::Spec(format!("unknown cell '{other}'"))),
        }
    }
}

/// One layer of a recurrent stack.
#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Cell {
    Rnn(RnnCellParams),
    Lstm(LstmCellParams),
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum CellCache {
    Rnn(RnnCache),
    Lstm(LstmCache),
}

impl Cell {
    pub fn init<R: Rng + ?Sized>(kind: CellKind, input: usize, hidden: usize, rng: &mut R) -> Self {
        match kind {
            CellKind::Rnn => Cell::Rnn(RnnCellParams::init(input, hidden, Nonlinearity::Tanh, rng)),
            CellKind::Lstm => Cell::Lstm(LstmCellParams::init(input, hidden, rng)),
        }
    }

    pub fn zeros(kind: CellKind, input: usize, hidden: usize) -> Self {
        match kind {
            CellKind::Rnn => Cell::Rnn(RnnCellParams::zeros(input, hidden, Nonlinearity::Tanh)),
            CellKind::Lstm => Cell::Lstm(LstmCellParams::zeros(input, hidden)),
        }
    }

    pub fn kind(&self) -> CellKind {
        match self {
            Cell::Rnn(_) => CellKind::Rnn,
            Cell::Lstm(_) => CellKind::Lstm,
        }
    }

    pub fn is_lstm(&self) -> bool {
        matches!(self, Cell::Lstm(_))
    }

    pub fn hidden_size(&self) -> usize {
        match self {
            Cell::Rnn(p) => p.hidden_size(),
            Cell::Lstm(p) => p.hidden_size(),
        }
    }

    pub fn input_size(&self) -> usize {
        match self {
            Cell::Rnn(p) => p.input_size(),
            Cell::Lstm(p) => p.input_size(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Cell::Rnn(p) => Cell::Rnn(RnnCellParams::zeros(p.input_size(), p.hidden_size(), p.g)),
            Cell::Lstm(p) => Cell::Lstm(LstmCellParams::zeros(p.input_size(), p.hidden_size())),
        }
    }

    /// Named parameter blocks in a fixed order.
    pub fn blocks(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Cell::Rnn(p) => vec![("w_xh", &p.w_xh), ("w_hh", &p.w_hh), ("b_h", &p.b_h)],
            Cell::Lstm(p) => vec![
                ("w_xi", &p.w_xi),
                ("w_hi", &p.w_hi),
                ("b_i", &p.b_i),
                ("w_xf", &p.w_xf),
                ("w_hf", &p.w_hf),
                ("b_f", &p.b_f),
                ("w_xo", &p.w_xo),
                ("w_ho", &p.w_ho),
                ("b_o", &p.b_o),
                ("w_xc", &p.w_xc),
                ("w_hc", &p.w_hc),
                ("b_c", &p.b_c),
            ],
        }
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Cell::Rnn(p) => vec![("w_xh", &mut p.w_xh), ("w_hh", &mut p.w_hh), ("b_h", &mut p.b_h)],
            Cell::Lstm(p) => vec![
                ("w_xi", &mut p.w_xi),
                ("w_hi", &mut p.w_hi),
                ("b_i", &mut p.b_i),
                ("w_xf", &mut p.w_xf),
                ("w_hf", &mut p.w_hf),
                ("b_f", &mut p.b_f),
                ("w_xo", &mut p.w_xo),
                ("w_ho", &mut p.w_ho),
                ("b_o", &mut p.b_o),
                ("w_xc", &mut p.w_xc),
                ("w_hc", &mut p.w_hc),
                ("b_c", &mut p.b_c),
            ],
        }
    }

    /// Names of the hidden-to-hidden blocks.
    pub fn recurrent_block_names(&self) -> &'static [&'static str] {
        match self {
            Cell::Rnn(_) => &["w_hh"],
            Cell::Lstm(_) => &["w_hi", "w_hf", "w_ho", "w_hc"],
        }
    }

    /// Advances one layer by one step.
    pub fn step(&self, x: &[f64], state: &LayerState) -> Result<(LayerState, CellCache)> {
        match self {
            Cell::Rnn(p) => {
                let (h, cache) = rnn_step_cached(p, x, state.h.data())?;
                Ok((
                    LayerState {
                        h: Tensor::vector(h),
                        c: None,
                    },
                    CellCache::Rnn(cache),
                ))
            }
            Cell::Lstm(p) => {
                let c_prev = state
                    .c
                    .as_ref()
                    .ok_or_else(|| Error::Invalid("LSTM layer state has no memory cell".into()))?;
                let (h, c, cache) = lstm_step_cached(p, x, state.h.data(), c_prev.data())?;
                Ok((
                    LayerState {
                        h: Tensor::vector(h),
                        c: Some(Tensor::vector(c)),
                    },
                    CellCache::Lstm(cache),
                ))
            }
        }
    }

    /// Accumulates parameter gradients into `grads` (same variant as `self`)
    /// and input/state gradients into `dx`, `dh_prev`, `dc_prev`.
    /// `dc_next` and `dc_prev` are ignored for RNN cells.
    #[allow(clippy::too_many_arguments)]
    pub fn backward_into(
        &self,
        cache: &CellCache,
        dh: &[f64],
        dc_next: &[f64],
        grads: &mut Cell,
        dx: &mut [f64],
        dh_prev: &mut [f64],
        dc_prev: &mut [f64],
    ) -> Result<()> {
        match (self, cache, grads) {
            (Cell::Rnn(p), CellCache::Rnn(c), Cell::Rnn(g)) => {
                rnn_backward_into(p, c, dh, g, dx, dh_prev);
                Ok(())
            }
            (Cell::Lstm(p), CellCache::Lstm(c), Cell::Lstm(g)) => {
                lstm_backward_into(p, c, dh, dc_next, g, dx, dh_prev, dc_prev);
                Ok(())
            }
            _ => Err(Error::Invalid("cell, cache and gradient variants disagree".into())),
        }
    }
}

/// Everything [`stack_forward`] produces.
#[derive(Clone, Debug)]
pub struct StackOutput {
    /// `hidden[layer][step]`.
    pub hidden: Vec<Vec<Tensor>>,
    pub final_state: RecurrentState,
    /// `caches[step][layer]`.
    pub caches: Vec<Vec<CellCache>>,
}

/// Runs a stack over a sequence, feeding layer ℓ-1's hidden state into layer
/// ℓ. A missing `initial` state means `h_0 = c_0 = 0`.
pub fn stack_forward(layers: &[Cell], inputs: &[Tensor], initial: Option<&RecurrentState>) -> Result<StackOutput> {
    if layers.is_empty() {
        return Err(Error::Empty("stack_forward layers"));
    }
    for pair in layers.windows(2) {
        if pair[1].input_size() != pair[0].hidden_size() {
            return Err(Error::Shape {
                op: "stack_forward inter-layer",
                left: vec![pair[0].hidden_size()],
                right: vec![pair[1].input_size()],
            });
        }
    }
    let mut state = match initial {
        Some(s) => s.clone(),
        None => RecurrentState::zeros(layers),
    };
    if state.layers.len() != layers.len() {
        return Err(Error::Shape {
            op: "stack_forward initial state",
            left: vec![layers.len()],
            right: vec![state.layers.len()],
        });
    }
    let mut hidden = vec![Vec::with_capacity(inputs.len()); layers.len()];
    let mut caches = Vec::with_capacity(inputs.len());
    for x in inputs {
        let mut step_caches = Vec::with_capacity(layers.len());
        let mut input = x.clone();
        for (l, cell) in layers.iter().enumerate() {
            let (next, cache) = cell.step(input.data(), &state.layers[l])?;
            hidden[l].push(next.h.clone());
            input = next.h.clone();
            state.layers[l] = next;
            step_caches.push(cache);
        }
        caches.push(step_caches);
    }
    Ok(StackOutput {
        hidden,
        final_state: state,
        caches,
    })
}

/// Gradients from [`stack_backward`].
#[derive(Clone, Debug)]
pub struct StackGrads {
    pub inputs: Vec<Tensor>,
    pub layers: Vec<Cell>,
    pub initial: RecurrentState,
}

/// Backpropagation through time for [`stack_forward`], given the upstream
/// gradient on the top layer's hidden state at every step.
pub fn stack_backward(layers: &[Cell], out: &StackOutput, grad_top: &[Tensor]) -> Result<StackGrads> {
    let steps = out.caches.len();
    if grad_top.len() != steps {
        return Err(Error::Shape {
            op: "stack_backward",
            left: vec![steps],
            right: vec![grad_top.len()],
        });
    }
    let depth = layers.len();
    let mut grads: Vec<Cell> = layers.iter().map(Cell::zeros_like).collect();
    let mut dh_carry: Vec<Vec<f64>> = layers.iter().map(|c| vec![0.0; c.hidden_size()]).collect();
    let mut dc_carry = dh_carry.clone();
    let mut d_inputs = vec![Tensor::zeros(&[0]); steps];
    for t in (0..steps).rev() {
        let mut from_above = grad_top[t].data().to_vec();
        for l in (0..depth).rev() {
            let cell = &layers[l];
            let dh: Vec<f64> = from_above.iter().zip(&dh_carry[l]).map(|(a, b)| a + b).collect();
            let mut dx = vec![0.0; cell.input_size()];
            let mut dh_prev = vec![0.0; cell.hidden_size()];
            let mut dc_prev = vec![0.0; cell.hidden_size()];
            cell.backward_into(
                &out.caches[t][l],
                &dh,
                &dc_carry[l],
                &mut grads[l],
                &mut dx,
                &mut dh_prev,
                &mut dc_prev,
            )?;
            dh_carry[l] = dh_prev;
            dc_carry[l] = dc_prev;
            from_above = dx;
        }
        d_inputs[t] = Tensor::vector(from_above);
    }
    let initial = RecurrentState {
        layers: layers
            .iter()
            .zip(dh_carry.into_iter().zip(dc_carry))
            .map(|(cell, (h, c))| LayerState {
                h: Tensor::vector(h),
                c: cell.is_lstm().then(|| Tensor::vector(c)),
            })
            .collect(),
    };
    Ok(StackGrads {
        inputs: d_inputs,
        layers: grads,
        initial,
    })
}
