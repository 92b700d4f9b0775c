//! Vanilla RNN, LSTM and GRU cells plus the windowed feed-forward n-NN
//! baseline: single-step forward, windowed forward with optional trace
//! capture, and exact backward through an unrolled window.
//!
//! Layer 0 reads one-hot characters, so its input product is a column gather
//! rather than a dense multiply. Layers above read the (possibly dropped-out)
//! hidden state of the layer below. Every gate block carries a bias.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Id, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, softmax, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Rnn,
    Lstm,
    Gru,
    /// Feed-forward network over a fixed window of previous characters.
    Nnn,
}

impl CellKind {
    pub const RECURRENT: [CellKind; 3] = [CellKind::Rnn, CellKind::Lstm, CellKind::Gru];

    pub fn is_recurrent(self) -> bool {
        self != CellKind::Nnn
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::Rnn => "rnn",
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
            CellKind::Nnn => "nnn",
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rnn" => Ok(CellKind::Rnn),
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            "nnn" | "n-nn" => Ok(CellKind::Nnn),
            other => Err(Error::InvalidArgument(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Architecture descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: CellKind,
    /// Number of stacked recurrent layers; ignored for `nnn`.
    pub layers: usize,
    /// Hidden width per layer (the single hidden layer for `nnn`).
    pub hidden: usize,
    pub vocab_size: usize,
    /// Input window length for `nnn`; zero otherwise.
    #[serde(default)]
    pub window: usize,
}

impl ModelSpec {
    pub fn recurrent(kind: CellKind, layers: usize, hidden: usize, vocab_size: usize) -> Self {
        ModelSpec {
            kind,
            layers,
            hidden,
            vocab_size,
            window: 0,
        }
    }

    pub fn nnn(window: usize, hidden: usize, vocab_size: usize) -> Self {
        ModelSpec {
            kind: CellKind::Nnn,
            layers: 1,
            hidden,
            vocab_size,
            window,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.vocab_size == 0 {
            return Err(Error::InvalidArgument(
                "hidden size and vocabulary size must be positive".into(),
            ));
        }
        match self.kind {
            CellKind::Nnn if self.window == 0 => {
                Err(Error::InvalidArgument("n-NN window length must be positive".into()))
            }
            k if k.is_recurrent() && self.layers == 0 => Err(Error::InvalidArgument(
                "recurrent models need at least one layer".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Recurrent layers actually instantiated.
    pub fn depth(&self) -> usize {
        if self.kind.is_recurrent() {
            self.layers
        } else {
            0
        }
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.vocab_size
        } else {
            self.hidden
        }
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        Params::layout(self).iter().map(|(_, r, c)| r * c).sum()
    }
}

/// Weights of one hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    /// `h = tanh(W·[x; h_prev] + b)`, `W` is `[n × (in+n)]`.
    Rnn { w: Matrix, b: Matrix },
    /// Rows of `W` are the `i, f, o, g` blocks in that order, `[4n × (in+n)]`.
    Lstm { w: Matrix, b: Matrix },
    /// `w_r` is `[2n × (in+n)]` with rows `r` then `z`.
    Gru {
        w_r: Matrix,
        b_r: Matrix,
        w_x: Matrix,
        w_g: Matrix,
        b_h: Matrix,
    },
    /// n-NN hidden layer over `window` concatenated one-hot blocks.
    Window { w: Matrix, b: Matrix },
}

impl LayerParams {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        match self {
            LayerParams::Rnn { w, b } | LayerParams::Lstm { w, b } | LayerParams::Window { w, b } => {
                vec![("w", w), ("b", b)]
            }
            LayerParams::Gru {
                w_r,
                b_r,
                w_x,
                w_g,
                b_h,
            } => vec![("w_r", w_r), ("b_r", b_r), ("w_x", w_x), ("w_g", w_g), ("b_h", b_h)],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            LayerParams::Rnn { w, b } | LayerParams::Lstm { w, b } | LayerParams::Window { w, b } => {
                vec![w, b]
            }
            LayerParams::Gru {
                w_r,
                b_r,
                w_x,
                w_g,
                b_h,
            } => vec![w_r, b_r, w_x, w_g, b_h],
        }
    }
}

/// Full parameter set; also used to hold gradients of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub spec: ModelSpec,
    pub layers: Vec<LayerParams>,
    pub out_w: Matrix,
    pub out_b: Matrix,
}

impl Params {
    /// Tensor names and shapes in the fixed order used by checkpoints and by
    /// the flat views.
    pub fn layout(spec: &ModelSpec) -> Vec<(String, usize, usize)> {
        let n = spec.hidden;
        let mut out = Vec::new();
        match spec.kind {
            CellKind::Nnn => {
                out.push(("hidden.w".to_string(), n, spec.window * spec.vocab_size));
                out.push(("hidden.b".to_string(), n, 1));
            }
            kind => {
                for l in 0..spec.layers {
                    let input = spec.layer_input(l);
                    match kind {
                        CellKind::Rnn => {
                            out.push((format!("layer{l}.w"), n, input + n));
                            out.push((format!("layer{l}.b"), n, 1));
                        }
                        CellKind::Lstm => {
                            out.push((format!("layer{l}.w"), 4 * n, input + n));
                            out.push((format!("layer{l}.b"), 4 * n, 1));
                        }
                        CellKind::Gru => {
                            out.push((format!("layer{l}.w_r"), 2 * n, input + n));
                            out.push((format!("layer{l}.b_r"), 2 * n, 1));
                            out.push((format!("layer{l}.w_x"), n, input));
                            out.push((format!("layer{l}.w_g"), n, n));
                            out.push((format!("layer{l}.b_h"), n, 1));
                        }
                        CellKind::Nnn => unreachable!(),
                    }
                }
            }
        }
        out.push(("output.w".to_string(), spec.vocab_size, n));
        out.push(("output.b".to_string(), spec.vocab_size, 1));
        out
    }

    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.hidden;
        let layers = match spec.kind {
            CellKind::Nnn => vec![LayerParams::Window {
                w: Matrix::zeros(n, spec.window * spec.vocab_size),
                b: Matrix::zeros(n, 1),
            }],
            kind => (0..spec.layers)
                .map(|l| {
                    let input = spec.layer_input(l);
                    match kind {
                        CellKind::Rnn => LayerParams::Rnn {
                            w: Matrix::zeros(n, input + n),
                            b: Matrix::zeros(n, 1),
                        },
                        CellKind::Lstm => LayerParams::Lstm {
                            w: Matrix::zeros(4 * n, input + n),
                            b: Matrix::zeros(4 * n, 1),
                        },
                        _ => LayerParams::Gru {
                            w_r: Matrix::zeros(2 * n, input + n),
                            b_r: Matrix::zeros(2 * n, 1),
                            w_x: Matrix::zeros(n, input),
                            w_g: Matrix::zeros(n, n),
                            b_h: Matrix::zeros(n, 1),
                        },
                    }
                })
                .collect(),
        };
        Ok(Params {
            spec,
            layers,
            out_w: Matrix::zeros(spec.vocab_size, n),
            out_b: Matrix::zeros(spec.vocab_size, 1),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    /// Named tensors in [`layout`](Self::layout) order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let prefix = match layer {
                LayerParams::Window { .. } => "hidden".to_string(),
                _ => format!("layer{l}"),
            };
            for (name, t) in layer.tensors() {
                out.push((format!("{prefix}.{name}"), t));
            }
        }
        out.push(("output.w".to_string(), &self.out_w));
        out.push(("output.b".to_string(), &self.out_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        for layer in self.layers.iter_mut() {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.out_w);
        out.push(&mut self.out_b);
        out
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.named_tensors()
            .into_iter()
            .flat_map(|(_, t)| t.data().to_vec())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.spec.param_count();
        if flat.len() != total {
            return Err(Error::shape("Params::set_flat", total, flat.len()));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let len = t.data().len();
            t.data_mut().copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Params) {
        let others: Vec<Matrix> = other.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
        for (t, o) in self.tensors_mut().into_iter().zip(others) {
            for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Sets one bias row-block of every LSTM layer; `block` is 0..4 for
    /// `i, f, o, g`. Used for forget-gate bias initialization and for
    /// constructing saturated test models.
    pub fn set_lstm_gate_bias(&mut self, block: usize, value: f64) {
        let n = self.spec.hidden;
        for layer in self.layers.iter_mut() {
            if let LayerParams::Lstm { b, .. } = layer {
                b.data_mut()[block * n..(block + 1) * n].fill(value);
            }
        }
    }
}

/// Carried state between windows: hidden (and LSTM cell) vectors per layer,
/// plus the trailing characters an n-NN needs to fill its window.
#[derive(Debug, Clone, PartialEq)]
pub struct StepState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub history: Vec<Id>,
}

impl StepState {
    pub fn zeros(spec: &ModelSpec) -> Self {
        let depth = spec.depth();
        let c_len = if spec.kind == CellKind::Lstm { spec.hidden } else { 0 };
        StepState {
            h: vec![vec![0.0; spec.hidden]; depth],
            c: vec![vec![0.0; c_len]; depth],
            history: Vec::new(),
        }
    }
}

/// Activation names captured in traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    /// LSTM input gate `i`.
    Input,
    /// LSTM forget gate `f`.
    Forget,
    /// LSTM output gate `o`.
    Output,
    /// LSTM cell update `g`.
    CellInput,
    /// LSTM cell state `c`.
    Cell,
    /// GRU reset gate `r`.
    Reset,
    /// GRU update gate `z`.
    Update,
    /// GRU candidate `h̃`.
    Candidate,
    /// Vanilla RNN pre-activation.
    PreActivation,
    Hidden,
}

impl Gate {
    pub fn as_str(self) -> &'static str {
        match self {
            Gate::Input => "i",
            Gate::Forget => "f",
            Gate::Output => "o",
            Gate::CellInput => "g",
            Gate::Cell => "c",
            Gate::Reset => "r",
            Gate::Update => "z",
            Gate::Candidate => "h_tilde",
            Gate::PreActivation => "pre",
            Gate::Hidden => "h",
        }
    }

    /// Sigmoid gates whose saturation is meaningful.
    pub fn sigmoid_gates(kind: CellKind) -> &'static [Gate] {
        match kind {
            CellKind::Lstm => &[Gate::Input, Gate::Forget, Gate::Output],
            CellKind::Gru => &[Gate::Reset, Gate::Update],
            _ => &[],
        }
    }
}

/// Per-layer activations of one sequence, indexed `[timestep][unit]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerTrace {
    pub gates: BTreeMap<Gate, Vec<Vec<f64>>>,
}

impl LayerTrace {
    fn push(&mut self, gate: Gate, v: &[f64]) {
        self.gates.entry(gate).or_default().push(v.to_vec());
    }

    pub fn get(&self, gate: Gate) -> Option<&Vec<Vec<f64>>> {
        self.gates.get(&gate)
    }

    fn extend(&mut self, other: LayerTrace) {
        for (g, rows) in other.gates {
            self.gates.entry(g).or_default().extend(rows);
        }
    }
}

/// Gate and cell activations for one batch row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepTrace {
    pub layers: Vec<LayerTrace>,
}

impl StepTrace {
    /// Appends a later window's trace.
    pub fn extend(&mut self, other: StepTrace) {
        if self.layers.is_empty() {
            *self = other;
            return;
        }
        for (a, b) in self.layers.iter_mut().zip(other.layers) {
            a.extend(b);
        }
    }

    pub fn timesteps(&self) -> usize {
        self.layers
            .first()
            .and_then(|l| l.gates.values().next())
            .map_or(0, |v| v.len())
    }
}

/// Input to a hidden layer: a character id (layer 0) or a dense vector.
#[derive(Debug, Clone, Copy)]
pub enum LayerInput<'a> {
    OneHot(Id),
    Dense(&'a [f64]),
}

impl LayerInput<'_> {
    fn width_check(&self, expected: usize) -> Result<()> {
        match *self {
            LayerInput::OneHot(id) if (id as usize) < expected => Ok(()),
            LayerInput::OneHot(id) => Err(Error::IdOutOfRange {
                id: id as usize,
                size: expected,
            }),
            LayerInput::Dense(x) if x.len() == expected => Ok(()),
            LayerInput::Dense(x) => Err(Error::shape("layer input", expected, x.len())),
        }
    }

    /// `out += W[:, ..in] · x`.
    fn apply(&self, w: &Matrix, out: &mut [f64]) {
        match *self {
            LayerInput::OneHot(id) => w.gather_col_acc(id as usize, out),
            LayerInput::Dense(x) => w.gemv_acc(0, x, out),
        }
    }

    fn width(&self, w: &Matrix, n_recurrent: usize) -> usize {
        w.cols() - n_recurrent
    }
}

fn bias_init(b: &Matrix) -> Vec<f64> {
    b.data().to_vec()
}

fn check_hidden(op: &'static str, v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::shape(op, n, v.len()));
    }
    Ok(())
}

/// Activations of one LSTM step.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmStep {
    /// `[i; f; o; g]` after their nonlinearities.
    pub gates: Vec<f64>,
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

impl LstmStep {
    pub fn block(&self, k: usize) -> &[f64] {
        let n = self.c.len();
        &self.gates[k * n..(k + 1) * n]
    }
}

/// Activations of one GRU step.
#[derive(Debug, Clone, PartialEq)]
pub struct GruStep {
    /// `[r; z]`.
    pub gates: Vec<f64>,
    pub candidate: Vec<f64>,
    pub h: Vec<f64>,
}

/// `h = tanh(W·[x; h_prev] + b)`. Returns `(pre-activation, h)`.
pub fn rnn_step(params: &LayerParams, x: LayerInput<'_>, h_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let LayerParams::Rnn { w, b } = params else {
        return Err(Error::InvalidArgument("rnn_step needs RNN parameters".into()));
    };
    let n = b.rows();
    check_hidden("rnn_step h_prev", h_prev, n)?;
    let input = x.width(w, n);
    x.width_check(input)?;
    let mut a = bias_init(b);
    x.apply(w, &mut a);
    w.gemv_acc(input, h_prev, &mut a);
    let h = a.iter().map(|v| v.tanh()).collect();
    Ok((a, h))
}

/// LSTM step: `i,f,o = σ(·)`, `g = tanh(·)`, `c = f⊙c_prev + i⊙g`,
/// `h = o⊙tanh(c)`.
pub fn lstm_step(params: &LayerParams, x: LayerInput<'_>, h_prev: &[f64], c_prev: &[f64]) -> Result<LstmStep> {
    let LayerParams::Lstm { w, b } = params else {
        return Err(Error::InvalidArgument("lstm_step needs LSTM parameters".into()));
    };
    let n = b.rows() / 4;
    check_hidden("lstm_step h_prev", h_prev, n)?;
    check_hidden("lstm_step c_prev", c_prev, n)?;
    let input = x.width(w, n);
    x.width_check(input)?;
    let mut a = bias_init(b);
    x.apply(w, &mut a);
    w.gemv_acc(input, h_prev, &mut a);
    for v in &mut a[..3 * n] {
        *v = sigmoid(*v);
    }
    for v in &mut a[3 * n..] {
        *v = v.tanh();
    }
    let mut c = vec![0.0; n];
    let mut h = vec![0.0; n];
    for j in 0..n {
        let (i, f, o, g) = (a[j], a[n + j], a[2 * n + j], a[3 * n + j]);
        c[j] = f * c_prev[j] + i * g;
        h[j] = o * c[j].tanh();
    }
    Ok(LstmStep { gates: a, c, h })
}

/// GRU step: `r,z = σ(W_r·[x; h_prev] + b_r)`,
/// `h̃ = tanh(W_x·x + W_g·(r⊙h_prev) + b_h)`, `h = (1−z)⊙h_prev + z⊙h̃`.
pub fn gru_step(params: &LayerParams, x: LayerInput<'_>, h_prev: &[f64]) -> Result<GruStep> {
    let LayerParams::Gru {
        w_r,
        b_r,
        w_x,
        w_g,
        b_h,
    } = params
    else {
        return Err(Error::InvalidArgument("gru_step needs GRU parameters".into()));
    };
    let n = b_h.rows();
    check_hidden("gru_step h_prev", h_prev, n)?;
    let input = w_x.cols();
    x.width_check(input)?;
    let mut a = bias_init(b_r);
    x.apply(w_r, &mut a);
    w_r.gemv_acc(input, h_prev, &mut a);
    a.iter_mut().for_each(|v| *v = sigmoid(*v));
    let rh: Vec<f64> = (0..n).map(|j| a[j] * h_prev[j]).collect();
    let mut cand = bias_init(b_h);
    x.apply(w_x, &mut cand);
    w_g.gemv_acc(0, &rh, &mut cand);
    cand.iter_mut().for_each(|v| *v = v.tanh());
    let h = (0..n)
        .map(|j| {
            let z = a[n + j];
            (1.0 - z) * h_prev[j] + z * cand[j]
        })
        .collect();
    Ok(GruStep {
        gates: a,
        candidate: cand,
        h,
    })
}

/// n-NN logits for one window of `spec.window` ids (oldest first). `None`
/// entries (before the start of a stream) contribute an all-zero block.
pub fn nnn_forward(params: &Params, window: &[Option<Id>]) -> Result<Vec<f64>> {
    let (_, logits) = nnn_hidden_logits(params, window)?;
    Ok(logits)
}

fn nnn_hidden_logits(params: &Params, window: &[Option<Id>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let spec = &params.spec;
    if spec.kind != CellKind::Nnn {
        return Err(Error::InvalidArgument("nnn_forward needs n-NN parameters".into()));
    }
    if window.len() != spec.window {
        return Err(Error::shape("nnn_forward window", spec.window, window.len()));
    }
    let LayerParams::Window { w, b } = &params.layers[0] else {
        unreachable!("n-NN layout");
    };
    let k = spec.vocab_size;
    let mut a = bias_init(b);
    for (j, id) in window.iter().enumerate() {
        if let Some(id) = *id {
            if id as usize >= k {
                return Err(Error::IdOutOfRange {
                    id: id as usize,
                    size: k,
                });
            }
            w.gather_col_acc(j * k + id as usize, &mut a);
        }
    }
    let h: Vec<f64> = a.iter().map(|v| v.tanh()).collect();
    let mut logits = bias_init(&params.out_b);
    params.out_w.gemv_acc(0, &h, &mut logits);
    Ok((h, logits))
}

/// Inverted dropout on between-layer connections, `p` is the drop
/// probability.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn mask(&mut self, n: usize) -> Vec<f64> {
        let keep = 1.0 / (1.0 - self.p);
        (0..n)
            .map(|_| if self.rng.random::<f64>() < self.p { 0.0 } else { keep })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct LayerStepCache {
    /// Dense input after dropout (empty on layer 0).
    x: Vec<f64>,
    mask: Option<Vec<f64>>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Post-nonlinearity gate activations (RNN: h, LSTM: i f o g, GRU: r z).
    act: Vec<f64>,
    /// LSTM cell, GRU candidate.
    aux: Vec<f64>,
    h: Vec<f64>,
}

#[derive(Debug, Clone)]
struct StepCache {
    id: Id,
    window: Vec<Option<Id>>,
    /// n-NN hidden activation before dropout.
    window_hidden: Vec<f64>,
    layers: Vec<LayerStepCache>,
    /// Input to the output projection, after dropout.
    top: Vec<f64>,
    top_mask: Option<Vec<f64>>,
}

/// Everything the backward pass needs from a forward window.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    rows: Vec<Vec<StepCache>>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.rows.len()
    }

    pub fn unroll(&self) -> usize {
        self.rows.first().map_or(0, |r| r.len())
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[batch][timestep][K]`.
    pub logits: Vec<Vec<Vec<f64>>>,
    pub state: Vec<StepState>,
    pub traces: Option<Vec<StepTrace>>,
    pub cache: ForwardCache,
}

/// Runs every row of a `B×T` window through the model, starting from
/// `state0[b]`. Traces are collected only when `capture` is set; dropout
/// masks are drawn only when `dropout` is given.
pub fn forward_window(
    params: &Params,
    inputs: &[Vec<Id>],
    state0: &[StepState],
    capture: bool,
    mut dropout: Option<Dropout<'_>>,
) -> Result<ForwardOutput> {
    if inputs.len() != state0.len() {
        return Err(Error::shape("forward_window state rows", inputs.len(), state0.len()));
    }
    let unroll = inputs.first().map_or(0, |r| r.len());
    if inputs.iter().any(|r| r.len() != unroll) {
        return Err(Error::InvalidArgument("ragged input window".into()));
    }
    let mut logits = Vec::with_capacity(inputs.len());
    let mut states = Vec::with_capacity(inputs.len());
    let mut traces = capture.then(Vec::new);
    let mut rows = Vec::with_capacity(inputs.len());
    for (row, s0) in inputs.iter().zip(state0) {
        let (lg, st, tr, cache) = forward_row(params, row, s0, capture, dropout.as_mut())?;
        logits.push(lg);
        states.push(st);
        if let (Some(t), Some(tr)) = (traces.as_mut(), tr) {
            t.push(tr);
        }
        rows.push(cache);
    }
    Ok(ForwardOutput {
        logits,
        state: states,
        traces,
        cache: ForwardCache { rows },
    })
}

type RowOutput = (Vec<Vec<f64>>, StepState, Option<StepTrace>, Vec<StepCache>);

fn forward_row(
    params: &Params,
    row: &[Id],
    state0: &StepState,
    capture: bool,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<RowOutput> {
    let spec = &params.spec;
    let k = spec.vocab_size;
    if let Some(&bad) = row.iter().find(|&&id| id as usize >= k) {
        return Err(Error::IdOutOfRange {
            id: bad as usize,
            size: k,
        });
    }
    let depth = spec.depth();
    let mut state = state0.clone();
    if state.h.len() != depth {
        return Err(Error::shape("StepState layers", depth, state.h.len()));
    }
    let mut trace = capture.then(|| StepTrace {
        layers: vec![LayerTrace::default(); depth.max(1)],
    });
    let mut logits = Vec::with_capacity(row.len());
    let mut caches = Vec::with_capacity(row.len());

    for (t, &id) in row.iter().enumerate() {
        let mut step = StepCache {
            id,
            window: Vec::new(),
            window_hidden: Vec::new(),
            layers: Vec::with_capacity(depth),
            top: Vec::new(),
            top_mask: None,
        };
        let mut below: Vec<f64> = Vec::new();
        if spec.kind == CellKind::Nnn {
            state.history.push(id);
            let keep = state.history.len().saturating_sub(spec.window);
            state.history.drain(..keep);
            let pad = spec.window - state.history.len();
            step.window = std::iter::repeat_n(None, pad)
                .chain(state.history.iter().map(|&i| Some(i)))
                .collect();
            let (h, _) = nnn_hidden_logits(params, &step.window)?;
            if h.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "n-NN hidden",
                    layer: 0,
                    timestep: t,
                });
            }
            if let Some(tr) = trace.as_mut() {
                tr.layers[0].push(Gate::Hidden, &h);
            }
            step.window_hidden = h.clone();
            below = h;
        }
        for l in 0..depth {
            let mut x = Vec::new();
            let mut mask = None;
            let input = if l == 0 {
                LayerInput::OneHot(id)
            } else {
                x = below.clone();
                if let Some(d) = dropout.as_deref_mut() {
                    let m = d.mask(x.len());
                    x.iter_mut().zip(&m).for_each(|(v, m)| *v *= m);
                    mask = Some(m);
                }
                LayerInput::Dense(&x)
            };
            let lp = &params.layers[l];
            let h_prev = std::mem::take(&mut state.h[l]);
            let c_prev = std::mem::take(&mut state.c[l]);
            let (act, aux, h) = match spec.kind {
                CellKind::Rnn => {
                    let (pre, h) = rnn_step(lp, input, &h_prev)?;
                    if let Some(tr) = trace.as_mut() {
                        tr.layers[l].push(Gate::PreActivation, &pre);
                    }
                    (h.clone(), Vec::new(), h)
                }
                CellKind::Lstm => {
                    let s = lstm_step(lp, input, &h_prev, &c_prev)?;
                    if let Some(tr) = trace.as_mut() {
                        let lt = &mut tr.layers[l];
                        lt.push(Gate::Input, s.block(0));
                        lt.push(Gate::Forget, s.block(1));
                        lt.push(Gate::Output, s.block(2));
                        lt.push(Gate::CellInput, s.block(3));
                        lt.push(Gate::Cell, &s.c);
                    }
                    (s.gates, s.c, s.h)
                }
                CellKind::Gru => {
                    let s = gru_step(lp, input, &h_prev)?;
                    if let Some(tr) = trace.as_mut() {
                        let n = spec.hidden;
                        let lt = &mut tr.layers[l];
                        lt.push(Gate::Reset, &s.gates[..n]);
                        lt.push(Gate::Update, &s.gates[n..]);
                        lt.push(Gate::Candidate, &s.candidate);
                    }
                    (s.gates, s.candidate, s.h)
                }
                CellKind::Nnn => unreachable!(),
            };
            if h.iter().chain(&aux).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "hidden activation",
                    layer: l,
                    timestep: t,
                });
            }
            if let Some(tr) = trace.as_mut() {
                tr.layers[l].push(Gate::Hidden, &h);
            }
            state.h[l] = h.clone();
            if spec.kind == CellKind::Lstm {
                state.c[l] = aux.clone();
            }
            below = h.clone();
            step.layers.push(LayerStepCache {
                x,
                mask,
                h_prev,
                c_prev,
                act,
                aux,
                h,
            });
        }
        let mut top = below;
        if let Some(d) = dropout.as_deref_mut() {
            let m = d.mask(top.len());
            top.iter_mut().zip(&m).for_each(|(v, m)| *v *= m);
            step.top_mask = Some(m);
        }
        let mut y = bias_init(&params.out_b);
        params.out_w.gemv_acc(0, &top, &mut y);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "logits",
                layer: depth,
                timestep: t,
            });
        }
        step.top = top;
        logits.push(y);
        caches.push(step);
    }
    Ok((logits, state, trace, caches))
}

/// Gradients of one window.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Params,
    /// Gradient with respect to each row's initial state; the trainer drops
    /// it (truncated BPTT).
    pub state0: Vec<StepState>,
}

/// Exact reverse-mode gradients of `Σ dlogits · logits` through the window.
pub fn backward_window(params: &Params, cache: &ForwardCache, dlogits: &[Vec<Vec<f64>>]) -> Result<Gradients> {
    if dlogits.len() != cache.rows.len() {
        return Err(Error::shape("backward_window rows", cache.rows.len(), dlogits.len()));
    }
    let mut grads = params.zeros_like();
    let mut dstate = Vec::with_capacity(cache.rows.len());
    for (row, dl) in cache.rows.iter().zip(dlogits) {
        if dl.len() != row.len() || dl.iter().any(|d| d.len() != params.spec.vocab_size) {
            return Err(Error::shape(
                "backward_window dlogits",
                format!("{}×{}", row.len(), params.spec.vocab_size),
                format!("{}×?", dl.len()),
            ));
        }
        dstate.push(backward_row(params, row, dl, &mut grads));
    }
    Ok(Gradients {
        params: grads,
        state0: dstate,
    })
}

fn backward_row(params: &Params, row: &[StepCache], dlogits: &[Vec<f64>], grads: &mut Params) -> StepState {
    let spec = params.spec;
    let n = spec.hidden;
    let depth = spec.depth();
    let mut dh_next = vec![vec![0.0; n]; depth];
    let mut dc_next = vec![vec![0.0; n]; depth];

    for (step, dy) in row.iter().zip(dlogits).rev() {
        grads.out_w.outer_acc(0, dy, &step.top);
        add_into(grads.out_b.data_mut(), dy);
        let mut dtop = vec![0.0; n];
        params.out_w.gemv_t_acc(0, dy, &mut dtop);
        if let Some(m) = &step.top_mask {
            dtop.iter_mut().zip(m).for_each(|(d, m)| *d *= m);
        }

        if spec.kind == CellKind::Nnn {
            nnn_backward(params, step, dtop, grads);
            continue;
        }

        let mut dabove = dtop;
        for l in (0..depth).rev() {
            let lc = &step.layers[l];
            let mut dh = std::mem::take(&mut dabove);
            add_into(&mut dh, &dh_next[l]);
            let input_width = if l == 0 { spec.vocab_size } else { n };
            let mut dx = vec![0.0; if l == 0 { 0 } else { input_width }];
            let (gp, gc) = (&params.layers[l], &mut grads.layers[l]);
            let dh_prev;
            match (gp, gc) {
                (LayerParams::Rnn { w, .. }, LayerParams::Rnn { w: gw, b: gb }) => {
                    let da: Vec<f64> = dh.iter().zip(&lc.h).map(|(d, h)| d * (1.0 - h * h)).collect();
                    dh_prev = accumulate_concat(w, gw, &da, l, step.id, &lc.x, &lc.h_prev, input_width, &mut dx);
                    add_into(gb.data_mut(), &da);
                }
                (LayerParams::Lstm { w, .. }, LayerParams::Lstm { w: gw, b: gb }) => {
                    let a = &lc.act;
                    let mut da = vec![0.0; 4 * n];
                    let mut dc_prev = vec![0.0; n];
                    for j in 0..n {
                        let (i, f, o, g) = (a[j], a[n + j], a[2 * n + j], a[3 * n + j]);
                        let tc = lc.aux[j].tanh();
                        let dc = dc_next[l][j] + dh[j] * o * (1.0 - tc * tc);
                        let d_o = dh[j] * tc;
                        let d_i = dc * g;
                        let d_g = dc * i;
                        let d_f = dc * lc.c_prev[j];
                        dc_prev[j] = dc * f;
                        da[j] = d_i * i * (1.0 - i);
                        da[n + j] = d_f * f * (1.0 - f);
                        da[2 * n + j] = d_o * o * (1.0 - o);
                        da[3 * n + j] = d_g * (1.0 - g * g);
                    }
                    dc_next[l] = dc_prev;
                    dh_prev = accumulate_concat(w, gw, &da, l, step.id, &lc.x, &lc.h_prev, input_width, &mut dx);
                    add_into(gb.data_mut(), &da);
                }
                (
                    LayerParams::Gru { w_r, w_x, w_g, .. },
                    LayerParams::Gru {
                        w_r: gw_r,
                        b_r: gb_r,
                        w_x: gw_x,
                        w_g: gw_g,
                        b_h: gb_h,
                    },
                ) => {
                    let a = &lc.act;
                    let cand = &lc.aux;
                    let hp = &lc.h_prev;
                    let mut dhp = vec![0.0; n];
                    let mut dcand_pre = vec![0.0; n];
                    let mut dgates = vec![0.0; 2 * n];
                    for j in 0..n {
                        let z = a[n + j];
                        let dz = dh[j] * (cand[j] - hp[j]);
                        dcand_pre[j] = dh[j] * z * (1.0 - cand[j] * cand[j]);
                        dhp[j] = dh[j] * (1.0 - z);
                        dgates[n + j] = dz * z * (1.0 - z);
                    }
                    let rh: Vec<f64> = (0..n).map(|j| a[j] * hp[j]).collect();
                    gw_g.outer_acc(0, &dcand_pre, &rh);
                    add_into(gb_h.data_mut(), &dcand_pre);
                    let mut drh = vec![0.0; n];
                    w_g.gemv_t_acc(0, &dcand_pre, &mut drh);
                    for j in 0..n {
                        let r = a[j];
                        dgates[j] = drh[j] * hp[j] * r * (1.0 - r);
                        dhp[j] += drh[j] * r;
                    }
                    if l == 0 {
                        gw_x.scatter_col_acc(step.id as usize, &dcand_pre);
                    } else {
                        gw_x.outer_acc(0, &dcand_pre, &lc.x);
                        w_x.gemv_t_acc(0, &dcand_pre, &mut dx);
                    }
                    let dhp2 = accumulate_concat(w_r, gw_r, &dgates, l, step.id, &lc.x, hp, input_width, &mut dx);
                    add_into(gb_r.data_mut(), &dgates);
                    add_into(&mut dhp, &dhp2);
                    dh_prev = dhp;
                }
                _ => unreachable!("gradient layout mirrors parameters"),
            }
            dh_next[l] = dh_prev;
            if l > 0 {
                if let Some(m) = &lc.mask {
                    dx.iter_mut().zip(m).for_each(|(d, m)| *d *= m);
                }
                dabove = dx;
            }
        }
    }
    let mut st = StepState::zeros(&spec);
    st.h = dh_next;
    if spec.kind == CellKind::Lstm {
        st.c = dc_next;
    }
    st
}

/// Accumulates `gW += da ⊗ [x; h_prev]`, adds `W_xᵀ·da` into `dx`, and returns
/// `W_hᵀ·da` (the gradient flowing to the previous hidden state).
#[allow(clippy::too_many_arguments)]
fn accumulate_concat(
    w: &Matrix,
    gw: &mut Matrix,
    da: &[f64],
    layer: usize,
    id: Id,
    x: &[f64],
    h_prev: &[f64],
    input_width: usize,
    dx: &mut [f64],
) -> Vec<f64> {
    if layer == 0 {
        gw.scatter_col_acc(id as usize, da);
    } else {
        gw.outer_acc(0, da, x);
        w.gemv_t_acc(0, da, dx);
    }
    gw.outer_acc(input_width, da, h_prev);
    let mut dh_prev = vec![0.0; h_prev.len()];
    w.gemv_t_acc(input_width, da, &mut dh_prev);
    dh_prev
}

fn nnn_backward(params: &Params, step: &StepCache, dtop: Vec<f64>, grads: &mut Params) {
    let k = params.spec.vocab_size;
    let da: Vec<f64> = dtop
        .iter()
        .zip(&step.window_hidden)
        .map(|(d, h)| d * (1.0 - h * h))
        .collect();
    let LayerParams::Window { w: gw, b: gb } = &mut grads.layers[0] else {
        unreachable!("n-NN layout");
    };
    for (j, id) in step.window.iter().enumerate() {
        if let Some(id) = *id {
            gw.scatter_col_acc(j * k + id as usize, &da);
        }
    }
    add_into(gb.data_mut(), &da);
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

/// Autoregressive sampling: feeds `seed`, then draws `length` characters from
/// `softmax(logits / temperature)` with a seeded RNG.
pub fn sample(
    params: &Params,
    vocab: &Vocabulary,
    seed: &str,
    length: usize,
    temperature: f64,
    rng_seed: u64,
) -> Result<String> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if vocab.len() != params.spec.vocab_size {
        return Err(Error::Mismatch(format!(
            "vocabulary has {} characters, model expects {}",
            vocab.len(),
            params.spec.vocab_size
        )));
    }
    let ids = vocab.encode(seed)?;
    if ids.is_empty() {
        return Err(Error::Empty("sampling seed"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut state = vec![StepState::zeros(&params.spec)];
    let out = forward_window(params, &[ids], &state, false, None)?;
    state = out.state;
    let mut logits = out.logits[0].last().cloned().expect("non-empty seed");
    let mut text = String::with_capacity(length);
    for _ in 0..length {
        let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
        let p = softmax(&scaled);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut next = p.len() - 1;
        for (i, pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                next = i;
                break;
            }
        }
        let id = next as Id;
        text.push(vocab.char(id).expect("id within vocabulary"));
        let out = forward_window(params, &[vec![id]], &state, false, None)?;
        state = out.state;
        logits = out.logits[0][0].clone();
    }
    Ok(text)
}
