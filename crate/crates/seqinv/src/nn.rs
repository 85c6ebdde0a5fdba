//! Recurrent sequence-model primitives: gated cell, bidirectional encoder,
//! autoregressive decoder, and the dense regression head.
//!
//! These are the single-sequence forward implementations used by inference
//! and tests. Training uses the batched graph builders in [`crate::model`],
//! which must agree with these numerically (covered by cross-tests there).

use crate::error::{Error, Result};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Candidate-gate nonlinearity of the recurrent cell.
///
/// `Standard` uses tanh for the candidate gate. `SigmoidCandidate` applies
/// the logistic function to the candidate as well, which restricts cell
/// updates to [0, 1]; it is selectable for comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GateMode {
    #[default]
    Standard,
    SigmoidCandidate,
}

/// Nonlinearity of the regression head's hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Affine layer: `y = weight . x + bias`, weight is `out x in`, bias `1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl DenseParams {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        DenseParams {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array2::zeros((1, out_dim)),
        }
    }

    /// Uniform init in +-1/sqrt(fan_in); zero bias.
    pub fn init<R: Rng>(rng: &mut R, in_dim: usize, out_dim: usize) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        DenseParams {
            weight: Array2::from_shape_fn((out_dim, in_dim), |_| rng.random_range(-bound..bound)),
            bias: Array2::zeros((1, out_dim)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn apply(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::Contract(format!(
                "dense input dim {} does not match weight columns {}",
                x.len(),
                self.in_dim()
            )));
        }
        Ok(self.weight.dot(&x) + &self.bias.row(0))
    }
}

/// Gate parameters of one recurrent cell. Each gate matrix acts on the
/// concatenation `[input ; hidden]` and is therefore `H x (D_in + H)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellParams {
    pub w_i: Array2<f64>,
    pub w_f: Array2<f64>,
    pub w_g: Array2<f64>,
    pub w_o: Array2<f64>,
    pub b_i: Array2<f64>,
    pub b_f: Array2<f64>,
    pub b_g: Array2<f64>,
    pub b_o: Array2<f64>,
}

impl LstmCellParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        let w = || Array2::zeros((hidden, input_dim + hidden));
        let b = || Array2::zeros((1, hidden));
        LstmCellParams {
            w_i: w(),
            w_f: w(),
            w_g: w(),
            w_o: w(),
            b_i: b(),
            b_f: b(),
            b_g: b(),
            b_o: b(),
        }
    }

    /// Uniform init in +-1/sqrt(D_in + H); forget-gate bias +1, others zero.
    pub fn init<R: Rng>(rng: &mut R, input_dim: usize, hidden: usize) -> Self {
        let fan_in = input_dim + hidden;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut w = || Array2::from_shape_fn((hidden, fan_in), |_| rng.random_range(-bound..bound));
        let w_i = w();
        let w_f = w();
        let w_g = w();
        let w_o = w();
        LstmCellParams {
            w_i,
            w_f,
            w_g,
            w_o,
            b_i: Array2::zeros((1, hidden)),
            b_f: Array2::from_elem((1, hidden), 1.0),
            b_g: Array2::zeros((1, hidden)),
            b_o: Array2::zeros((1, hidden)),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w_i.nrows()
    }

    pub fn input_size(&self) -> usize {
        self.w_i.ncols() - self.w_i.nrows()
    }

    fn check_consistent(&self) -> Result<()> {
        let shape = self.w_i.dim();
        for (name, w) in [("w_f", &self.w_f), ("w_g", &self.w_g), ("w_o", &self.w_o)] {
            if w.dim() != shape {
                return Err(Error::Contract(format!(
                    "gate matrix {name} shape {:?} differs from w_i {:?}",
                    w.dim(),
                    shape
                )));
            }
        }
        Ok(())
    }
}

/// Hidden and cell state of one recurrent cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub hidden: Array1<f64>,
    pub cell: Array1<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            hidden: Array1::zeros(hidden),
            cell: Array1::zeros(hidden),
        }
    }
}

/// One cell update. The hidden output satisfies `|h'_j| < 1` because it is
/// a product of a sigmoid and a tanh.
pub fn lstm_cell_step(
    params: &LstmCellParams,
    mode: GateMode,
    input: ArrayView1<f64>,
    state: &LstmState,
) -> Result<LstmState> {
    params.check_consistent()?;
    let h = params.hidden_size();
    let d = params.input_size();
    if input.len() != d {
        return Err(Error::Contract(format!(
            "cell input dim {} does not match expected {}",
            input.len(),
            d
        )));
    }
    if state.hidden.len() != h || state.cell.len() != h {
        return Err(Error::Contract(format!(
            "cell state dim ({}, {}) does not match hidden size {}",
            state.hidden.len(),
            state.cell.len(),
            h
        )));
    }
    let mut xh = Array1::zeros(d + h);
    xh.slice_mut(s![..d]).assign(&input);
    xh.slice_mut(s![d..]).assign(&state.hidden);

    let gate_i = (params.w_i.dot(&xh) + &params.b_i.row(0)).mapv(sigmoid);
    let gate_f = (params.w_f.dot(&xh) + &params.b_f.row(0)).mapv(sigmoid);
    let pre_g = params.w_g.dot(&xh) + &params.b_g.row(0);
    let gate_g = match mode {
        GateMode::Standard => pre_g.mapv(f64::tanh),
        GateMode::SigmoidCandidate => pre_g.mapv(sigmoid),
    };
    let gate_o = (params.w_o.dot(&xh) + &params.b_o.row(0)).mapv(sigmoid);

    let cell = &gate_f * &state.cell + &gate_i * &gate_g;
    let hidden = &gate_o * &cell.mapv(f64::tanh);
    Ok(LstmState { hidden, cell })
}

/// Bidirectional encoder: one cell runs the sequence forward in time, a
/// twin cell runs it reversed, and the two final hidden states are added.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub forward_cell: LstmCellParams,
    pub backward_cell: LstmCellParams,
}

impl EncoderParams {
    pub fn new(forward_cell: LstmCellParams, backward_cell: LstmCellParams) -> Result<Self> {
        if forward_cell.w_i.dim() != backward_cell.w_i.dim() {
            return Err(Error::Contract(
                "encoder cells must share hidden and input sizes".into(),
            ));
        }
        Ok(EncoderParams {
            forward_cell,
            backward_cell,
        })
    }

    pub fn init<R: Rng>(rng: &mut R, input_dim: usize, hidden: usize) -> Self {
        EncoderParams {
            forward_cell: LstmCellParams::init(rng, input_dim, hidden),
            backward_cell: LstmCellParams::init(rng, input_dim, hidden),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.forward_cell.hidden_size()
    }

    pub fn input_size(&self) -> usize {
        self.forward_cell.input_size()
    }
}

fn run_direction(
    cell: &LstmCellParams,
    mode: GateMode,
    sequence: ArrayView2<f64>,
    reversed: bool,
) -> Result<Array1<f64>> {
    let mut state = LstmState::zeros(cell.hidden_size());
    let rows = sequence.nrows();
    for t in 0..rows {
        let idx = if reversed { rows - 1 - t } else { t };
        state = lstm_cell_step(cell, mode, sequence.row(idx), &state)?;
    }
    Ok(state.hidden)
}

/// Embed a `W x (D_x + 1)` sequence: sum of the final hidden states of the
/// forward and time-reversed passes, both from zero initial state.
pub fn encode(
    params: &EncoderParams,
    mode: GateMode,
    sequence: ArrayView2<f64>,
) -> Result<Array1<f64>> {
    if sequence.nrows() == 0 {
        return Err(Error::Contract("encode requires a non-empty sequence".into()));
    }
    if sequence.ncols() != params.input_size() {
        return Err(Error::Contract(format!(
            "sequence width {} does not match encoder input size {}",
            sequence.ncols(),
            params.input_size()
        )));
    }
    let h_f = run_direction(&params.forward_cell, mode, sequence, false)?;
    let h_b = run_direction(&params.backward_cell, mode, sequence, true)?;
    Ok(h_f + h_b)
}

/// Autoregressive decoder: seeded with the embedding as initial hidden
/// state, zero cell state, and a learned start token as first input; each
/// emitted row is fed back as the next step's input.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub cell: LstmCellParams,
    pub projection: DenseParams,
    pub start_token: Array2<f64>,
}

impl DecoderParams {
    pub fn zeros(output_dim: usize, hidden: usize) -> Self {
        DecoderParams {
            cell: LstmCellParams::zeros(output_dim, hidden),
            projection: DenseParams::zeros(hidden, output_dim),
            start_token: Array2::zeros((1, output_dim)),
        }
    }

    pub fn init<R: Rng>(rng: &mut R, output_dim: usize, hidden: usize) -> Self {
        DecoderParams {
            cell: LstmCellParams::init(rng, output_dim, hidden),
            projection: DenseParams::init(rng, hidden, output_dim),
            start_token: Array2::zeros((1, output_dim)),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.cell.hidden_size()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.out_dim()
    }

    fn check(&self) -> Result<()> {
        if self.projection.in_dim() != self.cell.hidden_size()
            || self.cell.input_size() != self.projection.out_dim()
            || self.start_token.ncols() != self.projection.out_dim()
        {
            return Err(Error::Contract(
                "decoder projection/cell/start-token dimensions are inconsistent".into(),
            ));
        }
        Ok(())
    }
}

/// Generate `length` rows from an embedding.
pub fn decode(
    params: &DecoderParams,
    mode: GateMode,
    embedding: ArrayView1<f64>,
    length: usize,
) -> Result<Array2<f64>> {
    params.check()?;
    if length == 0 {
        return Err(Error::Contract("decode length must be at least 1".into()));
    }
    if embedding.len() != params.hidden_size() {
        return Err(Error::Contract(format!(
            "embedding dim {} does not match decoder hidden size {}",
            embedding.len(),
            params.hidden_size()
        )));
    }
    let width = params.output_dim();
    let mut out = Array2::zeros((length, width));
    let mut state = LstmState {
        hidden: embedding.to_owned(),
        cell: Array1::zeros(params.hidden_size()),
    };
    let mut input = params.start_token.row(0).to_owned();
    for t in 0..length {
        state = lstm_cell_step(&params.cell, mode, input.view(), &state)?;
        let emitted = params.projection.apply(state.hidden.view())?;
        out.row_mut(t).assign(&emitted);
        input = emitted;
    }
    Ok(out)
}

/// Regression head mapping an embedding to the characteristic vector:
/// one hidden affine layer, a nonlinearity, and an affine output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseHeadParams {
    pub hidden: DenseParams,
    pub output: DenseParams,
    pub activation: Activation,
}

impl InverseHeadParams {
    pub fn zeros(embedding_dim: usize, hidden_dim: usize, out_dim: usize) -> Self {
        InverseHeadParams {
            hidden: DenseParams::zeros(embedding_dim, hidden_dim),
            output: DenseParams::zeros(hidden_dim, out_dim),
            activation: Activation::Relu,
        }
    }

    pub fn init<R: Rng>(
        rng: &mut R,
        embedding_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        activation: Activation,
    ) -> Self {
        InverseHeadParams {
            hidden: DenseParams::init(rng, embedding_dim, hidden_dim),
            output: DenseParams::init(rng, hidden_dim, out_dim),
            activation,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.hidden.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.output.out_dim()
    }
}

/// Map an embedding to an estimated characteristic vector.
pub fn inverse_head(params: &InverseHeadParams, embedding: ArrayView1<f64>) -> Result<Array1<f64>> {
    if params.output.in_dim() != params.hidden.out_dim() {
        return Err(Error::Contract(
            "inverse head hidden/output dimensions are inconsistent".into(),
        ));
    }
    let pre = params.hidden.apply(embedding)?;
    let act = pre.mapv(|x| params.activation.apply(x));
    params.output.apply(act.view())
}

/// Full parameter bundle of the inverse model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub inverse: InverseHeadParams,
}

/// Shape summary of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Width of one sequence row: driver count + 1 response channel.
    pub input_width: usize,
    /// Hidden size H; also the embedding size.
    pub hidden: usize,
    /// Hidden width of the regression head.
    pub inverse_hidden: usize,
    /// Characteristic vector length D_z.
    pub characteristic_dim: usize,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        ModelParams {
            encoder: EncoderParams {
                forward_cell: LstmCellParams::zeros(dims.input_width, dims.hidden),
                backward_cell: LstmCellParams::zeros(dims.input_width, dims.hidden),
            },
            decoder: DecoderParams::zeros(dims.input_width, dims.hidden),
            inverse: InverseHeadParams::zeros(
                dims.hidden,
                dims.inverse_hidden,
                dims.characteristic_dim,
            ),
        }
    }

    pub fn init<R: Rng>(rng: &mut R, dims: ModelDims, activation: Activation) -> Self {
        ModelParams {
            encoder: EncoderParams::init(rng, dims.input_width, dims.hidden),
            decoder: DecoderParams::init(rng, dims.input_width, dims.hidden),
            inverse: InverseHeadParams::init(
                rng,
                dims.hidden,
                dims.inverse_hidden,
                dims.characteristic_dim,
                activation,
            ),
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input_width: self.encoder.input_size(),
            hidden: self.encoder.hidden_size(),
            inverse_hidden: self.inverse.hidden.out_dim(),
            characteristic_dim: self.inverse.out_dim(),
        }
    }

    /// Named views over every trainable array, in a fixed order. The order
    /// defines parameter slots for the training graph, the optimizer state
    /// layout, and the checkpoint file layout.
    pub fn entries(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::with_capacity(31);
        push_cell(&mut out, "encoder.forward", &self.encoder.forward_cell);
        push_cell(&mut out, "encoder.backward", &self.encoder.backward_cell);
        push_cell(&mut out, "decoder.cell", &self.decoder.cell);
        out.push(("decoder.projection.weight".into(), &self.decoder.projection.weight));
        out.push(("decoder.projection.bias".into(), &self.decoder.projection.bias));
        out.push(("decoder.start_token".into(), &self.decoder.start_token));
        out.push(("inverse.hidden.weight".into(), &self.inverse.hidden.weight));
        out.push(("inverse.hidden.bias".into(), &self.inverse.hidden.bias));
        out.push(("inverse.output.weight".into(), &self.inverse.output.weight));
        out.push(("inverse.output.bias".into(), &self.inverse.output.bias));
        out
    }

    /// Mutable counterpart of [`ModelParams::entries`]; identical order.
    pub fn entries_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out: Vec<(String, &mut Array2<f64>)> = Vec::with_capacity(31);
        push_cell_mut(&mut out, "encoder.forward", &mut self.encoder.forward_cell);
        push_cell_mut(&mut out, "encoder.backward", &mut self.encoder.backward_cell);
        push_cell_mut(&mut out, "decoder.cell", &mut self.decoder.cell);
        out.push(("decoder.projection.weight".into(), &mut self.decoder.projection.weight));
        out.push(("decoder.projection.bias".into(), &mut self.decoder.projection.bias));
        out.push(("decoder.start_token".into(), &mut self.decoder.start_token));
        out.push(("inverse.hidden.weight".into(), &mut self.inverse.hidden.weight));
        out.push(("inverse.hidden.bias".into(), &mut self.inverse.hidden.bias));
        out.push(("inverse.output.weight".into(), &mut self.inverse.output.weight));
        out.push(("inverse.output.bias".into(), &mut self.inverse.output.bias));
        out
    }
}

fn push_cell<'a>(out: &mut Vec<(String, &'a Array2<f64>)>, prefix: &str, cell: &'a LstmCellParams) {
    out.push((format!("{prefix}.w_i"), &cell.w_i));
    out.push((format!("{prefix}.w_f"), &cell.w_f));
    out.push((format!("{prefix}.w_g"), &cell.w_g));
    out.push((format!("{prefix}.w_o"), &cell.w_o));
    out.push((format!("{prefix}.b_i"), &cell.b_i));
    out.push((format!("{prefix}.b_f"), &cell.b_f));
    out.push((format!("{prefix}.b_g"), &cell.b_g));
    out.push((format!("{prefix}.b_o"), &cell.b_o));
}

fn push_cell_mut<'a>(
    out: &mut Vec<(String, &'a mut Array2<f64>)>,
    prefix: &str,
    cell: &'a mut LstmCellParams,
) {
    out.push((format!("{prefix}.w_i"), &mut cell.w_i));
    out.push((format!("{prefix}.w_f"), &mut cell.w_f));
    out.push((format!("{prefix}.w_g"), &mut cell.w_g));
    out.push((format!("{prefix}.w_o"), &mut cell.w_o));
    out.push((format!("{prefix}.b_i"), &mut cell.b_i));
    out.push((format!("{prefix}.b_f"), &mut cell.b_f));
    out.push((format!("{prefix}.b_g"), &mut cell.b_g));
    out.push((format!("{prefix}.b_o"), &mut cell.b_o));
}
