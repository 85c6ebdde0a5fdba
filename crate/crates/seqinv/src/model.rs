//! Batched training-graph assembly.
//!
//! Builds the full training objective on the [`crate::graph`] tape for one
//! batch of anchor/positive window pairs: encode all `2N` sequences with the
//! bidirectional cell pair, decode them autoregressively, apply the
//! regression head, and combine reconstruction, contrastive, and masked
//! characteristic-regression losses into one scalar. Row layout everywhere:
//! rows `0..N` are anchors, rows `N..2N` the positives, so row `r` pairs
//! with row `(r + N) % 2N`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::loss::LossWeights;
use crate::nn::{Activation, GateMode, LstmCellParams, ModelParams};
use ndarray::{Array2, Axis};

/// One training batch in time-major layout: `steps[t]` holds row `t` of
/// every window, stacked anchors-then-positives.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub steps: Vec<Array2<f64>>,
    /// `2N x D_z`; rows `i` and `N + i` both hold entity `i`'s vector.
    pub characteristics: Array2<f64>,
    /// Availability mask per entity (length `N`).
    pub available: Vec<bool>,
}

impl TrainingBatch {
    /// Assemble from per-pair window matrices (each `W x C`).
    pub fn from_windows(
        anchors: &[Array2<f64>],
        positives: &[Array2<f64>],
        characteristics: Array2<f64>,
        available: Vec<bool>,
    ) -> Result<Self> {
        let n = anchors.len();
        if n == 0 || positives.len() != n {
            return Err(Error::Contract(
                "batch needs equal, non-zero anchor and positive counts".into(),
            ));
        }
        let (w, c) = anchors[0].dim();
        for m in anchors.iter().chain(positives) {
            if m.dim() != (w, c) {
                return Err(Error::Contract("all windows in a batch must share shape".into()));
            }
        }
        if characteristics.nrows() != 2 * n || available.len() != n {
            return Err(Error::Contract(
                "characteristics must have 2N rows and the mask N entries".into(),
            ));
        }
        let mut steps = Vec::with_capacity(w);
        for t in 0..w {
            let mut step = Array2::zeros((2 * n, c));
            for (row, win) in anchors.iter().chain(positives).enumerate() {
                step.row_mut(row).assign(&win.row(t));
            }
            steps.push(step);
        }
        Ok(TrainingBatch {
            steps,
            characteristics,
            available,
        })
    }

    pub fn pair_count(&self) -> usize {
        self.steps[0].nrows() / 2
    }

    pub fn window_len(&self) -> usize {
        self.steps.len()
    }

    pub fn row_width(&self) -> usize {
        self.steps[0].ncols()
    }
}

/// Fused handles for one recurrent cell: transposed gate matrix
/// `(D_in + H) x 4H` in `[i, f, g, o]` column order, plus `1 x 4H` bias.
#[derive(Clone, Copy)]
pub struct CellVars {
    w_all_t: Var,
    b_all: Var,
    hidden: usize,
}

fn bind_cell(g: &mut Graph, first_slot: usize, cell: &LstmCellParams) -> CellVars {
    let w_i = g.param(first_slot, cell.w_i.clone());
    let w_f = g.param(first_slot + 1, cell.w_f.clone());
    let w_g = g.param(first_slot + 2, cell.w_g.clone());
    let w_o = g.param(first_slot + 3, cell.w_o.clone());
    let b_i = g.param(first_slot + 4, cell.b_i.clone());
    let b_f = g.param(first_slot + 5, cell.b_f.clone());
    let b_g = g.param(first_slot + 6, cell.b_g.clone());
    let b_o = g.param(first_slot + 7, cell.b_o.clone());
    let top = g.concat_rows(w_i, w_f);
    let bottom = g.concat_rows(w_g, w_o);
    let all = g.concat_rows(top, bottom);
    let w_all_t = g.transpose(all);
    let left = g.concat_cols(b_i, b_f);
    let right = g.concat_cols(b_g, b_o);
    let b_all = g.concat_cols(left, right);
    CellVars {
        w_all_t,
        b_all,
        hidden: cell.hidden_size(),
    }
}

/// One batched cell update: inputs `(B x D_in)`, state `(B x H)` each.
fn cell_step(
    g: &mut Graph,
    cell: &CellVars,
    mode: GateMode,
    x: Var,
    h: Var,
    c: Var,
) -> (Var, Var) {
    let hs = cell.hidden;
    let xh = g.concat_cols(x, h);
    let lin = g.matmul(xh, cell.w_all_t);
    let pre = g.add_row(lin, cell.b_all);
    let pre_i = g.slice_cols(pre, 0, hs);
    let pre_f = g.slice_cols(pre, hs, 2 * hs);
    let pre_g = g.slice_cols(pre, 2 * hs, 3 * hs);
    let pre_o = g.slice_cols(pre, 3 * hs, 4 * hs);
    let gate_i = g.sigmoid(pre_i);
    let gate_f = g.sigmoid(pre_f);
    let gate_g = match mode {
        GateMode::Standard => g.tanh(pre_g),
        GateMode::SigmoidCandidate => g.sigmoid(pre_g),
    };
    let gate_o = g.sigmoid(pre_o);
    let keep = g.mul(gate_f, c);
    let write = g.mul(gate_i, gate_g);
    let c2 = g.add(keep, write);
    let c2_tanh = g.tanh(c2);
    let h2 = g.mul(gate_o, c2_tanh);
    (h2, c2)
}

/// All model parameters bound onto a graph. Slot indices follow
/// [`ModelParams::entries`] order exactly.
pub struct ModelVars {
    pub gate_mode: GateMode,
    pub activation: Activation,
    encoder_forward: CellVars,
    encoder_backward: CellVars,
    decoder_cell: CellVars,
    projection_w_t: Var,
    projection_b: Var,
    start_token: Var,
    inverse_hidden_w_t: Var,
    inverse_hidden_b: Var,
    inverse_output_w_t: Var,
    inverse_output_b: Var,
}

/// Number of parameter slots bound by [`bind_model`].
pub const MODEL_SLOTS: usize = 31;

pub fn bind_model(g: &mut Graph, params: &ModelParams, gate_mode: GateMode) -> ModelVars {
    let encoder_forward = bind_cell(g, 0, &params.encoder.forward_cell);
    let encoder_backward = bind_cell(g, 8, &params.encoder.backward_cell);
    let decoder_cell = bind_cell(g, 16, &params.decoder.cell);
    let proj_w = g.param(24, params.decoder.projection.weight.clone());
    let projection_w_t = g.transpose(proj_w);
    let projection_b = g.param(25, params.decoder.projection.bias.clone());
    let start_token = g.param(26, params.decoder.start_token.clone());
    let inv_hid_w = g.param(27, params.inverse.hidden.weight.clone());
    let inverse_hidden_w_t = g.transpose(inv_hid_w);
    let inverse_hidden_b = g.param(28, params.inverse.hidden.bias.clone());
    let inv_out_w = g.param(29, params.inverse.output.weight.clone());
    let inverse_output_w_t = g.transpose(inv_out_w);
    let inverse_output_b = g.param(30, params.inverse.output.bias.clone());
    ModelVars {
        gate_mode,
        activation: params.inverse.activation,
        encoder_forward,
        encoder_backward,
        decoder_cell,
        projection_w_t,
        projection_b,
        start_token,
        inverse_hidden_w_t,
        inverse_hidden_b,
        inverse_output_w_t,
        inverse_output_b,
    }
}

/// Bind each time step of a batch as a constant node.
pub fn bind_steps(g: &mut Graph, steps: &[Array2<f64>]) -> Vec<Var> {
    steps.iter().map(|s| g.constant(s.clone())).collect()
}

/// Bidirectional batched encode over bound step constants: returns the
/// `(B x H)` embedding matrix (sum of final forward and backward states).
pub fn encode_batch(g: &mut Graph, mv: &ModelVars, step_vars: &[Var]) -> Var {
    let batch = g.value(step_vars[0]).nrows();
    let hidden = mv.encoder_forward.hidden;
    let zeros = Array2::zeros((batch, hidden));

    let mut h = g.constant(zeros.clone());
    let mut c = g.constant(zeros.clone());
    for &x in step_vars {
        let (h2, c2) = cell_step(g, &mv.encoder_forward, mv.gate_mode, x, h, c);
        h = h2;
        c = c2;
    }
    let h_forward = h;

    let mut h = g.constant(zeros.clone());
    let mut c = g.constant(zeros);
    for &x in step_vars.iter().rev() {
        let (h2, c2) = cell_step(g, &mv.encoder_backward, mv.gate_mode, x, h, c);
        h = h2;
        c = c2;
    }
    g.add(h_forward, h)
}

/// Batched autoregressive decode: embedding seeds the hidden state, cell
/// state starts at zero, the start token is the first input, and each
/// projected output feeds the next step. Returns one `(B x C)` node per step.
pub fn decode_batch(g: &mut Graph, mv: &ModelVars, embedding: Var, length: usize) -> Vec<Var> {
    let batch = g.value(embedding).nrows();
    let hidden = mv.decoder_cell.hidden;
    let mut h = embedding;
    let mut c = g.constant(Array2::zeros((batch, hidden)));
    let mut x = g.broadcast_rows(mv.start_token, batch);
    let mut outputs = Vec::with_capacity(length);
    for _ in 0..length {
        let (h2, c2) = cell_step(g, &mv.decoder_cell, mv.gate_mode, x, h, c);
        h = h2;
        c = c2;
        let lin = g.matmul(h, mv.projection_w_t);
        let out = g.add_row(lin, mv.projection_b);
        outputs.push(out);
        x = out;
    }
    outputs
}

/// Batched regression head on embeddings: `(B x H) -> (B x D_z)`.
pub fn inverse_batch(g: &mut Graph, mv: &ModelVars, embedding: Var) -> Var {
    let lin = g.matmul(embedding, mv.inverse_hidden_w_t);
    let pre = g.add_row(lin, mv.inverse_hidden_b);
    let act = match mv.activation {
        Activation::Relu => g.relu(pre),
        Activation::Tanh => g.tanh(pre),
    };
    let lin2 = g.matmul(act, mv.inverse_output_w_t);
    g.add_row(lin2, mv.inverse_output_b)
}

/// Mean squared reconstruction error over all pairs, steps, and channels:
/// equals the per-pair-MSE average because every window shares one shape.
pub fn reconstruction_loss_node(g: &mut Graph, outputs: &[Var], targets: &[Var]) -> Var {
    assert_eq!(outputs.len(), targets.len(), "output/target step counts differ");
    let mut acc: Option<Var> = None;
    let mut entries = 0usize;
    for (&out, &target) in outputs.iter().zip(targets) {
        let diff = g.sub(out, target);
        let sq = g.square(diff);
        let s = g.sum_all(sq);
        entries += g.value(target).len();
        acc = Some(match acc {
            Some(a) => g.add(a, s),
            None => s,
        });
    }
    let total = acc.expect("at least one step");
    g.scale(total, 1.0 / entries as f64)
}

/// Temperature-scaled contrastive loss over a `(2N x H)` embedding node.
/// Cosine similarities exclude each row's self-term from the denominator;
/// row `r`'s numerator is its partner `(r + N) % 2N`.
pub fn contrastive_loss_node(g: &mut Graph, embedding: Var, temperature: f64) -> Var {
    let rows = g.value(embedding).nrows();
    assert!(rows >= 2 && rows % 2 == 0, "embedding node must hold 2N rows");
    let n = rows / 2;
    let width = g.value(embedding).ncols();

    let sq = g.square(embedding);
    let row_norms_sq = g.row_sum(sq);
    let row_norms = g.sqrt(row_norms_sq);
    let norm_tiled = g.broadcast_cols(row_norms, width);
    let unit = g.div(embedding, norm_tiled);
    let unit_t = g.transpose(unit);
    let sims = g.matmul(unit, unit_t);
    let scaled = g.scale(sims, 1.0 / temperature);
    let exps = g.exp(scaled);

    let mut off_diag = Array2::from_elem((rows, rows), 1.0);
    for r in 0..rows {
        off_diag[(r, r)] = 0.0;
    }
    let mut pair = Array2::zeros((rows, rows));
    for r in 0..rows {
        pair[(r, (r + n) % rows)] = 1.0;
    }
    let off_diag = g.constant(off_diag);
    let pair = g.constant(pair);

    let masked = g.mul(exps, off_diag);
    let denom = g.row_sum(masked);
    let picked = g.mul(exps, pair);
    let numer = g.row_sum(picked);
    let ln_denom = g.ln(denom);
    let ln_numer = g.ln(numer);
    let terms = g.sub(ln_denom, ln_numer);
    let total = g.sum_all(terms);
    g.scale(total, 1.0 / rows as f64)
}

/// Masked characteristic-regression loss over a `(2N x D_z)` estimate node:
/// per-row MSE averaged over both windows of every available entity.
/// Returns `None` when no entity has characteristics available.
pub fn inverse_loss_node(
    g: &mut Graph,
    estimates: Var,
    characteristics: &Array2<f64>,
    available: &[bool],
) -> Option<Var> {
    let rows = g.value(estimates).nrows();
    let n = rows / 2;
    assert_eq!(available.len(), n, "mask length must equal pair count");
    assert_eq!(characteristics.nrows(), rows, "characteristics must have 2N rows");
    let avail_count = available.iter().filter(|&&a| a).count();
    if avail_count == 0 {
        return None;
    }
    let d_z = characteristics.ncols();
    let mut mask = Array2::zeros((rows, 1));
    for (i, &a) in available.iter().enumerate() {
        if a {
            mask[(i, 0)] = 1.0;
            mask[(i + n, 0)] = 1.0;
        }
    }
    let truth = g.constant(characteristics.clone());
    let mask = g.constant(mask);
    let diff = g.sub(estimates, truth);
    let sq = g.square(diff);
    let row_sq = g.row_sum(sq);
    let row_mse = g.scale(row_sq, 1.0 / d_z as f64);
    let masked = g.mul(row_mse, mask);
    let total = g.sum_all(masked);
    Some(g.scale(total, 1.0 / (2.0 * avail_count as f64)))
}

/// Scalar nodes of the assembled objective.
pub struct LossNodes {
    pub total: Var,
    pub reconstruction: Var,
    pub contrastive: Var,
    pub inverse: Var,
    pub embeddings: Var,
}

/// Build the complete objective for one batch. Component nodes report the
/// unweighted loss values; `total` applies the configured weights.
pub fn build_training_graph(
    g: &mut Graph,
    params: &ModelParams,
    batch: &TrainingBatch,
    weights: &LossWeights,
    temperature: f64,
    gate_mode: GateMode,
) -> LossNodes {
    let mv = bind_model(g, params, gate_mode);
    let step_vars = bind_steps(g, &batch.steps);
    let embeddings = encode_batch(g, &mv, &step_vars);
    let outputs = decode_batch(g, &mv, embeddings, batch.window_len());
    let reconstruction = reconstruction_loss_node(g, &outputs, &step_vars);
    let contrastive = contrastive_loss_node(g, embeddings, temperature);
    let estimates = inverse_batch(g, &mv, embeddings);
    let inverse = match inverse_loss_node(g, estimates, &batch.characteristics, &batch.available) {
        Some(node) => node,
        None => g.scalar(0.0),
    };
    let weighted_rec = g.scale(reconstruction, weights.reconstruction);
    let weighted_cont = g.scale(contrastive, weights.contrastive);
    let weighted_inv = g.scale(inverse, weights.inverse);
    let partial = g.add(weighted_rec, weighted_cont);
    let total = g.add(partial, weighted_inv);
    LossNodes {
        total,
        reconstruction,
        contrastive,
        inverse,
        embeddings,
    }
}

/// Extract one row of a `(B x k)` node value as an owned vector.
pub fn node_row(g: &Graph, v: Var, row: usize) -> ndarray::Array1<f64> {
    g.value(v).index_axis(Axis(0), row).to_owned()
}
