//! Characteristic-conditioned forward model and its evaluation metric.
//!
//! The recurrent driver-to-response model is entity-aware through its
//! input gate: the gate is computed once from the static conditioning
//! vector (measured, corrupted, imputed, or embedding-based
//! characteristics) and held constant over time, so the conditioning
//! decides how much of each candidate update enters the cell state.
//! Forget, candidate, and output gates are dynamic functions of
//! `[x_t ; h_{t-1}]` as usual.

use crate::data::{Dataset, EntityRecord, NormalizationStats, Period};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::infer::CharacteristicEstimate;
use crate::nn::DenseParams;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Parameters of the entity-aware recurrent forward model.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardParams {
    /// Produces the static input gate from the conditioning vector only.
    pub static_gate: DenseParams,
    pub w_f: Array2<f64>,
    pub w_g: Array2<f64>,
    pub w_o: Array2<f64>,
    pub b_f: Array2<f64>,
    pub b_g: Array2<f64>,
    pub b_o: Array2<f64>,
    pub head: DenseParams,
}

impl ForwardParams {
    pub fn zeros(driver_dim: usize, cond_dim: usize, hidden: usize) -> Self {
        ForwardParams {
            static_gate: DenseParams::zeros(cond_dim, hidden),
            w_f: Array2::zeros((hidden, driver_dim + hidden)),
            w_g: Array2::zeros((hidden, driver_dim + hidden)),
            w_o: Array2::zeros((hidden, driver_dim + hidden)),
            b_f: Array2::zeros((1, hidden)),
            b_g: Array2::zeros((1, hidden)),
            b_o: Array2::zeros((1, hidden)),
            head: DenseParams::zeros(hidden, 1),
        }
    }

    pub fn init<R: Rng>(rng: &mut R, driver_dim: usize, cond_dim: usize, hidden: usize) -> Self {
        let fan_in = driver_dim + hidden;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut w = || Array2::from_shape_fn((hidden, fan_in), |_| rng.random_range(-bound..bound));
        let w_f = w();
        let w_g = w();
        let w_o = w();
        ForwardParams {
            static_gate: DenseParams::init(rng, cond_dim, hidden),
            w_f,
            w_g,
            w_o,
            b_f: Array2::from_elem((1, hidden), 1.0),
            b_g: Array2::zeros((1, hidden)),
            b_o: Array2::zeros((1, hidden)),
            head: DenseParams::init(rng, hidden, 1),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_f.nrows()
    }

    pub fn driver_dim(&self) -> usize {
        self.w_f.ncols() - self.w_f.nrows()
    }

    pub fn cond_dim(&self) -> usize {
        self.static_gate.in_dim()
    }

    /// Named arrays in slot order (shared by optimizer and persistence).
    pub fn entries(&self) -> Vec<(String, &Array2<f64>)> {
        vec![
            ("static_gate.weight".into(), &self.static_gate.weight),
            ("static_gate.bias".into(), &self.static_gate.bias),
            ("w_f".into(), &self.w_f),
            ("w_g".into(), &self.w_g),
            ("w_o".into(), &self.w_o),
            ("b_f".into(), &self.b_f),
            ("b_g".into(), &self.b_g),
            ("b_o".into(), &self.b_o),
            ("head.weight".into(), &self.head.weight),
            ("head.bias".into(), &self.head.bias),
        ]
    }

    pub fn entries_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        vec![
            ("static_gate.weight".into(), &mut self.static_gate.weight),
            ("static_gate.bias".into(), &mut self.static_gate.bias),
            ("w_f".into(), &mut self.w_f),
            ("w_g".into(), &mut self.w_g),
            ("w_o".into(), &mut self.w_o),
            ("b_f".into(), &mut self.b_f),
            ("b_g".into(), &mut self.b_g),
            ("b_o".into(), &mut self.b_o),
            ("head.weight".into(), &mut self.head.weight),
            ("head.bias".into(), &mut self.head.bias),
        ]
    }
}

/// The static input gate: `sigmoid(static_gate(cond))`, computed once per
/// entity and reused at every timestep.
pub fn ea_input_gate(params: &ForwardParams, cond: ArrayView1<f64>) -> Result<Array1<f64>> {
    Ok(params.static_gate.apply(cond)?.mapv(sigmoid))
}

/// Run the forward model over one entity's driver matrix.
pub fn ea_forward(
    params: &ForwardParams,
    drivers: ArrayView2<f64>,
    cond: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    if drivers.ncols() != params.driver_dim() {
        return Err(Error::Contract(format!(
            "driver width {} does not match model driver dim {}",
            drivers.ncols(),
            params.driver_dim()
        )));
    }
    let hidden = params.hidden();
    let gate_i = ea_input_gate(params, cond)?;
    let mut h = Array1::zeros(hidden);
    let mut c = Array1::zeros(hidden);
    let mut out = Array1::zeros(drivers.nrows());
    let d = params.driver_dim();
    let mut xh = Array1::zeros(d + hidden);
    for t in 0..drivers.nrows() {
        xh.slice_mut(ndarray::s![..d]).assign(&drivers.row(t));
        xh.slice_mut(ndarray::s![d..]).assign(&h);
        let f = (params.w_f.dot(&xh) + &params.b_f.row(0)).mapv(sigmoid);
        let g = (params.w_g.dot(&xh) + &params.b_g.row(0)).mapv(f64::tanh);
        let o = (params.w_o.dot(&xh) + &params.b_o.row(0)).mapv(sigmoid);
        c = &f * &c + &gate_i * &g;
        h = &o * &c.mapv(f64::tanh);
        out[t] = params.head.apply(h.view())?[0];
    }
    Ok(out)
}

/// Where the conditioning vectors come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConditioningTag {
    Measured,
    Corrupted,
    Imputed,
    Embedding,
    None,
}

/// Conditioning payload per entity. `Measured` and `Corrupted` read the
/// (standardized) characteristics stored on the dataset; `Provided`
/// carries explicit vectors (reconstructed estimates or embeddings);
/// `None` is a zero vector of the configured width.
#[derive(Debug, Clone, PartialEq)]
pub enum ConditioningSource {
    None { dim: usize },
    Measured,
    Corrupted,
    Provided {
        tag: ConditioningTag,
        vectors: BTreeMap<String, Array1<f64>>,
    },
}

impl ConditioningSource {
    pub fn tag(&self) -> ConditioningTag {
        match self {
            ConditioningSource::None { .. } => ConditioningTag::None,
            ConditioningSource::Measured => ConditioningTag::Measured,
            ConditioningSource::Corrupted => ConditioningTag::Corrupted,
            ConditioningSource::Provided { tag, .. } => *tag,
        }
    }

    /// Standardized-space characteristic estimates as conditioning.
    pub fn imputed(estimates: &[CharacteristicEstimate]) -> Self {
        ConditioningSource::Provided {
            tag: ConditioningTag::Imputed,
            vectors: estimates
                .iter()
                .map(|e| (e.entity_id.clone(), e.estimate_std.clone()))
                .collect(),
        }
    }

    /// Pooled embeddings as conditioning.
    pub fn embeddings(estimates: &[CharacteristicEstimate]) -> Self {
        ConditioningSource::Provided {
            tag: ConditioningTag::Embedding,
            vectors: estimates
                .iter()
                .map(|e| (e.entity_id.clone(), e.embedding.clone()))
                .collect(),
        }
    }

    pub fn dim(&self, dataset: &Dataset) -> Result<usize> {
        match self {
            ConditioningSource::None { dim } => Ok(*dim),
            ConditioningSource::Measured | ConditioningSource::Corrupted => {
                Ok(dataset.characteristic_dim())
            }
            ConditioningSource::Provided { vectors, .. } => vectors
                .values()
                .next()
                .map(|v| v.len())
                .ok_or_else(|| Error::Contract("conditioning payload is empty".into())),
        }
    }

    /// Conditioning vector for one (standardized) record.
    pub fn vector_for(&self, record: &EntityRecord) -> Result<Array1<f64>> {
        match self {
            ConditioningSource::None { dim } => Ok(Array1::zeros(*dim)),
            ConditioningSource::Measured | ConditioningSource::Corrupted => {
                Ok(record.characteristics.clone())
            }
            ConditioningSource::Provided { vectors, .. } => vectors
                .get(&record.id)
                .cloned()
                .ok_or_else(|| {
                    Error::Data(format!(
                        "no conditioning payload for entity {}",
                        record.id
                    ))
                }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrainConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_entities: usize,
    /// Training subsequence length.
    pub window: usize,
    pub seed: u64,
}

impl Default for ForwardTrainConfig {
    fn default() -> Self {
        ForwardTrainConfig {
            hidden: 16,
            learning_rate: 0.005,
            epochs: 20,
            batch_entities: 20,
            window: 180,
            seed: 1,
        }
    }
}

/// A trained forward model plus everything needed to apply it to raw data.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardModel {
    pub params: ForwardParams,
    pub stats: NormalizationStats,
    pub tag: ConditioningTag,
    pub config: ForwardTrainConfig,
    pub loss_trace: Vec<f64>,
}

const FORWARD_SLOTS: usize = 10;

fn bind_forward(g: &mut Graph, params: &ForwardParams) -> Vec<Var> {
    params
        .entries()
        .into_iter()
        .enumerate()
        .map(|(slot, (_, array))| g.param(slot, array.clone()))
        .collect()
}

struct ForwardGraph {
    loss: Var,
}

/// Batched training graph over `B` entities and `L` steps: standardized
/// drivers per step `(B x D_x)`, standardized response targets `(B x 1)`,
/// conditioning `(B x D_cond)`.
fn build_forward_graph(
    g: &mut Graph,
    params: &ForwardParams,
    steps: &[Array2<f64>],
    targets: &[Array2<f64>],
    cond: &Array2<f64>,
) -> ForwardGraph {
    let hidden = params.hidden();
    let batch = cond.nrows();
    let vars = bind_forward(g, params);
    let (sg_w, sg_b, w_f, w_g, w_o, b_f, b_g, b_o, head_w, head_b) = (
        vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], vars[6], vars[7], vars[8], vars[9],
    );
    let sg_w_t = g.transpose(sg_w);
    let w_f_t = g.transpose(w_f);
    let w_g_t = g.transpose(w_g);
    let w_o_t = g.transpose(w_o);
    let head_w_t = g.transpose(head_w);

    // the input gate is a function of the conditioning only: one node,
    // reused by every timestep
    let cond = g.constant(cond.clone());
    let gate_lin = g.matmul(cond, sg_w_t);
    let gate_pre = g.add_row(gate_lin, sg_b);
    let gate_i = g.sigmoid(gate_pre);

    let mut h = g.constant(Array2::zeros((batch, hidden)));
    let mut c = g.constant(Array2::zeros((batch, hidden)));
    let mut sq_acc: Option<Var> = None;
    let mut entries = 0usize;
    for (step, target) in steps.iter().zip(targets) {
        let x = g.constant(step.clone());
        let xh = g.concat_cols(x, h);
        let f_lin = g.matmul(xh, w_f_t);
        let f_pre = g.add_row(f_lin, b_f);
        let f = g.sigmoid(f_pre);
        let g_lin = g.matmul(xh, w_g_t);
        let g_pre = g.add_row(g_lin, b_g);
        let cand = g.tanh(g_pre);
        let o_lin = g.matmul(xh, w_o_t);
        let o_pre = g.add_row(o_lin, b_o);
        let o = g.sigmoid(o_pre);
        let keep = g.mul(f, c);
        let write = g.mul(gate_i, cand);
        c = g.add(keep, write);
        let c_tanh = g.tanh(c);
        h = g.mul(o, c_tanh);
        let y_lin = g.matmul(h, head_w_t);
        let y = g.add_row(y_lin, head_b);
        let t = g.constant(target.clone());
        let diff = g.sub(y, t);
        let sq = g.square(diff);
        let s = g.sum_all(sq);
        entries += target.len();
        sq_acc = Some(match sq_acc {
            Some(acc) => g.add(acc, s),
            None => s,
        });
    }
    let total = sq_acc.expect("at least one step");
    let loss = g.scale(total, 1.0 / entries as f64);
    ForwardGraph { loss }
}

/// Train the forward model on raw data: fits normalization statistics on
/// the training entities and period, resolves conditioning vectors, and
/// minimizes mean squared error on the standardized response. Identical
/// seeds produce identical parameters.
pub fn train_forward(
    dataset: &Dataset,
    train_ids: &[String],
    period: Option<&Period>,
    source: &ConditioningSource,
    config: &ForwardTrainConfig,
) -> Result<ForwardModel> {
    if config.hidden == 0 || config.window == 0 || config.batch_entities == 0 || config.epochs == 0
    {
        return Err(Error::Config("forward config values must be positive".into()));
    }
    if config.batch_entities > train_ids.len() {
        return Err(Error::Config(format!(
            "batch entity count {} exceeds training entities {}",
            config.batch_entities,
            train_ids.len()
        )));
    }
    let (standardized, stats) = crate::data::fit_normalize(dataset, train_ids, period)?;
    let cond_dim = source.dim(dataset)?;

    // prepare per-entity material
    let mut drivers = Vec::with_capacity(train_ids.len());
    let mut responses = Vec::with_capacity(train_ids.len());
    let mut conds = Vec::with_capacity(train_ids.len());
    for id in train_ids {
        let record = standardized.entity(id)?;
        let range = record.range_for(period);
        if range.len() < config.window {
            return Err(Error::Contract(format!(
                "entity {id} has {} rows in period, forward window is {}",
                range.len(),
                config.window
            )));
        }
        let cond = source.vector_for(record)?;
        if cond.len() != cond_dim {
            return Err(Error::Contract(format!(
                "conditioning width {} for entity {id} does not match {}",
                cond.len(),
                cond_dim
            )));
        }
        drivers.push(record.drivers.slice(ndarray::s![range.clone(), ..]).to_owned());
        responses.push(record.response.slice(ndarray::s![range]).to_owned());
        conds.push(cond);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ForwardParams::init(&mut rng, dataset.driver_dim(), cond_dim, config.hidden);
    let shapes: Vec<(usize, usize)> = params.entries().iter().map(|(_, a)| a.dim()).collect();
    let mut adam = crate::train::Adam::new(config.learning_rate, &shapes);

    let steps_per_epoch = train_ids.len().div_ceil(config.batch_entities);
    let total_steps = steps_per_epoch * config.epochs;
    let mut trace = Vec::with_capacity(total_steps);
    let d_x = dataset.driver_dim();

    for step_idx in 0..total_steps {
        let chosen = rand::seq::index::sample(&mut rng, train_ids.len(), config.batch_entities);
        let batch = config.batch_entities;
        let mut cond = Array2::zeros((batch, cond_dim));
        let mut starts = Vec::with_capacity(batch);
        let indices: Vec<usize> = chosen.into_iter().collect();
        for (slot, &idx) in indices.iter().enumerate() {
            cond.row_mut(slot).assign(&conds[idx]);
            let max_start = drivers[idx].nrows() - config.window;
            starts.push(rng.random_range(0..=max_start));
        }
        let mut steps = Vec::with_capacity(config.window);
        let mut targets = Vec::with_capacity(config.window);
        for t in 0..config.window {
            let mut x = Array2::zeros((batch, d_x));
            let mut y = Array2::zeros((batch, 1));
            for (slot, &idx) in indices.iter().enumerate() {
                let row = starts[slot] + t;
                x.row_mut(slot).assign(&drivers[idx].row(row));
                y[(slot, 0)] = responses[idx][row];
            }
            steps.push(x);
            targets.push(y);
        }

        let mut graph = Graph::new();
        let built = build_forward_graph(&mut graph, &params, &steps, &targets, &cond);
        let loss = graph.scalar_value(built.loss);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite forward loss at step {step_idx}: {loss}"
            )));
        }
        trace.push(loss);
        let gradients = graph.backward(built.loss)?;
        let mut grads: Vec<Array2<f64>> = (0..FORWARD_SLOTS)
            .map(|slot| gradients.get(slot, shapes[slot]))
            .collect();
        crate::train::clip_global_norm(&mut grads, crate::train::GRAD_CLIP_NORM);
        let mut entries = params.entries_mut();
        let mut views: Vec<&mut Array2<f64>> = entries.iter_mut().map(|(_, a)| &mut **a).collect();
        adam.apply(&mut views, &grads);
    }

    Ok(ForwardModel {
        params,
        stats,
        tag: source.tag(),
        config: config.clone(),
        loss_trace: trace,
    })
}

/// Serialized form of a trained forward model.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ForwardModelFile {
    version: u32,
    tag: ConditioningTag,
    config: ForwardTrainConfig,
    stats: NormalizationStats,
    driver_dim: usize,
    cond_dim: usize,
    hidden: usize,
    params: Vec<crate::checkpoint::ParamEntry>,
    loss_trace: Vec<f64>,
}

const FORWARD_MODEL_VERSION: u32 = 1;

impl ForwardModel {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = ForwardModelFile {
            version: FORWARD_MODEL_VERSION,
            tag: self.tag,
            config: self.config.clone(),
            stats: self.stats.clone(),
            driver_dim: self.params.driver_dim(),
            cond_dim: self.params.cond_dim(),
            hidden: self.params.hidden(),
            params: self
                .params
                .entries()
                .into_iter()
                .map(|(name, array)| crate::checkpoint::ParamEntry {
                    name,
                    rows: array.nrows(),
                    cols: array.ncols(),
                    data: array.iter().copied().collect(),
                })
                .collect(),
            loss_trace: self.loss_trace.clone(),
        };
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read forward model {}: {e}", path.display())))?;
        let file: ForwardModelFile = serde_json::from_str(&raw)?;
        if file.version != FORWARD_MODEL_VERSION {
            return Err(Error::Data(format!(
                "unsupported forward model version {}",
                file.version
            )));
        }
        let mut params = ForwardParams::zeros(file.driver_dim, file.cond_dim, file.hidden);
        let mut entries = params.entries_mut();
        if entries.len() != file.params.len() {
            return Err(Error::Data("forward model parameter count mismatch".into()));
        }
        for (stored, (name, array)) in file.params.iter().zip(entries.iter_mut()) {
            if stored.name != *name || stored.rows != array.nrows() || stored.cols != array.ncols() {
                return Err(Error::Data(format!(
                    "forward model parameter '{}' does not match expected '{name}'",
                    stored.name
                )));
            }
            let rebuilt =
                ndarray::Array2::from_shape_vec((stored.rows, stored.cols), stored.data.clone())
                    .map_err(|e| Error::Data(format!("parameter '{}': {e}", stored.name)))?;
            array.assign(&rebuilt);
        }
        Ok(ForwardModel {
            params,
            stats: file.stats,
            tag: file.tag,
            config: file.config,
            loss_trace: file.loss_trace,
        })
    }

    /// Predict the physical-unit response of one entity over a period.
    /// `cond` must be in the same space the model was trained with.
    pub fn predict(
        &self,
        record: &EntityRecord,
        period: Option<&Period>,
        cond: ArrayView1<f64>,
    ) -> Result<Array1<f64>> {
        let range = record.range_for(period);
        if range.is_empty() {
            return Err(Error::Contract("prediction period selects no rows".into()));
        }
        let mut drivers = record.drivers.slice(ndarray::s![range, ..]).to_owned();
        for j in 0..drivers.ncols() {
            let (m, s) = (self.stats.driver_mean[j], self.stats.driver_std[j]);
            drivers.column_mut(j).mapv_inplace(|v| (v - m) / s);
        }
        let standardized = ea_forward(&self.params, drivers.view(), cond)?;
        Ok(self.stats.unstandardize_response(&standardized))
    }

    /// Resolve conditioning for a RAW record consistently with training:
    /// measured/corrupted characteristics are standardized with the
    /// model's statistics; provided payloads pass through.
    pub fn conditioning_for(
        &self,
        source: &ConditioningSource,
        record: &EntityRecord,
    ) -> Result<Array1<f64>> {
        match source {
            ConditioningSource::Measured | ConditioningSource::Corrupted => {
                Ok(self.stats.standardize_characteristics(&record.characteristics))
            }
            _ => source.vector_for(record),
        }
    }
}

/// Nash-Sutcliffe efficiency: `1 - sum((y - yhat)^2) / sum((y - mean)^2)`.
/// Equal lengths of at least 2 required; constant observations leave the
/// denominator undefined and are an error.
pub fn nse(predicted: ArrayView1<f64>, observed: ArrayView1<f64>) -> Result<f64> {
    if predicted.len() != observed.len() {
        return Err(Error::Contract(format!(
            "nse length mismatch: {} vs {}",
            predicted.len(),
            observed.len()
        )));
    }
    if observed.len() < 2 {
        return Err(Error::Contract("nse requires at least two observations".into()));
    }
    let mean = observed.sum() / observed.len() as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for (&p, &o) in predicted.iter().zip(observed.iter()) {
        num += (o - p) * (o - p);
        den += (o - mean) * (o - mean);
    }
    if den == 0.0 {
        return Err(Error::Numeric(
            "nse undefined: observed series is constant".into(),
        ));
    }
    Ok(1.0 - num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, SyntheticConfig};
    use approx::assert_relative_eq;
    use ndarray::array;


    #[test]
    fn forward_graph_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let params = ForwardParams::init(&mut rng, 2, 3, 3);
        let steps: Vec<Array2<f64>> = (0..4)
            .map(|_| Array2::from_shape_fn((3, 2), |_| rng.random_range(-1.0..1.0)))
            .collect();
        let targets: Vec<Array2<f64>> = (0..4)
            .map(|_| Array2::from_shape_fn((3, 1), |_| rng.random_range(-1.0..1.0)))
            .collect();
        let cond = Array2::from_shape_fn((3, 3), |_| rng.random_range(-1.0..1.0));

        let eval = |p: &ForwardParams| -> f64 {
            let mut g = Graph::new();
            let built = build_forward_graph(&mut g, p, &steps, &targets, &cond);
            g.scalar_value(built.loss)
        };
        let mut g = Graph::new();
        let built = build_forward_graph(&mut g, &params, &steps, &targets, &cond);
        let grads = g.backward(built.loss).unwrap();
        for (slot, (name, array)) in params.entries().iter().enumerate() {
            let analytic = grads.get(slot, array.dim());
            for k in 0..array.len().min(4) {
                let (r, c) = (k % array.nrows(), (k * 3) % array.ncols());
                let h = 1e-5;
                let mut plus = params.clone();
                plus.entries_mut()[slot].1[(r, c)] += h;
                let mut minus = params.clone();
                minus.entries_mut()[slot].1[(r, c)] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[(r, c)];
                assert!(
                    (a - numeric).abs() / numeric.abs().max(1e-3) < 1e-4,
                    "{name}[{r},{c}]: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }


    #[test]
    fn zero_params_predict_zero_everywhere() {
        let params = ForwardParams::zeros(2, 3, 4);
        let drivers = Array2::from_elem((6, 2), 1.5);
        let cond = array![0.3, -0.7, 1.1];
        let out = ea_forward(&params, drivers.view(), cond.view()).unwrap();
        assert!(out.iter().all(|&y| y == 0.0));
        // gate is sigma(0) = 0.5 everywhere
        let gate = ea_input_gate(&params, cond.view()).unwrap();
        assert!(gate.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn constant_gate_recursion_matches_closed_form() {
        // zero dynamic weights: f, o, and the candidate are constants, so
        // c_t follows a linear recursion with the static gate entering as
        // a constant multiplier at every step.
        let mut params = ForwardParams::zeros(1, 2, 1);
        params.b_f = array![[0.25]];
        params.b_g = array![[0.6]];
        params.b_o = array![[-0.1]];
        params.static_gate.weight = array![[0.8, -0.3]];
        params.static_gate.bias = array![[0.05]];
        params.head.weight = array![[1.2]];
        params.head.bias = array![[0.01]];
        let cond = array![0.5, 0.2];
        let drivers = Array2::zeros((5, 1));

        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let i = sig(0.8 * 0.5 - 0.3 * 0.2 + 0.05);
        let f = sig(0.25);
        let g0 = 0.6f64.tanh();
        let o = sig(-0.1);
        let mut c = 0.0;
        let mut expect = Vec::new();
        for _ in 0..5 {
            c = f * c + i * g0; // same i at every step
            expect.push(1.2 * (o * c.tanh()) + 0.01);
        }
        let out = ea_forward(&params, drivers.view(), cond.view()).unwrap();
        for (a, b) in out.iter().zip(&expect) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn two_step_recursion_matches_manual_arithmetic() {
        let mut params = ForwardParams::zeros(1, 1, 1);
        params.static_gate.weight = array![[0.9]];
        params.static_gate.bias = array![[0.0]];
        params.w_f = array![[0.2, -0.1]];
        params.w_g = array![[0.5, 0.3]];
        params.w_o = array![[-0.4, 0.2]];
        params.b_f = array![[0.1]];
        params.b_g = array![[-0.2]];
        params.b_o = array![[0.3]];
        params.head.weight = array![[2.0]];
        params.head.bias = array![[-0.5]];
        let drivers = array![[0.7], [-0.3]];
        let cond = array![1.1];

        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let i = sig(0.9 * 1.1);
        let mut h = 0.0;
        let mut c = 0.0;
        let mut expect = Vec::new();
        for &x in [0.7, -0.3].iter() {
            let f = sig(0.2 * x - 0.1 * h + 0.1);
            let g = (0.5 * x + 0.3 * h - 0.2).tanh();
            let o = sig(-0.4 * x + 0.2 * h + 0.3);
            c = f * c + i * g;
            h = o * c.tanh();
            expect.push(2.0 * h - 0.5);
        }
        let out = ea_forward(&params, drivers.view(), cond.view()).unwrap();
        assert_relative_eq!(out[0], expect[0], epsilon = 1e-14);
        assert_relative_eq!(out[1], expect[1], epsilon = 1e-14);
    }

    #[test]
    fn nse_reference_values() {
        let y = array![1.0, 2.0, 3.0];
        assert_relative_eq!(nse(y.view(), y.view()).unwrap(), 1.0);
        let mean = array![2.0, 2.0, 2.0];
        assert_relative_eq!(nse(mean.view(), y.view()).unwrap(), 0.0);
        let flat3 = array![3.0, 3.0, 3.0];
        assert_relative_eq!(nse(flat3.view(), y.view()).unwrap(), -1.5, epsilon = 1e-12);
        assert!(nse(y.view(), flat3.view()).is_err(), "constant observations");
        assert!(nse(array![1.0].view(), array![1.0].view()).is_err());
    }

    #[test]
    fn nse_is_affine_invariant_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let n = 50;
            let y = Array1::from_shape_fn(n, |_| rng.random_range(-2.0..2.0));
            let p = Array1::from_shape_fn(n, |_| rng.random_range(-2.0..2.0));
            let base = nse(p.view(), y.view()).unwrap();
            assert!(base <= 1.0);
            let a = rng.random_range(0.1..5.0);
            let b = rng.random_range(-3.0..3.0);
            let scaled = nse(
                p.mapv(|v| a * v + b).view(),
                y.mapv(|v| a * v + b).view(),
            )
            .unwrap();
            assert_relative_eq!(base, scaled, epsilon = 1e-9);
        }
    }

    /// Mean squared error over every entity's full standardized series.
    fn dataset_mse(model: &ForwardModel, raw: &Dataset, ids: &[String]) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for id in ids {
            let record = raw.entity(id).unwrap();
            let cond = model
                .conditioning_for(&ConditioningSource::Measured, record)
                .unwrap();
            let predicted = model.predict(record, None, cond.view()).unwrap();
            for (p, o) in predicted.iter().zip(record.response.iter()) {
                let d = (p - o) / model.stats.response_std;
                total += d * d;
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn forward_training_reduces_loss_and_is_deterministic() {
        let config = SyntheticConfig {
            entity_count: 8,
            days: 120,
            ..SyntheticConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let raw = synthesize(&config, &mut rng).unwrap();
        let ids = raw.entity_ids();
        let fc = ForwardTrainConfig {
            hidden: 6,
            learning_rate: 0.005,
            epochs: 30,
            batch_entities: 4,
            window: 40,
            seed: 3,
        };
        let a = train_forward(&raw, &ids, None, &ConditioningSource::Measured, &fc).unwrap();
        let b = train_forward(&raw, &ids, None, &ConditioningSource::Measured, &fc).unwrap();
        assert_eq!(a.params, b.params);
        assert!(a.loss_trace.iter().all(|v| v.is_finite()));
        assert_eq!(a.tag, ConditioningTag::Measured);

        // untrained reference: identical init, inert optimizer
        let inert = ForwardTrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            ..fc.clone()
        };
        let init = train_forward(&raw, &ids, None, &ConditioningSource::Measured, &inert).unwrap();
        let before = dataset_mse(&init, &raw, &ids);
        let after = dataset_mse(&a, &raw, &ids);
        assert!(
            after < before,
            "training should reduce full-dataset MSE: {before} -> {after}"
        );
    }

    #[test]
    fn none_source_trains_with_zero_conditioning() {
        let config = SyntheticConfig {
            entity_count: 6,
            days: 90,
            ..SyntheticConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let raw = synthesize(&config, &mut rng).unwrap();
        let ids = raw.entity_ids();
        let fc = ForwardTrainConfig {
            hidden: 4,
            epochs: 2,
            batch_entities: 3,
            window: 30,
            ..ForwardTrainConfig::default()
        };
        let model =
            train_forward(&raw, &ids, None, &ConditioningSource::None { dim: 3 }, &fc).unwrap();
        assert_eq!(model.tag, ConditioningTag::None);
        let record = raw.entity(&ids[0]).unwrap();
        let cond = model
            .conditioning_for(&ConditioningSource::None { dim: 3 }, record)
            .unwrap();
        assert_eq!(cond, Array1::<f64>::zeros(3));
        let pred = model.predict(record, None, cond.view()).unwrap();
        assert_eq!(pred.len(), record.len());
        assert!(pred.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn missing_payload_is_an_error() {
        let config = SyntheticConfig {
            entity_count: 4,
            days: 60,
            ..SyntheticConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let raw = synthesize(&config, &mut rng).unwrap();
        let ids = raw.entity_ids();
        let source = ConditioningSource::Provided {
            tag: ConditioningTag::Embedding,
            vectors: BTreeMap::new(),
        };
        let fc = ForwardTrainConfig {
            hidden: 4,
            epochs: 1,
            batch_entities: 2,
            window: 20,
            ..ForwardTrainConfig::default()
        };
        assert!(train_forward(&raw, &ids, None, &source, &fc).is_err());
    }
}
