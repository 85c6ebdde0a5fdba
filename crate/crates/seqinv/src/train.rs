//! Optimization of the combined objective: batch assembly, the adaptive
//! gradient loop, ensembling over seeds, and hyperparameter grid search.

use crate::checkpoint::{Checkpoint, StepLoss};
use crate::data::{self, Dataset, NormalizationStats, Period};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::infer::Estimator;
use crate::loss::LossWeights;
use crate::model::{build_training_graph, TrainingBatch, MODEL_SLOTS};
use crate::nn::{Activation, GateMode, ModelDims, ModelParams};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Gradients are rescaled so their global L2 norm never exceeds this,
/// preventing recurrent blowup early in training.
pub const GRAD_CLIP_NORM: f64 = 1.0;

/// Which algebraic form of the contrastive pair term to use. Training
/// accepts only the negative-log softmax form; the bare-fraction variant
/// exists for inspection through [`crate::loss::contrastive_pair_fraction`]
/// and is rejected by [`TrainConfig::validate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ContrastiveForm {
    #[default]
    LogSoftmax,
    BareFraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub temperature: f64,
    /// Window length W.
    pub window: usize,
    /// Stride for deterministic windowing (reporting and inference overlap).
    pub stride: usize,
    /// Hidden size H; doubles as the embedding dimension.
    pub hidden: usize,
    /// Hidden width of the regression head.
    pub inverse_hidden: usize,
    /// Entities per batch (N); each contributes an anchor/positive pair.
    pub batch_entities: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// One model is trained per seed; seeds must be distinct.
    pub seeds: Vec<u64>,
    pub gate_mode: GateMode,
    pub contrastive_form: ContrastiveForm,
    pub activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            temperature: 0.5,
            window: 365,
            stride: 183,
            hidden: 64,
            inverse_hidden: 64,
            batch_entities: 100,
            learning_rate: 0.001,
            epochs: 30,
            seeds: vec![1, 2, 3, 4, 5],
            gate_mode: GateMode::Standard,
            contrastive_form: ContrastiveForm::LogSoftmax,
            activation: Activation::Relu,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.window == 0 || self.stride == 0 {
            return Err(Error::Config("window and stride must be at least 1".into()));
        }
        if self.hidden == 0 || self.inverse_hidden == 0 {
            return Err(Error::Config("hidden sizes must be at least 1".into()));
        }
        if self.batch_entities == 0 {
            return Err(Error::Config("batch entity count must be at least 1".into()));
        }
        // zero is allowed so a grid candidate can be deliberately inert
        if self.learning_rate < 0.0 {
            return Err(Error::Config("learning rate must be nonnegative".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epoch count must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("ensemble seeds must be distinct".into()));
        }
        if self.weights.reconstruction < 0.0
            || self.weights.contrastive < 0.0
            || self.weights.inverse < 0.0
        {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.contrastive_form == ContrastiveForm::BareFraction {
            return Err(Error::Config(
                "the bare-fraction contrastive form is inspection-only and cannot be trained with"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Adam with fixed standard moment decay (0.9 / 0.999) and bias correction.
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, shapes: &[(usize, usize)]) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            second: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }

    /// One update over all parameter arrays, in slot order.
    pub fn apply(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>]) {
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let correction1 = 1.0 - self.beta1.powi(self.step);
        let correction2 = 1.0 - self.beta2.powi(self.step);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            m.zip_mut_with(grad, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(grad, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            ndarray::azip!((p in param.view_mut(), &m in &*m, &v in &*v) {
                let m_hat = m / correction1;
                let v_hat = v / correction2;
                *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            });
        }
    }
}

/// Scale all gradients by `max_norm / norm` when their concatenated L2
/// norm exceeds `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm: f64 = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

/// Per-entity training material prepared once per run.
struct EntityPool {
    ids: Vec<String>,
    combined: Vec<Array2<f64>>,
    characteristics: Vec<Array1<f64>>,
    available: Vec<bool>,
}

impl EntityPool {
    fn build(
        dataset: &Dataset,
        entity_ids: &[String],
        period: Option<&Period>,
        window: usize,
    ) -> Result<Self> {
        if entity_ids.is_empty() {
            return Err(Error::Contract("training entity set must be non-empty".into()));
        }
        let mut combined = Vec::with_capacity(entity_ids.len());
        let mut characteristics = Vec::with_capacity(entity_ids.len());
        let mut available = Vec::with_capacity(entity_ids.len());
        for id in entity_ids {
            let record = dataset.entity(id)?;
            let range = record.range_for(period);
            if range.len() < window {
                return Err(Error::Contract(format!(
                    "entity {id} has {} rows in the training period, window is {window}",
                    range.len()
                )));
            }
            combined.push(record.combined(range));
            characteristics.push(record.characteristics.clone());
            // an entity supervises the regression head only when its whole
            // characteristic vector is available
            available.push(!record.available.is_empty() && record.available.iter().all(|&a| a));
        }
        Ok(EntityPool {
            ids: entity_ids.to_vec(),
            combined,
            characteristics,
            available,
        })
    }

    /// Sample a batch: `n` distinct entities, two uniform window starts each.
    fn sample_batch<R: Rng>(&self, n: usize, window: usize, rng: &mut R) -> TrainingBatch {
        let chosen = rand::seq::index::sample(rng, self.ids.len(), n);
        let d_z = self.characteristics[0].len();
        let mut anchors = Vec::with_capacity(n);
        let mut positives = Vec::with_capacity(n);
        let mut z = Array2::zeros((2 * n, d_z));
        let mut available = Vec::with_capacity(n);
        for (slot, idx) in chosen.into_iter().enumerate() {
            let series = &self.combined[idx];
            let max_start = series.nrows() - window;
            let a = rng.random_range(0..=max_start);
            let p = rng.random_range(0..=max_start);
            anchors.push(series.slice(ndarray::s![a..a + window, ..]).to_owned());
            positives.push(series.slice(ndarray::s![p..p + window, ..]).to_owned());
            z.row_mut(slot).assign(&self.characteristics[idx]);
            z.row_mut(slot + n).assign(&self.characteristics[idx]);
            available.push(self.available[idx]);
        }
        TrainingBatch::from_windows(&anchors, &positives, z, available)
            .expect("pool-built batch is well-formed")
    }
}

/// Train one model. `dataset` must already be standardized with `stats`
/// (the statistics travel into the checkpoint so inference can reproduce
/// the transform). Runs `epochs * ceil(|entities| / N)` optimizer steps and
/// aborts with a term-by-term diagnostic if the loss leaves the finite
/// range. Identical inputs and seed produce a byte-identical checkpoint.
pub fn train(
    dataset: &Dataset,
    stats: &NormalizationStats,
    entity_ids: &[String],
    period: Option<&Period>,
    config: &TrainConfig,
    seed: u64,
) -> Result<Checkpoint> {
    config.validate()?;
    if config.batch_entities > entity_ids.len() {
        return Err(Error::Config(format!(
            "batch entity count {} exceeds training entities {}",
            config.batch_entities,
            entity_ids.len()
        )));
    }
    let pool = EntityPool::build(dataset, entity_ids, period, config.window)?;
    let dims = ModelDims {
        input_width: dataset.row_width(),
        hidden: config.hidden,
        inverse_hidden: config.inverse_hidden,
        characteristic_dim: dataset.characteristic_dim(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(&mut rng, dims, config.activation);

    let shapes: Vec<(usize, usize)> = params.entries().iter().map(|(_, a)| a.dim()).collect();
    let mut adam = Adam::new(config.learning_rate, &shapes);

    let steps_per_epoch = entity_ids.len().div_ceil(config.batch_entities);
    let total_steps = steps_per_epoch * config.epochs;
    let mut trace = Vec::with_capacity(total_steps);

    for step in 0..total_steps {
        let batch = pool.sample_batch(config.batch_entities, config.window, &mut rng);
        let mut graph = Graph::new();
        let nodes = build_training_graph(
            &mut graph,
            &params,
            &batch,
            &config.weights,
            config.temperature,
            config.gate_mode,
        );
        let record = StepLoss {
            step,
            total: graph.scalar_value(nodes.total),
            reconstruction: graph.scalar_value(nodes.reconstruction),
            contrastive: graph.scalar_value(nodes.contrastive),
            inverse: graph.scalar_value(nodes.inverse),
        };
        if !record.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step}: total={} reconstruction={} contrastive={} inverse={}",
                record.total, record.reconstruction, record.contrastive, record.inverse
            )));
        }
        trace.push(record);

        let gradients = graph.backward(nodes.total)?;
        let mut grads: Vec<Array2<f64>> = (0..MODEL_SLOTS)
            .map(|slot| gradients.get(slot, shapes[slot]))
            .collect();
        clip_global_norm(&mut grads, GRAD_CLIP_NORM);
        let mut entries = params.entries_mut();
        let mut views: Vec<&mut Array2<f64>> =
            entries.iter_mut().map(|(_, a)| &mut **a).collect();
        adam.apply(&mut views, &grads);
    }

    Ok(Checkpoint::from_params(
        config.clone(),
        seed,
        dataset.driver_names.clone(),
        dataset.characteristic_names.clone(),
        stats.clone(),
        &params,
        trace,
    ))
}

/// Train one model per configured seed. Members are independent and run
/// in parallel; results are ordered like `config.seeds`.
pub fn train_ensemble(
    dataset: &Dataset,
    stats: &NormalizationStats,
    entity_ids: &[String],
    period: Option<&Period>,
    config: &TrainConfig,
) -> Result<Vec<Checkpoint>> {
    config.validate()?;
    config
        .seeds
        .par_iter()
        .map(|&seed| train(dataset, stats, entity_ids, period, config, seed))
        .collect()
}

/// Candidate lists for grid search. Defaults follow the published search
/// space; the λ2 axis is a single value there, so the whole grid holds
/// 4 * 5 * 4 * 1 * 3 * 2 * 4 = 1920 points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub embedding_dims: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub lambda_reconstruction: Vec<f64>,
    pub lambda_contrastive: Vec<f64>,
    pub lambda_inverse: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub temperatures: Vec<f64>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        HyperGrid {
            embedding_dims: vec![32, 64, 128, 256],
            learning_rates: vec![0.0005, 0.001, 0.003, 0.005, 0.05],
            lambda_reconstruction: vec![0.01, 0.1, 1.0, 10.0],
            lambda_contrastive: vec![1.0],
            lambda_inverse: vec![0.1, 1.0, 10.0],
            batch_sizes: vec![100, 200],
            temperatures: vec![0.1, 0.5, 0.7, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub embedding_dim: usize,
    pub learning_rate: f64,
    pub lambda_reconstruction: f64,
    pub lambda_contrastive: f64,
    pub lambda_inverse: f64,
    pub batch_entities: usize,
    pub temperature: f64,
}

impl GridPoint {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut config = base.clone();
        config.hidden = self.embedding_dim;
        config.inverse_hidden = self.embedding_dim;
        config.learning_rate = self.learning_rate;
        config.weights = LossWeights {
            reconstruction: self.lambda_reconstruction,
            contrastive: self.lambda_contrastive,
            inverse: self.lambda_inverse,
        };
        config.batch_entities = self.batch_entities;
        config.temperature = self.temperature;
        config
    }
}

impl HyperGrid {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dims.is_empty()
            || self.learning_rates.is_empty()
            || self.lambda_reconstruction.is_empty()
            || self.lambda_contrastive.is_empty()
            || self.lambda_inverse.is_empty()
            || self.batch_sizes.is_empty()
            || self.temperatures.is_empty()
        {
            return Err(Error::Config("grid axes must all be non-empty".into()));
        }
        Ok(())
    }

    pub fn point_count(&self) -> usize {
        self.embedding_dims.len()
            * self.learning_rates.len()
            * self.lambda_reconstruction.len()
            * self.lambda_contrastive.len()
            * self.lambda_inverse.len()
            * self.batch_sizes.len()
            * self.temperatures.len()
    }

    /// Point at a lexicographic index (embedding dim varies slowest,
    /// temperature fastest).
    pub fn point(&self, index: usize) -> GridPoint {
        let mut idx = index;
        let pick = |idx: &mut usize, list_len: usize| -> usize {
            let i = *idx % list_len;
            *idx /= list_len;
            i
        };
        // decode innermost-first
        let it = pick(&mut idx, self.temperatures.len());
        let ib = pick(&mut idx, self.batch_sizes.len());
        let i3 = pick(&mut idx, self.lambda_inverse.len());
        let i2 = pick(&mut idx, self.lambda_contrastive.len());
        let i1 = pick(&mut idx, self.lambda_reconstruction.len());
        let il = pick(&mut idx, self.learning_rates.len());
        let id = pick(&mut idx, self.embedding_dims.len());
        GridPoint {
            embedding_dim: self.embedding_dims[id],
            learning_rate: self.learning_rates[il],
            lambda_reconstruction: self.lambda_reconstruction[i1],
            lambda_contrastive: self.lambda_contrastive[i2],
            lambda_inverse: self.lambda_inverse[i3],
            batch_entities: self.batch_sizes[ib],
            temperature: self.temperatures[it],
        }
    }

    /// Lazy enumeration in lexicographic order.
    pub fn points(&self) -> impl Iterator<Item = GridPoint> + '_ {
        (0..self.point_count()).map(|i| self.point(i))
    }
}

/// Train/validation split for grid selection: models are fitted on
/// `entity_ids` over `fit_period` and scored by characteristic
/// reconstruction RMSE on the same entities over `validation_period`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSpec {
    pub entity_ids: Vec<String>,
    pub fit_period: Period,
    pub validation_period: Period,
}

#[derive(Debug, Clone, Default)]
pub struct GridOptions {
    /// Evaluate at most this many points, evenly subsampled from the
    /// lexicographic enumeration. `None` evaluates the full grid.
    pub max_points: Option<usize>,
}

/// One evaluated candidate.
#[derive(Debug, Clone)]
pub struct GridCandidate {
    pub index: usize,
    pub point: GridPoint,
    /// Mean over characteristics of the per-characteristic RMSE on the
    /// validation period; infinite when training diverged.
    pub validation_rmse: f64,
}

/// Exhaustive (or evenly subsampled) search returning the configuration
/// with the lowest validation RMSE; ties keep the earliest grid point.
/// Candidates whose training diverges numerically score as infinite
/// rather than aborting the search. `dataset` is raw (unstandardized).
pub fn grid_search(
    dataset: &Dataset,
    grid: &HyperGrid,
    base: &TrainConfig,
    spec: &ValidationSpec,
    options: &GridOptions,
) -> Result<(TrainConfig, Vec<GridCandidate>)> {
    grid.validate()?;
    if spec.fit_period.overlaps(&spec.validation_period) {
        return Err(Error::Contract(
            "validation period must be disjoint from the fit period".into(),
        ));
    }
    if spec.entity_ids.is_empty() {
        return Err(Error::Contract("validation spec needs at least one entity".into()));
    }
    let (standardized, stats) = data::fit_normalize(dataset, &spec.entity_ids, Some(&spec.fit_period))?;

    let total = grid.point_count();
    let indices: Vec<usize> = match options.max_points {
        Some(m) if m < total => (0..m).map(|i| i * total / m).collect(),
        _ => (0..total).collect(),
    };

    let seed = base.seeds[0];
    let candidates: Vec<GridCandidate> = indices
        .par_iter()
        .map(|&index| {
            let point = grid.point(index);
            let mut config = point.apply(base);
            config.seeds = vec![seed];
            let rmse = match train(
                &standardized,
                &stats,
                &spec.entity_ids,
                Some(&spec.fit_period),
                &config,
                seed,
            ) {
                Ok(ckpt) => validation_rmse(&ckpt, dataset, spec).unwrap_or(f64::INFINITY),
                Err(Error::Numeric(_)) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            Ok(GridCandidate {
                index,
                point,
                validation_rmse: rmse,
            })
        })
        .collect::<Result<_>>()?;

    let best = candidates
        .iter()
        .min_by(|a, b| {
            a.validation_rmse
                .partial_cmp(&b.validation_rmse)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.index.cmp(&b.index))
        })
        .ok_or_else(|| Error::Config("grid produced no candidates".into()))?;
    if !best.validation_rmse.is_finite() {
        return Err(Error::Numeric(
            "every grid candidate diverged during training".into(),
        ));
    }
    Ok((best.point.apply(base), candidates))
}

/// Mean over characteristics of per-characteristic RMSE of reconstructed
/// versus stored standardized values, over the validation period.
fn validation_rmse(ckpt: &Checkpoint, raw_dataset: &Dataset, spec: &ValidationSpec) -> Result<f64> {
    let estimator = Estimator::from_checkpoints(std::slice::from_ref(ckpt))?;
    let d_z = raw_dataset.characteristic_dim();
    let mut sq_sums = vec![0.0; d_z];
    let mut counts = vec![0usize; d_z];
    for id in &spec.entity_ids {
        let record = raw_dataset.entity(id)?;
        let estimate = estimator.estimate(
            id,
            &record.series(),
            Some(&spec.validation_period),
            None,
        )?;
        let truth = ckpt.stats.standardize_characteristics(&record.characteristics);
        for j in 0..d_z {
            if record.available[j] {
                let err = estimate.estimate_std[j] - truth[j];
                sq_sums[j] += err * err;
                counts[j] += 1;
            }
        }
    }
    let mut rmses = Vec::new();
    for j in 0..d_z {
        if counts[j] > 0 {
            rmses.push((sq_sums[j] / counts[j] as f64).sqrt());
        }
    }
    if rmses.is_empty() {
        return Err(Error::Numeric(
            "no available characteristics to validate against".into(),
        ));
    }
    Ok(rmses.iter().sum::<f64>() / rmses.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{fit_normalize, synthesize, SyntheticConfig};
    use approx::assert_relative_eq;

    fn tiny_dataset() -> (Dataset, NormalizationStats) {
        let config = SyntheticConfig {
            entity_count: 10,
            days: 80,
            ..SyntheticConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw = synthesize(&config, &mut rng).unwrap();
        let ids = raw.entity_ids();
        fit_normalize(&raw, &ids, None).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            window: 20,
            stride: 20,
            hidden: 6,
            inverse_hidden: 6,
            batch_entities: 4,
            learning_rate: 0.01,
            epochs: 2,
            seeds: vec![11],
            temperature: 0.5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut c = tiny_config();
        c.temperature = 0.0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.seeds = vec![1, 1];
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.contrastive_form = ContrastiveForm::BareFraction;
        assert!(c.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn training_returns_finite_trace_and_is_deterministic() {
        let (ds, stats) = tiny_dataset();
        let ids = ds.entity_ids();
        let config = tiny_config();
        let a = train(&ds, &stats, &ids, None, &config, 11).unwrap();
        let b = train(&ds, &stats, &ids, None, &config, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.loss_trace.len(), 2 * 3); // 2 epochs * ceil(10/4)
        assert!(a.loss_trace.iter().all(|s| s.total.is_finite()));
        let json_a = serde_json::to_string(&a).unwrap();
        let json_b = serde_json::to_string(&b).unwrap();
        assert_eq!(json_a, json_b, "checkpoints must serialize identically");
    }

    #[test]
    fn one_descent_step_reduces_reconstruction_loss_on_a_frozen_batch() {
        let (ds, _stats) = tiny_dataset();
        let ids = ds.entity_ids();
        let config = tiny_config();
        let pool = EntityPool::build(&ds, &ids, None, config.window).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = pool.sample_batch(4, config.window, &mut rng);
        let weights = LossWeights::new(1.0, 0.0, 0.0).unwrap();

        let dims = ModelDims {
            input_width: ds.row_width(),
            hidden: 6,
            inverse_hidden: 6,
            characteristic_dim: ds.characteristic_dim(),
        };
        let mut prng = ChaCha8Rng::seed_from_u64(3);
        let params = ModelParams::init(&mut prng, dims, Activation::Relu);

        let eval = |p: &ModelParams| {
            let mut g = Graph::new();
            let nodes = build_training_graph(&mut g, p, &batch, &weights, 0.5, GateMode::Standard);
            g.scalar_value(nodes.reconstruction)
        };
        let before = eval(&params);

        let mut g = Graph::new();
        let nodes = build_training_graph(&mut g, &params, &batch, &weights, 0.5, GateMode::Standard);
        let grads = g.backward(nodes.total).unwrap();
        let shapes: Vec<(usize, usize)> = params.entries().iter().map(|(_, a)| a.dim()).collect();
        let grad_arrays: Vec<Array2<f64>> = (0..MODEL_SLOTS)
            .map(|slot| grads.get(slot, shapes[slot]))
            .collect();

        // line-search probe: some small step size must strictly decrease
        let mut decreased = false;
        for lr in [1e-2, 1e-3, 1e-4, 1e-5] {
            let mut stepped = params.clone();
            for (slot, (_, array)) in stepped.entries_mut().into_iter().enumerate() {
                *array -= &(grad_arrays[slot].clone() * lr);
            }
            if eval(&stepped) < before {
                decreased = true;
                break;
            }
        }
        assert!(decreased, "descent along the gradient must reduce the loss");
    }

    #[test]
    fn contrastive_only_training_raises_positive_pair_similarity() {
        let (ds, stats) = tiny_dataset();
        let ids = ds.entity_ids();
        let mut config = tiny_config();
        config.weights = LossWeights::new(0.0, 1.0, 0.0).unwrap();
        config.epochs = 6;
        config.learning_rate = 0.02;

        let median_pair_sim = |ckpt: &Checkpoint| -> f64 {
            let params = ckpt.to_params().unwrap();
            let pool = EntityPool::build(&ds, &ids, None, config.window).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1234);
            let batch = pool.sample_batch(8, config.window, &mut rng);
            let mut g = Graph::new();
            let mv = crate::model::bind_model(&mut g, &params, GateMode::Standard);
            let steps = crate::model::bind_steps(&mut g, &batch.steps);
            let emb = crate::model::encode_batch(&mut g, &mv, &steps);
            let vals = g.value(emb);
            let n = batch.pair_count();
            let mut sims: Vec<f64> = (0..n)
                .map(|i| {
                    crate::loss::cosine_sim(vals.row(i), vals.row(i + n)).unwrap()
                })
                .collect();
            sims.sort_by(|a, b| a.partial_cmp(b).unwrap());
            sims[n / 2]
        };

        // "initial" model: zero epochs of movement approximated by an
        // untrained checkpoint built from the same seed's init
        let mut init_config = config.clone();
        init_config.epochs = 1;
        init_config.learning_rate = 0.0;
        let init = train(&ds, &stats, &ids, None, &init_config, 7).unwrap();
        let trained = train(&ds, &stats, &ids, None, &config, 7).unwrap();
        let before = median_pair_sim(&init);
        let after = median_pair_sim(&trained);
        assert!(
            after > before,
            "median positive-pair similarity should rise: {before} -> {after}"
        );
    }

    #[test]
    fn fully_masked_training_runs_with_zero_inverse_loss() {
        let (ds, stats) = tiny_dataset();
        let mut masked = ds.clone();
        for rec in &mut masked.entities {
            rec.available = vec![false; rec.characteristics.len()];
        }
        let ids = masked.entity_ids();
        let config = tiny_config();
        let ckpt = train(&masked, &stats, &ids, None, &config, 11).unwrap();
        assert!(ckpt.loss_trace.iter().all(|s| s.inverse == 0.0));
    }

    #[test]
    fn ensemble_trains_one_model_per_distinct_seed() {
        let (ds, stats) = tiny_dataset();
        let ids = ds.entity_ids();
        let mut config = tiny_config();
        config.epochs = 1;
        config.seeds = vec![5, 6, 7];
        let members = train_ensemble(&ds, &stats, &ids, None, &config).unwrap();
        assert_eq!(members.len(), 3);
        assert_ne!(members[0].params, members[1].params);
        assert_ne!(members[1].params, members[2].params);

        config.seeds = vec![5];
        let solo = train_ensemble(&ds, &stats, &ids, None, &config).unwrap();
        assert_eq!(solo.len(), 1);

        config.seeds = vec![5, 5];
        assert!(train_ensemble(&ds, &stats, &ids, None, &config).is_err());
    }

    #[test]
    fn grid_enumeration_is_lazy_lexicographic_and_complete() {
        let grid = HyperGrid::default();
        assert_eq!(grid.point_count(), 1920);
        assert_eq!(grid.points().count(), 1920);
        let first = grid.point(0);
        assert_eq!(first.embedding_dim, 32);
        assert_relative_eq!(first.learning_rate, 0.0005);
        assert_relative_eq!(first.temperature, 0.1);
        let second = grid.point(1);
        assert_relative_eq!(second.temperature, 0.5);
        assert_eq!(second.embedding_dim, 32);
        let last = grid.point(1919);
        assert_eq!(last.embedding_dim, 256);
        assert_relative_eq!(last.temperature, 1.0);
        assert_relative_eq!(last.learning_rate, 0.05);
    }

    #[test]
    fn grid_of_one_returns_that_config() {
        let grid = HyperGrid {
            embedding_dims: vec![6],
            learning_rates: vec![0.01],
            lambda_reconstruction: vec![1.0],
            lambda_contrastive: vec![1.0],
            lambda_inverse: vec![1.0],
            batch_sizes: vec![4],
            temperatures: vec![0.5],
        };
        let config = SyntheticConfig {
            entity_count: 8,
            days: 120,
            ..SyntheticConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw = synthesize(&config, &mut rng).unwrap();
        let ids = raw.entity_ids();
        let dates = &raw.entities[0].dates;
        let spec = ValidationSpec {
            entity_ids: ids,
            fit_period: Period::new(dates[0], dates[79]).unwrap(),
            validation_period: Period::new(dates[80], dates[119]).unwrap(),
        };
        let mut base = tiny_config();
        base.epochs = 1;
        let (best, candidates) =
            grid_search(&raw, &grid, &base, &spec, &GridOptions::default()).unwrap();
        assert_eq!(candidates.len(), 1);
        assert_eq!(best.hidden, 6);
        assert_relative_eq!(best.learning_rate, 0.01);
    }

    #[test]
    fn grid_search_prefers_the_learning_config_over_a_sabotaged_one() {
        // lr = 0 cannot move away from initialization; the learning
        // candidate must win
        let grid = HyperGrid {
            embedding_dims: vec![6],
            learning_rates: vec![0.0, 0.01],
            lambda_reconstruction: vec![1.0],
            lambda_contrastive: vec![1.0],
            lambda_inverse: vec![1.0],
            batch_sizes: vec![4],
            temperatures: vec![0.5],
        };
        let config = SyntheticConfig {
            entity_count: 10,
            days: 220,
            ..SyntheticConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = synthesize(&config, &mut rng).unwrap();
        let ids = raw.entity_ids();
        let dates = &raw.entities[0].dates;
        let spec = ValidationSpec {
            entity_ids: ids,
            fit_period: Period::new(dates[0], dates[159]).unwrap(),
            validation_period: Period::new(dates[160], dates[219]).unwrap(),
        };
        let mut base = tiny_config();
        base.epochs = 60;
        base.learning_rate = 0.01;
        let (best, candidates) =
            grid_search(&raw, &grid, &base, &spec, &GridOptions::default()).unwrap();
        assert_eq!(candidates.len(), 2);
        assert_relative_eq!(best.learning_rate, 0.01);
        let inert = &candidates[0];
        let learning = &candidates[1];
        assert!(
            learning.validation_rmse < inert.validation_rmse,
            "learning candidate {} should beat inert {}",
            learning.validation_rmse,
            inert.validation_rmse
        );
    }

    #[test]
    fn grid_search_rejects_overlapping_periods() {
        let grid = HyperGrid::default();
        let (ds, _) = tiny_dataset();
        let dates = &ds.entities[0].dates;
        let spec = ValidationSpec {
            entity_ids: ds.entity_ids(),
            fit_period: Period::new(dates[0], dates[50]).unwrap(),
            validation_period: Period::new(dates[40], dates[79]).unwrap(),
        };
        let err = grid_search(&ds, &grid, &tiny_config(), &spec, &GridOptions::default());
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
