//! Characteristic reconstruction with uncertainty.
//!
//! A trained checkpoint (or an ensemble of them) is applied to raw
//! driver/response series: the series is standardized with the
//! checkpoint's statistics, cut into windows (non-overlapping by default),
//! each window is encoded and mapped through the regression head, and the
//! per-window predictions are pooled into an elementwise mean estimate
//! with an elementwise population standard deviation as its uncertainty.
//! With an ensemble, the pool is the union of all model x window
//! predictions, so the uncertainty reflects both temporal and
//! initialization spread.
//!
//! The estimation path receives only series data — never an entity's
//! stored characteristic vector — so estimates are unchanged whether that
//! vector is clean, corrupted, or absent.

use crate::checkpoint::Checkpoint;
use crate::data::{windows_of, Dataset, NormalizationStats, Period, SeriesView};
use crate::error::{Error, Result};
use crate::nn::{self, GateMode, ModelParams};
use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;

/// Pooled reconstruction of one entity's characteristics.
#[derive(Debug, Clone, PartialEq)]
pub struct CharacteristicEstimate {
    pub entity_id: String,
    /// Estimate in standardized characteristic space.
    pub estimate_std: Array1<f64>,
    /// Estimate mapped back to physical units.
    pub estimate_physical: Array1<f64>,
    /// Elementwise population standard deviation of the pooled
    /// predictions, in standardized space.
    pub uncertainty_std: Array1<f64>,
    /// The same uncertainty scaled to physical units.
    pub uncertainty_physical: Array1<f64>,
    /// Pooled embedding (mean over all model x window embeddings).
    pub embedding: Array1<f64>,
    /// Windows per model.
    pub window_count: usize,
}

/// Elementwise mean and population standard deviation over prediction
/// rows (`K x D`).
pub fn pool_predictions(predictions: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let k = predictions.nrows() as f64;
    let mean = predictions.sum_axis(Axis(0)) / k;
    let mut var = Array1::zeros(predictions.ncols());
    for row in predictions.rows() {
        for (j, &v) in row.iter().enumerate() {
            let d = v - mean[j];
            var[j] += d * d;
        }
    }
    let std = (var / k).mapv(f64::sqrt);
    (mean, std)
}

/// One or more checkpoints prepared for repeated inference. All members
/// must share normalization statistics, window length, gate mode, and
/// characteristic schema.
pub struct Estimator {
    models: Vec<ModelParams>,
    gate_mode: GateMode,
    window: usize,
    stats: NormalizationStats,
    characteristic_names: Vec<String>,
}

impl Estimator {
    pub fn from_checkpoints(checkpoints: &[Checkpoint]) -> Result<Self> {
        let first = checkpoints
            .first()
            .ok_or_else(|| Error::Contract("estimator needs at least one checkpoint".into()))?;
        for ckpt in &checkpoints[1..] {
            if ckpt.stats != first.stats {
                return Err(Error::Contract(
                    "ensemble checkpoints must share normalization statistics".into(),
                ));
            }
            if ckpt.config.window != first.config.window
                || ckpt.config.gate_mode != first.config.gate_mode
                || ckpt.characteristic_names != first.characteristic_names
            {
                return Err(Error::Contract(
                    "ensemble checkpoints must share window, gate mode, and schema".into(),
                ));
            }
        }
        let models = checkpoints
            .iter()
            .map(|c| c.to_params())
            .collect::<Result<Vec<_>>>()?;
        Ok(Estimator {
            models,
            gate_mode: first.config.gate_mode,
            window: first.config.window,
            stats: first.stats.clone(),
            characteristic_names: first.characteristic_names.clone(),
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn stats(&self) -> &NormalizationStats {
        &self.stats
    }

    pub fn characteristic_names(&self) -> &[String] {
        &self.characteristic_names
    }

    pub fn model_count(&self) -> usize {
        self.models.len()
    }

    fn standardized_windows(
        &self,
        series: &SeriesView,
        period: Option<&Period>,
        stride: Option<usize>,
    ) -> Result<Vec<Array2<f64>>> {
        let range = series.range_for(period);
        if range.len() < self.window {
            return Err(Error::Contract(format!(
                "series has {} rows in the requested period, window is {}",
                range.len(),
                self.window
            )));
        }
        let combined = self.stats.standardized_combined(series, range);
        windows_of(&combined, self.window, stride.unwrap_or(self.window))
    }

    /// Pooled embedding plus per-(model x window) predictions and
    /// embeddings for one series.
    fn run(
        &self,
        series: &SeriesView,
        period: Option<&Period>,
        stride: Option<usize>,
    ) -> Result<(Array2<f64>, Array2<f64>, usize)> {
        let windows = self.standardized_windows(series, period, stride)?;
        let d_z = self.characteristic_names.len();
        let hidden = self.models[0].encoder.hidden_size();
        let rows = self.models.len() * windows.len();
        let mut predictions = Array2::zeros((rows, d_z));
        let mut embeddings = Array2::zeros((rows, hidden));
        let mut row = 0;
        for model in &self.models {
            for window in &windows {
                let h = nn::encode(&model.encoder, self.gate_mode, window.view())?;
                let z = nn::inverse_head(&model.inverse, h.view())?;
                embeddings.row_mut(row).assign(&h);
                predictions.row_mut(row).assign(&z);
                row += 1;
            }
        }
        Ok((predictions, embeddings, windows.len()))
    }

    /// Reconstruct one entity's characteristics with uncertainty.
    pub fn estimate(
        &self,
        entity_id: &str,
        series: &SeriesView,
        period: Option<&Period>,
        stride: Option<usize>,
    ) -> Result<CharacteristicEstimate> {
        self.estimate_detailed(entity_id, series, period, stride)
            .map(|(estimate, _)| estimate)
    }

    /// As [`Estimator::estimate`], additionally returning the pooled
    /// per-(model x window) prediction rows the estimate was derived from.
    pub fn estimate_detailed(
        &self,
        entity_id: &str,
        series: &SeriesView,
        period: Option<&Period>,
        stride: Option<usize>,
    ) -> Result<(CharacteristicEstimate, Array2<f64>)> {
        let (predictions, embeddings, window_count) = self.run(series, period, stride)?;
        let (estimate_std, uncertainty_std) = pool_predictions(&predictions);
        let (embedding, _) = pool_predictions(&embeddings);
        let estimate = CharacteristicEstimate {
            entity_id: entity_id.to_string(),
            estimate_physical: self.stats.unstandardize_characteristics(&estimate_std),
            uncertainty_physical: self.stats.physical_uncertainty(&uncertainty_std),
            estimate_std,
            uncertainty_std,
            embedding,
            window_count,
        };
        Ok((estimate, predictions))
    }

    /// Batch reconstruction over chosen entities; the output order matches
    /// `target_ids`. Estimates never read the entities' stored vectors, so
    /// they serve equally as denoised replacements for corrupted values or
    /// imputations for missing ones.
    pub fn estimate_dataset(
        &self,
        dataset: &Dataset,
        target_ids: &[String],
        period: Option<&Period>,
        stride: Option<usize>,
    ) -> Result<Vec<CharacteristicEstimate>> {
        target_ids
            .par_iter()
            .map(|id| {
                let record = dataset.entity(id)?;
                self.estimate(id, &record.series(), period, stride)
            })
            .collect()
    }
}

/// Embed one entity with a single checkpoint: per-window embeddings plus
/// their elementwise mean.
pub fn embed_entity(
    checkpoint: &Checkpoint,
    series: &SeriesView,
    period: Option<&Period>,
    window: usize,
    stride: usize,
) -> Result<(Array1<f64>, Array2<f64>)> {
    let params = checkpoint.to_params()?;
    let range = series.range_for(period);
    if range.len() < window {
        return Err(Error::Contract(format!(
            "series has {} rows in the requested period, window is {window}",
            range.len()
        )));
    }
    let combined = checkpoint.stats.standardized_combined(series, range);
    let windows = windows_of(&combined, window, stride)?;
    let hidden = params.encoder.hidden_size();
    let mut embeddings = Array2::zeros((windows.len(), hidden));
    for (k, w) in windows.iter().enumerate() {
        let h = nn::encode(&params.encoder, checkpoint.config.gate_mode, w.view())?;
        embeddings.row_mut(k).assign(&h);
    }
    let pooled = embeddings.sum_axis(Axis(0)) / windows.len() as f64;
    Ok((pooled, embeddings))
}

/// Reconstruct characteristics for one entity from an ensemble.
pub fn estimate_characteristics(
    checkpoints: &[Checkpoint],
    entity_id: &str,
    series: &SeriesView,
    period: Option<&Period>,
    stride: Option<usize>,
) -> Result<CharacteristicEstimate> {
    Estimator::from_checkpoints(checkpoints)?.estimate(entity_id, series, period, stride)
}

/// Batch wrapper producing denoised/imputed characteristic estimates for
/// the chosen entities.
pub fn denoise_or_impute(
    checkpoints: &[Checkpoint],
    dataset: &Dataset,
    target_ids: &[String],
    period: Option<&Period>,
    stride: Option<usize>,
) -> Result<Vec<CharacteristicEstimate>> {
    Estimator::from_checkpoints(checkpoints)?.estimate_dataset(dataset, target_ids, period, stride)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{fit_normalize, synthesize, SyntheticConfig};
    use crate::train::{train, TrainConfig};
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trained_fixture() -> (Dataset, Vec<Checkpoint>) {
        let config = SyntheticConfig {
            entity_count: 8,
            days: 90,
            ..SyntheticConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let raw = synthesize(&config, &mut rng).unwrap();
        let ids = raw.entity_ids();
        let (std_ds, stats) = fit_normalize(&raw, &ids, None).unwrap();
        let tc = TrainConfig {
            window: 30,
            stride: 30,
            hidden: 5,
            inverse_hidden: 5,
            batch_entities: 3,
            learning_rate: 0.01,
            epochs: 1,
            seeds: vec![1],
            ..TrainConfig::default()
        };
        let c1 = train(&std_ds, &stats, &ids, None, &tc, 1).unwrap();
        let c2 = train(&std_ds, &stats, &ids, None, &tc, 2).unwrap();
        (raw, vec![c1, c2])
    }

    #[test]
    fn pooling_matches_two_point_mean_and_population_std() {
        let predictions = array![[1.0, 3.0], [3.0, 5.0]];
        let (mean, std) = pool_predictions(&predictions);
        assert_eq!(mean, array![2.0, 4.0]);
        assert_eq!(std, array![1.0, 1.0]);
    }

    #[test]
    fn identical_predictions_pool_to_zero_uncertainty() {
        let predictions = Array2::from_elem((5, 3), 0.7);
        let (mean, std) = pool_predictions(&predictions);
        assert!(mean.iter().all(|&m| (m - 0.7).abs() < 1e-15));
        assert!(std.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn single_window_single_model_has_zero_uncertainty() {
        let (raw, ckpts) = trained_fixture();
        let record = &raw.entities[0];
        // stride larger than the series leaves exactly one window
        let est = estimate_characteristics(
            &ckpts[..1],
            &record.id,
            &record.series(),
            None,
            Some(1000),
        )
        .unwrap();
        assert_eq!(est.window_count, 1);
        assert!(est.uncertainty_std.iter().all(|&u| u == 0.0));
        // so does a period exactly one window long
        let period = Period::new(record.dates[0], record.dates[29]).unwrap();
        let est = estimate_characteristics(
            &ckpts[..1],
            &record.id,
            &record.series(),
            Some(&period),
            None,
        )
        .unwrap();
        assert_eq!(est.window_count, 1);
        assert!(est.uncertainty_std.iter().all(|&u| u == 0.0));
    }

    #[test]
    fn uncertainty_reproduces_population_std_of_emitted_predictions() {
        let (raw, ckpts) = trained_fixture();
        let estimator = Estimator::from_checkpoints(&ckpts).unwrap();
        let record = &raw.entities[2];
        let (est, predictions) = estimator
            .estimate_detailed(&record.id, &record.series(), None, None)
            .unwrap();
        let (mean, std) = pool_predictions(&predictions);
        for j in 0..mean.len() {
            assert_relative_eq!(est.estimate_std[j], mean[j], epsilon = 1e-9);
            assert_relative_eq!(est.uncertainty_std[j], std[j], epsilon = 1e-9);
        }
        assert_eq!(predictions.nrows(), 2 * est.window_count);
    }

    #[test]
    fn copies_of_one_checkpoint_estimate_like_the_single_checkpoint() {
        let (raw, ckpts) = trained_fixture();
        let record = &raw.entities[1];
        let single = estimate_characteristics(&ckpts[..1], &record.id, &record.series(), None, None)
            .unwrap();
        let copies = vec![ckpts[0].clone(); 5];
        let pooled =
            estimate_characteristics(&copies, &record.id, &record.series(), None, None).unwrap();
        for j in 0..single.estimate_std.len() {
            assert_relative_eq!(
                single.estimate_std[j],
                pooled.estimate_std[j],
                epsilon = 1e-12
            );
            assert_relative_eq!(
                single.uncertainty_std[j],
                pooled.uncertainty_std[j],
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn estimates_ignore_stored_characteristics() {
        let (raw, ckpts) = trained_fixture();
        let mut tampered = raw.clone();
        for rec in &mut tampered.entities {
            rec.characteristics.mapv_inplace(|v| v + 1000.0);
            rec.available = vec![false; rec.characteristics.len()];
        }
        let ids = raw.entity_ids();
        let clean = denoise_or_impute(&ckpts, &raw, &ids, None, None).unwrap();
        let masked = denoise_or_impute(&ckpts, &tampered, &ids, None, None).unwrap();
        assert_eq!(clean.len(), ids.len());
        for (a, b) in clean.iter().zip(&masked) {
            assert_eq!(a, b, "estimates must not depend on stored characteristics");
        }
    }

    #[test]
    fn embed_entity_pools_window_embeddings() {
        let (raw, ckpts) = trained_fixture();
        let record = &raw.entities[3];
        let (pooled, embeddings) =
            embed_entity(&ckpts[0], &record.series(), None, 30, 30).unwrap();
        assert_eq!(embeddings.nrows(), 3);
        let manual = embeddings.sum_axis(Axis(0)) / 3.0;
        for (a, b) in pooled.iter().zip(manual.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        // constant series: every window identical, pooled equals each window
        let mut constant = record.clone();
        constant.drivers.fill(1.0);
        constant.response.fill(2.0);
        let (pooled_c, embeddings_c) =
            embed_entity(&ckpts[0], &constant.series(), None, 30, 30).unwrap();
        for row in embeddings_c.rows() {
            for (a, b) in row.iter().zip(pooled_c.iter()) {
                assert_relative_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_ensembles_are_rejected() {
        let (_, ckpts) = trained_fixture();
        let mut other = ckpts[1].clone();
        other.stats.response_mean += 1.0;
        let err = Estimator::from_checkpoints(&[ckpts[0].clone(), other]);
        assert!(matches!(err, Err(Error::Contract(_))));
        assert!(Estimator::from_checkpoints(&[]).is_err());
    }

    #[test]
    fn short_period_is_rejected() {
        let (raw, ckpts) = trained_fixture();
        let record = &raw.entities[0];
        let period = Period::new(record.dates[0], record.dates[9]).unwrap();
        let err = estimate_characteristics(&ckpts, &record.id, &record.series(), Some(&period), None);
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
