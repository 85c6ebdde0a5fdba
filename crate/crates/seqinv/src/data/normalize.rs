//! Z-score normalization fitted on a training subset and applied globally.
//!
//! Drivers and the response are standardized with statistics pooled over
//! the fit entities and fit period; characteristics are standardized per
//! column over fit entities with available values. Response normalization
//! is global rather than per-entity: per-entity standardization would
//! erase the entity-discriminative signal the contrastive loss relies on.

use super::{Dataset, Period, SeriesView};
use crate::error::{Error, Result};
use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};
use std::ops::Range;

const MIN_STD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub driver_mean: Vec<f64>,
    pub driver_std: Vec<f64>,
    pub response_mean: f64,
    pub response_std: f64,
    pub characteristic_mean: Vec<f64>,
    pub characteristic_std: Vec<f64>,
}

struct Accumulator {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Accumulator {
    fn new() -> Self {
        Accumulator {
            n: 0.0,
            sum: 0.0,
            sum_sq: 0.0,
        }
    }

    fn push(&mut self, v: f64) {
        self.n += 1.0;
        self.sum += v;
        self.sum_sq += v * v;
    }

    /// Population mean and standard deviation.
    fn stats(&self, label: &str) -> Result<(f64, f64)> {
        if self.n == 0.0 {
            return Err(Error::Data(format!("no values to fit statistics for {label}")));
        }
        let mean = self.sum / self.n;
        let var = (self.sum_sq / self.n - mean * mean).max(0.0);
        let std = var.sqrt();
        if std < MIN_STD {
            return Err(Error::Data(format!(
                "column {label} has zero variance over the fit set"
            )));
        }
        Ok((mean, std))
    }
}

/// Fit standardization statistics on `fit_entity_ids` over `fit_period`
/// and return the fully standardized dataset together with the statistics.
pub fn fit_normalize(
    dataset: &Dataset,
    fit_entity_ids: &[String],
    fit_period: Option<&Period>,
) -> Result<(Dataset, NormalizationStats)> {
    if fit_entity_ids.is_empty() {
        return Err(Error::Contract("normalization fit set must be non-empty".into()));
    }
    let d_x = dataset.driver_dim();
    let d_z = dataset.characteristic_dim();
    let mut driver_acc: Vec<Accumulator> = (0..d_x).map(|_| Accumulator::new()).collect();
    let mut response_acc = Accumulator::new();
    let mut char_acc: Vec<Accumulator> = (0..d_z).map(|_| Accumulator::new()).collect();

    for id in fit_entity_ids {
        let record = dataset.entity(id)?;
        let range = record.range_for(fit_period);
        for t in range.clone() {
            for j in 0..d_x {
                driver_acc[j].push(record.drivers[(t, j)]);
            }
            response_acc.push(record.response[t]);
        }
        for j in 0..d_z {
            if record.available[j] {
                char_acc[j].push(record.characteristics[j]);
            }
        }
    }

    let mut driver_mean = Vec::with_capacity(d_x);
    let mut driver_std = Vec::with_capacity(d_x);
    for (j, acc) in driver_acc.iter().enumerate() {
        let (m, s) = acc.stats(&dataset.driver_names[j])?;
        driver_mean.push(m);
        driver_std.push(s);
    }
    let (response_mean, response_std) = response_acc.stats("response")?;
    let mut characteristic_mean = Vec::with_capacity(d_z);
    let mut characteristic_std = Vec::with_capacity(d_z);
    for (j, acc) in char_acc.iter().enumerate() {
        let (m, s) = acc.stats(&dataset.characteristic_names[j])?;
        characteristic_mean.push(m);
        characteristic_std.push(s);
    }

    let stats = NormalizationStats {
        driver_mean,
        driver_std,
        response_mean,
        response_std,
        characteristic_mean,
        characteristic_std,
    };
    let standardized = stats.standardize_dataset(dataset)?;
    Ok((standardized, stats))
}

impl NormalizationStats {
    pub fn driver_dim(&self) -> usize {
        self.driver_mean.len()
    }

    pub fn characteristic_dim(&self) -> usize {
        self.characteristic_mean.len()
    }

    /// Standardize every entity of a dataset (drivers, response, and
    /// characteristics, including retained originals when present).
    pub fn standardize_dataset(&self, dataset: &Dataset) -> Result<Dataset> {
        if dataset.driver_dim() != self.driver_dim()
            || dataset.characteristic_dim() != self.characteristic_dim()
        {
            return Err(Error::Contract(
                "normalization statistics do not match dataset schema".into(),
            ));
        }
        let mut out = dataset.clone();
        for rec in &mut out.entities {
            for j in 0..self.driver_dim() {
                let (m, s) = (self.driver_mean[j], self.driver_std[j]);
                rec.drivers
                    .slice_mut(s![.., j])
                    .mapv_inplace(|v| (v - m) / s);
            }
            rec.response
                .mapv_inplace(|v| (v - self.response_mean) / self.response_std);
            rec.characteristics = self.standardize_characteristics(&rec.characteristics);
            if let Some(orig) = &rec.original_characteristics {
                rec.original_characteristics = Some(self.standardize_characteristics(orig));
            }
        }
        Ok(out)
    }

    pub fn standardize_characteristics(&self, z: &Array1<f64>) -> Array1<f64> {
        Array1::from_shape_fn(z.len(), |j| {
            (z[j] - self.characteristic_mean[j]) / self.characteristic_std[j]
        })
    }

    pub fn unstandardize_characteristics(&self, z: &Array1<f64>) -> Array1<f64> {
        Array1::from_shape_fn(z.len(), |j| {
            z[j] * self.characteristic_std[j] + self.characteristic_mean[j]
        })
    }

    /// Map a standardized-space uncertainty to physical units (scale only).
    pub fn physical_uncertainty(&self, unc: &Array1<f64>) -> Array1<f64> {
        Array1::from_shape_fn(unc.len(), |j| unc[j] * self.characteristic_std[j])
    }

    pub fn unstandardize_response(&self, y: &Array1<f64>) -> Array1<f64> {
        y.mapv(|v| v * self.response_std + self.response_mean)
    }

    pub fn standardize_response(&self, y: &Array1<f64>) -> Array1<f64> {
        y.mapv(|v| (v - self.response_mean) / self.response_std)
    }

    /// Standardized combined matrix `[x_t ; y_t]` for a raw series view.
    pub fn standardized_combined(&self, series: &SeriesView, range: Range<usize>) -> Array2<f64> {
        let d = self.driver_dim();
        let rows = range.len();
        let mut out = Array2::zeros((rows, d + 1));
        for (r, t) in range.enumerate() {
            for j in 0..d {
                out[(r, j)] = (series.drivers[(t, j)] - self.driver_mean[j]) / self.driver_std[j];
            }
            out[(r, d)] = (series.response[t] - self.response_mean) / self.response_std;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::super::toy_record;
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array1;

    fn dataset_with_records(records: Vec<super::super::EntityRecord>) -> Dataset {
        Dataset::new(
            vec!["precip".into(), "temp".into()],
            vec!["a".into(), "b".into(), "c".into()],
            records,
        )
        .unwrap()
    }

    #[test]
    fn standardized_fit_columns_have_zero_mean_unit_std() {
        let ds = dataset_with_records(vec![
            toy_record("e0", 25, 2, 3),
            toy_record("e1", 25, 2, 3),
        ]);
        // perturb so characteristics differ across entities
        let mut ds = ds;
        ds.entities[1].characteristics = Array1::from_vec(vec![2.0, -1.0, 4.0]);
        let ids = ds.entity_ids();
        let (std_ds, _stats) = fit_normalize(&ds, &ids, None).unwrap();

        for j in 0..2 {
            let mut vals = Vec::new();
            for rec in &std_ds.entities {
                vals.extend(rec.drivers.column(j).iter().copied());
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert_relative_eq!(mean, 0.0, epsilon = 1e-9);
            assert_relative_eq!(var.sqrt(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn inverse_transform_round_trips() {
        let mut ds = dataset_with_records(vec![
            toy_record("e0", 15, 2, 3),
            toy_record("e1", 15, 2, 3),
        ]);
        ds.entities[1].characteristics = Array1::from_vec(vec![3.0, 0.25, -2.0]);
        let ids = ds.entity_ids();
        let (std_ds, stats) = fit_normalize(&ds, &ids, None).unwrap();
        for (orig, std) in ds.entities.iter().zip(&std_ds.entities) {
            let back = stats.unstandardize_characteristics(&std.characteristics);
            for (a, b) in orig.characteristics.iter().zip(back.iter()) {
                assert_relative_eq!(a, b, epsilon = 1e-9);
            }
            let y_back = stats.unstandardize_response(&std.response);
            for (a, b) in orig.response.iter().zip(y_back.iter()) {
                assert_relative_eq!(a, b, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn held_out_entities_keep_nonzero_mean_under_fit_stats() {
        let mut ds = dataset_with_records(vec![
            toy_record("e0", 20, 2, 3),
            toy_record("e1", 20, 2, 3),
            toy_record("e2", 20, 2, 3),
        ]);
        ds.entities[1].characteristics = Array1::from_vec(vec![4.0, -1.0, 0.5]);
        // shift the held-out entity's response far from the fit entities
        ds.entities[2].response.mapv_inplace(|v| v + 50.0);
        let fit_ids = vec!["e0".to_string(), "e1".to_string()];
        let (std_ds, _) = fit_normalize(&ds, &fit_ids, None).unwrap();
        let held_mean = std_ds.entities[2].response.mean().unwrap();
        assert!(
            held_mean.abs() > 1.0,
            "held-out mean should stay far from zero, got {held_mean}"
        );
    }

    #[test]
    fn zero_variance_column_is_rejected() {
        let mut ds = dataset_with_records(vec![
            toy_record("e0", 10, 2, 3),
            toy_record("e1", 10, 2, 3),
        ]);
        for rec in &mut ds.entities {
            rec.drivers.slice_mut(s![.., 1]).fill(7.0);
        }
        let ids = ds.entity_ids();
        let err = fit_normalize(&ds, &ids, None).unwrap_err();
        assert!(err.to_string().contains("temp"), "error should name the column: {err}");
    }

    #[test]
    fn unavailable_characteristics_do_not_enter_fit() {
        let mut ds = dataset_with_records(vec![
            toy_record("e0", 10, 2, 3),
            toy_record("e1", 10, 2, 3),
            toy_record("e2", 10, 2, 3),
        ]);
        ds.entities[0].characteristics = Array1::from_vec(vec![1.0, 1.0, 1.0]);
        ds.entities[1].characteristics = Array1::from_vec(vec![3.0, 3.0, 3.0]);
        // outlier value hidden behind an unavailable mask
        ds.entities[2].characteristics = Array1::from_vec(vec![1e9, 2.0, 2.0]);
        ds.entities[2].available = vec![false, true, true];
        let ids = ds.entity_ids();
        let (_, stats) = fit_normalize(&ds, &ids, None).unwrap();
        assert_relative_eq!(stats.characteristic_mean[0], 2.0, epsilon = 1e-12);
    }
}
