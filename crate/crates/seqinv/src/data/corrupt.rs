//! Injectors emulating measurement noise and missing characteristics.
//!
//! Both return a new dataset and never touch drivers or responses. The
//! noise injector expects characteristics in standardized space, so a
//! noise multiple of `m` means additive Gaussian noise with standard
//! deviation `m` per column.

use super::Dataset;
use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorruptionMode {
    Noise,
    Missing,
}

/// Whether the corrupted fraction selects whole entities (every
/// characteristic of a selected entity is perturbed) or individual
/// table cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CorruptionGranularity {
    #[default]
    Entities,
    Entries,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub mode: CorruptionMode,
    /// Fraction of entities (or entries) affected, in [0, 1].
    pub fraction: f64,
    /// Noise standard deviation in standardized characteristic units.
    pub noise_multiple: f64,
    pub granularity: CorruptionGranularity,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn noise(fraction: f64, noise_multiple: f64, seed: u64) -> Self {
        CorruptionSpec {
            mode: CorruptionMode::Noise,
            fraction,
            noise_multiple,
            granularity: CorruptionGranularity::Entities,
            seed,
        }
    }

    pub fn missing(fraction: f64, seed: u64) -> Self {
        CorruptionSpec {
            mode: CorruptionMode::Missing,
            fraction,
            noise_multiple: 0.0,
            granularity: CorruptionGranularity::Entities,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::Config(format!(
                "corruption fraction must lie in [0, 1], got {}",
                self.fraction
            )));
        }
        if self.mode == CorruptionMode::Noise && self.noise_multiple <= 0.0 {
            return Err(Error::Config(format!(
                "noise multiple must be positive, got {}",
                self.noise_multiple
            )));
        }
        Ok(())
    }
}

/// Floor rule shared by both injectors.
fn affected_count(total: usize, fraction: f64) -> usize {
    (fraction * total as f64).floor() as usize
}

/// Apply a corruption spec. Noise mode perturbs characteristics of the
/// selected fraction and retains the originals alongside; missing mode
/// clears availability masks instead.
pub fn corrupt(dataset: &Dataset, spec: &CorruptionSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.mode {
        CorruptionMode::Missing => mask_missing(dataset, spec.fraction, &mut rng),
        CorruptionMode::Noise => {
            let mut out = dataset.clone();
            let normal = Normal::new(0.0, spec.noise_multiple)
                .map_err(|e| Error::Config(format!("invalid noise distribution: {e}")))?;
            match spec.granularity {
                CorruptionGranularity::Entities => {
                    let count = affected_count(out.entities.len(), spec.fraction);
                    let mut chosen: Vec<usize> =
                        rand::seq::index::sample(&mut rng, out.entities.len(), count).into_vec();
                    chosen.sort_unstable();
                    for idx in chosen {
                        let rec = &mut out.entities[idx];
                        rec.original_characteristics = Some(rec.characteristics.clone());
                        for j in 0..rec.characteristics.len() {
                            rec.characteristics[j] += normal.sample(&mut rng);
                        }
                    }
                }
                CorruptionGranularity::Entries => {
                    let d_z = out.characteristic_dim();
                    let total = out.entities.len() * d_z;
                    let count = affected_count(total, spec.fraction);
                    let mut chosen: Vec<usize> =
                        rand::seq::index::sample(&mut rng, total, count).into_vec();
                    chosen.sort_unstable();
                    for cell in chosen {
                        let (e, j) = (cell / d_z, cell % d_z);
                        let rec = &mut out.entities[e];
                        if rec.original_characteristics.is_none() {
                            rec.original_characteristics = Some(rec.characteristics.clone());
                        }
                        rec.characteristics[j] += normal.sample(&mut rng);
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Mark `floor(fraction * entity_count)` uniformly chosen entities as having
/// no available characteristics. Values are kept but must be ignored by any
/// supervision machinery.
pub fn mask_missing<R: Rng>(dataset: &Dataset, fraction: f64, rng: &mut R) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "missing fraction must lie in [0, 1], got {fraction}"
        )));
    }
    let mut out = dataset.clone();
    let count = affected_count(out.entities.len(), fraction);
    let mut chosen: Vec<usize> =
        rand::seq::index::sample(rng, out.entities.len(), count).into_vec();
    chosen.sort_unstable();
    for idx in chosen {
        let rec = &mut out.entities[idx];
        rec.available = vec![false; rec.characteristics.len()];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::{toy_record, Dataset};
    use super::*;
    use ndarray::Array1;

    fn toy_dataset(n: usize) -> Dataset {
        let records = (0..n)
            .map(|k| toy_record(&format!("ent{k:04}"), 3, 2, 3))
            .collect();
        Dataset::new(
            vec!["precip".into(), "temp".into()],
            vec!["a".into(), "b".into(), "c".into()],
            records,
        )
        .unwrap()
    }

    #[test]
    fn zero_fraction_leaves_dataset_unchanged() {
        let ds = toy_dataset(10);
        let spec = CorruptionSpec::noise(0.0, 2.0, 7);
        let out = corrupt(&ds, &spec).unwrap();
        assert_eq!(ds, out);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let masked = mask_missing(&ds, 0.0, &mut rng).unwrap();
        assert_eq!(ds, masked);
    }

    #[test]
    fn corruption_is_deterministic_per_seed() {
        let ds = toy_dataset(20);
        let spec = CorruptionSpec::noise(0.5, 2.0, 41);
        let a = corrupt(&ds, &spec).unwrap();
        let b = corrupt(&ds, &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corruption_preserves_unaffected_entities_bitwise_and_never_touches_series() {
        let ds = toy_dataset(20);
        let spec = CorruptionSpec::noise(0.5, 2.0, 13);
        let out = corrupt(&ds, &spec).unwrap();
        let mut touched = 0;
        for (orig, new) in ds.entities.iter().zip(&out.entities) {
            assert_eq!(orig.drivers, new.drivers);
            assert_eq!(orig.response, new.response);
            assert_eq!(orig.available, new.available);
            if new.original_characteristics.is_some() {
                touched += 1;
                assert_eq!(new.original_characteristics.as_ref().unwrap(), &orig.characteristics);
                assert_ne!(orig.characteristics, new.characteristics);
            } else {
                assert_eq!(orig.characteristics, new.characteristics);
            }
        }
        assert_eq!(touched, 10);
    }

    #[test]
    fn noise_sample_moments_match_requested_scale() {
        // 10,000 entities, fraction 1, multiple 2: per-column sample std of
        // the perturbation should sit within 2% of 2.
        let n = 10_000;
        let mut ds = toy_dataset(n);
        for rec in &mut ds.entities {
            rec.characteristics = Array1::zeros(3);
        }
        let spec = CorruptionSpec::noise(1.0, 2.0, 3);
        let out = corrupt(&ds, &spec).unwrap();
        for j in 0..3 {
            let deltas: Vec<f64> = out
                .entities
                .iter()
                .map(|r| r.characteristics[j])
                .collect();
            let mean = deltas.iter().sum::<f64>() / n as f64;
            let var = deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
            let std = var.sqrt();
            assert!(
                (std - 2.0).abs() / 2.0 < 0.02,
                "column {j}: sample std {std} deviates more than 2% from 2.0"
            );
        }
    }

    #[test]
    fn noise_mode_rejects_nonpositive_multiple() {
        let ds = toy_dataset(4);
        assert!(corrupt(&ds, &CorruptionSpec::noise(0.5, 0.0, 1)).is_err());
        assert!(corrupt(&ds, &CorruptionSpec::noise(0.5, -1.0, 1)).is_err());
        assert!(corrupt(&ds, &CorruptionSpec::noise(1.5, 1.0, 1)).is_err());
    }

    #[test]
    fn mask_missing_uses_floor_rule() {
        let ds = toy_dataset(400);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let out = mask_missing(&ds, 0.5, &mut rng).unwrap();
        let masked = out
            .entities
            .iter()
            .filter(|r| r.available.iter().all(|&a| !a))
            .count();
        assert_eq!(masked, 200);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ds9 = toy_dataset(9);
        let out9 = mask_missing(&ds9, 0.5, &mut rng).unwrap();
        let masked9 = out9
            .entities
            .iter()
            .filter(|r| r.available.iter().all(|&a| !a))
            .count();
        assert_eq!(masked9, 4, "floor(0.5 * 9) = 4");
    }

    #[test]
    fn mask_missing_full_fraction_masks_everything() {
        let ds = toy_dataset(12);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = mask_missing(&ds, 1.0, &mut rng).unwrap();
        assert!(out
            .entities
            .iter()
            .all(|r| r.available.iter().all(|&a| !a)));
        // values themselves are retained
        for (orig, new) in ds.entities.iter().zip(&out.entities) {
            assert_eq!(orig.characteristics, new.characteristics);
        }
    }

    #[test]
    fn entry_granularity_touches_the_requested_cell_count() {
        let ds = toy_dataset(50);
        let spec = CorruptionSpec {
            mode: CorruptionMode::Noise,
            fraction: 0.2,
            noise_multiple: 1.0,
            granularity: CorruptionGranularity::Entries,
            seed: 11,
        };
        let out = corrupt(&ds, &spec).unwrap();
        let mut changed = 0;
        for (orig, new) in ds.entities.iter().zip(&out.entities) {
            for j in 0..3 {
                if orig.characteristics[j] != new.characteristics[j] {
                    changed += 1;
                }
            }
        }
        assert_eq!(changed, 30, "floor(0.2 * 150) = 30 cells");
    }
}
