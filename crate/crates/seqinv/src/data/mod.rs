//! Dataset model and preparation: records, windowing, positive-pair
//! sampling, normalization, corruption/missing injectors, CSV ingestion,
//! and the synthetic ground-truth generator.

mod corrupt;
mod ingest;
mod normalize;
mod synthetic;

pub use corrupt::{corrupt, mask_missing, CorruptionGranularity, CorruptionMode, CorruptionSpec};
pub use ingest::{camels_schema, export_attributes, export_dataset, ingest_csv, IngestReport, Schema};
pub use normalize::{fit_normalize, NormalizationStats};
pub use synthetic::{bucket_simulate, synthesize, ClimateRanges, SyntheticConfig};

use crate::error::{Error, Result};
use chrono::NaiveDate;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Inclusive date interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Period {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl Period {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self> {
        if end < start {
            return Err(Error::Config(format!(
                "period end {end} precedes start {start}"
            )));
        }
        Ok(Period { start, end })
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        self.start <= date && date <= self.end
    }

    pub fn overlaps(&self, other: &Period) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    /// Index range of the dates falling inside this period (dates sorted).
    pub fn index_range(&self, dates: &[NaiveDate]) -> Range<usize> {
        let lo = dates.partition_point(|d| *d < self.start);
        let hi = dates.partition_point(|d| *d <= self.end);
        lo..hi
    }
}

/// One entity's observed series and (possibly partial) characteristics.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityRecord {
    pub id: String,
    /// Sorted observation dates; length T.
    pub dates: Vec<NaiveDate>,
    /// `T x D_x` driver matrix, one column per driver.
    pub drivers: Array2<f64>,
    /// Response series, length T.
    pub response: Array1<f64>,
    /// Characteristic vector, length D_z; entries with `available` false
    /// hold placeholder values and must not be read as measurements.
    pub characteristics: Array1<f64>,
    pub available: Vec<bool>,
    /// Pre-corruption characteristics, kept by the noise injector so that
    /// denoising can be scored against the truth.
    pub original_characteristics: Option<Array1<f64>>,
}

impl EntityRecord {
    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.response.len();
        if self.drivers.nrows() != t || self.dates.len() != t {
            return Err(Error::Data(format!(
                "entity {}: drivers rows {} / dates {} / response {} are inconsistent",
                self.id,
                self.drivers.nrows(),
                self.dates.len(),
                t
            )));
        }
        if self.available.len() != self.characteristics.len() {
            return Err(Error::Data(format!(
                "entity {}: availability mask length {} does not match characteristics {}",
                self.id,
                self.available.len(),
                self.characteristics.len()
            )));
        }
        if self.drivers.iter().any(|v| !v.is_finite())
            || self.response.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Data(format!(
                "entity {}: non-finite driver or response values",
                self.id
            )));
        }
        if !self.dates.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Data(format!(
                "entity {}: dates are not strictly increasing",
                self.id
            )));
        }
        Ok(())
    }

    /// Row range covered by `period`, or the full record when `None`.
    pub fn range_for(&self, period: Option<&Period>) -> Range<usize> {
        match period {
            Some(p) => p.index_range(&self.dates),
            None => 0..self.len(),
        }
    }

    /// Rows `[x_t ; y_t]` over an index range: `len x (D_x + 1)`.
    pub fn combined(&self, range: Range<usize>) -> Array2<f64> {
        let rows = range.len();
        let d = self.drivers.ncols();
        let mut out = Array2::zeros((rows, d + 1));
        out.slice_mut(s![.., ..d])
            .assign(&self.drivers.slice(s![range.clone(), ..]));
        out.slice_mut(s![.., d])
            .assign(&self.response.slice(s![range]));
        out
    }

    /// Series-only view: the inference path receives this, never the
    /// stored characteristics.
    pub fn series(&self) -> SeriesView<'_> {
        SeriesView {
            dates: &self.dates,
            drivers: self.drivers.view(),
            response: self.response.view(),
        }
    }
}

/// Borrowed driver/response series without characteristics.
#[derive(Debug, Clone, Copy)]
pub struct SeriesView<'a> {
    pub dates: &'a [NaiveDate],
    pub drivers: ArrayView2<'a, f64>,
    pub response: ArrayView1<'a, f64>,
}

impl<'a> SeriesView<'a> {
    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }

    pub fn range_for(&self, period: Option<&Period>) -> Range<usize> {
        match period {
            Some(p) => p.index_range(self.dates),
            None => 0..self.len(),
        }
    }
}

/// A collection of entities sharing driver and characteristic schemas.
/// Entities are kept sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub driver_names: Vec<String>,
    pub characteristic_names: Vec<String>,
    pub entities: Vec<EntityRecord>,
}

impl Dataset {
    pub fn new(
        driver_names: Vec<String>,
        characteristic_names: Vec<String>,
        mut entities: Vec<EntityRecord>,
    ) -> Result<Self> {
        entities.sort_by(|a, b| a.id.cmp(&b.id));
        let ds = Dataset {
            driver_names,
            characteristic_names,
            entities,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for rec in &self.entities {
            rec.validate()?;
            if rec.drivers.ncols() != self.driver_names.len() {
                return Err(Error::Data(format!(
                    "entity {}: driver column count {} does not match schema {}",
                    rec.id,
                    rec.drivers.ncols(),
                    self.driver_names.len()
                )));
            }
            if rec.characteristics.len() != self.characteristic_names.len() {
                return Err(Error::Data(format!(
                    "entity {}: characteristic count {} does not match schema {}",
                    rec.id,
                    rec.characteristics.len(),
                    self.characteristic_names.len()
                )));
            }
        }
        Ok(())
    }

    pub fn driver_dim(&self) -> usize {
        self.driver_names.len()
    }

    pub fn characteristic_dim(&self) -> usize {
        self.characteristic_names.len()
    }

    /// Sequence row width `D_x + 1`.
    pub fn row_width(&self) -> usize {
        self.driver_dim() + 1
    }

    pub fn entity_ids(&self) -> Vec<String> {
        self.entities.iter().map(|e| e.id.clone()).collect()
    }

    pub fn entity(&self, id: &str) -> Result<&EntityRecord> {
        self.entities
            .binary_search_by(|e| e.id.as_str().cmp(id))
            .map(|idx| &self.entities[idx])
            .map_err(|_| Error::Data(format!("unknown entity id {id}")))
    }
}

/// Valid window start offsets for a series of `len` rows.
pub fn window_starts(len: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if window == 0 || stride == 0 {
        return Err(Error::Contract("window and stride must be at least 1".into()));
    }
    if len < window {
        return Err(Error::Contract(format!(
            "series length {len} is shorter than window {window}"
        )));
    }
    Ok((0..=(len - window)).step_by(stride).collect())
}

/// Cut a combined `T x C` matrix into `floor((T - W)/stride) + 1` windows.
pub fn windows_of(combined: &Array2<f64>, window: usize, stride: usize) -> Result<Vec<Array2<f64>>> {
    let starts = window_starts(combined.nrows(), window, stride)?;
    Ok(starts
        .into_iter()
        .map(|s0| combined.slice(s![s0..s0 + window, ..]).to_owned())
        .collect())
}

/// Windows of one record's full combined series, each row `[x_t ; y_t]`.
pub fn make_windows(record: &EntityRecord, window: usize, stride: usize) -> Result<Vec<Array2<f64>>> {
    let combined = record.combined(0..record.len());
    windows_of(&combined, window, stride)
}

/// Two windows of one entity, sampled for contrastive training.
#[derive(Debug, Clone)]
pub struct WindowPair {
    pub entity_id: String,
    /// Index into the id list the batch was sampled from.
    pub entity_index: usize,
    pub anchor: Array2<f64>,
    pub positive: Array2<f64>,
    pub anchor_start: usize,
    pub positive_start: usize,
}

/// Sample `n` distinct entities (without replacement) and two independent
/// uniform window starts per entity; coincident starts are permitted.
pub fn sample_pairs<R: Rng>(
    dataset: &Dataset,
    entity_ids: &[String],
    period: Option<&Period>,
    n: usize,
    window: usize,
    rng: &mut R,
) -> Result<Vec<WindowPair>> {
    if n == 0 {
        return Err(Error::Contract("batch entity count must be at least 1".into()));
    }
    if n > entity_ids.len() {
        return Err(Error::Contract(format!(
            "batch entity count {n} exceeds available entities {}",
            entity_ids.len()
        )));
    }
    let chosen = rand::seq::index::sample(rng, entity_ids.len(), n);
    let mut pairs = Vec::with_capacity(n);
    for entity_index in chosen {
        let id = &entity_ids[entity_index];
        let record = dataset.entity(id)?;
        let range = record.range_for(period);
        if range.len() < window {
            return Err(Error::Contract(format!(
                "entity {id} has only {} rows in period, window is {window}",
                range.len()
            )));
        }
        let combined = record.combined(range.clone());
        let max_start = range.len() - window;
        let anchor_start = rng.random_range(0..=max_start);
        let positive_start = rng.random_range(0..=max_start);
        pairs.push(WindowPair {
            entity_id: id.clone(),
            entity_index,
            anchor: combined.slice(s![anchor_start..anchor_start + window, ..]).to_owned(),
            positive: combined
                .slice(s![positive_start..positive_start + window, ..])
                .to_owned(),
            anchor_start,
            positive_start,
        });
    }
    Ok(pairs)
}

#[cfg(test)]
pub(crate) fn toy_record(id: &str, days: usize, d_x: usize, d_z: usize) -> EntityRecord {
    let start = NaiveDate::from_ymd_opt(2000, 1, 1).unwrap();
    EntityRecord {
        id: id.to_string(),
        dates: (0..days)
            .map(|k| start + chrono::Days::new(k as u64))
            .collect(),
        drivers: Array2::from_shape_fn((days, d_x), |(t, j)| (t * (j + 1)) as f64 * 0.1),
        response: Array1::from_shape_fn(days, |t| t as f64 * 0.01),
        characteristics: Array1::from_shape_fn(d_z, |j| j as f64 + 0.5),
        available: vec![true; d_z],
        original_characteristics: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_dataset(entities: usize, days: usize) -> Dataset {
        let records = (0..entities)
            .map(|k| toy_record(&format!("ent{k:02}"), days, 2, 3))
            .collect();
        Dataset::new(
            vec!["precip".into(), "temp".into()],
            vec!["a".into(), "b".into(), "c".into()],
            records,
        )
        .unwrap()
    }

    #[test]
    fn window_starts_basic_counts() {
        assert_eq!(window_starts(8, 4, 2).unwrap(), vec![0, 2, 4]);
        assert_eq!(window_starts(365, 365, 183).unwrap(), vec![0]);
        assert_eq!(window_starts(365 * 2, 365, 183).unwrap(), vec![0, 183]);
        assert!(window_starts(3, 4, 1).is_err());
        assert!(window_starts(4, 4, 0).is_err());
    }

    proptest! {
        #[test]
        fn window_count_matches_formula_and_brute_force(
            len in 1usize..400,
            window in 1usize..50,
            stride in 1usize..40,
        ) {
            prop_assume!(len >= window);
            let starts = window_starts(len, window, stride).unwrap();
            // brute-force enumeration of valid starts
            let brute: Vec<usize> = (0..len)
                .filter(|s| s % stride == 0 && s + window <= len)
                .collect();
            prop_assert_eq!(&starts, &brute);
            prop_assert_eq!(starts.len(), (len - window) / stride + 1);
        }
    }

    #[test]
    fn make_windows_rows_concatenate_drivers_and_response() {
        let record = toy_record("a", 6, 2, 1);
        let windows = make_windows(&record, 3, 2).unwrap();
        assert_eq!(windows.len(), 2);
        for (wi, start) in windows.iter().zip([0usize, 2]) {
            for t in 0..3 {
                assert_eq!(wi[(t, 0)], record.drivers[(start + t, 0)]);
                assert_eq!(wi[(t, 1)], record.drivers[(start + t, 1)]);
                assert_eq!(wi[(t, 2)], record.response[start + t]);
            }
        }
    }

    #[test]
    fn period_index_range_selects_inclusive_span() {
        let record = toy_record("a", 10, 1, 1);
        let period = Period::new(record.dates[3], record.dates[7]).unwrap();
        assert_eq!(record.range_for(Some(&period)), 3..8);
        let outside = Period::new(
            NaiveDate::from_ymd_opt(1990, 1, 1).unwrap(),
            NaiveDate::from_ymd_opt(1990, 12, 31).unwrap(),
        )
        .unwrap();
        assert_eq!(record.range_for(Some(&outside)), 0..0);
    }

    #[test]
    fn sample_pairs_draws_two_windows_per_entity() {
        let ds = toy_dataset(5, 30);
        let ids = ds.entity_ids();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pairs = sample_pairs(&ds, &ids, None, 3, 10, &mut rng).unwrap();
        assert_eq!(pairs.len(), 3);
        let mut seen = std::collections::BTreeSet::new();
        for p in &pairs {
            assert!(seen.insert(p.entity_id.clone()), "entities must be distinct");
            assert_eq!(p.anchor.dim(), (10, 3));
            assert_eq!(p.positive.dim(), (10, 3));
        }
    }

    #[test]
    fn sample_pairs_single_entity_batch() {
        let ds = toy_dataset(2, 20);
        let ids = ds.entity_ids();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs = sample_pairs(&ds, &ids, None, 1, 5, &mut rng).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].anchor.nrows(), 5);
    }

    #[test]
    fn sample_pairs_is_deterministic_per_seed() {
        let ds = toy_dataset(6, 40);
        let ids = ds.entity_ids();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            sample_pairs(&ds, &ids, None, 4, 12, &mut rng).unwrap()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.entity_id, y.entity_id);
            assert_eq!(x.anchor_start, y.anchor_start);
            assert_eq!(x.positive_start, y.positive_start);
            assert_eq!(x.anchor, y.anchor);
        }
    }

    #[test]
    fn sample_pairs_rejects_oversized_batch() {
        let ds = toy_dataset(2, 20);
        let ids = ds.entity_ids();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(sample_pairs(&ds, &ids, None, 3, 5, &mut rng).is_err());
    }

    #[test]
    fn dataset_lookup_by_id() {
        let ds = toy_dataset(3, 5);
        assert_eq!(ds.entity("ent01").unwrap().id, "ent01");
        assert!(ds.entity("nope").is_err());
    }
}
