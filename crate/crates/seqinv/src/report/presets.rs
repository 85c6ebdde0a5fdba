//! Named end-to-end experiment pipelines.
//!
//! Synthetic presets self-generate their data, train an ensemble, and
//! evaluate characteristic reconstruction on held-out entities over a
//! held-out period; the noise/missing variants corrupt or mask training
//! characteristics first. The forward preset measures the downstream value
//! of different conditioning sources in the driver-to-response model. The
//! external-data preset mirrors the full-scale estimation protocol and is
//! only runnable when a prepared data directory is supplied.

use super::*;
use crate::data::{
    self, camels_schema, corrupt, ingest_csv, mask_missing, synthesize, CorruptionSpec, Dataset,
    Period, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::forward::{self, ConditioningSource, ForwardTrainConfig};
use crate::infer::Estimator;
use crate::loss::LossWeights;
use crate::metrics;
use crate::train::{self, TrainConfig};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::PathBuf;

/// How a preset invocation is parameterized from the outside.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Run directory; all artifacts land here.
    pub out_dir: PathBuf,
    /// Overrides the preset's data seed.
    pub seed: Option<u64>,
    /// Flat key=value parameter overrides.
    pub overrides: BTreeMap<String, String>,
    /// Root of external data (otherwise the data-root environment
    /// variable is consulted where needed).
    pub data_root: Option<PathBuf>,
}

pub const DATA_ROOT_ENV: &str = "SEQINV_DATA_ROOT";

const PRESETS: &[(&str, &str)] = &[
    ("synthetic-clean", "train on clean synthetic data, evaluate held-out reconstruction"),
    ("synthetic-noise50", "noise on 50% of training entities (2 sd), plus denoising report"),
    ("synthetic-noise90", "noise on 90% of training entities (2 sd), plus denoising report"),
    ("synthetic-missing50", "characteristics missing for 50% of training entities"),
    ("synthetic-missing90", "characteristics missing for 90% of training entities"),
    ("synthetic-forward", "forward-model value of measured/noisy/embedding/none conditioning"),
    ("camels-table1", "full-scale estimation on an external basin dataset (long-running)"),
];

pub fn list_presets() -> Vec<(String, String)> {
    PRESETS
        .iter()
        .map(|(n, d)| (n.to_string(), d.to_string()))
        .collect()
}

/// Execute one named preset, writing its artifacts under `options.out_dir`.
pub fn run_experiment(preset: &str, options: &RunOptions) -> Result<ExperimentReport> {
    match preset {
        "synthetic-clean" => run_synthetic(preset, Injector::Clean, options),
        "synthetic-noise50" => run_synthetic(preset, Injector::Noise { fraction: 0.5, multiple: 2.0 }, options),
        "synthetic-noise90" => run_synthetic(preset, Injector::Noise { fraction: 0.9, multiple: 2.0 }, options),
        "synthetic-missing50" => run_synthetic(preset, Injector::Missing { fraction: 0.5 }, options),
        "synthetic-missing90" => run_synthetic(preset, Injector::Missing { fraction: 0.9 }, options),
        "synthetic-forward" => run_synthetic_forward(preset, options),
        "camels-table1" => run_camels_table1(preset, options),
        other => {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            Err(Error::Config(format!(
                "unknown preset '{other}'; available presets: {}",
                names.join(", ")
            )))
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Injector {
    Clean,
    Noise { fraction: f64, multiple: f64 },
    Missing { fraction: f64 },
}

/// Desk-scale synthetic estimation run parameters.
#[derive(Debug, Clone, Serialize)]
struct SyntheticRunParams {
    entities: usize,
    train_entities: usize,
    days: usize,
    train_days: usize,
    data_seed: u64,
    injector_seed: u64,
    noise_fraction: f64,
    noise_multiple: f64,
    missing_fraction: f64,
    window: usize,
    stride: usize,
    hidden: usize,
    epochs: usize,
    batch_entities: usize,
    learning_rate: f64,
    temperature: f64,
    seeds: Vec<u64>,
}

impl Default for SyntheticRunParams {
    fn default() -> Self {
        SyntheticRunParams {
            entities: 48,
            train_entities: 36,
            days: 730,
            train_days: 550,
            data_seed: 7,
            injector_seed: 17,
            noise_fraction: 0.5,
            noise_multiple: 2.0,
            missing_fraction: 0.5,
            window: 120,
            stride: 60,
            hidden: 12,
            epochs: 10,
            batch_entities: 12,
            learning_rate: 0.005,
            temperature: 0.5,
            seeds: vec![1, 2],
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse override {key}={value}")))
}

fn parse_seed_list(value: &str) -> Result<Vec<u64>> {
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse seed list '{value}'")))
        })
        .collect()
}

impl SyntheticRunParams {
    fn apply_overrides(&mut self, overrides: &BTreeMap<String, String>) -> Result<()> {
        for (key, value) in overrides {
            match key.as_str() {
                "entities" => self.entities = parse_value(key, value)?,
                "train_entities" => self.train_entities = parse_value(key, value)?,
                "days" => self.days = parse_value(key, value)?,
                "train_days" => self.train_days = parse_value(key, value)?,
                "data_seed" => self.data_seed = parse_value(key, value)?,
                "injector_seed" => self.injector_seed = parse_value(key, value)?,
                "noise_fraction" => self.noise_fraction = parse_value(key, value)?,
                "noise_multiple" => self.noise_multiple = parse_value(key, value)?,
                "missing_fraction" => self.missing_fraction = parse_value(key, value)?,
                "window" => self.window = parse_value(key, value)?,
                "stride" => self.stride = parse_value(key, value)?,
                "hidden" => self.hidden = parse_value(key, value)?,
                "epochs" => self.epochs = parse_value(key, value)?,
                "batch_entities" => self.batch_entities = parse_value(key, value)?,
                "learning_rate" => self.learning_rate = parse_value(key, value)?,
                "temperature" => self.temperature = parse_value(key, value)?,
                "seeds" => self.seeds = parse_seed_list(value)?,
                other => {
                    return Err(Error::Config(format!(
                        "unknown override '{other}' for synthetic presets"
                    )))
                }
            }
        }
        if self.train_entities == 0 || self.train_entities >= self.entities {
            return Err(Error::Config(
                "train_entities must be positive and leave held-out entities".into(),
            ));
        }
        if self.train_days == 0 || self.train_days >= self.days {
            return Err(Error::Config(
                "train_days must be positive and leave a held-out period".into(),
            ));
        }
        Ok(())
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            weights: LossWeights::default(),
            temperature: self.temperature,
            window: self.window,
            stride: self.stride,
            hidden: self.hidden,
            inverse_hidden: self.hidden,
            batch_entities: self.batch_entities,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            seeds: self.seeds.clone(),
            ..TrainConfig::default()
        }
    }
}

fn synthetic_groups() -> Vec<(String, Vec<String>)> {
    vec![
        ("storage".into(), vec!["storage_coeff".into()]),
        ("snow".into(), vec!["melt_temp".into()]),
        ("runoff".into(), vec!["runoff_exponent".into()]),
    ]
}

/// Pull the records of `ids` into their own dataset.
fn subset(dataset: &Dataset, ids: &[String]) -> Result<Dataset> {
    let entities = ids
        .iter()
        .map(|id| dataset.entity(id).cloned())
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(
        dataset.driver_names.clone(),
        dataset.characteristic_names.clone(),
        entities,
    )
}

/// Replace records of `patch`'s entities inside `base`.
fn patched(base: &Dataset, patch: &Dataset) -> Result<Dataset> {
    let mut entities = Vec::with_capacity(base.entities.len());
    for rec in &base.entities {
        match patch.entity(&rec.id) {
            Ok(replacement) => entities.push(replacement.clone()),
            Err(_) => entities.push(rec.clone()),
        }
    }
    Dataset::new(
        base.driver_names.clone(),
        base.characteristic_names.clone(),
        entities,
    )
}

/// Shared pipeline of the synthetic estimation presets.
fn run_synthetic(preset: &str, injector: Injector, options: &RunOptions) -> Result<ExperimentReport> {
    let mut params = SyntheticRunParams::default();
    params.apply_overrides(&options.overrides)?;
    if let Some(seed) = options.seed {
        params.data_seed = seed;
    }
    let dir = options.out_dir.as_path();

    // data
    let synth = SyntheticConfig {
        entity_count: params.entities,
        days: params.days,
        ..SyntheticConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(params.data_seed);
    let raw = synthesize(&synth, &mut rng)?;
    let all_ids = raw.entity_ids();
    let train_ids: Vec<String> = all_ids[..params.train_entities].to_vec();
    let test_ids: Vec<String> = all_ids[params.train_entities..].to_vec();
    let dates = &raw.entities[0].dates;
    let train_period = Period::new(dates[0], dates[params.train_days - 1])?;
    let test_period = Period::new(dates[params.train_days], dates[params.days - 1])?;

    // normalize, then injure the training characteristics if requested
    let (std_ds, stats) = data::fit_normalize(&raw, &train_ids, Some(&train_period))?;
    let injected = match injector {
        Injector::Clean => std_ds.clone(),
        Injector::Noise { fraction, multiple } => {
            let spec = CorruptionSpec::noise(fraction, multiple, params.injector_seed);
            let corrupted_train = corrupt(&subset(&std_ds, &train_ids)?, &spec)?;
            patched(&std_ds, &corrupted_train)?
        }
        Injector::Missing { fraction } => {
            let mut inj_rng = ChaCha8Rng::seed_from_u64(params.injector_seed);
            let masked_train = mask_missing(&subset(&std_ds, &train_ids)?, fraction, &mut inj_rng)?;
            patched(&std_ds, &masked_train)?
        }
    };

    // train + persist
    let config = params.train_config();
    let checkpoints = train::train_ensemble(&injected, &stats, &train_ids, Some(&train_period), &config)?;
    let mut files = Vec::new();
    for ckpt in &checkpoints {
        let name = format!("checkpoints/seed{}.json", ckpt.seed);
        ckpt.save(&dir.join(&name))?;
        files.push(name);
        let log = format!("train_log_seed{}.csv", ckpt.seed);
        ckpt.write_loss_csv(&dir.join(&log))?;
        files.push(log);
    }

    // evaluate held-out entities over the held-out period
    let estimator = Estimator::from_checkpoints(&checkpoints)?;
    let estimates = estimator.estimate_dataset(&raw, &test_ids, Some(&test_period), None)?;
    let names = raw.characteristic_names.clone();

    let truth_rows: Vec<(String, Array1<f64>, Array1<f64>)> = test_ids
        .iter()
        .map(|id| {
            let rec = raw.entity(id).expect("known id");
            (
                id.clone(),
                stats.standardize_characteristics(&rec.characteristics),
                rec.characteristics.clone(),
            )
        })
        .collect();

    let characteristic_metrics = characteristic_metric_table(&names, &estimates, &truth_rows)?;
    let truth_std = stack_rows(truth_rows.iter().map(|(_, s, _)| s.clone()));
    let est_std = stack_rows(estimates.iter().map(|e| e.estimate_std.clone()));
    let embeddings = stack_rows(estimates.iter().map(|e| e.embedding.clone()));
    let group = metrics::group_report(est_std.view(), truth_std.view(), &names, &synthetic_groups())?;
    let (dz, dh, order) = metrics::distance_matrices(truth_std.view(), embeddings.view())?;
    let ordered_ids: Vec<String> = order.iter().map(|&i| test_ids[i].clone()).collect();
    let embed_corr = metrics::embedding_char_correlation(embeddings.view(), truth_std.view())?;

    // denoising comparison on the actually-corrupted training entities
    let denoising = if matches!(injector, Injector::Noise { .. }) {
        let corrupted_ids: Vec<String> = injected
            .entities
            .iter()
            .filter(|r| r.original_characteristics.is_some())
            .map(|r| r.id.clone())
            .collect();
        let train_estimates =
            estimator.estimate_dataset(&raw, &corrupted_ids, Some(&test_period), None)?;
        let summary = denoising_summary(&names, &injected, &corrupted_ids, &train_estimates)?;
        write_estimates_csv(dir, "estimates_corrupted_train.csv", &names, &train_estimates)?;
        files.push("estimates_corrupted_train.csv".into());
        Some(summary)
    } else {
        None
    };

    // artifacts
    write_estimates_csv(dir, "estimates.csv", &names, &estimates)?;
    write_embeddings_csv(dir, "embeddings.csv", &estimates)?;
    write_truth_csv(dir, "truth.csv", &names, &truth_rows)?;
    write_characteristic_metrics_csv(dir, "characteristic_metrics.csv", &characteristic_metrics)?;
    write_group_report_csv(dir, "group_report.csv", &group)?;
    write_distance_csv(dir, "distance_characteristics.csv", &ordered_ids, &dz)?;
    write_distance_csv(dir, "distance_embeddings.csv", &ordered_ids, &dh)?;
    write_embedding_correlation_csv(dir, "embedding_char_correlation.csv", &names, &embed_corr)?;
    files.extend(
        [
            "estimates.csv",
            "embeddings.csv",
            "truth.csv",
            "characteristic_metrics.csv",
            "group_report.csv",
            "distance_characteristics.csv",
            "distance_embeddings.csv",
            "embedding_char_correlation.csv",
        ]
        .map(String::from),
    );

    let provenance = Provenance::new(
        preset,
        params.data_seed,
        params.seeds.clone(),
        serde_json::to_value(&params)?,
    );
    let report = ExperimentReport {
        provenance,
        characteristic_metrics,
        group_report: Some(group),
        denoising,
        nse_summary: Vec::new(),
        files,
    };
    report.save(dir)?;
    Ok(report)
}

fn stack_rows<I: ExactSizeIterator<Item = Array1<f64>>>(rows: I) -> Array2<f64> {
    let mut iter = rows.into_iter();
    let first = iter.next().expect("at least one row");
    let mut out = Array2::zeros((iter.len() + 1, first.len()));
    out.row_mut(0).assign(&first);
    for (r, row) in iter.enumerate() {
        out.row_mut(r + 1).assign(&row);
    }
    out
}

fn characteristic_metric_table(
    names: &[String],
    estimates: &[crate::infer::CharacteristicEstimate],
    truth_rows: &[(String, Array1<f64>, Array1<f64>)],
) -> Result<Vec<CharacteristicMetric>> {
    let mut table = Vec::with_capacity(names.len());
    for (j, name) in names.iter().enumerate() {
        let pred = Array1::from_iter(estimates.iter().map(|e| e.estimate_std[j]));
        let truth = Array1::from_iter(truth_rows.iter().map(|(_, s, _)| s[j]));
        table.push(CharacteristicMetric {
            characteristic: name.clone(),
            rmse: metrics::rmse(pred.view(), truth.view())?,
            corr: metrics::corr(pred.view(), truth.view())?,
        });
    }
    Ok(table)
}

fn denoising_summary(
    names: &[String],
    injected: &Dataset,
    corrupted_ids: &[String],
    estimates: &[crate::infer::CharacteristicEstimate],
) -> Result<DenoisingSummary> {
    let mut rows = Vec::with_capacity(names.len());
    for (j, name) in names.iter().enumerate() {
        let mut corrupted = Vec::new();
        let mut reconstructed = Vec::new();
        let mut truth = Vec::new();
        for (id, est) in corrupted_ids.iter().zip(estimates) {
            let rec = injected.entity(id)?;
            let orig = rec
                .original_characteristics
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("entity {id} was not corrupted")))?;
            corrupted.push(rec.characteristics[j]);
            reconstructed.push(est.estimate_std[j]);
            truth.push(orig[j]);
        }
        let truth = Array1::from_vec(truth);
        rows.push(DenoisingRow {
            characteristic: name.clone(),
            corrupted_rmse: metrics::rmse(Array1::from_vec(corrupted).view(), truth.view())?,
            reconstructed_rmse: metrics::rmse(Array1::from_vec(reconstructed).view(), truth.view())?,
        });
    }
    let corrupted_rmse_mean = rows.iter().map(|r| r.corrupted_rmse).sum::<f64>() / rows.len() as f64;
    let reconstructed_rmse_mean =
        rows.iter().map(|r| r.reconstructed_rmse).sum::<f64>() / rows.len() as f64;
    Ok(DenoisingSummary {
        per_characteristic: rows,
        corrupted_rmse_mean,
        reconstructed_rmse_mean,
    })
}

/// Parameters of the forward-model value preset.
#[derive(Debug, Clone, Serialize)]
struct ForwardRunParams {
    entities: usize,
    train_entities: usize,
    days: usize,
    train_days: usize,
    data_seed: u64,
    noise_sigma: f64,
    window: usize,
    hidden: usize,
    epochs: usize,
    batch_entities: usize,
    learning_rate: f64,
    temperature: f64,
    seeds: Vec<u64>,
    forward_hidden: usize,
    forward_epochs: usize,
    forward_window: usize,
    forward_batch: usize,
    forward_learning_rate: f64,
    forward_seed: u64,
}

impl Default for ForwardRunParams {
    fn default() -> Self {
        ForwardRunParams {
            entities: 40,
            train_entities: 30,
            days: 730,
            train_days: 550,
            data_seed: 7,
            noise_sigma: 1.0,
            window: 120,
            hidden: 12,
            epochs: 10,
            batch_entities: 10,
            learning_rate: 0.005,
            temperature: 0.5,
            seeds: vec![1],
            forward_hidden: 12,
            forward_epochs: 12,
            forward_window: 90,
            forward_batch: 10,
            forward_learning_rate: 0.005,
            forward_seed: 3,
        }
    }
}

impl ForwardRunParams {
    fn apply_overrides(&mut self, overrides: &BTreeMap<String, String>) -> Result<()> {
        for (key, value) in overrides {
            match key.as_str() {
                "entities" => self.entities = parse_value(key, value)?,
                "train_entities" => self.train_entities = parse_value(key, value)?,
                "days" => self.days = parse_value(key, value)?,
                "train_days" => self.train_days = parse_value(key, value)?,
                "data_seed" => self.data_seed = parse_value(key, value)?,
                "noise_sigma" => self.noise_sigma = parse_value(key, value)?,
                "window" => self.window = parse_value(key, value)?,
                "hidden" => self.hidden = parse_value(key, value)?,
                "epochs" => self.epochs = parse_value(key, value)?,
                "batch_entities" => self.batch_entities = parse_value(key, value)?,
                "learning_rate" => self.learning_rate = parse_value(key, value)?,
                "temperature" => self.temperature = parse_value(key, value)?,
                "seeds" => self.seeds = parse_seed_list(value)?,
                "forward_hidden" => self.forward_hidden = parse_value(key, value)?,
                "forward_epochs" => self.forward_epochs = parse_value(key, value)?,
                "forward_window" => self.forward_window = parse_value(key, value)?,
                "forward_batch" => self.forward_batch = parse_value(key, value)?,
                "forward_learning_rate" => self.forward_learning_rate = parse_value(key, value)?,
                "forward_seed" => self.forward_seed = parse_value(key, value)?,
                other => {
                    return Err(Error::Config(format!(
                        "unknown override '{other}' for synthetic-forward"
                    )))
                }
            }
        }
        Ok(())
    }
}

fn run_synthetic_forward(preset: &str, options: &RunOptions) -> Result<ExperimentReport> {
    let mut params = ForwardRunParams::default();
    params.apply_overrides(&options.overrides)?;
    if let Some(seed) = options.seed {
        params.data_seed = seed;
    }
    let dir = options.out_dir.as_path();

    let synth = SyntheticConfig {
        entity_count: params.entities,
        days: params.days,
        ..SyntheticConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(params.data_seed);
    let raw = synthesize(&synth, &mut rng)?;
    let all_ids = raw.entity_ids();
    let train_ids: Vec<String> = all_ids[..params.train_entities].to_vec();
    let test_ids: Vec<String> = all_ids[params.train_entities..].to_vec();
    let dates = &raw.entities[0].dates;
    let train_period = Period::new(dates[0], dates[params.train_days - 1])?;
    let test_period = Period::new(dates[params.train_days], dates[params.days - 1])?;

    // self-supervised representation model (no characteristic supervision)
    let (std_ds, stats) = data::fit_normalize(&raw, &train_ids, Some(&train_period))?;
    let kgssl_config = TrainConfig {
        weights: LossWeights::new(1.0, 1.0, 0.0)?,
        temperature: params.temperature,
        window: params.window,
        stride: params.window,
        hidden: params.hidden,
        inverse_hidden: params.hidden,
        batch_entities: params.batch_entities,
        learning_rate: params.learning_rate,
        epochs: params.epochs,
        seeds: params.seeds.clone(),
        ..TrainConfig::default()
    };
    let checkpoints =
        train::train_ensemble(&std_ds, &stats, &train_ids, Some(&train_period), &kgssl_config)?;
    let estimator = Estimator::from_checkpoints(&checkpoints)?;
    // embeddings come from training-period data for every entity
    let embedding_estimates = estimator.estimate_dataset(&raw, &all_ids, Some(&train_period), None)?;
    let embeddings_source = ConditioningSource::embeddings(&embedding_estimates);

    let forward_config = ForwardTrainConfig {
        hidden: params.forward_hidden,
        learning_rate: params.forward_learning_rate,
        epochs: params.forward_epochs,
        batch_entities: params.forward_batch,
        window: params.forward_window,
        seed: params.forward_seed,
    };

    let measured_model = forward::train_forward(
        &raw,
        &train_ids,
        Some(&train_period),
        &ConditioningSource::Measured,
        &forward_config,
    )?;
    let embedding_model = forward::train_forward(
        &raw,
        &train_ids,
        Some(&train_period),
        &embeddings_source,
        &forward_config,
    )?;
    let none_dim = raw.characteristic_dim();
    let none_model = forward::train_forward(
        &raw,
        &train_ids,
        Some(&train_period),
        &ConditioningSource::None { dim: none_dim },
        &forward_config,
    )?;

    // evaluation arms; the noisy arm perturbs the measured conditioning of
    // the evaluation entities only
    let mut noise_rng = ChaCha8Rng::seed_from_u64(params.data_seed ^ 0x5eed);
    let normal = rand_distr::Normal::new(0.0, params.noise_sigma)
        .map_err(|e| Error::Config(format!("invalid noise sigma: {e}")))?;
    let mut files = Vec::new();
    let mut nse_summary = Vec::new();

    let none_source = ConditioningSource::None { dim: none_dim };
    let measured_source = ConditioningSource::Measured;
    let arms: Vec<(&str, &forward::ForwardModel, bool, &ConditioningSource)> = vec![
        ("measured", &measured_model, false, &measured_source),
        ("noisy_measured", &measured_model, true, &measured_source),
        ("embeddings", &embedding_model, false, &embeddings_source),
        ("none", &none_model, false, &none_source),
    ];
    for (arm, model, add_noise, source) in arms {
        let mut predictions = Vec::new();
        let mut nse_rows = Vec::new();
        for id in &test_ids {
            let record = raw.entity(id)?;
            let mut cond = model.conditioning_for(source, record)?;
            if add_noise {
                use rand_distr::Distribution;
                for v in cond.iter_mut() {
                    *v += normal.sample(&mut noise_rng);
                }
            }
            let predicted = model.predict(record, Some(&test_period), cond.view())?;
            let range = record.range_for(Some(&test_period));
            let observed = record.response.slice(ndarray::s![range.clone()]).to_owned();
            let nse = forward::nse(predicted.view(), observed.view())?;
            nse_rows.push((id.clone(), nse));
            for (offset, t) in range.enumerate() {
                predictions.push((id.clone(), record.dates[t], record.response[t], predicted[offset]));
            }
        }
        let pred_name = format!("predictions_{arm}.csv");
        write_predictions_csv(dir, &pred_name, &predictions)?;
        files.push(pred_name);
        let nse_name = format!("nse_{arm}.csv");
        write_nse_csv(dir, &nse_name, &nse_rows)?;
        files.push(nse_name);
        let mut values: Vec<f64> = nse_rows.iter().map(|(_, v)| *v).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let median = median_of_slice(&mut values);
        nse_summary.push(ArmSummary {
            arm: arm.to_string(),
            entity_count: nse_rows.len(),
            mean_nse: mean,
            median_nse: median,
        });
    }

    for ckpt in &checkpoints {
        let name = format!("checkpoints/seed{}.json", ckpt.seed);
        ckpt.save(&dir.join(&name))?;
        files.push(name);
    }
    write_embeddings_csv(dir, "embeddings.csv", &embedding_estimates)?;
    files.push("embeddings.csv".into());

    let provenance = Provenance::new(
        preset,
        params.data_seed,
        params.seeds.clone(),
        serde_json::to_value(&params)?,
    );
    let report = ExperimentReport {
        provenance,
        characteristic_metrics: Vec::new(),
        group_report: None,
        denoising: None,
        nse_summary,
        files,
    };
    report.save(dir)?;
    Ok(report)
}

/// Parameters of the external full-scale estimation preset.
#[derive(Debug, Clone, Serialize)]
struct CamelsRunParams {
    train_basins: usize,
    split_seed: u64,
    epochs: usize,
    batch_entities: usize,
    learning_rate: f64,
    temperature: f64,
    seeds: Vec<u64>,
    train_start: String,
    train_end: String,
    test_start: String,
    test_end: String,
}

impl Default for CamelsRunParams {
    fn default() -> Self {
        CamelsRunParams {
            train_basins: 400,
            split_seed: 2001,
            epochs: 30,
            batch_entities: 100,
            learning_rate: 0.001,
            temperature: 0.5,
            seeds: vec![1, 2, 3, 4, 5],
            train_start: "2001-01-01".into(),
            train_end: "2008-12-31".into(),
            test_start: "1989-01-01".into(),
            test_end: "2000-12-31".into(),
        }
    }
}

impl CamelsRunParams {
    fn apply_overrides(&mut self, overrides: &BTreeMap<String, String>) -> Result<()> {
        for (key, value) in overrides {
            match key.as_str() {
                "train_basins" => self.train_basins = parse_value(key, value)?,
                "split_seed" => self.split_seed = parse_value(key, value)?,
                "epochs" => self.epochs = parse_value(key, value)?,
                "batch_entities" => self.batch_entities = parse_value(key, value)?,
                "learning_rate" => self.learning_rate = parse_value(key, value)?,
                "temperature" => self.temperature = parse_value(key, value)?,
                "seeds" => self.seeds = parse_seed_list(value)?,
                "train_start" => self.train_start = value.clone(),
                "train_end" => self.train_end = value.clone(),
                "test_start" => self.test_start = value.clone(),
                "test_end" => self.test_end = value.clone(),
                other => {
                    return Err(Error::Config(format!(
                        "unknown override '{other}' for camels-table1"
                    )))
                }
            }
        }
        Ok(())
    }
}

fn parse_date(raw: &str) -> Result<chrono::NaiveDate> {
    chrono::NaiveDate::parse_from_str(raw, "%Y-%m-%d")
        .map_err(|_| Error::Config(format!("cannot parse date '{raw}'")))
}

/// Full-scale estimation on an external dataset laid out as
/// `<root>/forcing/*.csv` plus `<root>/attributes.csv` with the
/// 27-characteristic schema. Long-running; requires the data root option
/// or environment variable.
fn run_camels_table1(preset: &str, options: &RunOptions) -> Result<ExperimentReport> {
    let mut params = CamelsRunParams::default();
    params.apply_overrides(&options.overrides)?;
    let root = match &options.data_root {
        Some(root) => root.clone(),
        None => std::env::var(DATA_ROOT_ENV).map(PathBuf::from).map_err(|_| {
            Error::Data(format!(
                "external dataset required: pass --data-root or set {DATA_ROOT_ENV} \
                 to a directory holding forcing/ and attributes.csv"
            ))
        })?,
    };
    let dir = options.out_dir.as_path();
    let schema = camels_schema();
    let train_period = Period::new(parse_date(&params.train_start)?, parse_date(&params.train_end)?)?;
    let test_period = Period::new(parse_date(&params.test_start)?, parse_date(&params.test_end)?)?;
    let full_period = Period::new(
        test_period.start.min(train_period.start),
        test_period.end.max(train_period.end),
    )?;
    let (raw, ingest_report) = ingest_csv(
        &root.join("forcing"),
        &root.join("attributes.csv"),
        Some(&schema),
        Some(&full_period),
    )?;
    if raw.entities.len() <= params.train_basins {
        return Err(Error::Data(format!(
            "dataset holds {} basins, need more than train_basins = {}",
            raw.entities.len(),
            params.train_basins
        )));
    }

    // deterministic seeded split
    let mut ids = raw.entity_ids();
    use rand::seq::SliceRandom;
    let mut split_rng = ChaCha8Rng::seed_from_u64(params.split_seed);
    ids.shuffle(&mut split_rng);
    let train_ids: Vec<String> = ids[..params.train_basins].to_vec();
    let test_ids: Vec<String> = ids[params.train_basins..].to_vec();

    let (std_ds, stats) = data::fit_normalize(&raw, &train_ids, Some(&train_period))?;
    let config = TrainConfig {
        temperature: params.temperature,
        batch_entities: params.batch_entities,
        learning_rate: params.learning_rate,
        epochs: params.epochs,
        seeds: params.seeds.clone(),
        ..TrainConfig::default()
    };
    let checkpoints = train::train_ensemble(&std_ds, &stats, &train_ids, Some(&train_period), &config)?;
    let estimator = Estimator::from_checkpoints(&checkpoints)?;
    let estimates = estimator.estimate_dataset(&raw, &test_ids, Some(&test_period), None)?;
    let names = raw.characteristic_names.clone();

    let truth_rows: Vec<(String, Array1<f64>, Array1<f64>)> = test_ids
        .iter()
        .map(|id| {
            let rec = raw.entity(id).expect("known id");
            (
                id.clone(),
                stats.standardize_characteristics(&rec.characteristics),
                rec.characteristics.clone(),
            )
        })
        .collect();
    let characteristic_metrics = characteristic_metric_table(&names, &estimates, &truth_rows)?;
    let truth_std = stack_rows(truth_rows.iter().map(|(_, s, _)| s.clone()));
    let est_std = stack_rows(estimates.iter().map(|e| e.estimate_std.clone()));
    let embeddings = stack_rows(estimates.iter().map(|e| e.embedding.clone()));
    let group = metrics::group_report(est_std.view(), truth_std.view(), &names, &schema.groups)?;
    let (dz, dh, order) = metrics::distance_matrices(truth_std.view(), embeddings.view())?;
    let ordered_ids: Vec<String> = order.iter().map(|&i| test_ids[i].clone()).collect();
    let embed_corr = metrics::embedding_char_correlation(embeddings.view(), truth_std.view())?;

    let mut files = Vec::new();
    for ckpt in &checkpoints {
        let name = format!("checkpoints/seed{}.json", ckpt.seed);
        ckpt.save(&dir.join(&name))?;
        files.push(name);
        let log = format!("train_log_seed{}.csv", ckpt.seed);
        ckpt.write_loss_csv(&dir.join(&log))?;
        files.push(log);
    }
    write_estimates_csv(dir, "estimates.csv", &names, &estimates)?;
    write_embeddings_csv(dir, "embeddings.csv", &estimates)?;
    write_truth_csv(dir, "truth.csv", &names, &truth_rows)?;
    write_characteristic_metrics_csv(dir, "characteristic_metrics.csv", &characteristic_metrics)?;
    write_group_report_csv(dir, "group_report.csv", &group)?;
    write_distance_csv(dir, "distance_characteristics.csv", &ordered_ids, &dz)?;
    write_distance_csv(dir, "distance_embeddings.csv", &ordered_ids, &dh)?;
    write_embedding_correlation_csv(dir, "embedding_char_correlation.csv", &names, &embed_corr)?;
    files.extend(
        [
            "estimates.csv",
            "embeddings.csv",
            "truth.csv",
            "characteristic_metrics.csv",
            "group_report.csv",
            "distance_characteristics.csv",
            "distance_embeddings.csv",
            "embedding_char_correlation.csv",
        ]
        .map(String::from),
    );

    let mut config_echo = serde_json::to_value(&params)?;
    if let serde_json::Value::Object(map) = &mut config_echo {
        map.insert(
            "dropped_rows".into(),
            serde_json::to_value(&ingest_report.dropped_rows)?,
        );
        map.insert("date_gaps".into(), serde_json::json!(ingest_report.date_gaps));
    }
    let provenance = Provenance::new(preset, params.split_seed, params.seeds.clone(), config_echo);
    let report = ExperimentReport {
        provenance,
        characteristic_metrics,
        group_report: Some(group),
        denoising: None,
        nse_summary: Vec::new(),
        files,
    };
    report.save(dir)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_preset_lists_available_ones() {
        let err = run_experiment("nope", &RunOptions::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("synthetic-clean"), "{msg}");
        assert!(msg.contains("camels-table1"), "{msg}");
    }

    #[test]
    fn preset_listing_is_nonempty() {
        let presets = list_presets();
        assert_eq!(presets.len(), 7);
    }

    #[test]
    fn camels_preset_requires_a_data_root() {
        // no data root configured: the error must name the remedy
        if std::env::var(DATA_ROOT_ENV).is_ok() {
            return; // environment provides data; nothing to assert here
        }
        let err = run_experiment("camels-table1", &RunOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains(DATA_ROOT_ENV));
    }

    #[test]
    fn synthetic_overrides_reject_unknown_keys() {
        let mut options = RunOptions::default();
        options.overrides.insert("bogus_key".into(), "1".into());
        let err = run_experiment("synthetic-clean", &options).unwrap_err();
        assert!(err.to_string().contains("bogus_key"));
    }
}
