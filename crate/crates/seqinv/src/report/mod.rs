//! Experiment reports: metric tables, analysis matrices, provenance, and
//! the files they are emitted to. Reports carry no wall-clock state, so a
//! rerun with the same configuration and seed reproduces every artifact
//! byte for byte. Every emitted metric can be recomputed from the emitted
//! raw files; [`verify_report`] does exactly that.

mod presets;

pub use presets::{list_presets, run_experiment, RunOptions};

use crate::data::Period;
use crate::error::{Error, Result};
use crate::infer::CharacteristicEstimate;
use crate::metrics::{self, EmbeddingCorrelation, GroupReport};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

/// Where a report came from: enough to reproduce it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub preset: String,
    pub version: String,
    /// Digest of the resolved configuration; identifies the run.
    pub run_id: String,
    pub seed: u64,
    pub model_seeds: Vec<u64>,
    /// Full resolved configuration echo.
    pub config: serde_json::Value,
}

impl Provenance {
    pub fn new(preset: &str, seed: u64, model_seeds: Vec<u64>, config: serde_json::Value) -> Self {
        let canonical = serde_json::to_string(&(preset, seed, &model_seeds, &config))
            .expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let run_id = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
        Provenance {
            preset: preset.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            run_id,
            seed,
            model_seeds,
            config,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacteristicMetric {
    pub characteristic: String,
    pub rmse: f64,
    pub corr: f64,
}

/// Mean NSE over entities for one conditioning arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub entity_count: usize,
    pub mean_nse: f64,
    pub median_nse: f64,
}

/// Denoising comparison on corrupted training entities: measurement error
/// of the corrupted values versus the reconstruction error, both against
/// the retained ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoisingSummary {
    pub per_characteristic: Vec<DenoisingRow>,
    pub corrupted_rmse_mean: f64,
    pub reconstructed_rmse_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoisingRow {
    pub characteristic: String,
    pub corrupted_rmse: f64,
    pub reconstructed_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub provenance: Provenance,
    /// Standardized-space RMSE and correlation per characteristic on the
    /// evaluation entities.
    pub characteristic_metrics: Vec<CharacteristicMetric>,
    pub group_report: Option<GroupReport>,
    pub denoising: Option<DenoisingSummary>,
    pub nse_summary: Vec<ArmSummary>,
    /// Relative paths of every emitted artifact.
    pub files: Vec<String>,
}

impl ExperimentReport {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(self)?;
        fs::write(dir.join("report.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let raw = fs::read_to_string(dir.join("report.json"))
            .map_err(|e| Error::Data(format!("cannot read report.json in {}: {e}", dir.display())))?;
        Ok(serde_json::from_str(&raw)?)
    }
}

pub(crate) fn create(dir: &Path, name: &str) -> Result<fs::File> {
    fs::create_dir_all(dir)?;
    Ok(fs::File::create(dir.join(name))?)
}

/// `entity_id,characteristic,estimate_std_space,estimate_physical,uncertainty,window_count`;
/// the uncertainty column is in standardized space.
pub fn write_estimates_csv(
    dir: &Path,
    name: &str,
    names: &[String],
    estimates: &[CharacteristicEstimate],
) -> Result<()> {
    let mut out = create(dir, name)?;
    writeln!(
        out,
        "entity_id,characteristic,estimate_std_space,estimate_physical,uncertainty,window_count"
    )?;
    for est in estimates {
        for (j, cname) in names.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                est.entity_id,
                cname,
                est.estimate_std[j],
                est.estimate_physical[j],
                est.uncertainty_std[j],
                est.window_count
            )?;
        }
    }
    Ok(())
}

/// `entity_id,dim_0,...,dim_{H-1}` pooled embeddings.
pub fn write_embeddings_csv(
    dir: &Path,
    name: &str,
    estimates: &[CharacteristicEstimate],
) -> Result<()> {
    let mut out = create(dir, name)?;
    let h = estimates.first().map(|e| e.embedding.len()).unwrap_or(0);
    let header: Vec<String> = (0..h).map(|k| format!("dim_{k}")).collect();
    writeln!(out, "entity_id,{}", header.join(","))?;
    for est in estimates {
        let row: Vec<String> = est.embedding.iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{},{}", est.entity_id, row.join(","))?;
    }
    Ok(())
}

/// Truth table used to recompute the metric CSVs:
/// `entity_id,characteristic,truth_std,truth_physical`.
pub fn write_truth_csv(
    dir: &Path,
    name: &str,
    names: &[String],
    rows: &[(String, Array1<f64>, Array1<f64>)],
) -> Result<()> {
    let mut out = create(dir, name)?;
    writeln!(out, "entity_id,characteristic,truth_std,truth_physical")?;
    for (id, std, physical) in rows {
        for (j, cname) in names.iter().enumerate() {
            writeln!(out, "{},{},{},{}", id, cname, std[j], physical[j])?;
        }
    }
    Ok(())
}

pub fn write_characteristic_metrics_csv(
    dir: &Path,
    name: &str,
    metrics: &[CharacteristicMetric],
) -> Result<()> {
    let mut out = create(dir, name)?;
    writeln!(out, "characteristic,rmse,corr")?;
    for m in metrics {
        writeln!(out, "{},{},{}", m.characteristic, m.rmse, m.corr)?;
    }
    Ok(())
}

pub fn write_group_report_csv(dir: &Path, name: &str, report: &GroupReport) -> Result<()> {
    let mut out = create(dir, name)?;
    writeln!(out, "scope,name,corr")?;
    for (cname, c) in &report.per_characteristic {
        writeln!(out, "characteristic,{cname},{c}")?;
    }
    for (gname, c) in &report.groups {
        writeln!(out, "group,{gname},{c}")?;
    }
    writeln!(out, "mean,of_group_means,{}", report.mean_of_group_means)?;
    writeln!(out, "mean,over_characteristics,{}", report.mean_over_characteristics)?;
    Ok(())
}

/// Distance matrix with the seriation ordering applied; the header row
/// and first column carry the ordered entity ids.
pub fn write_distance_csv(
    dir: &Path,
    name: &str,
    ordered_ids: &[String],
    matrix: &Array2<f64>,
) -> Result<()> {
    let mut out = create(dir, name)?;
    writeln!(out, "entity_id,{}", ordered_ids.join(","))?;
    for (r, id) in ordered_ids.iter().enumerate() {
        let row: Vec<String> = (0..matrix.ncols()).map(|c| format!("{}", matrix[(r, c)])).collect();
        writeln!(out, "{},{}", id, row.join(","))?;
    }
    Ok(())
}

/// Characteristic-by-embedding correlation with columns in ranked order;
/// undefined entries are emitted as empty cells.
pub fn write_embedding_correlation_csv(
    dir: &Path,
    name: &str,
    characteristic_names: &[String],
    corr: &EmbeddingCorrelation,
) -> Result<()> {
    let mut out = create(dir, name)?;
    let header: Vec<String> = corr.column_order.iter().map(|k| format!("dim_{k}")).collect();
    writeln!(out, "characteristic,{}", header.join(","))?;
    for (j, cname) in characteristic_names.iter().enumerate() {
        let row: Vec<String> = corr
            .column_order
            .iter()
            .map(|&k| {
                let v = corr.matrix[(j, k)];
                if v.is_finite() {
                    format!("{v}")
                } else {
                    String::new()
                }
            })
            .collect();
        writeln!(out, "{},{}", cname, row.join(","))?;
    }
    Ok(())
}

/// `entity_id,nse` per evaluation entity.
pub fn write_nse_csv(dir: &Path, name: &str, rows: &[(String, f64)]) -> Result<()> {
    let mut out = create(dir, name)?;
    writeln!(out, "entity_id,nse")?;
    for (id, v) in rows {
        writeln!(out, "{},{}", id, v)?;
    }
    Ok(())
}

/// `entity_id,date,observed,predicted` rows for one arm.
pub fn write_predictions_csv(
    dir: &Path,
    name: &str,
    rows: &[(String, chrono::NaiveDate, f64, f64)],
) -> Result<()> {
    let mut out = create(dir, name)?;
    writeln!(out, "entity_id,date,observed,predicted")?;
    for (id, date, obs, pred) in rows {
        writeln!(out, "{},{},{},{}", id, date, obs, pred)?;
    }
    Ok(())
}

/// Parse a flat `key = value` configuration file: one pair per line,
/// `#` comments and blank lines ignored.
pub fn parse_flat_config(path: &Path) -> Result<BTreeMap<String, String>> {
    let raw = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_flat_config_str(&raw)
}

pub fn parse_flat_config_str(raw: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (idx, line) in raw.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("config line {}: expected key = value", idx + 1))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn read_csv_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let headers = reader.headers()?.iter().map(|h| h.to_string()).collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        rows.push(record?.iter().map(|f| f.to_string()).collect());
    }
    Ok((headers, rows))
}

fn parse_f64(raw: &str, context: &str) -> Result<f64> {
    raw.parse()
        .map_err(|_| Error::Data(format!("{context}: cannot parse '{raw}' as a number")))
}

/// Recompute every metric in `report.json` from the emitted raw artifact
/// files and fail on any mismatch beyond 1e-9. This is the report
/// self-consistency gate.
pub fn verify_report(dir: &Path) -> Result<()> {
    let report = ExperimentReport::load(dir)?;

    if !report.characteristic_metrics.is_empty() {
        // estimates.csv + truth.csv -> characteristic_metrics
        let (_, est_rows) = read_csv_rows(&dir.join("estimates.csv"))?;
        let (_, truth_rows) = read_csv_rows(&dir.join("truth.csv"))?;
        let mut estimates: BTreeMap<(String, String), f64> = BTreeMap::new();
        for row in &est_rows {
            estimates.insert(
                (row[0].clone(), row[1].clone()),
                parse_f64(&row[2], "estimates.csv")?,
            );
        }
        let mut truth: BTreeMap<(String, String), f64> = BTreeMap::new();
        for row in &truth_rows {
            truth.insert(
                (row[0].clone(), row[1].clone()),
                parse_f64(&row[2], "truth.csv")?,
            );
        }
        for metric in &report.characteristic_metrics {
            let mut pred = Vec::new();
            let mut obs = Vec::new();
            for ((id, cname), value) in &estimates {
                if cname == &metric.characteristic {
                    let t = truth.get(&(id.clone(), cname.clone())).ok_or_else(|| {
                        Error::Data(format!("truth.csv misses {id}/{cname}"))
                    })?;
                    pred.push(*value);
                    obs.push(*t);
                }
            }
            let pred = Array1::from_vec(pred);
            let obs = Array1::from_vec(obs);
            let rmse = metrics::rmse(pred.view(), obs.view())?;
            let corr = metrics::corr(pred.view(), obs.view())?;
            if (rmse - metric.rmse).abs() > 1e-9 || (corr - metric.corr).abs() > 1e-9 {
                return Err(Error::Numeric(format!(
                    "metric mismatch for {}: report rmse {} corr {}, recomputed {} / {}",
                    metric.characteristic, metric.rmse, metric.corr, rmse, corr
                )));
            }
        }
    }

    // predictions_<arm>.csv -> nse_<arm>.csv -> summary
    for arm in &report.nse_summary {
        let (_, pred_rows) = read_csv_rows(&dir.join(format!("predictions_{}.csv", arm.arm)))?;
        let mut per_entity: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for row in &pred_rows {
            let entry = per_entity.entry(row[0].clone()).or_default();
            entry.0.push(parse_f64(&row[3], "predictions")?);
            entry.1.push(parse_f64(&row[2], "predictions")?);
        }
        let (_, nse_rows) = read_csv_rows(&dir.join(format!("nse_{}.csv", arm.arm)))?;
        let mut nse_values = Vec::new();
        for row in &nse_rows {
            let reported = parse_f64(&row[1], "nse csv")?;
            let (pred, obs) = per_entity.get(&row[0]).ok_or_else(|| {
                Error::Data(format!("predictions for entity {} missing", row[0]))
            })?;
            let recomputed = crate::forward::nse(
                Array1::from_vec(pred.clone()).view(),
                Array1::from_vec(obs.clone()).view(),
            )?;
            if (recomputed - reported).abs() > 1e-9 {
                return Err(Error::Numeric(format!(
                    "nse mismatch for {} in arm {}: reported {}, recomputed {}",
                    row[0], arm.arm, reported, recomputed
                )));
            }
            nse_values.push(reported);
        }
        let mean = nse_values.iter().sum::<f64>() / nse_values.len() as f64;
        let median = median_of_slice(&mut nse_values.clone());
        if (mean - arm.mean_nse).abs() > 1e-9 || (median - arm.median_nse).abs() > 1e-9 {
            return Err(Error::Numeric(format!(
                "summary mismatch for arm {}: mean {} vs {}, median {} vs {}",
                arm.arm, arm.mean_nse, mean, arm.median_nse, median
            )));
        }
    }

    Ok(())
}

/// Median of a slice (sorts in place).
pub fn median_of_slice(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Evaluation window of a run: which entities, over which period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationScope {
    pub entity_ids: Vec<String>,
    pub period: Period,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_config_parses_pairs_and_rejects_garbage() {
        let parsed = parse_flat_config_str("# comment\nwindow = 120\n\nhidden=32\n").unwrap();
        assert_eq!(parsed.get("window").map(String::as_str), Some("120"));
        assert_eq!(parsed.get("hidden").map(String::as_str), Some("32"));
        assert!(parse_flat_config_str("novalue\n").is_err());
    }

    #[test]
    fn median_handles_odd_and_even_lengths() {
        assert_eq!(median_of_slice(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median_of_slice(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn provenance_run_id_depends_on_config() {
        let a = Provenance::new("p", 1, vec![1], serde_json::json!({"x": 1}));
        let b = Provenance::new("p", 1, vec![1], serde_json::json!({"x": 2}));
        let c = Provenance::new("p", 1, vec![1], serde_json::json!({"x": 1}));
        assert_ne!(a.run_id, b.run_id);
        assert_eq!(a.run_id, c.run_id);
        assert_eq!(a.run_id.len(), 12);
    }
}
