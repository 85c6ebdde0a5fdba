//! Subcommand implementations: thin wrappers around the library.

use chrono::NaiveDate;
use clap::Args;
use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use seqinv::data::{
    self, camels_schema, export_dataset, ingest_csv, synthesize, Dataset, Period, SyntheticConfig,
};
use seqinv::error::{Error, Result};
use seqinv::forward::{self, ConditioningSource, ConditioningTag, ForwardModel, ForwardTrainConfig};
use seqinv::infer::Estimator;
use seqinv::nn::{Activation, GateMode};
use seqinv::report::{
    self, parse_flat_config, run_experiment, verify_report, write_embeddings_csv,
    write_estimates_csv, write_nse_csv, write_predictions_csv, RunOptions,
};
use seqinv::train::{self, GridOptions, HyperGrid, TrainConfig, ValidationSpec};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub struct Globals {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
}

impl Globals {
    fn config_map(&self) -> Result<BTreeMap<String, String>> {
        match &self.config {
            Some(path) => parse_flat_config(path),
            None => Ok(BTreeMap::new()),
        }
    }
}

fn parse_date_flag(raw: &Option<String>, flag: &str) -> Result<Option<NaiveDate>> {
    match raw {
        None => Ok(None),
        Some(s) => NaiveDate::parse_from_str(s, "%Y-%m-%d")
            .map(Some)
            .map_err(|_| Error::Config(format!("--{flag}: cannot parse date '{s}'"))),
    }
}

fn period_from(start: &Option<String>, end: &Option<String>, what: &str) -> Result<Option<Period>> {
    match (
        parse_date_flag(start, &format!("{what}-start"))?,
        parse_date_flag(end, &format!("{what}-end"))?,
    ) {
        (None, None) => Ok(None),
        (Some(s), Some(e)) => Period::new(s, e).map(Some),
        _ => Err(Error::Config(format!(
            "--{what}-start and --{what}-end must be given together"
        ))),
    }
}

fn read_id_list(path: &Path) -> Result<Vec<String>> {
    let raw = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read id list {}: {e}", path.display())))?;
    let ids: Vec<String> = raw
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect();
    if ids.is_empty() {
        return Err(Error::Data(format!("id list {} is empty", path.display())));
    }
    Ok(ids)
}

#[derive(Args)]
pub struct DataArgs {
    /// Directory with one forcing CSV per entity.
    #[arg(long)]
    forcing_dir: PathBuf,
    /// Attributes CSV (`entity_id,<characteristics...>`).
    #[arg(long)]
    attributes: PathBuf,
    /// Enforce the 27-characteristic large-sample schema.
    #[arg(long)]
    camels: bool,
}

impl DataArgs {
    fn load(&self, period: Option<&Period>) -> Result<Dataset> {
        let schema = if self.camels { Some(camels_schema()) } else { None };
        let (dataset, report) =
            ingest_csv(&self.forcing_dir, &self.attributes, schema.as_ref(), period)?;
        if !report.dropped_rows.is_empty() {
            let total: usize = report.dropped_rows.values().sum();
            eprintln!(
                "note: dropped {total} rows with missing forcing across {} entities",
                report.dropped_rows.len()
            );
        }
        if report.date_gaps > 0 {
            eprintln!("note: aligned timeline has {} calendar gaps", report.date_gaps);
        }
        Ok(dataset)
    }
}

fn entity_ids_or_all(dataset: &Dataset, list: &Option<PathBuf>) -> Result<Vec<String>> {
    match list {
        Some(path) => read_id_list(path),
        None => Ok(dataset.entity_ids()),
    }
}

// ---- synth ----------------------------------------------------------------

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory (receives forcing/, attributes.csv, attributes_truth.csv).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 60)]
    entities: usize,
    #[arg(long, default_value_t = 730)]
    days: usize,
}

pub fn synth(globals: &Globals, args: SynthArgs) -> Result<()> {
    let config = SyntheticConfig {
        entity_count: args.entities,
        days: args.days,
        ..SyntheticConfig::default()
    };
    let seed = globals.seed.unwrap_or(7);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dataset = synthesize(&config, &mut rng)?;
    export_dataset(&dataset, &args.out)?;
    data::export_attributes(&dataset, &args.out.join("attributes_truth.csv"), true)?;
    println!(
        "wrote {} entities x {} days to {} (seed {seed})",
        args.entities,
        args.days,
        args.out.display()
    );
    Ok(())
}

// ---- ingest ---------------------------------------------------------------

#[derive(Args)]
pub struct IngestArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    start: Option<String>,
    #[arg(long)]
    end: Option<String>,
}

pub fn ingest(_globals: &Globals, args: IngestArgs) -> Result<()> {
    let period = period_from(&args.start, &args.end, "period")?;
    let dataset = args.data.load(period.as_ref())?;
    let t = dataset.entities.first().map(|e| e.len()).unwrap_or(0);
    let available: usize = dataset
        .entities
        .iter()
        .map(|e| e.available.iter().filter(|&&a| a).count())
        .sum();
    println!(
        "{} entities, {} days each, {} drivers, {} characteristics ({} available cells)",
        dataset.entities.len(),
        t,
        dataset.driver_dim(),
        dataset.characteristic_dim(),
        available
    );
    if let (Some(first), Some(last)) = (
        dataset.entities.first().and_then(|e| e.dates.first()),
        dataset.entities.first().and_then(|e| e.dates.last()),
    ) {
        println!("aligned dates: {first} .. {last}");
    }
    Ok(())
}

// ---- train ----------------------------------------------------------------

fn train_config_from(map: &BTreeMap<String, String>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    for (key, value) in map {
        match key.as_str() {
            "lambda_rec" => config.weights.reconstruction = parse(key, value)?,
            "lambda_cont" => config.weights.contrastive = parse(key, value)?,
            "lambda_inv" => config.weights.inverse = parse(key, value)?,
            "temperature" => config.temperature = parse(key, value)?,
            "window" => config.window = parse(key, value)?,
            "stride" => config.stride = parse(key, value)?,
            "hidden" => {
                config.hidden = parse(key, value)?;
                config.inverse_hidden = config.hidden;
            }
            "inverse_hidden" => config.inverse_hidden = parse(key, value)?,
            "batch_entities" => config.batch_entities = parse(key, value)?,
            "learning_rate" => config.learning_rate = parse(key, value)?,
            "epochs" => config.epochs = parse(key, value)?,
            "seeds" => config.seeds = parse_seeds(value)?,
            "gate_mode" => {
                config.gate_mode = match value.as_str() {
                    "standard" => GateMode::Standard,
                    "sigmoid" => GateMode::SigmoidCandidate,
                    other => {
                        return Err(Error::Config(format!(
                            "gate_mode must be standard or sigmoid, got '{other}'"
                        )))
                    }
                }
            }
            "activation" => {
                config.activation = match value.as_str() {
                    "relu" => Activation::Relu,
                    "tanh" => Activation::Tanh,
                    other => {
                        return Err(Error::Config(format!(
                            "activation must be relu or tanh, got '{other}'"
                        )))
                    }
                }
            }
            other if other.starts_with("grid_") || other.starts_with("forward_") => {}
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
    }
    if let Some(seed) = seed {
        config.seeds = vec![seed];
    }
    Ok(config)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse config value {key}={value}")))
}

fn parse_seeds(value: &str) -> Result<Vec<u64>> {
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse seed list '{value}'")))
        })
        .collect()
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// File with one training entity id per line (default: all entities).
    #[arg(long)]
    train_ids: Option<PathBuf>,
    #[arg(long)]
    train_start: Option<String>,
    #[arg(long)]
    train_end: Option<String>,
}

pub fn train(globals: &Globals, args: TrainArgs) -> Result<()> {
    let period = period_from(&args.train_start, &args.train_end, "train")?;
    let raw = args.data.load(None)?;
    let ids = entity_ids_or_all(&raw, &args.train_ids)?;
    let config = train_config_from(&globals.config_map()?, globals.seed)?;
    let (standardized, stats) = data::fit_normalize(&raw, &ids, period.as_ref())?;
    let checkpoints =
        train::train_ensemble(&standardized, &stats, &ids, period.as_ref(), &config)?;
    fs::create_dir_all(&globals.out_dir)?;
    for ckpt in &checkpoints {
        let path = globals.out_dir.join(format!("checkpoint_seed{}.json", ckpt.seed));
        ckpt.save(&path)?;
        ckpt.write_loss_csv(&globals.out_dir.join(format!("train_log_seed{}.csv", ckpt.seed)))?;
        let last = ckpt.loss_trace.last().map(|s| s.total).unwrap_or(f64::NAN);
        println!("seed {}: {} steps, final loss {last}", ckpt.seed, ckpt.loss_trace.len());
    }
    println!("wrote {} checkpoints to {}", checkpoints.len(), globals.out_dir.display());
    Ok(())
}

// ---- grid -----------------------------------------------------------------

#[derive(Args)]
pub struct GridArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    train_ids: Option<PathBuf>,
    #[arg(long)]
    fit_start: String,
    #[arg(long)]
    fit_end: String,
    /// Validation period start; defaults to the last 12 months of the fit period.
    #[arg(long)]
    val_start: Option<String>,
    #[arg(long)]
    val_end: Option<String>,
    /// Evaluate at most this many evenly spaced grid points.
    #[arg(long)]
    max_points: Option<usize>,
}

fn grid_from(map: &BTreeMap<String, String>) -> Result<HyperGrid> {
    let mut grid = HyperGrid::default();
    let parse_list = |value: &str| -> Result<Vec<f64>> {
        value
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("cannot parse grid list '{value}'")))
            })
            .collect()
    };
    let parse_usize_list = |value: &str| -> Result<Vec<usize>> {
        value
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("cannot parse grid list '{value}'")))
            })
            .collect()
    };
    for (key, value) in map {
        match key.as_str() {
            "grid_embedding_dims" => grid.embedding_dims = parse_usize_list(value)?,
            "grid_learning_rates" => grid.learning_rates = parse_list(value)?,
            "grid_lambda_rec" => grid.lambda_reconstruction = parse_list(value)?,
            "grid_lambda_cont" => grid.lambda_contrastive = parse_list(value)?,
            "grid_lambda_inv" => grid.lambda_inverse = parse_list(value)?,
            "grid_batch_sizes" => grid.batch_sizes = parse_usize_list(value)?,
            "grid_temperatures" => grid.temperatures = parse_list(value)?,
            _ => {}
        }
    }
    Ok(grid)
}

pub fn grid(globals: &Globals, args: GridArgs) -> Result<()> {
    let raw = args.data.load(None)?;
    let ids = entity_ids_or_all(&raw, &args.train_ids)?;
    let fit_start = parse_date_flag(&Some(args.fit_start.clone()), "fit-start")?.expect("given");
    let fit_end = parse_date_flag(&Some(args.fit_end.clone()), "fit-end")?.expect("given");
    let (fit_period, validation_period) = match (
        parse_date_flag(&args.val_start, "val-start")?,
        parse_date_flag(&args.val_end, "val-end")?,
    ) {
        (Some(s), Some(e)) => (Period::new(fit_start, fit_end)?, Period::new(s, e)?),
        (None, None) => {
            // hold out the last 12 months of the fit period for validation
            let split = fit_end - chrono::Days::new(365);
            if split <= fit_start {
                return Err(Error::Config(
                    "fit period too short to hold out 12 months of validation".into(),
                ));
            }
            (
                Period::new(fit_start, split)?,
                Period::new(split + chrono::Days::new(1), fit_end)?,
            )
        }
        _ => {
            return Err(Error::Config(
                "--val-start and --val-end must be given together".into(),
            ))
        }
    };
    let map = globals.config_map()?;
    let base = train_config_from(&map, globals.seed)?;
    let grid = grid_from(&map)?;
    let spec = ValidationSpec {
        entity_ids: ids,
        fit_period,
        validation_period,
    };
    let options = GridOptions {
        max_points: args.max_points,
    };
    let (best, candidates) = train::grid_search(&raw, &grid, &base, &spec, &options)?;
    fs::create_dir_all(&globals.out_dir)?;
    let mut out = fs::File::create(globals.out_dir.join("grid_results.csv"))?;
    writeln!(
        out,
        "index,embedding_dim,learning_rate,lambda_rec,lambda_cont,lambda_inv,batch_entities,temperature,validation_rmse"
    )?;
    for c in &candidates {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            c.index,
            c.point.embedding_dim,
            c.point.learning_rate,
            c.point.lambda_reconstruction,
            c.point.lambda_contrastive,
            c.point.lambda_inverse,
            c.point.batch_entities,
            c.point.temperature,
            c.validation_rmse
        )?;
    }
    fs::write(
        globals.out_dir.join("best_config.json"),
        serde_json::to_string_pretty(&best)?,
    )?;
    println!(
        "evaluated {} candidates; best: hidden={} lr={} lambda=({},{},{}) batch={} temperature={}",
        candidates.len(),
        best.hidden,
        best.learning_rate,
        best.weights.reconstruction,
        best.weights.contrastive,
        best.weights.inverse,
        best.batch_entities,
        best.temperature
    );
    Ok(())
}

// ---- estimate ---------------------------------------------------------------

fn load_checkpoints(path: &Path) -> Result<Vec<seqinv::checkpoint::Checkpoint>> {
    let mut paths = Vec::new();
    if path.is_dir() {
        for entry in fs::read_dir(path)? {
            let p = entry?.path();
            if p.extension().map(|e| e == "json").unwrap_or(false) {
                paths.push(p);
            }
        }
        paths.sort();
    } else {
        paths.push(path.to_path_buf());
    }
    if paths.is_empty() {
        return Err(Error::Data(format!(
            "no checkpoint files under {}",
            path.display()
        )));
    }
    paths
        .iter()
        .map(|p| seqinv::checkpoint::Checkpoint::load(p))
        .collect()
}

#[derive(Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint file or directory of checkpoint JSON files.
    #[arg(long)]
    checkpoints: PathBuf,
    /// File with one target entity id per line (default: all entities).
    #[arg(long)]
    entities: Option<PathBuf>,
    #[arg(long)]
    start: Option<String>,
    #[arg(long)]
    end: Option<String>,
    /// Window stride for inference (default: non-overlapping windows).
    #[arg(long)]
    stride: Option<usize>,
}

pub fn estimate(globals: &Globals, args: EstimateArgs) -> Result<()> {
    let raw = args.data.load(None)?;
    let ids = entity_ids_or_all(&raw, &args.entities)?;
    let period = period_from(&args.start, &args.end, "period")?;
    let checkpoints = load_checkpoints(&args.checkpoints)?;
    let estimator = Estimator::from_checkpoints(&checkpoints)?;
    let estimates = estimator.estimate_dataset(&raw, &ids, period.as_ref(), args.stride)?;
    fs::create_dir_all(&globals.out_dir)?;
    write_estimates_csv(
        &globals.out_dir,
        "estimates.csv",
        estimator.characteristic_names(),
        &estimates,
    )?;
    write_embeddings_csv(&globals.out_dir, "embeddings.csv", &estimates)?;
    println!(
        "estimated {} entities with {} model(s); wrote estimates.csv and embeddings.csv to {}",
        estimates.len(),
        estimator.model_count(),
        globals.out_dir.display()
    );
    Ok(())
}

// ---- corrupt / mask ---------------------------------------------------------

struct AttributeTable {
    header: Vec<String>,
    ids: Vec<String>,
    values: Vec<Vec<Option<f64>>>,
}

fn read_attribute_table(path: &Path) -> Result<AttributeTable> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
    if header.is_empty() || header[0] != "entity_id" {
        return Err(Error::Data("attributes header must start with entity_id".into()));
    }
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record?;
        ids.push(record[0].to_string());
        let row: Vec<Option<f64>> = (1..header.len())
            .map(|j| {
                let cell = record[j].trim();
                if cell.is_empty() {
                    None
                } else {
                    cell.parse().ok()
                }
            })
            .collect();
        values.push(row);
    }
    Ok(AttributeTable { header, ids, values })
}

fn write_attribute_table(path: &Path, table: &AttributeTable) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = fs::File::create(path)?;
    writeln!(out, "{}", table.header.join(","))?;
    for (id, row) in table.ids.iter().zip(&table.values) {
        let cells: Vec<String> = row
            .iter()
            .map(|v| v.map(|x| format!("{x}")).unwrap_or_default())
            .collect();
        writeln!(out, "{},{}", id, cells.join(","))?;
    }
    Ok(())
}

fn column_stds(table: &AttributeTable) -> Vec<f64> {
    let cols = table.header.len() - 1;
    (0..cols)
        .map(|j| {
            let vals: Vec<f64> = table.values.iter().filter_map(|row| row[j]).collect();
            if vals.len() < 2 {
                return 1.0;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            var.sqrt().max(1e-12)
        })
        .collect()
}

#[derive(Args)]
pub struct CorruptArgs {
    /// Attributes CSV to perturb.
    #[arg(long)]
    attributes: PathBuf,
    /// Output path for the corrupted table.
    #[arg(long)]
    out: PathBuf,
    /// Fraction of entities (or cells with --entry-level) to perturb.
    #[arg(long, default_value_t = 0.5)]
    fraction: f64,
    /// Noise standard deviation in per-column standard-deviation units.
    #[arg(long, default_value_t = 2.0)]
    multiple: f64,
    /// Perturb individual cells instead of whole entities.
    #[arg(long)]
    entry_level: bool,
}

pub fn corrupt(globals: &Globals, args: CorruptArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.fraction) {
        return Err(Error::Config("--fraction must lie in [0, 1]".into()));
    }
    if args.multiple <= 0.0 {
        return Err(Error::Config("--multiple must be positive".into()));
    }
    let mut table = read_attribute_table(&args.attributes)?;
    let stds = column_stds(&table);
    let seed = globals.seed.unwrap_or(17);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let cols = table.header.len() - 1;
    let mut perturbed = 0usize;
    if args.entry_level {
        let total = table.ids.len() * cols;
        let count = (args.fraction * total as f64).floor() as usize;
        let mut cells: Vec<usize> = rand::seq::index::sample(&mut rng, total, count).into_vec();
        cells.sort_unstable();
        for cell in cells {
            let (e, j) = (cell / cols, cell % cols);
            if let Some(v) = table.values[e][j].as_mut() {
                *v += args.multiple * stds[j] * normal.sample(&mut rng);
                perturbed += 1;
            }
        }
    } else {
        let count = (args.fraction * table.ids.len() as f64).floor() as usize;
        let mut rows: Vec<usize> =
            rand::seq::index::sample(&mut rng, table.ids.len(), count).into_vec();
        rows.sort_unstable();
        for e in rows {
            for j in 0..cols {
                if let Some(v) = table.values[e][j].as_mut() {
                    *v += args.multiple * stds[j] * normal.sample(&mut rng);
                }
            }
            perturbed += 1;
        }
    }
    write_attribute_table(&args.out, &table)?;
    println!(
        "perturbed {perturbed} {} with noise multiple {} (seed {seed}); wrote {}",
        if args.entry_level { "cells" } else { "entities" },
        args.multiple,
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct MaskArgs {
    #[arg(long)]
    attributes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fraction of entities whose attributes become missing.
    #[arg(long, default_value_t = 0.5)]
    fraction: f64,
}

pub fn mask(globals: &Globals, args: MaskArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.fraction) {
        return Err(Error::Config("--fraction must lie in [0, 1]".into()));
    }
    let mut table = read_attribute_table(&args.attributes)?;
    let seed = globals.seed.unwrap_or(17);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = (args.fraction * table.ids.len() as f64).floor() as usize;
    let mut rows: Vec<usize> = rand::seq::index::sample(&mut rng, table.ids.len(), count).into_vec();
    rows.sort_unstable();
    for e in rows {
        for cell in table.values[e].iter_mut() {
            *cell = None;
        }
    }
    write_attribute_table(&args.out, &table)?;
    println!(
        "masked {count} of {} entities (seed {seed}); wrote {}",
        table.ids.len(),
        args.out.display()
    );
    Ok(())
}

// ---- forward train / eval ---------------------------------------------------

fn load_embedding_payload(path: &Path) -> Result<BTreeMap<String, Array1<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let id = record[0].to_string();
        let vec: std::result::Result<Vec<f64>, _> =
            (1..record.len()).map(|j| record[j].parse::<f64>()).collect();
        let vec = vec.map_err(|_| Error::Data(format!("bad embedding row for {id}")))?;
        map.insert(id, Array1::from_vec(vec));
    }
    Ok(map)
}

fn load_estimate_payload(path: &Path, names: &[String]) -> Result<BTreeMap<String, Array1<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut cells: BTreeMap<(String, String), f64> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let value: f64 = record[2]
            .parse()
            .map_err(|_| Error::Data("bad estimate value".into()))?;
        cells.insert((record[0].to_string(), record[1].to_string()), value);
    }
    let ids: std::collections::BTreeSet<String> = cells.keys().map(|(id, _)| id.clone()).collect();
    let mut map = BTreeMap::new();
    for id in ids {
        let mut vec = Vec::with_capacity(names.len());
        for name in names {
            let v = cells.get(&(id.clone(), name.clone())).ok_or_else(|| {
                Error::Data(format!("estimate table misses {id}/{name}"))
            })?;
            vec.push(*v);
        }
        map.insert(id, Array1::from_vec(vec));
    }
    Ok(map)
}

fn parse_conditioning(spec: &str, dataset: &Dataset) -> Result<ConditioningSource> {
    match spec {
        "measured" => Ok(ConditioningSource::Measured),
        "corrupted" => Ok(ConditioningSource::Corrupted),
        "none" => Ok(ConditioningSource::None {
            dim: dataset.characteristic_dim(),
        }),
        other => {
            if let Some(path) = other.strip_prefix("embeddings:") {
                Ok(ConditioningSource::Provided {
                    tag: ConditioningTag::Embedding,
                    vectors: load_embedding_payload(Path::new(path))?,
                })
            } else if let Some(path) = other.strip_prefix("estimates:") {
                Ok(ConditioningSource::Provided {
                    tag: ConditioningTag::Imputed,
                    vectors: load_estimate_payload(Path::new(path), &dataset.characteristic_names)?,
                })
            } else {
                Err(Error::Config(format!(
                    "--cond must be measured, corrupted, none, embeddings:<csv>, or estimates:<csv>; got '{other}'"
                )))
            }
        }
    }
}

fn forward_config_from(map: &BTreeMap<String, String>, seed: Option<u64>) -> Result<ForwardTrainConfig> {
    let mut config = ForwardTrainConfig::default();
    for (key, value) in map {
        match key.as_str() {
            "forward_hidden" => config.hidden = parse(key, value)?,
            "forward_learning_rate" => config.learning_rate = parse(key, value)?,
            "forward_epochs" => config.epochs = parse(key, value)?,
            "forward_batch" => config.batch_entities = parse(key, value)?,
            "forward_window" => config.window = parse(key, value)?,
            "forward_seed" => config.seed = parse(key, value)?,
            _ => {}
        }
    }
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

#[derive(Args)]
pub struct ForwardTrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    train_ids: Option<PathBuf>,
    #[arg(long)]
    train_start: Option<String>,
    #[arg(long)]
    train_end: Option<String>,
    /// Conditioning: measured | corrupted | none | embeddings:<csv> | estimates:<csv>.
    #[arg(long, default_value = "measured")]
    cond: String,
}

pub fn forward_train(globals: &Globals, args: ForwardTrainArgs) -> Result<()> {
    let raw = args.data.load(None)?;
    let ids = entity_ids_or_all(&raw, &args.train_ids)?;
    let period = period_from(&args.train_start, &args.train_end, "train")?;
    let source = parse_conditioning(&args.cond, &raw)?;
    let config = forward_config_from(&globals.config_map()?, globals.seed)?;
    let model = forward::train_forward(&raw, &ids, period.as_ref(), &source, &config)?;
    fs::create_dir_all(&globals.out_dir)?;
    let path = globals.out_dir.join("forward_model.json");
    model.save(&path)?;
    let last = model.loss_trace.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained forward model ({:?} conditioning, {} steps, final loss {last}); wrote {}",
        model.tag,
        model.loss_trace.len(),
        path.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct ForwardEvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Trained forward model JSON.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    entities: Option<PathBuf>,
    #[arg(long)]
    start: Option<String>,
    #[arg(long)]
    end: Option<String>,
    #[arg(long, default_value = "measured")]
    cond: String,
}

pub fn forward_eval(globals: &Globals, args: ForwardEvalArgs) -> Result<()> {
    let raw = args.data.load(None)?;
    let ids = entity_ids_or_all(&raw, &args.entities)?;
    let period = period_from(&args.start, &args.end, "period")?;
    let model = ForwardModel::load(&args.model)?;
    let source = parse_conditioning(&args.cond, &raw)?;
    let mut predictions = Vec::new();
    let mut nse_rows = Vec::new();
    for id in &ids {
        let record = raw.entity(id)?;
        let cond = model.conditioning_for(&source, record)?;
        let predicted = model.predict(record, period.as_ref(), cond.view())?;
        let range = record.range_for(period.as_ref());
        let observed = record.response.slice(ndarray::s![range.clone()]).to_owned();
        let value = forward::nse(predicted.view(), observed.view())?;
        nse_rows.push((id.clone(), value));
        for (offset, t) in range.enumerate() {
            predictions.push((id.clone(), record.dates[t], record.response[t], predicted[offset]));
        }
    }
    fs::create_dir_all(&globals.out_dir)?;
    write_predictions_csv(&globals.out_dir, "predictions.csv", &predictions)?;
    write_nse_csv(&globals.out_dir, "nse.csv", &nse_rows)?;
    let mut values: Vec<f64> = nse_rows.iter().map(|(_, v)| *v).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let median = report::median_of_slice(&mut values);
    let summary = serde_json::json!({
        "arm": format!("{:?}", model.tag),
        "entity_count": nse_rows.len(),
        "mean_nse": mean,
        "median_nse": median,
    });
    fs::write(
        globals.out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    println!(
        "evaluated {} entities: mean NSE {mean:.4}, median NSE {median:.4}",
        nse_rows.len()
    );
    Ok(())
}

// ---- report / run -------------------------------------------------------------

#[derive(Args)]
pub struct ReportArgs {
    /// Run directory holding report.json and raw artifacts.
    #[arg(long)]
    run_dir: PathBuf,
}

pub fn report(_globals: &Globals, args: ReportArgs) -> Result<()> {
    verify_report(&args.run_dir)?;
    println!(
        "report verified: every metric in {} is reproducible from its raw artifacts",
        args.run_dir.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct PresetArgs {
    /// Preset name; `list` prints the available presets.
    preset: String,
    /// Root directory of external data (used by external-data presets).
    #[arg(long)]
    data_root: Option<PathBuf>,
}

pub fn run_preset(globals: &Globals, args: PresetArgs) -> Result<()> {
    if args.preset == "list" {
        for (name, blurb) in report::list_presets() {
            println!("{name:<22} {blurb}");
        }
        return Ok(());
    }
    let options = RunOptions {
        out_dir: globals.out_dir.join(&args.preset),
        seed: globals.seed,
        overrides: globals.config_map()?,
        data_root: args.data_root.clone(),
    };
    let report = run_experiment(&args.preset, &options)?;
    println!(
        "run {} complete ({} artifacts) -> {}",
        report.provenance.run_id,
        report.files.len(),
        options.out_dir.display()
    );
    for m in &report.characteristic_metrics {
        println!("  {:<24} rmse {:.4}  corr {:.4}", m.characteristic, m.rmse, m.corr);
    }
    if let Some(group) = &report.group_report {
        println!(
            "  group means: {}  (mean-of-groups {:.4}, mean-of-characteristics {:.4})",
            group
                .groups
                .iter()
                .map(|(g, c)| format!("{g} {c:.4}"))
                .collect::<Vec<_>>()
                .join(", "),
            group.mean_of_group_means,
            group.mean_over_characteristics
        );
    }
    if let Some(denoising) = &report.denoising {
        println!(
            "  denoising: corrupted rmse {:.4} -> reconstructed rmse {:.4}",
            denoising.corrupted_rmse_mean, denoising.reconstructed_rmse_mean
        );
    }
    for arm in &report.nse_summary {
        println!(
            "  arm {:<16} mean NSE {:.4}  median NSE {:.4} ({} entities)",
            arm.arm, arm.mean_nse, arm.median_nse, arm.entity_count
        );
    }
    Ok(())
}
