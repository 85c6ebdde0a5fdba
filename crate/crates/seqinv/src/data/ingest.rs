//! CSV ingestion and export.
//!
//! Forcing files live one-per-entity under a directory, with header
//! `date,<driver_1>,...,<driver_Dx>,response` and ISO dates at daily
//! resolution; the file stem is the entity id. The attributes table has
//! header `entity_id,<char_1>,...,<char_Dz>`; an empty cell marks an
//! unavailable characteristic. Rows with missing forcing values are
//! dropped and reported, never interpolated, and all entities are aligned
//! to the intersection of their available dates.

use super::{Dataset, EntityRecord, Period};
use crate::error::{Error, Result};
use chrono::NaiveDate;
use ndarray::{Array1, Array2};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

/// Expected column layout: driver columns of every forcing file and the
/// required characteristic columns of the attributes table, with the
/// characteristic-group map used by grouped reporting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub driver_columns: Vec<String>,
    pub characteristic_columns: Vec<String>,
    /// Group label -> characteristic names (in reporting order).
    pub groups: Vec<(String, Vec<String>)>,
}

/// The 27-characteristic large-sample catchment schema: nine climate
/// indices, ten soil/geology properties, eight geomorphology/land-cover
/// properties, with the standard five daily forcings.
pub fn camels_schema() -> Schema {
    let climate = vec![
        "p_mean",
        "pet_mean",
        "p_seasonality",
        "frac_snow",
        "aridity",
        "high_prec_freq",
        "high_prec_dur",
        "low_prec_freq",
        "low_prec_dur",
    ];
    let soil_geology = vec![
        "carbonate_rocks_frac",
        "geol_permeability",
        "soil_depth_pelletier",
        "soil_depth_statsgo",
        "soil_porosity",
        "soil_conductivity",
        "max_water_content",
        "sand_frac",
        "silt_frac",
        "clay_frac",
    ];
    let geomorphology = vec![
        "elev_mean",
        "slope_mean",
        "area_gages2",
        "frac_forest",
        "lai_max",
        "lai_diff",
        "gvf_max",
        "gvf_diff",
    ];
    let to_owned = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let characteristic_columns = [climate.as_slice(), soil_geology.as_slice(), geomorphology.as_slice()]
        .concat()
        .iter()
        .map(|s| s.to_string())
        .collect();
    Schema {
        driver_columns: to_owned(&["prcp", "srad", "tmax", "tmin", "vp"]),
        characteristic_columns,
        groups: vec![
            ("climate".into(), to_owned(&climate)),
            ("soil_geology".into(), to_owned(&soil_geology)),
            ("geomorphology".into(), to_owned(&geomorphology)),
        ],
    }
}

/// What ingestion dropped or aligned, for operator visibility.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    /// Rows dropped per entity because a forcing value was missing.
    pub dropped_rows: BTreeMap<String, usize>,
    /// Calendar-day gaps inside the aligned timeline.
    pub date_gaps: usize,
    /// Entities present in forcing files but absent from the attributes
    /// table (their characteristics are marked unavailable).
    pub entities_without_attributes: Vec<String>,
}

fn parse_cell(raw: &str, file: &str, line: usize, column: &str) -> Result<Option<f64>> {
    let trimmed = raw.trim();
    if trimmed.is_empty() || trimmed.eq_ignore_ascii_case("na") || trimmed.eq_ignore_ascii_case("nan")
    {
        return Ok(None);
    }
    let value: f64 = trimmed.parse().map_err(|_| {
        Error::Data(format!(
            "{file}: line {line}: column {column}: cannot parse '{trimmed}' as a number"
        ))
    })?;
    if !value.is_finite() {
        return Ok(None);
    }
    Ok(Some(value))
}

struct ForcingFile {
    id: String,
    rows: BTreeMap<NaiveDate, Vec<f64>>, // drivers then response
    dropped: usize,
}

fn read_forcing_file(path: &Path, expected_drivers: Option<&[String]>) -> Result<(ForcingFile, Vec<String>)> {
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Data(format!("{}: invalid file name", path.display())))?
        .to_string();
    let file_label = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
    if headers.len() < 3 || headers[0] != "date" || headers[headers.len() - 1] != "response" {
        return Err(Error::Data(format!(
            "{file_label}: header must be date,<drivers...>,response; got {}",
            headers.join(",")
        )));
    }
    let drivers: Vec<String> = headers[1..headers.len() - 1].to_vec();
    if let Some(expected) = expected_drivers {
        for col in expected {
            if !drivers.contains(col) {
                return Err(Error::Data(format!(
                    "{file_label}: missing required driver column '{col}'"
                )));
            }
        }
        if drivers != expected {
            return Err(Error::Data(format!(
                "{file_label}: driver columns {:?} do not match expected order {:?}",
                drivers, expected
            )));
        }
    }

    let mut rows = BTreeMap::new();
    let mut dropped = 0usize;
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2; // header is line 1
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Data(format!(
                "{file_label}: line {line}: expected {} fields, found {}",
                headers.len(),
                record.len()
            )));
        }
        let date = NaiveDate::parse_from_str(record[0].trim(), "%Y-%m-%d").map_err(|_| {
            Error::Data(format!(
                "{file_label}: line {line}: cannot parse date '{}'",
                &record[0]
            ))
        })?;
        let mut values = Vec::with_capacity(headers.len() - 1);
        let mut missing = false;
        for (j, col) in headers[1..].iter().enumerate() {
            match parse_cell(&record[j + 1], &file_label, line, col)? {
                Some(v) => values.push(v),
                None => {
                    missing = true;
                    break;
                }
            }
        }
        if missing {
            dropped += 1;
            continue;
        }
        rows.insert(date, values);
    }
    Ok((ForcingFile { id, rows, dropped }, drivers))
}

struct AttributeTable {
    columns: Vec<String>,
    /// entity id -> (values, availability)
    rows: BTreeMap<String, (Vec<f64>, Vec<bool>)>,
}

fn read_attributes(path: &Path, required: Option<&[String]>) -> Result<AttributeTable> {
    let file_label = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
    if headers.is_empty() || headers[0] != "entity_id" {
        return Err(Error::Data(format!(
            "{file_label}: attributes header must start with entity_id"
        )));
    }
    let present: Vec<String> = headers[1..].to_vec();
    let columns: Vec<String> = match required {
        Some(req) => {
            for col in req {
                if !present.contains(col) {
                    return Err(Error::Data(format!(
                        "{file_label}: missing required characteristic column '{col}'"
                    )));
                }
            }
            req.to_vec()
        }
        None => present.clone(),
    };
    let column_pos: Vec<usize> = columns
        .iter()
        .map(|c| present.iter().position(|p| p == c).expect("checked above") + 1)
        .collect();

    let mut rows = BTreeMap::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Data(format!(
                "{file_label}: line {line}: expected {} fields, found {}",
                headers.len(),
                record.len()
            )));
        }
        let id = record[0].to_string();
        let mut values = Vec::with_capacity(columns.len());
        let mut avail = Vec::with_capacity(columns.len());
        for (&pos, col) in column_pos.iter().zip(&columns) {
            match parse_cell(&record[pos], &file_label, line, col)? {
                Some(v) => {
                    values.push(v);
                    avail.push(true);
                }
                None => {
                    values.push(0.0);
                    avail.push(false);
                }
            }
        }
        rows.insert(id, (values, avail));
    }
    Ok(AttributeTable { columns, rows })
}

/// Ingest one forcing file per entity plus an attributes table. When a
/// schema is given, its driver and characteristic columns are required;
/// otherwise columns are taken from the files (the first forcing file
/// fixes the driver order). Entities are aligned to the intersection of
/// their available dates within `period`.
pub fn ingest_csv(
    forcing_dir: &Path,
    attributes_path: &Path,
    schema: Option<&Schema>,
    period: Option<&Period>,
) -> Result<(Dataset, IngestReport)> {
    let mut paths: Vec<_> = fs::read_dir(forcing_dir)
        .map_err(|e| Error::Data(format!("cannot read forcing dir {}: {e}", forcing_dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "csv").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!(
            "forcing directory {} contains no CSV files",
            forcing_dir.display()
        )));
    }

    let mut driver_names: Option<Vec<String>> = schema.map(|s| s.driver_columns.clone());
    let mut files = Vec::with_capacity(paths.len());
    let mut report = IngestReport::default();
    for path in &paths {
        let (file, drivers) = read_forcing_file(path, driver_names.as_deref())?;
        if driver_names.is_none() {
            driver_names = Some(drivers);
        }
        if file.dropped > 0 {
            report.dropped_rows.insert(file.id.clone(), file.dropped);
        }
        files.push(file);
    }
    let driver_names = driver_names.expect("at least one file");

    // intersect dates across entities, restricted to the configured period
    let mut common: Option<BTreeSet<NaiveDate>> = None;
    for file in &files {
        let dates: BTreeSet<NaiveDate> = file
            .rows
            .keys()
            .copied()
            .filter(|d| period.map(|p| p.contains(*d)).unwrap_or(true))
            .collect();
        common = Some(match common {
            Some(acc) => acc.intersection(&dates).copied().collect(),
            None => dates,
        });
    }
    let common: Vec<NaiveDate> = common.unwrap_or_default().into_iter().collect();
    if common.is_empty() {
        return Err(Error::Data(
            "no common dates remain across entities after alignment".into(),
        ));
    }
    report.date_gaps = common
        .windows(2)
        .filter(|w| (w[1] - w[0]).num_days() != 1)
        .count();

    let attrs = read_attributes(attributes_path, schema.map(|s| s.characteristic_columns.as_slice()))?;
    let d_z = attrs.columns.len();

    let mut entities = Vec::with_capacity(files.len());
    for file in files {
        let t = common.len();
        let d_x = driver_names.len();
        let mut drivers = Array2::zeros((t, d_x));
        let mut response = Array1::zeros(t);
        for (r, date) in common.iter().enumerate() {
            let row = &file.rows[date];
            for j in 0..d_x {
                drivers[(r, j)] = row[j];
            }
            response[r] = row[d_x];
        }
        let (characteristics, available) = match attrs.rows.get(&file.id) {
            Some((values, avail)) => (Array1::from_vec(values.clone()), avail.clone()),
            None => {
                report.entities_without_attributes.push(file.id.clone());
                (Array1::zeros(d_z), vec![false; d_z])
            }
        };
        entities.push(EntityRecord {
            id: file.id,
            dates: common.clone(),
            drivers,
            response,
            characteristics,
            available,
            original_characteristics: None,
        });
    }

    let dataset = Dataset::new(driver_names, attrs.columns, entities)?;
    Ok((dataset, report))
}

/// Write a dataset back out in the ingestion formats: `forcing/<id>.csv`
/// per entity plus `attributes.csv`.
pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let forcing_dir = dir.join("forcing");
    fs::create_dir_all(&forcing_dir)?;
    for rec in &dataset.entities {
        let path = forcing_dir.join(format!("{}.csv", rec.id));
        let mut out = fs::File::create(&path)?;
        writeln!(out, "date,{},response", dataset.driver_names.join(","))?;
        for t in 0..rec.len() {
            let mut row = vec![rec.dates[t].to_string()];
            for j in 0..dataset.driver_dim() {
                row.push(format!("{}", rec.drivers[(t, j)]));
            }
            row.push(format!("{}", rec.response[t]));
            writeln!(out, "{}", row.join(","))?;
        }
    }
    export_attributes(dataset, &dir.join("attributes.csv"), false)
}

/// Write the attributes table. With `use_original` set, entities that
/// carry retained pre-corruption values emit those instead (the ground
/// truth for corrupted datasets); unavailable cells are left empty.
pub fn export_attributes(dataset: &Dataset, path: &Path, use_original: bool) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = fs::File::create(path)?;
    writeln!(out, "entity_id,{}", dataset.characteristic_names.join(","))?;
    for rec in &dataset.entities {
        let source = if use_original {
            rec.original_characteristics.as_ref().unwrap_or(&rec.characteristics)
        } else {
            &rec.characteristics
        };
        let mut row = vec![rec.id.clone()];
        for j in 0..dataset.characteristic_dim() {
            if rec.available[j] {
                row.push(format!("{}", source[j]));
            } else {
                row.push(String::new());
            }
        }
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
