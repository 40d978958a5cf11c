//! File formats: item sets, ratings, returns panels, questionnaires and experiment outputs.

use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lfm::{Rating, RatingsMatrix};
use crate::lottery::{ItemSet, Lottery, Outcome};
use crate::portfolio::{ReturnsPanel, WealthCurve};
use crate::questionnaire::{Questionnaire, QuestionnaireFile};
use crate::sim::{CellSummary, RunRecord};

/// Probability sums within this distance of 1 are accepted on load and renormalized.
pub const LOAD_PROB_TOLERANCE: f64 = 1e-6;

fn parse_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), message: message.into() }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read(path)?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.to_string()))
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Deserialize)]
struct RawItemSet {
    name: String,
    items: Vec<RawItem>,
}

#[derive(Deserialize)]
struct RawItem {
    id: String,
    #[serde(default)]
    label: String,
    outcomes: Vec<Outcome>,
}

/// Parses an item set, accepting probability sums within [`LOAD_PROB_TOLERANCE`] of 1.
pub fn parse_item_set(text: &str, origin: &Path) -> Result<ItemSet> {
    let raw: RawItemSet = serde_json::from_str(text).map_err(|e| parse_err(origin, e.to_string()))?;
    let mut items = Vec::with_capacity(raw.items.len());
    for (i, item) in raw.items.into_iter().enumerate() {
        let sum: f64 = item.outcomes.iter().map(|o| o.prob).sum();
        if !sum.is_finite() || (sum - 1.0).abs() > LOAD_PROB_TOLERANCE {
            return Err(Error::validation(format!(
                "{}: items[{i}] ({}) probabilities sum to {sum}",
                origin.display(),
                item.id
            )));
        }
        let outcomes = item.outcomes.iter().map(|o| Outcome { value: o.value, prob: o.prob / sum }).collect();
        let lottery = Lottery::new(item.id, item.label, outcomes)
            .map_err(|e| Error::validation(format!("{}: items[{i}]: {e}", origin.display())))?;
        items.push(lottery);
    }
    ItemSet::new(raw.name, items)
}

pub fn load_item_set(path: &Path) -> Result<ItemSet> {
    parse_item_set(&read(path)?, path)
}

#[derive(Deserialize)]
struct RatingRow {
    user_id: String,
    item_id: String,
    rating: f64,
}

/// Ratings CSV `user_id,item_id,rating`, item ids resolved against `items`. Users are indexed
/// in order of first appearance.
pub fn parse_ratings(text: &str, items: &ItemSet, origin: &Path) -> Result<RatingsMatrix> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| parse_err(origin, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["user_id", "item_id", "rating"] {
        return Err(parse_err(origin, format!("expected header user_id,item_id,rating, found {}", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut users: Vec<String> = Vec::new();
    let mut user_index = std::collections::HashMap::new();
    let mut entries = Vec::new();
    for record in reader.deserialize::<RatingRow>() {
        let row = record.map_err(|e| parse_err(origin, e.to_string()))?;
        let line = entries.len() + 2;
        let item = items
            .index_of(&row.item_id)
            .ok_or_else(|| Error::validation(format!("{}:{line}: unknown item_id {}", origin.display(), row.item_id)))?;
        let user = *user_index.entry(row.user_id.clone()).or_insert_with(|| {
            users.push(row.user_id.clone());
            users.len() - 1
        });
        if !(row.rating.is_finite() && (0.0..=10.0).contains(&row.rating)) {
            return Err(Error::validation(format!("{}:{line}: rating {} outside [0, 10]", origin.display(), row.rating)));
        }
        entries.push(Rating { user, item, value: row.rating });
    }
    if entries.is_empty() {
        return Err(Error::validation(format!("{}: no ratings", origin.display())));
    }
    RatingsMatrix::new(users, items.items.iter().map(|l| l.id.clone()).collect(), entries)
        .map_err(|e| Error::validation(format!("{}: {e}", origin.display())))
}

pub fn load_ratings(path: &Path, items: &ItemSet) -> Result<RatingsMatrix> {
    parse_ratings(&read(path)?, items, path)
}

pub fn write_ratings(path: &Path, r: &RatingsMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["user_id", "item_id", "rating"]).map_err(csv_err)?;
    for e in r.entries() {
        w.write_record([&r.users()[e.user], &r.item_ids()[e.item], &e.value.to_string()]).map_err(csv_err)?;
    }
    write_atomic(path, &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
}

/// Returns CSV `date,<asset>,...` of daily net returns; dates are ISO `YYYY-MM-DD`.
pub fn parse_returns(text: &str, origin: &Path) -> Result<ReturnsPanel> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| parse_err(origin, e.to_string()))?.clone();
    if headers.get(0) != Some("date") || headers.len() < 2 {
        return Err(parse_err(origin, "expected header date,<asset>,..."));
    }
    let assets: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut dates = Vec::new();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| parse_err(origin, e.to_string()))?;
        let date = NaiveDate::parse_from_str(&record[0], "%Y-%m-%d")
            .map_err(|e| parse_err(origin, format!("line {line}: date {:?}: {e}", &record[0])))?;
        let row = record
            .iter()
            .skip(1)
            .zip(&assets)
            .map(|(v, a)| {
                v.parse::<f64>()
                    .map_err(|_| parse_err(origin, format!("line {line}: field {a}: {v:?} is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != assets.len() {
            return Err(parse_err(origin, format!("line {line}: expected {} values", assets.len())));
        }
        dates.push(date);
        rows.push(row);
    }
    ReturnsPanel::from_net_returns(assets, dates, rows)
        .map_err(|e| Error::validation(format!("{}: {e}", origin.display())))
}

pub fn load_returns(path: &Path) -> Result<ReturnsPanel> {
    parse_returns(&read(path)?, path)
}

pub fn write_returns(path: &Path, panel: &ReturnsPanel) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["date".to_string()];
    header.extend(panel.assets()[1..].iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (d, row) in panel.dates().iter().zip(panel.factors()) {
        let mut rec = vec![d.format("%Y-%m-%d").to_string()];
        rec.extend(row[1..].iter().map(|f| (f - 1.0).to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    write_atomic(path, &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
}

pub fn load_questionnaire(path: &Path, items: &ItemSet) -> Result<Questionnaire> {
    Questionnaire::from_file(&read_json::<QuestionnaireFile>(path)?, items)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    write_atomic(path, &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
}

#[derive(Serialize)]
struct RunRow<'a> {
    estimator: &'a str,
    #[serde(rename = "K")]
    k: usize,
    repetition: usize,
    distance: f64,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    estimator: &'a str,
    #[serde(rename = "K")]
    k: usize,
    mean: f64,
    stddev: f64,
}

/// `estimator,K,repetition,distance`
pub fn write_runs_csv(path: &Path, runs: &[&RunRecord]) -> Result<()> {
    let rows: Vec<RunRow> = runs
        .iter()
        .map(|r| RunRow { estimator: r.estimator.as_str(), k: r.k, repetition: r.repetition, distance: r.distance })
        .collect();
    write_csv(path, &rows)
}

/// `estimator,K,mean,stddev`
pub fn write_summary_csv(path: &Path, cells: &[&CellSummary]) -> Result<()> {
    let rows: Vec<SummaryRow> = cells
        .iter()
        .map(|c| SummaryRow { estimator: c.estimator.as_str(), k: c.k, mean: c.mean, stddev: c.stddev })
        .collect();
    write_csv(path, &rows)
}

#[derive(Serialize)]
struct WealthRow<'a> {
    date: String,
    estimator: &'a str,
    wealth: f64,
}

/// `date,estimator,wealth`
pub fn write_wealth_csv(path: &Path, curves: &[WealthCurve]) -> Result<()> {
    let rows: Vec<WealthRow> = curves
        .iter()
        .flat_map(|c| {
            c.points.iter().map(|p| WealthRow {
                date: p.date.format("%Y-%m-%d").to_string(),
                estimator: &c.estimator,
                wealth: p.wealth,
            })
        })
        .collect();
    write_csv(path, &rows)
}
