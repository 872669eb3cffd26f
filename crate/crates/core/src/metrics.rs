//! Evaluation metrics, the high-frequency period and the trade-off score.
//!
//! Predictions and truths are flat `steps x cells` arrays; `mask` marks the
//! valid cells of one step and applies to every step.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CityDataset, SampleSet, Split, HOURS_PER_WEEK};
use crate::error::{Error, Result};

/// Fraction of hour-of-week buckets kept as the high-frequency period.
pub const HIGH_FREQ_QUANTILE: f64 = 0.25;
pub const TRADEOFF_WEIGHTS: (f64, f64, f64) = (0.5, 0.25, 0.25);
pub const HOTSPOT_RULE: &str = "truth>0, top-|S_true| valid cells by prediction";
pub const HIGH_FREQ_RULE: &str = "top 25% hour-of-week buckets by train-split totals";

fn check(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<usize> {
    let cells = mask.len();
    if cells == 0 || pred.len() != truth.len() || pred.len() % cells != 0 {
        return Err(Error::Metrics(format!(
            "prediction ({}) and truth ({}) do not tile a mask of {cells} cells",
            pred.len(),
            truth.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Metrics("mask has no valid cell".into()));
    }
    Ok(pred.len() / cells)
}

fn valid<'a>(mask: &'a [bool], steps: usize) -> impl Iterator<Item = usize> + 'a {
    let cells = mask.len();
    (0..steps * cells).filter(move |k| mask[k % cells])
}

/// Root mean squared error over valid cells of every step.
pub fn rmse(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<f64> {
    let steps = check(pred, truth, mask)?;
    if steps == 0 {
        return Err(Error::Metrics("no steps to score".into()));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for k in valid(mask, steps) {
        sum += (pred[k] - truth[k]).powi(2);
        count += 1;
    }
    Ok((sum / count as f64).sqrt())
}

/// Valid cells of one step ordered by descending prediction, ties by index.
fn ranking(pred: &[f64], mask: &[bool]) -> Vec<usize> {
    let mut cells: Vec<usize> = (0..mask.len()).filter(|&c| mask[c]).collect();
    cells.sort_by(|&a, &b| pred[b].total_cmp(&pred[a]).then(a.cmp(&b)));
    cells
}

/// Mean share (in percent) of true hotspots found among the top-|S_true|
/// predicted cells, over steps with at least one hotspot. `None` when no
/// step has a hotspot.
pub fn recall_at_hotspots(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<Option<f64>> {
    let steps = check(pred, truth, mask)?;
    let cells = mask.len();
    let (mut total, mut counted) = (0.0, 0usize);
    for s in 0..steps {
        let (p, t) = (&pred[s * cells..(s + 1) * cells], &truth[s * cells..(s + 1) * cells]);
        let hot = (0..cells).filter(|&c| mask[c] && t[c] > 0.0).count();
        if hot == 0 {
            continue;
        }
        let found = ranking(p, mask).into_iter().take(hot).filter(|&c| t[c] > 0.0).count();
        total += found as f64 / hot as f64;
        counted += 1;
    }
    Ok((counted > 0).then(|| 100.0 * total / counted as f64))
}

/// Mean over steps of the average precision of the prediction ranking,
/// with hotspots as the relevant cells.
pub fn mean_average_precision(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<Option<f64>> {
    let steps = check(pred, truth, mask)?;
    let cells = mask.len();
    let (mut total, mut counted) = (0.0, 0usize);
    for s in 0..steps {
        let (p, t) = (&pred[s * cells..(s + 1) * cells], &truth[s * cells..(s + 1) * cells]);
        let relevant = (0..cells).filter(|&c| mask[c] && t[c] > 0.0).count();
        if relevant == 0 {
            continue;
        }
        let (mut hits, mut ap) = (0usize, 0.0);
        for (rank, c) in ranking(p, mask).into_iter().enumerate() {
            if t[c] > 0.0 {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        total += ap / relevant as f64;
        counted += 1;
    }
    Ok((counted > 0).then(|| total / counted as f64))
}

/// `a * rmse + b * t_forward + c * t_batch`.
pub fn tradeoff_score(rmse: f64, t_forward: f64, t_batch: f64, weights: (f64, f64, f64)) -> Result<f64> {
    let (a, b, c) = weights;
    if a < 0.0 || b < 0.0 || c < 0.0 {
        return Err(Error::Metrics(format!("negative trade-off weights {weights:?}")));
    }
    Ok(a * rmse + b * t_forward + c * t_batch)
}

/// Maps timings linearly so the fastest becomes 1 and the slowest 10. Equal
/// timings all map to 1.
pub fn normalize_times(times: &[f64]) -> Vec<f64> {
    let lo = times.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    times
        .iter()
        .map(|&t| if hi > lo { 1.0 + 9.0 * (t - lo) / (hi - lo) } else { 1.0 })
        .collect()
}

/// Hour-of-week buckets forming the high-frequency period, from per-bucket
/// historical totals. Ties are broken by lower bucket index.
pub fn high_frequency_buckets(totals: &[f64; HOURS_PER_WEEK]) -> [bool; HOURS_PER_WEEK] {
    let keep = (HIGH_FREQ_QUANTILE * HOURS_PER_WEEK as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..HOURS_PER_WEEK).collect();
    order.sort_by(|&a, &b| totals[b].total_cmp(&totals[a]).then(a.cmp(&b)));
    let mut out = [false; HOURS_PER_WEEK];
    for &b in &order[..keep] {
        out[b] = true;
    }
    out
}

/// Per-bucket totals of the target steps of the training windows.
pub fn train_bucket_totals(ds: &CityDataset, samples: &SampleSet) -> Result<[f64; HOURS_PER_WEEK]> {
    let train = samples.indices(Split::Train);
    if train.len() < HOURS_PER_WEEK {
        return Err(Error::Metrics(format!(
            "{}: {} training steps do not cover one week of history",
            ds.name,
            train.len()
        )));
    }
    let step_totals = ds.totals();
    let mut totals = [0.0; HOURS_PER_WEEK];
    for i in train {
        let step = samples.target_index(i);
        totals[ds.hour_of_week(step)] += step_totals[step];
    }
    Ok(totals)
}

/// Test windows whose target hour falls in the high-frequency period.
pub fn high_frequency_filter(ds: &CityDataset, samples: &SampleSet) -> Result<Vec<usize>> {
    let buckets = high_frequency_buckets(&train_bucket_totals(ds, samples)?);
    Ok(samples
        .indices(Split::Test)
        .filter(|&i| buckets[ds.hour_of_week(samples.target_index(i))])
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Period {
    #[default]
    AllDay,
    HighFreq,
}

impl Period {
    pub fn name(self) -> &'static str {
        match self {
            Period::AllDay => "all-day",
            Period::HighFreq => "high-freq",
        }
    }
}

impl std::str::FromStr for Period {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-day" => Ok(Period::AllDay),
            "high-freq" => Ok(Period::HighFreq),
            other => Err(Error::Metrics(format!(
                "unknown period `{other}`; expected all-day or high-freq"
            ))),
        }
    }
}

/// One row of an evaluation: a city, a period and a noise level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub city: String,
    pub period: Period,
    pub noise_level: f64,
    pub steps: usize,
    pub rmse: f64,
    pub recall_pct: Option<f64>,
    pub map: Option<f64>,
    pub t_forward: Option<f64>,
    pub t_batch: Option<f64>,
    pub hotspot_rule: String,
    pub high_freq_rule: String,
}

impl MetricReport {
    pub fn compute(
        city: &str,
        period: Period,
        noise_level: f64,
        pred: &[f64],
        truth: &[f64],
        mask: &[bool],
    ) -> Result<Self> {
        Ok(MetricReport {
            city: city.to_string(),
            period,
            noise_level,
            steps: pred.len() / mask.len().max(1),
            rmse: rmse(pred, truth, mask)?,
            recall_pct: recall_at_hotspots(pred, truth, mask)?,
            map: mean_average_precision(pred, truth, mask)?,
            t_forward: None,
            t_batch: None,
            hotspot_rule: HOTSPOT_RULE.to_string(),
            high_freq_rule: HIGH_FREQ_RULE.to_string(),
        })
    }
}

pub fn write_reports_csv(reports: &[MetricReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in reports {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_reports_csv(path: &Path) -> Result<Vec<MetricReport>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

pub fn write_reports_json(reports: &[MetricReport], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(reports).expect("reports serialize");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Metrics(format!("{}: {e}", path.display()))
}
