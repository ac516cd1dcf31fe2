//! Attack statistics and corruption-robustness metrics.

use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{AttackResult, EpisodeStatus};

pub const SEVERITIES: usize = 5;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no non-skipped results to summarize")]
    Empty,
    #[error("expected {SEVERITIES} severity entries, got {0}")]
    Arity(usize),
    #[error("error rate {value} out of [0, 1] ({context})")]
    OutOfRange { value: f64, context: String },
    #[error("malformed error matrix: {0}")]
    Parse(String),
    #[error("prediction and label counts differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

/// Correctly rounded sum of the values, independent of their order.
///
/// Shewchuk's partials: each partial is non-overlapping, so the final
/// top-down accumulation is exact until the last rounding.
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut kept = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }
    let Some(mut hi) = partials.pop() else {
        return 0.0;
    };
    let mut lo = 0.0;
    while let Some(y) = partials.pop() {
        let x = hi;
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    // Round-half-even correction when the remainder sits exactly halfway.
    if let Some(&next) = partials.last() {
        if (lo < 0.0 && next < 0.0) || (lo > 0.0 && next > 0.0) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}

/// Mean anchored at the minimum, so a constant input comes back unchanged.
fn mean(values: &[f64]) -> f64 {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    lo + exact_sum(values.iter().map(|v| v - lo)) / values.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub asr: f64,
    /// `None` when there are no successes.
    pub avg_steps: Option<f64>,
    pub avg_raw_queries: Option<f64>,
    pub l2_max: Option<f64>,
    pub l2_avg: Option<f64>,
    pub linf_max: Option<f64>,
    pub successes: usize,
    pub failures: usize,
    pub skips: usize,
}

/// Success rate over attempted episodes; every other statistic is taken
/// over successes only, using post-cleanup distances.
pub fn summarize(results: &[AttackResult]) -> Result<AttackSummary, MetricsError> {
    let count = |s| results.iter().filter(|r| r.status == s).count();
    let successes = count(EpisodeStatus::Success);
    let failures = count(EpisodeStatus::Failure);
    let skips = count(EpisodeStatus::Skipped);
    if successes + failures == 0 {
        return Err(MetricsError::Empty);
    }
    let won: Vec<&AttackResult> = results
        .iter()
        .filter(|r| r.status == EpisodeStatus::Success)
        .collect();
    let avg = |f: fn(&AttackResult) -> f64| {
        let v: Vec<f64> = won.iter().map(|r| f(r)).collect();
        (!v.is_empty()).then(|| mean(&v))
    };
    let max = |f: fn(&AttackResult) -> f64| won.iter().map(|r| f(r)).reduce(f64::max);
    Ok(AttackSummary {
        asr: successes as f64 / (successes + failures) as f64,
        avg_steps: avg(|r| r.steps as f64),
        avg_raw_queries: avg(|r| r.raw_queries as f64),
        l2_max: max(|r| r.final_l2),
        l2_avg: avg(|r| r.final_l2),
        linf_max: max(|r| r.final_linf),
        successes,
        failures,
        skips,
    })
}

impl AttackSummary {
    pub const CSV_HEADER: &'static str =
        "avg_q,avg_raw_queries,l2_max,l2_avg,linf,asr,successes,failures,skips";

    /// Header plus one row; empty cells where there were no successes.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{}\n{},{},{},{},{},{},{},{},{}\n",
            Self::CSV_HEADER,
            cell(self.avg_steps),
            cell(self.avg_raw_queries),
            cell(self.l2_max),
            cell(self.l2_avg),
            cell(self.linf_max),
            self.asr,
            self.successes,
            self.failures,
            self.skips
        )
    }
}

fn check_rate(value: f64, context: impl FnOnce() -> String) -> Result<(), MetricsError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(MetricsError::OutOfRange {
            value,
            context: context(),
        })
    }
}

/// Mean error over the five severities of one corruption.
pub fn uce(row: &[f64]) -> Result<f64, MetricsError> {
    if row.len() != SEVERITIES {
        return Err(MetricsError::Arity(row.len()));
    }
    for (s, &e) in row.iter().enumerate() {
        check_rate(e, || format!("severity {}", s + 1))?;
    }
    Ok(mean(row))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRow {
    pub corruption: String,
    pub errors: [f64; SEVERITIES],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionErrorMatrix {
    pub rows: Vec<CorruptionRow>,
    pub clean_error: f64,
}

impl CorruptionErrorMatrix {
    pub fn new(rows: Vec<CorruptionRow>, clean_error: f64) -> Result<Self, MetricsError> {
        check_rate(clean_error, || "clean error".into())?;
        for r in &rows {
            for (s, &e) in r.errors.iter().enumerate() {
                check_rate(e, || format!("{} s{}", r.corruption, s + 1))?;
            }
        }
        Ok(Self { rows, clean_error })
    }

    /// Reads CSV with header `corruption,s1,s2,s3,s4,s5`.
    pub fn from_csv(reader: impl Read, clean_error: f64) -> Result<Self, MetricsError> {
        let mut csv = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = csv
            .headers()
            .map_err(|e| MetricsError::Parse(e.to_string()))?
            .clone();
        let expected = ["corruption", "s1", "s2", "s3", "s4", "s5"];
        if header.iter().collect::<Vec<_>>() != expected {
            return Err(MetricsError::Parse(format!(
                "header must be {}, got {}",
                expected.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows = Vec::new();
        for (line, rec) in csv.records().enumerate() {
            let rec = rec.map_err(|e| MetricsError::Parse(e.to_string()))?;
            let mut errors = [0.0; SEVERITIES];
            for (s, slot) in errors.iter_mut().enumerate() {
                let cell = &rec[s + 1];
                *slot = cell.parse().map_err(|_| {
                    MetricsError::Parse(format!("row {}: bad number {cell:?}", line + 1))
                })?;
            }
            rows.push(CorruptionRow {
                corruption: rec[0].to_string(),
                errors,
            });
        }
        if rows.is_empty() {
            return Err(MetricsError::Parse("no corruption rows".into()));
        }
        Self::new(rows, clean_error)
    }
}

/// How the per-corruption errors are folded into mCE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MceMode {
    /// Mean of uCE over every corruption type.
    #[default]
    Mean,
    /// Plain sum of uCE over the first five corruption types.
    SumFirstFive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub uce: Vec<(String, f64)>,
    pub mce: f64,
    pub clean_error: f64,
    pub degradation: f64,
    pub mode: MceMode,
}

pub fn mce_and_degradation(
    matrix: &CorruptionErrorMatrix,
    mode: MceMode,
) -> Result<RobustnessReport, MetricsError> {
    if matrix.rows.is_empty() {
        return Err(MetricsError::Empty);
    }
    let uce: Vec<(String, f64)> = matrix
        .rows
        .iter()
        .map(|r| Ok((r.corruption.clone(), uce(&r.errors)?)))
        .collect::<Result<_, MetricsError>>()?;
    let values: Vec<f64> = uce.iter().map(|(_, v)| *v).collect();
    let mce = match mode {
        MceMode::Mean => mean(&values),
        MceMode::SumFirstFive => exact_sum(values.iter().take(5).copied()),
    };
    Ok(RobustnessReport {
        uce,
        mce,
        clean_error: matrix.clean_error,
        degradation: mce - matrix.clean_error,
        mode,
    })
}

/// Fraction of adversarial examples the model gets wrong.
pub fn adversarial_error(predicted: &[usize], labels: &[usize]) -> Result<f64, MetricsError> {
    if predicted.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(predicted.len(), labels.len()));
    }
    if predicted.is_empty() {
        return Err(MetricsError::Empty);
    }
    let wrong = predicted.iter().zip(labels).filter(|(p, l)| p != l).count();
    Ok(wrong as f64 / predicted.len() as f64)
}
