//! Monte-Carlo estimators over scenario batches: probability that a day sets
//! a new coincident peak (or lands in one of the top-n ranks), the peak-hour
//! histogram, and percentile thresholds of past daily maxima.
//!
//! Scenario daily maxima are taken over the batch's horizon hours only, so a
//! late-issued forecast cannot see morning peaks.

use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::calendar::ProgramYear;
use crate::error::{Error, Result};
use crate::scengen::ScenarioBatch;

/// One realized peak held by the running state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpEntry {
    pub value: f64,
    pub date: NaiveDate,
    pub hour: u8,
}

/// Top `n_peaks` realized daily maxima seen so far in a program year, at most
/// one per day, ordered by rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningCpState {
    pub program: String,
    pub year: i32,
    pub n_peaks: usize,
    pub entries: Vec<CpEntry>,
    /// Last day fed in, whether or not it entered the list.
    pub last_day: Option<NaiveDate>,
}

impl RunningCpState {
    pub fn new(program: &str, year: i32, n_peaks: usize) -> Self {
        RunningCpState {
            program: program.to_string(),
            year,
            n_peaks: n_peaks.max(1),
            entries: Vec::new(),
            last_day: None,
        }
    }

    /// Running levels CP*_1..CP*_n; ranks not yet filled are 0.
    pub fn levels(&self) -> Vec<f64> {
        (0..self.n_peaks)
            .map(|k| self.entries.get(k).map_or(0.0, |e| e.value))
            .collect()
    }

    pub fn level(&self, rank: usize) -> f64 {
        self.entries.get(rank - 1).map_or(0.0, |e| e.value)
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.n_peaks
    }

    pub fn contains(&self, day: NaiveDate) -> bool {
        self.entries.iter().any(|e| e.date == day)
    }

    /// Feeds one realized day given as its maximum and the hour it occurred.
    /// Equal values rank behind days already held.
    pub fn observe(&mut self, day: NaiveDate, value: f64, hour: u8) -> Result<()> {
        if let Some(last) = self.last_day {
            if day <= last {
                return Err(Error::RejectedDay {
                    date: day,
                    reason: format!("not after the last observed day {last}"),
                });
            }
        }
        if !value.is_finite() {
            return Err(Error::RejectedDay {
                date: day,
                reason: "daily maximum is not finite".into(),
            });
        }
        self.last_day = Some(day);
        let pos = self.entries.partition_point(|e| e.value >= value);
        if pos < self.n_peaks {
            self.entries.insert(
                pos,
                CpEntry {
                    value,
                    date: day,
                    hour,
                },
            );
            self.entries.truncate(self.n_peaks);
        }
        Ok(())
    }
}

/// Index and value of the largest entry; ties go to the earliest index.
pub fn argmax(values: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best
}

/// Adds one realized day to the state. `hourly` is indexed by clock hour
/// starting at 0; the day must be eligible in `program_year`.
pub fn update_running_cp(
    mut state: RunningCpState,
    day: NaiveDate,
    hourly_actuals: &[f64],
    program_year: &ProgramYear,
) -> Result<RunningCpState> {
    if !program_year.contains(day) {
        return Err(Error::RejectedDay {
            date: day,
            reason: format!("not an eligible day of program year {}", program_year.year),
        });
    }
    let (hour, value) = argmax(hourly_actuals).ok_or_else(|| Error::RejectedDay {
        date: day,
        reason: "no hourly values".into(),
    })?;
    state.observe(day, value, hour as u8)?;
    Ok(state)
}

/// Per-rank probabilities for one day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpDayEstimate {
    pub date: NaiveDate,
    pub probs: Vec<f64>,
    pub total: f64,
    pub k: usize,
    /// Levels the scenario maxima were compared with.
    pub levels: Vec<f64>,
    /// Percentile floor that went into the levels (0 when none).
    pub threshold: f64,
}

impl CpDayEstimate {
    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }
}

/// Per-hour probability of being the day's peak.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpHourEstimate {
    pub date: NaiveDate,
    pub hours: Vec<u8>,
    pub probs: Vec<f64>,
}

impl CpHourEstimate {
    /// Hour with the highest probability (earliest on ties).
    pub fn mode(&self) -> Option<u8> {
        argmax(&self.probs).map(|(j, _)| self.hours[j])
    }
}

/// Daily maximum of each scenario over the batch horizon.
pub fn scenario_maxima(batch: &ScenarioBatch) -> Result<Vec<f64>> {
    if batch.k() == 0 || batch.n_hours() == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(batch
        .paths
        .row_iter()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

fn check_after_state(batch: &ScenarioBatch, state: &RunningCpState) -> Result<()> {
    if let Some(e) = state.entries.iter().find(|e| e.date >= batch.day) {
        return Err(Error::Alignment(format!(
            "batch day {} is not after running peak day {}",
            batch.day, e.date
        )));
    }
    Ok(())
}

/// Fraction of scenarios whose maximum exceeds `level`, which defaults to the
/// current running peak.
pub fn prob_new_cp(
    batch: &ScenarioBatch,
    state: &RunningCpState,
    level: Option<f64>,
) -> Result<CpDayEstimate> {
    let level = level.unwrap_or_else(|| state.level(1));
    prob_rank_bands(batch, state, &[level])
}

/// Band frequencies of the scenario maxima: band 1 is `> levels[0]`, band k is
/// `(levels[k-1], levels[k-2]]`. Scenarios below the last level count nowhere.
pub fn prob_rank_bands(
    batch: &ScenarioBatch,
    state: &RunningCpState,
    levels: &[f64],
) -> Result<CpDayEstimate> {
    check_after_state(batch, state)?;
    let maxima = scenario_maxima(batch)?;
    let counts = band_counts(&maxima, levels)?;
    let k = maxima.len();
    let probs: Vec<f64> = counts.iter().map(|c| *c as f64 / k as f64).collect();
    Ok(CpDayEstimate {
        date: batch.day,
        total: probs.iter().sum::<f64>().min(1.0),
        probs,
        k,
        levels: levels.to_vec(),
        threshold: 0.0,
    })
}

/// Counts per band; `levels` must be non-increasing and not NaN.
pub fn band_counts(maxima: &[f64], levels: &[f64]) -> Result<Vec<usize>> {
    if levels.is_empty() {
        return Err(Error::Config("at least one level is required".into()));
    }
    if levels.iter().any(|l| l.is_nan()) || levels.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::Config(format!(
            "levels must be non-increasing, got {levels:?}"
        )));
    }
    let mut counts = vec![0usize; levels.len()];
    for &m in maxima {
        // First rank whose level the maximum exceeds.
        let band = levels.partition_point(|l| m <= *l);
        if band < levels.len() {
            counts[band] += 1;
        }
    }
    Ok(counts)
}

/// Per-hour frequency of being the scenario argmax, earliest hour on ties.
pub fn prob_peak_hour(batch: &ScenarioBatch) -> Result<CpHourEstimate> {
    if batch.k() == 0 || batch.n_hours() == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut counts = vec![0usize; batch.n_hours()];
    for row in batch.paths.row_iter() {
        let r: Vec<f64> = row.iter().copied().collect();
        if let Some((j, _)) = argmax(&r) {
            counts[j] += 1;
        }
    }
    let k = batch.k() as f64;
    Ok(CpHourEstimate {
        date: batch.day,
        hours: batch.hours.clone(),
        probs: counts.iter().map(|c| *c as f64 / k).collect(),
    })
}

/// Percentile of past daily maxima, `pct` in [0, 100], with linear
/// interpolation between order statistics at position `(n-1)·pct/100`.
pub fn percentile_threshold(history: &[f64], pct: f64) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::InsufficientData(
            "no daily maxima before the current year".into(),
        ));
    }
    if !(0.0..=100.0).contains(&pct) {
        return Err(Error::Config(format!("percentile {pct} outside [0, 100]")));
    }
    if history.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("daily maxima must be finite".into()));
    }
    let mut x = history.to_vec();
    x.sort_by(f64::total_cmp);
    let pos = (x.len() - 1) as f64 * pct / 100.0;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    Ok(x[lo] + w * (x[hi] - x[lo]))
}

/// CSV rows `date,prob_1..prob_n,total`.
pub fn write_day_estimates_csv<W: Write>(w: W, rows: &[CpDayEstimate]) -> Result<()> {
    let n = rows.iter().map(|r| r.probs.len()).max().unwrap_or(1);
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["date".to_string()];
    header.extend((1..=n).map(|k| format!("prob_{k}")));
    header.push("total".into());
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.date.to_string()];
        rec.extend((0..n).map(|k| r.probs.get(k).copied().unwrap_or(0.0).to_string()));
        rec.push(r.total.to_string());
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// CSV rows `date,hour,prob`.
pub fn write_hour_estimates_csv<W: Write>(w: W, rows: &[CpHourEstimate]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["date", "hour", "prob"])?;
    for r in rows {
        for (h, p) in r.hours.iter().zip(&r.probs) {
            out.write_record([r.date.to_string(), h.to_string(), p.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}
