//! Hourly load series: CSV ingestion, validation, forecast vintages and the
//! deviation matrices the marginal models are trained on.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HOURS: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeriesKind {
    Actual,
    Forecast,
}

impl fmt::Display for SeriesKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SeriesKind::Actual => "actual",
            SeriesKind::Forecast => "forecast",
        })
    }
}

impl FromStr for SeriesKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "actual" => Ok(SeriesKind::Actual),
            "forecast" => Ok(SeriesKind::Forecast),
            other => Err(Error::Config(format!("unknown series kind `{other}`"))),
        }
    }
}

/// Hourly MW values of one zone, keyed by (date, hour 0-23).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourlyLoadSeries {
    pub zone_id: String,
    pub kind: SeriesKind,
    points: BTreeMap<(NaiveDate, u8), f64>,
}

impl HourlyLoadSeries {
    pub fn new(zone_id: impl Into<String>, kind: SeriesKind) -> Self {
        HourlyLoadSeries {
            zone_id: zone_id.into(),
            kind,
            points: BTreeMap::new(),
        }
    }

    /// Inserts one point. Loads must be finite and strictly positive and keys unique.
    pub fn insert(&mut self, date: NaiveDate, hour: u8, mw: f64) -> Result<()> {
        self.insert_at_row(date, hour, mw, 0)
    }

    fn insert_at_row(&mut self, date: NaiveDate, hour: u8, mw: f64, row: usize) -> Result<()> {
        if hour as usize >= HOURS {
            return Err(Error::Validation {
                row,
                msg: format!("hour {hour} out of range"),
            });
        }
        if !(mw.is_finite() && mw > 0.0) {
            return Err(Error::Validation {
                row,
                msg: format!("non-positive load {mw}"),
            });
        }
        if self.points.contains_key(&(date, hour)) {
            return Err(Error::DuplicateKey { date, hour, row });
        }
        self.points.insert((date, hour), mw);
        Ok(())
    }

    /// Builds a series from whole days of 24 values.
    pub fn from_days<I>(zone_id: &str, kind: SeriesKind, days: I) -> Result<Self>
    where
        I: IntoIterator<Item = (NaiveDate, Vec<f64>)>,
    {
        let mut s = HourlyLoadSeries::new(zone_id, kind);
        for (date, values) in days {
            for (h, v) in values.into_iter().enumerate() {
                s.insert(date, h as u8, v)?;
            }
        }
        Ok(s)
    }

    pub fn get(&self, date: NaiveDate, hour: u8) -> Option<f64> {
        self.points.get(&(date, hour)).copied()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> impl Iterator<Item = ((NaiveDate, u8), f64)> + '_ {
        self.points.iter().map(|(k, v)| (*k, *v))
    }

    pub fn dates(&self) -> BTreeSet<NaiveDate> {
        self.points.keys().map(|(d, _)| *d).collect()
    }

    pub fn first_date(&self) -> Option<NaiveDate> {
        self.points.keys().next().map(|(d, _)| *d)
    }

    pub fn last_date(&self) -> Option<NaiveDate> {
        self.points.keys().next_back().map(|(d, _)| *d)
    }

    /// Values for `hours` of `date`, or `None` if any of them is missing.
    pub fn day_values(&self, date: NaiveDate, hours: &[u8]) -> Option<Vec<f64>> {
        hours.iter().map(|&h| self.get(date, h)).collect()
    }

    /// Dates between the first and last observation with at least one missing hour.
    pub fn gaps(&self) -> Vec<NaiveDate> {
        let (Some(first), Some(last)) = (self.first_date(), self.last_date()) else {
            return Vec::new();
        };
        first
            .iter_days()
            .take_while(|d| *d <= last)
            .filter(|d| (0..HOURS as u8).any(|h| !self.points.contains_key(&(*d, h))))
            .collect()
    }

    /// Missing (date, hour) keys between the first and last observation.
    pub fn missing_hours(&self) -> Vec<(NaiveDate, u8)> {
        let mut out = Vec::new();
        for d in self.gaps() {
            for h in 0..HOURS as u8 {
                if !self.points.contains_key(&(d, h)) {
                    out.push((d, h));
                }
            }
        }
        out
    }
}

/// A forecast issue time and the first target-day hour it covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastVintage {
    pub label: String,
    /// Issue time in hours relative to midnight of the target day.
    pub issue_offset_hours: f64,
    pub horizon_start: u8,
}

impl ForecastVintage {
    pub fn new(label: &str, issue_offset_hours: f64, horizon_start: u8) -> Result<Self> {
        if horizon_start as usize >= HOURS {
            return Err(Error::Config(format!(
                "horizon start {horizon_start} out of range"
            )));
        }
        Ok(ForecastVintage {
            label: label.to_string(),
            issue_offset_hours,
            horizon_start,
        })
    }

    /// Full-day forecast issued the day before (NYISO's noon forecast).
    pub fn day_ahead(label: &str) -> Self {
        ForecastVintage {
            label: label.to_string(),
            issue_offset_hours: -12.0,
            horizon_start: 0,
        }
    }

    /// The four daily PJM vintages: `23`, `05`, `11`, `17`.
    pub fn pjm(label: &str) -> Result<Self> {
        let (offset, hs) = match label {
            "23" => (-0.25, 0),
            "05" | "5" => (5.75, 6),
            "11" => (11.75, 12),
            "17" => (17.75, 18),
            _ => return Err(Error::Config(format!("unknown PJM vintage `{label}`"))),
        };
        ForecastVintage::new(label, offset, hs)
    }

    /// Hours `h_s..=23` covered after truncation at the end of the day.
    pub fn hours(&self) -> Vec<u8> {
        (self.horizon_start..HOURS as u8).collect()
    }

    pub fn n_hours(&self) -> usize {
        HOURS - self.horizon_start as usize
    }
}

/// How repeated local hours are handled when reading wall-clock timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DstPolicy {
    /// Every repeated key is an error.
    Strict,
    /// US Eastern/Central style local time: the repeated 01:00 hour on the
    /// first Sunday of November keeps its first occurrence; the skipped
    /// spring-forward hour is simply a gap.
    #[default]
    UsLocalKeepFirst,
}

/// First Sunday of November, the US fall-back date since 2007.
fn us_fall_back(year: i32) -> NaiveDate {
    let nov1 = NaiveDate::from_ymd_opt(year, 11, 1).expect("valid date");
    let offset = (7 - nov1.weekday().num_days_from_sunday()) % 7;
    nov1 + chrono::Days::new(offset as u64)
}

/// Column mapping for load CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    /// Single timestamp column (date and time).
    pub timestamp: Option<String>,
    /// Alternatively, separate date and hour columns.
    pub date: Option<String>,
    pub hour: Option<String>,
    pub value: String,
    /// chrono format for `timestamp` / `date`; common formats are tried when unset.
    pub format: Option<String>,
    /// Hour column counts 1..24 (hour ending) instead of 0..23.
    pub hour_ending: bool,
    pub zone_column: Option<String>,
    pub kind_column: Option<String>,
    pub vintage_column: Option<String>,
    /// Keep only rows whose vintage column equals this label.
    pub vintage: Option<String>,
    pub dst: DstPolicy,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema::canonical()
    }
}

impl CsvSchema {
    /// `zone,kind,vintage,date,hour,value`
    pub fn canonical() -> Self {
        CsvSchema {
            timestamp: None,
            date: Some("date".into()),
            hour: Some("hour".into()),
            value: "value".into(),
            format: Some("%Y-%m-%d".into()),
            hour_ending: false,
            zone_column: Some("zone".into()),
            kind_column: Some("kind".into()),
            vintage_column: Some("vintage".into()),
            vintage: None,
            dst: DstPolicy::Strict,
        }
    }

    pub fn timestamp(ts_col: &str, value_col: &str) -> Self {
        CsvSchema {
            timestamp: Some(ts_col.into()),
            date: None,
            hour: None,
            value: value_col.into(),
            format: None,
            hour_ending: false,
            zone_column: None,
            kind_column: None,
            vintage_column: None,
            vintage: None,
            dst: DstPolicy::UsLocalKeepFirst,
        }
    }

    pub fn with_vintage(mut self, label: &str) -> Self {
        self.vintage = Some(label.to_string());
        self
    }
}

const DATETIME_FORMATS: &[&str] = &[
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%dT%H:%M",
    "%m/%d/%Y %I:%M:%S %p",
    "%m/%d/%Y %H:%M:%S",
    "%m/%d/%Y %H:%M",
];
const DATE_FORMATS: &[&str] = &["%Y-%m-%d", "%m/%d/%Y", "%Y%m%d"];

fn parse_datetime(s: &str, fmt: Option<&str>, row: usize) -> Result<(NaiveDate, u8)> {
    let s = s.trim();
    let parsed = match fmt {
        Some(f) => NaiveDateTime::parse_from_str(s, f).ok(),
        None => DATETIME_FORMATS
            .iter()
            .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok()),
    };
    let ts = parsed.ok_or_else(|| Error::Parse {
        row,
        msg: format!("unparseable timestamp `{s}`"),
    })?;
    if ts.minute() != 0 || ts.second() != 0 {
        return Err(Error::Parse {
            row,
            msg: format!("timestamp `{s}` is not on the hour"),
        });
    }
    Ok((ts.date(), ts.hour() as u8))
}

fn parse_date(s: &str, fmt: Option<&str>, row: usize) -> Result<NaiveDate> {
    let s = s.trim();
    let parsed = match fmt {
        Some(f) => NaiveDate::parse_from_str(s, f).ok(),
        None => DATE_FORMATS
            .iter()
            .find_map(|f| NaiveDate::parse_from_str(s, f).ok()),
    };
    parsed.ok_or_else(|| Error::Parse {
        row,
        msg: format!("unparseable date `{s}`"),
    })
}

/// Reads a load series from any CSV reader.
pub fn read_load_csv<R: Read>(
    reader: R,
    schema: &CsvSchema,
    zone_id: &str,
    kind: SeriesKind,
) -> Result<HourlyLoadSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Config(format!("column `{name}` not found")))
    };
    let opt_col =
        |name: &Option<String>| -> Result<Option<usize>> { name.as_deref().map(col).transpose() };

    let value_col = col(&schema.value)?;
    let ts_col = opt_col(&schema.timestamp)?;
    let (date_col, hour_col) = match ts_col {
        Some(_) => (None, None),
        None => {
            let d = opt_col(&schema.date)?
                .ok_or_else(|| Error::Config("schema needs `timestamp` or `date`+`hour`".into()))?;
            let h = opt_col(&schema.hour)?
                .ok_or_else(|| Error::Config("schema needs an `hour` column".into()))?;
            (Some(d), Some(h))
        }
    };
    let zone_col = opt_col(&schema.zone_column)?;
    let kind_col = opt_col(&schema.kind_column)?;
    let vintage_col = opt_col(&schema.vintage_column)?;
    if schema.vintage.is_some() && vintage_col.is_none() {
        return Err(Error::Config(
            "vintage filter set without a vintage column".into(),
        ));
    }

    let mut series = HourlyLoadSeries::new(zone_id, kind);
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        // Header is line 1.
        let row = i + 2;
        if let Some(c) = zone_col {
            if !record[c].eq_ignore_ascii_case(zone_id) {
                continue;
            }
        }
        if let Some(c) = kind_col {
            if record[c].parse::<SeriesKind>()? != kind {
                continue;
            }
        }
        if let (Some(c), Some(want)) = (vintage_col, &schema.vintage) {
            if record[c] != *want {
                continue;
            }
        }

        let (date, hour) = match (ts_col, date_col, hour_col) {
            (Some(c), _, _) => parse_datetime(&record[c], schema.format.as_deref(), row)?,
            (None, Some(dc), Some(hc)) => {
                let date = parse_date(&record[dc], schema.format.as_deref(), row)?;
                let h: i64 = record[hc].trim().parse().map_err(|_| Error::Parse {
                    row,
                    msg: format!("bad hour `{}`", &record[hc]),
                })?;
                let h = if schema.hour_ending { h - 1 } else { h };
                if !(0..HOURS as i64).contains(&h) {
                    return Err(Error::Parse {
                        row,
                        msg: format!("hour {h} out of range"),
                    });
                }
                (date, h as u8)
            }
            _ => unreachable!("schema columns resolved above"),
        };

        let text = record[value_col].trim().replace(',', "");
        let mw: f64 = text.parse().map_err(|_| Error::Parse {
            row,
            msg: format!("bad load value `{}`", &record[value_col]),
        })?;

        if series.points.contains_key(&(date, hour))
            && schema.dst == DstPolicy::UsLocalKeepFirst
            && hour == 1
            && date == us_fall_back(date.year())
        {
            continue;
        }
        series.insert_at_row(date, hour, mw, row)?;
    }
    Ok(series)
}

/// Reads and validates a load CSV file.
pub fn parse_load_csv(
    path: &Path,
    schema: &CsvSchema,
    zone_id: &str,
    kind: SeriesKind,
) -> Result<HourlyLoadSeries> {
    let file = std::fs::File::open(path)?;
    read_load_csv(file, schema, zone_id, kind)
}

/// Writes series in the canonical `zone,kind,vintage,date,hour,value` layout.
pub fn write_canonical_csv<W: Write>(
    series: &[(&HourlyLoadSeries, &str)],
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["zone", "kind", "vintage", "date", "hour", "value"])?;
    for (s, vintage) in series {
        for ((date, hour), v) in s.points() {
            w.write_record([
                s.zone_id.clone(),
                s.kind.to_string(),
                vintage.to_string(),
                date.to_string(),
                hour.to_string(),
                v.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Signed actual-minus-forecast values over the forecast horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationSeries {
    pub zone_id: String,
    pub vintage: String,
    pub horizon_start: u8,
    points: BTreeMap<(NaiveDate, u8), f64>,
}

impl DeviationSeries {
    pub fn get(&self, date: NaiveDate, hour: u8) -> Option<f64> {
        self.points.get(&(date, hour)).copied()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn hours(&self) -> Vec<u8> {
        (self.horizon_start..HOURS as u8).collect()
    }

    pub fn points(&self) -> impl Iterator<Item = ((NaiveDate, u8), f64)> + '_ {
        self.points.iter().map(|(k, v)| (*k, *v))
    }
}

/// Pointwise `actual - forecast` on the shared keys with hour >= `h_s`.
pub fn compute_deviations(
    actual: &HourlyLoadSeries,
    forecast: &HourlyLoadSeries,
    vintage: &ForecastVintage,
) -> Result<DeviationSeries> {
    if actual.zone_id != forecast.zone_id {
        return Err(Error::Alignment(format!(
            "zone mismatch: actual `{}` vs forecast `{}`",
            actual.zone_id, forecast.zone_id
        )));
    }
    let points: BTreeMap<_, _> = forecast
        .points
        .iter()
        .filter(|((_, h), _)| *h >= vintage.horizon_start)
        .filter_map(|(k, f)| actual.points.get(k).map(|a| (*k, a - f)))
        .collect();
    if points.is_empty() {
        return Err(Error::Alignment(format!(
            "no overlapping hours between actual and forecast for zone `{}`",
            actual.zone_id
        )));
    }
    Ok(DeviationSeries {
        zone_id: actual.zone_id.clone(),
        vintage: vintage.label.clone(),
        horizon_start: vintage.horizon_start,
        points,
    })
}

/// Days-by-hours training matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DayMatrix {
    pub days: Vec<NaiveDate>,
    pub hours: Vec<u8>,
    pub values: DMatrix<f64>,
}

impl DayMatrix {
    pub fn n_days(&self) -> usize {
        self.days.len()
    }

    pub fn n_hours(&self) -> usize {
        self.hours.len()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.column(j).iter().copied().collect()
    }

    /// Keeps only the listed days (which must be present), preserving order.
    pub fn select_days(&self, keep: &BTreeSet<NaiveDate>) -> DayMatrix {
        let rows: Vec<usize> = (0..self.days.len())
            .filter(|&i| keep.contains(&self.days[i]))
            .collect();
        DayMatrix {
            days: rows.iter().map(|&i| self.days[i]).collect(),
            hours: self.hours.clone(),
            values: self.values.select_rows(rows.iter()),
        }
    }
}

fn day_matrix<F>(
    lookup: F,
    hours: &[u8],
    candidates: impl Iterator<Item = NaiveDate>,
    cutoff: NaiveDate,
    eligible: &BTreeSet<NaiveDate>,
    what: &str,
) -> Result<DayMatrix>
where
    F: Fn(NaiveDate, u8) -> Option<f64>,
{
    let mut days = Vec::new();
    let mut data = Vec::new();
    for day in candidates.filter(|d| *d < cutoff && eligible.contains(d)) {
        let row: Option<Vec<f64>> = hours.iter().map(|&h| lookup(day, h)).collect();
        if let Some(row) = row {
            days.push(day);
            data.extend(row);
        }
    }
    if days.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no complete eligible {what} day before {cutoff}"
        )));
    }
    let values = DMatrix::from_row_slice(days.len(), hours.len(), &data);
    Ok(DayMatrix {
        days,
        hours: hours.to_vec(),
        values,
    })
}

/// Deviation matrix over eligible days strictly before `cutoff`; days missing
/// any horizon hour are dropped.
pub fn build_deviation_matrix(
    dev: &DeviationSeries,
    cutoff: NaiveDate,
    eligible: &BTreeSet<NaiveDate>,
) -> Result<DayMatrix> {
    let candidates: BTreeSet<NaiveDate> = dev.points.keys().map(|(d, _)| *d).collect();
    day_matrix(
        |d, h| dev.get(d, h),
        &dev.hours(),
        candidates.into_iter(),
        cutoff,
        eligible,
        "deviation",
    )
}

/// Actual-load matrix over eligible days strictly before `cutoff`.
pub fn build_load_matrix(
    series: &HourlyLoadSeries,
    hours: &[u8],
    cutoff: NaiveDate,
    eligible: &BTreeSet<NaiveDate>,
) -> Result<DayMatrix> {
    day_matrix(
        |d, h| series.get(d, h),
        hours,
        series.dates().into_iter(),
        cutoff,
        eligible,
        "load",
    )
}

/// Restricts several matrices to the days present in all of them.
pub fn align_days(mats: &[&DayMatrix]) -> Result<Vec<DayMatrix>> {
    let Some(first) = mats.first() else {
        return Ok(Vec::new());
    };
    let mut common: BTreeSet<NaiveDate> = first.days.iter().copied().collect();
    for m in &mats[1..] {
        let days: BTreeSet<NaiveDate> = m.days.iter().copied().collect();
        common = common.intersection(&days).copied().collect();
    }
    if common.is_empty() {
        return Err(Error::Alignment("matrices share no days".into()));
    }
    Ok(mats.iter().map(|m| m.select_days(&common)).collect())
}
