//! Alert strategies and the expanding-window backtest.
//!
//! A strategy combines a threshold method (none, or a percentile of past
//! daily maxima), a scaling `alpha` of the running peaks, and a signal type.
//! Named strategies follow the `<threshold><version><signal>` pattern, e.g.
//! `1aS` is no threshold, alpha 1, simple signal.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::sync::Mutex;

use chrono::{Datelike, Days, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::calendar::{eligible_days, eligible_days_span, CpProgramRule};
use crate::error::{Error, Result};
use crate::estimators::{
    argmax, percentile_threshold, prob_peak_hour, prob_rank_bands, update_running_cp,
    CpDayEstimate, CpHourEstimate, RunningCpState,
};
use crate::ingest::{DayMatrix, ForecastVintage, HourlyLoadSeries, HOURS};
use crate::scengen::{
    derive_seed, fit_conditional, fit_unconditional, hash_str, simulate_conditional,
    simulate_unconditional, EngineConfig, EngineLabel, FittedEngine, ScenarioBatch,
};

/// Color floor for ISO/RTO programs.
pub const ISO_COLOR_FLOOR: f64 = 0.2;
/// Color floor for utility programs.
pub const UTILITY_COLOR_FLOOR: f64 = 0.4;
/// Simple signal fires at or above this total probability.
pub const SIMPLE_LEVEL: f64 = 0.5;
/// Rank errors are clipped here.
pub const MAX_RANK_ERROR: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMethod {
    /// `1`: running peaks only.
    None,
    /// `2`: 95th percentile of past daily maxima.
    Pctl95,
    /// `3`: 90th percentile.
    Pctl90,
    /// `4`: 80th percentile.
    Pctl80,
}

impl ThresholdMethod {
    pub fn percentile(self) -> Option<f64> {
        match self {
            ThresholdMethod::None => None,
            ThresholdMethod::Pctl95 => Some(95.0),
            ThresholdMethod::Pctl90 => Some(90.0),
            ThresholdMethod::Pctl80 => Some(80.0),
        }
    }

    fn code(self) -> char {
        match self {
            ThresholdMethod::None => '1',
            ThresholdMethod::Pctl95 => '2',
            ThresholdMethod::Pctl90 => '3',
            ThresholdMethod::Pctl80 => '4',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Signal {
    Simple,
    Color,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Color {
    R,
    O,
    Y,
    G,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::R, Color::O, Color::Y, Color::G];

    /// Band of a total probability: R above 0.8, O above 0.6, Y above 0.4,
    /// G otherwise.
    pub fn of(total: f64) -> Color {
        if total > 0.8 {
            Color::R
        } else if total > 0.6 {
            Color::O
        } else if total > 0.4 {
            Color::Y
        } else {
            Color::G
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub threshold: ThresholdMethod,
    pub alpha: f64,
    pub signal: Signal,
    pub color_floor: f64,
}

impl StrategySpec {
    /// Parses names like `2aS` or `3dC`. Versions a–d map to alpha 1, 0.975,
    /// 0.95 and 0.90.
    pub fn parse(name: &str, color_floor: f64) -> Result<StrategySpec> {
        let bad = || {
            Error::Config(format!(
                "strategy `{name}` is not <threshold 1-4><version a-d><signal S|C>"
            ))
        };
        let c: Vec<char> = name.trim().chars().collect();
        if c.len() != 3 {
            return Err(bad());
        }
        let threshold = match c[0] {
            '1' => ThresholdMethod::None,
            '2' => ThresholdMethod::Pctl95,
            '3' => ThresholdMethod::Pctl90,
            '4' => ThresholdMethod::Pctl80,
            _ => return Err(bad()),
        };
        let alpha = match c[1].to_ascii_lowercase() {
            'a' => 1.0,
            'b' => 0.975,
            'c' => 0.95,
            'd' => 0.90,
            _ => return Err(bad()),
        };
        let signal = match c[2].to_ascii_uppercase() {
            'S' => Signal::Simple,
            'C' => Signal::Color,
            _ => return Err(bad()),
        };
        let spec = StrategySpec {
            threshold,
            alpha,
            signal,
            color_floor,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!(
                "alpha {} outside (0, 1]",
                self.alpha
            )));
        }
        if self.color_floor.is_nan() || self.color_floor < 0.0 {
            return Err(Error::Config("color floor must be non-negative".into()));
        }
        Ok(())
    }

    /// Name in the `2aS` pattern; alphas outside the four versions print as
    /// `1(0.93)S`.
    pub fn name(&self) -> String {
        let version = [(1.0, 'a'), (0.975, 'b'), (0.95, 'c'), (0.90, 'd')]
            .iter()
            .find(|(a, _)| *a == self.alpha)
            .map_or_else(|| format!("({})", self.alpha), |(_, v)| v.to_string());
        let signal = match self.signal {
            Signal::Simple => 'S',
            Signal::Color => 'C',
        };
        format!("{}{version}{signal}", self.threshold.code())
    }
}

/// Color floor used for a program: ISO and RTO programs alert from 0.2,
/// utility programs from 0.4.
pub fn default_color_floor(rule: &CpProgramRule) -> f64 {
    match rule.system.to_ascii_uppercase().as_str() {
        "ISO" | "RTO" => ISO_COLOR_FLOOR,
        _ => UTILITY_COLOR_FLOOR,
    }
}

/// `max(alpha · CP*_k, threshold)` for each rank.
pub fn modified_cp_levels(state: &RunningCpState, spec: &StrategySpec, threshold: f64) -> Vec<f64> {
    state
        .levels()
        .into_iter()
        .map(|cp| (spec.alpha * cp).max(threshold))
        .collect()
}

/// One evaluated day of one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertRecord {
    pub date: NaiveDate,
    pub probs: Vec<f64>,
    pub prob_total: f64,
    pub fired: bool,
    pub color: Option<Color>,
    pub was_true_cp: bool,
    /// Set on true CP days only.
    pub rank_error: Option<u8>,
    /// Realized daily maximum, once revealed.
    pub actual_max: Option<f64>,
}

/// Simple fires at `total >= 0.5`. Color fires at `total >= color_floor` and
/// carries the band of the total.
pub fn classify_signal(est: &CpDayEstimate, spec: &StrategySpec) -> AlertRecord {
    let total = est.total;
    let (fired, color) = match spec.signal {
        Signal::Simple => (total >= SIMPLE_LEVEL, None),
        Signal::Color => {
            let fired = total >= spec.color_floor;
            (fired, fired.then(|| Color::of(total)))
        }
    };
    AlertRecord {
        date: est.date,
        probs: est.probs.clone(),
        prob_total: total,
        fired,
        color,
        was_true_cp: false,
        rank_error: None,
        actual_max: None,
    }
}

/// Position of the true peak hour in the descending-probability ordering
/// (earlier hours first on ties), minus one, clipped at 4. An hour outside
/// the horizon counts as the clipped maximum.
pub fn rank_error(est: &CpHourEstimate, true_peak_hour: u8) -> u8 {
    let Some(j) = est.hours.iter().position(|h| *h == true_peak_hour) else {
        return MAX_RANK_ERROR;
    };
    let p = est.probs[j];
    let ahead = est
        .probs
        .iter()
        .enumerate()
        .filter(|(i, q)| **q > p || (**q == p && *i < j))
        .count();
    ahead.min(MAX_RANK_ERROR as usize) as u8
}

/// Load data for a backtest. `clock` and `reveal` mark what the backtest is
/// allowed to know: after `clock(d)` only actuals before `d` and forecasts up
/// to `d` may be read; `reveal(d)` makes the actuals of `d` readable.
pub trait LoadSource {
    /// 24 hourly actuals of the forecast zone.
    fn actual(&self, day: NaiveDate) -> Option<Vec<f64>>;
    /// 24 hourly actuals of the child zone, for two-zone programs.
    fn child_actual(&self, _day: NaiveDate) -> Option<Vec<f64>> {
        None
    }
    /// Forecast of the given hours issued for `day`.
    fn forecast(&self, day: NaiveDate, hours: &[u8]) -> Option<Vec<f64>>;
    fn clock(&self, _day: NaiveDate) {}
    fn reveal(&self, _day: NaiveDate) {}
}

fn full_day() -> Vec<u8> {
    (0..HOURS as u8).collect()
}

/// Source backed by in-memory series.
#[derive(Debug, Clone)]
pub struct SeriesSource {
    pub actual: HourlyLoadSeries,
    pub forecast: HourlyLoadSeries,
    pub child_actual: Option<HourlyLoadSeries>,
}

impl LoadSource for SeriesSource {
    fn actual(&self, day: NaiveDate) -> Option<Vec<f64>> {
        self.actual.day_values(day, &full_day())
    }

    fn child_actual(&self, day: NaiveDate) -> Option<Vec<f64>> {
        self.child_actual.as_ref()?.day_values(day, &full_day())
    }

    fn forecast(&self, day: NaiveDate, hours: &[u8]) -> Option<Vec<f64>> {
        self.forecast.day_values(day, hours)
    }
}

/// Wrapper that records every read the clock does not allow.
#[derive(Debug)]
pub struct AuditedSource<S> {
    inner: S,
    state: Mutex<AuditState>,
}

#[derive(Debug, Default)]
struct AuditState {
    now: Option<NaiveDate>,
    revealed: BTreeSet<NaiveDate>,
    violations: Vec<String>,
    reads: usize,
}

impl<S: LoadSource> AuditedSource<S> {
    pub fn new(inner: S) -> Self {
        AuditedSource {
            inner,
            state: Mutex::new(AuditState::default()),
        }
    }

    pub fn violations(&self) -> Vec<String> {
        self.state.lock().unwrap().violations.clone()
    }

    /// Number of reads checked.
    pub fn reads(&self) -> usize {
        self.state.lock().unwrap().reads
    }

    fn check_actual(&self, day: NaiveDate, what: &str) {
        let mut st = self.state.lock().unwrap();
        st.reads += 1;
        let ok = match st.now {
            Some(now) => day < now || st.revealed.contains(&day),
            None => false,
        };
        if !ok {
            let msg = format!("{what} actuals of {day} read at clock {:?}", st.now);
            st.violations.push(msg);
        }
    }
}

impl<S: LoadSource> LoadSource for AuditedSource<S> {
    fn actual(&self, day: NaiveDate) -> Option<Vec<f64>> {
        self.check_actual(day, "zone");
        self.inner.actual(day)
    }

    fn child_actual(&self, day: NaiveDate) -> Option<Vec<f64>> {
        self.check_actual(day, "child");
        self.inner.child_actual(day)
    }

    fn forecast(&self, day: NaiveDate, hours: &[u8]) -> Option<Vec<f64>> {
        {
            let mut st = self.state.lock().unwrap();
            st.reads += 1;
            if st.now.is_none_or(|now| day > now) {
                let msg = format!("forecast of {day} read at clock {:?}", st.now);
                st.violations.push(msg);
            }
        }
        self.inner.forecast(day, hours)
    }

    fn clock(&self, day: NaiveDate) {
        let mut st = self.state.lock().unwrap();
        if st.now.is_some_and(|now| day < now) {
            let msg = format!("clock moved back from {:?} to {day}", st.now);
            st.violations.push(msg);
        }
        st.now = Some(day);
        drop(st);
        self.inner.clock(day);
    }

    fn reveal(&self, day: NaiveDate) {
        let mut st = self.state.lock().unwrap();
        if st.now != Some(day) {
            let msg = format!("reveal of {day} at clock {:?}", st.now);
            st.violations.push(msg);
        }
        st.revealed.insert(day);
        drop(st);
        self.inner.reveal(day);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Refit {
    /// One engine per test year, trained on the prior years.
    #[default]
    Yearly,
    /// Retrain when the last fit is at least a week old.
    Weekly,
    /// Retrain before every day.
    Daily,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ZoneMode {
    /// Forecast and peaks on the same zone.
    Single { zone: String },
    /// Peaks on `child`, forecast only on `parent`.
    Conditional { parent: String, child: String },
}

impl ZoneMode {
    pub fn target(&self) -> &str {
        match self {
            ZoneMode::Single { zone } => zone,
            ZoneMode::Conditional { child, .. } => child,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BacktestConfig {
    pub program: CpProgramRule,
    pub holidays: BTreeSet<NaiveDate>,
    /// First training year.
    pub first_year: i32,
    pub years: Vec<i32>,
    pub vintage: ForecastVintage,
    pub zones: ZoneMode,
    pub engine: EngineConfig,
    pub k: usize,
    pub seed: u64,
    pub refit: Refit,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct YearStats {
    pub year: i32,
    pub threshold: f64,
    pub n_days: usize,
    pub n_skipped: usize,
    pub n_alerts: usize,
    pub n_true_cp: usize,
    pub n_caught: usize,
    /// Alerts per color R/O/Y/G (Color signal only).
    pub alerts_by_color: [usize; 4],
    pub caught_by_color: [usize; 4],
    /// Rank errors 0..=4 of the true CP days.
    pub rank_errors: [usize; 5],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub n_alerts: f64,
    pub n_caught: f64,
    pub alerts_by_color: [f64; 4],
    pub caught_by_color: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub strategy: String,
    pub spec: StrategySpec,
    pub program: String,
    pub n_peaks: usize,
    pub years: Vec<YearStats>,
    pub alerts: Vec<AlertRecord>,
}

impl BacktestReport {
    pub fn averages(&self) -> Averages {
        let n = self.years.len().max(1) as f64;
        let mut a = Averages::default();
        for y in &self.years {
            a.n_alerts += y.n_alerts as f64 / n;
            a.n_caught += y.n_caught as f64 / n;
            for c in 0..4 {
                a.alerts_by_color[c] += y.alerts_by_color[c] as f64 / n;
                a.caught_by_color[c] += y.caught_by_color[c] as f64 / n;
            }
        }
        a
    }

    pub fn year(&self, year: i32) -> Option<&YearStats> {
        self.years.iter().find(|y| y.year == year)
    }
}

/// Daily maxima of the peak zone over a set of days, skipping days without
/// data.
pub fn daily_maxima<S: LoadSource + ?Sized>(
    source: &S,
    zones: &ZoneMode,
    days: &BTreeSet<NaiveDate>,
) -> Vec<f64> {
    days.iter()
        .filter_map(|d| peak_zone_actual(source, zones, *d))
        .filter_map(|v| argmax(&v).map(|(_, m)| m))
        .collect()
}

/// Actuals of the zone whose peaks count.
pub fn peak_zone_actual<S: LoadSource + ?Sized>(
    source: &S,
    zones: &ZoneMode,
    day: NaiveDate,
) -> Option<Vec<f64>> {
    if matches!(zones, ZoneMode::Conditional { .. }) {
        source.child_actual(day)
    } else {
        source.actual(day)
    }
}

/// Fits an engine on the training days strictly before `cutoff` that have
/// complete data.
pub fn fit_engine<S: LoadSource + ?Sized>(
    source: &S,
    zones: &ZoneMode,
    vintage: &ForecastVintage,
    config: &EngineConfig,
    train: &BTreeSet<NaiveDate>,
    cutoff: NaiveDate,
) -> Result<FittedEngine> {
    let hours = vintage.hours();
    let mut dev_days = Vec::new();
    let mut dev = Vec::new();
    let mut load_days = Vec::new();
    let mut z1 = Vec::new();
    let mut z2 = Vec::new();
    let conditional = matches!(zones, ZoneMode::Conditional { .. });
    for &d in train.iter().filter(|d| **d < cutoff) {
        let Some(a) = source.actual(d) else { continue };
        if let Some(f) = source.forecast(d, &hours) {
            dev_days.push(d);
            dev.extend(hours.iter().zip(&f).map(|(h, f)| a[*h as usize] - f));
        }
        if conditional {
            if let Some(c) = source.child_actual(d) {
                load_days.push(d);
                z1.extend_from_slice(&a);
                z2.extend(c);
            }
        }
    }
    let matrix = |days: Vec<NaiveDate>, hours: Vec<u8>, data: Vec<f64>| -> Result<DayMatrix> {
        if days.is_empty() {
            return Err(Error::InsufficientData(format!(
                "no complete training day before {cutoff}"
            )));
        }
        let values = nalgebra::DMatrix::from_row_slice(days.len(), hours.len(), &data);
        Ok(DayMatrix {
            days,
            hours,
            values,
        })
    };
    let dev = matrix(dev_days, hours, dev)?;
    match zones {
        ZoneMode::Single { zone } => {
            let label = EngineLabel::new(zone, &vintage.label, cutoff);
            fit_unconditional(label, &dev, config)
        }
        ZoneMode::Conditional { parent, child } => {
            let label = EngineLabel::new(child, &vintage.label, cutoff);
            let a1 = matrix(load_days.clone(), full_day(), z1)?;
            let a2 = matrix(load_days, full_day(), z2)?;
            fit_conditional(label, parent, &a1, &a2, &dev, config)
        }
    }
}

/// Scenarios for `day` from its forecast, or `None` when the forecast is
/// missing. The seed is derived with [`backtest_seed`].
pub fn simulate_day<S: LoadSource + ?Sized>(
    source: &S,
    engine: &FittedEngine,
    day: NaiveDate,
    k: usize,
    base_seed: u64,
) -> Result<Option<ScenarioBatch>> {
    let Some(f) = source.forecast(day, &engine.hours) else {
        return Ok(None);
    };
    let seed = backtest_seed(base_seed, day, &engine.label.vintage);
    let batch = if engine.is_conditional() {
        simulate_conditional(engine, day, &f, k, seed)?
    } else {
        simulate_unconditional(engine, day, &f, k, seed)?
    };
    Ok(Some(batch))
}

/// Per-day Monte-Carlo seed from the base seed, year, date and vintage.
pub fn backtest_seed(base: u64, day: NaiveDate, vintage: &str) -> u64 {
    derive_seed(
        base,
        &[
            day.year() as u64,
            day.num_days_from_ce() as u64,
            hash_str(vintage),
        ],
    )
}

fn check_coverage<S: LoadSource + ?Sized>(
    source: &S,
    cfg: &BacktestConfig,
    year: i32,
) -> Result<()> {
    let days = eligible_days(&cfg.program, year, &cfg.holidays)?.eligible_days;
    if !days
        .iter()
        .any(|d| peak_zone_actual(source, &cfg.zones, *d).is_some())
    {
        return Err(Error::Coverage(format!(
            "no `{}` actuals for program year {year}",
            cfg.zones.target()
        )));
    }
    Ok(())
}

/// Runs every strategy over the test years. Within a year days are processed
/// in order; one scenario batch per day is shared by all strategies.
pub fn run_backtest<S: LoadSource + ?Sized>(
    source: &S,
    cfg: &BacktestConfig,
    specs: &[StrategySpec],
) -> Result<Vec<BacktestReport>> {
    cfg.program.validate()?;
    cfg.engine.validate()?;
    for s in specs {
        s.validate()?;
    }
    if cfg.k == 0 {
        return Err(Error::Config("scenario count must be at least 1".into()));
    }
    if let Some(y) = cfg.years.iter().find(|y| **y <= cfg.first_year) {
        return Err(Error::Config(format!(
            "test year {y} leaves no training year from {}",
            cfg.first_year
        )));
    }
    let mut years = cfg.years.clone();
    years.sort_unstable();
    years.dedup();

    let mut reports: Vec<BacktestReport> = specs
        .iter()
        .map(|s| BacktestReport {
            strategy: s.name(),
            spec: *s,
            program: cfg.program.jurisdiction_id.clone(),
            n_peaks: cfg.program.n_peaks,
            years: Vec::new(),
            alerts: Vec::new(),
        })
        .collect();
    for y in years {
        let per_spec = backtest_year(source, cfg, specs, y)?;
        for (r, (stats, alerts)) in reports.iter_mut().zip(per_spec) {
            r.years.push(stats);
            r.alerts.extend(alerts);
        }
    }
    Ok(reports)
}

fn backtest_year<S: LoadSource + ?Sized>(
    source: &S,
    cfg: &BacktestConfig,
    specs: &[StrategySpec],
    year: i32,
) -> Result<Vec<(YearStats, Vec<AlertRecord>)>> {
    let season = eligible_days(&cfg.program, year, &cfg.holidays)?;
    let Some(start) = season.first() else {
        return Err(Error::Coverage(format!(
            "program year {year} has no eligible day"
        )));
    };
    source.clock(start);
    for y in cfg.first_year..year {
        check_coverage(source, cfg, y)?;
    }
    let train_prior = eligible_days_span(&cfg.program, cfg.first_year, year - 1, &cfg.holidays)?;
    let train_prior: BTreeSet<NaiveDate> = train_prior.into_iter().filter(|d| *d < start).collect();

    // Thresholds from the daily maxima of prior years.
    let history = daily_maxima(source, &cfg.zones, &train_prior);
    let mut thresholds = BTreeMap::new();
    for s in specs {
        if let Some(p) = s.threshold.percentile() {
            let t = percentile_threshold(&history, p)
                .map_err(|e| e.at(format!("{} threshold for {year}", s.name())))?;
            thresholds.insert(s.threshold, t);
        }
    }
    let threshold_of = |s: &StrategySpec| thresholds.get(&s.threshold).copied().unwrap_or(0.0);

    let mut engine = fit_engine(
        source,
        &cfg.zones,
        &cfg.vintage,
        &cfg.engine,
        &train_prior,
        start,
    )
    .map_err(|e| e.at(format!("engine for {year}")))?;
    let mut state = RunningCpState::new(&cfg.program.jurisdiction_id, year, cfg.program.n_peaks);
    let mut records: Vec<Vec<AlertRecord>> = vec![Vec::new(); specs.len()];
    let mut hour_estimates: BTreeMap<NaiveDate, CpHourEstimate> = BTreeMap::new();
    let mut peak_hours: BTreeMap<NaiveDate, u8> = BTreeMap::new();
    let mut skipped = 0;
    let mut any_actual = false;

    for &day in &season.eligible_days {
        source.clock(day);
        let stale = match cfg.refit {
            Refit::Yearly => false,
            Refit::Daily => engine.label.cutoff < day,
            Refit::Weekly => engine.label.cutoff + Days::new(7) <= day,
        };
        if stale {
            let mut train = train_prior.clone();
            train.extend(season.eligible_days.range(..day).copied());
            engine = fit_engine(source, &cfg.zones, &cfg.vintage, &cfg.engine, &train, day)
                .map_err(|e| e.at(format!("engine for {day}")))?;
        }
        let batch = simulate_day(source, &engine, day, cfg.k, cfg.seed)?;
        if let Some(batch) = &batch {
            hour_estimates.insert(day, prob_peak_hour(batch)?);
            for (i, s) in specs.iter().enumerate() {
                let t = threshold_of(s);
                let levels = modified_cp_levels(&state, s, t);
                let est = prob_rank_bands(batch, &state, &levels)?.with_threshold(t);
                records[i].push(classify_signal(&est, s));
            }
        }

        source.reveal(day);
        let Some(actual) = peak_zone_actual(source, &cfg.zones, day) else {
            if batch.is_some() {
                for r in &mut records {
                    r.pop();
                }
            }
            skipped += 1;
            continue;
        };
        if batch.is_none() {
            skipped += 1;
        }
        any_actual = true;
        let (h, max) = argmax(&actual).expect("24 hourly values");
        peak_hours.insert(day, h as u8);
        for r in &mut records {
            if let Some(last) = r.last_mut().filter(|a| a.date == day) {
                last.actual_max = Some(max);
            }
        }
        state = update_running_cp(state, day, &actual, &season)?;
    }
    if !any_actual {
        return Err(Error::Coverage(format!(
            "no actuals for program year {year}"
        )));
    }

    let true_cp: BTreeSet<NaiveDate> = state.entries.iter().map(|e| e.date).collect();
    let rank_errors: BTreeMap<NaiveDate, u8> = true_cp
        .iter()
        .map(|d| {
            let err = match (hour_estimates.get(d), peak_hours.get(d)) {
                (Some(est), Some(h)) => rank_error(est, *h),
                _ => MAX_RANK_ERROR,
            };
            (*d, err)
        })
        .collect();

    let out = specs
        .iter()
        .zip(records)
        .map(|(s, mut recs)| {
            let mut st = YearStats {
                year,
                threshold: threshold_of(s),
                n_days: recs.len(),
                n_skipped: skipped,
                n_true_cp: true_cp.len(),
                ..YearStats::default()
            };
            for d in &true_cp {
                st.rank_errors[rank_errors[d] as usize] += 1;
            }
            for r in &mut recs {
                r.was_true_cp = true_cp.contains(&r.date);
                if r.was_true_cp {
                    r.rank_error = Some(rank_errors[&r.date]);
                }
                if r.fired {
                    st.n_alerts += 1;
                    if let Some(c) = r.color {
                        st.alerts_by_color[c.index()] += 1;
                    }
                    if r.was_true_cp {
                        st.n_caught += 1;
                        if let Some(c) = r.color {
                            st.caught_by_color[c.index()] += 1;
                        }
                    }
                }
            }
            (st, recs)
        })
        .collect();
    Ok(out)
}

fn colors<T: fmt::Display>(v: &[T; 4], n: usize) -> String {
    v[..n]
        .iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("/")
}

/// Average-performance table, one row per strategy.
pub fn report_table(reports: &[BacktestReport]) -> String {
    let mut out = format!(
        "{:<9} {:>8} {:>6}  {:<28} {}\n",
        "strategy", "# alerts", "# CP", "# alerts (R/O/Y/G)", "# CP (R/O/Y/G)"
    );
    for r in reports {
        let a = r.averages();
        let f1 = |x: &f64| format!("{x:.1}");
        let (ca, cc) = match r.spec.signal {
            Signal::Simple => ("-".to_string(), "-".to_string()),
            Signal::Color => (
                format!(
                    "{:.1} ({})",
                    a.n_alerts,
                    colors(&a.alerts_by_color.map(|x| f1(&x)), 4)
                ),
                format!(
                    "{:.1} ({})",
                    a.n_caught,
                    colors(&a.caught_by_color.map(|x| f1(&x)), 4)
                ),
            ),
        };
        out.push_str(&format!(
            "{:<9} {:>8.1} {:>6.1}  {:<28} {}\n",
            r.strategy, a.n_alerts, a.n_caught, ca, cc
        ));
    }
    out
}

/// Per-year rows of every report.
pub fn write_report_csv<W: Write>(w: W, reports: &[BacktestReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "strategy",
        "year",
        "threshold",
        "n_days",
        "n_skipped",
        "n_alerts",
        "n_true_cp",
        "n_caught",
        "alerts_r",
        "alerts_o",
        "alerts_y",
        "alerts_g",
        "caught_r",
        "caught_o",
        "caught_y",
        "caught_g",
        "rank_err_0",
        "rank_err_1",
        "rank_err_2",
        "rank_err_3",
        "rank_err_4",
    ])?;
    for r in reports {
        for y in &r.years {
            let mut rec = vec![
                r.strategy.clone(),
                y.year.to_string(),
                y.threshold.to_string(),
                y.n_days.to_string(),
                y.n_skipped.to_string(),
                y.n_alerts.to_string(),
                y.n_true_cp.to_string(),
                y.n_caught.to_string(),
            ];
            rec.extend(y.alerts_by_color.iter().map(|x| x.to_string()));
            rec.extend(y.caught_by_color.iter().map(|x| x.to_string()));
            rec.extend(y.rank_errors.iter().map(|x| x.to_string()));
            out.write_record(&rec)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Average rows of every report.
pub fn write_summary_csv<W: Write>(w: W, reports: &[BacktestReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "strategy", "signal", "years", "alerts", "caught", "alerts_r", "alerts_o", "alerts_y",
        "alerts_g", "caught_r", "caught_o", "caught_y", "caught_g",
    ])?;
    for r in reports {
        let a = r.averages();
        let mut rec = vec![
            r.strategy.clone(),
            format!("{:?}", r.spec.signal),
            r.years.len().to_string(),
            a.n_alerts.to_string(),
            a.n_caught.to_string(),
        ];
        rec.extend(a.alerts_by_color.iter().map(|x| x.to_string()));
        rec.extend(a.caught_by_color.iter().map(|x| x.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Every evaluated day of every strategy.
pub fn write_alerts_csv<W: Write>(w: W, reports: &[BacktestReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "strategy",
        "date",
        "prob_total",
        "fired",
        "color",
        "was_true_cp",
        "rank_error",
    ])?;
    for r in reports {
        for a in &r.alerts {
            out.write_record([
                r.strategy.clone(),
                a.date.to_string(),
                a.prob_total.to_string(),
                a.fired.to_string(),
                a.color.map(|c| c.to_string()).unwrap_or_default(),
                a.was_true_cp.to_string(),
                a.rank_error.map(|e| e.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Probability stacks for timeline plots: `strategy,date,prob_1..prob_n,
/// total,daily_max,is_cp`.
pub fn write_timeline_csv<W: Write>(w: W, reports: &[BacktestReport]) -> Result<()> {
    let n = reports.iter().map(|r| r.n_peaks).max().unwrap_or(1);
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["strategy".to_string(), "date".to_string()];
    header.extend((1..=n).map(|k| format!("prob_{k}")));
    header.extend(["total", "daily_max", "is_cp"].map(String::from));
    out.write_record(&header)?;
    for r in reports {
        for a in &r.alerts {
            let mut rec = vec![r.strategy.clone(), a.date.to_string()];
            rec.extend((0..n).map(|k| a.probs.get(k).copied().unwrap_or(0.0).to_string()));
            rec.push(a.prob_total.to_string());
            rec.push(a.actual_max.map(|m| m.to_string()).unwrap_or_default());
            rec.push(a.was_true_cp.to_string());
            out.write_record(&rec)?;
        }
    }
    out.flush()?;
    Ok(())
}
