//! Browser bindings: a synthetic summer season with a fitted scenario
//! engine, plus a standalone tail-fit playground. Every call returns JSON.

use std::collections::BTreeSet;

use chrono::NaiveDate;
use peakprob::calendar::{
    eligible_days, eligible_days_span, CpProgramRule, DayFilter, MonthDay, ProgramYear,
    SeasonWindow,
};
use peakprob::distributions::{fit_gpd, Gpd};
use peakprob::estimators::{
    argmax, percentile_threshold, prob_peak_hour, prob_rank_bands, update_running_cp,
    RunningCpState,
};
use peakprob::ingest::ForecastVintage;
use peakprob::scengen::{EngineConfig, FittedEngine, ScenarioBatch};
use peakprob::strategies::{fit_engine, simulate_day, Color, LoadSource, SeriesSource, ZoneMode};
use peakprob::synthetic::{generate, SyntheticConfig};
use peakprob::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const ZONE: &str = "SYN";
const FIRST_YEAR: i32 = 2011;
/// The season the page explores; earlier years train the engine.
pub const YEAR: i32 = 2014;

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string(v)?)
}

fn parse_day(s: &str) -> Result<NaiveDate> {
    s.parse()
        .map_err(|_| Error::Config(format!("`{s}` is not a YYYY-MM-DD date")))
}

fn summer_rule(n_peaks: usize) -> Result<CpProgramRule> {
    let mut rule = CpProgramRule::simple(
        ZONE,
        n_peaks,
        SeasonWindow::new(MonthDay::new(6, 1)?, MonthDay::new(9, 30)?),
        DayFilter::BusinessDays,
    );
    rule.system = "ISO".into();
    rule.validate()?;
    Ok(rule)
}

#[derive(Serialize)]
struct Fan {
    date: NaiveDate,
    hours: Vec<u8>,
    forecast: Vec<f64>,
    actual: Vec<f64>,
    p05: Vec<f64>,
    p25: Vec<f64>,
    p50: Vec<f64>,
    p75: Vec<f64>,
    p95: Vec<f64>,
    /// A few raw paths for drawing.
    paths: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct PeakView {
    date: NaiveDate,
    k: usize,
    levels: Vec<f64>,
    probs: Vec<f64>,
    total: f64,
    color: String,
    hours: Vec<u8>,
    hour_probs: Vec<f64>,
    actual_max: f64,
    actual_hour: u8,
    /// Days already locked in as peaks before `date`.
    peaks: Vec<(NaiveDate, f64)>,
}

#[derive(Serialize)]
struct TailView {
    shape: f64,
    scale: f64,
    method: String,
    converged: bool,
    /// Sorted sample with plotting positions `i / (n + 1)`.
    sample: Vec<(f64, f64)>,
    /// Fitted and true CDF on a grid over the sample range.
    curve: Vec<(f64, f64, f64)>,
}

/// A synthetic season with an engine trained on the years before it.
#[wasm_bindgen]
pub struct Demo {
    source: SeriesSource,
    engine: FittedEngine,
    season: ProgramYear,
    n_peaks: usize,
    seed: u64,
}

impl Demo {
    pub fn build(seed: u64, n_peaks: usize) -> Result<Demo> {
        let rule = summer_rule(n_peaks)?;
        let source = generate(&SyntheticConfig {
            zone: ZONE.into(),
            first_year: FIRST_YEAR,
            last_year: YEAR,
            seed,
            ..SyntheticConfig::default()
        })?;
        let holidays = BTreeSet::new();
        let season = eligible_days(&rule, YEAR, &holidays)?;
        let train = eligible_days_span(&rule, FIRST_YEAR, YEAR - 1, &holidays)?;
        let cutoff = season
            .first()
            .ok_or_else(|| Error::Config("empty season".into()))?;
        let engine = fit_engine(
            &source,
            &ZoneMode::Single { zone: ZONE.into() },
            &ForecastVintage::day_ahead("day-ahead"),
            &EngineConfig::default(),
            &train,
            cutoff,
        )?;
        Ok(Demo {
            source,
            engine,
            season,
            n_peaks,
            seed,
        })
    }

    fn batch(&self, day: NaiveDate, k: usize) -> Result<ScenarioBatch> {
        if !self.season.contains(day) {
            return Err(Error::RejectedDay {
                date: day,
                reason: "not an eligible day of the season".into(),
            });
        }
        simulate_day(&self.source, &self.engine, day, k, self.seed)?
            .ok_or_else(|| Error::Coverage(format!("no forecast for {day}")))
    }

    fn actual(&self, day: NaiveDate) -> Result<Vec<f64>> {
        self.source
            .actual(day)
            .ok_or_else(|| Error::Coverage(format!("no actuals for {day}")))
    }

    /// Running peaks from every eligible day before `day`.
    fn state_before(&self, day: NaiveDate) -> Result<RunningCpState> {
        let mut state = RunningCpState::new(ZONE, YEAR, self.n_peaks);
        for &d in self.season.eligible_days.iter().take_while(|d| **d < day) {
            state = update_running_cp(state, d, &self.actual(d)?, &self.season)?;
        }
        Ok(state)
    }

    pub fn days_json(&self) -> Result<String> {
        to_json(&self.season.eligible_days)
    }

    pub fn fan_json(&self, day: &str, k: usize) -> Result<String> {
        let day = parse_day(day)?;
        let batch = self.batch(day, k)?;
        let hours = batch.hours.clone();
        let forecast = self
            .source
            .forecast(day, &hours)
            .ok_or_else(|| Error::Coverage(format!("no forecast for {day}")))?;
        let actual = self.actual(day)?;
        let q = |p: f64| -> Result<Vec<f64>> {
            (0..hours.len())
                .map(|j| {
                    let col: Vec<f64> = batch.paths.column(j).iter().copied().collect();
                    percentile_threshold(&col, p)
                })
                .collect()
        };
        to_json(&Fan {
            date: day,
            actual: hours.iter().map(|h| actual[*h as usize]).collect(),
            p05: q(5.0)?,
            p25: q(25.0)?,
            p50: q(50.0)?,
            p75: q(75.0)?,
            p95: q(95.0)?,
            paths: (0..batch.k().min(20)).map(|s| batch.path(s)).collect(),
            hours,
            forecast,
        })
    }

    pub fn peaks_json(&self, day: &str, k: usize) -> Result<String> {
        let day = parse_day(day)?;
        let state = self.state_before(day)?;
        let batch = self.batch(day, k)?;
        let est = prob_rank_bands(&batch, &state, &state.levels())?;
        let hour = prob_peak_hour(&batch)?;
        let actual = self.actual(day)?;
        let (actual_hour, actual_max) =
            argmax(&actual).ok_or_else(|| Error::Coverage(format!("no actuals for {day}")))?;
        to_json(&PeakView {
            date: day,
            k: est.k,
            color: format!("{:?}", Color::of(est.total)),
            levels: est.levels,
            probs: est.probs,
            total: est.total,
            hours: hour.hours,
            hour_probs: hour.probs,
            actual_max,
            actual_hour: actual_hour as u8,
            peaks: state.entries.iter().map(|e| (e.date, e.value)).collect(),
        })
    }
}

/// Draws `n` GPD(shape, scale) exceedances and fits them back.
pub fn tail_fit_json(shape: f64, scale: f64, n: usize, seed: u64) -> Result<String> {
    let truth = Gpd::new(shape, scale)?;
    if n < 10 {
        return Err(Error::Config("need at least 10 draws".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs: Vec<f64> = (0..n)
        .map(|_| truth.quantile(rng.random::<f64>()))
        .collect();
    xs.sort_by(f64::total_cmp);
    let (fit, diag) = fit_gpd(&xs)?;
    let hi = xs[n - 1] * 1.1;
    let curve = (0..=100)
        .map(|i| {
            let x = hi * i as f64 / 100.0;
            (x, fit.cdf(x), truth.cdf(x))
        })
        .collect();
    to_json(&TailView {
        shape: fit.shape,
        scale: fit.scale,
        method: format!("{:?}", diag.method),
        converged: diag.converged,
        sample: xs
            .iter()
            .enumerate()
            .map(|(i, x)| (*x, (i + 1) as f64 / (n + 1) as f64))
            .collect(),
        curve,
    })
}

#[wasm_bindgen]
impl Demo {
    /// Generates four synthetic years and fits the engine on the first three.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, n_peaks: usize) -> std::result::Result<Demo, JsError> {
        Demo::build(seed as u64, n_peaks).map_err(js)
    }

    /// Eligible days of the season as a JSON array.
    pub fn days(&self) -> std::result::Result<String, JsError> {
        self.days_json().map_err(js)
    }

    /// Scenario fan for one day: forecast, actual, quantile bands, sample paths.
    pub fn fan(&self, day: &str, k: usize) -> std::result::Result<String, JsError> {
        self.fan_json(day, k).map_err(js)
    }

    /// Rank-band and peak-hour probabilities given the peaks so far.
    pub fn peaks(&self, day: &str, k: usize) -> std::result::Result<String, JsError> {
        self.peaks_json(day, k).map_err(js)
    }
}

#[wasm_bindgen]
pub fn tail_fit(
    shape: f64,
    scale: f64,
    n: usize,
    seed: u32,
) -> std::result::Result<String, JsError> {
    tail_fit_json(shape, scale, n, seed as u64).map_err(js)
}
