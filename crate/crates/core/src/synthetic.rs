//! Synthetic hourly load with a summer hump, an afternoon peak, persistent
//! day-to-day weather and hour-correlated forecast errors. Used by tests,
//! demos and smoke runs of the pipeline.

use chrono::{Datelike, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{HourlyLoadSeries, SeriesKind, HOURS};
use crate::strategies::SeriesSource;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub zone: String,
    pub first_year: i32,
    pub last_year: i32,
    /// Days of each year, as (month, day) bounds.
    pub from: (u32, u32),
    pub to: (u32, u32),
    pub seed: u64,
    pub base_mw: f64,
    /// Extra daily level at the height of summer.
    pub summer_mw: f64,
    /// Day-to-day weather, AR(1) with this stationary sd.
    pub weather_sd: f64,
    pub weather_ar: f64,
    /// Forecast error, AR(1) across hours with this stationary sd.
    pub error_sd: f64,
    pub error_ar: f64,
    /// Days scaled so their maximum is this factor above every other day of
    /// the same year.
    pub dominant: Vec<NaiveDate>,
    pub dominance: f64,
    /// Child zone as this share of the parent plus independent noise.
    pub child: Option<ChildConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChildConfig {
    pub zone: String,
    pub share: f64,
    pub noise_sd: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            zone: "SYN".into(),
            first_year: 2011,
            last_year: 2015,
            from: (5, 15),
            to: (10, 15),
            seed: 1,
            base_mw: 1000.0,
            summer_mw: 300.0,
            weather_sd: 80.0,
            weather_ar: 0.7,
            error_sd: 25.0,
            error_ar: 0.85,
            dominant: Vec::new(),
            dominance: 1.1,
            child: None,
        }
    }
}

/// Hourly shape: overnight trough, peak around 17:00.
pub fn daily_shape(h: usize) -> f64 {
    let x = (h as f64 - 17.0) / 4.5;
    0.72 + 0.28 * (-x * x).exp()
}

fn ar_step(rng: &mut ChaCha8Rng, prev: f64, ar: f64, sd: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    ar * prev + sd * (1.0 - ar * ar).sqrt() * z
}

/// Actual and forecast (and child actual) series over the configured span.
pub fn generate(cfg: &SyntheticConfig) -> Result<SeriesSource> {
    if cfg.last_year < cfg.first_year {
        return Err(Error::Config("last_year before first_year".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut actual = Vec::new();
    let mut forecast = Vec::new();
    let mut child = Vec::new();
    for year in cfg.first_year..=cfg.last_year {
        let day = |(m, d): (u32, u32)| {
            NaiveDate::from_ymd_opt(year, m, d)
                .ok_or_else(|| Error::Config(format!("bad synthetic bound {m}-{d}")))
        };
        let (start, end) = (day(cfg.from)?, day(cfg.to)?);
        let mut weather = 0.0;
        let mut year_days = Vec::new();
        for d in start.iter_days().take_while(|d| *d <= end) {
            weather = ar_step(&mut rng, weather, cfg.weather_ar, cfg.weather_sd);
            let t = (d.ordinal() as f64 - 200.0) / 40.0;
            let level = cfg.base_mw + cfg.summer_mw * (-t * t).exp() + weather;
            let mut err = 0.0;
            let mut a = Vec::with_capacity(HOURS);
            let mut f = Vec::with_capacity(HOURS);
            for h in 0..HOURS {
                let noise: f64 = rng.sample(StandardNormal);
                let v = (level * daily_shape(h) + 0.01 * cfg.base_mw * noise).max(1.0);
                err = ar_step(&mut rng, err, cfg.error_ar, cfg.error_sd);
                a.push(v);
                f.push((v - err).max(1.0));
            }
            let c: Vec<f64> = match &cfg.child {
                Some(ch) => a
                    .iter()
                    .map(|v| {
                        let z: f64 = rng.sample(StandardNormal);
                        (ch.share * v + ch.noise_sd * z).max(1.0)
                    })
                    .collect(),
                None => Vec::new(),
            };
            year_days.push((d, a, f, c));
        }
        for dom in cfg.dominant.iter().filter(|d| d.year() == year) {
            let others = year_days
                .iter()
                .filter(|(d, ..)| d != dom)
                .flat_map(|(_, a, _, c)| if cfg.child.is_some() { c } else { a })
                .fold(0.0f64, |m, v| m.max(*v));
            if let Some((_, a, f, c)) = year_days.iter_mut().find(|(d, ..)| d == dom) {
                let own = if cfg.child.is_some() { &*c } else { &*a };
                let scale = cfg.dominance * others / own.iter().fold(0.0f64, |m, v| m.max(*v));
                for v in a.iter_mut().chain(f.iter_mut()).chain(c.iter_mut()) {
                    *v *= scale;
                }
            }
        }
        for (d, a, f, c) in year_days {
            actual.push((d, a));
            forecast.push((d, f));
            if cfg.child.is_some() {
                child.push((d, c));
            }
        }
    }
    Ok(SeriesSource {
        actual: HourlyLoadSeries::from_days(&cfg.zone, SeriesKind::Actual, actual)?,
        forecast: HourlyLoadSeries::from_days(&cfg.zone, SeriesKind::Forecast, forecast)?,
        child_actual: match &cfg.child {
            Some(ch) => Some(HourlyLoadSeries::from_days(
                &ch.zone,
                SeriesKind::Actual,
                child,
            )?),
            None => None,
        },
    })
}
