//! Monte-Carlo scenario engines.
//!
//! The unconditional engine models forecast deviations: per-hour
//! semi-parametric marginals plus a sparse Gaussian dependence model over the
//! Gaussianized deviations. The conditional engine adds actual-load marginals
//! for two zones and a joint model, and generates zone-2 scenarios given
//! simulated zone-1 paths.

use std::io::{Read, Write};

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distributions::{gaussianize_matrix, SemiParametricMarginal, DEFAULT_TAIL_FRACTION};
use crate::error::{Error, Result};
use crate::glasso::{
    cholesky_with_jitter, empirical_covariance, glasso_fit_with, select_lambda_with, BlockLayout,
    ConditionalGaussian, GaussianDependenceModel, GlassoOptions, Penalty, DEFAULT_FOLDS,
    DEFAULT_LAMBDA,
};
use crate::ingest::{DayMatrix, HOURS};
use crate::serial;

pub const DEFAULT_SCENARIOS: usize = 1000;
pub const DEFAULT_MIN_HISTORY: usize = 30;

/// Scenarios drawn from one RNG stream. Fixed so that batches do not depend
/// on how chunks are spread over workers.
pub const SCENARIO_CHUNK: usize = 256;

const BINARY_MAGIC: &[u8; 4] = b"PKPB";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub tail_fraction: f64,
    /// Penalty used when `lambda_grid` is empty.
    pub lambda: f64,
    /// Candidate penalties chosen by cross-validation when non-empty.
    pub lambda_grid: Vec<f64>,
    pub folds: usize,
    pub penalty: Penalty,
    pub min_history: usize,
    pub scenarios: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            tail_fraction: DEFAULT_TAIL_FRACTION,
            lambda: DEFAULT_LAMBDA,
            lambda_grid: Vec::new(),
            folds: DEFAULT_FOLDS,
            penalty: Penalty::OffDiagonal,
            min_history: DEFAULT_MIN_HISTORY,
            scenarios: DEFAULT_SCENARIOS,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 0.5) {
            return Err(Error::Config(format!(
                "tail_fraction {} outside (0, 0.5]",
                self.tail_fraction
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda {} must be >= 0",
                self.lambda
            )));
        }
        if self
            .lambda_grid
            .iter()
            .any(|l| !(*l > 0.0 && l.is_finite()))
        {
            return Err(Error::Config("lambda_grid values must be positive".into()));
        }
        if self.scenarios == 0 {
            return Err(Error::Config("scenarios must be at least 1".into()));
        }
        if self.min_history < 2 {
            return Err(Error::Config("min_history must be at least 2".into()));
        }
        Ok(())
    }

    fn glasso_options(&self) -> GlassoOptions {
        GlassoOptions {
            penalty: self.penalty,
            ..GlassoOptions::default()
        }
    }
}

/// Identity of what an engine is trained for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineLabel {
    pub zone_id: String,
    pub vintage: String,
    /// Target day; training uses only earlier days.
    pub cutoff: NaiveDate,
}

impl EngineLabel {
    pub fn new(zone_id: &str, vintage: &str, cutoff: NaiveDate) -> Self {
        EngineLabel {
            zone_id: zone_id.to_string(),
            vintage: vintage.to_string(),
            cutoff,
        }
    }
}

/// Actual-load marginals of two zones and their joint dependence model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalPart {
    pub zone1: String,
    pub zone2: String,
    pub zone1_marginals: Vec<SemiParametricMarginal>,
    pub zone2_marginals: Vec<SemiParametricMarginal>,
    /// 48-dimensional model; zone 1 occupies the first block.
    pub joint: GaussianDependenceModel,
    pub n_train: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedEngine {
    pub label: EngineLabel,
    /// Forecast horizon hours covered by the deviation model.
    pub hours: Vec<u8>,
    pub n_train: usize,
    pub config: EngineConfig,
    /// Deviation marginals, one per horizon hour.
    pub marginals: Vec<SemiParametricMarginal>,
    pub model: GaussianDependenceModel,
    pub conditional: Option<ConditionalPart>,
}

fn check_history(m: &DayMatrix, cutoff: NaiveDate, min: usize, what: &str) -> Result<()> {
    if let Some(day) = m.days.iter().find(|d| **d >= cutoff) {
        return Err(Error::Alignment(format!(
            "{what} training data contains {day}, not before the cutoff {cutoff}"
        )));
    }
    if m.n_days() < min {
        return Err(Error::InsufficientData(format!(
            "{what} history has {} days before {cutoff}, need at least {min}",
            m.n_days()
        )));
    }
    Ok(())
}

fn fit_dependence(values: &DMatrix<f64>, config: &EngineConfig) -> Result<GaussianDependenceModel> {
    let opts = config.glasso_options();
    let lambda = if config.lambda_grid.is_empty() {
        config.lambda
    } else {
        select_lambda_with(values, &config.lambda_grid, config.folds, &opts)?
    };
    let s = crate::glasso::second_moment(values)?;
    Ok(glasso_fit_with(&s, lambda, &opts)?.0)
}

/// Fits deviation marginals and their dependence model on days before the cutoff.
pub fn fit_unconditional(
    label: EngineLabel,
    dev: &DayMatrix,
    config: &EngineConfig,
) -> Result<FittedEngine> {
    config.validate()?;
    check_history(dev, label.cutoff, config.min_history, "deviation")?;
    let panel = gaussianize_matrix(&dev.values, &dev.hours, config.tail_fraction)?;
    let model = fit_dependence(&panel.values, config)?;
    debug_assert_eq!(empirical_covariance(&panel)?.nrows(), dev.n_hours());
    Ok(FittedEngine {
        label,
        hours: dev.hours.clone(),
        n_train: dev.n_days(),
        config: config.clone(),
        marginals: panel.marginals,
        model,
        conditional: None,
    })
}

/// Fits the two-zone engine. `z1_actual` and `z2_actual` cover all 24 hours
/// on the same days; `z1_dev` holds zone-1 forecast deviations over the
/// vintage horizon. The returned engine simulates zone 2.
pub fn fit_conditional(
    label: EngineLabel,
    zone1: &str,
    z1_actual: &DayMatrix,
    z2_actual: &DayMatrix,
    z1_dev: &DayMatrix,
    config: &EngineConfig,
) -> Result<FittedEngine> {
    config.validate()?;
    if z1_actual.days != z2_actual.days {
        return Err(Error::Alignment(
            "zone-1 and zone-2 load matrices must cover the same days".into(),
        ));
    }
    let full: Vec<u8> = (0..HOURS as u8).collect();
    if z1_actual.hours != full || z2_actual.hours != full {
        return Err(Error::Layout("load matrices must cover hours 0..23".into()));
    }
    check_history(z1_actual, label.cutoff, config.min_history, "load")?;

    let dev_label = EngineLabel::new(zone1, &label.vintage, label.cutoff);
    let sub = fit_unconditional(dev_label, z1_dev, config)
        .map_err(|e| e.at(format!("zone {zone1} deviations")))?;
    if sub.hours.iter().any(|h| *h as usize >= HOURS) {
        return Err(Error::Layout("deviation hours must lie in 0..23".into()));
    }

    let p1 = gaussianize_matrix(&z1_actual.values, &full, config.tail_fraction)
        .map_err(|e| e.at(format!("zone {zone1} loads")))?;
    let p2 = gaussianize_matrix(&z2_actual.values, &full, config.tail_fraction)
        .map_err(|e| e.at(format!("zone {} loads", label.zone_id)))?;
    let n = z1_actual.n_days();
    let mut joint_values = DMatrix::<f64>::zeros(n, 2 * HOURS);
    joint_values.columns_mut(0, HOURS).copy_from(&p1.values);
    joint_values.columns_mut(HOURS, HOURS).copy_from(&p2.values);
    let joint = fit_dependence(&joint_values, config)?.with_layout(BlockLayout::two_zones(
        zone1,
        HOURS,
        &label.zone_id,
        HOURS,
    ))?;

    Ok(FittedEngine {
        hours: sub.hours.clone(),
        n_train: sub.n_train,
        config: config.clone(),
        marginals: sub.marginals,
        model: sub.model,
        conditional: Some(ConditionalPart {
            zone1: zone1.to_string(),
            zone2: label.zone_id.clone(),
            zone1_marginals: p1.marginals,
            zone2_marginals: p2.marginals,
            joint,
            n_train: n,
        }),
        label,
    })
}

impl FittedEngine {
    pub fn n_hours(&self) -> usize {
        self.hours.len()
    }

    pub fn is_conditional(&self) -> bool {
        self.conditional.is_some()
    }

    /// Checks internal consistency, e.g. after loading from disk.
    pub fn validate(&self) -> Result<()> {
        let corrupt = |m: String| Err(Error::EngineCorrupt(m));
        let nh = self.hours.len();
        if nh == 0 || self.marginals.len() != nh {
            return corrupt(format!(
                "{} marginals for {} hours",
                self.marginals.len(),
                nh
            ));
        }
        let m = &self.model;
        if m.precision.shape() != (nh, nh) || m.covariance.shape() != (nh, nh) {
            return corrupt(format!("dependence model is not {nh}x{nh}"));
        }
        if let Some(c) = &self.conditional {
            if c.zone1_marginals.len() != HOURS || c.zone2_marginals.len() != HOURS {
                return corrupt("conditional engine needs 24 load marginals per zone".into());
            }
            if c.joint.covariance.shape() != (2 * HOURS, 2 * HOURS) {
                return corrupt("joint model is not 48x48".into());
            }
            if self.hours.iter().any(|h| *h as usize >= HOURS) {
                return corrupt("horizon hour out of range".into());
            }
        }
        self.config.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<FittedEngine> {
        let e: FittedEngine =
            serde_json::from_str(text).map_err(|e| Error::EngineCorrupt(e.to_string()))?;
        e.validate()?;
        Ok(e)
    }
}

/// K simulated daily paths for one zone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioBatch {
    pub zone_id: String,
    pub day: NaiveDate,
    pub vintage: String,
    pub hours: Vec<u8>,
    /// `K × N_h` loads in MW.
    #[serde(with = "serial::matrix")]
    pub paths: DMatrix<f64>,
    pub seed: u64,
    /// Entries that are non-finite or not positive.
    pub violations: usize,
}

impl ScenarioBatch {
    pub fn k(&self) -> usize {
        self.paths.nrows()
    }

    pub fn n_hours(&self) -> usize {
        self.paths.ncols()
    }

    pub fn path(&self, s: usize) -> Vec<f64> {
        self.paths.row(s).iter().copied().collect()
    }

    /// Column of the given clock hour, if covered.
    pub fn hour_column(&self, hour: u8) -> Option<Vec<f64>> {
        let j = self.hours.iter().position(|h| *h == hour)?;
        Some(self.paths.column(j).iter().copied().collect())
    }

    /// Long-format CSV `scenario_id,hour,mw`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["scenario_id", "hour", "mw"])?;
        for s in 0..self.k() {
            for (j, h) in self.hours.iter().enumerate() {
                out.write_record(&[
                    s.to_string(),
                    h.to_string(),
                    format!("{}", self.paths[(s, j)]),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Magic `PKPB`, row and column counts as little-endian u64, the hour
    /// labels as bytes, then the paths as little-endian f64 in row-major order.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&(self.k() as u64).to_le_bytes())?;
        w.write_all(&(self.n_hours() as u64).to_le_bytes())?;
        w.write_all(&self.hours)?;
        for s in 0..self.k() {
            for j in 0..self.n_hours() {
                w.write_all(&self.paths[(s, j)].to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads the output of [`write_binary`](Self::write_binary) back as
    /// `(hours, paths)`.
    pub fn read_binary<R: Read>(mut r: R) -> Result<(Vec<u8>, DMatrix<f64>)> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(Error::Serde("not a scenario batch dump".into()));
        }
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let rows = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let cols = u64::from_le_bytes(word) as usize;
        let mut hours = vec![0u8; cols];
        r.read_exact(&mut hours)?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut word)?;
            data.push(f64::from_le_bytes(word));
        }
        Ok((hours, DMatrix::from_row_slice(rows, cols, &data)))
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable seed derived from a base seed and any number of components.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(base), |acc, p| mix(acc ^ mix(*p)))
}

/// Stable 64-bit hash of a string, for seed derivation.
pub fn hash_str(s: &str) -> u64 {
    // FNV-1a.
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn chunk_rng(seed: u64, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk as u64);
    rng
}

/// Runs `f` for every chunk of scenarios and stacks the rows in order.
fn simulate_chunks<F>(k: usize, n_cols: usize, seed: u64, f: F) -> DMatrix<f64>
where
    F: Fn(&mut ChaCha8Rng, &mut [f64]) + Sync,
{
    let n_chunks = k.div_ceil(SCENARIO_CHUNK);
    let run = |c: usize| -> Vec<f64> {
        let rows = SCENARIO_CHUNK.min(k - c * SCENARIO_CHUNK);
        let mut rng = chunk_rng(seed, c);
        let mut out = vec![0.0; rows * n_cols];
        for row in out.chunks_mut(n_cols) {
            f(&mut rng, row);
        }
        out
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<Vec<f64>> = {
        use rayon::prelude::*;
        (0..n_chunks).into_par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Vec<f64>> = (0..n_chunks).map(run).collect();
    let data: Vec<f64> = parts.into_iter().flatten().collect();
    DMatrix::from_row_slice(k, n_cols, &data)
}

fn count_violations(paths: &DMatrix<f64>) -> usize {
    paths
        .iter()
        .filter(|v| !(v.is_finite() && **v > 0.0))
        .count()
}

fn draw_correlated(rng: &mut ChaCha8Rng, l: &DMatrix<f64>, out: &mut DVector<f64>) {
    let eps = DVector::<f64>::from_fn(l.ncols(), |_, _| rng.sample(StandardNormal));
    l.mul_to(&eps, out);
}

fn check_request(engine: &FittedEngine, day: NaiveDate, forecast: &[f64], k: usize) -> Result<()> {
    if day < engine.label.cutoff {
        return Err(Error::Alignment(format!(
            "cannot simulate {day}: engine was trained on data up to {}",
            engine.label.cutoff
        )));
    }
    if forecast.len() != engine.n_hours() {
        return Err(Error::Alignment(format!(
            "forecast has {} hours, engine covers {} (hours {}..={})",
            forecast.len(),
            engine.n_hours(),
            engine.hours.first().copied().unwrap_or(0),
            engine.hours.last().copied().unwrap_or(0)
        )));
    }
    if forecast.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("forecast must be finite".into()));
    }
    if k == 0 {
        return Err(Error::Config("scenario count must be at least 1".into()));
    }
    Ok(())
}

fn factor(cov: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    cholesky_with_jitter(cov)
        .ok_or_else(|| Error::EngineCorrupt(format!("{what} covariance is not positive definite")))
}

/// K paths of forecast plus simulated deviation.
pub fn simulate_unconditional(
    engine: &FittedEngine,
    day: NaiveDate,
    forecast: &[f64],
    k: usize,
    seed: u64,
) -> Result<ScenarioBatch> {
    check_request(engine, day, forecast, k)?;
    let l = factor(&engine.model.covariance, "deviation")?;
    let nh = engine.n_hours();
    let paths = simulate_chunks(k, nh, seed, |rng, row| {
        let mut z = DVector::zeros(nh);
        draw_correlated(rng, &l, &mut z);
        for j in 0..nh {
            row[j] = forecast[j] + engine.marginals[j].degaussianize(z[j]);
        }
    });
    Ok(ScenarioBatch {
        zone_id: engine.label.zone_id.clone(),
        day,
        vintage: engine.label.vintage.clone(),
        hours: engine.hours.clone(),
        violations: count_violations(&paths),
        paths,
        seed,
    })
}

/// Zone-2 scenarios given simulated zone-1 paths.
pub fn simulate_conditional(
    engine: &FittedEngine,
    day: NaiveDate,
    z1_forecast: &[f64],
    k: usize,
    seed: u64,
) -> Result<ScenarioBatch> {
    simulate_conditional_pair(engine, day, z1_forecast, k, seed).map(|(_, z2)| z2)
}

/// Zone-1 and zone-2 batches from the same draws.
pub fn simulate_conditional_pair(
    engine: &FittedEngine,
    day: NaiveDate,
    z1_forecast: &[f64],
    k: usize,
    seed: u64,
) -> Result<(ScenarioBatch, ScenarioBatch)> {
    let cond = engine
        .conditional
        .as_ref()
        .ok_or_else(|| Error::Config("engine was not fitted for conditional generation".into()))?;
    check_request(engine, day, z1_forecast, k)?;
    let nh = engine.n_hours();
    let given: Vec<usize> = engine.hours.iter().map(|h| *h as usize).collect();
    let target: Vec<usize> = given.iter().map(|h| h + HOURS).collect();
    let cg = ConditionalGaussian::new(&cond.joint.covariance, &given, &target)?;
    let l1 = factor(&engine.model.covariance, "deviation")?;
    let l2 = factor(&cg.covariance, "conditional")?;

    let both = simulate_chunks(k, 2 * nh, seed, |rng, row| {
        let mut z = DVector::zeros(nh);
        draw_correlated(rng, &l1, &mut z);
        let mut g1 = DVector::zeros(nh);
        for j in 0..nh {
            let load = z1_forecast[j] + engine.marginals[j].degaussianize(z[j]);
            row[j] = load;
            g1[j] = cond.zone1_marginals[given[j]].gaussianize(load);
        }
        let mut z2 = DVector::zeros(nh);
        draw_correlated(rng, &l2, &mut z2);
        z2 += &cg.gain * g1;
        for j in 0..nh {
            row[nh + j] = cond.zone2_marginals[given[j]].degaussianize(z2[j]);
        }
    });
    let p1 = both.columns(0, nh).clone_owned();
    let p2 = both.columns(nh, nh).clone_owned();
    let batch = |zone: &str, paths: DMatrix<f64>| ScenarioBatch {
        zone_id: zone.to_string(),
        day,
        vintage: engine.label.vintage.clone(),
        hours: engine.hours.clone(),
        violations: count_violations(&paths),
        paths,
        seed,
    };
    Ok((batch(&cond.zone1, p1), batch(&cond.zone2, p2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::EPS;

    fn day(i: usize) -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + chrono::Days::new(i as u64)
    }

    fn matrix(values: DMatrix<f64>, hours: Vec<u8>) -> DayMatrix {
        DayMatrix {
            days: (0..values.nrows()).map(day).collect(),
            hours,
            values,
        }
    }

    fn gaussian_rows(n: usize, p: usize, sd: f64, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, p, |_, _| sd * rng.sample::<f64, _>(StandardNormal))
    }

    fn label(n: usize) -> EngineLabel {
        EngineLabel::new("Z", "day-ahead", day(n))
    }

    #[test]
    fn iid_deviations_give_near_identity_covariance() {
        let dev = matrix(gaussian_rows(400, 6, 50.0, 1), (18..24).collect());
        let e = fit_unconditional(label(400), &dev, &EngineConfig::default()).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((e.model.covariance[(i, j)] - target).abs() < 0.2);
            }
        }
    }

    #[test]
    fn too_little_history() {
        let dev = matrix(gaussian_rows(20, 3, 1.0, 2), vec![0, 1, 2]);
        assert!(matches!(
            fit_unconditional(label(20), &dev, &EngineConfig::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn look_ahead_rows_are_rejected() {
        let dev = matrix(gaussian_rows(60, 3, 1.0, 3), vec![0, 1, 2]);
        let err = fit_unconditional(label(50), &dev, &EngineConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Alignment(_)));
    }

    #[test]
    fn duplicated_hours_are_perfectly_correlated() {
        let base = gaussian_rows(300, 1, 10.0, 4);
        let dev = matrix(DMatrix::from_fn(300, 3, |i, _| base[(i, 0)]), vec![0, 1, 2]);
        let e = fit_unconditional(label(300), &dev, &EngineConfig::default()).unwrap();
        assert!(e.model.covariance[(0, 1)] > 0.95);
        assert!(e.model.covariance[(1, 2)] > 0.95);
    }

    #[test]
    fn marginal_failure_names_the_hour() {
        let mut v = gaussian_rows(60, 3, 1.0, 5);
        v.column_mut(2).fill(0.0);
        let err = fit_unconditional(
            label(60),
            &matrix(v, vec![7, 8, 9]),
            &EngineConfig::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("hour 9"), "{err}");
    }

    #[test]
    fn tiny_deviations_reproduce_forecast() {
        let dev = matrix(gaussian_rows(100, 4, 1e-9, 6), vec![0, 1, 2, 3]);
        let e = fit_unconditional(label(100), &dev, &EngineConfig::default()).unwrap();
        let f = [1000.0, 1100.0, 1200.0, 1300.0];
        let b = simulate_unconditional(&e, e.label.cutoff, &f, 1, 7).unwrap();
        for (j, fj) in f.iter().enumerate() {
            assert!((b.paths[(0, j)] - fj).abs() < 1e-6);
        }
        assert_eq!(b.violations, 0);
    }

    #[test]
    fn scenario_mean_within_clt_bound() {
        let mut v = gaussian_rows(500, 4, 30.0, 8);
        v.add_scalar_mut(5.0);
        let dev = matrix(v.clone(), vec![0, 1, 2, 3]);
        let e = fit_unconditional(label(500), &dev, &EngineConfig::default()).unwrap();
        let f = [900.0, 950.0, 1000.0, 1050.0];
        let k = 10_000;
        let b = simulate_unconditional(&e, e.label.cutoff, &f, k, 9).unwrap();
        for (j, fj) in f.iter().enumerate() {
            let col = b.paths.column(j);
            let mean = col.mean();
            let sd = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / k as f64).sqrt();
            let train_mean = v.column(j).mean();
            assert!(
                (mean - fj - train_mean).abs() <= 3.0 * sd / (k as f64).sqrt() + 0.5,
                "hour {j}: {mean} vs {}",
                fj + train_mean
            );
        }
    }

    #[test]
    fn same_seed_same_batch_regardless_of_workers() {
        let dev = matrix(gaussian_rows(100, 5, 20.0, 10), (19..24).collect());
        let e = fit_unconditional(label(100), &dev, &EngineConfig::default()).unwrap();
        let f = [1.0e4; 5];
        let a = simulate_unconditional(&e, e.label.cutoff, &f, 1000, 11).unwrap();
        let b = simulate_unconditional(&e, e.label.cutoff, &f, 1000, 11).unwrap();
        assert_eq!(a, b);
        #[cfg(feature = "parallel")]
        {
            let one = rayon::ThreadPoolBuilder::new()
                .num_threads(1)
                .build()
                .unwrap();
            let c =
                one.install(|| simulate_unconditional(&e, e.label.cutoff, &f, 1000, 11).unwrap());
            assert_eq!(a, c);
        }
        let d = simulate_unconditional(&e, e.label.cutoff, &f, 1000, 12).unwrap();
        assert_ne!(a.paths, d.paths);
    }

    #[test]
    fn forecast_length_must_match() {
        let dev = matrix(gaussian_rows(50, 3, 1.0, 13), vec![21, 22, 23]);
        let e = fit_unconditional(label(50), &dev, &EngineConfig::default()).unwrap();
        assert!(matches!(
            simulate_unconditional(&e, e.label.cutoff, &[1.0; 24], 10, 1),
            Err(Error::Alignment(_))
        ));
        assert!(simulate_unconditional(&e, e.label.cutoff, &[1.0; 3], 0, 1).is_err());
        assert!(matches!(
            simulate_conditional(&e, e.label.cutoff, &[1.0; 3], 10, 1),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            simulate_unconditional(&e, day(49), &[1.0; 3], 10, 1),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn csv_and_binary_exports() {
        let dev = matrix(gaussian_rows(60, 2, 5.0, 14), vec![22, 23]);
        let e = fit_unconditional(label(60), &dev, &EngineConfig::default()).unwrap();
        let b = simulate_unconditional(&e, e.label.cutoff, &[500.0, 600.0], 3, 15).unwrap();
        let mut csv_out = Vec::new();
        b.write_csv(&mut csv_out).unwrap();
        let text = String::from_utf8(csv_out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "scenario_id,hour,mw");
        assert_eq!(lines.len(), 1 + 3 * 2);
        assert!(lines[2].starts_with("0,23,"));
        let mut bin = Vec::new();
        b.write_binary(&mut bin).unwrap();
        assert_eq!(bin.len(), 4 + 16 + 2 + 3 * 2 * 8);
        let (hours, paths) = ScenarioBatch::read_binary(bin.as_slice()).unwrap();
        assert_eq!(hours, vec![22, 23]);
        assert_eq!(paths, b.paths);
    }

    #[test]
    fn engine_json_round_trip_and_corruption() {
        let dev = matrix(gaussian_rows(60, 3, 5.0, 16), vec![0, 1, 2]);
        let e = fit_unconditional(label(60), &dev, &EngineConfig::default()).unwrap();
        let back = FittedEngine::from_json(&e.to_json().unwrap()).unwrap();
        assert_eq!(e, back);
        let mut broken = e.clone();
        broken.marginals.pop();
        let err = FittedEngine::from_json(&broken.to_json().unwrap()).unwrap_err();
        assert!(matches!(err, Error::EngineCorrupt(_)));
        assert!(matches!(
            FittedEngine::from_json("{"),
            Err(Error::EngineCorrupt(_))
        ));
    }

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(1, &[2, 3]), derive_seed(1, &[2, 3]));
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_ne!(derive_seed(1, &[2]), derive_seed(2, &[2]));
        assert_eq!(hash_str("a"), 0xaf63_dc4c_8601_ec8c);
    }

    fn two_zone_loads(n: usize, coupling: f64, seed: u64) -> (DayMatrix, DayMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = DMatrix::zeros(n, HOURS);
        let mut b = DMatrix::zeros(n, HOURS);
        for i in 0..n {
            let level: f64 = rng.sample(StandardNormal);
            for h in 0..HOURS {
                let shape = 1.0 + 0.3 * ((h as f64 - 6.0) / 24.0 * std::f64::consts::TAU).sin();
                let e1: f64 = rng.sample(StandardNormal);
                let e2: f64 = rng.sample(StandardNormal);
                let x1 = level + 0.3 * e1;
                a[(i, h)] = 1000.0 * shape + 80.0 * x1;
                b[(i, h)] = 500.0 * shape + 40.0 * (coupling * x1 + (1.0 - coupling) * e2);
            }
        }
        let full: Vec<u8> = (0..HOURS as u8).collect();
        (matrix(a, full.clone()), matrix(b, full))
    }

    #[test]
    fn duplicated_zone_tracks_zone_one() {
        let (z1, _) = two_zone_loads(300, 1.0, 17);
        // Deviation spread comparable to the load spread.
        let dev = matrix(gaussian_rows(300, 12, 80.0, 18), (12..24).collect());
        let cfg = EngineConfig::default();
        let e = fit_conditional(
            EngineLabel::new("B", "11", day(300)),
            "A",
            &z1,
            &z1,
            &dev,
            &cfg,
        )
        .unwrap();
        let c = e.conditional.as_ref().unwrap();
        let cov = &c.joint.covariance;
        for i in 0..HOURS {
            assert!((cov[(i, i + HOURS)] - cov[(i, i)]).abs() < 0.05);
        }
        let f: Vec<f64> = (12..24).map(|h| z1.values.column(h).mean()).collect();
        let (p1, p2) = simulate_conditional_pair(&e, e.label.cutoff, &f, 2000, 19).unwrap();
        assert_eq!(p2.zone_id, "B");
        assert_eq!(p2.hours, (12..24).collect::<Vec<u8>>());
        for j in 0..12 {
            let a = p1.paths.column(j);
            let b = p2.paths.column(j);
            let (ma, mb) = (a.mean(), b.mean());
            let cab: f64 = a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (x - ma) * (y - mb))
                .sum();
            let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
            let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
            assert!(cab / (va * vb).sqrt() > 0.95, "hour {j}");
        }
    }

    #[test]
    fn independent_zones_have_small_cross_block() {
        let (z1, z2) = two_zone_loads(400, 0.0, 20);
        let dev = matrix(gaussian_rows(400, 24, 20.0, 21), (0..24).collect());
        let e = fit_conditional(
            EngineLabel::new("B", "da", day(400)),
            "A",
            &z1,
            &z2,
            &dev,
            &EngineConfig::default(),
        )
        .unwrap();
        let cov = &e.conditional.as_ref().unwrap().joint.covariance;
        let max_cross = cov.view((0, HOURS), (HOURS, HOURS)).amax();
        assert!(max_cross < 0.2, "{max_cross}");
    }

    #[test]
    fn conditional_inputs_must_align() {
        let (z1, z2) = two_zone_loads(100, 0.5, 22);
        let dev = matrix(gaussian_rows(100, 24, 20.0, 23), (0..24).collect());
        let shorter = z2.select_days(&z2.days[1..].iter().copied().collect());
        let err = fit_conditional(
            EngineLabel::new("B", "da", day(100)),
            "A",
            &z1,
            &shorter,
            &dev,
            &EngineConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Alignment(_)));
    }

    #[test]
    fn conditional_determinism_and_gaussian_scores() {
        let (z1, z2) = two_zone_loads(200, 0.5, 24);
        let dev = matrix(gaussian_rows(200, 6, 20.0, 25), (18..24).collect());
        let e = fit_conditional(
            EngineLabel::new("B", "17", day(200)),
            "A",
            &z1,
            &z2,
            &dev,
            &EngineConfig::default(),
        )
        .unwrap();
        let f: Vec<f64> = (18..24).map(|h| z1.values.column(h).mean()).collect();
        let a = simulate_conditional(&e, e.label.cutoff, &f, 500, 3).unwrap();
        let b = simulate_conditional(&e, e.label.cutoff, &f, 500, 3).unwrap();
        assert_eq!(a, b);
        let m = &e.conditional.as_ref().unwrap().zone2_marginals[20];
        let p = m.cdf(a.paths[(0, 2)]);
        assert!(p > EPS && p < 1.0 - EPS);
        let back = FittedEngine::from_json(&e.to_json().unwrap()).unwrap();
        assert_eq!(back, e);
    }
}
