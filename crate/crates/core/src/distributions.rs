//! Semi-parametric marginals: an interpolated empirical body between two
//! thresholds with generalized Pareto tails on either side, plus the
//! probability-integral transforms to and from standard normal coordinates.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal;

/// CDF values are clamped to `[EPS, 1 - EPS]`.
pub const EPS: f64 = 1e-12;

pub const DEFAULT_TAIL_FRACTION: f64 = 0.15;
pub const MIN_SAMPLES: usize = 30;
const MIN_EXCEEDANCES: usize = 3;

const XI_MIN: f64 = -0.95;
const XI_MAX: f64 = 2.0;
const XI_ZERO: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TailSide {
    Upper,
    Lower,
}

impl TailSide {
    fn name(self) -> &'static str {
        match self {
            TailSide::Upper => "upper",
            TailSide::Lower => "lower",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    Mle,
    /// Probability-weighted moments, used when the likelihood search fails.
    Pwm,
}

/// Generalized Pareto distribution of exceedances `y >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gpd {
    pub shape: f64,
    pub scale: f64,
}

impl Gpd {
    pub fn new(shape: f64, scale: f64) -> Result<Gpd> {
        if !(scale > 0.0 && scale.is_finite() && shape.is_finite()) {
            return Err(Error::Domain(format!(
                "invalid GPD parameters xi={shape} beta={scale}"
            )));
        }
        Ok(Gpd { shape, scale })
    }

    /// Upper end of the support (finite only for negative shape).
    pub fn support_max(&self) -> f64 {
        if self.shape < 0.0 {
            -self.scale / self.shape
        } else {
            f64::INFINITY
        }
    }

    /// `P(Y > y)`.
    pub fn sf(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return 1.0;
        }
        let u = y / self.scale;
        if self.shape.abs() < XI_ZERO {
            return (-u).exp();
        }
        let a = self.shape * u;
        if a <= -1.0 {
            return 0.0;
        }
        (-(a.ln_1p()) / self.shape).exp()
    }

    pub fn cdf(&self, y: f64) -> f64 {
        1.0 - self.sf(y)
    }

    /// Inverse survival function: `y` with `sf(y) = s`.
    pub fn isf(&self, s: f64) -> f64 {
        if s >= 1.0 {
            return 0.0;
        }
        if s <= 0.0 {
            return self.support_max();
        }
        if self.shape.abs() < XI_ZERO {
            return -self.scale * s.ln();
        }
        self.scale * (-self.shape * s.ln()).exp_m1() / self.shape
    }

    pub fn quantile(&self, p: f64) -> f64 {
        self.isf(1.0 - p)
    }

    pub fn log_likelihood(&self, exceedances: &[f64]) -> f64 {
        -neg_log_likelihood(self.shape, self.scale.ln(), exceedances)
    }
}

fn neg_log_likelihood(xi: f64, log_scale: f64, y: &[f64]) -> f64 {
    let scale = log_scale.exp();
    let n = y.len() as f64;
    if xi.abs() < XI_ZERO {
        return n * log_scale + y.iter().sum::<f64>() / scale;
    }
    let mut acc = 0.0;
    for &v in y {
        let a = xi * v / scale;
        if a <= -1.0 {
            return f64::INFINITY;
        }
        acc += a.ln_1p();
    }
    n * log_scale + (1.0 + 1.0 / xi) * acc
}

fn gradient(xi: f64, log_scale: f64, y: &[f64]) -> [f64; 2] {
    let scale = log_scale.exp();
    let n = y.len() as f64;
    let mut d_xi = 0.0;
    let mut sum_ratio = 0.0;
    if xi.abs() < 1e-5 {
        // Second-order expansion of (1 + 1/xi) ln(1 + xi u) around xi = 0.
        for &v in y {
            let u = v / scale;
            d_xi += (u - 0.5 * u * u) + 2.0 * xi * (u * u * u / 3.0 - 0.5 * u * u);
            sum_ratio += u / (1.0 + xi * u);
        }
    } else {
        let mut sum_log = 0.0;
        for &v in y {
            let u = v / scale;
            let a = 1.0 + xi * u;
            sum_log += (xi * u).ln_1p();
            sum_ratio += u / a;
        }
        d_xi = -sum_log / (xi * xi) + (1.0 + 1.0 / xi) * sum_ratio;
    }
    [d_xi, n - (1.0 + xi) * sum_ratio]
}

/// Probability-weighted-moment estimates (Hosking and Wallis).
pub fn gpd_pwm(exceedances: &[f64]) -> Option<Gpd> {
    let n = exceedances.len();
    if n < 2 {
        return None;
    }
    let mut y = exceedances.to_vec();
    y.sort_by(f64::total_cmp);
    let a0 = y.iter().sum::<f64>() / n as f64;
    let a1 = y
        .iter()
        .enumerate()
        .map(|(i, v)| v * (n - 1 - i) as f64 / (n - 1) as f64)
        .sum::<f64>()
        / n as f64;
    let denom = a0 - 2.0 * a1;
    if denom <= 0.0 || !denom.is_finite() {
        return None;
    }
    let xi = 2.0 - a0 / denom;
    let scale = 2.0 * a0 * a1 / denom;
    Gpd::new(xi, scale).ok()
}

/// Outcome of the likelihood search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpdFitDiagnostics {
    pub method: FitMethod,
    pub iterations: usize,
    pub converged: bool,
    pub log_likelihood: f64,
    pub gradient_norm: f64,
}

/// Maximum-likelihood GPD fit over `(xi, ln beta)` with a projected BFGS
/// search started from the PWM estimates. Falls back to the PWM estimates
/// if the search fails.
pub fn fit_gpd(exceedances: &[f64]) -> Result<(Gpd, GpdFitDiagnostics)> {
    fit_gpd_side(exceedances, TailSide::Upper)
}

fn fit_gpd_side(y: &[f64], side: TailSide) -> Result<(Gpd, GpdFitDiagnostics)> {
    let n = y.len();
    let fail = |msg: String| Error::Fit {
        side: side.name(),
        n,
        msg,
    };
    if n < MIN_EXCEEDANCES {
        return Err(fail(format!("need at least {MIN_EXCEEDANCES} exceedances")));
    }
    if y.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(fail("exceedances must be finite and non-negative".into()));
    }
    let mean = y.iter().sum::<f64>() / n as f64;
    let max = y.iter().copied().fold(0.0, f64::max);
    if mean <= 0.0 {
        return Err(fail("all exceedances are zero".into()));
    }

    let pwm = gpd_pwm(y);
    let mut start = match pwm {
        Some(g) => [g.shape.clamp(XI_MIN + 0.05, 0.9), g.scale.ln()],
        None => [0.0, mean.ln()],
    };
    if start[0] < 0.0 {
        // Keep every exceedance inside the support.
        start[1] = start[1].max((-start[0] * max * 1.5).ln());
    }
    if !neg_log_likelihood(start[0], start[1], y).is_finite() {
        start = [0.0, mean.ln()];
    }

    let res = bfgs(start, y);
    if res.converged && res.f.is_finite() {
        let g = Gpd::new(res.x[0], res.x[1].exp()).map_err(|e| fail(e.to_string()))?;
        return Ok((
            g,
            GpdFitDiagnostics {
                method: FitMethod::Mle,
                iterations: res.iterations,
                converged: true,
                log_likelihood: -res.f,
                gradient_norm: res.grad_norm,
            },
        ));
    }
    match pwm {
        Some(g) if neg_log_likelihood(g.shape, g.scale.ln(), y).is_finite() => Ok((
            g,
            GpdFitDiagnostics {
                method: FitMethod::Pwm,
                iterations: res.iterations,
                converged: false,
                log_likelihood: g.log_likelihood(y),
                gradient_norm: res.grad_norm,
            },
        )),
        _ => Err(fail(format!(
            "likelihood search did not converge after {} iterations (|grad|={:.3e}) and PWM estimates are unusable",
            res.iterations, res.grad_norm
        ))),
    }
}

struct SearchResult {
    x: [f64; 2],
    f: f64,
    iterations: usize,
    converged: bool,
    grad_norm: f64,
}

fn projected(g: [f64; 2], x: [f64; 2]) -> [f64; 2] {
    let mut p = g;
    if (x[0] <= XI_MIN && g[0] > 0.0) || (x[0] >= XI_MAX && g[0] < 0.0) {
        p[0] = 0.0;
    }
    p
}

fn bfgs(x0: [f64; 2], y: &[f64]) -> SearchResult {
    const MAX_ITER: usize = 500;
    let n = y.len() as f64;
    let gtol = 1e-8 * n;
    let mut x = x0;
    let mut f = neg_log_likelihood(x[0], x[1], y);
    let mut g = gradient(x[0], x[1], y);
    let mut h: [[f64; 2]; 2] = [[1.0, 0.0], [0.0, 1.0]];
    let mut iterations = 0;
    let norm = |v: [f64; 2]| v[0].abs().max(v[1].abs());

    while iterations < MAX_ITER {
        let pg = projected(g, x);
        if norm(pg) <= gtol {
            return SearchResult {
                x,
                f,
                iterations,
                converged: true,
                grad_norm: norm(pg),
            };
        }
        iterations += 1;
        let pinned = pg[0] == 0.0 && g[0] != 0.0;
        if pinned {
            // Shape held at a bound: search over the scale alone.
            h = [[1.0, 0.0], [0.0, h[1][1].max(1e-8)]];
        }
        let mut dir = if pinned {
            [0.0, -h[1][1] * g[1]]
        } else {
            [
                -(h[0][0] * g[0] + h[0][1] * g[1]),
                -(h[1][0] * g[0] + h[1][1] * g[1]),
            ]
        };
        if dir[0] * g[0] + dir[1] * g[1] >= 0.0 {
            // Not a descent direction: reset to steepest descent.
            h = [[1.0, 0.0], [0.0, 1.0]];
            dir = [-pg[0], -pg[1]];
        }
        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-14 {
            let mut xn = [x[0] + t * dir[0], x[1] + t * dir[1]];
            xn[0] = xn[0].clamp(XI_MIN, XI_MAX);
            let fnew = neg_log_likelihood(xn[0], xn[1], y);
            let step_slope = (xn[0] - x[0]) * g[0] + (xn[1] - x[1]) * g[1];
            if fnew.is_finite() && fnew <= f + 1e-4 * step_slope {
                accepted = Some((xn, fnew));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            let pg = projected(g, x);
            let converged = norm(pg) <= gtol * 1e3;
            return SearchResult {
                x,
                f,
                iterations,
                converged,
                grad_norm: norm(pg),
            };
        };
        let gn = gradient(xn[0], xn[1], y);
        let s = [xn[0] - x[0], xn[1] - x[1]];
        let yv = [gn[0] - g[0], gn[1] - g[1]];
        let sy = s[0] * yv[0] + s[1] * yv[1];
        if sy > 1e-14 {
            let hy = [
                h[0][0] * yv[0] + h[0][1] * yv[1],
                h[1][0] * yv[0] + h[1][1] * yv[1],
            ];
            let yhy = yv[0] * hy[0] + yv[1] * hy[1];
            let rho = 1.0 / sy;
            for i in 0..2 {
                for j in 0..2 {
                    h[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j])
                        + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }
        let df = f - fnew;
        x = xn;
        f = fnew;
        g = gn;
        if df.abs() <= 1e-15 * (1.0 + f.abs()) && norm(projected(g, x)) <= gtol * 1e3 {
            return SearchResult {
                x,
                f,
                iterations,
                converged: true,
                grad_norm: norm(projected(g, x)),
            };
        }
    }
    let pg = projected(g, x);
    SearchResult {
        x,
        f,
        iterations,
        converged: norm(pg) <= gtol * 1e3,
        grad_norm: norm(pg),
    }
}

/// One fitted tail of a semi-parametric marginal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpdTail {
    pub side: TailSide,
    pub threshold: f64,
    pub shape: f64,
    pub scale: f64,
    /// Fraction of the sample beyond the threshold.
    pub tail_fraction: f64,
    pub n_exceedances: usize,
    pub method: FitMethod,
}

impl GpdTail {
    pub fn gpd(&self) -> Gpd {
        Gpd {
            shape: self.shape,
            scale: self.scale,
        }
    }

    fn distance(&self, x: f64) -> f64 {
        match self.side {
            TailSide::Upper => x - self.threshold,
            TailSide::Lower => self.threshold - x,
        }
    }

    /// Probability mass further out than `x` (which must lie in the tail).
    fn outer_mass(&self, x: f64) -> f64 {
        self.tail_fraction * self.gpd().sf(self.distance(x))
    }

    /// Point further out than the threshold with outer mass `m`.
    fn at_outer_mass(&self, m: f64) -> f64 {
        let y = self.gpd().isf(m / self.tail_fraction);
        match self.side {
            TailSide::Upper => self.threshold + y,
            TailSide::Lower => self.threshold - y,
        }
    }
}

/// Empirical body with GPD tails, stitched continuously at both thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiParametricMarginal {
    pub hour: u8,
    pub n: usize,
    pub lower: GpdTail,
    pub upper: GpdTail,
    /// Distinct body points, ascending, from the lower to the upper threshold.
    pub body_x: Vec<f64>,
    /// CDF at each body point; `p_lower` at the first and `1 - p_upper` at the last.
    pub body_p: Vec<f64>,
}

/// Fits a marginal to `samples` with `tail_fraction` of the sample in each tail.
pub fn fit_marginal(samples: &[f64], tail_fraction: f64) -> Result<SemiParametricMarginal> {
    let n = samples.len();
    if n < MIN_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "marginal fit needs at least {MIN_SAMPLES} samples, got {n}"
        )));
    }
    if !(tail_fraction > 0.0 && tail_fraction <= 0.5) {
        return Err(Error::Config(format!(
            "tail fraction {tail_fraction} outside (0, 0.5]"
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("samples must be finite".into()));
    }
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    if x[n - 1] - x[0] <= 0.0 {
        return Err(Error::Degenerate(format!("all {n} samples equal {}", x[0])));
    }

    // At least two body points remain.
    let k = ((tail_fraction * n as f64).round() as usize).min((n - 2) / 2);
    let lo = k;
    let hi = n - 1 - k;
    let u_lower = x[lo];
    let u_upper = x[hi];
    if u_upper <= u_lower {
        return Err(Error::Degenerate(format!(
            "tail thresholds coincide at {u_lower}; too many ties"
        )));
    }
    let p_tail = k as f64 / n as f64;

    let lower_exc: Vec<f64> = x[..lo].iter().map(|v| u_lower - v).collect();
    let upper_exc: Vec<f64> = x[hi + 1..].iter().map(|v| v - u_upper).collect();
    let (gl, dl) = fit_gpd_side(&lower_exc, TailSide::Lower)?;
    let (gu, du) = fit_gpd_side(&upper_exc, TailSide::Upper)?;

    // Body CDF rises linearly in rank from p_tail at the lower threshold to
    // 1 - p_tail at the upper one; ties keep the right-continuous value.
    let span = (hi - lo) as f64;
    let mut body_x: Vec<f64> = Vec::with_capacity(hi - lo + 1);
    let mut body_p: Vec<f64> = Vec::with_capacity(hi - lo + 1);
    for (r, &v) in x[lo..=hi].iter().enumerate() {
        let p = p_tail + (1.0 - 2.0 * p_tail) * r as f64 / span;
        if body_x.last() == Some(&v) {
            *body_p.last_mut().expect("non-empty") = p;
        } else {
            body_x.push(v);
            body_p.push(p);
        }
    }

    Ok(SemiParametricMarginal {
        hour: 0,
        n,
        lower: GpdTail {
            side: TailSide::Lower,
            threshold: u_lower,
            shape: gl.shape,
            scale: gl.scale,
            tail_fraction: p_tail,
            n_exceedances: lower_exc.len(),
            method: dl.method,
        },
        upper: GpdTail {
            side: TailSide::Upper,
            threshold: u_upper,
            shape: gu.shape,
            scale: gu.scale,
            tail_fraction: p_tail,
            n_exceedances: upper_exc.len(),
            method: du.method,
        },
        body_x,
        body_p,
    })
}

impl SemiParametricMarginal {
    pub fn with_hour(mut self, hour: u8) -> Self {
        self.hour = hour;
        self
    }

    /// `(P(X <= x), P(X > x))`, each computed without cancellation in its own tail.
    fn cdf_sf(&self, x: f64) -> (f64, f64) {
        if x.is_nan() {
            return (f64::NAN, f64::NAN);
        }
        if x < self.lower.threshold {
            let p = self.lower.outer_mass(x);
            (p, 1.0 - p)
        } else if x > self.upper.threshold {
            let s = self.upper.outer_mass(x);
            (1.0 - s, s)
        } else {
            let p = self.body_cdf(x);
            (p, 1.0 - p)
        }
    }

    fn body_cdf(&self, x: f64) -> f64 {
        let i = self.body_x.partition_point(|&v| v <= x);
        if i == 0 {
            return self.body_p[0];
        }
        if i == self.body_x.len() {
            return *self.body_p.last().expect("non-empty body");
        }
        let (x0, x1) = (self.body_x[i - 1], self.body_x[i]);
        let (p0, p1) = (self.body_p[i - 1], self.body_p[i]);
        p0 + (p1 - p0) * (x - x0) / (x1 - x0)
    }

    fn body_quantile(&self, p: f64) -> f64 {
        let i = self.body_p.partition_point(|&v| v < p);
        if i == 0 {
            return self.body_x[0];
        }
        if i == self.body_p.len() {
            return *self.body_x.last().expect("non-empty body");
        }
        let (x0, x1) = (self.body_x[i - 1], self.body_x[i]);
        let (p0, p1) = (self.body_p[i - 1], self.body_p[i]);
        x0 + (x1 - x0) * (p - p0) / (p1 - p0)
    }

    /// CDF clamped to `[EPS, 1 - EPS]`.
    pub fn cdf(&self, x: f64) -> f64 {
        self.cdf_sf(x).0.clamp(EPS, 1.0 - EPS)
    }

    /// Survival function clamped to `[EPS, 1 - EPS]`.
    pub fn sf(&self, x: f64) -> f64 {
        self.cdf_sf(x).1.clamp(EPS, 1.0 - EPS)
    }

    /// Quantile for `p` in the open unit interval.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("probability {p} outside (0, 1)")));
        }
        Ok(self.quantile_pq(p, 1.0 - p))
    }

    /// Quantile given both `p` and its complement `s = 1 - p`; whichever is
    /// smaller is used in its tail.
    fn quantile_pq(&self, p: f64, s: f64) -> f64 {
        if p < self.lower.tail_fraction {
            self.lower.at_outer_mass(p)
        } else if s < self.upper.tail_fraction {
            self.upper.at_outer_mass(s)
        } else {
            self.body_quantile(p)
        }
    }

    /// Median of the fitted distribution.
    pub fn median(&self) -> f64 {
        self.quantile_pq(0.5, 0.5)
    }

    /// Standard-normal score of `x`: `Q^{-1}(F(x))`.
    pub fn gaussianize(&self, x: f64) -> f64 {
        let (p, s) = self.cdf_sf(x);
        if p <= 0.5 {
            normal::quantile(p.clamp(EPS, 1.0 - EPS))
        } else {
            normal::isf(s.clamp(EPS, 1.0 - EPS))
        }
    }

    /// Inverse of [`gaussianize`](Self::gaussianize): `F^{-1}(Q(z))`.
    pub fn degaussianize(&self, z: f64) -> f64 {
        let (p, s) = if z <= 0.0 {
            let p = normal::cdf(z);
            (p, 1.0 - p)
        } else {
            let s = normal::sf(z);
            (1.0 - s, s)
        };
        self.quantile_pq(p.clamp(EPS, 1.0 - EPS), s.clamp(EPS, 1.0 - EPS))
    }
}

/// Columns of a training matrix mapped to standard-normal scores through
/// their fitted marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianizedPanel {
    pub values: DMatrix<f64>,
    pub marginals: Vec<SemiParametricMarginal>,
}

/// Per-column moments of a Gaussianized panel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnCheck {
    pub mean: f64,
    pub variance: f64,
    pub passed: bool,
}

impl GaussianizedPanel {
    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    /// Sanity check per column: `|mean| <= 4/sqrt(N)` and the second moment
    /// inside the two-sided 99.9% chi-square band divided by `N`.
    pub fn normality_check(&self) -> Vec<ColumnCheck> {
        let n = self.values.nrows() as f64;
        let (lo, hi) = chi2_band(self.values.nrows(), 0.999);
        self.values
            .column_iter()
            .map(|c| {
                let mean = c.sum() / n;
                let variance = c.iter().map(|v| v * v).sum::<f64>() / n;
                let passed =
                    mean.abs() <= 4.0 / n.sqrt() && variance >= lo / n && variance <= hi / n;
                ColumnCheck {
                    mean,
                    variance,
                    passed,
                }
            })
            .collect()
    }
}

/// Two-sided chi-square band with `dof` degrees of freedom at `level`,
/// via the Wilson-Hilferty cube approximation.
pub fn chi2_band(dof: usize, level: f64) -> (f64, f64) {
    let k = dof as f64;
    let z = normal::isf((1.0 - level) / 2.0);
    let c = 2.0 / (9.0 * k);
    let q = |z: f64| k * (1.0 - c + z * c.sqrt()).powi(3).max(0.0);
    (q(-z), q(z))
}

/// Fits one marginal per column and Gaussianizes the matrix.
pub fn gaussianize_matrix(
    data: &DMatrix<f64>,
    hours: &[u8],
    tail_fraction: f64,
) -> Result<GaussianizedPanel> {
    if hours.len() != data.ncols() {
        return Err(Error::Layout(format!(
            "{} hour labels for {} columns",
            hours.len(),
            data.ncols()
        )));
    }
    let fit_col = |j: usize| -> Result<SemiParametricMarginal> {
        let col: Vec<f64> = data.column(j).iter().copied().collect();
        fit_marginal(&col, tail_fraction)
            .map(|m| m.with_hour(hours[j]))
            .map_err(|e| e.at(format!("hour {}", hours[j])))
    };
    #[cfg(feature = "parallel")]
    let marginals: Result<Vec<_>> = {
        use rayon::prelude::*;
        (0..data.ncols()).into_par_iter().map(fit_col).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let marginals: Result<Vec<_>> = (0..data.ncols()).map(fit_col).collect();
    let marginals = marginals?;
    let values = DMatrix::from_fn(data.nrows(), data.ncols(), |i, j| {
        marginals[j].gaussianize(data[(i, j)])
    });
    Ok(GaussianizedPanel { values, marginals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gpd_samples(xi: f64, beta: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                // Inverse CDF written out independently of `Gpd`.
                if xi == 0.0 {
                    -beta * (1.0 - u).ln()
                } else {
                    beta * ((1.0 - u).powf(-xi) - 1.0) / xi
                }
            })
            .collect()
    }

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn gpd_mle_recovers_parameters() {
        for (i, &xi) in [-0.2, 0.0, 0.2, 0.3].iter().enumerate() {
            let y = gpd_samples(xi, 1.0, 5000, 11 + i as u64);
            let (g, diag) = fit_gpd(&y).unwrap();
            assert_eq!(diag.method, FitMethod::Mle, "xi={xi}");
            assert!((g.shape - xi).abs() < 0.1, "xi={xi} fitted {}", g.shape);
            assert!((g.scale - 1.0).abs() < 0.15, "xi={xi} beta {}", g.scale);
        }
    }

    #[test]
    fn mle_beats_pwm_likelihood() {
        let y = gpd_samples(0.25, 2.0, 800, 5);
        let (g, _) = fit_gpd(&y).unwrap();
        let pwm = gpd_pwm(&y).unwrap();
        assert!(g.log_likelihood(&y) >= pwm.log_likelihood(&y) - 1e-9);
    }

    #[test]
    fn gpd_isf_inverts_sf() {
        for &xi in &[-0.4, 0.0, 1e-12, 0.3, 1.2] {
            let g = Gpd::new(xi, 1.7).unwrap();
            for &s in &[0.9, 0.5, 0.1, 1e-3, 1e-9] {
                let y = g.isf(s);
                assert!(((g.sf(y) - s) / s).abs() < 1e-10, "xi={xi} s={s}");
            }
        }
        let bounded = Gpd::new(-0.5, 1.0).unwrap();
        assert_eq!(bounded.support_max(), 2.0);
        assert_eq!(bounded.sf(2.5), 0.0);
    }

    #[test]
    fn constant_samples_are_degenerate() {
        let err = fit_marginal(&[3.0; 100], 0.15).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn marginal_rejects_bad_inputs() {
        assert!(matches!(
            fit_marginal(&normals(10, 1), 0.15),
            Err(Error::InsufficientData(_))
        ));
        assert!(fit_marginal(&normals(100, 1), 0.0).is_err());
        assert!(fit_marginal(&normals(100, 1), 0.6).is_err());
    }

    #[test]
    fn half_tail_fraction_keeps_a_body() {
        let m = fit_marginal(&normals(200, 4), 0.5).unwrap();
        assert!(m.body_x.len() >= 2);
        assert!(m.lower.threshold < m.upper.threshold);
    }

    #[test]
    fn symmetric_samples_have_symmetric_thresholds() {
        let mut x = normals(4000, 2);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        x.extend(neg);
        let m = fit_marginal(&x, 0.15).unwrap();
        let med = m.median();
        assert!(med.abs() < 1e-9);
        assert!((m.upper.threshold - med + (m.lower.threshold - med)).abs() < 1e-9);
        assert!((m.upper.shape - m.lower.shape).abs() < 1e-6);
    }

    #[test]
    fn cdf_at_median_and_limits() {
        let x = normals(1001, 3);
        let m = fit_marginal(&x, 0.15).unwrap();
        let mut sorted = x.clone();
        sorted.sort_by(f64::total_cmp);
        let med = sorted[500];
        assert!((m.cdf(med) - 0.5).abs() <= 1.0 / 1001.0);
        assert_eq!(m.cdf(f64::INFINITY), 1.0 - EPS);
        assert_eq!(m.cdf(1e300), 1.0 - EPS);
        assert_eq!(m.cdf(-1e300), EPS);
    }

    #[test]
    fn stitch_points() {
        let m = fit_marginal(&normals(2000, 7), 0.15).unwrap();
        let pu = m.upper.tail_fraction;
        assert!((m.cdf(m.upper.threshold) - (1.0 - pu)).abs() < 1e-12);
        assert!((m.quantile(1.0 - pu).unwrap() - m.upper.threshold).abs() < 1e-9);
        assert!((m.cdf(m.lower.threshold) - m.lower.tail_fraction).abs() < 1e-12);
        // Continuity across each threshold.
        for u in [m.lower.threshold, m.upper.threshold] {
            assert!((m.cdf(u - 1e-9) - m.cdf(u + 1e-9)).abs() < 1e-6);
        }
        // Tail fraction matches the empirical fraction beyond u within one sample.
        let x = normals(2000, 7);
        let beyond = x.iter().filter(|v| **v > m.upper.threshold).count() as f64 / 2000.0;
        assert!((beyond - pu).abs() <= 1.0 / 2000.0);
    }

    #[test]
    fn quantile_domain() {
        let m = fit_marginal(&normals(100, 8), 0.15).unwrap();
        assert!(matches!(m.quantile(0.0), Err(Error::Domain(_))));
        assert!(matches!(m.quantile(1.0), Err(Error::Domain(_))));
        assert!(m.quantile(-0.2).is_err());
    }

    #[test]
    fn far_quantile_follows_closed_form_gpd() {
        let n = 500;
        let x: Vec<f64> = gpd_samples(0.3, 1.0, n, 21);
        let m = fit_marginal(&x, 0.15).unwrap();
        assert!(m.upper.shape > 0.0);
        let p = 0.999;
        assert!(p > 1.0 - 1.0 / n as f64);
        let q = m.quantile(p).unwrap();
        let (xi, beta, pu) = (m.upper.shape, m.upper.scale, m.upper.tail_fraction);
        let closed = m.upper.threshold + beta / xi * (((1.0 - p) / pu).powf(-xi) - 1.0);
        assert!((q - closed).abs() < 1e-9 * closed.abs());
        let max = x.iter().copied().fold(f64::MIN, f64::max);
        assert!(q > max, "q={q} max={max}");
    }

    #[test]
    fn gaussianize_median_is_zero() {
        let x = normals(999, 9);
        let m = fit_marginal(&x, 0.15).unwrap();
        let mut s = x.clone();
        s.sort_by(f64::total_cmp);
        assert!(m.gaussianize(s[499]).abs() < 1e-9);
    }

    #[test]
    fn chi2_band_is_sane() {
        let (lo, hi) = chi2_band(100, 0.999);
        // Exact quantiles: 59.8957 and 153.1670.
        assert!((lo - 59.8957).abs() < 0.5, "{lo}");
        assert!((hi - 153.1670).abs() < 0.5, "{hi}");
    }

    #[test]
    fn panel_columns_pass_normality_check() {
        let n = 300;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let data = DMatrix::from_fn(n, 3, |_, j| {
            let z: f64 = rng.sample(StandardNormal);
            (z * (j + 1) as f64).exp()
        });
        let panel = gaussianize_matrix(&data, &[0, 1, 2], 0.15).unwrap();
        for c in panel.normality_check() {
            assert!(c.passed, "{c:?}");
        }
        assert!(gaussianize_matrix(&data, &[0, 1], 0.15).is_err());
    }

    #[test]
    fn panel_errors_name_the_hour() {
        let mut data = DMatrix::from_fn(40, 2, |i, _| i as f64);
        data.column_mut(1).fill(5.0);
        let err = gaussianize_matrix(&data, &[12, 13], 0.15).unwrap_err();
        assert!(err.to_string().contains("hour 13"), "{err}");
    }

    fn ks_statistic(mut z: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
        z.sort_by(f64::total_cmp);
        let n = z.len() as f64;
        z.iter()
            .enumerate()
            .map(|(i, &v)| {
                let f = cdf(v);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn gaussianized_training_column_passes_ks() {
        use statrs::distribution::{ContinuousCDF, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x: Vec<f64> = (0..2000)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                100.0 + 40.0 * z + 10.0 * z.powi(3).max(0.0)
            })
            .collect();
        let m = fit_marginal(&x, 0.15).unwrap();
        let z: Vec<f64> = x.iter().map(|v| m.gaussianize(*v)).collect();
        let n = Normal::new(0.0, 1.0).unwrap();
        let d = ks_statistic(z, |v| n.cdf(v));
        // Asymptotic 1% critical value.
        assert!(d < 1.628 / 2000f64.sqrt(), "D = {d}");
    }

    #[test]
    fn degaussianize_inverts_gaussianize_on_random_points() {
        let m = fit_marginal(&gpd_samples(0.2, 3.0, 2000, 17), 0.15).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let lo = m.lower.threshold - 3.0 * (m.upper.threshold - m.lower.threshold);
        let hi = m.upper.threshold + 10.0 * (m.upper.threshold - m.lower.threshold);
        for _ in 0..1000 {
            let x = rng.random_range(lo.max(0.0)..hi);
            let back = m.degaussianize(m.gaussianize(x));
            assert!(
                (back - x).abs() <= 1e-6 * x.abs().max(1.0),
                "x={x} back={back}"
            );
        }
    }

    #[test]
    fn heavy_tail_exceeds_gaussian_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        // Student-t with 3 degrees of freedom.
        let x: Vec<f64> = (0..5000)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                let c: f64 = (0..3)
                    .map(|_| rng.sample::<f64, _>(StandardNormal).powi(2))
                    .sum();
                z / (c / 3.0).sqrt()
            })
            .collect();
        let m = fit_marginal(&x, 0.15).unwrap();
        assert!(m.upper.shape > 0.0 && m.lower.shape > 0.0);
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let start = m.quantile(0.995).unwrap();
        for i in 1..=50 {
            let t = start + i as f64 * 0.5;
            assert!(m.sf(t) > normal::sf((t - mean) / sd), "t={t}");
            let t = -start - i as f64 * 0.5;
            assert!(m.cdf(t) > normal::cdf((t - mean) / sd), "t={t}");
        }
    }

    #[test]
    fn cdf_strictly_increasing_on_fine_grid() {
        let m = fit_marginal(&normals(500, 31), 0.15).unwrap();
        let range = m.upper.threshold - m.lower.threshold;
        let (a, b) = (
            m.lower.threshold - 3.0 * range,
            m.upper.threshold + 3.0 * range,
        );
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=20000 {
            let x = a + (b - a) * i as f64 / 20000.0;
            let p = m.cdf(x);
            assert!(p > prev || p == EPS || p == 1.0 - EPS, "x={x}");
            prev = p;
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let m = fit_marginal(&normals(300, 41), 0.1).unwrap().with_hour(17);
        let text = serde_json::to_string(&m).unwrap();
        let back: SemiParametricMarginal = serde_json::from_str(&text).unwrap();
        assert_eq!(m, back);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn body_round_trip(seed in 0u64..10_000, frac in 0.05f64..0.3, u in 0.0f64..1.0) {
                let x = normals(200, seed);
                let m = fit_marginal(&x, frac).unwrap();
                let b = m.lower.threshold + u * (m.upper.threshold - m.lower.threshold);
                let back = m.quantile(m.cdf(b)).unwrap();
                prop_assert!((back - b).abs() < 1e-9, "b={} back={}", b, back);
            }

            #[test]
            fn cdf_monotone_with_unit_limits(seed in 0u64..10_000, a in -50.0f64..50.0, d in 0.0f64..10.0) {
                let m = fit_marginal(&normals(100, seed), 0.15).unwrap();
                prop_assert!(m.cdf(a) <= m.cdf(a + d));
                prop_assert!(m.cdf(a) > 0.0 && m.cdf(a) < 1.0);
                prop_assert!((m.cdf(a) + m.sf(a) - 1.0).abs() < 1e-12);
            }

            #[test]
            fn gaussianize_pair_inverts(seed in 0u64..10_000, z in -7.0f64..7.0) {
                let m = fit_marginal(&normals(150, seed), 0.15).unwrap();
                let x = m.degaussianize(z);
                let z2 = m.gaussianize(x);
                prop_assert!((z2 - z).abs() < 1e-6 * z.abs().max(1.0), "z={} z2={}", z, z2);
            }

            #[test]
            fn bounded_upper_tail_respects_support(seed in 0u64..10_000) {
                let y = gpd_samples(-0.3, 1.0, 400, seed);
                let (g, _) = fit_gpd(&y).unwrap();
                if g.shape < 0.0 {
                    let max = y.iter().copied().fold(0.0, f64::max);
                    prop_assert!(g.support_max() >= max - 1e-9);
                    prop_assert_eq!(g.sf(g.support_max() + 1.0), 0.0);
                }
            }
        }
    }
}
