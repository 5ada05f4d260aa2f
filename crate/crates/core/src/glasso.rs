//! Sparse Gaussian dependence models fitted with the graphical lasso, and
//! conditional Gaussian parameters for a subset of coordinates.

use std::ops::Range;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::distributions::GaussianizedPanel;
use crate::error::{Error, Result};
use crate::serial;

pub const DEFAULT_LAMBDA: f64 = 0.01;
pub const DEFAULT_FOLDS: usize = 5;

/// Which entries of the precision matrix the L1 penalty applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Penalty {
    #[default]
    OffDiagonal,
    Full,
}

/// Named contiguous index ranges, one per zone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub blocks: Vec<(String, Range<usize>)>,
}

impl BlockLayout {
    pub fn two_zones(zone1: &str, n1: usize, zone2: &str, n2: usize) -> BlockLayout {
        BlockLayout {
            blocks: vec![(zone1.to_string(), 0..n1), (zone2.to_string(), n1..n1 + n2)],
        }
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|(_, r)| r.end).max().unwrap_or(0)
    }

    pub fn block(&self, i: usize) -> Option<&Range<usize>> {
        self.blocks.get(i).map(|(_, r)| r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianDependenceModel {
    #[serde(with = "serial::matrix")]
    pub precision: DMatrix<f64>,
    #[serde(with = "serial::matrix")]
    pub covariance: DMatrix<f64>,
    pub lambda: f64,
    pub penalty: Penalty,
    pub layout: Option<BlockLayout>,
}

impl GaussianDependenceModel {
    pub fn dim(&self) -> usize {
        self.precision.nrows()
    }

    pub fn with_layout(mut self, layout: BlockLayout) -> Result<Self> {
        if layout.dim() != self.dim() {
            return Err(Error::Layout(format!(
                "layout spans {} coordinates, model has {}",
                layout.dim(),
                self.dim()
            )));
        }
        self.layout = Some(layout);
        Ok(self)
    }

    /// Number of nonzero off-diagonal pairs in the precision matrix.
    pub fn edge_count(&self, tol: f64) -> usize {
        let p = self.dim();
        (0..p)
            .flat_map(|i| (i + 1..p).map(move |j| (i, j)))
            .filter(|&(i, j)| self.precision[(i, j)].abs() > tol)
            .count()
    }

    /// Penalized negative log-likelihood `tr(S Θ) - log det Θ + λ‖Θ‖₁`.
    pub fn objective(&self, s: &DMatrix<f64>) -> f64 {
        let logdet = log_det_spd(&self.precision).unwrap_or(f64::NEG_INFINITY);
        (s * &self.precision).trace() - logdet
            + penalty_norm(&self.precision, self.lambda, self.penalty)
    }
}

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlassoOptions {
    pub penalty: Penalty,
    /// Stop when the duality gap is at most `tol * p`.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for GlassoOptions {
    fn default() -> Self {
        GlassoOptions {
            penalty: Penalty::OffDiagonal,
            tol: 1e-6,
            max_sweeps: 1000,
        }
    }
}

/// Per-sweep history of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlassoTrace {
    /// Penalized objective of the precision estimate after each sweep.
    pub objective: Vec<f64>,
    /// Dual objective `log det W + p` after each sweep; never decreases.
    pub dual: Vec<f64>,
    pub duality_gap: f64,
    pub sweeps: usize,
    pub converged: bool,
}

/// Second-moment matrix `XᵀX / N` of a Gaussianized panel.
pub fn empirical_covariance(panel: &GaussianizedPanel) -> Result<DMatrix<f64>> {
    second_moment(&panel.values)
}

/// `XᵀX / N`; columns are taken to be zero-mean already.
pub fn second_moment(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "covariance needs at least 2 rows, got {n}"
        )));
    }
    let s = x.transpose() * x / n as f64;
    Ok(symmetrize(&s))
}

pub fn glasso_fit(s: &DMatrix<f64>, lambda: f64) -> Result<GaussianDependenceModel> {
    glasso_fit_with(s, lambda, &GlassoOptions::default()).map(|(m, _)| m)
}

/// Block coordinate descent over the columns of `W = Θ⁻¹`, each column
/// solved as a lasso problem by cyclic coordinate descent.
pub fn glasso_fit_with(
    s: &DMatrix<f64>,
    lambda: f64,
    opts: &GlassoOptions,
) -> Result<(GaussianDependenceModel, GlassoTrace)> {
    let p = s.nrows();
    if p == 0 || s.ncols() != p {
        return Err(Error::Layout(format!(
            "covariance must be square, got {}x{}",
            p,
            s.ncols()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("covariance has non-finite entries".into()));
    }
    if (0..p).any(|i| s[(i, i)] <= 0.0) {
        return Err(Error::Domain(
            "covariance diagonal must be strictly positive".into(),
        ));
    }
    let s = symmetrize(s);
    if lambda == 0.0 && Cholesky::new(s.clone()).is_none() {
        return Err(Error::Singular(
            "covariance is singular and lambda = 0; use a positive lambda".into(),
        ));
    }
    let diag_pen = match opts.penalty {
        Penalty::OffDiagonal => 0.0,
        Penalty::Full => lambda,
    };

    let mut w = s.clone();
    for i in 0..p {
        w[(i, i)] += diag_pen;
    }
    // Warm-start coefficients, one column per coordinate.
    let mut beta = DMatrix::<f64>::zeros(p.saturating_sub(1), p);
    let mut trace = GlassoTrace {
        objective: Vec::new(),
        dual: Vec::new(),
        duality_gap: f64::INFINITY,
        sweeps: 0,
        converged: false,
    };
    let mut theta = DMatrix::<f64>::zeros(p, p);
    let mut w11 = DMatrix::<f64>::zeros(p - 1, p - 1);
    let mut s12 = DVector::<f64>::zeros(p - 1);
    for sweep in 1..=opts.max_sweeps.max(1) {
        for j in 0..p {
            let others: Vec<usize> = (0..p).filter(|&k| k != j).collect();
            for (a, &ia) in others.iter().enumerate() {
                s12[a] = s[(ia, j)];
                for (b, &ib) in others.iter().enumerate() {
                    w11[(a, b)] = w[(ia, ib)];
                }
            }
            let mut b = beta.column(j).clone_owned();
            lasso_cd(&w11, &s12, lambda, &mut b);
            let w12 = &w11 * &b;
            for (a, &ia) in others.iter().enumerate() {
                w[(ia, j)] = w12[a];
                w[(j, ia)] = w12[a];
            }
            beta.set_column(j, &b);
        }
        trace.sweeps = sweep;

        // Precision from the lasso coefficients, which keeps exact zeros.
        for j in 0..p {
            let b = beta.column(j);
            let mut w12b = 0.0;
            for (a, ia) in (0..p).filter(|&k| k != j).enumerate() {
                w12b += w[(ia, j)] * b[a];
            }
            let t_jj = 1.0 / (w[(j, j)] - w12b);
            theta[(j, j)] = t_jj;
            for (a, ia) in (0..p).filter(|&k| k != j).enumerate() {
                theta[(ia, j)] = -b[a] * t_jj;
            }
        }
        let theta_sym = symmetrize(&theta);
        let (Some(logdet_w), Some(logdet_t)) = (log_det_spd(&w), log_det_spd(&theta_sym)) else {
            continue;
        };
        let primal =
            (&s * &theta_sym).trace() - logdet_t + penalty_norm(&theta_sym, lambda, opts.penalty);
        let dual = logdet_w + p as f64;
        trace.objective.push(primal);
        trace.dual.push(dual);
        trace.duality_gap = primal - dual;
        if trace.duality_gap.abs() <= opts.tol * p as f64 {
            trace.converged = true;
            theta = theta_sym;
            break;
        }
    }

    if !trace.converged {
        return Err(Error::Singular(format!(
            "graphical lasso did not converge in {} sweeps (duality gap {:.3e}, lambda = {lambda})",
            trace.sweeps, trace.duality_gap
        )));
    }
    let covariance = Cholesky::new(theta.clone())
        .map(|c| symmetrize(&c.inverse()))
        .ok_or_else(|| {
            Error::Singular(format!(
                "fitted precision is not positive definite (lambda = {lambda})"
            ))
        })?;
    Ok((
        GaussianDependenceModel {
            precision: theta,
            covariance,
            lambda,
            penalty: opts.penalty,
            layout: None,
        },
        trace,
    ))
}

/// Minimizes `½ βᵀ V β - βᵀ u + λ‖β‖₁` in place.
/// Minimizes `½ βᵀ V β - βᵀ u + λ‖β‖₁` in place.
///
/// Cyclic coordinate descent, with the exact solution on the current support
/// tried every few passes; it is accepted when its signs match and the
/// optimality conditions hold off the support.
fn lasso_cd(v: &DMatrix<f64>, u: &DVector<f64>, lambda: f64, beta: &mut DVector<f64>) {
    let m = u.len();
    if m == 0 {
        return;
    }
    let scale = u.amax().max(1e-300);
    for pass in 1..=100_000 {
        let mut max_delta = 0.0f64;
        for k in 0..m {
            let mut r = u[k];
            for l in 0..m {
                if l != k {
                    r -= v[(k, l)] * beta[l];
                }
            }
            let new = soft_threshold(r, lambda) / v[(k, k)];
            max_delta = max_delta.max(((new - beta[k]) * v[(k, k)]).abs());
            beta[k] = new;
        }
        if max_delta <= 1e-13 * scale {
            return;
        }
        if pass % 4 == 0 && polish_on_support(v, u, lambda, beta) {
            return;
        }
    }
}

fn polish_on_support(
    v: &DMatrix<f64>,
    u: &DVector<f64>,
    lambda: f64,
    beta: &mut DVector<f64>,
) -> bool {
    let support: Vec<usize> = (0..u.len()).filter(|&k| beta[k] != 0.0).collect();
    let sign: Vec<f64> = support.iter().map(|&k| beta[k].signum()).collect();
    let mut b = DVector::<f64>::zeros(0);
    if !support.is_empty() {
        let v_aa = v.select_rows(&support).select_columns(&support);
        let rhs = DVector::from_iterator(
            support.len(),
            support.iter().zip(&sign).map(|(&k, s)| u[k] - lambda * s),
        );
        let Some(chol) = Cholesky::new(v_aa) else {
            return false;
        };
        b = chol.solve(&rhs);
        if b.iter().zip(&sign).any(|(x, s)| x * s <= 0.0) {
            return false;
        }
    }
    let slack = lambda * (1.0 + 1e-9) + 1e-14 * u.amax();
    for k in (0..u.len()).filter(|k| beta[*k] == 0.0) {
        let g = u[k]
            - support
                .iter()
                .zip(b.iter())
                .map(|(&l, x)| v[(k, l)] * x)
                .sum::<f64>();
        if g.abs() > slack {
            return false;
        }
    }
    for (&k, x) in support.iter().zip(b.iter()) {
        beta[k] = *x;
    }
    true
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

fn penalty_norm(theta: &DMatrix<f64>, lambda: f64, penalty: Penalty) -> f64 {
    let p = theta.nrows();
    let mut acc = 0.0;
    for i in 0..p {
        for j in 0..p {
            if i != j || penalty == Penalty::Full {
                acc += theta[(i, j)].abs();
            }
        }
    }
    lambda * acc
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn log_det_spd(m: &DMatrix<f64>) -> Option<f64> {
    Cholesky::new(m.clone()).map(|c| 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// Mean held-out Gaussian log-likelihood (up to constants) for each grid
/// value, from `k` contiguous row folds.
pub fn cross_validate(
    x: &DMatrix<f64>,
    grid: &[f64],
    k: usize,
    opts: &GlassoOptions,
) -> Result<Vec<f64>> {
    if grid.is_empty() || grid.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err(Error::Config(
            "lambda grid must be non-empty and positive".into(),
        ));
    }
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    let n = x.nrows();
    let bounds: Vec<(usize, usize)> = (0..k).map(|f| (f * n / k, (f + 1) * n / k)).collect();
    for &(a, b) in &bounds {
        if b - a < 2 || n - (b - a) < 2 {
            return Err(Error::InsufficientData(format!(
                "{n} rows cannot be split into {k} folds of at least 2 rows"
            )));
        }
    }
    let mut scores = vec![0.0; grid.len()];
    for &(a, b) in &bounds {
        let test = x.rows(a, b - a).clone_owned();
        let train_rows: Vec<usize> = (0..n).filter(|i| *i < a || *i >= b).collect();
        let train = x.select_rows(train_rows.iter());
        let s_train = second_moment(&train)?;
        let s_test = second_moment(&test)?;
        for (score, &lambda) in scores.iter_mut().zip(grid) {
            let (m, _) = glasso_fit_with(&s_train, lambda, opts)?;
            let logdet = log_det_spd(&m.precision).unwrap_or(f64::NEG_INFINITY);
            *score += 0.5 * (logdet - (&s_test * &m.precision).trace()) / k as f64;
        }
    }
    Ok(scores)
}

/// Grid value with the best held-out likelihood under 5-fold row splits.
pub fn select_lambda(panel: &GaussianizedPanel, grid: &[f64]) -> Result<f64> {
    select_lambda_with(
        &panel.values,
        grid,
        DEFAULT_FOLDS,
        &GlassoOptions::default(),
    )
}

pub fn select_lambda_with(
    x: &DMatrix<f64>,
    grid: &[f64],
    k: usize,
    opts: &GlassoOptions,
) -> Result<f64> {
    if grid.len() == 1 {
        if !(grid[0] > 0.0 && grid[0].is_finite()) {
            return Err(Error::Config(
                "lambda grid must be non-empty and positive".into(),
            ));
        }
        return Ok(grid[0]);
    }
    let scores = cross_validate(x, grid, k, opts)?;
    let best = scores
        .iter()
        .enumerate()
        .fold(0, |best, (i, s)| if *s > scores[best] { i } else { best });
    Ok(grid[best])
}

/// Law of the `target` coordinates given the `given` ones:
/// mean `A z` and covariance `Σ_tt - A Σ_gt` with `A = Σ_tg Σ_gg⁻¹`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalGaussian {
    pub given: Vec<usize>,
    pub target: Vec<usize>,
    #[serde(with = "serial::matrix")]
    pub gain: DMatrix<f64>,
    #[serde(with = "serial::matrix")]
    pub covariance: DMatrix<f64>,
}

impl ConditionalGaussian {
    pub fn new(
        sigma: &DMatrix<f64>,
        given: &[usize],
        target: &[usize],
    ) -> Result<ConditionalGaussian> {
        let p = sigma.nrows();
        if given.iter().chain(target).any(|&i| i >= p) {
            return Err(Error::Layout(format!(
                "index out of range for a {p}-dimensional model"
            )));
        }
        if given.iter().any(|i| target.contains(i)) {
            return Err(Error::Layout("given and target coordinates overlap".into()));
        }
        let s_gg = sigma.select_rows(given).select_columns(given);
        let s_tg = sigma.select_rows(target).select_columns(given);
        let s_tt = sigma.select_rows(target).select_columns(target);
        let chol = Cholesky::new(s_gg)
            .ok_or_else(|| Error::Singular("conditioning block is not positive definite".into()))?;
        // A = Σ_tg Σ_gg⁻¹, i.e. Aᵀ = Σ_gg⁻¹ Σ_gt.
        let gain = chol.solve(&s_tg.transpose()).transpose();
        let cov = symmetrize(&(s_tt - &gain * s_tg.transpose()));
        let covariance = clamp_psd(cov)?;
        Ok(ConditionalGaussian {
            given: given.to_vec(),
            target: target.to_vec(),
            gain,
            covariance,
        })
    }

    pub fn mean(&self, z_given: &DVector<f64>) -> Result<DVector<f64>> {
        if z_given.len() != self.given.len() {
            return Err(Error::Layout(format!(
                "conditioning vector has {} entries, expected {}",
                z_given.len(),
                self.given.len()
            )));
        }
        Ok(&self.gain * z_given)
    }
}

/// Symmetric matrix with eigenvalues below zero (down to `-1e-10` relative
/// to the largest) set to zero.
fn clamp_psd(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Ok(m);
    }
    let eig = SymmetricEigen::new(m.clone());
    let top = eig.eigenvalues.amax().max(1e-300);
    let min = eig.eigenvalues.min();
    if min >= 0.0 {
        return Ok(m);
    }
    if min < -1e-10 * top.max(1.0) {
        return Err(Error::Singular(format!(
            "conditional covariance has eigenvalue {min:.3e}"
        )));
    }
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    Ok(symmetrize(&out))
}

/// Conditional law of the second block given the first block's values.
pub fn conditional_params(
    model: &GaussianDependenceModel,
    z1: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let layout = model
        .layout
        .as_ref()
        .ok_or_else(|| Error::Layout("model has no block layout".into()))?;
    let (b1, b2) = match (layout.block(0), layout.block(1)) {
        (Some(a), Some(b)) if layout.blocks.len() == 2 => (a.clone(), b.clone()),
        _ => {
            return Err(Error::Layout(
                "conditioning needs exactly two blocks".into(),
            ))
        }
    };
    if z1.len() != b1.len() {
        return Err(Error::Layout(format!(
            "zone-1 vector has {} entries, block has {}",
            z1.len(),
            b1.len()
        )));
    }
    let given: Vec<usize> = b1.collect();
    let target: Vec<usize> = b2.collect();
    let c = ConditionalGaussian::new(&model.covariance, &given, &target)?;
    Ok((c.mean(z1)?, c.covariance))
}

/// Lower Cholesky factor with a diagonal jitter fallback: `1e-10·I` added
/// and the factorization retried, up to three times.
pub fn cholesky_with_jitter(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    if n == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    let mut a = m.clone();
    for attempt in 0..=3 {
        if let Some(c) = Cholesky::<f64, Dyn>::new(a.clone()) {
            return Some(c.l());
        }
        if attempt == 3 {
            break;
        }
        for i in 0..n {
            a[(i, i)] += 1e-10;
        }
    }
    // Positive semidefinite with exact zeros: factor the clamped spectrum.
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.min() < -1e-10 * eig.eigenvalues.amax().max(1.0) {
        return None;
    }
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let b = &eig.eigenvectors * DMatrix::from_diagonal(&root);
    // Any factor B with B Bᵀ = m serves for sampling.
    Some(b)
}
