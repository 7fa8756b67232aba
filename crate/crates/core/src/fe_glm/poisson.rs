//! IRLS for the Poisson log-link model with absorbed fixed effects.
//!
//! Each iteration forms the working response `z = η + (y − μ)/μ` with
//! weights `μ`, partials the fixed effects out of `z` and the regressors by
//! weighted alternating projections, and solves the remaining small
//! weighted least-squares problem. The fitted linear predictor is
//! `η = z − (z̃ − X̃β)`.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use super::{
    two_way_clustered_covariance, DemeanOptions, Demeaner, Design, Factor, FeState, FitDiagnostics, FitError,
    FitResult, FixedEffectValues, ModelSpec, Result, INTERCEPT,
};
use crate::panel::Panel;

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Relative deviance change at which IRLS stops.
    pub deviance_tolerance: f64,
    pub demean: DemeanOptions,
    /// Pivot threshold, relative to the raw weighted column norm, below
    /// which a regressor is declared collinear.
    pub collinearity_tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            deviance_tolerance: 1e-10,
            demean: DemeanOptions::default(),
            collinearity_tolerance: 1e-10,
        }
    }
}

/// Quantities needed to recompute the covariance or check the score
/// conditions independently.
#[derive(Debug, Clone)]
pub struct FitInternals {
    /// Indices into the design rows that were used.
    pub kept: Vec<usize>,
    pub y: Vec<f64>,
    pub mu: Vec<f64>,
    /// Regressors with the fixed effects partialled out under weights `mu`.
    pub x_tilde: DMatrix<f64>,
    /// Regressors as supplied (plus the intercept when no fixed effects).
    pub x: DMatrix<f64>,
    pub bread: DMatrix<f64>,
    pub fixed_effects: Vec<Factor>,
    pub clusters: Vec<Factor>,
}

impl FitInternals {
    /// Score contributions `x̃_i (y_i − μ_i)`, one row per observation.
    pub fn scores(&self) -> DMatrix<f64> {
        let mut s = self.x_tilde.clone();
        for (i, mut row) in s.row_iter_mut().enumerate() {
            row *= self.y[i] - self.mu[i];
        }
        s
    }
}

pub fn poisson_deviance(y: &[f64], mu: &[f64]) -> f64 {
    2.0 * y
        .iter()
        .zip(mu)
        .map(|(&y, &m)| if y > 0.0 { y * (y / m).ln() - (y - m) } else { m })
        .sum::<f64>()
}

/// `Σ y ln μ − μ − ln Γ(y + 1)`; valid for non-integer `y`.
pub fn poisson_log_likelihood(y: &[f64], mu: &[f64]) -> f64 {
    y.iter()
        .zip(mu)
        .map(|(&y, &m)| {
            let a = if y > 0.0 { y * m.ln() } else { 0.0 };
            a - m - ln_gamma(y + 1.0)
        })
        .sum()
}

/// Builds the design for `spec` and fits it with default options.
pub fn fit_poisson_two_way_fe(panel: &Panel, spec: &ModelSpec) -> Result<FitResult> {
    let design = spec.design(panel)?;
    fit_poisson_fe(&design, &FitOptions::default())
}

pub fn fit_poisson_fe(design: &Design, opts: &FitOptions) -> Result<FitResult> {
    fit_poisson_fe_detailed(design, opts).map(|(r, _)| r)
}

/// Rows to keep after repeatedly removing fixed-effect levels whose
/// outcome is zero throughout, with the number of levels removed per dimension.
fn drop_zero_levels(design: &Design) -> (Vec<usize>, Vec<usize>) {
    let mut keep: Vec<usize> = (0..design.y.len()).collect();
    let mut dropped = vec![0; design.fixed_effects.len()];
    loop {
        let mut changed = false;
        for (d, f) in design.fixed_effects.iter().enumerate() {
            let mut total = vec![0.0; f.n_levels()];
            let mut seen = vec![false; f.n_levels()];
            for &r in &keep {
                total[f.codes[r] as usize] += design.y[r];
                seen[f.codes[r] as usize] = true;
            }
            let zero = |l: usize| seen[l] && total[l] == 0.0;
            let n_zero = (0..f.n_levels()).filter(|&l| zero(l)).count();
            if n_zero > 0 {
                dropped[d] += n_zero;
                keep.retain(|&r| !zero(f.codes[r] as usize));
                changed = true;
            }
        }
        if !changed {
            return (keep, dropped);
        }
    }
}

/// `X'WX` and `X'Wv` for column-major `x`.
fn cross_products(x: &[Vec<f64>], w: &[f64], v: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let k = x.len();
    let mut xtwx = DMatrix::zeros(k, k);
    let mut xtwv = DVector::zeros(k);
    for a in 0..k {
        let xa = &x[a];
        xtwv[a] = xa.iter().zip(w).zip(v).map(|((x, w), v)| x * w * v).sum();
        for b in 0..=a {
            let xb = &x[b];
            let s: f64 = xa.iter().zip(xb).zip(w).map(|((p, q), w)| p * q * w).sum();
            xtwx[(a, b)] = s;
            xtwx[(b, a)] = s;
        }
    }
    (xtwx, xtwv)
}

/// Symmetric elimination without pivoting; a pivot that is negligible
/// relative to the column's raw weighted norm marks that column collinear
/// with the earlier ones or with the fixed effects.
fn check_rank(xtwx: &DMatrix<f64>, raw_norms: &[f64], names: &[String], tol: f64) -> Result<()> {
    let k = xtwx.nrows();
    let mut a = xtwx.clone();
    for j in 0..k {
        let pivot = a[(j, j)];
        if !(pivot > tol * raw_norms[j].max(f64::MIN_POSITIVE)) {
            return Err(FitError::Collinear {
                column: names[j].clone(),
            });
        }
        for r in j + 1..k {
            let f = a[(r, j)] / pivot;
            for c in j + 1..k {
                a[(r, c)] -= f * a[(j, c)];
            }
        }
    }
    Ok(())
}

fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    a.clone()
        .cholesky()
        .map(|c| c.solve(b))
        .ok_or_else(|| FitError::Numerical("weighted normal equations are not positive definite".into()))
}

pub fn fit_poisson_fe_detailed(design: &Design, opts: &FitOptions) -> Result<(FitResult, FitInternals)> {
    design.validate()?;
    let (kept, dropped_levels) = drop_zero_levels(design);
    let dropped_rows = design.y.len() - kept.len();
    if dropped_rows > 0 {
        warn!(
            "dropped {dropped_rows} rows from fixed-effect levels with all-zero {}",
            design.outcome
        );
    }
    if kept.is_empty() {
        return Err(FitError::EmptySample);
    }
    let y: Vec<f64> = kept.iter().map(|&r| design.y[r]).collect();
    let n = y.len();
    let fes: Vec<Factor> = design.fixed_effects.iter().map(|f| f.subset(&kept)).collect();
    let clusters: Vec<Factor> = design.clusters.iter().map(|f| f.subset(&kept)).collect();
    let mut names = design.names.clone();
    let mut x: Vec<Vec<f64>> = design
        .columns
        .iter()
        .map(|c| kept.iter().map(|&r| c[r]).collect())
        .collect();
    if fes.is_empty() {
        names.insert(0, INTERCEPT.to_string());
        x.insert(0, vec![1.0; n]);
    }
    let k = x.len();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    if y_mean <= 0.0 {
        return Err(FitError::EmptySample);
    }

    // Start: β = 0 and fixed effects from one projection of ln(y + 0.1 ȳ).
    let z0: Vec<f64> = y.iter().map(|v| (v + 0.1 * y_mean).ln()).collect();
    let mut eta: Vec<f64> = if fes.is_empty() {
        vec![z0.iter().sum::<f64>() / n as f64; n]
    } else {
        let ones = vec![1.0; n];
        let d = Demeaner::new(&fes, &ones);
        let one_pass = DemeanOptions {
            tolerance: 0.0,
            max_sweeps: 1,
        };
        let (r, _) = d.demean(&[&z0], &mut FeState::default(), one_pass);
        z0.iter().zip(&r[0]).map(|(z, r)| z - r).collect()
    };
    let mut mu: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
    let mut dev = poisson_deviance(&y, &mu);

    let mut state = FeState::default();
    let mut beta = DVector::zeros(k);
    let mut diag = FitDiagnostics {
        iterations: 0,
        converged: false,
        step_halvings: 0,
        max_demean_sweeps: 0,
        covariance_repaired: 0,
        cluster_counts: Vec::new(),
        dropped_rows,
        dropped_levels,
    };

    while diag.iterations < opts.max_iterations {
        diag.iterations += 1;
        let z: Vec<f64> = (0..n).map(|i| eta[i] + (y[i] - mu[i]) / mu[i]).collect();
        let w = &mu;
        let demeaner = Demeaner::new(&fes, w);
        let mut cols: Vec<&[f64]> = Vec::with_capacity(k + 1);
        cols.push(&z);
        cols.extend(x.iter().map(Vec::as_slice));
        let (mut tilde, stats) = demeaner.demean(&cols, &mut state, opts.demean);
        diag.max_demean_sweeps = diag.max_demean_sweeps.max(stats.sweeps);
        if !stats.converged {
            warn!("fixed-effect projection stopped after {} sweeps", stats.sweeps);
        }
        let z_tilde = tilde.remove(0);
        let (xtwx, xtwz) = cross_products(&tilde, w, &z_tilde);
        let raw_norms: Vec<f64> = x
            .iter()
            .map(|c| c.iter().zip(w.iter()).map(|(v, w)| v * v * w).sum())
            .collect();
        check_rank(&xtwx, &raw_norms, &names, opts.collinearity_tolerance)?;
        let new_beta = solve_spd(&xtwx, &xtwz)?;

        let mut eta_new: Vec<f64> = (0..n)
            .map(|i| {
                let fitted: f64 = (0..k).map(|j| tilde[j][i] * new_beta[j]).sum();
                z[i] - (z_tilde[i] - fitted)
            })
            .collect();
        let mut mu_new: Vec<f64> = eta_new.iter().map(|e| e.exp()).collect();
        let mut dev_new = poisson_deviance(&y, &mu_new);
        let mut halvings = 0;
        while (!dev_new.is_finite() || dev_new > dev * (1.0 + 1e-12)) && halvings < 30 {
            halvings += 1;
            for i in 0..n {
                eta_new[i] = 0.5 * (eta_new[i] + eta[i]);
            }
            mu_new = eta_new.iter().map(|e| e.exp()).collect();
            dev_new = poisson_deviance(&y, &mu_new);
        }
        diag.step_halvings += halvings;
        if !dev_new.is_finite() {
            return Err(FitError::Numerical("deviance is not finite".into()));
        }
        let change = (dev - dev_new).abs() / (0.1 + dev_new.abs());
        debug!(
            "IRLS iteration {}: deviance {dev_new} (change {change:e})",
            diag.iterations
        );
        eta = eta_new;
        mu = mu_new;
        dev = dev_new;
        beta = new_beta;
        if change < opts.deviance_tolerance {
            diag.converged = true;
            break;
        }
    }
    if !diag.converged {
        return Err(FitError::NotConverged {
            iterations: diag.iterations,
            deviance: dev,
        });
    }

    // Partial out with the final weights for the sandwich.
    let demeaner = Demeaner::new(&fes, &mu);
    let cols: Vec<&[f64]> = x.iter().map(Vec::as_slice).collect();
    let (tilde, stats) = demeaner.demean(&cols, &mut FeState::default(), opts.demean);
    diag.max_demean_sweeps = diag.max_demean_sweeps.max(stats.sweeps);
    let (bread, _) = cross_products(&tilde, &mu, &vec![0.0; n]);
    let x_tilde = DMatrix::from_fn(n, k, |i, j| tilde[j][i]);
    let x_mat = DMatrix::from_fn(n, k, |i, j| x[j][i]);

    // Fixed effects: the part of η not explained by the regressors.
    let component: Vec<f64> = (0..n)
        .map(|i| eta[i] - (0..k).map(|j| x[j][i] * beta[j]).sum::<f64>())
        .collect();
    let levels = demeaner.decompose(&component, opts.demean);
    let fixed_effects: Vec<FixedEffectValues> = fes
        .iter()
        .zip(levels)
        .map(|(f, values)| FixedEffectValues {
            dimension: f.name.clone(),
            labels: f.labels.clone(),
            values,
        })
        .collect();

    let internals = FitInternals {
        kept,
        y,
        mu,
        x_tilde,
        x: x_mat,
        bread,
        fixed_effects: fes,
        clusters,
    };
    let cluster_refs: Vec<&Factor> = internals.clusters.iter().collect();
    let cov = two_way_clustered_covariance(&internals.bread, &internals.scores(), &cluster_refs)?;
    diag.covariance_repaired = cov.repaired_eigenvalues;
    diag.cluster_counts = cov.cluster_counts.clone();

    let log_likelihood = poisson_log_likelihood(&internals.y, &internals.mu);
    let null_log_likelihood = poisson_log_likelihood(&internals.y, &vec![y_mean; n]);
    let covariance: Vec<Vec<f64>> = (0..k).map(|a| (0..k).map(|b| cov.matrix[(a, b)]).collect()).collect();
    let std_errors = (0..k).map(|j| cov.matrix[(j, j)].max(0.0).sqrt()).collect();
    let mut result = FitResult {
        outcome: design.outcome.clone(),
        names,
        coefficients: beta.iter().copied().collect(),
        std_errors,
        covariance,
        fixed_effects,
        n_obs: n,
        n_units: internals.fixed_effects.first().map_or(n, Factor::n_levels),
        deviance: dev,
        log_likelihood,
        null_log_likelihood,
        pseudo_r2: None,
        diagnostics: diag,
    };
    result.pseudo_r2 = super::pseudo_r2(&result).ok();
    Ok((result, internals))
}
