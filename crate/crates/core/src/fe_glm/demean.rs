//! Weighted within-transformation over up to two fixed-effect dimensions.
//!
//! For two dimensions the fixed-effect coefficients are found by
//! Gauss-Seidel sweeps in coefficient space:
//!
//! ```text
//! alpha_u = (Σ_{i∈u} w_i v_i − Σ_{i∈u} w_i gamma_{t(i)}) / W_u
//! gamma_t = (Σ_{i∈t} w_i v_i − Σ_{i∈t} w_i alpha_{u(i)}) / W_t
//! ```
//!
//! All columns are swept together so that each pass reads the codes and
//! weights once. Passes run in observation order, which keeps results
//! bitwise reproducible.

use super::Factor;

/// Fixed-effect coefficients carried between calls as a warm start.
/// Layout is level-major: `values[level * k + column]`.
#[derive(Debug, Clone, Default)]
pub struct FeState {
    pub secondary: Vec<f64>,
    pub columns: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct DemeanOptions {
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for DemeanOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-12,
            max_sweeps: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DemeanStats {
    pub sweeps: usize,
    pub converged: bool,
}

pub struct Demeaner<'a> {
    factors: &'a [Factor],
    weights: &'a [f64],
    level_weight: Vec<Vec<f64>>,
}

impl<'a> Demeaner<'a> {
    pub fn new(factors: &'a [Factor], weights: &'a [f64]) -> Self {
        assert!(factors.len() <= 2, "at most two fixed-effect dimensions");
        let level_weight = factors
            .iter()
            .map(|f| {
                let mut w = vec![0.0; f.n_levels()];
                for (&c, &wi) in f.codes.iter().zip(weights) {
                    w[c as usize] += wi;
                }
                w
            })
            .collect();
        Self {
            factors,
            weights,
            level_weight,
        }
    }

    /// Returns the residual of each column after removing its weighted
    /// projection on the fixed effects.
    pub fn demean(&self, columns: &[&[f64]], state: &mut FeState, opts: DemeanOptions) -> (Vec<Vec<f64>>, DemeanStats) {
        let k = columns.len();
        let n = self.weights.len();
        match self.factors.len() {
            0 => (
                columns.iter().map(|c| c.to_vec()).collect(),
                DemeanStats {
                    sweeps: 0,
                    converged: true,
                },
            ),
            1 => {
                let f = &self.factors[0];
                let mut sums = vec![0.0; f.n_levels() * k];
                self.weighted_sums(f, columns, &mut sums);
                divide_rows(&mut sums, &self.level_weight[0], k);
                let out = columns
                    .iter()
                    .enumerate()
                    .map(|(j, c)| (0..n).map(|i| c[i] - sums[f.codes[i] as usize * k + j]).collect())
                    .collect();
                (
                    out,
                    DemeanStats {
                        sweeps: 1,
                        converged: true,
                    },
                )
            }
            _ => self.demean_two(columns, state, opts),
        }
    }

    fn weighted_sums(&self, f: &Factor, columns: &[&[f64]], out: &mut [f64]) {
        let k = columns.len();
        for i in 0..self.weights.len() {
            let w = self.weights[i];
            let base = f.codes[i] as usize * k;
            for (j, c) in columns.iter().enumerate() {
                out[base + j] += w * c[i];
            }
        }
    }

    fn demean_two(&self, columns: &[&[f64]], state: &mut FeState, opts: DemeanOptions) -> (Vec<Vec<f64>>, DemeanStats) {
        let k = columns.len();
        let n = self.weights.len();
        let (fa, fb) = (&self.factors[0], &self.factors[1]);
        let (na, nb) = (fa.n_levels(), fb.n_levels());
        let (wa, wb) = (&self.level_weight[0], &self.level_weight[1]);
        let ca = &fa.codes;
        let cb = &fb.codes;
        let w = self.weights;

        let mut sa = vec![0.0; na * k];
        let mut sb = vec![0.0; nb * k];
        self.weighted_sums(fa, columns, &mut sa);
        self.weighted_sums(fb, columns, &mut sb);

        if state.columns != k || state.secondary.len() != nb * k {
            state.secondary = vec![0.0; nb * k];
            state.columns = k;
        }
        let gamma = &mut state.secondary;
        let mut alpha = vec![0.0; na * k];
        let mut next = vec![0.0; nb * k];

        let scale: Vec<f64> = columns
            .iter()
            .map(|c| c.iter().fold(1.0f64, |m, v| m.max(v.abs())))
            .collect();

        let mut stats = DemeanStats {
            sweeps: 0,
            converged: false,
        };
        while stats.sweeps < opts.max_sweeps {
            stats.sweeps += 1;
            // alpha from gamma
            alpha.copy_from_slice(&sa);
            for i in 0..n {
                let (a, b) = (ca[i] as usize * k, cb[i] as usize * k);
                let wi = w[i];
                for j in 0..k {
                    alpha[a + j] -= wi * gamma[b + j];
                }
            }
            divide_rows(&mut alpha, wa, k);
            // gamma from alpha
            next.copy_from_slice(&sb);
            for i in 0..n {
                let (a, b) = (ca[i] as usize * k, cb[i] as usize * k);
                let wi = w[i];
                for j in 0..k {
                    next[b + j] -= wi * alpha[a + j];
                }
            }
            divide_rows(&mut next, wb, k);

            let mut worst = 0.0f64;
            for (g_new, g_old) in next.chunks(k).zip(gamma.chunks(k)) {
                for j in 0..k {
                    worst = worst.max((g_new[j] - g_old[j]).abs() / scale[j]);
                }
            }
            std::mem::swap(gamma, &mut next);
            if worst <= opts.tolerance {
                stats.converged = true;
                break;
            }
        }
        // final alpha consistent with the last gamma
        alpha.copy_from_slice(&sa);
        for i in 0..n {
            let (a, b) = (ca[i] as usize * k, cb[i] as usize * k);
            for j in 0..k {
                alpha[a + j] -= w[i] * gamma[b + j];
            }
        }
        divide_rows(&mut alpha, wa, k);

        let out = (0..k)
            .map(|j| {
                let c = columns[j];
                (0..n)
                    .map(|i| c[i] - alpha[ca[i] as usize * k + j] - gamma[cb[i] as usize * k + j])
                    .collect()
            })
            .collect();
        (out, stats)
    }

    /// Splits an exact fixed-effect component into per-level values,
    /// normalised so that the first level of the last dimension is zero.
    pub fn decompose(&self, component: &[f64], opts: DemeanOptions) -> Vec<Vec<f64>> {
        let n = component.len();
        match self.factors.len() {
            0 => Vec::new(),
            1 => {
                let f = &self.factors[0];
                let mut s = vec![0.0; f.n_levels()];
                for i in 0..n {
                    s[f.codes[i] as usize] += self.weights[i] * component[i];
                }
                divide_rows(&mut s, &self.level_weight[0], 1);
                vec![s]
            }
            _ => {
                let mut state = FeState::default();
                let _ = self.demean_two(&[component], &mut state, opts);
                let mut gamma = state.secondary;
                let (fa, fb) = (&self.factors[0], &self.factors[1]);
                let mut alpha = vec![0.0; fa.n_levels()];
                for i in 0..n {
                    alpha[fa.codes[i] as usize] += self.weights[i] * (component[i] - gamma[fb.codes[i] as usize]);
                }
                divide_rows(&mut alpha, &self.level_weight[0], 1);
                let shift = gamma[0];
                gamma.iter_mut().for_each(|g| *g -= shift);
                alpha.iter_mut().for_each(|a| *a += shift);
                vec![alpha, gamma]
            }
        }
    }
}

fn divide_rows(values: &mut [f64], weights: &[f64], k: usize) {
    if k == 0 {
        return;
    }
    for (row, &w) in values.chunks_mut(k).zip(weights) {
        if w > 0.0 {
            row.iter_mut().for_each(|v| *v /= w);
        } else {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}
