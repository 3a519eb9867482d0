//! ν-one-class SVM with an RBF kernel, trained by SMO.
//!
//! Dual problem over `m` standardized rows:
//!
//! ```text
//! minimize   ½ αᵀKα
//! subject to 0 ≤ αᵢ ≤ 1/(νm),  Σαᵢ = 1
//! ```
//!
//! with decision `f(x) = Σ αᵢ k(xᵢ, x) − ρ`. Working pairs are chosen with
//! second-order information as in LIBSVM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximal KKT violation at which SMO stops.
pub const SMO_TOLERANCE: f64 = 1e-9;

/// Scores in `[-DECISION_TOLERANCE, 0)` are margin points within solver
/// precision and count as inliers.
pub const DECISION_TOLERANCE: f64 = 1e-6;

/// Standard deviations below this are treated as constant columns (scale 1).
pub const STD_FLOOR: f64 = 1e-12;

const MAX_ITER_PER_ROW: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GammaMode {
    /// `γ = 1 / (2 · median pairwise squared distance)` on the standardized
    /// training rows.
    MedianHeuristic,
    Fixed(f64),
}

impl Default for GammaMode {
    fn default() -> Self {
        GammaMode::MedianHeuristic
    }
}

/// Per-column centering and scaling fitted on the training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population mean and std per column; columns with std below
    /// [`STD_FLOOR`] keep scale 1.
    pub fn fit(rows: &[Vec<f64>]) -> Standardizer {
        let d = rows[0].len();
        let m = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (acc, v) in mean.iter_mut().zip(r) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((acc, v), mu) in var.iter_mut().zip(r).zip(&mean) {
                *acc += (v - mu).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / m).sqrt();
                if s < STD_FLOOR {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, mu), s)| (v - mu) / s)
            .collect()
    }
}

/// Fitted auditor model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcsvmModel {
    /// Standardized training rows with nonzero dual coefficient.
    pub support_vectors: Vec<Vec<f64>>,
    pub alphas: Vec<f64>,
    pub rho: f64,
    pub nu: f64,
    pub gamma: f64,
    pub standardizer: Standardizer,
    /// Number of training rows `m`.
    pub training_size: usize,
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median_of(mut values: Vec<f64>) -> f64 {
    let n = values.len();
    let cmp = |a: &f64, b: &f64| a.total_cmp(b);
    let (_, &mut hi, _) = values.select_nth_unstable_by(n / 2, cmp);
    if n % 2 == 1 {
        hi
    } else {
        let lo = values[..n / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Median-heuristic RBF width for already standardized rows.
pub fn median_heuristic_gamma(rows: &[Vec<f64>]) -> Result<f64> {
    let mut d2 = Vec::with_capacity(rows.len() * (rows.len().saturating_sub(1)) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d2.push(sq_dist(&rows[i], &rows[j]));
        }
    }
    if d2.is_empty() {
        return Err(Error::InvalidArgument("need at least 2 rows for the median heuristic".into()));
    }
    let mut med = median_of(d2.clone());
    if med <= 0.0 {
        // Mostly duplicates: fall back to the mean over distinct pairs.
        let positive: Vec<f64> = d2.into_iter().filter(|&v| v > 0.0).collect();
        if positive.is_empty() {
            return Err(Error::InvalidArgument("all training rows are identical".into()));
        }
        med = positive.iter().sum::<f64>() / positive.len() as f64;
    }
    Ok(1.0 / (2.0 * med))
}

/// Raw SMO solution on a precomputed kernel matrix.
#[derive(Clone, Debug)]
pub struct DualSolution {
    pub alphas: Vec<f64>,
    /// `G = Kα`, the training scores before subtracting ρ.
    pub scores: Vec<f64>,
    pub rho: f64,
    pub iterations: usize,
}

/// Offset from the KKT conditions: mean score over free coefficients, or the
/// midpoint of the feasible interval when every coefficient sits at a bound.
pub fn offset_from_kkt(alphas: &[f64], scores: &[f64], upper: f64) -> f64 {
    let (mut sum, mut n_free) = (0.0, 0usize);
    let (mut lb, mut ub) = (f64::NEG_INFINITY, f64::INFINITY);
    for (&a, &g) in alphas.iter().zip(scores) {
        if a > 0.0 && a < upper {
            sum += g;
            n_free += 1;
        } else if a >= upper {
            lb = lb.max(g);
        } else {
            ub = ub.min(g);
        }
    }
    if n_free > 0 {
        sum / n_free as f64
    } else if lb.is_finite() && ub.is_finite() {
        0.5 * (lb + ub)
    } else if lb.is_finite() {
        lb
    } else {
        ub
    }
}

/// Solves the ν-one-class dual for a symmetric kernel matrix given row-major.
pub fn solve_dual(kernel: &[f64], m: usize, nu: f64) -> Result<DualSolution> {
    if !(nu > 0.0 && nu < 1.0) {
        return Err(Error::InvalidArgument(format!("nu {nu} must lie in (0, 1)")));
    }
    if m < 2 || kernel.len() != m * m {
        return Err(Error::InvalidArgument("kernel must be m×m with m >= 2".into()));
    }
    let upper = 1.0 / (nu * m as f64);
    let k = |i: usize, j: usize| kernel[i * m + j];

    // Feasible start: fill the first coefficients to the bound.
    let mut alphas = vec![0.0; m];
    let mut remaining = 1.0;
    for a in alphas.iter_mut() {
        if remaining <= 0.0 {
            break;
        }
        *a = upper.min(remaining);
        remaining -= *a;
    }

    let mut scores = vec![0.0; m];
    for (i, a) in alphas.iter().enumerate() {
        if *a != 0.0 {
            for (t, g) in scores.iter_mut().enumerate() {
                *g += a * k(t, i);
            }
        }
    }

    let max_iter = MAX_ITER_PER_ROW * m;
    let mut iterations = 0;
    loop {
        // j: coefficient to decrease, largest score among αⱼ > 0.
        let mut j = usize::MAX;
        let mut g_max = f64::NEG_INFINITY;
        let mut g_min = f64::INFINITY;
        for t in 0..m {
            if alphas[t] > 0.0 && scores[t] > g_max {
                g_max = scores[t];
                j = t;
            }
            if alphas[t] < upper && scores[t] < g_min {
                g_min = scores[t];
            }
        }
        if j == usize::MAX || g_max - g_min < SMO_TOLERANCE {
            break;
        }
        if iterations >= max_iter {
            return Err(Error::InvalidArgument(format!(
                "SMO did not converge in {max_iter} iterations (gap {})",
                g_max - g_min
            )));
        }
        iterations += 1;

        // i: coefficient to increase, best second-order gain.
        let mut i = usize::MAX;
        let mut best = f64::NEG_INFINITY;
        for t in 0..m {
            if alphas[t] < upper && scores[t] < g_max {
                let diff = g_max - scores[t];
                let curv = (k(t, t) + k(j, j) - 2.0 * k(t, j)).max(1e-12);
                let gain = diff * diff / curv;
                if gain > best {
                    best = gain;
                    i = t;
                }
            }
        }
        if i == usize::MAX {
            break;
        }

        let curv = (k(i, i) + k(j, j) - 2.0 * k(i, j)).max(1e-12);
        let room_i = upper - alphas[i];
        let room_j = alphas[j];
        let mut step = (scores[j] - scores[i]) / curv;
        if step >= room_i || step >= room_j {
            if room_i <= room_j {
                step = room_i;
                alphas[i] = upper;
                alphas[j] -= step;
            } else {
                step = room_j;
                alphas[j] = 0.0;
                alphas[i] += step;
            }
        } else {
            alphas[i] += step;
            alphas[j] -= step;
        }
        for (t, g) in scores.iter_mut().enumerate() {
            *g += step * (k(t, i) - k(t, j));
        }
    }

    let rho = offset_from_kkt(&alphas, &scores, upper);
    Ok(DualSolution {
        alphas,
        scores,
        rho,
        iterations,
    })
}

pub fn rbf_kernel_matrix(rows: &[Vec<f64>], gamma: f64) -> Vec<f64> {
    let m = rows.len();
    let mut kernel = vec![0.0; m * m];
    for i in 0..m {
        kernel[i * m + i] = 1.0;
        for j in i + 1..m {
            let v = (-gamma * sq_dist(&rows[i], &rows[j])).exp();
            kernel[i * m + j] = v;
            kernel[j * m + i] = v;
        }
    }
    kernel
}

/// Standardizes `rows`, picks γ, and solves the dual.
pub fn fit(rows: &[Vec<f64>], nu: f64, gamma_mode: GammaMode) -> Result<OcsvmModel> {
    if !(nu > 0.0 && nu < 1.0) {
        return Err(Error::InvalidArgument(format!("nu {nu} must lie in (0, 1)")));
    }
    if rows.len() < 2 {
        return Err(Error::InvalidArgument("one-class SVM needs at least 2 rows".into()));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Dimension("training rows have unequal lengths".into()));
    }
    if rows.iter().any(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidArgument("training rows must be finite".into()));
    }
    if rows.iter().all(|r| r == &rows[0]) {
        return Err(Error::InvalidArgument("all training rows are identical".into()));
    }
    let standardizer = Standardizer::fit(rows);
    let scaled: Vec<Vec<f64>> = rows.iter().map(|r| standardizer.apply(r)).collect();
    let gamma = match gamma_mode {
        GammaMode::MedianHeuristic => median_heuristic_gamma(&scaled)?,
        GammaMode::Fixed(g) if g > 0.0 && g.is_finite() => g,
        GammaMode::Fixed(g) => return Err(Error::InvalidArgument(format!("gamma {g} must be > 0"))),
    };
    let m = scaled.len();
    let kernel = rbf_kernel_matrix(&scaled, gamma);
    let solution = solve_dual(&kernel, m, nu)?;

    let mut support_vectors = Vec::new();
    let mut alphas = Vec::new();
    for (row, &a) in scaled.into_iter().zip(&solution.alphas) {
        if a > 0.0 {
            support_vectors.push(row);
            alphas.push(a);
        }
    }
    Ok(OcsvmModel {
        support_vectors,
        alphas,
        rho: solution.rho,
        nu,
        gamma,
        standardizer,
        training_size: m,
    })
}

impl OcsvmModel {
    pub fn dim(&self) -> usize {
        self.standardizer.mean.len()
    }

    /// Upper bound on each dual coefficient, `1/(νm)`.
    pub fn upper_bound(&self) -> f64 {
        1.0 / (self.nu * self.training_size as f64)
    }

    /// `Σ αᵢ k(svᵢ, z) − ρ` for a raw (unstandardized) row.
    pub fn decision(&self, row: &[f64]) -> Result<f64> {
        if row.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "row has length {}, model expects {}",
                row.len(),
                self.dim()
            )));
        }
        let z = self.standardizer.apply(row);
        let score: f64 = self
            .support_vectors
            .iter()
            .zip(&self.alphas)
            .map(|(sv, a)| a * (-self.gamma * sq_dist(sv, &z)).exp())
            .sum();
        Ok(score - self.rho)
    }
}

/// Outlier rule shared by every caller: negative beyond the margin band, or
/// not a number.
pub fn is_outlier(decision: f64) -> bool {
    !(decision >= -DECISION_TOLERANCE)
}
