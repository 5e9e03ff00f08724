//! DCI disentanglement from Lasso coefficients, Munkres latent-factor
//! matching and R² scores.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comptask::stream_rng;
use crate::error::{Error, Result};
use crate::factorspace::FactorSpace;
use crate::image::ImageSet;
use crate::nnmodels::LatentEncoder;

pub const DEFAULT_ALPHA: f64 = 0.02;
pub const DEFAULT_SAMPLE_SIZE: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LassoConfig {
    pub alpha: f64,
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for LassoConfig {
    fn default() -> Self {
        LassoConfig {
            alpha: DEFAULT_ALPHA,
            tolerance: 1e-6,
            max_sweeps: 10_000,
        }
    }
}

impl LassoConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        LassoConfig {
            alpha,
            ..Default::default()
        }
    }
}

/// Solution of `(1/2n)‖y − Xβ‖² + α‖β‖₁` on standardized `X` and centered `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct LassoFit {
    /// Coefficients on the standardized columns.
    pub coefficients: Vec<f64>,
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub sweeps: usize,
    pub converged: bool,
    /// Objective value after each sweep.
    pub objective_trace: Vec<f64>,
    /// Columns with zero variance; their coefficients are pinned to zero.
    pub constant_columns: Vec<usize>,
}

impl LassoFit {
    pub fn predict(&self, x: ArrayView1<f64>) -> f64 {
        let mut y = self.y_mean;
        for (j, &b) in self.coefficients.iter().enumerate() {
            if b != 0.0 {
                y += b * (x[j] - self.x_mean[j]) / self.x_std[j];
            }
        }
        y
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Cyclic coordinate descent with soft-thresholding.
pub fn lasso_fit(x: ArrayView2<f64>, y: ArrayView1<f64>, cfg: &LassoConfig) -> Result<LassoFit> {
    let (n, p) = x.dim();
    if n == 0 || y.len() != n {
        return Err(Error::shape(format!("design has {n} rows, target has {}", y.len())));
    }
    if !(cfg.alpha >= 0.0) {
        return Err(Error::config("lasso: alpha must be nonnegative"));
    }
    let nf = n as f64;
    let x_mean: Vec<f64> = (0..p).map(|j| x.column(j).sum() / nf).collect();
    let x_std: Vec<f64> = (0..p)
        .map(|j| {
            let m = x_mean[j];
            (x.column(j).iter().map(|v| (v - m) * (v - m)).sum::<f64>() / nf).sqrt()
        })
        .collect();
    let y_mean = y.sum() / nf;
    let mut constant_columns = Vec::new();
    // column-major standardized copy for contiguous access
    let mut cols = vec![0.0; n * p];
    for j in 0..p {
        if x_std[j] <= 1e-12 * (1.0 + x_mean[j].abs()) {
            constant_columns.push(j);
            continue;
        }
        for i in 0..n {
            cols[j * n + i] = (x[[i, j]] - x_mean[j]) / x_std[j];
        }
    }
    if !constant_columns.is_empty() {
        log::warn!("lasso: zero-variance columns {constant_columns:?} get coefficient 0");
    }
    let mut beta = vec![0.0; p];
    let mut resid: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    let objective = |resid: &[f64], beta: &[f64]| {
        resid.iter().map(|r| r * r).sum::<f64>() / (2.0 * nf) + cfg.alpha * beta.iter().map(|b| b.abs()).sum::<f64>()
    };
    let mut trace = Vec::new();
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < cfg.max_sweeps {
        sweeps += 1;
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            if constant_columns.contains(&j) {
                continue;
            }
            let col = &cols[j * n..(j + 1) * n];
            let rho = col.iter().zip(&resid).map(|(a, r)| a * r).sum::<f64>() / nf + beta[j];
            let new = soft_threshold(rho, cfg.alpha);
            let delta = new - beta[j];
            if delta != 0.0 {
                for (r, a) in resid.iter_mut().zip(col) {
                    *r -= delta * a;
                }
                beta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        trace.push(objective(&resid, &beta));
        if max_change < cfg.tolerance {
            converged = true;
            break;
        }
    }
    Ok(LassoFit {
        coefficients: beta,
        x_mean,
        x_std,
        y_mean,
        sweeps,
        converged,
        objective_trace: trace,
        constant_columns,
    })
}

/// `L × J` matrix of absolute regression weights, latents by factors.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientMatrix {
    values: Array2<f64>,
}

impl CoefficientMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::config("coefficient matrix entries must be finite and nonnegative"));
        }
        Ok(CoefficientMatrix { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let l = rows.len();
        let j = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != j) {
            return Err(Error::shape("ragged coefficient rows"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(Array2::from_shape_vec((l, j), flat).map_err(|e| Error::shape(e.to_string()))?)
    }

    pub fn n_latents(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_factors(&self) -> usize {
        self.values.ncols()
    }

    pub fn get(&self, latent: usize, factor: usize) -> f64 {
        self.values[[latent, factor]]
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.outer_iter().map(|r| r.to_vec()).collect()
    }
}

/// Column `j` holds `|lasso(Z, V[:, j])|`.
pub fn build_coefficient_matrix(z: ArrayView2<f64>, v: ArrayView2<f64>, cfg: &LassoConfig) -> Result<CoefficientMatrix> {
    if z.nrows() != v.nrows() {
        return Err(Error::shape("latent and factor tables differ in length"));
    }
    let fits = (0..v.ncols())
        .into_par_iter()
        .map(|j| lasso_fit(z, v.column(j), cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut c = Array2::zeros((z.ncols(), v.ncols()));
    for (j, fit) in fits.iter().enumerate() {
        for (i, b) in fit.coefficients.iter().enumerate() {
            c[[i, j]] = b.abs();
        }
    }
    CoefficientMatrix::new(c)
}

fn entropy(p: impl Iterator<Item = f64>, base: usize) -> f64 {
    let lb = (base as f64).ln();
    -p.filter(|&v| v > 0.0).map(|v| v * v.ln() / lb).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementReport {
    /// Row-normalized coefficients; all zeros for dead latents.
    pub p: Vec<Vec<f64>>,
    pub entropies: Vec<Option<f64>>,
    pub scores: Vec<Option<f64>>,
    pub weights: Vec<f64>,
    pub dead: Vec<bool>,
    pub aggregate: f64,
}

/// Per-latent entropy scores `d_i = 1 − H_J(P_i)` and their ρ-weighted mean.
pub fn dci_disentanglement(c: &CoefficientMatrix) -> Result<DisentanglementReport> {
    let (l, j) = c.values.dim();
    if j < 2 {
        return Err(Error::config("disentanglement needs at least two factors"));
    }
    let total: f64 = c.values.sum();
    if total <= 0.0 {
        return Err(Error::Undefined("coefficient matrix is all zero".into()));
    }
    let mut report = DisentanglementReport {
        p: Vec::with_capacity(l),
        entropies: Vec::with_capacity(l),
        scores: Vec::with_capacity(l),
        weights: Vec::with_capacity(l),
        dead: Vec::with_capacity(l),
        aggregate: 0.0,
    };
    for row in c.values.outer_iter() {
        let s: f64 = row.sum();
        if s <= 0.0 {
            report.p.push(vec![0.0; j]);
            report.entropies.push(None);
            report.scores.push(None);
            report.weights.push(0.0);
            report.dead.push(true);
            continue;
        }
        let p: Vec<f64> = row.iter().map(|v| v / s).collect();
        let h = entropy(p.iter().copied(), j);
        let d = 1.0 - h;
        let rho = s / total;
        report.aggregate += rho * d;
        report.p.push(p);
        report.entropies.push(Some(h));
        report.scores.push(Some(d));
        report.weights.push(rho);
        report.dead.push(false);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletenessReport {
    /// `1 − H_L(P̃_j)` per factor, `P̃` column-normalized; `None` for unexplained factors.
    pub scores: Vec<Option<f64>>,
    pub weights: Vec<f64>,
    pub aggregate: f64,
}

/// Column-wise analogue of [`dci_disentanglement`].
pub fn dci_completeness(c: &CoefficientMatrix) -> Result<CompletenessReport> {
    let (l, _) = c.values.dim();
    if l < 2 {
        return Err(Error::config("completeness needs at least two latents"));
    }
    let total: f64 = c.values.sum();
    if total <= 0.0 {
        return Err(Error::Undefined("coefficient matrix is all zero".into()));
    }
    let mut out = CompletenessReport {
        scores: Vec::new(),
        weights: Vec::new(),
        aggregate: 0.0,
    };
    for col in c.values.axis_iter(Axis(1)) {
        let s: f64 = col.sum();
        if s <= 0.0 {
            out.scores.push(None);
            out.weights.push(0.0);
            continue;
        }
        let score = 1.0 - entropy(col.iter().map(|v| v / s), l);
        out.scores.push(Some(score));
        out.weights.push(s / total);
        out.aggregate += s / total * score;
    }
    Ok(out)
}

/// Held-out mean squared error of the per-factor Lasso predictors.
pub fn dci_informativeness(
    z_train: ArrayView2<f64>,
    v_train: ArrayView2<f64>,
    z_test: ArrayView2<f64>,
    v_test: ArrayView2<f64>,
    cfg: &LassoConfig,
) -> Result<Vec<f64>> {
    (0..v_train.ncols())
        .map(|j| {
            let fit = lasso_fit(z_train, v_train.column(j), cfg)?;
            let n = z_test.nrows();
            if n == 0 {
                return Err(Error::Undefined("empty held-out set".into()));
            }
            Ok(z_test
                .outer_iter()
                .zip(v_test.column(j))
                .map(|(row, &t)| (fit.predict(row) - t).powi(2))
                .sum::<f64>()
                / n as f64)
        })
        .collect()
}

/// Per-factor Lasso readouts fitted on `(z_fit, v_fit)` and applied to `z_eval`.
pub fn lasso_predict_table(
    z_fit: ArrayView2<f64>,
    v_fit: ArrayView2<f64>,
    z_eval: ArrayView2<f64>,
    cfg: &LassoConfig,
) -> Result<Array2<f64>> {
    if z_fit.ncols() != z_eval.ncols() {
        return Err(Error::shape("fit and evaluation latents differ in width"));
    }
    let mut out = Array2::zeros((z_eval.nrows(), v_fit.ncols()));
    for j in 0..v_fit.ncols() {
        let fit = lasso_fit(z_fit, v_fit.column(j), cfg)?;
        for (i, row) in z_eval.outer_iter().enumerate() {
            out[[i, j]] = fit.predict(row);
        }
    }
    Ok(out)
}

/// Injective map from factor index to latent index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentMap {
    pub factor_to_latent: Vec<usize>,
}

impl AssignmentMap {
    pub fn latent_for(&self, factor: usize) -> Option<usize> {
        self.factor_to_latent.get(factor).copied()
    }

    pub fn identity(n: usize) -> Self {
        AssignmentMap {
            factor_to_latent: (0..n).collect(),
        }
    }
}

/// Hungarian algorithm with potentials for an `n × m` cost matrix, `n ≤ m`.
/// Returns the column assigned to each row.
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let m = cost[0].len();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

fn optimal_total(cost: &[Vec<f64>]) -> f64 {
    hungarian(cost).iter().enumerate().map(|(r, &c)| cost[r][c]).sum()
}

/// Minimum-cost assignment of every row of `cost` (`n × m`, `n ≤ m`) to a
/// distinct column. Among optimal assignments the one that is lexicographically
/// smallest in row order is returned.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Result<(Vec<usize>, f64)> {
    let n = cost.len();
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::shape("ragged cost matrix"));
    }
    if n > m {
        return Err(Error::config(format!("cannot assign {n} rows to {m} columns")));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite assignment cost".into()));
    }
    let best = optimal_total(cost);
    let scale = cost.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let tol = 1e-9 * scale * n as f64;
    let mut chosen = Vec::with_capacity(n);
    let mut fixed_cost = 0.0;
    let mut free_cols: Vec<usize> = (0..m).collect();
    for r in 0..n {
        let rest = &cost[r + 1..];
        let mut picked = None;
        for (pos, &c) in free_cols.iter().enumerate() {
            let others: Vec<usize> = free_cols.iter().copied().filter(|&k| k != c).collect();
            let sub: Vec<Vec<f64>> = rest.iter().map(|row| others.iter().map(|&k| row[k]).collect()).collect();
            let sub_total = if sub.is_empty() { 0.0 } else { optimal_total(&sub) };
            if fixed_cost + cost[r][c] + sub_total <= best + tol {
                picked = Some(pos);
                break;
            }
        }
        let pos = picked.expect("some column completes an optimal assignment");
        let c = free_cols.remove(pos);
        fixed_cost += cost[r][c];
        chosen.push(c);
    }
    Ok((chosen, fixed_cost))
}

/// Matches each factor to a distinct latent, maximizing total weight.
/// Ties go to the lowest latent index.
pub fn munkres_assign(c: &CoefficientMatrix) -> Result<AssignmentMap> {
    let (l, j) = c.values.dim();
    if l < j {
        return Err(Error::config(format!("{l} latents cannot cover {j} factors")));
    }
    let max = c.values.iter().copied().fold(0.0, f64::max);
    let cost: Vec<Vec<f64>> = (0..j).map(|f| (0..l).map(|i| max - c.values[[i, f]]).collect()).collect();
    let (assign, _) = min_cost_assignment(&cost)?;
    Ok(AssignmentMap {
        factor_to_latent: assign,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RSquared {
    pub per_factor: Vec<Option<f64>>,
    pub mean: f64,
}

/// `1 − SS_res / SS_tot` per column; columns with constant targets are skipped.
pub fn r_squared(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<RSquared> {
    if pred.dim() != target.dim() {
        return Err(Error::shape("prediction and target tables differ in shape"));
    }
    let n = target.nrows();
    if n < 2 {
        return Err(Error::Undefined("R² needs at least two samples".into()));
    }
    let mut per = Vec::with_capacity(target.ncols());
    for j in 0..target.ncols() {
        let t = target.column(j);
        let mean = t.sum() / n as f64;
        let ss_tot: f64 = t.iter().map(|v| (v - mean).powi(2)).sum();
        if ss_tot <= 0.0 {
            log::warn!("R²: factor {j} has constant targets and is excluded");
            per.push(None);
            continue;
        }
        let ss_res: f64 = t.iter().zip(pred.column(j)).map(|(a, b)| (a - b).powi(2)).sum();
        per.push(Some(1.0 - ss_res / ss_tot));
    }
    let defined: Vec<f64> = per.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Undefined("every factor has constant targets".into()));
    }
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(RSquared { per_factor: per, mean })
}

/// Encodes the listed images into an `n × latent_dim` table.
pub fn encode_table<E: LatentEncoder + ?Sized>(encoder: &E, images: &ImageSet, indices: &[usize]) -> Result<Array2<f64>> {
    let rows = indices
        .par_iter()
        .map(|&i| encoder.encode_latent(images.pixels(i)))
        .collect::<Result<Vec<_>>>()?;
    let d = encoder.latent_dim();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((indices.len(), d), flat).map_err(|e| Error::shape(e.to_string()))
}

/// Normalized factor values of the listed combinations, `n × J`.
pub fn factor_table(space: &FactorSpace, indices: &[usize]) -> Array2<f64> {
    let j = space.n_factors();
    let flat: Vec<f64> = indices.iter().flat_map(|&i| space.vector(i).values).collect();
    Array2::from_shape_vec((indices.len(), j), flat).expect("consistent sizes")
}

/// Uniform subsample without replacement, in increasing order.
pub fn subsample(indices: &[usize], size: usize, seed: u64) -> Vec<usize> {
    if indices.len() <= size {
        return indices.to_vec();
    }
    let mut rng = stream_rng(seed, 11);
    let mut picked: Vec<usize> = sample(&mut rng, indices.len(), size).into_iter().map(|k| indices[k]).collect();
    picked.sort_unstable();
    picked
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DciEvaluation {
    pub coefficients: Vec<Vec<f64>>,
    pub disentanglement: DisentanglementReport,
    pub completeness: Option<CompletenessReport>,
    pub assignment: Option<AssignmentMap>,
    pub n_samples: usize,
    pub alpha: f64,
}

/// Full DCI pipeline on encoder means over a subsample of `indices`.
pub fn evaluate_dci<E: LatentEncoder + ?Sized>(
    encoder: &E,
    images: &ImageSet,
    space: &FactorSpace,
    indices: &[usize],
    cfg: &LassoConfig,
    sample_size: usize,
    seed: u64,
) -> Result<(CoefficientMatrix, DciEvaluation)> {
    let chosen = subsample(indices, sample_size, seed);
    let z = encode_table(encoder, images, &chosen)?;
    let v = factor_table(space, &chosen);
    let c = build_coefficient_matrix(z.view(), v.view(), cfg)?;
    let disentanglement = dci_disentanglement(&c)?;
    let eval = DciEvaluation {
        coefficients: c.rows(),
        disentanglement,
        completeness: dci_completeness(&c).ok(),
        assignment: munkres_assign(&c).ok(),
        n_samples: chosen.len(),
        alpha: cfg.alpha,
    };
    Ok((c, eval))
}

/// Hinton-matrix CSV: a `latent` label column followed by one column per factor.
pub fn write_hinton_csv(c: &CoefficientMatrix, factor_names: &[String], path: impl AsRef<Path>) -> Result<()> {
    if factor_names.len() != c.n_factors() {
        return Err(Error::shape("one name per factor column is required"));
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "latent,{}", factor_names.join(","))?;
    for (i, row) in c.values.outer_iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(f, "z{i},{}", cells.join(","))?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_hinton_csv(path: impl AsRef<Path>) -> Result<(CoefficientMatrix, Vec<String>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Header("empty Hinton file".into()))?;
    let names: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let row = line
            .split(',')
            .skip(1)
            .map(|s| s.parse::<f64>().map_err(|e| Error::Header(e.to_string())))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((CoefficientMatrix::from_rows(&rows)?, names))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn soft_threshold_single_feature() {
        let x = array![[-1.0], [1.0], [-1.0], [1.0]];
        let y = x.column(0).mapv(|v| 3.0 * v);
        let fit = lasso_fit(x.view(), y.view(), &LassoConfig::with_alpha(0.5)).unwrap();
        assert!((fit.coefficients[0] - 2.5).abs() < 1e-12);
        let fit = lasso_fit(x.view(), y.view(), &LassoConfig::with_alpha(3.0)).unwrap();
        assert_eq!(fit.coefficients[0], 0.0);
    }

    #[test]
    fn constant_column_pinned_to_zero() {
        let x = array![[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]];
        let y = array![0.0, 1.0, 2.0];
        let fit = lasso_fit(x.view(), y.view(), &LassoConfig::with_alpha(0.0)).unwrap();
        assert_eq!(fit.constant_columns, vec![0]);
        assert_eq!(fit.coefficients[0], 0.0);
        assert!((fit.predict(array![1.0, 1.5].view()) - 1.5).abs() < 1e-9);
    }

    #[test]
    fn dci_hand_values() {
        let c = CoefficientMatrix::from_rows(&[vec![0.8, 0.2], vec![0.1, 0.9]]).unwrap();
        let r = dci_disentanglement(&c).unwrap();
        assert!((r.scores[0].unwrap() - 0.27807).abs() < 1e-5);
        assert!((r.scores[1].unwrap() - 0.53100).abs() < 1e-5);
        assert_eq!(r.weights, vec![0.5, 0.5]);
        assert!((r.aggregate - 0.40454).abs() < 1e-5);
        let eye = CoefficientMatrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(dci_disentanglement(&eye).unwrap().aggregate, 1.0);
        let ones = CoefficientMatrix::from_rows(&vec![vec![1.0; 3]; 3]).unwrap();
        assert!(dci_disentanglement(&ones).unwrap().aggregate.abs() < 1e-12);
    }

    #[test]
    fn dead_rows_and_degenerate_inputs() {
        let c = CoefficientMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let r = dci_disentanglement(&c).unwrap();
        assert_eq!(r.dead, vec![false, true]);
        assert_eq!(r.scores[1], None);
        assert_eq!(r.weights, vec![1.0, 0.0]);
        let zero = CoefficientMatrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(dci_disentanglement(&zero), Err(Error::Undefined(_))));
        let one_col = CoefficientMatrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        assert!(dci_disentanglement(&one_col).is_err());
        assert!(CoefficientMatrix::from_rows(&[vec![-1.0, 0.0]]).is_err());
    }

    #[test]
    fn completeness_of_identity() {
        let eye = CoefficientMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let r = dci_completeness(&eye).unwrap();
        assert_eq!(r.scores, vec![Some(1.0), Some(1.0)]);
        assert!((r.aggregate - 1.0).abs() < 1e-12);
    }

    #[test]
    fn assignment_examples() {
        let (a, total) = min_cost_assignment(&[vec![4.0, 1.0], vec![2.0, 3.0]]).unwrap();
        assert_eq!((a, total), (vec![1, 0], 3.0));
        // all ties: lowest latent first
        let c = CoefficientMatrix::from_rows(&vec![vec![1.0, 1.0]; 4]).unwrap();
        assert_eq!(munkres_assign(&c).unwrap().factor_to_latent, vec![0, 1]);
        let c = CoefficientMatrix::from_rows(&[vec![0.1, 0.9], vec![0.8, 0.2], vec![0.0, 0.0]]).unwrap();
        assert_eq!(munkres_assign(&c).unwrap().factor_to_latent, vec![1, 0]);
        let narrow = CoefficientMatrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        assert!(munkres_assign(&narrow).is_err());
    }

    #[test]
    fn r_squared_examples() {
        let t = array![[0.0], [1.0], [2.0]];
        let p = array![[0.0], [1.0], [1.0]];
        assert_eq!(r_squared(p.view(), t.view()).unwrap().per_factor, vec![Some(0.5)]);
        assert_eq!(r_squared(t.view(), t.view()).unwrap().mean, 1.0);
        let m = array![[1.0], [1.0], [1.0]];
        assert_eq!(r_squared(m.view(), t.view()).unwrap().mean, 0.0);
        let t2 = array![[0.0, 5.0], [1.0, 5.0]];
        let r = r_squared(t2.view(), t2.view()).unwrap();
        assert_eq!(r.per_factor, vec![Some(1.0), None]);
        assert!(r_squared(t.slice(ndarray::s![..1, ..]), t.slice(ndarray::s![..1, ..])).is_err());
    }

    #[test]
    fn hinton_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = CoefficientMatrix::from_rows(&[vec![0.1, 1.0 / 3.0], vec![0.0, 2.5e-7]]).unwrap();
        let names = vec!["shape".to_string(), "posX".to_string()];
        let p = dir.path().join("h.csv");
        write_hinton_csv(&c, &names, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("latent,shape,posX\nz0,"));
        let (back, n2) = read_hinton_csv(&p).unwrap();
        assert_eq!(back, c);
        assert_eq!(n2, names);
    }

    #[test]
    fn subsample_is_sorted_and_seeded() {
        let idx: Vec<usize> = (0..100).collect();
        let a = subsample(&idx, 10, 4);
        assert_eq!(a.len(), 10);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a, subsample(&idx, 10, 4));
        assert_eq!(subsample(&idx, 1000, 4), idx);
    }
}
