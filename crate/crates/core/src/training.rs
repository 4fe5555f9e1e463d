//! Postdistorter fitting and the indirect-learning loop.
//!
//! A postdistorter `P` is fitted so that `P(y)` reproduces the amplifier input
//! `z` from its output `y`, then installed in front of the amplifier. Additive
//! matrices are linear in their coefficients and solved in one least-squares
//! step; product structures use alternating least squares over the matrix
//! columns or a minibatch conjugate-gradient method.

use std::ops::Range;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::basis::{build_basis, clamp_envelope, OrthonormalBasis, UnivariateFunction};
use crate::error::{Error, Result};
use crate::hpa::HpaModel;
use crate::metrics::{estimate_lag, nmse_db_at};
use crate::operators::{ComplexSequence, Operator};
use crate::predistorter::{PredistorterMatrix, Structure};
use crate::signals::{envelope_histogram, generate, WaveformConfig};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    /// Alternating least squares over matrix columns.
    Als,
    /// Minibatch Polak-Ribiere conjugate gradient.
    Scg,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    /// Samples per adaptation block, and the SCG minibatch size.
    pub samples_per_iteration: usize,
    /// ALS sweeps or SCG minibatches per fit.
    pub max_iterations: usize,
    /// Passes of the indirect-learning loop.
    pub adaptation_iterations: usize,
    pub solver: Solver,
    /// Relative objective decrease below which a fit stops early.
    pub convergence_tol: f64,
    /// Tikhonov weight relative to the trace of the normal matrix.
    pub inner_ls_regularization: f64,
    pub seed: u64,
    /// Conjugate-gradient steps taken on each SCG minibatch.
    pub scg_inner_steps: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            samples_per_iteration: 25_600,
            max_iterations: 40,
            adaptation_iterations: 20,
            solver: Solver::Als,
            convergence_tol: 1e-6,
            inner_ls_regularization: 1e-10,
            seed: 1,
            scg_inner_steps: 25,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.samples_per_iteration == 0 {
            return bad("samples_per_iteration must be positive");
        }
        if !(self.convergence_tol >= 0.0) {
            return bad("convergence_tol must be non-negative");
        }
        if !(self.inner_ls_regularization >= 0.0 && self.inner_ls_regularization.is_finite()) {
            return bad("inner_ls_regularization must be finite and non-negative");
        }
        if self.solver == Solver::Scg && self.scg_inner_steps == 0 {
            return bad("scg_inner_steps must be positive");
        }
        Ok(())
    }
}

/// Result of one postdistorter fit.
#[derive(Debug, Clone)]
pub struct TrainingRun {
    /// Objective before the first update, then after every sweep or batch.
    pub objective_trace: Vec<f64>,
    /// Fit residual relative to the target power, in dB.
    pub residual_nmse_db: f64,
    pub final_matrix: PredistorterMatrix,
    /// Envelopes clamped into `[0, 1]` while building the fit data.
    pub clamp_count: usize,
    pub warnings: Vec<String>,
}

/// Errors `z[i + d] - P(y)[i]` of a postdistorter, with `d` the offset that
/// lines the postdistorter output up with `z`.
#[derive(Debug, Clone)]
pub struct PostdistortionError {
    pub errors: Vec<Complex64>,
    pub objective: f64,
    pub offset: usize,
}

/// Fit data: envelope basis values of `y` and the aligned targets from `z`.
struct Problem {
    rows: usize,
    depth: usize,
    m: usize,
    product: bool,
    /// 0-based tap offsets `m_k - 1`.
    taps: Vec<usize>,
    y: Vec<Complex64>,
    psi: Vec<f64>,
    target: Vec<Complex64>,
    clamped: usize,
    lut: bool,
}

impl Problem {
    fn new(template: &PredistorterMatrix, z: &ComplexSequence, y: &ComplexSequence) -> Result<(Problem, usize)> {
        let (zs, ys) = (z.samples(), y.samples());
        if ys.len() > zs.len() {
            return Err(Error::Alignment(format!(
                "amplifier output of {} samples is longer than its input of {}",
                ys.len(),
                zs.len()
            )));
        }
        let depth = template.depth();
        if ys.len() < depth {
            return Err(Error::Length {
                needed: depth,
                got: ys.len(),
            });
        }
        let hpa_delay = zs.len() - ys.len();
        let offset = hpa_delay + depth - 1;
        let n_out = ys.len() - depth + 1;
        let basis = template.basis();
        let m = basis.degree_count();
        let mut psi = vec![0.0; ys.len() * m];
        let mut clamped = 0;
        for (s, v) in ys.iter().enumerate() {
            let (env, c) = clamp_envelope(v.norm());
            clamped += c as usize;
            basis.eval_into(env, &mut psi[s * m..(s + 1) * m]);
        }
        Ok((
            Problem {
                rows: template.rows(),
                depth,
                m,
                product: template.structure().is_product(),
                taps: template.taps().iter().map(|t| t - 1).collect(),
                y: ys.to_vec(),
                psi,
                target: zs[offset..offset + n_out].to_vec(),
                clamped,
                lut: template.entries().iter().any(|e| e.is_lut()),
            },
            offset,
        ))
    }

    fn n_out(&self) -> usize {
        self.target.len()
    }

    fn params(&self) -> usize {
        self.rows * self.depth * self.m
    }

    fn psi(&self, s: usize) -> &[f64] {
        &self.psi[s * self.m..(s + 1) * self.m]
    }

    /// Sample index feeding tap `q` of output `i`.
    fn sample(&self, i: usize, q: usize) -> usize {
        i + self.depth - 1 - q
    }

    fn tap_value(&self, i: usize, k: usize) -> Complex64 {
        self.y[self.sample(i, self.taps[k])]
    }

    /// `P_kq(|y_s|)` for every sample, laid out `[s][k][q]`.
    fn entry_values(&self, theta: &[Complex64]) -> Vec<Complex64> {
        let kq = self.rows * self.depth;
        let mut v = Vec::with_capacity(self.y.len() * kq);
        for s in 0..self.y.len() {
            let psi = self.psi(s);
            for e in 0..kq {
                v.push(dot(&theta[e * self.m..(e + 1) * self.m], psi));
            }
        }
        v
    }

    fn value(&self, values: &[Complex64], i: usize, k: usize, q: usize) -> Complex64 {
        values[self.sample(i, q) * self.rows * self.depth + k * self.depth + q]
    }

    /// Row `k` combination at output `i`, with column `skip` left out.
    fn row_combination(&self, values: &[Complex64], i: usize, k: usize, skip: Option<usize>) -> Complex64 {
        let mut acc = if self.product { ONE } else { ZERO };
        for q in (0..self.depth).filter(|&q| Some(q) != skip) {
            let v = self.value(values, i, k, q);
            if self.product {
                acc *= v;
            } else {
                acc += v;
            }
        }
        acc
    }

    fn predict(&self, values: &[Complex64], i: usize) -> Complex64 {
        (0..self.rows)
            .map(|k| self.tap_value(i, k) * self.row_combination(values, i, k, None))
            .sum()
    }

    fn errors(&self, values: &[Complex64], range: Range<usize>) -> (Vec<Complex64>, f64) {
        let e: Vec<Complex64> = range.map(|i| self.target[i] - self.predict(values, i)).collect();
        let j = e.iter().map(|v| v.norm_sqr()).sum();
        (e, j)
    }

    fn objective(&self, theta: &[Complex64]) -> f64 {
        self.errors(&self.entry_values(theta), 0..self.n_out()).1
    }

    /// `d yhat_i / d u_kqm = w_ikq psi_m(|y_{s(i,q)}|)`; returns `w_ikq`.
    fn weight(&self, values: &[Complex64], i: usize, k: usize, q: usize) -> Complex64 {
        let tap = self.tap_value(i, k);
        if self.product {
            tap * self.row_combination(values, i, k, Some(q))
        } else {
            tap
        }
    }

    /// Gradient `-2 sum_i e_i conj(d yhat_i / d u)` over `range`.
    fn gradient(&self, values: &[Complex64], range: Range<usize>, errors: &[Complex64]) -> Vec<Complex64> {
        let mut g = vec![ZERO; self.params()];
        for (i, e) in range.zip(errors) {
            for k in 0..self.rows {
                for q in 0..self.depth {
                    let c = -2.0 * e * self.weight(values, i, k, q).conj();
                    let psi = self.psi(self.sample(i, q));
                    let base = (k * self.depth + q) * self.m;
                    for (gm, p) in g[base..base + self.m].iter_mut().zip(psi) {
                        *gm += c * p;
                    }
                }
            }
        }
        g
    }

    /// Diagonal of the Gauss-Newton matrix `sum_i |d yhat_i / d u|^2`.
    fn gauss_newton_diagonal(&self, values: &[Complex64], range: Range<usize>) -> Vec<f64> {
        let mut h = vec![0.0; self.params()];
        for i in range {
            for k in 0..self.rows {
                for q in 0..self.depth {
                    let w = self.weight(values, i, k, q).norm_sqr();
                    let psi = self.psi(self.sample(i, q));
                    let base = (k * self.depth + q) * self.m;
                    for (hm, p) in h[base..base + self.m].iter_mut().zip(psi) {
                        *hm += w * p * p;
                    }
                }
            }
        }
        h
    }

    /// Derivative of the prediction along coefficient direction `d`.
    fn directional(&self, values: &[Complex64], dir_values: &[Complex64], range: Range<usize>) -> Vec<Complex64> {
        range
            .map(|i| {
                let mut acc = ZERO;
                for k in 0..self.rows {
                    for q in 0..self.depth {
                        acc += self.weight(values, i, k, q) * self.value(dir_values, i, k, q);
                    }
                }
                acc
            })
            .collect()
    }

    fn target_power(&self) -> f64 {
        self.target.iter().map(|t| t.norm_sqr()).sum()
    }
}

#[inline]
fn dot(u: &[Complex64], psi: &[f64]) -> Complex64 {
    u.iter().zip(psi).map(|(a, b)| a * b).sum()
}

fn real_dot(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.conj() * y).re).sum()
}

/// Coefficients of `pd` in `[(k * Q + q) * M + m]` order with the row scales
/// folded into column 0.
fn flatten(pd: &PredistorterMatrix) -> Result<Vec<Complex64>> {
    let coeffs = pd
        .coefficients()
        .ok_or_else(|| Error::InvalidConfig("fitting needs polynomial entries".into()))?;
    let mut theta = Vec::with_capacity(coeffs.len() * pd.basis().degree_count());
    for (e, u) in coeffs.iter().enumerate() {
        let (k, q) = (e / pd.depth(), e % pd.depth());
        // additive rows carry the scale on every column
        let s = if q == 0 || !pd.structure().is_product() { pd.scales()[k] } else { ONE };
        theta.extend(u.iter().map(|c| c * s));
    }
    Ok(theta)
}

fn rebuild(template: &PredistorterMatrix, theta: &[Complex64]) -> Result<PredistorterMatrix> {
    let m = template.basis().degree_count();
    let entries = theta.chunks(m).map(|c| UnivariateFunction::Poly(c.to_vec())).collect();
    PredistorterMatrix::new(
        template.structure(),
        template.rows(),
        template.depth(),
        entries,
        template.taps().to_vec(),
        vec![ONE; template.rows()],
        template.basis().clone(),
    )
}

fn residual_db(objective: f64, power: f64) -> f64 {
    if objective > 0.0 && power > 0.0 {
        10.0 * (objective / power).log10()
    } else {
        crate::metrics::NMSE_FLOOR_DB
    }
}

/// Errors and objective of `pd` used as a postdistorter for `(z, y)`, where
/// `y = F(z)` is the amplifier output of length `len(z) - Q_F + 1`.
pub fn postdistortion_error(pd: &PredistorterMatrix, z: &ComplexSequence, y: &ComplexSequence) -> Result<PostdistortionError> {
    let (problem, offset) = Problem::new(pd, z, y)?;
    let out = pd.apply_with_stats(y)?.output;
    let errors: Vec<Complex64> = problem.target.iter().zip(out.samples()).map(|(t, p)| t - p).collect();
    let objective = errors.iter().map(|e| e.norm_sqr()).sum();
    Ok(PostdistortionError {
        errors,
        objective,
        offset,
    })
}

/// Objective and its gradient with respect to the entry coefficients of
/// `pd`, laid out `[(k * Q + q) * M + m]`. Row scales are held fixed.
///
/// The gradient is `dJ/dRe(u) + i dJ/dIm(u)`.
pub fn objective_and_gradient(pd: &PredistorterMatrix, z: &ComplexSequence, y: &ComplexSequence) -> Result<(f64, Vec<Complex64>)> {
    let (problem, _) = Problem::new(pd, z, y)?;
    let coeffs = pd
        .coefficients()
        .ok_or_else(|| Error::InvalidConfig("fitting needs polynomial entries".into()))?;
    let theta: Vec<Complex64> = coeffs.concat();
    let values = problem.entry_values(&theta);
    let n = problem.n_out();
    let mut errors = Vec::with_capacity(n);
    for i in 0..n {
        let mut yhat = ZERO;
        for k in 0..problem.rows {
            yhat += pd.scales()[k] * problem.tap_value(i, k) * problem.row_combination(&values, i, k, None);
        }
        errors.push(problem.target[i] - yhat);
    }
    let objective = errors.iter().map(|e| e.norm_sqr()).sum();
    let mut g = problem.gradient(&values, 0..n, &errors);
    for k in 0..problem.rows {
        let s = pd.scales()[k].conj();
        let start = k * problem.depth * problem.m;
        for v in &mut g[start..start + problem.depth * problem.m] {
            *v *= s;
        }
    }
    Ok((objective, g))
}

/// Solves the regularized normal equations of a linear least-squares
/// problem. `feature(i, out)` writes the regressors of output `i`. The flag
/// reports a rank-deficient system.
fn solve_least_squares<F>(n: usize, p: usize, target: impl Fn(usize) -> Complex64, reg: f64, mut feature: F) -> (Vec<Complex64>, bool)
where
    F: FnMut(usize, &mut [Complex64]),
{
    let mut gram = vec![ZERO; p * p];
    let mut rhs = vec![ZERO; p];
    let mut f = vec![ZERO; p];
    for i in 0..n {
        feature(i, &mut f);
        let t = target(i);
        for a in 0..p {
            let ca = f[a].conj();
            if ca == ZERO {
                continue;
            }
            rhs[a] += ca * t;
            let row = &mut gram[a * p..(a + 1) * p];
            for b in a..p {
                row[b] += ca * f[b];
            }
        }
    }
    let trace: f64 = (0..p).map(|a| gram[a * p + a].re).sum();
    let mut deficient = n < p;
    if trace == 0.0 {
        return (vec![ZERO; p], true);
    }
    let mut lambda = reg * trace;
    let b = DVector::from_vec(rhs);
    for attempt in 0..8 {
        let m = DMatrix::from_fn(p, p, |i, j| {
            let v = if i <= j { gram[i * p + j] } else { gram[j * p + i].conj() };
            if i == j {
                v + lambda
            } else {
                v
            }
        });
        if let Some(ch) = m.cholesky() {
            let x = ch.solve(&b);
            if x.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
                return (x.iter().copied().collect(), deficient);
            }
        }
        deficient = true;
        lambda = if lambda > 0.0 { lambda * 1e3 } else { 1e-12 * trace };
        debug!("normal equations not positive definite, attempt {attempt}; raising regularization to {lambda:e}");
    }
    (vec![ZERO; p], true)
}

fn rank_warning(n: usize, p: usize, warnings: &mut Vec<String>) {
    let msg = format!("least-squares system with {n} equations and {p} unknowns is rank deficient");
    warn!("{msg}");
    warnings.push(msg);
}

/// One-step least-squares fit of an additive postdistorter. Only the shape,
/// taps and basis of `template` are used.
pub fn fit_additive(template: &PredistorterMatrix, z: &ComplexSequence, y: &ComplexSequence, cfg: &TrainingConfig) -> Result<TrainingRun> {
    if template.structure() != Structure::Additive {
        return Err(Error::Structure {
            expected: "additive",
            found: template.structure().name(),
        });
    }
    cfg.validate()?;
    let (problem, _) = Problem::new(template, z, y)?;
    let initial = match template.coefficients() {
        Some(_) => problem.objective(&flatten(template)?),
        None => problem.target_power(),
    };
    let (q_depth, m) = (problem.depth, problem.m);
    let p = problem.params();
    let (theta, deficient) = solve_least_squares(
        problem.n_out(),
        p,
        |i| problem.target[i],
        cfg.inner_ls_regularization,
        |i, f| {
            for k in 0..problem.rows {
                let tap = problem.tap_value(i, k);
                for q in 0..q_depth {
                    let psi = problem.psi(problem.sample(i, q));
                    let base = (k * q_depth + q) * m;
                    for (fm, v) in f[base..base + m].iter_mut().zip(psi) {
                        *fm = tap * v;
                    }
                }
            }
        },
    );
    let mut warnings = Vec::new();
    if deficient {
        rank_warning(problem.n_out(), p, &mut warnings);
    }
    let objective = problem.objective(&theta);
    Ok(TrainingRun {
        objective_trace: vec![initial, objective],
        residual_nmse_db: residual_db(objective, problem.target_power()),
        final_matrix: rebuild(template, &theta)?,
        clamp_count: problem.clamped,
        warnings,
    })
}

fn check_product(pd: &PredistorterMatrix) -> Result<()> {
    if !pd.structure().is_product() {
        return Err(Error::Structure {
            expected: "multiplicative",
            found: pd.structure().name(),
        });
    }
    Ok(())
}

fn converged(prev: f64, cur: f64, tol: f64) -> bool {
    cur == 0.0 || (prev - cur) <= tol * prev
}

/// Alternating least squares starting from `init`. Each sweep solves exactly
/// for one column of the matrix at a time with the others held fixed, so the
/// objective never increases.
pub fn fit_multiplicative_als(init: &PredistorterMatrix, z: &ComplexSequence, y: &ComplexSequence, cfg: &TrainingConfig) -> Result<TrainingRun> {
    check_product(init)?;
    cfg.validate()?;
    let (problem, _) = Problem::new(init, z, y)?;
    if problem.lut {
        return Err(Error::InvalidConfig("fitting needs polynomial entries".into()));
    }
    let basis = init.basis().clone();
    let (rows, q_depth, m) = (problem.rows, problem.depth, problem.m);
    let n = problem.n_out();
    let mut theta = flatten(init)?;
    let mut values = problem.entry_values(&theta);
    let mut objective = problem.errors(&values, 0..n).1;
    let mut trace = vec![objective];
    let mut warnings = Vec::new();
    let mut warned = false;
    let one = match UnivariateFunction::constant(&basis, ONE) {
        UnivariateFunction::Poly(u) => u,
        UnivariateFunction::Lut(_) => unreachable!(),
    };
    for sweep in 0..cfg.max_iterations {
        for q in 0..q_depth {
            let saved = theta.clone();
            // rows whose partial product vanishes cannot be updated; restart
            // their zero factors at the constant one
            for k in 0..rows {
                let live = (0..n).any(|i| problem.row_combination(&values, i, k, Some(q)) != ZERO);
                if live {
                    continue;
                }
                for q2 in (0..q_depth).filter(|&q2| q2 != q) {
                    let base = (k * q_depth + q2) * m;
                    if theta[base..base + m].iter().all(|c| *c == ZERO) {
                        debug!("sweep {sweep}: reinitializing entry ({}, {}) to one", k + 1, q2 + 1);
                        theta[base..base + m].copy_from_slice(&one);
                    }
                }
            }
            if theta != saved {
                values = problem.entry_values(&theta);
            }
            let partial: Vec<Complex64> = (0..n)
                .flat_map(|i| {
                    let values = &values;
                    let problem = &problem;
                    (0..rows).map(move |k| problem.weight(values, i, k, q))
                })
                .collect();
            let (col, deficient) = solve_least_squares(
                n,
                rows * m,
                |i| problem.target[i],
                cfg.inner_ls_regularization,
                |i, f| {
                    let psi = problem.psi(problem.sample(i, q));
                    for k in 0..rows {
                        let w = partial[i * rows + k];
                        for (fm, v) in f[k * m..(k + 1) * m].iter_mut().zip(psi) {
                            *fm = w * v;
                        }
                    }
                },
            );
            if deficient && !warned {
                rank_warning(n, rows * m, &mut warnings);
                warned = true;
            }
            for k in 0..rows {
                let base = (k * q_depth + q) * m;
                theta[base..base + m].copy_from_slice(&col[k * m..(k + 1) * m]);
            }
            let new_values = problem.entry_values(&theta);
            let new_objective = problem.errors(&new_values, 0..n).1;
            if new_objective <= objective {
                values = new_values;
                objective = new_objective;
            } else {
                debug!("sweep {sweep} column {}: update raised the objective, reverted", q + 1);
                theta = saved;
                values = problem.entry_values(&theta);
            }
        }
        let prev = *trace.last().unwrap();
        trace.push(objective);
        if converged(prev, objective, cfg.convergence_tol) {
            debug!("ALS converged after {} sweeps", sweep + 1);
            break;
        }
    }
    let final_matrix = if cfg.max_iterations == 0 {
        init.clone()
    } else {
        rebuild(init, &theta)?
    };
    Ok(TrainingRun {
        objective_trace: trace,
        residual_nmse_db: residual_db(objective, problem.target_power()),
        final_matrix,
        clamp_count: problem.clamped,
        warnings,
    })
}

/// Minibatch conjugate gradient. Each iteration draws a contiguous batch of
/// `samples_per_iteration` outputs and takes `scg_inner_steps` Polak-Ribiere
/// steps on it, preconditioned by the diagonal of the Gauss-Newton matrix.
/// Step sizes start at the Gauss-Newton estimate and backtrack until the
/// batch objective decreases sufficiently.
pub fn fit_multiplicative_scg(init: &PredistorterMatrix, z: &ComplexSequence, y: &ComplexSequence, cfg: &TrainingConfig) -> Result<TrainingRun> {
    check_product(init)?;
    cfg.validate()?;
    let (problem, _) = Problem::new(init, z, y)?;
    if problem.lut {
        return Err(Error::InvalidConfig("fitting needs polynomial entries".into()));
    }
    let n = problem.n_out();
    let batch = cfg.samples_per_iteration.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = flatten(init)?;
    let mut objective = problem.objective(&theta);
    let mut trace = vec![objective];
    let mut warnings = Vec::new();
    for it in 0..cfg.max_iterations {
        let start = if batch < n { rng.gen_range(0..=n - batch) } else { 0 };
        let range = start..start + batch;
        let mut values = problem.entry_values(&theta);
        let (mut errors, mut batch_obj) = problem.errors(&values, range.clone());
        let mut grad = problem.gradient(&values, range.clone(), &errors);
        let precondition = {
            let h = problem.gauss_newton_diagonal(&values, range.clone());
            let floor = 1e-12 * h.iter().sum::<f64>() / h.len() as f64;
            let inv: Vec<f64> = h.iter().map(|v| 1.0 / v.max(floor).max(f64::MIN_POSITIVE)).collect();
            move |g: &[Complex64]| -> Vec<Complex64> { g.iter().zip(&inv).map(|(a, b)| a * b).collect() }
        };
        let mut pgrad = precondition(&grad);
        let mut dir: Vec<Complex64> = pgrad.iter().map(|g| -g).collect();
        for step in 0..cfg.scg_inner_steps {
            let steepest = |p: &[Complex64]| -> Vec<Complex64> { p.iter().map(|g| -g).collect() };
            let mut slope = real_dot(&grad, &dir);
            if !(slope < 0.0) {
                dir = steepest(&pgrad);
                slope = real_dot(&grad, &dir);
            }
            if !(slope < 0.0) {
                break;
            }
            let mut accepted = line_search(&problem, &theta, &values, &dir, &errors, batch_obj, slope, range.clone());
            if accepted.is_none() && step > 0 {
                debug!("iteration {it} step {step}: line search failed, restarting along the gradient");
                dir = steepest(&pgrad);
                slope = real_dot(&grad, &dir);
                accepted = line_search(&problem, &theta, &values, &dir, &errors, batch_obj, slope, range.clone());
            }
            let Some((next, _)) = accepted else {
                debug!("iteration {it} step {step}: no descent along the gradient");
                break;
            };
            theta = next;
            values = problem.entry_values(&theta);
            let (e, j) = problem.errors(&values, range.clone());
            errors = e;
            batch_obj = j;
            let new_grad = problem.gradient(&values, range.clone(), &errors);
            let new_pgrad = precondition(&new_grad);
            let denom = real_dot(&grad, &pgrad);
            let beta = if denom > 0.0 {
                let diff: Vec<Complex64> = new_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
                (real_dot(&new_pgrad, &diff) / denom).max(0.0)
            } else {
                0.0
            };
            dir = new_pgrad.iter().zip(&dir).map(|(g, d)| -g + beta * d).collect();
            grad = new_grad;
            pgrad = new_pgrad;
        }
        let prev = objective;
        objective = problem.objective(&theta);
        trace.push(objective);
        if cfg.convergence_tol > 0.0 && batch == n && converged(prev, objective, cfg.convergence_tol) {
            break;
        }
    }
    if !objective.is_finite() {
        warnings.push("conjugate-gradient fit diverged".into());
    }
    let final_matrix = if cfg.max_iterations == 0 {
        init.clone()
    } else {
        rebuild(init, &theta)?
    };
    Ok(TrainingRun {
        objective_trace: trace,
        residual_nmse_db: residual_db(objective, problem.target_power()),
        final_matrix,
        clamp_count: problem.clamped,
        warnings,
    })
}

#[allow(clippy::too_many_arguments)]
fn line_search(
    problem: &Problem,
    theta: &[Complex64],
    values: &[Complex64],
    dir: &[Complex64],
    errors: &[Complex64],
    objective: f64,
    slope: f64,
    range: Range<usize>,
) -> Option<(Vec<Complex64>, f64)> {
    const ARMIJO: f64 = 1e-4;
    let dir_values = problem.entry_values(dir);
    let jd = problem.directional(values, &dir_values, range.clone());
    let curvature: f64 = jd.iter().map(|v| v.norm_sqr()).sum();
    let mut alpha = if curvature > 0.0 {
        jd.iter().zip(errors).map(|(d, e)| (d.conj() * e).re).sum::<f64>() / curvature
    } else {
        1.0
    };
    if !(alpha > 0.0 && alpha.is_finite()) {
        alpha = 1.0;
    }
    for _ in 0..40 {
        let trial: Vec<Complex64> = theta.iter().zip(dir).map(|(t, d)| t + alpha * d).collect();
        let j = problem.errors(&problem.entry_values(&trial), range.clone()).1;
        if j <= objective + ARMIJO * alpha * slope {
            return Some((trial, j));
        }
        alpha *= 0.5;
    }
    None
}

/// Fits a postdistorter with the method suited to its structure: one
/// least-squares solve for additive matrices, the configured solver
/// otherwise.
pub fn fit_postdistorter(init: &PredistorterMatrix, z: &ComplexSequence, y: &ComplexSequence, cfg: &TrainingConfig) -> Result<TrainingRun> {
    match (init.structure(), cfg.solver) {
        (Structure::Additive, _) => fit_additive(init, z, y, cfg),
        (_, Solver::Als) => fit_multiplicative_als(init, z, y, cfg),
        (_, Solver::Scg) => fit_multiplicative_scg(init, z, y, cfg),
    }
}

/// Shape of the predistorter trained by [`indirect_learning_loop`].
#[derive(Debug, Clone, PartialEq)]
pub struct PredistorterSpec {
    pub structure: Structure,
    pub rows: usize,
    pub depth: usize,
    pub degree_count: usize,
    pub histogram_bins: usize,
}

impl PredistorterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.structure == Structure::Diagonal && self.rows != self.depth {
            return Err(Error::InvalidConfig("diagonal structure needs K = Q".into()));
        }
        if self.rows == 0 || self.depth == 0 || self.degree_count == 0 {
            return Err(Error::InvalidConfig("K, Q and M must be at least 1".into()));
        }
        if self.histogram_bins < 2 {
            return Err(Error::InvalidConfig("at least two histogram bins are needed".into()));
        }
        Ok(())
    }
}

/// Input, amplifier output without predistortion and amplifier output with
/// the trained predistorter, on a held-out block.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub input: ComplexSequence,
    pub without_dpd: ComplexSequence,
    pub with_dpd: ComplexSequence,
    pub baseline_nmse_db: f64,
    pub final_nmse_db: f64,
    /// Known delay of the cascade, `(Q - 1) + (Q_F - 1)`.
    pub compensated_lag: usize,
    /// Cross-correlation peak of the predistorted output against the input.
    pub estimated_lag: isize,
}

#[derive(Debug, Clone)]
pub struct AdaptationRun {
    pub final_matrix: PredistorterMatrix,
    pub basis: OrthonormalBasis,
    /// Cascade NMSE of the predistorter in use at each pass, then of the
    /// final one.
    pub cascade_nmse_db: Vec<f64>,
    /// Final fit objective of each pass.
    pub objective_trace: Vec<f64>,
    /// Fit residual of each pass.
    pub residual_nmse_db: Vec<f64>,
    pub fits: Vec<TrainingRun>,
    pub clamp_count: usize,
    pub warnings: Vec<String>,
    pub evaluation: Evaluation,
}

/// Indirect learning: drive the amplifier through the current predistorter,
/// fit a postdistorter to the resulting input/output pair, install it, and
/// repeat. The basis is built once from the envelope histogram of the first
/// transmitted block. Pass `r` uses waveform seed `seed + r`; the held-out
/// evaluation block uses `seed + adaptation_iterations` and the configured
/// waveform length.
pub fn indirect_learning_loop(
    model: &HpaModel,
    waveform: &WaveformConfig,
    spec: &PredistorterSpec,
    cfg: &TrainingConfig,
) -> Result<AdaptationRun> {
    spec.validate()?;
    cfg.validate()?;
    let block = |seed_offset: u64, len: usize| {
        let mut w = waveform.clone();
        w.seed = waveform.seed.wrapping_add(seed_offset);
        w.num_samples = len;
        generate(&w)
    };
    let first = block(0, cfg.samples_per_iteration)?;
    let histogram = envelope_histogram(&first, spec.histogram_bins)?;
    let basis = build_basis(&histogram, spec.degree_count)?;
    let identity = PredistorterMatrix::identity(spec.structure, spec.rows, spec.depth, &basis)?;
    let lag = (spec.depth - 1) + (model.memory_depth() - 1);
    let mut pd = identity.clone();
    let mut fit_init = if spec.structure.is_product() {
        PredistorterMatrix::filled(spec.structure, spec.rows, spec.depth, &basis, ONE)?
    } else {
        identity.clone()
    };
    let mut cascade = Vec::new();
    let mut objectives = Vec::new();
    let mut residuals = Vec::new();
    let mut fits = Vec::new();
    let mut clamp_count = 0;
    let mut warnings = Vec::new();
    for pass in 0..cfg.adaptation_iterations {
        let x = if pass == 0 { first.clone() } else { block(pass as u64, cfg.samples_per_iteration)? };
        let applied = pd.apply_with_stats(&x)?;
        clamp_count += applied.clamped;
        let y = model.apply(&applied.output)?;
        cascade.push(nmse_db_at(&x, &y, lag as isize)?);
        let mut fit_cfg = cfg.clone();
        fit_cfg.seed = cfg.seed.wrapping_add(pass as u64);
        let run = fit_postdistorter(&fit_init, &applied.output, &y, &fit_cfg)?;
        debug!("pass {pass}: cascade {:.2} dB, fit residual {:.2} dB", cascade[pass], run.residual_nmse_db);
        clamp_count += run.clamp_count;
        objectives.push(*run.objective_trace.last().unwrap());
        residuals.push(run.residual_nmse_db);
        warnings.extend(run.warnings.iter().cloned());
        pd = run.final_matrix.clone();
        fit_init = pd.clone();
        fits.push(run);
    }
    let x = block(cfg.adaptation_iterations as u64, waveform.num_samples)?;
    let without = model.apply(&identity.apply(&x)?)?;
    let applied = pd.apply_with_stats(&x)?;
    clamp_count += applied.clamped;
    let with = model.apply(&applied.output)?;
    let final_nmse = nmse_db_at(&x, &with, lag as isize)?;
    cascade.push(final_nmse);
    let evaluation = Evaluation {
        baseline_nmse_db: nmse_db_at(&x, &without, lag as isize)?,
        final_nmse_db: final_nmse,
        compensated_lag: lag,
        estimated_lag: estimate_lag(&x, &with),
        input: x,
        without_dpd: without,
        with_dpd: with,
    };
    Ok(AdaptationRun {
        final_matrix: pd,
        basis,
        cascade_nmse_db: cascade,
        objective_trace: objectives,
        residual_nmse_db: residuals,
        fits,
        clamp_count,
        warnings,
        evaluation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::DensityTable;

    fn seq(n: usize, seed: u64) -> ComplexSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexSequence::from_samples((0..n).map(|_| Complex64::from_polar(rng.gen_range(0.05..0.7), rng.gen_range(-3.2..3.2))).collect())
            .unwrap()
    }

    fn basis(m: usize) -> OrthonormalBasis {
        build_basis(&DensityTable::uniform(64), m).unwrap()
    }

    fn random_matrix(structure: Structure, rows: usize, depth: usize, b: &OrthonormalBasis, seed: u64) -> PredistorterMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pd = PredistorterMatrix::filled(structure, rows, depth, b, ONE).unwrap();
        for k in 0..rows {
            for q in 0..depth {
                let u = (0..b.degree_count())
                    .map(|m| {
                        let s = if m == 0 { 1.0 } else { 0.3 };
                        Complex64::new(rng.gen_range(-s..s), rng.gen_range(-s..s))
                    })
                    .collect();
                pd.set_entry(k, q, UnivariateFunction::Poly(u)).unwrap();
            }
        }
        pd
    }

    #[test]
    fn errors_match_direct_application() {
        let b = basis(3);
        let pd = random_matrix(Structure::Multiplicative, 3, 2, &b, 1);
        let z = seq(100, 2);
        let y = z.with_samples(z.samples()[2..].to_vec()).unwrap();
        let e = postdistortion_error(&pd, &z, &y).unwrap();
        assert_eq!(e.offset, 3);
        assert_eq!(e.errors.len(), 97);
        let out = pd.apply(&y).unwrap();
        assert!((e.errors[5] - (z.samples()[8] - out.samples()[5])).norm() < 1e-15);
    }

    #[test]
    fn misaligned_lengths_rejected() {
        let b = basis(3);
        let pd = PredistorterMatrix::identity(Structure::Diagonal, 2, 2, &b).unwrap();
        let z = seq(50, 3);
        let y = seq(51, 4);
        assert!(matches!(postdistortion_error(&pd, &z, &y), Err(Error::Alignment(_))));
    }

    #[test]
    fn additive_recovers_planted() {
        let b = basis(4);
        let truth = random_matrix(Structure::Additive, 2, 3, &b, 5);
        let y = seq(600, 6);
        let z = truth.apply(&y).unwrap();
        // z is the postdistorter output, so pad to make y = F(z) line up
        let mut zs = vec![ZERO; 2];
        zs.extend_from_slice(z.samples());
        let z = ComplexSequence::from_samples(zs).unwrap();
        let run = fit_additive(&truth, &z, &y, &TrainingConfig::default()).unwrap();
        assert!(run.residual_nmse_db < -120.0, "{}", run.residual_nmse_db);
        assert!(run.warnings.is_empty());
    }

    #[test]
    fn additive_rank_deficiency_warns() {
        let b = basis(4);
        let pd = PredistorterMatrix::identity(Structure::Additive, 3, 3, &b).unwrap();
        let y = seq(12, 7);
        let z = seq(12, 8);
        let run = fit_additive(&pd, &z, &y, &TrainingConfig::default()).unwrap();
        assert!(!run.warnings.is_empty());
    }

    #[test]
    fn als_zero_iterations_returns_init() {
        let b = basis(3);
        let pd = random_matrix(Structure::Diagonal, 2, 2, &b, 9);
        let y = seq(200, 10);
        let z = seq(200, 11);
        let cfg = TrainingConfig {
            max_iterations: 0,
            ..TrainingConfig::default()
        };
        let run = fit_multiplicative_als(&pd, &z, &y, &cfg).unwrap();
        assert_eq!(run.final_matrix, pd);
        assert_eq!(run.objective_trace.len(), 1);
    }

    #[test]
    fn als_from_identity_handles_zero_rows() {
        let b = basis(3);
        let truth = random_matrix(Structure::Diagonal, 3, 3, &b, 12);
        let y = seq(800, 13);
        let mut zs = vec![ZERO; 2];
        zs.extend_from_slice(truth.apply(&y).unwrap().samples());
        let z = ComplexSequence::from_samples(zs).unwrap();
        let init = PredistorterMatrix::identity(Structure::Diagonal, 3, 3, &b).unwrap();
        let cfg = TrainingConfig {
            max_iterations: 200,
            convergence_tol: 0.0,
            ..TrainingConfig::default()
        };
        let run = fit_multiplicative_als(&init, &z, &y, &cfg).unwrap();
        assert!(run.objective_trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(run.residual_nmse_db < -60.0, "{}", run.residual_nmse_db);
    }

    #[test]
    fn structure_mismatch() {
        let b = basis(3);
        let add = PredistorterMatrix::identity(Structure::Additive, 2, 2, &b).unwrap();
        let diag = PredistorterMatrix::identity(Structure::Diagonal, 2, 2, &b).unwrap();
        let s = seq(40, 14);
        let cfg = TrainingConfig::default();
        assert!(matches!(fit_multiplicative_als(&add, &s, &s, &cfg), Err(Error::Structure { .. })));
        assert!(matches!(fit_multiplicative_scg(&add, &s, &s, &cfg), Err(Error::Structure { .. })));
        assert!(matches!(fit_additive(&diag, &s, &s, &cfg), Err(Error::Structure { .. })));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let b = basis(3);
        let mut pd = random_matrix(Structure::Diagonal, 2, 2, &b, 15);
        pd.set_scale(1, Complex64::new(0.7, -0.2));
        let y = seq(64, 16);
        let z = seq(65, 17);
        let (_, g) = objective_and_gradient(&pd, &z, &y).unwrap();
        let h = 1e-6;
        let coeffs: Vec<Complex64> = pd.coefficients().unwrap().concat();
        let objective = |theta: &[Complex64]| {
            let mut p = pd.clone();
            for (e, u) in theta.chunks(3).enumerate() {
                p.set_entry(e / 2, e % 2, UnivariateFunction::Poly(u.to_vec())).unwrap();
            }
            postdistortion_error(&p, &z, &y).unwrap().objective
        };
        for (j, gj) in g.iter().enumerate() {
            for (dir, analytic) in [(ONE, gj.re), (Complex64::new(0.0, 1.0), gj.im)] {
                let mut plus = coeffs.clone();
                let mut minus = coeffs.clone();
                plus[j] += dir * h;
                minus[j] -= dir * h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let rel = (fd - analytic).abs() / analytic.abs().max(1e-8);
                assert!(rel < 1e-4, "coefficient {j}: fd {fd} analytic {analytic}");
            }
        }
    }

    #[test]
    fn scg_zero_start_is_well_defined() {
        let b = basis(3);
        let y = seq(300, 20);
        let z = seq(300, 21);
        let cfg = TrainingConfig {
            solver: Solver::Scg,
            max_iterations: 3,
            ..TrainingConfig::default()
        };
        let zero = PredistorterMatrix::filled(Structure::Multiplicative, 1, 1, &b, ZERO).unwrap();
        let run = fit_multiplicative_scg(&zero, &z, &y, &cfg).unwrap();
        assert!(run.objective_trace.iter().all(|v| v.is_finite()));
        assert!(run.objective_trace[1] < run.objective_trace[0]);
        // with two columns the all-zero point is stationary
        let zero = PredistorterMatrix::filled(Structure::Diagonal, 2, 2, &b, ZERO).unwrap();
        let run = fit_multiplicative_scg(&zero, &z, &y, &cfg).unwrap();
        assert!(run.objective_trace.iter().all(|v| v.is_finite()));
        assert_eq!(run.final_matrix, zero);
    }

    #[test]
    fn scg_decreases_objective() {
        let b = basis(3);
        let truth = random_matrix(Structure::Diagonal, 2, 2, &b, 18);
        let y = seq(1500, 19);
        let mut zs = vec![ZERO; 1];
        zs.extend_from_slice(truth.apply(&y).unwrap().samples());
        let z = ComplexSequence::from_samples(zs).unwrap();
        let init = PredistorterMatrix::filled(Structure::Diagonal, 2, 2, &b, ONE).unwrap();
        let cfg = TrainingConfig {
            solver: Solver::Scg,
            samples_per_iteration: 500,
            max_iterations: 60,
            convergence_tol: 0.0,
            ..TrainingConfig::default()
        };
        let run = fit_multiplicative_scg(&init, &z, &y, &cfg).unwrap();
        assert!(run.objective_trace.last().unwrap() < &(run.objective_trace[0] * 1e-3));
    }
}
