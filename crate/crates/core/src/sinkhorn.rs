//! Pseudo-label generation by entropic optimal transport.
//!
//! Model predictions `P` (N×K, row-stochastic) become a cost `C = -log P`.
//! The plan `Q` minimizes `<Q, C> + eta * sum Q log Q` subject to row sums
//! `mu = 1/N` and column sums `nu = beta`, where `beta` is a running estimate
//! of the class distribution. Pseudo-labels are the row argmaxes of `Q`.
//!
//! [`sinkhorn_solve`] runs Sinkhorn-Knopp with log-domain dual potentials
//! (absorbing linear scalings) so that kernels like `exp(-27.6 / 0.001)`
//! never get materialized.
//! [`exact_entropic_oracle`] is an unrelated linear-domain proportional
//! fitting routine kept as a reference for tests.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{argmax, check_row_stochastic, fmt_float, log_sum_exp};

/// Probabilities are clamped to this floor before taking `-log`.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

const SIMPLEX_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    values: Array2<f64>,
}

impl CostMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(
                "cost entries must be finite and non-negative".into(),
            ));
        }
        if values.is_empty() {
            return Err(Error::InvalidInput("cost matrix is empty".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// `C[i][j] = -log(max(P[i][j], 1e-12))`.
pub fn cost_from_predictions(predictions: ArrayView2<'_, f64>) -> Result<CostMatrix> {
    check_row_stochastic(predictions, SIMPLEX_TOLERANCE)
        .map_err(|e| Error::InvalidInput(format!("predictions not row-stochastic: {e}")))?;
    CostMatrix::new(predictions.mapv(|p| -p.max(PROBABILITY_FLOOR).ln()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    /// Entropy weight.
    pub eta: f64,
    pub max_iterations: usize,
    /// Threshold on the L1 marginal violation.
    pub tolerance: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            eta: 0.05,
            max_iterations: 2000,
            tolerance: 1e-6,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig(format!("eta must be > 0, got {}", self.eta)));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations must be >= 1".into()));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "tolerance must be > 0, got {}",
                self.tolerance
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub values: Array2<f64>,
    pub row_marginal: Array1<f64>,
    pub col_marginal: Array1<f64>,
    /// `max(|rows - mu|_1, |cols - nu|_1)` at termination.
    pub marginal_residual: f64,
    pub iterations: usize,
    /// False when the iteration cap was hit before reaching the tolerance.
    pub converged: bool,
}

impl TransportPlan {
    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    /// `<Q, C>`.
    pub fn transport_cost(&self, cost: &CostMatrix) -> f64 {
        (&self.values * &cost.values).sum()
    }

    /// `<Q, C> + eta * sum Q log Q` with `0 log 0 = 0`.
    pub fn entropic_objective(&self, cost: &CostMatrix, eta: f64) -> f64 {
        let neg_entropy: f64 = self
            .values
            .iter()
            .filter(|&&q| q > 0.0)
            .map(|&q| q * q.ln())
            .sum();
        self.transport_cost(cost) + eta * neg_entropy
    }

    /// Largest absolute row- and column-marginal violations.
    pub fn marginal_violations(&self) -> (f64, f64) {
        let rows = self.values.sum_axis(Axis(1));
        let cols = self.values.sum_axis(Axis(0));
        let max_abs = |a: &Array1<f64>, b: &Array1<f64>| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        };
        (
            max_abs(&rows, &self.row_marginal),
            max_abs(&cols, &self.col_marginal),
        )
    }
}

/// Per-iteration diagnostics of a Sinkhorn run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SinkhornTrace {
    /// L1 row violation measured before each row update (columns are exact).
    pub residuals: Vec<f64>,
    /// Dual objective after each full row+column sweep.
    pub dual_objective: Vec<f64>,
}

fn check_simplex(v: ArrayView1<'_, f64>, name: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidInput(format!(
            "{name} must have finite non-negative entries"
        )));
    }
    let s = v.sum();
    if (s - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::InvalidInput(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

fn check_marginals(cost: &CostMatrix, mu: ArrayView1<'_, f64>, nu: ArrayView1<'_, f64>) -> Result<()> {
    let (n, k) = cost.dim();
    if mu.len() != n || nu.len() != k {
        return Err(Error::InvalidInput(format!(
            "cost is {n}x{k} but marginals have lengths {} and {}",
            mu.len(),
            nu.len()
        )));
    }
    check_simplex(mu, "row marginal")?;
    check_simplex(nu, "column marginal")
}

pub fn sinkhorn_solve(
    cost: &CostMatrix,
    mu: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
    config: &SinkhornConfig,
) -> Result<TransportPlan> {
    solve(cost, mu, nu, config, None)
}

/// As [`sinkhorn_solve`], additionally recording residual and dual traces.
pub fn sinkhorn_solve_traced(
    cost: &CostMatrix,
    mu: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
    config: &SinkhornConfig,
) -> Result<(TransportPlan, SinkhornTrace)> {
    let mut trace = SinkhornTrace::default();
    let plan = solve(cost, mu, nu, config, Some(&mut trace))?;
    Ok((plan, trace))
}

/// Scalings outside `[e^-50, e^50]` are folded back into the log potentials.
const ABSORB_LOG_THRESHOLD: f64 = 50.0;

/// `exp(kernel_ij + a_i + b_j)` into `out`.
fn fill_gibbs(out: &mut Array2<f64>, kernel: &Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) {
    Zip::indexed(out).and(kernel).for_each(|(i, j), g, &kv| *g = (kv + a[i] + b[j]).exp());
}

fn absorb(pot: &mut Array1<f64>, scaling: &mut Array1<f64>) {
    Zip::from(pot).and(&mut *scaling).for_each(|p, s| {
        *p += s.ln();
        *s = 1.0;
    });
}

fn needs_absorb(scaling: &Array1<f64>) -> bool {
    scaling
        .iter()
        .any(|&s| s != 0.0 && s.ln().abs() > ABSORB_LOG_THRESHOLD)
}

/// Log-stabilized Sinkhorn: the plan is `diag(u) G diag(v)` with
/// `G = exp(-C / eta + a + b)`. Cheap linear updates run on `u`, `v`; they
/// are absorbed into the log potentials `a`, `b` when they drift too far,
/// and a step falls back to an exact log-sum-exp update whenever a scaled
/// sum underflows.
fn solve(
    cost: &CostMatrix,
    mu: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
    config: &SinkhornConfig,
    mut trace: Option<&mut SinkhornTrace>,
) -> Result<TransportPlan> {
    config.validate()?;
    check_marginals(cost, mu, nu)?;
    let (n, k) = cost.dim();
    let eta = config.eta;

    let kernel = cost.values.mapv(|c| -c / eta);
    let log_mu = mu.mapv(f64::ln);
    let log_nu = nu.mapv(f64::ln);
    let mut a = Array1::<f64>::zeros(n);
    let mut b = Array1::<f64>::zeros(k);
    let mut u = Array1::<f64>::ones(n);
    let mut v = Array1::<f64>::ones(k);
    let mut gibbs = Array2::<f64>::zeros((n, k));
    let mut stale = true;
    let mut row_sums = Array1::<f64>::zeros(n);
    let mut col_sums = Array1::<f64>::zeros(k);
    // subnormal sums would overflow the scaling
    let usable = |sum: f64, target: f64| target == 0.0 || (sum >= f64::MIN_POSITIVE && sum.is_finite());

    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < config.max_iterations {
        if stale {
            fill_gibbs(&mut gibbs, &kernel, &a, &b);
            stale = false;
        }

        // row step; columns are exact here, so only rows can be off
        for (i, row) in gibbs.outer_iter().enumerate() {
            row_sums[i] = row.iter().zip(v.iter()).map(|(g, s)| g * s).sum();
        }
        let linear_rows = (0..n).all(|i| usable(row_sums[i], mu[i]));
        if !linear_rows {
            absorb(&mut a, &mut u);
            absorb(&mut b, &mut v);
            for (i, row) in kernel.outer_iter().enumerate() {
                row_sums[i] = log_sum_exp(row.iter().zip(b.iter()).map(|(kv, bv)| kv + bv));
            }
        }
        if iterations > 0 {
            residual = (0..n)
                .map(|i| {
                    let mass = if mu[i] == 0.0 {
                        0.0
                    } else if linear_rows {
                        u[i] * row_sums[i]
                    } else {
                        (a[i] + row_sums[i]).exp()
                    };
                    (mass - mu[i]).abs()
                })
                .sum();
            if let Some(t) = trace.as_deref_mut() {
                t.residuals.push(residual);
            }
            if residual <= config.tolerance {
                converged = true;
                break;
            }
        }
        if linear_rows {
            for i in 0..n {
                u[i] = if mu[i] == 0.0 { 0.0 } else { mu[i] / row_sums[i] };
            }
        } else {
            for i in 0..n {
                a[i] = log_mu[i] - row_sums[i];
            }
            fill_gibbs(&mut gibbs, &kernel, &a, &b);
        }

        // column step
        col_sums.fill(0.0);
        for (row, &ui) in gibbs.outer_iter().zip(u.iter()) {
            if ui != 0.0 {
                Zip::from(&mut col_sums).and(&row).for_each(|c, &g| *c += ui * g);
            }
        }
        if (0..k).all(|j| usable(col_sums[j], nu[j])) {
            for j in 0..k {
                v[j] = if nu[j] == 0.0 { 0.0 } else { nu[j] / col_sums[j] };
            }
        } else {
            absorb(&mut a, &mut u);
            absorb(&mut b, &mut v);
            for (j, col) in kernel.columns().into_iter().enumerate() {
                let lse = log_sum_exp(col.iter().zip(a.iter()).map(|(kv, av)| kv + av));
                b[j] = log_nu[j] - lse;
            }
            stale = true;
        }

        if needs_absorb(&u) || needs_absorb(&v) {
            absorb(&mut a, &mut u);
            absorb(&mut b, &mut v);
            stale = true;
        }
        let bad = |x: &f64| x.is_nan() || *x == f64::INFINITY;
        if a.iter().chain(b.iter()).chain(u.iter()).chain(v.iter()).any(bad) {
            return Err(Error::Numerical(format!(
                "Sinkhorn potentials became non-finite at iteration {}",
                iterations + 1
            )));
        }
        iterations += 1;
        if let Some(t) = trace.as_deref_mut() {
            let a_eff = &a + &u.mapv(f64::ln);
            let b_eff = &b + &v.mapv(f64::ln);
            t.dual_objective.push(dual_objective(&kernel, &a_eff, &b_eff, mu, nu, eta));
        }
    }

    absorb(&mut a, &mut u);
    absorb(&mut b, &mut v);
    let mut values = Array2::<f64>::zeros((n, k));
    fill_gibbs(&mut values, &kernel, &a, &b);
    // also covers rounding in the final exponentiation
    residual = residual.max(l1_residual(&values, mu, nu));
    Ok(TransportPlan {
        values,
        row_marginal: mu.to_owned(),
        col_marginal: nu.to_owned(),
        marginal_residual: residual,
        iterations,
        converged,
    })
}

/// `eta * (<a, mu> + <b, nu> - sum exp(a_i + b_j - C_ij / eta))`, the
/// quantity Sinkhorn increases by block-coordinate ascent.
fn dual_objective(
    kernel: &Array2<f64>,
    a: &Array1<f64>,
    b: &Array1<f64>,
    mu: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
    eta: f64,
) -> f64 {
    let linear = |pot: &Array1<f64>, marg: ArrayView1<'_, f64>| -> f64 {
        pot.iter()
            .zip(marg)
            .filter(|(_, &m)| m > 0.0)
            .map(|(p, m)| p * m)
            .sum()
    };
    let mass: f64 = kernel
        .indexed_iter()
        .map(|((i, j), kv)| (a[i] + b[j] + kv).exp())
        .sum();
    eta * (linear(a, mu) + linear(b, nu) - mass)
}

fn l1_residual(values: &Array2<f64>, mu: ArrayView1<'_, f64>, nu: ArrayView1<'_, f64>) -> f64 {
    let rows: f64 = values
        .sum_axis(Axis(1))
        .iter()
        .zip(mu)
        .map(|(r, m)| (r - m).abs())
        .sum();
    let cols: f64 = values
        .sum_axis(Axis(0))
        .iter()
        .zip(nu)
        .map(|(c, v)| (c - v).abs())
        .sum();
    rows.max(cols)
}

/// Compensated (Neumaier) sum.
fn accurate_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Reference solver: textbook log-domain Sinkhorn. Every half-step is an
/// exact log-sum-exp dual update with compensated sums; no scalings are
/// carried between iterations. Iterates until the L1 marginal violation
/// drops below 1e-14 or stops improving at machine precision.
///
/// Only meant for small instances (`N * K <= 10_000`).
pub fn exact_entropic_oracle(
    cost: &CostMatrix,
    mu: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
    eta: f64,
) -> Result<TransportPlan> {
    const TARGET: f64 = 1e-14;
    // the residual can plateau for thousands of iterations at small eta
    const STALL_LIMIT: usize = 20_000;
    const MAX_ITERATIONS: usize = 2_000_000;
    check_marginals(cost, mu, nu)?;
    let (n, k) = cost.dim();
    if n * k > 10_000 {
        return Err(Error::InvalidInput(format!(
            "oracle limited to N*K <= 10000, got {}",
            n * k
        )));
    }
    if eta.is_nan() || eta <= 0.0 {
        return Err(Error::InvalidConfig(format!("eta must be > 0, got {eta}")));
    }
    let c = &cost.values;
    let log_mu = mu.mapv(f64::ln);
    let log_nu = nu.mapv(f64::ln);
    let mut f = Array1::<f64>::zeros(n);
    let mut g = Array1::<f64>::zeros(k);

    let lse = |terms: &mut dyn Iterator<Item = f64>| -> f64 {
        let terms: Vec<f64> = terms.collect();
        let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return m;
        }
        m + accurate_sum(terms.iter().map(|&t| (t - m).exp())).ln()
    };
    let plan_of = |f: &Array1<f64>, g: &Array1<f64>| {
        Array2::from_shape_fn((n, k), |(i, j)| {
            let e = (f[i] + g[j] - c[[i, j]]) / eta;
            if e == f64::NEG_INFINITY {
                0.0
            } else {
                e.exp()
            }
        })
    };

    let mut best = f64::INFINITY;
    let mut since_best = 0;
    for iterations in 1..=MAX_ITERATIONS {
        for i in 0..n {
            f[i] = if mu[i] == 0.0 {
                f64::NEG_INFINITY
            } else {
                let s = lse(&mut (0..k).map(|j| (g[j] - c[[i, j]]) / eta));
                if s == f64::NEG_INFINITY {
                    return Err(Error::Numerical(format!("oracle row {i} has no reachable column")));
                }
                eta * (log_mu[i] - s)
            };
        }
        for j in 0..k {
            g[j] = if nu[j] == 0.0 {
                f64::NEG_INFINITY
            } else {
                let s = lse(&mut (0..n).map(|i| (f[i] - c[[i, j]]) / eta));
                if s == f64::NEG_INFINITY {
                    return Err(Error::Numerical(format!("oracle column {j} has no reachable row")));
                }
                eta * (log_nu[j] - s)
            };
        }
        let q = plan_of(&f, &g);
        let rows: f64 = (0..n)
            .map(|i| (accurate_sum(q.row(i).iter().copied()) - mu[i]).abs())
            .sum();
        let cols: f64 = (0..k)
            .map(|j| (accurate_sum(q.column(j).iter().copied()) - nu[j]).abs())
            .sum();
        let residual = rows.max(cols);
        if residual <= TARGET {
            return Ok(oracle_plan(q, mu, nu, residual, iterations, true));
        }
        if residual < best {
            best = residual;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= STALL_LIMIT || iterations == MAX_ITERATIONS {
            return Ok(oracle_plan(q, mu, nu, residual, iterations, residual < 1e-12));
        }
    }
    unreachable!("the last iteration returns")
}

fn oracle_plan(
    values: Array2<f64>,
    mu: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
    residual: f64,
    iterations: usize,
    converged: bool,
) -> TransportPlan {
    TransportPlan {
        values,
        row_marginal: mu.to_owned(),
        col_marginal: nu.to_owned(),
        marginal_residual: residual,
        iterations,
        converged,
    }
}

/// Row argmax of the plan, lowest class id on ties.
pub fn extract_pseudo_labels(plan: &TransportPlan) -> Vec<usize> {
    plan.values.outer_iter().map(argmax).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    pub beta: Vec<f64>,
    pub momentum: f64,
}

impl ClassPrior {
    pub fn uniform(classes: usize, momentum: f64) -> Self {
        Self {
            beta: vec![1.0 / classes as f64; classes],
            momentum,
        }
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn entropy(&self) -> f64 {
        crate::math::entropy(&self.beta)
    }
}

/// `beta <- l1 * beta + (1 - l1) * b`, with `b` the argmax histogram of
/// `predictions`, then renormalized onto the simplex.
pub fn update_class_prior(prior: &ClassPrior, predictions: ArrayView2<'_, f64>) -> Result<ClassPrior> {
    check_row_stochastic(predictions, SIMPLEX_TOLERANCE)
        .map_err(|e| Error::InvalidInput(format!("predictions not row-stochastic: {e}")))?;
    let k = prior.len();
    if predictions.ncols() != k {
        return Err(Error::InvalidInput(format!(
            "prior has {k} classes but predictions have {}",
            predictions.ncols()
        )));
    }
    if !(0.0..=1.0).contains(&prior.momentum) {
        return Err(Error::InvalidConfig(format!(
            "prior momentum must be in [0, 1], got {}",
            prior.momentum
        )));
    }
    let n = predictions.nrows();
    if n == 0 {
        return Ok(prior.clone());
    }
    let mut histogram = vec![0.0; k];
    for row in predictions.outer_iter() {
        histogram[argmax(row)] += 1.0;
    }
    let lambda = prior.momentum;
    let mut beta: Vec<f64> = prior
        .beta
        .iter()
        .zip(&histogram)
        .map(|(b, h)| lambda * b + (1.0 - lambda) * h / n as f64)
        .collect();
    let total: f64 = beta.iter().sum();
    beta.iter_mut().for_each(|b| *b /= total);
    Ok(ClassPrior {
        beta,
        momentum: lambda,
    })
}

#[derive(Debug, Clone)]
pub struct EStepOutput {
    pub plan: TransportPlan,
    pub pseudo_labels: Vec<usize>,
    pub prior: ClassPrior,
    pub trace: Option<SinkhornTrace>,
}

/// One E-step over the unlabeled predictions: update the prior, build the
/// cost, solve with `mu = 1/N` and `nu = beta`, take row argmaxes.
pub fn estep(
    predictions: ArrayView2<'_, f64>,
    prior: &ClassPrior,
    config: &SinkhornConfig,
) -> Result<EStepOutput> {
    estep_inner(predictions, prior, config, false)
}

pub fn estep_traced(
    predictions: ArrayView2<'_, f64>,
    prior: &ClassPrior,
    config: &SinkhornConfig,
) -> Result<EStepOutput> {
    estep_inner(predictions, prior, config, true)
}

fn estep_inner(
    predictions: ArrayView2<'_, f64>,
    prior: &ClassPrior,
    config: &SinkhornConfig,
    traced: bool,
) -> Result<EStepOutput> {
    let n = predictions.nrows();
    if n == 0 {
        return Err(Error::InvalidInput("E-step needs at least one prediction row".into()));
    }
    let prior = update_class_prior(prior, predictions)?;
    let cost = cost_from_predictions(predictions)?;
    let mu = Array1::from_elem(n, 1.0 / n as f64);
    let nu = Array1::from_vec(prior.beta.clone());
    let (plan, trace) = if traced {
        let (plan, trace) = sinkhorn_solve_traced(&cost, mu.view(), nu.view(), config)?;
        (plan, Some(trace))
    } else {
        (sinkhorn_solve(&cost, mu.view(), nu.view(), config)?, None)
    };
    let pseudo_labels = extract_pseudo_labels(&plan);
    Ok(EStepOutput {
        plan,
        pseudo_labels,
        prior,
        trace,
    })
}

/// Write `epoch,iteration,residual` rows.
pub fn write_residual_trace(path: &Path, rows: &[(usize, usize, f64)]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["epoch", "iteration", "residual"])?;
    for (epoch, iteration, residual) in rows {
        wtr.write_record(&[epoch.to_string(), iteration.to_string(), fmt_float(*residual)])?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

/// Write the plan as CSV: `row,pseudo_label,q0,...,q{K-1}`.
/// Dump a plan as `row,pseudo_label,q0..`; `row_ids[i]` names plan row `i`
/// (e.g. its index in the source dataset).
pub fn write_plan(path: &Path, plan: &TransportPlan, labels: &[usize], row_ids: &[usize]) -> Result<()> {
    if labels.len() != plan.n_rows() || row_ids.len() != plan.n_rows() {
        return Err(Error::InvalidInput(format!(
            "plan has {} rows but got {} labels and {} row ids",
            plan.n_rows(),
            labels.len(),
            row_ids.len()
        )));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let header: Vec<String> = ["row".to_string(), "pseudo_label".to_string()]
        .into_iter()
        .chain((0..plan.n_cols()).map(|j| format!("q{j}")))
        .collect();
    let io = |e| Error::io(path, e);
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for (i, row) in plan.values.outer_iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|&v| fmt_float(v)).collect();
        writeln!(out, "{},{},{}", row_ids[i], labels[i], cells.join(",")).map_err(io)?;
    }
    out.flush().map_err(io)
}
