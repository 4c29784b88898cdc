#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use nid_core::math::l2_norm;
use nid_core::repr::{ce_loss_and_grad, inter_loss_and_grad, intra_loss_and_grad, PrototypeBank};
use nid_core::sinkhorn::CostMatrix;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * rng.sample::<f64, _>(StandardNormal))
}

/// Row-stochastic predictions from Gaussian logits.
pub fn random_predictions(rng: &mut ChaCha8Rng, n: usize, k: usize, logit_scale: f64) -> Array2<f64> {
    let logits = normal_matrix(rng, n, k, logit_scale);
    nid_core::math::softmax_rows(logits.view())
}

/// Random point of the simplex bounded away from zero.
pub fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Array1<f64> {
    let v = Array1::from_shape_simple_fn(k, || rng.random_range(0.5..1.5));
    let s = v.sum();
    v / s
}

pub fn uniform(n: usize) -> Array1<f64> {
    Array1::from_elem(n, 1.0 / n as f64)
}

/// Cost `-log P` of random predictions, uniform rows, random columns.
pub fn random_ot_instance(rng: &mut ChaCha8Rng, n: usize, k: usize) -> (CostMatrix, Array1<f64>, Array1<f64>) {
    let p = random_predictions(rng, n, k, 1.5);
    let cost = nid_core::sinkhorn::cost_from_predictions(p.view()).unwrap();
    (cost, uniform(n), random_simplex(rng, k))
}

/// All permutations of `0..n` (Heap's algorithm).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        heap(k - 1, a, out);
        for i in 0..k - 1 {
            if k.is_multiple_of(2) {
                a.swap(i, k - 1);
            } else {
                a.swap(0, k - 1);
            }
            heap(k - 1, a, out);
        }
    }
    let mut a: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    heap(n, &mut a, &mut out);
    out
}

/// Largest matched count over all injections of `0..rows` into `0..cols`
/// after padding to a square.
pub fn brute_force_matching(confusion: &Array2<u64>) -> u64 {
    let n = confusion.nrows().max(confusion.ncols());
    let at = |r: usize, c: usize| {
        if r < confusion.nrows() && c < confusion.ncols() {
            confusion[[r, c]]
        } else {
            0
        }
    };
    permutations(n)
        .iter()
        .map(|p| p.iter().enumerate().map(|(r, &c)| at(r, c)).sum())
        .max()
        .unwrap_or(0)
}

/// Brute-force clustering accuracy: contingency table and exhaustive
/// permutation search.
pub fn brute_force_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let rows = pred.iter().max().unwrap() + 1;
    let cols = truth.iter().max().unwrap() + 1;
    let mut table = Array2::<u64>::zeros((rows, cols));
    for (&p, &t) in pred.iter().zip(truth) {
        table[[p, t]] += 1;
    }
    brute_force_matching(&table) as f64 / truth.len() as f64
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference(x: &Array2<f64>, step: f64, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut grad = Array2::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = probe[idx];
        probe[idx] = orig + step;
        let plus = f(&probe);
        probe[idx] = orig - step;
        let minus = f(&probe);
        probe[idx] = orig;
        grad[idx] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// `|a - b| / max(|a|, |b|)` in the Frobenius norm; 0 when both vanish.
pub fn relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn unit_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.outer_iter_mut() {
        let n = l2_norm(row.view());
        row.mapv_inplace(|v| v / n);
    }
    m
}

pub fn random_bank(rng: &mut ChaCha8Rng, k: usize, h: usize) -> PrototypeBank {
    PrototypeBank::new(normal_matrix(rng, k, h, 1.0), 0.99).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

/// Relative error of the intra-cluster gradient against finite differences
/// on a seeded random configuration.
pub fn intra_fd_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, k, h) = (3 + seed as usize % 5, 2 + seed as usize % 6, 4 + seed as usize % 4);
    let bank = random_bank(&mut r, k, h);
    let s = unit_rows(normal_matrix(&mut r, b, h, 1.0));
    let labels = random_labels(&mut r, b, k);
    let tau = [0.07, 0.5, 1.0][seed as usize % 3];
    let (_, grad) = intra_loss_and_grad(s.view(), &labels, &bank, tau).unwrap();
    let fd = finite_difference(&s, FD_STEP, |x| intra_loss_and_grad(x.view(), &labels, &bank, tau).unwrap().0);
    relative_error(&grad, &fd)
}

pub fn ce_fd_error(seed: u64) -> f64 {
    let mut r = rng(100 + seed);
    let (b, k, h) = (2 + seed as usize % 4, 3 + seed as usize % 4, 5);
    let bank = random_bank(&mut r, k, h);
    let s = unit_rows(normal_matrix(&mut r, b, h, 1.0));
    let labels = random_labels(&mut r, b, k);
    let tau = [0.07, 0.2, 1.0][seed as usize % 3];
    let (_, grad) = ce_loss_and_grad(s.view(), &labels, &bank, tau).unwrap();
    let fd = finite_difference(&s, FD_STEP, |x| ce_loss_and_grad(x.view(), &labels, &bank, tau).unwrap().0);
    relative_error(&grad, &fd)
}

/// Inter-cluster gradient with respect to raw, non-unit prototype rows, so
/// the check covers the normalization too.
pub fn inter_fd_error(seed: u64) -> f64 {
    let mut r = rng(200 + seed);
    let (k, h) = (2 + seed as usize % 7, 3 + seed as usize % 5);
    let raw = normal_matrix(&mut r, k, h, 1.0);
    let tau = [0.07, 0.3, 1.0][seed as usize % 3];
    let loss_at = |p: &Array2<f64>| {
        let bank = PrototypeBank {
            prototypes: p.clone(),
            momentum: 0.99,
        };
        inter_loss_and_grad(&bank, tau).unwrap()
    };
    let (_, grad) = loss_at(&raw);
    let fd = finite_difference(&raw, FD_STEP, |p| loss_at(p).0);
    relative_error(&grad, &fd)
}
