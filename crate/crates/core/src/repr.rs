//! Representation learning: a trainable projection head, the prototype bank,
//! and the M-step losses with hand-derived gradients.
//!
//! Representations `s_i` are unit vectors. Class scores are `s_i . mu_j / tau`
//! against unit prototypes `mu_j`; the intra-cluster and cross-entropy losses
//! are softmax cross-entropies over those scores, and the inter-cluster loss
//! is a log-mean-exp of pairwise prototype cosines.

use ndarray::{Array, Array1, Array2, ArrayView2, Axis, Dimension, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{l2_norm, softmax_rows};

/// Pre-normalization norms below this map to the first basis vector.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `inputs x outputs`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    fn random<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = (1.0 / inputs as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((inputs, outputs), || {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        });
        Self {
            weight,
            bias: Array1::zeros(outputs),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadArch {
    /// Single affine map.
    Linear,
    /// Affine, ReLU, affine.
    Mlp { hidden: usize },
}

/// Affine (or two-layer) map followed by row-wise L2 normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub hidden: Option<DenseLayer>,
    pub output: DenseLayer,
}

/// Normalized representations of one batch plus what backprop needs.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub representations: Array2<f64>,
    /// Rows whose pre-normalization norm fell below [`DEGENERATE_NORM`].
    pub degenerate: Vec<bool>,
    norms: Vec<f64>,
    hidden_pre: Option<Array2<f64>>,
    hidden_act: Option<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub hidden: Option<DenseLayer>,
    pub output: DenseLayer,
}

impl HeadGradients {
    fn is_finite(&self) -> bool {
        self.output.is_finite() && self.hidden.as_ref().is_none_or(DenseLayer::is_finite)
    }
}

impl ProjectionHead {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, output_dim: usize, arch: HeadArch, rng: &mut R) -> Self {
        match arch {
            HeadArch::Linear => Self {
                hidden: None,
                output: DenseLayer::random(input_dim, output_dim, rng),
            },
            HeadArch::Mlp { hidden } => Self {
                hidden: Some(DenseLayer::random(input_dim, hidden, rng)),
                output: DenseLayer::random(hidden, output_dim, rng),
            },
        }
    }

    /// Plain affine head from explicit parameters.
    pub fn affine(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.ncols() != bias.len() {
            return Err(Error::InvalidInput(format!(
                "weight has {} outputs but bias has {}",
                weight.ncols(),
                bias.len()
            )));
        }
        Ok(Self {
            hidden: None,
            output: DenseLayer { weight, bias },
        })
    }

    pub fn input_dim(&self) -> usize {
        match &self.hidden {
            Some(h) => h.weight.nrows(),
            None => self.output.weight.nrows(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.output.weight.ncols()
    }

    pub fn arch(&self) -> HeadArch {
        match &self.hidden {
            Some(h) => HeadArch::Mlp {
                hidden: h.weight.ncols(),
            },
            None => HeadArch::Linear,
        }
    }

    /// Shift the output bias so the pre-normalization outputs of
    /// `embeddings` have zero mean.
    pub fn center_on(&mut self, embeddings: ArrayView2<'_, f64>) -> Result<()> {
        let pass = self.forward(embeddings)?;
        let pre = self.pre_normalization(embeddings, &pass);
        if let Some(mean) = pre.mean_axis(Axis(0)) {
            self.output.bias -= &mean;
        }
        Ok(())
    }

    fn pre_normalization(&self, x: ArrayView2<'_, f64>, pass: &ForwardPass) -> Array2<f64> {
        match &pass.hidden_act {
            Some(act) => self.output.apply(act.view()),
            None => self.output.apply(x),
        }
    }

    pub fn forward(&self, embeddings: ArrayView2<'_, f64>) -> Result<ForwardPass> {
        if embeddings.ncols() != self.input_dim() {
            return Err(Error::InvalidInput(format!(
                "head expects dimension {} but input has {}",
                self.input_dim(),
                embeddings.ncols()
            )));
        }
        if embeddings.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidInput("NaN in head input".into()));
        }
        let (hidden_pre, hidden_act) = match &self.hidden {
            Some(layer) => {
                let pre = layer.apply(embeddings);
                let act = pre.mapv(|v| v.max(0.0));
                (Some(pre), Some(act))
            }
            None => (None, None),
        };
        let mut out = match &hidden_act {
            Some(act) => self.output.apply(act.view()),
            None => self.output.apply(embeddings),
        };
        let mut norms = Vec::with_capacity(out.nrows());
        let mut degenerate = Vec::with_capacity(out.nrows());
        for (i, mut row) in out.outer_iter_mut().enumerate() {
            let norm = l2_norm(row.view());
            if !norm.is_finite() {
                return Err(Error::Numerical(format!("head output row {i} is not finite")));
            }
            if norm < DEGENERATE_NORM {
                row.fill(0.0);
                row[0] = 1.0;
                degenerate.push(true);
            } else {
                row.mapv_inplace(|v| v / norm);
                degenerate.push(false);
            }
            norms.push(norm);
        }
        Ok(ForwardPass {
            representations: out,
            degenerate,
            norms,
            hidden_pre,
            hidden_act,
        })
    }

    /// Back-propagate `grad` (w.r.t. the normalized representations of
    /// `pass`) to the head parameters. Degenerate rows pass no gradient.
    pub fn backward(
        &self,
        embeddings: ArrayView2<'_, f64>,
        pass: &ForwardPass,
        grad: ArrayView2<'_, f64>,
    ) -> HeadGradients {
        let s = &pass.representations;
        let mut grad_pre = grad.to_owned();
        for (i, mut g) in grad_pre.outer_iter_mut().enumerate() {
            if pass.degenerate[i] {
                g.fill(0.0);
                continue;
            }
            let si = s.row(i);
            let radial = si.dot(&g);
            let inv = 1.0 / pass.norms[i];
            Zip::from(&mut g).and(&si).for_each(|gv, &sv| *gv = (*gv - radial * sv) * inv);
        }
        let layer_input = match &pass.hidden_act {
            Some(act) => act.view(),
            None => embeddings,
        };
        let output = DenseLayer {
            weight: layer_input.t().dot(&grad_pre),
            bias: grad_pre.sum_axis(Axis(0)),
        };
        let hidden = match (&self.hidden, &pass.hidden_pre) {
            (Some(_), Some(pre)) => {
                let mut grad_hidden = grad_pre.dot(&self.output.weight.t());
                Zip::from(&mut grad_hidden)
                    .and(pre)
                    .for_each(|g, &p| if p <= 0.0 { *g = 0.0 });
                Some(DenseLayer {
                    weight: embeddings.t().dot(&grad_hidden),
                    bias: grad_hidden.sum_axis(Axis(0)),
                })
            }
            _ => None,
        };
        HeadGradients { hidden, output }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    /// `K x H`, unit rows.
    pub prototypes: Array2<f64>,
    /// EMA momentum for batch-mean updates.
    pub momentum: f64,
}

impl PrototypeBank {
    /// Normalizes every row; zero rows are rejected.
    pub fn new(mut prototypes: Array2<f64>, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::InvalidConfig(format!(
                "prototype momentum must be in [0, 1], got {momentum}"
            )));
        }
        for (j, mut row) in prototypes.outer_iter_mut().enumerate() {
            let norm = l2_norm(row.view());
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "prototype {j} has norm {norm}"
                )));
            }
            row.mapv_inplace(|v| v / norm);
        }
        Ok(Self {
            prototypes,
            momentum,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.ncols()
    }

    fn renormalize(&mut self) {
        for mut row in self.prototypes.outer_iter_mut() {
            let norm = l2_norm(row.view());
            if norm > 0.0 {
                row.mapv_inplace(|v| v / norm);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the intra-cluster term; the inter-cluster term gets `1 - alpha`.
    pub alpha: f64,
    /// Softmax temperature.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            tau: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("tau must be > 0, got {tau}")))
    }
}

fn scores(representations: ArrayView2<'_, f64>, bank: &PrototypeBank, tau: f64) -> Result<Array2<f64>> {
    if representations.ncols() != bank.dim() {
        return Err(Error::InvalidInput(format!(
            "representations have width {} but prototypes {}",
            representations.ncols(),
            bank.dim()
        )));
    }
    Ok(representations.dot(&bank.prototypes.t()) / tau)
}

/// `softmax_j(s_i . mu_j / tau)` per row.
pub fn predict_probs(
    representations: ArrayView2<'_, f64>,
    bank: &PrototypeBank,
    tau: f64,
) -> Result<Array2<f64>> {
    check_tau(tau)?;
    Ok(softmax_rows(scores(representations, bank, tau)?.view()))
}

/// Mean softmax cross-entropy of `labels` under prototype scores, and its
/// gradient w.r.t. the representations (prototypes held fixed).
fn softmax_xent(
    representations: ArrayView2<'_, f64>,
    labels: &[usize],
    bank: &PrototypeBank,
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    check_tau(tau)?;
    let b = representations.nrows();
    if labels.len() != b {
        return Err(Error::InvalidInput(format!(
            "{b} representations but {} labels",
            labels.len()
        )));
    }
    let k = bank.num_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidInput(format!(
            "label {bad} out of range for {k} prototypes"
        )));
    }
    if b == 0 {
        return Ok((0.0, Array2::zeros(representations.raw_dim())));
    }
    let logits = scores(representations, bank, tau)?;
    let mut probs = softmax_rows(logits.view());
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let lse = crate::math::log_sum_exp(row.iter().copied());
        loss += lse - row[y];
        probs[[i, y]] -= 1.0;
    }
    let grad = probs.dot(&bank.prototypes) / (tau * b as f64);
    Ok((loss / b as f64, grad))
}

/// Intra-cluster loss: pull each representation toward its (pseudo-)label's
/// prototype. Prototypes receive no gradient from this term.
pub fn intra_loss_and_grad(
    representations: ArrayView2<'_, f64>,
    pseudo_labels: &[usize],
    bank: &PrototypeBank,
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    softmax_xent(representations, pseudo_labels, bank, tau)
}

/// Cross-entropy of ground-truth labels under [`predict_probs`].
pub fn ce_loss_and_grad(
    representations: ArrayView2<'_, f64>,
    true_labels: &[usize],
    bank: &PrototypeBank,
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    softmax_xent(representations, true_labels, bank, tau)
}

/// Inter-cluster loss
/// `mean_i log( sum_{j != i} exp(cos(mu_i, mu_j) / tau) / (K - 1) )`
/// and its gradient w.r.t. the raw prototype rows, including the
/// dependence of the cosine on their norms.
pub fn inter_loss_and_grad(bank: &PrototypeBank, tau: f64) -> Result<(f64, Array2<f64>)> {
    inter_loss_raw(bank.prototypes.view(), tau)
}

pub(crate) fn inter_loss_raw(prototypes: ArrayView2<'_, f64>, tau: f64) -> Result<(f64, Array2<f64>)> {
    check_tau(tau)?;
    let k = prototypes.nrows();
    if k < 2 {
        return Err(Error::InvalidInput(format!(
            "inter-cluster loss needs at least 2 prototypes, got {k}"
        )));
    }
    let norms: Vec<f64> = prototypes.outer_iter().map(l2_norm).collect();
    if norms.iter().any(|&n| n.is_nan() || n <= 0.0) {
        return Err(Error::InvalidInput("zero-norm prototype".into()));
    }
    let mut unit = prototypes.to_owned();
    for (mut row, &n) in unit.outer_iter_mut().zip(&norms) {
        row.mapv_inplace(|v| v / n);
    }
    let cos = unit.dot(&unit.t());

    // weights[i][j]: softmax over j != i of cos_ij / tau
    let mut weights = Array2::<f64>::zeros((k, k));
    let mut loss = 0.0;
    for i in 0..k {
        let others = (0..k).filter(|&j| j != i).map(|j| cos[[i, j]] / tau);
        let lse = crate::math::log_sum_exp(others);
        loss += lse - ((k - 1) as f64).ln();
        for j in (0..k).filter(|&j| j != i) {
            weights[[i, j]] = (cos[[i, j]] / tau - lse).exp();
        }
    }
    loss /= k as f64;

    let scale = 1.0 / (k as f64 * tau);
    let mut grad = Array2::<f64>::zeros(prototypes.raw_dim());
    for i in 0..k {
        let mut gi = grad.row_mut(i);
        for j in (0..k).filter(|&j| j != i) {
            let dc = scale * (weights[[i, j]] + weights[[j, i]]);
            let c = cos[[i, j]];
            Zip::from(&mut gi)
                .and(unit.row(j))
                .and(unit.row(i))
                .for_each(|g, &uj, &ui| *g += dc * (uj - c * ui) / norms[i]);
        }
    }
    Ok((loss, grad))
}

/// `alpha * intra + (1 - alpha) * inter + ce`.
pub fn combined_loss(intra: f64, inter: f64, ce: f64, weights: &LossWeights) -> f64 {
    weights.alpha * intra + (1.0 - weights.alpha) * inter + ce
}

/// Moving-average prototype update from one batch: every class present in
/// `labels` moves to `normalize(m * mu + (1 - m) * batch_mean)`.
pub fn update_prototypes(
    bank: &PrototypeBank,
    representations: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<PrototypeBank> {
    let k = bank.num_classes();
    if representations.ncols() != bank.dim() || representations.nrows() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "prototype update got {}x{} representations and {} labels for a {}x{} bank",
            representations.nrows(),
            representations.ncols(),
            labels.len(),
            k,
            bank.dim()
        )));
    }
    let mut sums = Array2::<f64>::zeros((k, bank.dim()));
    let mut counts = vec![0usize; k];
    for (row, &l) in representations.outer_iter().zip(labels) {
        if l >= k {
            return Err(Error::InvalidInput(format!("label {l} out of range for {k} prototypes")));
        }
        let mut s = sums.row_mut(l);
        s += &row;
        counts[l] += 1;
    }
    let m = bank.momentum;
    let mut next = bank.clone();
    for j in (0..k).filter(|&j| counts[j] > 0) {
        let mean = sums.row(j).mapv(|v| v / counts[j] as f64);
        let candidate = bank.prototypes.row(j).mapv(|v| m * v) + mean.mapv(|v| (1.0 - m) * v);
        let norm = l2_norm(candidate.view());
        if norm > 0.0 {
            next.prototypes.row_mut(j).assign(&candidate.mapv(|v| v / norm));
        }
    }
    Ok(next)
}

fn momentum_step<D: Dimension>(
    param: &mut Array<f64, D>,
    grad: &Array<f64, D>,
    velocity: &mut Array<f64, D>,
    lr: f64,
    momentum: f64,
) {
    Zip::from(param)
        .and(grad)
        .and(velocity)
        .for_each(|p, &g, v| {
            *v = momentum * *v + g;
            *p -= lr * *v;
        });
}

/// One plain gradient step on the head.
pub fn sgd_step(head: &ProjectionHead, grads: &HeadGradients, learning_rate: f64) -> Result<ProjectionHead> {
    let mut next = head.clone();
    Sgd::new(learning_rate, 0.0).step(&mut next, grads)?;
    Ok(next)
}

/// SGD with heavy-ball momentum for the projection head.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Option<HeadGradients>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, head: &mut ProjectionHead, grads: &HeadGradients) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Numerical("non-finite head gradient".into()));
        }
        let velocity = self.velocity.get_or_insert_with(|| HeadGradients {
            hidden: head.hidden.as_ref().map(DenseLayer::zeros_like),
            output: head.output.zeros_like(),
        });
        let (lr, m) = (self.learning_rate, self.momentum);
        momentum_step(&mut head.output.weight, &grads.output.weight, &mut velocity.output.weight, lr, m);
        momentum_step(&mut head.output.bias, &grads.output.bias, &mut velocity.output.bias, lr, m);
        if let (Some(layer), Some(g), Some(v)) = (&mut head.hidden, &grads.hidden, &mut velocity.hidden) {
            momentum_step(&mut layer.weight, &g.weight, &mut v.weight, lr, m);
            momentum_step(&mut layer.bias, &g.bias, &mut v.bias, lr, m);
        }
        Ok(())
    }
}

/// Momentum SGD on the prototype bank followed by renormalization.
#[derive(Debug, Clone)]
pub struct PrototypeSgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Option<Array2<f64>>,
}

impl PrototypeSgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, bank: &mut PrototypeBank, grad: &Array2<f64>) -> Result<()> {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("non-finite prototype gradient".into()));
        }
        let velocity = self
            .velocity
            .get_or_insert_with(|| Array2::zeros(bank.prototypes.raw_dim()));
        momentum_step(&mut bank.prototypes, grad, velocity, self.learning_rate, self.momentum);
        bank.renormalize();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn orthogonal_bank() -> PrototypeBank {
        PrototypeBank::new(array![[1.0, 0.0], [0.0, 1.0]], 0.99).unwrap()
    }

    #[test]
    fn identity_head_normalizes() {
        let head = ProjectionHead::affine(Array2::eye(2), Array1::zeros(2)).unwrap();
        let pass = head.forward(array![[3.0, 4.0]].view()).unwrap();
        assert!((pass.representations[[0, 0]] - 0.6).abs() < 1e-15);
        assert!((pass.representations[[0, 1]] - 0.8).abs() < 1e-15);
        assert_eq!(pass.degenerate, vec![false]);
    }

    #[test]
    fn zero_row_falls_back_to_first_axis() {
        let head = ProjectionHead::affine(Array2::eye(3), Array1::zeros(3)).unwrap();
        let pass = head.forward(array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]].view()).unwrap();
        assert_eq!(pass.representations.row(0).to_vec(), vec![1.0, 0.0, 0.0]);
        assert_eq!(pass.degenerate, vec![true, false]);
    }

    #[test]
    fn forward_rejects_nan() {
        let head = ProjectionHead::affine(Array2::eye(2), Array1::zeros(2)).unwrap();
        assert!(head.forward(array![[f64::NAN, 1.0]].view()).is_err());
    }

    #[test]
    fn aligned_two_class_probabilities() {
        let p = predict_probs(array![[1.0, 0.0]].view(), &orthogonal_bank(), 1.0).unwrap();
        let e = 1f64.exp();
        assert!((p[[0, 0]] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[[0, 0]] - 0.7311).abs() < 1e-4);
        assert!((p[[0, 1]] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn equidistant_and_cold_predictions() {
        let s = 0.5f64.sqrt();
        let p = predict_probs(array![[s, s]].view(), &orthogonal_bank(), 0.07).unwrap();
        assert!((p[[0, 0]] - 0.5).abs() < 1e-12);
        let p = predict_probs(array![[0.8, 0.6]].view(), &orthogonal_bank(), 0.01).unwrap();
        assert!(p[[0, 0]] > 0.999);
    }

    #[test]
    fn intra_loss_closed_forms() {
        let single = PrototypeBank::new(array![[0.3, 0.4]], 0.9).unwrap();
        let (loss, _) = intra_loss_and_grad(array![[1.0, 0.0]].view(), &[0], &single, 0.07).unwrap();
        assert_eq!(loss, 0.0);

        let (loss, _) =
            intra_loss_and_grad(array![[1.0, 0.0]].view(), &[0], &orthogonal_bank(), 1.0).unwrap();
        assert!((loss - (1.0 + (-1f64).exp()).ln()).abs() < 1e-15);
        assert!((loss - 0.31326).abs() < 1e-5);

        assert!(intra_loss_and_grad(array![[1.0, 0.0]].view(), &[2], &orthogonal_bank(), 1.0).is_err());
    }

    #[test]
    fn inter_loss_closed_forms() {
        let (loss, _) = inter_loss_and_grad(&orthogonal_bank(), 1.0).unwrap();
        assert!(loss.abs() < 1e-15);
        let same = PrototypeBank::new(array![[1.0, 0.0], [1.0, 0.0]], 0.9).unwrap();
        let (loss, _) = inter_loss_and_grad(&same, 1.0).unwrap();
        assert!((loss - 1.0).abs() < 1e-15);
        let one = PrototypeBank::new(array![[1.0, 0.0]], 0.9).unwrap();
        assert!(inter_loss_and_grad(&one, 1.0).is_err());
    }

    #[test]
    fn ce_loss_extremes() {
        // near one-hot: s on prototype 0, tiny temperature
        let (loss, _) =
            ce_loss_and_grad(array![[1.0, 0.0]].view(), &[0], &orthogonal_bank(), 0.001).unwrap();
        assert!(loss < 1e-9);
        let bank = PrototypeBank::new(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], 0.9)
            .unwrap();
        let s = 1.0 / 3f64.sqrt();
        let (loss, _) = ce_loss_and_grad(array![[s, s, s]].view(), &[1], &bank, 0.07).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_weights() {
        let w = LossWeights::default();
        assert!((combined_loss(1.0, 0.0, 0.0, &w) - 0.7).abs() < 1e-15);
        let w1 = LossWeights { alpha: 1.0, ..w };
        assert_eq!(combined_loss(2.0, 5.0, 0.5, &w1), 2.5);
        let w0 = LossWeights { alpha: 0.0, ..w };
        assert_eq!(combined_loss(2.0, 5.0, 0.5, &w0), 5.5);
    }

    #[test]
    fn prototype_ema_arithmetic() {
        let bank = orthogonal_bank();
        let next = update_prototypes(&bank, array![[0.0, 1.0]].view(), &[0]).unwrap();
        assert!((next.prototypes[[0, 0]] - 0.99995).abs() < 1e-5);
        assert!((next.prototypes[[0, 1]] - 0.01010).abs() < 1e-5);
        // absent class untouched
        assert_eq!(next.prototypes.row(1), bank.prototypes.row(1));

        let frozen = PrototypeBank { momentum: 1.0, ..bank.clone() };
        assert_eq!(update_prototypes(&frozen, array![[0.0, 1.0]].view(), &[0]).unwrap(), frozen);

        let replace = PrototypeBank { momentum: 0.0, ..bank };
        let next = update_prototypes(&replace, array![[0.0, 1.0], [0.0, 0.5]].view(), &[0, 0]).unwrap();
        assert_eq!(next.prototypes.row(0).to_vec(), vec![0.0, 1.0]);
    }

    #[test]
    fn sgd_noops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = ProjectionHead::new(3, 4, HeadArch::Linear, &mut rng);
        let x = array![[1.0, 2.0, 0.5]];
        let pass = head.forward(x.view()).unwrap();
        let g = head.backward(x.view(), &pass, Array2::zeros((1, 4)).view());
        assert_eq!(sgd_step(&head, &g, 0.1).unwrap(), head);
        let g = head.backward(x.view(), &pass, Array2::ones((1, 4)).view());
        assert_eq!(sgd_step(&head, &g, 0.0).unwrap(), head);
        let mut bad = g.clone();
        bad.output.bias[0] = f64::NAN;
        assert!(sgd_step(&head, &bad, 0.1).is_err());
    }

    #[test]
    fn one_step_reduces_intra_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = ProjectionHead::new(3, 3, HeadArch::Linear, &mut rng);
        let bank = PrototypeBank::new(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], 0.9)
            .unwrap();
        let x = array![[0.4, -1.0, 2.0]];
        let pass = head.forward(x.view()).unwrap();
        let (before, grad) = intra_loss_and_grad(pass.representations.view(), &[1], &bank, 0.5).unwrap();
        let g = head.backward(x.view(), &pass, grad.view());
        let next = sgd_step(&head, &g, 0.05).unwrap();
        let after_pass = next.forward(x.view()).unwrap();
        let (after, _) = intra_loss_and_grad(after_pass.representations.view(), &[1], &bank, 0.5).unwrap();
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn mlp_head_has_unit_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head = ProjectionHead::new(4, 3, HeadArch::Mlp { hidden: 6 }, &mut rng);
        assert_eq!(head.arch(), HeadArch::Mlp { hidden: 6 });
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i as f64 - 2.0) * 0.3 + j as f64 * 0.1);
        let pass = head.forward(x.view()).unwrap();
        for row in pass.representations.outer_iter() {
            assert!((l2_norm(row) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn centering_zeroes_output_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut head = ProjectionHead::new(2, 2, HeadArch::Linear, &mut rng);
        let x = array![[5.0, 5.0], [6.0, 4.0], [4.0, 7.0]];
        head.center_on(x.view()).unwrap();
        let pre = x.dot(&head.output.weight) + &head.output.bias;
        for m in pre.mean_axis(Axis(0)).unwrap().iter() {
            assert!(m.abs() < 1e-12);
        }
    }
}
