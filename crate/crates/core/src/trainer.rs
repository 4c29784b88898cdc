//! The EM training loop.
//!
//! Each epoch runs one E-step over every unlabeled sample (optimal-transport
//! pseudo-labels, or aligned k-means labels for the `no_ot` ablation) and then
//! one pass of minibatch M-steps: head gradients from the intra-cluster and
//! cross-entropy losses, a moving-average prototype update, and a gradient
//! step of the inter-cluster loss on the prototypes.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::max_weight_assignment;
use crate::dataset::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::kmeans::{kmeans, KMeansConfig};
use crate::math::{fmt_float, fmt_opt_float, l2_norm};
use crate::repr::{
    ce_loss_and_grad, combined_loss, inter_loss_and_grad, intra_loss_and_grad, predict_probs,
    update_prototypes, HeadArch, LossWeights, PrototypeBank, PrototypeSgd, ProjectionHead, Sgd,
};
use crate::sinkhorn::{estep, estep_traced, update_class_prior, ClassPrior, SinkhornConfig};

pub use crate::kmeans::kmeans_baseline;

/// Header of the per-epoch telemetry CSV.
pub const TELEMETRY_HEADER: &str =
    "epoch,pl_acc,loss_intra,loss_inter,loss_ce,loss_total,residual,prior_entropy";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// k-means pseudo-labels instead of optimal transport.
    NoOt,
    /// Drop the intra-cluster term (alpha = 0).
    NoIntra,
    /// Drop the inter-cluster term (alpha = 1).
    NoInter,
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::NoOt => "no_ot",
            Ablation::NoIntra => "no_intra",
            Ablation::NoInter => "no_inter",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub sinkhorn: SinkhornConfig,
    /// Class-prior momentum.
    pub lambda1: f64,
    /// Prototype momentum.
    pub lambda2: f64,
    /// Head learning rate.
    pub learning_rate: f64,
    /// Learning rate of the inter-cluster step on the prototypes.
    pub prototype_learning_rate: f64,
    pub sgd_momentum: f64,
    /// Width of the normalized representation.
    pub representation_dim: usize,
    pub head: HeadArch,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            weights: LossWeights::default(),
            sinkhorn: SinkhornConfig::default(),
            lambda1: 0.95,
            lambda2: 0.99,
            learning_rate: 0.05,
            prototype_learning_rate: 0.01,
            sgd_momentum: 0.9,
            representation_dim: 32,
            head: HeadArch::Linear,
            seed: 0,
            ablation: Ablation::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.sinkhorn.validate()?;
        let unit = |v: f64, name: &str| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} must be in [0, 1], got {v}")))
            }
        };
        unit(self.lambda1, "lambda1")?;
        unit(self.lambda2, "lambda2")?;
        unit(self.sgd_momentum, "sgd_momentum")?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.representation_dim == 0 {
            return Err(Error::InvalidConfig("representation_dim must be >= 1".into()));
        }
        if let HeadArch::Mlp { hidden: 0 } = self.head {
            return Err(Error::InvalidConfig("MLP hidden width must be >= 1".into()));
        }
        for (name, lr) in [
            ("learning_rate", self.learning_rate),
            ("prototype_learning_rate", self.prototype_learning_rate),
        ] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {lr}")));
            }
        }
        Ok(())
    }

    pub fn with_ablation(self, ablation: Ablation) -> Self {
        ablation_variant(&Self { ablation, ..self })
    }
}

/// Apply the loss-weight overrides implied by `config.ablation`.
pub fn ablation_variant(config: &TrainConfig) -> TrainConfig {
    let mut out = *config;
    match config.ablation {
        Ablation::Full | Ablation::NoOt => {}
        Ablation::NoIntra => out.weights.alpha = 0.0,
        Ablation::NoInter => out.weights.alpha = 1.0,
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTelemetry {
    /// 1-based.
    pub epoch: usize,
    /// Aligned accuracy of this epoch's pseudo-labels against held-back
    /// ground truth; `None` when that truth is unavailable.
    pub pseudo_label_accuracy: Option<f64>,
    pub loss_intra: f64,
    pub loss_inter: f64,
    pub loss_ce: f64,
    pub loss_total: f64,
    pub sinkhorn_residual: f64,
    pub sinkhorn_iterations: usize,
    pub prior_entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub head: ProjectionHead,
    pub bank: PrototypeBank,
    pub prior: ClassPrior,
    pub tau: f64,
    pub epochs_run: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: TrainedModel,
    pub telemetry: Vec<EpochTelemetry>,
    /// `(epoch, iteration, residual)` rows; filled only by traced runs.
    pub residual_trace: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    pub record_trace: bool,
}

pub fn train(dataset: &EmbeddingDataset, config: &TrainConfig) -> Result<TrainOutput> {
    train_with(dataset, config, TrainOptions::default(), |_, _| Ok(()))
}

/// [`train`] with options and a per-epoch observer (e.g. periodic
/// checkpointing). The observer sees the model after each epoch.
pub fn train_with<F>(
    dataset: &EmbeddingDataset,
    config: &TrainConfig,
    options: TrainOptions,
    mut observer: F,
) -> Result<TrainOutput>
where
    F: FnMut(&TrainedModel, &EpochTelemetry) -> Result<()>,
{
    config.validate()?;
    let config = ablation_variant(config);
    let k = dataset.num_classes();
    let tau = config.weights.tau;
    let alpha = config.weights.alpha;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let embeddings = dataset.embeddings();
    let visible = dataset.training_labels();
    let labeled = dataset.labeled_indices();
    let unlabeled = dataset.unlabeled_indices();
    let unlabeled_x = embeddings.select(Axis(0), &unlabeled);
    // evaluation-only: used for telemetry, never for updates
    let held_back_truth: Option<Vec<usize>> =
        unlabeled.iter().map(|&i| dataset.labels()[i]).collect();

    let mut head = ProjectionHead::new(dataset.dim(), config.representation_dim, config.head, &mut rng);
    head.center_on(embeddings)?;
    let mut bank = initial_prototypes(&head, dataset, &visible, &unlabeled_x, config.lambda2, config.seed)?;
    let mut prior = ClassPrior::uniform(k, config.lambda1);
    let mut head_opt = Sgd::new(config.learning_rate, config.sgd_momentum);
    let mut proto_opt = PrototypeSgd::new(config.prototype_learning_rate, config.sgd_momentum);

    let mut telemetry = Vec::with_capacity(config.epochs);
    let mut residual_trace = Vec::new();
    let mut first_total: Option<f64> = None;

    for epoch in 1..=config.epochs {
        // E-step
        let mut residual = 0.0;
        let mut iterations = 0;
        let pseudo: Vec<usize> = if unlabeled.is_empty() {
            Vec::new()
        } else {
            let reps = head.forward(unlabeled_x.view())?.representations;
            let probs = predict_probs(reps.view(), &bank, tau)?;
            match config.ablation {
                Ablation::NoOt => {
                    prior = update_class_prior(&prior, probs.view())?;
                    kmeans_pseudo_labels(reps.view(), &bank, config.seed.wrapping_add(epoch as u64))?
                }
                _ => {
                    let out = if options.record_trace {
                        estep_traced(probs.view(), &prior, &config.sinkhorn)?
                    } else {
                        estep(probs.view(), &prior, &config.sinkhorn)?
                    };
                    residual = out.plan.marginal_residual;
                    iterations = out.plan.iterations;
                    if let Some(trace) = &out.trace {
                        residual_trace.extend(
                            trace.residuals.iter().enumerate().map(|(it, &r)| (epoch, it + 1, r)),
                        );
                    }
                    prior = out.prior;
                    out.pseudo_labels
                }
            }
        };
        let pseudo_label_accuracy = match &held_back_truth {
            Some(truth) if !truth.is_empty() => Some(accuracy(&pseudo, truth)?),
            _ => None,
        };

        // M-step
        let mut targets = visible.clone();
        for (pos, &i) in unlabeled.iter().enumerate() {
            targets[i] = Some(pseudo[pos]);
        }
        let batches = make_batches(&labeled, &unlabeled, config.batch_size, &mut rng);
        let (mut sum_intra, mut sum_inter, mut sum_ce) = (0.0, 0.0, 0.0);
        for batch in &batches {
            let x = embeddings.select(Axis(0), batch);
            let batch_targets: Vec<usize> = batch
                .iter()
                .map(|&i| targets[i].expect("every row has a target"))
                .collect();
            let pass = head.forward(x.view())?;
            let reps = &pass.representations;

            let (loss_intra, grad_intra) = intra_loss_and_grad(reps.view(), &batch_targets, &bank, tau)?;
            let labeled_pos: Vec<usize> = (0..batch.len()).filter(|&p| visible[batch[p]].is_some()).collect();
            let labeled_targets: Vec<usize> = labeled_pos.iter().map(|&p| batch_targets[p]).collect();
            let labeled_reps = reps.select(Axis(0), &labeled_pos);
            let (loss_ce, grad_ce) = ce_loss_and_grad(labeled_reps.view(), &labeled_targets, &bank, tau)?;

            let mut grad = grad_intra * alpha;
            for (row, &p) in labeled_pos.iter().enumerate() {
                let mut g = grad.row_mut(p);
                g += &grad_ce.row(row);
            }
            let head_grads = head.backward(x.view(), &pass, grad.view());
            head_opt.step(&mut head, &head_grads)?;

            bank = update_prototypes(&bank, reps.view(), &batch_targets)?;
            let loss_inter = if k >= 2 {
                let (loss, grad) = inter_loss_and_grad(&bank, tau)?;
                if alpha < 1.0 {
                    proto_opt.step(&mut bank, &(grad * (1.0 - alpha)))?;
                }
                loss
            } else {
                0.0
            };

            sum_intra += loss_intra;
            sum_inter += loss_inter;
            sum_ce += loss_ce;
        }
        let nb = batches.len().max(1) as f64;
        let (loss_intra, loss_inter, loss_ce) = (sum_intra / nb, sum_inter / nb, sum_ce / nb);
        let loss_total = combined_loss(loss_intra, loss_inter, loss_ce, &config.weights);

        let first = *first_total.get_or_insert(loss_total);
        if !loss_total.is_finite() || loss_total.abs() > 100.0 * first.abs().max(1.0) {
            return Err(Error::Diverged {
                epoch,
                loss: loss_total,
                first,
            });
        }

        let record = EpochTelemetry {
            epoch,
            pseudo_label_accuracy,
            loss_intra,
            loss_inter,
            loss_ce,
            loss_total,
            sinkhorn_residual: residual,
            sinkhorn_iterations: iterations,
            prior_entropy: prior.entropy(),
        };
        let snapshot = TrainedModel {
            head: head.clone(),
            bank: bank.clone(),
            prior: prior.clone(),
            tau,
            epochs_run: epoch,
        };
        observer(&snapshot, &record)?;
        telemetry.push(record);
    }

    Ok(TrainOutput {
        model: TrainedModel {
            head,
            bank,
            prior,
            tau,
            epochs_run: config.epochs,
        },
        telemetry,
        residual_trace,
    })
}

/// Known-class prototypes start at the normalized mean representation of
/// their labeled rows. The remaining ones come from k-means centroids of the
/// unlabeled representations, picked greedily to be least similar to the
/// prototypes already chosen.
fn initial_prototypes(
    head: &ProjectionHead,
    dataset: &EmbeddingDataset,
    visible: &[Option<usize>],
    unlabeled_x: &Array2<f64>,
    momentum: f64,
    seed: u64,
) -> Result<PrototypeBank> {
    let k = dataset.num_classes();
    let h = head.output_dim();
    let reps = head.forward(dataset.embeddings())?.representations;

    let mut prototypes = Array2::<f64>::zeros((k, h));
    let mut counts = vec![0usize; k];
    for (i, label) in visible.iter().enumerate() {
        if let Some(l) = *label {
            let mut p = prototypes.row_mut(l);
            p += &reps.row(i);
            counts[l] += 1;
        }
    }
    let mut chosen: Vec<Array1<f64>> = Vec::new();
    #[allow(clippy::needless_range_loop)]
    for j in 0..k {
        if counts[j] > 0 {
            let mut p = prototypes.row_mut(j);
            let norm = l2_norm(p.view());
            if norm > 0.0 {
                p.mapv_inplace(|v| v / norm);
                chosen.push(p.to_owned());
            } else {
                counts[j] = 0;
            }
        }
    }
    let missing: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
    if !missing.is_empty() {
        let pool = if unlabeled_x.nrows() >= k {
            head.forward(unlabeled_x.view())?.representations
        } else {
            reps
        };
        let clusters = kmeans(pool.view(), k, seed, &KMeansConfig::default())?;
        let mut candidates: Vec<Array1<f64>> = clusters
            .centroids
            .outer_iter()
            .map(|c| {
                let n = l2_norm(c);
                if n > 0.0 {
                    c.mapv(|v| v / n)
                } else {
                    let mut e = Array1::zeros(h);
                    e[0] = 1.0;
                    e
                }
            })
            .collect();
        for &j in &missing {
            let pick = if chosen.is_empty() {
                0
            } else {
                // candidate whose closest chosen prototype is farthest away
                (0..candidates.len())
                    .min_by(|&a, &b| {
                        let sim = |c: &Array1<f64>| {
                            chosen.iter().map(|p| p.dot(c)).fold(f64::NEG_INFINITY, f64::max)
                        };
                        sim(&candidates[a]).total_cmp(&sim(&candidates[b])).then(a.cmp(&b))
                    })
                    .expect("k-means returns k >= missing centroids")
            };
            let c = candidates.remove(pick);
            prototypes.row_mut(j).assign(&c);
            chosen.push(c);
        }
    }
    PrototypeBank::new(prototypes, momentum)
}

/// k-means pseudo-labels whose cluster ids are aligned to the prototype
/// bank by a maximum-cosine matching.
fn kmeans_pseudo_labels(reps: ArrayView2<'_, f64>, bank: &PrototypeBank, seed: u64) -> Result<Vec<usize>> {
    let k = bank.num_classes();
    if reps.nrows() < k {
        // too few points to form k clusters: nearest prototype instead
        let sims = reps.dot(&bank.prototypes.t());
        return Ok(sims.outer_iter().map(crate::math::argmax).collect());
    }
    let clusters = kmeans(reps, k, seed, &KMeansConfig::default())?;
    let mut sims = clusters.centroids.dot(&bank.prototypes.t());
    for (mut row, c) in sims.outer_iter_mut().zip(clusters.centroids.outer_iter()) {
        let n = l2_norm(c);
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
    // shift to non-negative weights; the optimal matching is unchanged
    let sims = sims.mapv(|s| s + 1.0);
    let mapping = max_weight_assignment(sims.view());
    Ok(clusters
        .assignments
        .iter()
        .map(|&c| mapping[c].expect("square matching covers every cluster"))
        .collect())
}

/// Split rows into `ceil(N / batch_size)` batches, spreading labeled and
/// unlabeled rows evenly so each batch mirrors their overall proportions.
fn make_batches(labeled: &[usize], unlabeled: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let n = labeled.len() + unlabeled.len();
    let count = n.div_ceil(batch_size).max(1);
    let mut l = labeled.to_vec();
    let mut u = unlabeled.to_vec();
    l.shuffle(rng);
    u.shuffle(rng);
    let mut batches = vec![Vec::with_capacity(batch_size); count];
    for (pos, &i) in l.iter().chain(u.iter()).enumerate() {
        batches[pos % count].push(i);
    }
    batches.retain(|b| !b.is_empty());
    batches
}

pub fn write_telemetry_csv<W: Write>(telemetry: &[EpochTelemetry], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{TELEMETRY_HEADER}")?;
    for t in telemetry {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            t.epoch,
            fmt_opt_float(t.pseudo_label_accuracy),
            fmt_float(t.loss_intra),
            fmt_float(t.loss_inter),
            fmt_float(t.loss_ce),
            fmt_float(t.loss_total),
            fmt_float(t.sinkhorn_residual),
            fmt_float(t.prior_entropy)
        )?;
    }
    Ok(())
}

pub fn save_telemetry(telemetry: &[EpochTelemetry], csv_path: &Path, json_path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_telemetry_csv(telemetry, &mut buf).expect("in-memory write");
    std::fs::write(csv_path, buf).map_err(|e| Error::io(csv_path, e))?;
    let json = serde_json::to_vec_pretty(telemetry)?;
    std::fs::write(json_path, json).map_err(|e| Error::io(json_path, e))
}
