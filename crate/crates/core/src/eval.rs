//! Clustering metrics: Hungarian-aligned accuracy, NMI and ARI, with
//! known/novel breakdowns.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::assignment::max_weight_assignment;
use crate::dataset::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::math::argmax;
use crate::repr::{predict_probs, PrototypeBank, ProjectionHead};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nmi: f64,
    pub ari: f64,
    pub acc: f64,
    /// `None` when no sample belongs to a known class.
    pub acc_known: Option<f64>,
    /// `None` when no sample belongs to a novel class.
    pub acc_novel: Option<f64>,
    /// `confusion[cluster][class]` counts.
    pub confusion: Vec<Vec<u64>>,
    /// Cluster to class under the accuracy-maximizing one-to-one matching.
    pub mapping: Vec<Option<usize>>,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    pub mapping: Vec<Option<usize>>,
    pub matched: u64,
}

/// One-to-one cluster-to-class matching maximizing the matched count.
/// Rectangular matrices are zero-padded; clusters matched to padding map to
/// `None`.
pub fn hungarian_match(confusion: ArrayView2<'_, u64>) -> Matching {
    let weights = confusion.mapv(|c| c as f64);
    let mut mapping = max_weight_assignment(weights.view());
    // a zero-count pairing carries no samples; report it as unmatched
    for (cluster, m) in mapping.iter_mut().enumerate() {
        if let Some(class) = *m {
            if confusion[[cluster, class]] == 0 {
                *m = None;
            }
        }
    }
    let matched = mapping
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| confusion[[r, c]]))
        .sum();
    Matching { mapping, matched }
}

fn check_lengths(predicted: &[usize], truth: &[usize]) -> Result<()> {
    if predicted.len() != truth.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions but {} true labels",
            predicted.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// Map arbitrary ids to `0..distinct` in sorted order.
fn densify(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut ids = BTreeMap::new();
    for &l in labels {
        ids.entry(l).or_insert(0);
    }
    for (i, v) in ids.values_mut().enumerate() {
        *v = i;
    }
    (labels.iter().map(|l| ids[l]).collect(), ids.len())
}

fn contingency(predicted: &[usize], truth: &[usize]) -> Array2<u64> {
    let (p, np) = densify(predicted);
    let (t, nt) = densify(truth);
    let mut table = Array2::zeros((np, nt));
    for (&a, &b) in p.iter().zip(&t) {
        table[[a, b]] += 1;
    }
    table
}

/// Fraction of samples correct after the best one-to-one relabeling.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(predicted, truth)?;
    if truth.is_empty() {
        return Ok(0.0);
    }
    let matching = hungarian_match(contingency(predicted, truth).view());
    Ok(matching.matched as f64 / truth.len() as f64)
}

fn entropy_of_counts(counts: impl Iterator<Item = u64>, n: f64) -> f64 {
    -counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Mutual information over the arithmetic mean of the two entropies.
/// Two trivial partitions score 1.
pub fn nmi(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(predicted, truth)?;
    if truth.is_empty() {
        return Err(Error::InvalidInput("NMI of empty labelings".into()));
    }
    let table = contingency(predicted, truth);
    let n = truth.len() as f64;
    let rows: Vec<u64> = table.rows().into_iter().map(|r| r.sum()).collect();
    let cols: Vec<u64> = table.columns().into_iter().map(|c| c.sum()).collect();
    let h_pred = entropy_of_counts(rows.iter().copied(), n);
    let h_true = entropy_of_counts(cols.iter().copied(), n);
    if h_pred == 0.0 && h_true == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for ((i, j), &c) in table.indexed_iter() {
        if c > 0 {
            let c = c as f64;
            mi += c / n * (c * n / (rows[i] as f64 * cols[j] as f64)).ln();
        }
    }
    Ok((mi / ((h_pred + h_true) / 2.0)).clamp(0.0, 1.0))
}

fn pairs(c: u64) -> f64 {
    let c = c as f64;
    c * (c - 1.0) / 2.0
}

/// Adjusted Rand index with the permutation-model expectation.
pub fn ari(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(predicted, truth)?;
    let n = truth.len() as u64;
    if n < 2 {
        return Ok(1.0);
    }
    let table = contingency(predicted, truth);
    let index: f64 = table.iter().map(|&c| pairs(c)).sum();
    let sum_rows: f64 = table.rows().into_iter().map(|r| pairs(r.sum())).sum();
    let sum_cols: f64 = table.columns().into_iter().map(|c| pairs(c.sum())).sum();
    let expected = sum_rows * sum_cols / pairs(n);
    let max_index = (sum_rows + sum_cols) / 2.0;
    let denom = max_index - expected;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}

/// Full report for cluster assignments against ground truth. Classes
/// `< known_classes` are known; the known/novel accuracies reuse the global
/// matching.
pub fn report(predicted: &[usize], truth: &[usize], known_classes: usize) -> Result<MetricsReport> {
    check_lengths(predicted, truth)?;
    if truth.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate zero samples".into()));
    }
    let clusters = predicted.iter().max().map_or(0, |m| m + 1);
    let classes = truth.iter().max().map_or(0, |m| m + 1);
    let mut confusion = Array2::<u64>::zeros((clusters, classes));
    for (&p, &t) in predicted.iter().zip(truth) {
        confusion[[p, t]] += 1;
    }
    let matching = hungarian_match(confusion.view());

    let subset_acc = |keep: &dyn Fn(usize) -> bool| -> Option<f64> {
        let mut total = 0u64;
        let mut correct = 0u64;
        for (&p, &t) in predicted.iter().zip(truth) {
            if keep(t) {
                total += 1;
                if matching.mapping[p] == Some(t) {
                    correct += 1;
                }
            }
        }
        (total > 0).then(|| correct as f64 / total as f64)
    };

    Ok(MetricsReport {
        nmi: nmi(predicted, truth)?,
        ari: ari(predicted, truth)?,
        acc: matching.matched as f64 / truth.len() as f64,
        acc_known: subset_acc(&|t| t < known_classes),
        acc_novel: subset_acc(&|t| t >= known_classes),
        confusion: confusion.outer_iter().map(|r| r.to_vec()).collect(),
        mapping: matching.mapping,
        samples: truth.len(),
    })
}

/// Cluster assignment per sample: argmax of the prototype softmax.
pub fn assign_clusters(
    head: &ProjectionHead,
    bank: &PrototypeBank,
    tau: f64,
    embeddings: ArrayView2<'_, f64>,
) -> Result<Vec<usize>> {
    let pass = head.forward(embeddings)?;
    let probs = predict_probs(pass.representations.view(), bank, tau)?;
    Ok(probs.outer_iter().map(argmax).collect())
}

/// Assign every row of `dataset` and score against its ground truth.
pub fn evaluate(
    head: &ProjectionHead,
    bank: &PrototypeBank,
    tau: f64,
    dataset: &EmbeddingDataset,
) -> Result<MetricsReport> {
    let truth = dataset
        .ground_truth()
        .ok_or_else(|| Error::InvalidInput("evaluation needs ground truth on every row".into()))?;
    let predicted = assign_clusters(head, bank, tau, dataset.embeddings())?;
    report(&predicted, &truth, dataset.class_count_known())
}
