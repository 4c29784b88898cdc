//! Embedding datasets: file ingestion, known/novel splitting and a seeded
//! Gaussian-mixture generator.
//!
//! A dataset holds precomputed embedding vectors together with optional
//! ground-truth labels. Rows with `labeled_mask = true` form the labeled set
//! and only ever carry known-class labels (`< class_count_known`). Labels on
//! the remaining rows are kept for evaluation only; training code reads them
//! exclusively through [`EmbeddingDataset::training_labels`], which hides them.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// On-disk dataset encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Jsonl,
}

impl DataFormat {
    /// Guess the format from a file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => DataFormat::Jsonl,
            _ => DataFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    embeddings: Array2<f64>,
    labels: Vec<Option<usize>>,
    labeled_mask: Vec<bool>,
    class_count_known: usize,
    class_count_novel: usize,
}

impl EmbeddingDataset {
    pub fn new(
        embeddings: Array2<f64>,
        labels: Vec<Option<usize>>,
        labeled_mask: Vec<bool>,
        class_count_known: usize,
        class_count_novel: usize,
    ) -> Result<Self> {
        let (n, d) = embeddings.dim();
        if labels.len() != n || labeled_mask.len() != n {
            return Err(Error::InvalidInput(format!(
                "{n} embedding rows but {} labels and {} mask entries",
                labels.len(),
                labeled_mask.len()
            )));
        }
        if d == 0 {
            return Err(Error::InvalidInput("embedding dimension must be >= 1".into()));
        }
        let k = class_count_known + class_count_novel;
        if k < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 classes, got {k}"
            )));
        }
        if n < k {
            return Err(Error::InvalidInput(format!(
                "{n} rows cannot cover {k} classes"
            )));
        }
        for (row, values) in embeddings.outer_iter().enumerate() {
            if let Some(col) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::MalformedRow {
                    row,
                    message: format!("non-finite embedding value at e{col}"),
                });
            }
        }
        for (row, (label, &labeled)) in labels.iter().zip(&labeled_mask).enumerate() {
            match (*label, labeled) {
                (None, true) => {
                    return Err(Error::MalformedRow {
                        row,
                        message: "labeled row has no label".into(),
                    })
                }
                (Some(label), true) if label >= class_count_known => {
                    return Err(Error::LabelOutOfRange {
                        row,
                        label,
                        limit: class_count_known,
                    })
                }
                (Some(label), _) if label >= k => {
                    return Err(Error::LabelOutOfRange {
                        row,
                        label,
                        limit: k,
                    })
                }
                _ => {}
            }
        }
        Ok(Self {
            embeddings,
            labels,
            labeled_mask,
            class_count_known,
            class_count_novel,
        })
    }

    /// Build a dataset, inferring class counts from the labels: known classes
    /// are `0..=max labeled label`, the total is `max label + 1`.
    pub fn infer(
        embeddings: Array2<f64>,
        labels: Vec<Option<usize>>,
        labeled_mask: Vec<bool>,
    ) -> Result<Self> {
        let known = labels
            .iter()
            .zip(&labeled_mask)
            .filter_map(|(l, &m)| if m { *l } else { None })
            .max()
            .map_or(0, |m| m + 1);
        let total = labels.iter().flatten().max().map_or(0, |m| m + 1).max(known);
        Self::new(
            embeddings,
            labels,
            labeled_mask,
            known,
            total.saturating_sub(known),
        )
    }

    /// Re-declare the class counts, e.g. when unlabeled rows carry no labels
    /// and the total number of classes must be supplied externally.
    pub fn with_class_counts(self, known: usize, novel: usize) -> Result<Self> {
        Self::new(self.embeddings, self.labels, self.labeled_mask, known, novel)
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn embeddings(&self) -> ArrayView2<'_, f64> {
        self.embeddings.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.embeddings.row(i)
    }

    pub fn labeled_mask(&self) -> &[bool] {
        &self.labeled_mask
    }

    pub fn class_count_known(&self) -> usize {
        self.class_count_known
    }

    pub fn class_count_novel(&self) -> usize {
        self.class_count_novel
    }

    /// Total class count K.
    pub fn num_classes(&self) -> usize {
        self.class_count_known + self.class_count_novel
    }

    pub fn labeled_count(&self) -> usize {
        self.labeled_mask.iter().filter(|&&m| m).count()
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labeled_mask[i]).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.labeled_mask[i]).collect()
    }

    /// Labels visible to training: `Some` on labeled rows, `None` elsewhere.
    pub fn training_labels(&self) -> Vec<Option<usize>> {
        self.labels
            .iter()
            .zip(&self.labeled_mask)
            .map(|(l, &m)| if m { *l } else { None })
            .collect()
    }

    /// Raw label column, including evaluation-only labels of unlabeled rows.
    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    /// Complete ground truth, if every row carries a label. Evaluation only.
    pub fn ground_truth(&self) -> Option<Vec<usize>> {
        self.labels.iter().copied().collect()
    }

    /// Copy with the evaluation-only labels of unlabeled rows removed.
    pub fn scrub_unlabeled_truth(&self) -> Self {
        Self {
            labels: self.training_labels(),
            ..self.clone()
        }
    }

    /// Rows `indices`, in the given order, keeping class counts.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            self.embeddings.select(Axis(0), indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            indices.iter().map(|&i| self.labeled_mask[i]).collect(),
            self.class_count_known,
            self.class_count_novel,
        )
    }

    /// SHA-256 of the canonical CSV encoding.
    pub fn fingerprint(&self) -> String {
        let mut buf = Vec::new();
        write_csv(self, &mut buf).expect("writing to memory cannot fail");
        hex::encode(Sha256::digest(&buf))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LabelSampling {
    /// Sample the labeled fraction independently within each known class.
    #[default]
    Stratified,
    /// Sample the labeled fraction from the pooled known-class rows.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub labeled_fraction: f64,
    pub known_class_ratio: f64,
    pub seed: u64,
    #[serde(default)]
    pub sampling: LabelSampling,
}

impl SplitSpec {
    pub fn new(labeled_fraction: f64, known_class_ratio: f64, seed: u64) -> Self {
        Self {
            labeled_fraction,
            known_class_ratio,
            seed,
            sampling: LabelSampling::Stratified,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v <= 1.0;
        if !in_unit(self.labeled_fraction) {
            return Err(Error::InvalidConfig(format!(
                "labeled_fraction must be in (0, 1], got {}",
                self.labeled_fraction
            )));
        }
        if !in_unit(self.known_class_ratio) {
            return Err(Error::InvalidConfig(format!(
                "known_class_ratio must be in (0, 1], got {}",
                self.known_class_ratio
            )));
        }
        Ok(())
    }
}

/// Number of known classes for a ratio: ceiling, tolerant to float noise
/// such as `0.7 * 10 = 7.000000000000001`.
pub fn known_class_count(total: usize, ratio: f64) -> usize {
    let raw = ratio * total as f64;
    ((raw - 1e-9).ceil().max(1.0) as usize).min(total)
}

/// Select known classes and labeled rows.
///
/// Class ids are shuffled with the split seed; the first
/// `ceil(ratio * K)` become known and are renumbered `0..C^k`, the rest
/// `C^k..K`. A `labeled_fraction` of the known-class rows is then marked
/// labeled.
pub fn make_split(dataset: &EmbeddingDataset, spec: &SplitSpec) -> Result<EmbeddingDataset> {
    spec.validate()?;
    let truth = dataset.ground_truth().ok_or_else(|| {
        Error::InvalidInput("make_split needs ground-truth labels on every row".into())
    })?;
    let total = dataset.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let known = known_class_count(total, spec.known_class_ratio);
    let remap = class_permutation(total, &mut rng);
    let labels: Vec<usize> = truth.iter().map(|&l| remap[l]).collect();

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); known];
    for (i, &l) in labels.iter().enumerate() {
        if l < known {
            by_class[l].push(i);
        }
    }

    let mut mask = vec![false; labels.len()];
    match spec.sampling {
        LabelSampling::Stratified => {
            for rows in &mut by_class {
                rows.shuffle(&mut rng);
                let take = (spec.labeled_fraction * rows.len() as f64).round() as usize;
                for &i in rows.iter().take(take) {
                    mask[i] = true;
                }
            }
        }
        LabelSampling::Global => {
            let mut pool: Vec<usize> = by_class.iter().flatten().copied().collect();
            pool.sort_unstable();
            pool.shuffle(&mut rng);
            let take = (spec.labeled_fraction * pool.len() as f64).round() as usize;
            for &i in pool.iter().take(take) {
                mask[i] = true;
            }
        }
    }
    for (class, rows) in by_class.iter().enumerate().take(known) {
        if !rows.iter().any(|&i| mask[i]) {
            return Err(Error::EmptyKnownClass { class });
        }
    }

    EmbeddingDataset::new(
        dataset.embeddings.clone(),
        labels.into_iter().map(Some).collect(),
        mask,
        known,
        total - known,
    )
}

/// `remap[old] = new`: a seeded shuffle of the class ids.
fn class_permutation(total: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(rng);
    let mut remap = vec![0; total];
    for (new_id, &old_id) in order.iter().enumerate() {
        remap[old_id] = new_id;
    }
    remap
}

/// Renumber classes exactly as [`make_split`] with the same spec would, but
/// mark no row as labeled. Used for held-out evaluation sets drawn from the
/// same classes.
pub fn apply_class_split(dataset: &EmbeddingDataset, spec: &SplitSpec) -> Result<EmbeddingDataset> {
    spec.validate()?;
    let truth = dataset.ground_truth().ok_or_else(|| {
        Error::InvalidInput("class renumbering needs ground-truth labels on every row".into())
    })?;
    let total = dataset.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let known = known_class_count(total, spec.known_class_ratio);
    let remap = class_permutation(total, &mut rng);
    EmbeddingDataset::new(
        dataset.embeddings.clone(),
        truth.iter().map(|&l| Some(remap[l])).collect(),
        vec![false; truth.len()],
        known,
        total - known,
    )
}

/// Stratified train/test split on ground truth: `test_fraction` of every
/// class (rounded) goes to the test set. Row order is preserved on both
/// sides.
pub fn holdout_split(
    dataset: &EmbeddingDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(EmbeddingDataset, EmbeddingDataset)> {
    if !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
        return Err(Error::InvalidConfig(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let truth = dataset
        .ground_truth()
        .ok_or_else(|| Error::InvalidInput("holdout split needs ground truth".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_test = vec![false; dataset.len()];
    for class in 0..dataset.num_classes() {
        let mut rows: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] == class).collect();
        rows.shuffle(&mut rng);
        let take = (test_fraction * rows.len() as f64).round() as usize;
        for &i in rows.iter().take(take) {
            is_test[i] = true;
        }
    }
    let train: Vec<usize> = (0..dataset.len()).filter(|&i| !is_test[i]).collect();
    let test: Vec<usize> = (0..dataset.len()).filter(|&i| is_test[i]).collect();
    Ok((dataset.subset(&train)?, dataset.subset(&test)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Per-coordinate standard deviation of samples around their center.
    pub cluster_spread: f64,
    /// Expected Euclidean norm of a class center.
    pub center_scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::InvalidConfig(format!(
                "class_count must be >= 2, got {}",
                self.class_count
            )));
        }
        if self.samples_per_class < 2 {
            return Err(Error::InvalidConfig(format!(
                "samples_per_class must be >= 2, got {}",
                self.samples_per_class
            )));
        }
        if self.dim == 0 {
            return Err(Error::InvalidConfig("dim must be >= 1".into()));
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "cluster_spread must be finite and >= 0, got {}",
                self.cluster_spread
            )));
        }
        if !(self.center_scale > 0.0 && self.center_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "center_scale must be finite and > 0, got {}",
                self.center_scale
            )));
        }
        Ok(())
    }
}

/// Seeded isotropic Gaussian mixture.
///
/// Centers are `center_scale / sqrt(D) * z` with `z ~ N(0, I)`, so their
/// norm concentrates around `center_scale`; samples add `N(0, spread^2 I)`
/// noise. Rows are grouped by class, every row carries its label and none
/// is marked labeled (all classes count as known until [`make_split`]).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<EmbeddingDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let center_std = spec.center_scale / (spec.dim as f64).sqrt();
    let centers = Array2::from_shape_simple_fn((spec.class_count, spec.dim), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        center_std * z
    });
    let n = spec.class_count * spec.samples_per_class;
    let mut embeddings = Array2::zeros((n, spec.dim));
    let mut labels = Vec::with_capacity(n);
    for (row, mut out) in embeddings.outer_iter_mut().enumerate() {
        let class = row / spec.samples_per_class;
        for (o, &c) in out.iter_mut().zip(centers.row(class)) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *o = c + spec.cluster_spread * z;
        }
        labels.push(Some(class));
    }
    EmbeddingDataset::new(embeddings, labels, vec![false; n], spec.class_count, 0)
}

pub fn load_dataset(path: &Path, format: DataFormat) -> Result<EmbeddingDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let parsed = match format {
        DataFormat::Csv => read_csv(reader)?,
        DataFormat::Jsonl => read_jsonl(reader, path)?,
    };
    match parsed {
        Some((embeddings, labels, mask)) => EmbeddingDataset::infer(embeddings, labels, mask),
        None => Err(Error::EmptyDataset(path.to_path_buf())),
    }
}

pub fn save_dataset(dataset: &EmbeddingDataset, path: &Path, format: DataFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    match format {
        DataFormat::Csv => write_csv(dataset, &mut out)?,
        DataFormat::Jsonl => write_jsonl(dataset, &mut out).map_err(|e| Error::io(path, e))?,
    }
    out.flush().map_err(|e| Error::io(path, e))
}

type Columns = (Array2<f64>, Vec<Option<usize>>, Vec<bool>);

fn rows_to_columns(rows: Vec<Vec<f64>>, labels: Vec<Option<usize>>, mask: Vec<bool>) -> Columns {
    let d = rows[0].len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let n = flat.len() / d;
    let embeddings = Array2::from_shape_vec((n, d), flat).expect("rows checked for equal width");
    (embeddings, labels, mask)
}

fn read_csv<R: std::io::Read>(reader: R) -> Result<Option<Columns>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 3 || &header[0] != "label" || &header[1] != "mask" {
        return Err(Error::MalformedRow {
            row: 0,
            message: "header must be `label,mask,e0,...`".into(),
        });
    }
    let dim = header.len() - 2;
    for (j, name) in header.iter().skip(2).enumerate() {
        if name != format!("e{j}") {
            return Err(Error::MalformedRow {
                row: 0,
                message: format!("header column {} should be e{j}, found {name:?}", j + 2),
            });
        }
    }

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut mask = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != dim + 2 {
            return Err(Error::DimensionMismatch {
                row,
                expected: dim,
                found: record.len().saturating_sub(2),
            });
        }
        let label = match record[0].trim() {
            "" => None,
            s => Some(s.parse::<usize>().map_err(|_| Error::MalformedRow {
                row,
                message: format!("label {s:?} is not a non-negative integer"),
            })?),
        };
        let labeled = match record[1].trim() {
            "0" => false,
            "1" => true,
            s => {
                return Err(Error::MalformedRow {
                    row,
                    message: format!("mask must be 0 or 1, found {s:?}"),
                })
            }
        };
        let values = record
            .iter()
            .skip(2)
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::MalformedRow {
                row,
                message: format!("bad embedding value: {e}"),
            })?;
        rows.push(values);
        labels.push(label);
        mask.push(labeled);
    }
    if rows.is_empty() {
        return Ok(None);
    }
    Ok(Some(rows_to_columns(rows, labels, mask)))
}

#[derive(Serialize, Deserialize)]
struct JsonRow {
    label: Option<usize>,
    labeled: bool,
    embedding: Vec<f64>,
}

fn read_jsonl<R: BufRead>(reader: R, path: &Path) -> Result<Option<Columns>> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut mask = Vec::new();
    let mut dim = None;
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = rows.len();
        let parsed: JsonRow = serde_json::from_str(&line).map_err(|e| Error::MalformedRow {
            row,
            message: e.to_string(),
        })?;
        let expected = *dim.get_or_insert(parsed.embedding.len());
        if parsed.embedding.len() != expected || expected == 0 {
            return Err(Error::DimensionMismatch {
                row,
                expected,
                found: parsed.embedding.len(),
            });
        }
        rows.push(parsed.embedding);
        labels.push(parsed.label);
        mask.push(parsed.labeled);
    }
    if rows.is_empty() {
        return Ok(None);
    }
    Ok(Some(rows_to_columns(rows, labels, mask)))
}

fn write_csv<W: Write>(dataset: &EmbeddingDataset, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["label".to_string(), "mask".to_string()];
    header.extend((0..dataset.dim()).map(|j| format!("e{j}")));
    wtr.write_record(&header)?;
    let mut record = Vec::with_capacity(dataset.dim() + 2);
    for i in 0..dataset.len() {
        record.clear();
        record.push(dataset.labels[i].map(|l| l.to_string()).unwrap_or_default());
        record.push(if dataset.labeled_mask[i] { "1" } else { "0" }.to_string());
        record.extend(dataset.embeddings.row(i).iter().map(|&v| crate::math::fmt_float(v)));
        wtr.write_record(&record)?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

fn write_jsonl<W: Write>(dataset: &EmbeddingDataset, mut out: W) -> std::io::Result<()> {
    for i in 0..dataset.len() {
        let row = JsonRow {
            label: dataset.labels[i],
            labeled: dataset.labeled_mask[i],
            embedding: dataset.embeddings.row(i).to_vec(),
        };
        serde_json::to_writer(&mut out, &row)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
