//! Versioned JSON checkpoints of a trained model.
//!
//! Fields:
//! - `format_version`: currently 1
//! - `input_dim`, `representation_dim`
//! - `head`: projection head weights (`output.weight` is `input x H`,
//!   optional `hidden` layer for the MLP variant)
//! - `prototypes`: `K x H` unit rows
//! - `class_prior`: `beta`, length `K`
//! - `lambda1`, `lambda2`, `tau`, `eta`
//! - `class_count_known`, `class_count_novel`
//! - `epoch`: epochs completed
//! - `seed`, `ablation`
//! - `dataset_fingerprint`: hash of the training file, when known

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::repr::{PrototypeBank, ProjectionHead};
use crate::sinkhorn::ClassPrior;
use crate::trainer::{Ablation, TrainConfig, TrainedModel};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub input_dim: usize,
    pub representation_dim: usize,
    pub head: ProjectionHead,
    pub prototypes: Array2<f64>,
    pub class_prior: Vec<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub eta: f64,
    pub class_count_known: usize,
    pub class_count_novel: usize,
    pub epoch: usize,
    pub seed: u64,
    pub ablation: Ablation,
    #[serde(default)]
    pub dataset_fingerprint: Option<String>,
}

impl Checkpoint {
    pub fn from_model(
        model: &TrainedModel,
        config: &TrainConfig,
        dataset: &EmbeddingDataset,
        dataset_fingerprint: Option<String>,
    ) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            input_dim: model.head.input_dim(),
            representation_dim: model.head.output_dim(),
            head: model.head.clone(),
            prototypes: model.bank.prototypes.clone(),
            class_prior: model.prior.beta.clone(),
            lambda1: model.prior.momentum,
            lambda2: model.bank.momentum,
            tau: model.tau,
            eta: config.sinkhorn.eta,
            class_count_known: dataset.class_count_known(),
            class_count_novel: dataset.class_count_novel(),
            epoch: model.epochs_run,
            seed: config.seed,
            ablation: config.ablation,
            dataset_fingerprint,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_count_known + self.class_count_novel
    }

    /// Structural checks after loading.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported checkpoint format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let k = self.num_classes();
        let bad = |msg: String| Err(Error::InvalidInput(format!("corrupt checkpoint: {msg}")));
        if self.head.input_dim() != self.input_dim || self.head.output_dim() != self.representation_dim {
            return bad(format!(
                "head is {}x{}, header says {}x{}",
                self.head.input_dim(),
                self.head.output_dim(),
                self.input_dim,
                self.representation_dim
            ));
        }
        if self.prototypes.dim() != (k, self.representation_dim) {
            return bad(format!(
                "prototypes are {:?}, expected ({k}, {})",
                self.prototypes.dim(),
                self.representation_dim
            ));
        }
        if let Some(row) = self
            .prototypes
            .outer_iter()
            .position(|p| (crate::math::l2_norm(p) - 1.0).abs() > 1e-9)
        {
            return bad(format!("prototype {row} is not unit norm"));
        }
        if self.class_prior.len() != k {
            return bad(format!("class prior has {} entries, expected {k}", self.class_prior.len()));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<TrainedModel> {
        self.validate()?;
        Ok(TrainedModel {
            head: self.head.clone(),
            bank: PrototypeBank {
                prototypes: self.prototypes.clone(),
                momentum: self.lambda2,
            },
            prior: ClassPrior {
                beta: self.class_prior.clone(),
                momentum: self.lambda1,
            },
            tau: self.tau,
            epochs_run: self.epoch,
        })
    }

    /// The dataset must share the embedding width and use no more classes
    /// than the checkpoint has prototypes.
    pub fn check_compatible(&self, dataset: &EmbeddingDataset) -> Result<()> {
        if dataset.dim() != self.input_dim {
            return Err(Error::CheckpointMismatch {
                what: "embedding dimension",
                checkpoint: self.input_dim,
                dataset: dataset.dim(),
            });
        }
        if dataset.num_classes() > self.num_classes() {
            return Err(Error::CheckpointMismatch {
                what: "class count",
                checkpoint: self.num_classes(),
                dataset: dataset.num_classes(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let checkpoint: Checkpoint = serde_json::from_slice(&text)?;
        checkpoint.validate()?;
        Ok(checkpoint)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, make_split, SplitSpec, SyntheticSpec};
    use crate::trainer::train;

    fn trained() -> (EmbeddingDataset, TrainConfig, TrainedModel) {
        let ds = generate_synthetic(&SyntheticSpec {
            class_count: 3,
            dim: 4,
            samples_per_class: 10,
            cluster_spread: 0.3,
            center_scale: 5.0,
            seed: 9,
        })
        .unwrap();
        let ds = make_split(&ds, &SplitSpec::new(0.3, 0.67, 9)).unwrap();
        let config = TrainConfig {
            epochs: 2,
            representation_dim: 5,
            ..TrainConfig::default()
        };
        let model = train(&ds, &config).unwrap().model;
        (ds, config, model)
    }

    #[test]
    fn round_trip_is_exact() {
        let (ds, config, model) = trained();
        let ckpt = Checkpoint::from_model(&model, &config, &ds, Some("abc".into()));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.model().unwrap(), model);
        assert_eq!(back.epoch, 2);
    }

    #[test]
    fn rejects_other_versions_and_shapes() {
        let (ds, config, model) = trained();
        let mut ckpt = Checkpoint::from_model(&model, &config, &ds, None);
        ckpt.format_version = 99;
        assert!(ckpt.validate().is_err());
        ckpt.format_version = CHECKPOINT_FORMAT_VERSION;
        ckpt.class_prior.pop();
        assert!(ckpt.validate().is_err());
    }

    #[test]
    fn dimension_mismatch_names_both_sides() {
        let (ds, config, model) = trained();
        let ckpt = Checkpoint::from_model(&model, &config, &ds, None);
        let other = generate_synthetic(&SyntheticSpec {
            class_count: 3,
            dim: 7,
            samples_per_class: 4,
            cluster_spread: 0.3,
            center_scale: 5.0,
            seed: 1,
        })
        .unwrap();
        let err = ckpt.check_compatible(&other).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('4') && msg.contains('7'), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }
}
