//! Shared setup for the examples: a small two-modality problem and a trained
//! variational head per modality.
#![allow(dead_code)]

use bayes_fusion::dataset::{generate_synthetic, split, MultimodalDataset, SplitSpec, SynthModality, SynthSpec};
use bayes_fusion::head::{init_variational_head, VariationalHead};
use bayes_fusion::train::{train_variational, TrainConfig};
use bayes_fusion::uncertainty::{mc_predict, PredictionSet};
use bayes_fusion::{Result, RngStream};

pub const MC_PASSES: usize = 40;

pub fn spec() -> SynthSpec {
    let modality = |name: &str| SynthModality {
        name: name.into(),
        dim: 32,
        separation: 6.0,
        noise: 1.0,
        ambiguous_fraction: 0.25,
    };
    SynthSpec {
        num_classes: 8,
        samples_per_class: 200,
        modalities: vec![modality("vision"), modality("audio")],
        seed: 7,
    }
}

pub struct Splits {
    pub train: MultimodalDataset,
    pub val: MultimodalDataset,
    pub test: MultimodalDataset,
}

pub fn splits(spec: &SynthSpec) -> Result<Splits> {
    let (train, val, test) = split(
        &generate_synthetic(spec)?,
        &SplitSpec { train_frac: 0.6, val_frac: 0.2, test_frac: 0.2, seed: spec.seed, stratified: true },
    )?;
    Ok(Splits { train, val, test })
}

pub fn train_config() -> TrainConfig {
    TrainConfig { learning_rate: 0.01, max_epochs: 20, seed: 11, ..TrainConfig::default() }
}

pub fn train_vi(s: &Splits, modality: usize) -> Result<VariationalHead> {
    let dims = [s.train.modalities()[modality].dim, 64, 32, s.train.num_classes()];
    let head = init_variational_head(&dims, 100 + modality as u64, 1.0)?;
    let (head, _) = train_variational(
        head,
        s.train.features(modality),
        s.train.labels(),
        s.val.features(modality),
        s.val.labels(),
        &train_config(),
    )?;
    Ok(head)
}

pub fn predict(head: &VariationalHead, ds: &MultimodalDataset, modality: usize, salt: u64) -> Result<PredictionSet> {
    let dists = mc_predict(head, ds.features(modality), MC_PASSES, &RngStream::new(5, salt))?;
    PredictionSet::new(ds.ids().to_vec(), ds.labels().to_vec(), dists)
}
