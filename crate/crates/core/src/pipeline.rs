//! End-to-end experiment: synthetic data, training, MC inference, AvU
//! thresholds, gated fusion, OOD separation and evaluation tables.
//!
//! Every stage reads its inputs from and writes its outputs under one output
//! directory, so stages can run as separate processes:
//!
//! ```text
//! data/{dataset,ood}/              manifest.json + <modality>.bin
//! models/<model>_<modality>.bayh   checkpoint (+ _history.csv)
//! predictions/<model>_<modality>_<split>.{csv,samples.bin}
//! avu/<model>_<modality>_curve.csv, avu/<model>_policy.json
//! fusion/<model>_report.csv, _metrics.csv, _decisions.csv
//! ood/separation.csv, ood/hist/*.csv
//! eval/table.csv, eval/confidence.csv, eval/curves/*.csv, eval/hist/*.csv
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_deterministic, load_variational, save_checkpoint, Checkpoint, CheckpointMeta};
use crate::dataset::{
    generate_synthetic, generate_synthetic_ood, load_dataset, save_dataset, split, MultimodalDataset,
    SplitSpec, SynthModality, SynthSpec,
};
use crate::error::{Error, Result};
use crate::fusion::{average_sets, fit_fusion_policy, fuse_sets, ComparisonMode, FusionPolicy};
use crate::head::{init_deterministic_head, init_variational_head, Head};
use crate::metrics::{
    density_histogram, micro_pr_curve, micro_roc_curve, ood_separation, topk_accuracy, DEFAULT_HISTOGRAM_BINS,
};
use crate::tensor::RngStream;
use crate::train::{train_deterministic, train_variational, TrainConfig};
use crate::uncertainty::{
    argmax, deterministic_predict, mc_dropout_predict, mc_predict, PredictionSet, UncertaintyMetric,
    DEFAULT_MC_PASSES,
};

/// The configuration that ships with the crate.
pub const BUNDLED_CONFIG: &str = include_str!("../examples/synthetic.cfg");

const SEED_STREAM: u64 = 0xC0DE;
const PREDICT_STREAM: u64 = 0x9E0D;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Unseen classes generated for the OOD set; 0 disables it.
    #[serde(default)]
    pub ood_classes: usize,
    pub modalities: Vec<SynthModality>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Existing dataset directory; relative paths resolve against the config file.
    pub dataset: Option<PathBuf>,
    pub ood: Option<PathBuf>,
    pub synthetic: Option<SynthConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub stratified: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train: 0.6, val: 0.2, test: 0.2, stratified: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Widths of the two hidden layers.
    pub hidden: [usize; 2],
    pub prior_sigma: f64,
    /// Dropout rate of the MC-dropout baseline.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: [64, 32], prior_sigma: 1.0, dropout: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub mc_passes: usize,
    pub metric: UncertaintyMetric,
    pub mode: ComparisonMode,
    pub histogram_bins: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            mc_passes: DEFAULT_MC_PASSES,
            metric: UncertaintyMetric::Bald,
            mode: ComparisonMode::Raw,
            histogram_bins: DEFAULT_HISTOGRAM_BINS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub model: ModelConfig,
    /// `seed` here is ignored: per-head seeds derive from the global seed.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
}

impl ExperimentConfig {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_CONFIG).expect("bundled config parses")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file, resolving relative data paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::parse(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.dataset, &mut cfg.data.ood, &mut cfg.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.dataset.is_none() && self.data.synthetic.is_none() {
            return Err(Error::Config("set either data.dataset or data.synthetic".into()));
        }
        if self.data.dataset.is_some() && self.data.synthetic.is_some() {
            return Err(Error::Config("data.dataset and data.synthetic are mutually exclusive".into()));
        }
        if let Some(s) = &self.data.synthetic {
            if s.modalities.len() < 2 {
                return Err(Error::Config("fusion needs at least two modalities".into()));
            }
            self.synth_spec(s).validate()?;
        }
        self.split_spec().validate()?;
        if self.model.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be >= 1".into()));
        }
        if !(self.model.prior_sigma > 0.0) {
            return Err(Error::Config("prior_sigma must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if self.inference.mc_passes == 0 || self.inference.histogram_bins == 0 {
            return Err(Error::Config("mc_passes and histogram_bins must be >= 1".into()));
        }
        self.train.validate()
    }

    fn synth_spec(&self, s: &SynthConfig) -> SynthSpec {
        SynthSpec {
            num_classes: s.num_classes,
            samples_per_class: s.samples_per_class,
            modalities: s.modalities.clone(),
            seed: self.seed,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train_frac: self.split.train,
            val_frac: self.split.val,
            test_frac: self.split.test,
            seed: self.seed,
            stratified: self.split.stratified,
        }
    }
}

/// The three heads compared throughout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    /// Mean-field variational head.
    Vi,
    /// Deterministic head with dropout kept on at test time.
    McDropout,
    /// Deterministic head without dropout, single softmax pass.
    Dnn,
}

impl Model {
    pub const ALL: [Model; 3] = [Model::Vi, Model::McDropout, Model::Dnn];
    /// Models with a meaningful epistemic uncertainty, which go through AvU and gating.
    pub const STOCHASTIC: [Model; 2] = [Model::Vi, Model::McDropout];

    pub fn as_str(self) -> &'static str {
        match self {
            Model::Vi => "vi",
            Model::McDropout => "mcdropout",
            Model::Dnn => "dnn",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Model {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Model::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown model `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Val,
    Test,
    Ood,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Val => "val",
            Split::Test => "test",
            Split::Ood => "ood",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub model: String,
    pub source: String,
    pub top1: f64,
    pub top5: f64,
    pub pr_auc: f64,
    pub roc_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConfidenceRow {
    pub model: String,
    pub source: String,
    pub n_correct: usize,
    pub n_incorrect: usize,
    pub mean_conf_correct: f64,
    pub mean_conf_incorrect: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeparationRow {
    pub model: String,
    pub modality: String,
    pub metric: String,
    pub mean_in: f64,
    pub mean_out: f64,
    pub median_in: f64,
    pub median_out: f64,
    pub auroc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecisionRow {
    pub tag: String,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalSummary {
    pub table: Vec<MetricRow>,
    pub confidence: Vec<ConfidenceRow>,
}

impl EvalSummary {
    pub fn metric(&self, model: Model, source: &str) -> Option<&MetricRow> {
        self.table.iter().find(|r| r.model == model.as_str() && r.source == source)
    }

    pub fn confidence(&self, model: Model, source: &str) -> Option<&ConfidenceRow> {
        self.confidence.iter().find(|r| r.model == model.as_str() && r.source == source)
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn require(path: PathBuf, command: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Prerequisite { path, command })
    }
}

/// A config bound to an output directory.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub out: PathBuf,
}

impl Experiment {
    /// `out` overrides the config's output directory (default `runs`).
    pub fn new(config: ExperimentConfig, out: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        let out = out
            .or_else(|| config.out.clone())
            .unwrap_or_else(|| PathBuf::from("runs"));
        Ok(Self { config, out })
    }

    fn dir(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn dataset_dir(&self) -> PathBuf {
        self.config.data.dataset.clone().unwrap_or_else(|| self.dir("data").join("dataset"))
    }

    fn ood_dir(&self) -> Option<PathBuf> {
        match (&self.config.data.ood, &self.config.data.synthetic) {
            (Some(p), _) => Some(p.clone()),
            (None, Some(s)) if s.ood_classes > 0 => Some(self.dir("data").join("ood")),
            _ => None,
        }
    }

    pub fn checkpoint_path(&self, model: Model, modality: &str) -> PathBuf {
        self.dir("models").join(format!("{model}_{modality}.bayh"))
    }

    fn prediction_stem(model: Model, modality: &str, split: Split) -> String {
        format!("{model}_{modality}_{}", split.as_str())
    }

    fn policy_path(&self, model: Model) -> PathBuf {
        self.dir("avu").join(format!("{model}_policy.json"))
    }

    fn load_data(&self) -> Result<MultimodalDataset> {
        let dir = self.dataset_dir();
        require(dir.join("manifest.json"), "gen-synth")?;
        load_dataset(&dir)
    }

    fn load_ood(&self) -> Result<Option<MultimodalDataset>> {
        match self.ood_dir() {
            Some(dir) => {
                require(dir.join("manifest.json"), "gen-synth")?;
                Ok(Some(load_dataset(&dir)?))
            }
            None => Ok(None),
        }
    }

    fn splits(&self) -> Result<(MultimodalDataset, MultimodalDataset, MultimodalDataset)> {
        split(&self.load_data()?, &self.config.split_spec())
    }

    fn derived_seed(&self, path: &[u64]) -> u64 {
        RngStream::new(self.config.seed, SEED_STREAM).derive(path).next_u64()
    }

    fn modality_names(&self) -> Result<Vec<String>> {
        let ds = self.load_data()?;
        Ok(ds.modalities().iter().map(|m| m.name.clone()).collect())
    }

    pub fn read_predictions(&self, model: Model, modality: &str, split: Split) -> Result<PredictionSet> {
        let dir = self.dir("predictions");
        let stem = Self::prediction_stem(model, modality, split);
        require(PredictionSet::csv_path(&dir, &stem), "predict")?;
        PredictionSet::read(&dir, &stem)
    }

    pub fn read_policy(&self, model: Model) -> Result<FusionPolicy> {
        FusionPolicy::load(&require(self.policy_path(model), "avu")?)
    }

    /// Generates the synthetic dataset (and OOD set) into `data/`.
    pub fn gen_synth(&self) -> Result<()> {
        let s = self.config.data.synthetic.as_ref().ok_or_else(|| {
            Error::Config("gen-synth needs a [data.synthetic] section; this config points at an existing dataset".into())
        })?;
        let spec = self.config.synth_spec(s);
        save_dataset(&generate_synthetic(&spec)?, &self.dir("data").join("dataset"))?;
        if s.ood_classes > 0 {
            save_dataset(&generate_synthetic_ood(&spec, s.ood_classes)?, &self.dir("data").join("ood"))?;
        }
        Ok(())
    }

    /// Trains every model on every modality.
    pub fn train(&self) -> Result<()> {
        let (train, val, _) = self.splits()?;
        let dir = self.dir("models");
        fs::create_dir_all(&dir)?;
        let k = train.num_classes();
        let [h1, h2] = self.config.model.hidden;
        for (mi, info) in train.modalities().iter().enumerate() {
            let dims = [info.dim, h1, h2, k];
            let (tx, vx) = (train.features(mi), val.features(mi));
            for model in Model::ALL {
                let mut cfg = self.config.train.clone();
                cfg.seed = self.derived_seed(&[0, model.index(), mi as u64]);
                let init_seed = self.derived_seed(&[1, model.index(), mi as u64]);
                let (head, history) = match model {
                    Model::Vi => {
                        let h = init_variational_head(&dims, init_seed, self.config.model.prior_sigma)?;
                        let (h, hist) = train_variational(h, tx, train.labels(), vx, val.labels(), &cfg)?;
                        (Head::Variational(h), hist)
                    }
                    Model::McDropout | Model::Dnn => {
                        let p = if model == Model::Dnn { 0.0 } else { self.config.model.dropout };
                        let h = init_deterministic_head(&dims, init_seed, p)?;
                        let (h, hist) = train_deterministic(h, tx, train.labels(), vx, val.labels(), &cfg)?;
                        (Head::Deterministic(h), hist)
                    }
                };
                let path = self.checkpoint_path(model, &info.name);
                history.write_csv(&path.with_file_name(format!("{model}_{}_history.csv", info.name)))?;
                save_checkpoint(
                    &Checkpoint {
                        head,
                        meta: CheckpointMeta {
                            epoch: history.best_epoch,
                            best_val_loss: history.best_val_loss(),
                            modality: Some(info.name.clone()),
                            ..Default::default()
                        },
                    },
                    &path,
                )?;
            }
        }
        Ok(())
    }

    fn predict_one(&self, model: Model, mi: usize, name: &str, ds: &MultimodalDataset, split: Split) -> Result<PredictionSet> {
        let path = require(self.checkpoint_path(model, name), "train")?;
        let x = ds.features(mi);
        let stream = RngStream::new(self.config.seed, PREDICT_STREAM).derive(&[
            model.index(),
            mi as u64,
            split as u64,
        ]);
        let t = self.config.inference.mc_passes;
        let dists = match model {
            Model::Vi => mc_predict(&load_variational(&path)?.0, x, t, &stream)?,
            Model::McDropout => mc_dropout_predict(&load_deterministic(&path)?.0, x, t, &stream)?,
            Model::Dnn => deterministic_predict(&load_deterministic(&path)?.0, x)?,
        };
        PredictionSet::new(ds.ids().to_vec(), ds.labels().to_vec(), dists)
    }

    /// Writes prediction dumps for validation, test and (if present) OOD data.
    pub fn predict(&self) -> Result<()> {
        let (_, val, test) = self.splits()?;
        let ood = self.load_ood()?;
        let dir = self.dir("predictions");
        let mut sets = vec![(Split::Val, &val), (Split::Test, &test)];
        if let Some(o) = &ood {
            sets.push((Split::Ood, o));
        }
        for (mi, info) in val.modalities().iter().enumerate() {
            for model in Model::ALL {
                for (split, ds) in &sets {
                    let preds = self.predict_one(model, mi, &info.name, ds, *split)?;
                    preds.write(&dir, &Self::prediction_stem(model, &info.name, *split))?;
                }
            }
        }
        Ok(())
    }

    /// Fits per-modality AvU thresholds on validation predictions.
    pub fn avu(&self) -> Result<Vec<(Model, FusionPolicy)>> {
        let names = self.modality_names()?;
        let dir = self.dir("avu");
        fs::create_dir_all(&dir)?;
        let mut out = Vec::new();
        for model in Model::STOCHASTIC {
            let sets = names
                .iter()
                .map(|n| self.read_predictions(model, n, Split::Val))
                .collect::<Result<Vec<_>>>()?;
            let named: Vec<(&str, &PredictionSet)> = names.iter().map(String::as_str).zip(&sets).collect();
            let (policy, fits) = fit_fusion_policy(&named, self.config.inference.metric, self.config.inference.mode)?;
            for (n, fit) in names.iter().zip(&fits) {
                fit.write_curve_csv(&dir.join(format!("{model}_{n}_curve.csv")))?;
            }
            policy.save(&self.policy_path(model))?;
            out.push((model, policy));
        }
        Ok(out)
    }

    fn test_sets(&self, model: Model, names: &[String]) -> Result<Vec<PredictionSet>> {
        names.iter().map(|n| self.read_predictions(model, n, Split::Test)).collect()
    }

    fn metric_row(model: Model, source: &str, probs: &[Vec<f64>], labels: &[usize]) -> Result<MetricRow> {
        let k = probs.first().map_or(1, Vec::len);
        Ok(MetricRow {
            model: model.to_string(),
            source: source.to_string(),
            top1: topk_accuracy(probs, labels, 1)?,
            top5: topk_accuracy(probs, labels, k.min(5))?,
            pr_auc: micro_pr_curve(probs, labels)?.auc,
            roc_auc: micro_roc_curve(probs, labels)?.auc,
        })
    }

    /// Per-source fused and single-modality probabilities on the test split.
    fn sources(&self, model: Model, names: &[String], sets: &[PredictionSet]) -> Result<Vec<(String, Vec<Vec<f64>>)>> {
        let refs: Vec<&PredictionSet> = sets.iter().collect();
        let mut out: Vec<(String, Vec<Vec<f64>>)> =
            names.iter().cloned().zip(sets.iter().map(PredictionSet::means)).collect();
        out.push(("average".into(), average_sets(&refs)?));
        if Model::STOCHASTIC.contains(&model) {
            out.push(("gated".into(), fuse_sets(&refs, &self.read_policy(model)?)?.probs()));
        }
        Ok(out)
    }

    /// Applies the fitted policies to the test split.
    pub fn fuse(&self) -> Result<Vec<MetricRow>> {
        let names = self.modality_names()?;
        let dir = self.dir("fusion");
        fs::create_dir_all(&dir)?;
        let mut all = Vec::new();
        for model in Model::STOCHASTIC {
            let policy = self.read_policy(model)?;
            let sets = self.test_sets(model, &names)?;
            let refs: Vec<&PredictionSet> = sets.iter().collect();
            let fused = fuse_sets(&refs, &policy)?;
            fused.write_report(&policy, &dir.join(format!("{model}_report.csv")))?;

            let mut decisions: Vec<DecisionRow> = std::iter::once("averaged".to_string())
                .chain(policy.modalities.iter().cloned())
                .map(|tag| DecisionRow { tag, count: 0 })
                .collect();
            for o in &fused.outcomes {
                let tag = o.tag(&policy);
                decisions.iter_mut().find(|d| d.tag == tag).expect("known tag").count += 1;
            }
            write_rows(&dir.join(format!("{model}_decisions.csv")), &decisions)?;

            let labels = &sets[0].labels;
            let rows = self
                .sources(model, &names, &sets)?
                .iter()
                .map(|(src, probs)| Self::metric_row(model, src, probs, labels))
                .collect::<Result<Vec<_>>>()?;
            write_rows(&dir.join(format!("{model}_metrics.csv")), &rows)?;
            all.extend(rows);
        }
        Ok(all)
    }

    /// Uncertainty of test (in-distribution) vs OOD samples, per model and modality.
    pub fn ood(&self) -> Result<Vec<SeparationRow>> {
        if self.ood_dir().is_none() {
            return Err(Error::Config("no OOD set configured (data.ood or data.synthetic.ood_classes)".into()));
        }
        let names = self.modality_names()?;
        let dir = self.dir("ood");
        let k = self.load_data()?.num_classes();
        let bins = self.config.inference.histogram_bins;
        fs::create_dir_all(dir.join("hist"))?;
        let mut rows = Vec::new();
        for model in Model::ALL {
            for n in &names {
                let test = self.read_predictions(model, n, Split::Test)?;
                let ood = self.read_predictions(model, n, Split::Ood)?;
                for metric in [UncertaintyMetric::Bald, UncertaintyMetric::Entropy] {
                    let (u_in, u_out) = (test.uncertainties(metric), ood.uncertainties(metric));
                    let s = ood_separation(&u_in, &u_out)?;
                    for (tag, u) in [("in", &u_in), ("out", &u_out)] {
                        density_histogram(u, bins, (0.0, (k as f64).ln()))?
                            .write_csv(&dir.join("hist").join(format!("{model}_{n}_{metric}_{tag}.csv")))?;
                    }
                    rows.push(SeparationRow {
                        model: model.to_string(),
                        modality: n.clone(),
                        metric: metric.to_string(),
                        mean_in: s.mean_in,
                        mean_out: s.mean_out,
                        median_in: s.median_in,
                        median_out: s.median_out,
                        auroc: s.auroc,
                    });
                }
            }
        }
        write_rows(&dir.join("separation.csv"), &rows)?;
        Ok(rows)
    }

    fn confidence_row(model: Model, source: &str, probs: &[Vec<f64>], labels: &[usize]) -> (ConfidenceRow, Vec<f64>, Vec<f64>) {
        let (mut right, mut wrong) = (Vec::new(), Vec::new());
        for (p, &y) in probs.iter().zip(labels) {
            let c = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if argmax(p) == y { right.push(c) } else { wrong.push(c) }
        }
        let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        let row = ConfidenceRow {
            model: model.to_string(),
            source: source.to_string(),
            n_correct: right.len(),
            n_incorrect: wrong.len(),
            mean_conf_correct: mean(&right),
            mean_conf_incorrect: mean(&wrong),
            gap: mean(&right) - mean(&wrong),
        };
        (row, right, wrong)
    }

    /// Comparison tables over all models on the test split.
    pub fn eval(&self) -> Result<EvalSummary> {
        let names = self.modality_names()?;
        for model in Model::STOCHASTIC {
            require(self.dir("fusion").join(format!("{model}_metrics.csv")), "fuse")?;
        }
        let dir = self.dir("eval");
        fs::create_dir_all(dir.join("curves"))?;
        fs::create_dir_all(dir.join("hist"))?;
        let bins = self.config.inference.histogram_bins;
        let mut summary = EvalSummary::default();
        for model in Model::ALL {
            let sets = self.test_sets(model, &names)?;
            let labels = &sets[0].labels;
            let mut sources = self.sources(model, &names, &sets)?;
            // All single-modality predictions together.
            let pooled: Vec<Vec<f64>> = sets.iter().flat_map(PredictionSet::means).collect();
            let pooled_labels: Vec<usize> = sets.iter().flat_map(|s| s.labels.iter().copied()).collect();
            for (src, probs) in &sources {
                summary.table.push(Self::metric_row(model, src, probs, labels)?);
                micro_pr_curve(probs, labels)?.write_csv(&dir.join("curves").join(format!("{model}_{src}_pr.csv")))?;
                micro_roc_curve(probs, labels)?.write_csv(&dir.join("curves").join(format!("{model}_{src}_roc.csv")))?;
            }
            sources.push(("pooled".into(), pooled));
            for (src, probs) in &sources {
                let y = if src == "pooled" { &pooled_labels } else { labels };
                let (row, right, wrong) = Self::confidence_row(model, src, probs, y);
                for (tag, v) in [("correct", right), ("incorrect", wrong)] {
                    if !v.is_empty() {
                        density_histogram(&v, bins, (0.0, 1.0))?
                            .write_csv(&dir.join("hist").join(format!("{model}_{src}_confidence_{tag}.csv")))?;
                    }
                }
                summary.confidence.push(row);
            }
        }
        write_rows(&dir.join("table.csv"), &summary.table)?;
        write_rows(&dir.join("confidence.csv"), &summary.confidence)?;
        Ok(summary)
    }

    /// Every stage in order.
    pub fn run_all(&self) -> Result<RunSummary> {
        if self.config.data.synthetic.is_some() {
            self.gen_synth()?;
        }
        self.train()?;
        self.predict()?;
        self.avu()?;
        let fusion = self.fuse()?;
        let separation = if self.ood_dir().is_some() { self.ood()? } else { Vec::new() };
        let eval = self.eval()?;
        Ok(RunSummary { fusion, separation, eval })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub fusion: Vec<MetricRow>,
    pub separation: Vec<SeparationRow>,
    pub eval: EvalSummary,
}

impl RunSummary {
    pub fn separation(&self, model: Model, modality: &str, metric: UncertaintyMetric) -> Option<&SeparationRow> {
        self.separation
            .iter()
            .find(|r| r.model == model.as_str() && r.modality == modality && r.metric == metric.as_str())
    }
}
