//! Multimodal embedding datasets: synthesis, CSV ingestion, splitting and the
//! on-disk directory format (`manifest.json` plus one tensor block per
//! modality).

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::block::{read_block, write_block};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, RngStream};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityInfo {
    pub name: String,
    pub dim: usize,
}

/// Labelled samples with one embedding per modality.
///
/// Features are stored column-wise by modality: `features[m]` is an
/// `N x dim_m` matrix whose row `i` belongs to sample `ids[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalDataset {
    modalities: Vec<ModalityInfo>,
    class_names: Vec<String>,
    ids: Vec<String>,
    labels: Vec<usize>,
    features: Vec<Matrix>,
}

impl MultimodalDataset {
    pub fn new(
        modalities: Vec<ModalityInfo>,
        class_names: Vec<String>,
        ids: Vec<String>,
        labels: Vec<usize>,
        features: Vec<Matrix>,
    ) -> Result<Self> {
        let ds = Self {
            modalities,
            class_names,
            ids,
            labels,
            features,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.class_names.len();
        if k == 0 {
            return Err(Error::Validation("dataset declares no classes".into()));
        }
        if self.modalities.is_empty() {
            return Err(Error::Validation("dataset declares no modalities".into()));
        }
        if self.features.len() != self.modalities.len() {
            return Err(Error::Validation(format!(
                "{} feature blocks for {} modalities",
                self.features.len(),
                self.modalities.len()
            )));
        }
        let n = self.ids.len();
        if self.labels.len() != n {
            return Err(Error::Validation(format!(
                "{} labels for {n} sample ids",
                self.labels.len()
            )));
        }
        for (info, feats) in self.modalities.iter().zip(&self.features) {
            if info.dim == 0 {
                return Err(Error::Validation(format!("modality `{}` has dim 0", info.name)));
            }
            if feats.shape() != (n, info.dim) {
                return Err(Error::Validation(format!(
                    "modality `{}` features are {:?}, expected ({n}, {})",
                    info.name,
                    feats.shape(),
                    info.dim
                )));
            }
            if !feats.is_finite() {
                return Err(Error::Validation(format!(
                    "modality `{}` contains non-finite features",
                    info.name
                )));
            }
        }
        if let Some((i, &y)) = self.labels.iter().enumerate().find(|(_, &y)| y >= k) {
            return Err(Error::Validation(format!(
                "sample `{}` has label {y}, but only {k} classes are declared",
                self.ids[i]
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &self.ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Validation(format!("duplicate sample id `{id}`")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn modalities(&self) -> &[ModalityInfo] {
        &self.modalities
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn modality_index(&self, name: &str) -> Result<usize> {
        self.modalities
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| Error::Config(format!("dataset has no modality `{name}`")))
    }

    pub fn features(&self, modality: usize) -> &Matrix {
        &self.features[modality]
    }

    pub fn features_by_name(&self, name: &str) -> Result<&Matrix> {
        Ok(&self.features[self.modality_index(name)?])
    }

    /// Subset in the given index order.
    pub fn subset(&self, indices: &[usize]) -> MultimodalDataset {
        MultimodalDataset {
            modalities: self.modalities.clone(),
            class_names: self.class_names.clone(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            features: self.features.iter().map(|f| f.select_rows(indices)).collect(),
        }
    }

    /// Rounds every feature through `f32`, i.e. what survives a save/load.
    pub fn quantized(&self) -> MultimodalDataset {
        let mut out = self.clone();
        for f in &mut out.features {
            *f = f.map(|v| v as f32 as f64);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthModality {
    pub name: String,
    pub dim: usize,
    /// Typical distance between two class means.
    pub separation: f64,
    /// Per-coordinate standard deviation around a class mean.
    pub noise: f64,
    /// Fraction of classes whose mean collides with a partner class.
    pub ambiguous_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub modalities: Vec<SynthModality>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "synthetic data needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be positive".into()));
        }
        if self.modalities.is_empty() {
            return Err(Error::Config("synthetic spec declares no modalities".into()));
        }
        for m in &self.modalities {
            if m.dim == 0 {
                return Err(Error::Config(format!("modality `{}`: dim must be > 0", m.name)));
            }
            if !(m.noise > 0.0) {
                return Err(Error::Config(format!("modality `{}`: noise must be > 0", m.name)));
            }
            if !(0.0..=1.0).contains(&m.ambiguous_fraction) {
                return Err(Error::Config(format!(
                    "modality `{}`: ambiguous_fraction must lie in [0, 1]",
                    m.name
                )));
            }
            if !m.separation.is_finite() || m.separation < 0.0 {
                return Err(Error::Config(format!(
                    "modality `{}`: separation must be finite and >= 0",
                    m.name
                )));
            }
        }
        Ok(())
    }

    /// Number of classes made ambiguous in modality `m`: the fraction of K,
    /// rounded down to an even count since ambiguous classes come in pairs.
    pub fn ambiguous_count(&self, m: usize) -> usize {
        let raw = (self.modalities[m].ambiguous_fraction * self.num_classes as f64).round() as usize;
        raw.min(self.num_classes) & !1
    }

    /// Ambiguous class pairs per modality. Within a pair `(a, b)` class `a`
    /// takes over the mean of its confuser `b`.
    ///
    /// Classes are drawn from one shuffled order and handed out to modalities
    /// in turn, so a class is ambiguous in at most one modality until the
    /// order is exhausted.
    pub fn ambiguous_pairs(&self) -> Vec<Vec<(usize, usize)>> {
        let mut stream = RngStream::new(self.seed, 0xA3B1);
        let mut order: Vec<usize> = (0..self.num_classes).collect();
        stream.shuffle(&mut order);
        let mut cursor = 0;
        (0..self.modalities.len())
            .map(|m| {
                let count = self.ambiguous_count(m);
                let chosen: Vec<usize> = (0..count)
                    .map(|i| order[(cursor + i) % self.num_classes])
                    .collect();
                cursor += count;
                chosen.chunks_exact(2).map(|p| (p[0], p[1])).collect()
            })
            .collect()
    }

    fn class_mean(&self, m: usize, class: usize) -> Vec<f64> {
        let spec = &self.modalities[m];
        let mut stream = RngStream::new(self.seed, 0x3EA5).derive(&[m as u64, class as u64]);
        let mut v = vec![0.0; spec.dim];
        stream.fill_gaussian(&mut v);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        // Random unit directions are close to orthogonal, so scaling by
        // separation/sqrt(2) puts class means about `separation` apart.
        let scale = spec.separation / std::f64::consts::SQRT_2 / norm;
        v.iter_mut().for_each(|x| *x *= scale);
        v
    }
}

/// Isotropic Gaussian clusters per class and modality, with mean collisions
/// for the ambiguous classes of each modality.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<MultimodalDataset> {
    spec.validate()?;
    let pairs = spec.ambiguous_pairs();
    let means: Vec<Vec<Vec<f64>>> = (0..spec.modalities.len())
        .map(|m| {
            let mut means: Vec<Vec<f64>> =
                (0..spec.num_classes).map(|c| spec.class_mean(m, c)).collect();
            for &(a, b) in &pairs[m] {
                means[a] = means[b].clone();
            }
            means
        })
        .collect();
    let class_names = (0..spec.num_classes).map(|c| format!("class_{c}")).collect();
    sample_clusters(spec, &means, class_names, "c", 0x5A3F)
}

/// Samples from `num_ood` further classes of the same generator, never seen
/// by a model trained on [`generate_synthetic`] output. Labels are local to
/// the OOD set (`0..num_ood`).
pub fn generate_synthetic_ood(spec: &SynthSpec, num_ood: usize) -> Result<MultimodalDataset> {
    spec.validate()?;
    if num_ood == 0 {
        return Err(Error::Config("num_ood must be positive".into()));
    }
    let k = spec.num_classes;
    let means: Vec<Vec<Vec<f64>>> = (0..spec.modalities.len())
        .map(|m| (k..k + num_ood).map(|c| spec.class_mean(m, c)).collect())
        .collect();
    let class_names = (0..num_ood).map(|c| format!("ood_{c}")).collect();
    sample_clusters(spec, &means, class_names, "ood", 0x00D5)
}

fn sample_clusters(
    spec: &SynthSpec,
    means: &[Vec<Vec<f64>>],
    class_names: Vec<String>,
    id_prefix: &str,
    salt: u64,
) -> Result<MultimodalDataset> {
    let k = class_names.len();
    let n = k * spec.samples_per_class;
    let mut ids = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for c in 0..k {
        for i in 0..spec.samples_per_class {
            ids.push(format!("{id_prefix}{c:03}_{i:05}"));
            labels.push(c);
        }
    }
    let mut features = Vec::with_capacity(spec.modalities.len());
    let mut modalities = Vec::with_capacity(spec.modalities.len());
    for (m, ms) in spec.modalities.iter().enumerate() {
        let mut feats = Matrix::zeros(n, ms.dim);
        for (row, &c) in labels.iter().enumerate() {
            let mut stream = RngStream::new(spec.seed, salt).derive(&[m as u64, row as u64]);
            let out = feats.row_mut(row);
            stream.fill_gaussian(out);
            for (v, mu) in out.iter_mut().zip(&means[m][c]) {
                *v = mu + ms.noise * *v;
            }
        }
        features.push(feats);
        modalities.push(ModalityInfo {
            name: ms.name.clone(),
            dim: ms.dim,
        });
    }
    MultimodalDataset::new(modalities, class_names, ids, labels, features)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train_frac, self.val_frac, self.test_frac];
        if fracs.iter().any(|f| !(*f > 0.0)) {
            return Err(Error::Config(format!("split fractions must be positive: {fracs:?}")));
        }
        let total: f64 = fracs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {total}, not 1")));
        }
        Ok(())
    }
}

/// Train/val/test partition. Stratified mode splits every class separately.
pub fn split(
    ds: &MultimodalDataset,
    spec: &SplitSpec,
) -> Result<(MultimodalDataset, MultimodalDataset, MultimodalDataset)> {
    spec.validate()?;
    let mut stream = RngStream::new(spec.seed, 0x5B17);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let mut assign = |mut idx: Vec<usize>, stream: &mut RngStream| {
        stream.shuffle(&mut idx);
        let n = idx.len();
        let n_train = ((spec.train_frac * n as f64).round() as usize).min(n);
        let n_val = ((spec.val_frac * n as f64).round() as usize).min(n - n_train);
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..n_train + n_val]);
        test.extend_from_slice(&idx[n_train + n_val..]);
    };
    if spec.stratified {
        let mut by_class = vec![Vec::new(); ds.num_classes()];
        for (i, &y) in ds.labels().iter().enumerate() {
            by_class[y].push(i);
        }
        for (c, idx) in by_class.iter().enumerate() {
            if !idx.is_empty() && idx.len() < 3 {
                return Err(Error::Config(format!(
                    "stratified split needs >= 3 samples per class; class {c} has {}",
                    idx.len()
                )));
            }
        }
        for idx in by_class {
            assign(idx, &mut stream);
        }
    } else {
        assign((0..ds.len()).collect(), &mut stream);
    }
    // Keep the original relative order inside each split.
    for part in [&mut train, &mut val, &mut test] {
        part.sort_unstable();
    }
    Ok((ds.subset(&train), ds.subset(&val), ds.subset(&test)))
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    num_classes: usize,
    class_names: Vec<String>,
    modalities: Vec<ManifestModality>,
    samples: Vec<ManifestSample>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestModality {
    name: String,
    dim: usize,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSample {
    id: String,
    label: usize,
}

pub fn save_dataset(ds: &MultimodalDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        num_classes: ds.num_classes(),
        class_names: ds.class_names.clone(),
        modalities: ds
            .modalities
            .iter()
            .map(|m| ManifestModality {
                name: m.name.clone(),
                dim: m.dim,
                file: format!("{}.bin", m.name),
            })
            .collect(),
        samples: ds
            .ids
            .iter()
            .zip(&ds.labels)
            .map(|(id, &label)| ManifestSample {
                id: id.clone(),
                label,
            })
            .collect(),
    };
    for (m, feats) in manifest.modalities.iter().zip(&ds.features) {
        write_block(&dir.join(&m.file), feats)?;
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<MultimodalDataset> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset format_version {}",
            manifest.format_version
        )));
    }
    if manifest.class_names.len() != manifest.num_classes {
        return Err(Error::Validation(format!(
            "manifest lists {} class names for num_classes {}",
            manifest.class_names.len(),
            manifest.num_classes
        )));
    }
    let n = manifest.samples.len();
    let mut features = Vec::with_capacity(manifest.modalities.len());
    for m in &manifest.modalities {
        let block = read_block(&dir.join(&m.file))?;
        if block.shape() != (n, m.dim) {
            return Err(Error::Length(format!(
                "{}: manifest expects {n}x{}, tensor block holds {}x{}",
                m.file,
                m.dim,
                block.rows(),
                block.cols()
            )));
        }
        features.push(block);
    }
    MultimodalDataset::new(
        manifest
            .modalities
            .into_iter()
            .map(|m| ModalityInfo {
                name: m.name,
                dim: m.dim,
            })
            .collect(),
        manifest.class_names,
        manifest.samples.iter().map(|s| s.id.clone()).collect(),
        manifest.samples.iter().map(|s| s.label).collect(),
        features,
    )
}

/// Joins per-modality feature CSVs (`sample_id,f0,f1,...`) with a label CSV
/// (`sample_id,label`). Samples follow the label file order.
pub fn import_csv(
    modalities: &[(&str, &Path)],
    labels_path: &Path,
    num_classes: usize,
) -> Result<MultimodalDataset> {
    let label_name = labels_path.display().to_string();
    let mut rdr = csv::Reader::from_path(labels_path)?;
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or_default().to_string();
        let raw = rec.get(1).ok_or_else(|| Error::Parse {
            file: label_name.clone(),
            row: row + 1,
            col: 1,
            msg: "missing label column".into(),
        })?;
        let label: usize = raw.trim().parse().map_err(|_| Error::Parse {
            file: label_name.clone(),
            row: row + 1,
            col: 1,
            msg: format!("`{raw}` is not a class index"),
        })?;
        ids.push(id);
        labels.push(label);
    }

    let mut infos = Vec::new();
    let mut features = Vec::new();
    for &(name, path) in modalities {
        let file = path.display().to_string();
        let mut rdr = csv::Reader::from_path(path)?;
        let dim = rdr.headers()?.len().saturating_sub(1);
        let mut rows: HashMap<String, Vec<f64>> = HashMap::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let id = rec.get(0).unwrap_or_default().to_string();
            let mut values = Vec::with_capacity(dim);
            for col in 1..rec.len() {
                let cell = &rec[col];
                let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                    file: file.clone(),
                    row: row + 1,
                    col,
                    msg: format!("`{cell}` is not numeric"),
                })?;
                values.push(v);
            }
            if values.len() != dim {
                return Err(Error::Parse {
                    file: file.clone(),
                    row: row + 1,
                    col: values.len() + 1,
                    msg: format!("expected {dim} features"),
                });
            }
            rows.insert(id, values);
        }
        let missing: Vec<String> = ids.iter().filter(|id| !rows.contains_key(*id)).cloned().collect();
        if !missing.is_empty() {
            return Err(Error::Join {
                modality: name.to_string(),
                ids: missing,
            });
        }
        let mut feats = Matrix::zeros(ids.len(), dim);
        for (i, id) in ids.iter().enumerate() {
            feats.row_mut(i).copy_from_slice(&rows[id]);
        }
        infos.push(ModalityInfo {
            name: name.to_string(),
            dim,
        });
        features.push(feats);
    }
    let class_names = (0..num_classes).map(|c| format!("class_{c}")).collect();
    MultimodalDataset::new(infos, class_names, ids, labels, features)
}
