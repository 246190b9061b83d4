//! Monte Carlo predictive distributions, predictive entropy and BALD.
//!
//! All logarithms are natural, so entropies live in `[0, ln K]`.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::block::{read_block, write_block};
use crate::error::{Error, Result};
use crate::head::{forward_deterministic, DeterministicHead, DropoutMasks, VariationalHead};
use crate::tensor::{softmax_rows, Matrix, RngStream};

/// Default number of stochastic forward passes.
pub const DEFAULT_MC_PASSES: usize = 40;

const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// `T` sampled class distributions for one input and their average.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveDistribution {
    samples: Matrix,
    mean: Vec<f64>,
}

impl PredictiveDistribution {
    pub fn new(samples: Matrix) -> Result<Self> {
        if samples.rows() == 0 || samples.cols() == 0 {
            return Err(Error::Config("a predictive distribution needs T >= 1 and K >= 1".into()));
        }
        for (t, row) in samples.iter_rows().enumerate() {
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > ROW_SUM_TOLERANCE || row.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::Validation(format!(
                    "sample row {t} is not a distribution (sums to {total})"
                )));
            }
        }
        let mean = samples.column_means();
        Ok(Self { samples, mean })
    }

    pub fn samples(&self) -> &Matrix {
        &self.samples
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn passes(&self) -> usize {
        self.samples.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.samples.cols()
    }

    /// Max probability of the predictive mean.
    pub fn confidence(&self) -> f64 {
        self.mean.iter().copied().fold(0.0, f64::max)
    }

    pub fn top1(&self) -> usize {
        argmax(&self.mean)
    }
}

pub fn predictive_entropy(pred: &PredictiveDistribution) -> f64 {
    entropy(&pred.mean)
}

/// Predictive entropy minus the mean per-pass entropy, clamped at zero.
pub fn bald(pred: &PredictiveDistribution) -> f64 {
    let expected: f64 =
        pred.samples.iter_rows().map(entropy).sum::<f64>() / pred.passes() as f64;
    (predictive_entropy(pred) - expected).max(0.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UncertaintyMetric {
    #[default]
    Bald,
    Entropy,
}

impl UncertaintyMetric {
    pub fn evaluate(self, pred: &PredictiveDistribution) -> f64 {
        match self {
            UncertaintyMetric::Bald => bald(pred),
            UncertaintyMetric::Entropy => predictive_entropy(pred),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            UncertaintyMetric::Bald => "bald",
            UncertaintyMetric::Entropy => "entropy",
        }
    }
}

impl fmt::Display for UncertaintyMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UncertaintyMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bald" => Ok(UncertaintyMetric::Bald),
            "entropy" => Ok(UncertaintyMetric::Entropy),
            other => Err(Error::Config(format!("unknown uncertainty metric `{other}`"))),
        }
    }
}

/// Regroups `T` pass matrices (`N x K` each) into `N` distributions.
fn regroup(passes: Vec<Matrix>) -> Result<Vec<PredictiveDistribution>> {
    let t = passes.len();
    let (n, k) = passes[0].shape();
    (0..n)
        .map(|i| {
            let mut samples = Matrix::zeros(t, k);
            for (pass, m) in passes.iter().enumerate() {
                samples.row_mut(pass).copy_from_slice(m.row(i));
            }
            PredictiveDistribution::new(samples)
        })
        .collect()
}

fn check_passes(t: usize) -> Result<()> {
    if t == 0 {
        return Err(Error::Config("number of MC passes must be >= 1".into()));
    }
    Ok(())
}

/// `T` passes with weights drawn from the posterior. Pass `t` draws its
/// weights from `stream.child(t)` and applies them to every row, so a row's
/// distribution does not depend on which other rows share the call.
pub fn mc_predict(
    head: &VariationalHead,
    x: &Matrix,
    t: usize,
    stream: &RngStream,
) -> Result<Vec<PredictiveDistribution>> {
    check_passes(t)?;
    let passes = (0..t)
        .into_par_iter()
        .map(|pass| head.forward_sampled(x, &stream.child(pass as u64)))
        .collect::<Result<Vec<_>>>()?;
    regroup(passes)
}

/// `T` passes with dropout active. Row `r` of pass `t` draws its masks from
/// `stream.child(t)` keyed by `r`.
pub fn mc_dropout_predict(
    head: &DeterministicHead,
    x: &Matrix,
    t: usize,
    stream: &RngStream,
) -> Result<Vec<PredictiveDistribution>> {
    check_passes(t)?;
    let passes = (0..t)
        .into_par_iter()
        .map(|pass| {
            let masks = (head.dropout() > 0.0)
                .then(|| DropoutMasks::sample(head, x.rows(), &stream.child(pass as u64)));
            softmax_rows(&head.forward_traced(x, masks)?.0)
        })
        .collect::<Result<Vec<_>>>()?;
    regroup(passes)
}

/// Single dropout-free pass, wrapped as `T = 1` distributions.
pub fn deterministic_predict(head: &DeterministicHead, x: &Matrix) -> Result<Vec<PredictiveDistribution>> {
    let probs = forward_deterministic(head, x, false, &RngStream::new(0, 0))?;
    regroup(vec![probs])
}

/// Predictions for a labelled set, as exchanged between pipeline stages.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub dists: Vec<PredictiveDistribution>,
}

impl PredictionSet {
    pub fn new(ids: Vec<String>, labels: Vec<usize>, dists: Vec<PredictiveDistribution>) -> Result<Self> {
        if ids.len() != labels.len() || ids.len() != dists.len() {
            return Err(Error::Length(format!(
                "{} ids, {} labels, {} distributions",
                ids.len(),
                labels.len(),
                dists.len()
            )));
        }
        Ok(Self { ids, labels, dists })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn means(&self) -> Vec<Vec<f64>> {
        self.dists.iter().map(|d| d.mean().to_vec()).collect()
    }

    pub fn uncertainties(&self, metric: UncertaintyMetric) -> Vec<f64> {
        self.dists.iter().map(|d| metric.evaluate(d)).collect()
    }

    pub fn confidences(&self) -> Vec<f64> {
        self.dists.iter().map(|d| d.confidence()).collect()
    }

    pub fn csv_path(dir: &Path, stem: &str) -> PathBuf {
        dir.join(format!("{stem}.csv"))
    }

    pub fn samples_path(dir: &Path, stem: &str) -> PathBuf {
        dir.join(format!("{stem}.samples.bin"))
    }

    /// Writes `<stem>.csv` (`sample_id,label,pred_top1,confidence,entropy,bald`)
    /// and `<stem>.samples.bin`, an `(N*T) x K` tensor block, sample-major.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut f = std::io::BufWriter::new(fs::File::create(Self::csv_path(dir, stem))?);
        writeln!(f, "sample_id,label,pred_top1,confidence,entropy,bald")?;
        for ((id, &y), d) in self.ids.iter().zip(&self.labels).zip(&self.dists) {
            writeln!(
                f,
                "{id},{y},{},{},{},{}",
                d.top1(),
                d.confidence(),
                predictive_entropy(d),
                bald(d)
            )?;
        }
        f.flush()?;
        if let Some(first) = self.dists.first() {
            let (t, k) = first.samples().shape();
            let mut all = Matrix::zeros(self.len() * t, k);
            for (i, d) in self.dists.iter().enumerate() {
                if d.samples().shape() != (t, k) {
                    return Err(Error::Length("prediction sets need a common T and K".into()));
                }
                all.data_mut()[i * t * k..(i + 1) * t * k].copy_from_slice(d.samples().data());
            }
            write_block(&Self::samples_path(dir, stem), &all)?;
        }
        Ok(())
    }

    /// Reads a set written by [`write`](Self::write). Samples come back at
    /// f32 precision and are renormalised per row.
    pub fn read(dir: &Path, stem: &str) -> Result<Self> {
        let csv_path = Self::csv_path(dir, stem);
        let mut rdr = csv::Reader::from_path(&csv_path)?;
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            ids.push(rec.get(0).unwrap_or_default().to_string());
            let raw = rec.get(1).unwrap_or_default();
            labels.push(raw.parse().map_err(|_| Error::Parse {
                file: csv_path.display().to_string(),
                row: row + 1,
                col: 1,
                msg: format!("`{raw}` is not a label"),
            })?);
        }
        let block = read_block(&Self::samples_path(dir, stem))?;
        let n = ids.len();
        if n == 0 || block.rows() % n != 0 {
            return Err(Error::Length(format!(
                "{} sample rows cannot be split across {n} predictions",
                block.rows()
            )));
        }
        let t = block.rows() / n;
        let k = block.cols();
        let dists = (0..n)
            .map(|i| {
                let mut m = Matrix::from_vec(t, k, block.data()[i * t * k..(i + 1) * t * k].to_vec())?;
                for r in 0..t {
                    let row = m.row_mut(r);
                    let total: f64 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= total);
                }
                PredictiveDistribution::new(m)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(ids, labels, dists)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::{init_deterministic_head, init_variational_head};
    use crate::tensor::sample_gaussian;

    fn dist(rows: &[&[f64]]) -> PredictiveDistribution {
        PredictiveDistribution::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn entropy_examples() {
        assert!((predictive_entropy(&dist(&[&[0.25; 4]])) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(predictive_entropy(&dist(&[&[0.0, 1.0, 0.0]])), 0.0);
        assert!((predictive_entropy(&dist(&[&[0.5, 0.5, 0.0, 0.0]])) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bald_examples() {
        assert_eq!(bald(&dist(&[&[0.3, 0.7], &[0.3, 0.7]])), 0.0);
        assert!((bald(&dist(&[&[1.0, 0.0], &[0.0, 1.0]])) - 2f64.ln()).abs() < 1e-12);
        // ln 2 minus the binary entropy of 0.9.
        let h09 = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        let expected = 2f64.ln() - h09;
        let got = bald(&dist(&[&[0.9, 0.1], &[0.1, 0.9]]));
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.36807).abs() < 1e-5);
    }

    #[test]
    fn rejects_non_distributions() {
        assert!(PredictiveDistribution::new(Matrix::from_rows(&[[0.5, 0.6]]).unwrap()).is_err());
        assert!(PredictiveDistribution::new(Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn degenerate_posteriors_give_zero_bald() {
        let mut h = init_variational_head(&[4, 6, 6, 3], 1, 1.0).unwrap();
        h.set_sigma(1e-12);
        let x = sample_gaussian(&mut RngStream::new(2, 0), 3, 4);
        for d in mc_predict(&h, &x, 5, &RngStream::new(3, 0)).unwrap() {
            assert!(d.samples().max_abs_diff(&Matrix::from_rows(&[d.samples().row(0); 5]).unwrap()) < 1e-9);
            assert!(bald(&d) < 1e-9);
        }
        let mut dh = init_deterministic_head(&[4, 6, 6, 3], 1, 0.0).unwrap();
        for d in mc_dropout_predict(&dh, &x, 5, &RngStream::new(3, 0)).unwrap() {
            assert_eq!(bald(&d), 0.0);
            assert!((d.mean().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        dh.set_dropout(0.5).unwrap();
        let preds = mc_dropout_predict(&dh, &x, 40, &RngStream::new(3, 0)).unwrap();
        assert!(preds.iter().any(|d| bald(d) > 0.0));
        assert!(mc_predict(&h, &x, 0, &RngStream::new(3, 0)).is_err());
    }

    #[test]
    fn predictions_do_not_depend_on_batch_composition() {
        let h = init_variational_head(&[4, 6, 6, 3], 1, 1.0).unwrap();
        let x = sample_gaussian(&mut RngStream::new(2, 0), 5, 4);
        let s = RngStream::new(9, 9);
        let full = mc_predict(&h, &x, 8, &s).unwrap();
        let tail = mc_predict(&h, &x.select_rows(&[3, 4]), 8, &s).unwrap();
        assert_eq!(full[3], tail[0]);
        assert_eq!(full, mc_predict(&h, &x, 8, &s).unwrap());
    }

    #[test]
    fn prediction_set_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let set = PredictionSet::new(
            vec!["a".into(), "b".into()],
            vec![1, 0],
            vec![dist(&[&[0.25, 0.75], &[0.5, 0.5]]), dist(&[&[1.0, 0.0], &[0.125, 0.875]])],
        )
        .unwrap();
        set.write(dir.path(), "p").unwrap();
        let back = PredictionSet::read(dir.path(), "p").unwrap();
        assert_eq!(back, set);
        let text = fs::read_to_string(dir.path().join("p.csv")).unwrap();
        assert!(text.starts_with("sample_id,label,pred_top1,confidence,entropy,bald\na,1,1,"));
    }
}
