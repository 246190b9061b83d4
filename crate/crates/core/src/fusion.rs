//! Accuracy-vs-uncertainty (AvU) tabulation, threshold search and the
//! uncertainty-gated late fusion rule.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::uncertainty::{argmax, PredictionSet, UncertaintyMetric};

/// Accurate/inaccurate x certain/uncertain counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvUCounts {
    pub n_ac: usize,
    pub n_au: usize,
    pub n_ic: usize,
    pub n_iu: usize,
}

impl AvUCounts {
    pub fn total(&self) -> usize {
        self.n_ac + self.n_au + self.n_ic + self.n_iu
    }
}

fn check_lengths(means: usize, labels: usize, uncertainties: usize) -> Result<()> {
    if means != labels || means != uncertainties {
        return Err(Error::Length(format!(
            "{means} predictions, {labels} labels, {uncertainties} uncertainties"
        )));
    }
    Ok(())
}

/// A sample is accurate when its top-1 class is the label and certain when
/// its uncertainty is at most `threshold`.
pub fn avu_counts<M: AsRef<[f64]>>(
    means: &[M],
    labels: &[usize],
    uncertainties: &[f64],
    threshold: f64,
) -> Result<AvUCounts> {
    check_lengths(means.len(), labels.len(), uncertainties.len())?;
    let mut c = AvUCounts::default();
    for ((m, &y), &u) in means.iter().zip(labels).zip(uncertainties) {
        let accurate = argmax(m.as_ref()) == y;
        let certain = u <= threshold;
        match (accurate, certain) {
            (true, true) => c.n_ac += 1,
            (true, false) => c.n_au += 1,
            (false, true) => c.n_ic += 1,
            (false, false) => c.n_iu += 1,
        }
    }
    Ok(c)
}

/// `(n_ac + n_iu) / total`.
pub fn avu(counts: &AvUCounts) -> Result<f64> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::Validation("AvU of an empty confusion matrix".into()));
    }
    Ok((counts.n_ac + counts.n_iu) as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvUPoint {
    pub threshold: f64,
    pub avu: f64,
    pub counts: AvUCounts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdFit {
    pub threshold: f64,
    pub avu: f64,
    pub curve: Vec<AvUPoint>,
    /// All uncertainties were identical, so only the above-max candidate exists.
    pub degenerate: bool,
}

impl ThresholdFit {
    pub fn write_curve_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(f, "threshold,avu,n_ac,n_au,n_ic,n_iu")?;
        for p in &self.curve {
            let c = p.counts;
            writeln!(f, "{},{},{},{},{},{}", p.threshold, p.avu, c.n_ac, c.n_au, c.n_ic, c.n_iu)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Candidate thresholds: one below the smallest uncertainty (when that can
/// stay nonnegative), midpoints between consecutive distinct values, and one
/// above the largest.
pub fn threshold_candidates(uncertainties: &[f64]) -> (Vec<f64>, bool) {
    let mut v: Vec<f64> = uncertainties.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    let (lo, hi) = (v[0], v[v.len() - 1]);
    if v.len() == 1 {
        return (vec![hi + (0.5 * hi.abs()).max(1e-6)], true);
    }
    let half_gap = 0.5 * (hi - lo) / (v.len() - 1) as f64;
    let mut out = Vec::with_capacity(v.len() + 1);
    if lo > 0.0 {
        out.push((lo - half_gap).max(0.5 * lo));
    }
    out.extend(v.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    out.push(hi + half_gap);
    (out, false)
}

/// Scans every candidate threshold and keeps the lowest one with maximal AvU.
pub fn optimal_threshold<M: AsRef<[f64]>>(
    means: &[M],
    labels: &[usize],
    uncertainties: &[f64],
) -> Result<ThresholdFit> {
    check_lengths(means.len(), labels.len(), uncertainties.len())?;
    if means.len() < 2 {
        return Err(Error::Validation("threshold search needs at least 2 samples".into()));
    }
    if uncertainties.iter().any(|u| !u.is_finite()) {
        return Err(Error::Numeric("non-finite uncertainty".into()));
    }
    let accurate: Vec<bool> = means
        .iter()
        .zip(labels)
        .map(|(m, &y)| argmax(m.as_ref()) == y)
        .collect();
    let (candidates, degenerate) = threshold_candidates(uncertainties);

    // Sweep in ascending order: sort samples by uncertainty once and move
    // them from "uncertain" to "certain" as the threshold passes them.
    let mut order: Vec<usize> = (0..uncertainties.len()).collect();
    order.sort_by(|&a, &b| uncertainties[a].total_cmp(&uncertainties[b]));
    let n_acc = accurate.iter().filter(|&&a| a).count();
    let mut counts = AvUCounts {
        n_ac: 0,
        n_au: n_acc,
        n_ic: 0,
        n_iu: accurate.len() - n_acc,
    };
    let mut next = 0;
    let mut curve = Vec::with_capacity(candidates.len());
    for &th in &candidates {
        while next < order.len() && uncertainties[order[next]] <= th {
            if accurate[order[next]] {
                counts.n_au -= 1;
                counts.n_ac += 1;
            } else {
                counts.n_iu -= 1;
                counts.n_ic += 1;
            }
            next += 1;
        }
        curve.push(AvUPoint {
            threshold: th,
            avu: avu(&counts)?,
            counts,
        });
    }
    let best = curve
        .iter()
        .enumerate()
        .fold(0, |best, (i, p)| if p.avu > curve[best].avu { i } else { best });
    Ok(ThresholdFit {
        threshold: curve[best].threshold,
        avu: curve[best].avu,
        curve,
        degenerate,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComparisonMode {
    /// Compare raw uncertainties across modalities.
    #[default]
    Raw,
    /// Compare `u / threshold` per modality.
    Normalized,
}

impl FromStr for ComparisonMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(ComparisonMode::Raw),
            "normalized" => Ok(ComparisonMode::Normalized),
            other => Err(Error::Config(format!("unknown comparison mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionPolicy {
    pub metric: UncertaintyMetric,
    pub mode: ComparisonMode,
    /// Modality names; their order is the tie-break order.
    pub modalities: Vec<String>,
    pub thresholds: Vec<f64>,
}

impl FusionPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.modalities.len() != self.thresholds.len() {
            return Err(Error::Config(format!(
                "{} modalities but {} thresholds",
                self.modalities.len(),
                self.thresholds.len()
            )));
        }
        if self.thresholds.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::Config("fusion thresholds must be >= 0".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: FusionPolicy = serde_json::from_str(&fs::read_to_string(path)?)?;
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionDecision {
    Averaged,
    /// Index into the policy's modality list.
    Single(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutcome {
    pub probs: Vec<f64>,
    pub decision: FusionDecision,
}

impl FusionOutcome {
    pub fn tag<'a>(&self, policy: &'a FusionPolicy) -> &'a str {
        match self.decision {
            FusionDecision::Averaged => "averaged",
            FusionDecision::Single(m) => &policy.modalities[m],
        }
    }
}

impl fmt::Display for FusionDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionDecision::Averaged => f.write_str("averaged"),
            FusionDecision::Single(m) => write!(f, "modality {m}"),
        }
    }
}

/// Elementwise mean of the per-modality distributions.
pub fn average_pool<M: AsRef<[f64]>>(means: &[M]) -> Result<Vec<f64>> {
    let k = means.first().map(|m| m.as_ref().len()).unwrap_or(0);
    if k == 0 || means.iter().any(|m| m.as_ref().len() != k) {
        return Err(Error::Length("modalities disagree on the number of classes".into()));
    }
    let w = 1.0 / means.len() as f64;
    let mut out = vec![0.0; k];
    for m in means {
        for (o, v) in out.iter_mut().zip(m.as_ref()) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Averages the modalities when every one is at or below its threshold;
/// otherwise returns the modality with the smallest comparison value.
pub fn fuse<M: AsRef<[f64]>>(
    means: &[M],
    uncertainties: &[f64],
    policy: &FusionPolicy,
) -> Result<FusionOutcome> {
    if means.len() < 2 {
        return Err(Error::Config("fusion needs at least two modalities".into()));
    }
    if means.len() != uncertainties.len() || means.len() != policy.thresholds.len() {
        return Err(Error::Length(format!(
            "{} modalities, {} uncertainties, {} thresholds",
            means.len(),
            uncertainties.len(),
            policy.thresholds.len()
        )));
    }
    let averaged = average_pool(means)?;
    let all_certain = uncertainties
        .iter()
        .zip(&policy.thresholds)
        .all(|(u, th)| u <= th);
    if all_certain {
        return Ok(FusionOutcome {
            probs: averaged,
            decision: FusionDecision::Averaged,
        });
    }
    let score = |m: usize| match policy.mode {
        ComparisonMode::Raw => uncertainties[m],
        ComparisonMode::Normalized => {
            let th = policy.thresholds[m];
            if th > 0.0 {
                uncertainties[m] / th
            } else if uncertainties[m] > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        }
    };
    let pick = (1..means.len()).fold(0, |best, m| if score(m) < score(best) { m } else { best });
    Ok(FusionOutcome {
        probs: means[pick].as_ref().to_vec(),
        decision: FusionDecision::Single(pick),
    })
}

/// Fits one AvU-optimal threshold per modality on validation predictions.
pub fn fit_fusion_policy(
    val: &[(&str, &PredictionSet)],
    metric: UncertaintyMetric,
    mode: ComparisonMode,
) -> Result<(FusionPolicy, Vec<ThresholdFit>)> {
    let mut fits = Vec::with_capacity(val.len());
    for (_, set) in val {
        let u = set.uncertainties(metric);
        fits.push(optimal_threshold(&set.means(), &set.labels, &u)?);
    }
    let policy = FusionPolicy {
        metric,
        mode,
        modalities: val.iter().map(|(n, _)| n.to_string()).collect(),
        thresholds: fits.iter().map(|f| f.threshold).collect(),
    };
    Ok((policy, fits))
}

/// Per-sample fused outcomes for aligned prediction sets.
#[derive(Clone, Debug)]
pub struct FusedSet {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub outcomes: Vec<FusionOutcome>,
    /// `uncertainties[i][m]` for sample `i`, modality `m`.
    pub uncertainties: Vec<Vec<f64>>,
}

impl FusedSet {
    pub fn probs(&self) -> Vec<Vec<f64>> {
        self.outcomes.iter().map(|o| o.probs.clone()).collect()
    }

    pub fn write_report(&self, policy: &FusionPolicy, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        write!(f, "sample_id,tag")?;
        for m in &policy.modalities {
            write!(f, ",u_{m}")?;
        }
        writeln!(f, ",fused_top1,label")?;
        for (((id, o), u), y) in self.ids.iter().zip(&self.outcomes).zip(&self.uncertainties).zip(&self.labels) {
            write!(f, "{id},{}", o.tag(policy))?;
            for v in u {
                write!(f, ",{v}")?;
            }
            writeln!(f, ",{},{y}", argmax(&o.probs))?;
        }
        f.flush()?;
        Ok(())
    }
}

fn check_aligned(sets: &[&PredictionSet]) -> Result<()> {
    let first = sets.first().ok_or_else(|| Error::Config("no prediction sets".into()))?;
    for s in sets {
        if s.ids != first.ids || s.labels != first.labels {
            return Err(Error::Validation(
                "prediction sets cover different samples or labels".into(),
            ));
        }
    }
    Ok(())
}

/// Applies `policy` sample by sample; `sets` follow the policy's modality order.
pub fn fuse_sets(sets: &[&PredictionSet], policy: &FusionPolicy) -> Result<FusedSet> {
    check_aligned(sets)?;
    policy.validate()?;
    let per_modality_u: Vec<Vec<f64>> = sets.iter().map(|s| s.uncertainties(policy.metric)).collect();
    let n = sets[0].len();
    let mut outcomes = Vec::with_capacity(n);
    let mut uncertainties = Vec::with_capacity(n);
    for i in 0..n {
        let means: Vec<&[f64]> = sets.iter().map(|s| s.dists[i].mean()).collect();
        let u: Vec<f64> = per_modality_u.iter().map(|v| v[i]).collect();
        outcomes.push(fuse(&means, &u, policy)?);
        uncertainties.push(u);
    }
    Ok(FusedSet {
        ids: sets[0].ids.clone(),
        labels: sets[0].labels.clone(),
        outcomes,
        uncertainties,
    })
}

/// Plain average pooling of every sample, no gating.
pub fn average_sets(sets: &[&PredictionSet]) -> Result<Vec<Vec<f64>>> {
    check_aligned(sets)?;
    (0..sets[0].len())
        .map(|i| {
            let means: Vec<&[f64]> = sets.iter().map(|s| s.dists[i].mean()).collect();
            average_pool(&means)
        })
        .collect()
}
