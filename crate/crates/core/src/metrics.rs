//! Classification metrics, micro-averaged PR/ROC curves, density histograms
//! and in- vs out-of-distribution separation.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

fn check_scores<S: AsRef<[f64]>>(scores: &[S], labels: &[usize]) -> Result<usize> {
    if scores.len() != labels.len() {
        return Err(Error::Length(format!(
            "{} score rows for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let k = scores.first().map(|s| s.as_ref().len()).unwrap_or(0);
    if scores.iter().any(|s| s.as_ref().len() != k) {
        return Err(Error::Length("score rows have different lengths".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Validation(format!("label {y} out of range for {k} classes")));
    }
    Ok(k)
}

/// Fraction of samples whose label ranks among the `k` largest scores.
/// Equal scores rank by class index, lowest first.
pub fn topk_accuracy<S: AsRef<[f64]>>(scores: &[S], labels: &[usize], k: usize) -> Result<f64> {
    let classes = check_scores(scores, labels)?;
    if k == 0 || k > classes {
        return Err(Error::Validation(format!("k = {k} outside 1..={classes}")));
    }
    if scores.is_empty() {
        return Err(Error::Validation("top-k accuracy of an empty set".into()));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, &y)| {
            let s = s.as_ref();
            let ahead = s
                .iter()
                .enumerate()
                .filter(|&(j, &p)| p > s[y] || (p == s[y] && j < y))
                .count();
            ahead < k
        })
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Curve {
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl Curve {
    fn from_points(points: Vec<(f64, f64)>) -> Self {
        let auc = trapezoid(&points);
        Curve { points, auc }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(f, "x,y")?;
        for (x, y) in &self.points {
            writeln!(f, "{x},{y}")?;
        }
        f.flush()?;
        Ok(())
    }
}

pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1))
        .sum()
}

/// Flattened one-vs-rest (score, is_positive) pairs sorted by descending score.
fn flatten<S: AsRef<[f64]>>(scores: &[S], labels: &[usize]) -> Result<Vec<(f64, bool)>> {
    check_scores(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::Validation("curve of an empty set".into()));
    }
    let mut pairs: Vec<(f64, bool)> = scores
        .iter()
        .zip(labels)
        .flat_map(|(s, &y)| s.as_ref().iter().enumerate().map(move |(j, &p)| (p, j == y)))
        .collect();
    if pairs.iter().any(|(p, _)| !p.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(pairs)
}

/// Cumulative (true positives, false positives) after each distinct score,
/// walking from the highest score down.
fn sweep(pairs: &[(f64, bool)]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (i, &(s, pos)) in pairs.iter().enumerate() {
        if pos {
            tp += 1;
        } else {
            fp += 1;
        }
        if i + 1 == pairs.len() || pairs[i + 1].0 != s {
            out.push((tp, fp));
        }
    }
    out
}

/// Precision (y) against recall (x). The curve starts at recall 0 with the
/// precision of the strictest threshold.
pub fn micro_pr_curve<S: AsRef<[f64]>>(scores: &[S], labels: &[usize]) -> Result<Curve> {
    let pairs = flatten(scores, labels)?;
    let positives = labels.len() as f64;
    let mut points: Vec<(f64, f64)> = sweep(&pairs)
        .into_iter()
        .map(|(tp, fp)| (tp as f64 / positives, tp as f64 / (tp + fp) as f64))
        .collect();
    points.insert(0, (0.0, points[0].1));
    Ok(Curve::from_points(points))
}

/// True-positive rate (y) against false-positive rate (x), from (0, 0).
pub fn micro_roc_curve<S: AsRef<[f64]>>(scores: &[S], labels: &[usize]) -> Result<Curve> {
    let pairs = flatten(scores, labels)?;
    let positives = labels.len() as f64;
    let negatives = (pairs.len() - labels.len()) as f64;
    if negatives == 0.0 {
        return Err(Error::Validation("ROC needs at least two classes".into()));
    }
    let mut points = vec![(0.0, 0.0)];
    points.extend(
        sweep(&pairs)
            .into_iter()
            .map(|(tp, fp)| (fp as f64 / negatives, tp as f64 / positives)),
    );
    Ok(Curve::from_points(points))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensityHistogram {
    pub edges: Vec<f64>,
    pub densities: Vec<f64>,
    /// Values outside the range that were clipped into an edge bin.
    pub clipped: usize,
}

impl DensityHistogram {
    pub fn bin_width(&self) -> f64 {
        self.edges[1] - self.edges[0]
    }

    pub fn area(&self) -> f64 {
        self.densities.iter().sum::<f64>() * self.bin_width()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(f, "bin_left,bin_right,density")?;
        for (w, d) in self.edges.windows(2).zip(&self.densities) {
            writeln!(f, "{},{},{d}", w[0], w[1])?;
        }
        f.flush()?;
        Ok(())
    }
}

pub const DEFAULT_HISTOGRAM_BINS: usize = 50;

pub fn density_histogram(values: &[f64], num_bins: usize, range: (f64, f64)) -> Result<DensityHistogram> {
    let (lo, hi) = range;
    if num_bins == 0 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Validation(format!(
            "histogram needs >= 1 bin and a finite range with min < max, got {num_bins} bins over [{lo}, {hi}]"
        )));
    }
    if values.is_empty() {
        return Err(Error::Validation("histogram of an empty set".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite histogram value".into()));
    }
    let width = (hi - lo) / num_bins as f64;
    let mut counts = vec![0usize; num_bins];
    let mut clipped = 0;
    for &v in values {
        if v < lo || v > hi {
            clipped += 1;
        }
        let bin = ((v - lo) / width).floor();
        let bin = if bin < 0.0 { 0 } else { (bin as usize).min(num_bins - 1) };
        counts[bin] += 1;
    }
    let scale = 1.0 / (values.len() as f64 * width);
    Ok(DensityHistogram {
        edges: (0..=num_bins).map(|i| lo + i as f64 * width).collect(),
        densities: counts.iter().map(|&c| c as f64 * scale).collect(),
        clipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OodSeparation {
    pub mean_in: f64,
    pub mean_out: f64,
    pub median_in: f64,
    pub median_out: f64,
    /// P(u_out > u_in) + 0.5 P(u_out == u_in) over random pairs.
    pub auroc: f64,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Rank-sum form of the Mann-Whitney statistic, with mid-ranks for ties.
pub fn rank_auroc(negatives: &[f64], positives: &[f64]) -> Result<f64> {
    if negatives.is_empty() || positives.is_empty() {
        return Err(Error::Validation("AUROC needs both groups nonempty".into()));
    }
    let mut all: Vec<(f64, bool)> = negatives
        .iter()
        .map(|&v| (v, false))
        .chain(positives.iter().map(|&v| (v, true)))
        .collect();
    if all.iter().any(|(v, _)| !v.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1..=j share their average
        let mid = 0.5 * ((i + 1) + j) as f64;
        rank_sum += mid * all[i..j].iter().filter(|(_, p)| *p).count() as f64;
        i = j;
    }
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

pub fn ood_separation(u_in: &[f64], u_out: &[f64]) -> Result<OodSeparation> {
    let auroc = rank_auroc(u_in, u_out)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(OodSeparation {
        mean_in: mean(u_in),
        mean_out: mean(u_out),
        median_in: median(u_in),
        median_out: median(u_out),
        auroc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Pair-counting oracle for ROC AUC.
    fn pair_auc(scores: &[Vec<f64>], labels: &[usize]) -> f64 {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (s, &y) in scores.iter().zip(labels) {
            for (j, &p) in s.iter().enumerate() {
                if j == y { pos.push(p) } else { neg.push(p) }
            }
        }
        let mut total = 0.0;
        for &p in &pos {
            for &n in &neg {
                total += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        total / (pos.len() * neg.len()) as f64
    }

    // Enumerates every threshold directly and integrates precision over recall.
    fn brute_pr_auc(scores: &[Vec<f64>], labels: &[usize]) -> f64 {
        let flat: Vec<(f64, bool)> = scores
            .iter()
            .zip(labels)
            .flat_map(|(s, &y)| s.iter().enumerate().map(move |(j, &p)| (p, j == y)))
            .collect();
        let mut th: Vec<f64> = flat.iter().map(|x| x.0).collect();
        th.sort_by(|a, b| b.total_cmp(a));
        th.dedup();
        let mut pts = Vec::new();
        for t in th {
            let tp = flat.iter().filter(|x| x.1 && x.0 >= t).count() as f64;
            let fp = flat.iter().filter(|x| !x.1 && x.0 >= t).count() as f64;
            pts.push((tp / labels.len() as f64, tp / (tp + fp)));
        }
        pts.insert(0, (0.0, pts[0].1));
        trapezoid(&pts)
    }

    #[test]
    fn topk_examples() {
        let s = [[0.4, 0.4, 0.2]];
        assert_eq!(topk_accuracy(&s, &[1], 1).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&s, &[0], 1).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&s, &[1], 2).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&s, &[2], 3).unwrap(), 1.0);
        assert!(topk_accuracy(&s, &[2], 0).is_err());
        assert!(topk_accuracy(&s, &[2], 4).is_err());
    }

    #[test]
    fn perfect_and_constant_curves() {
        let s = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        let y = [0, 1];
        assert_eq!(micro_pr_curve(&s, &y).unwrap().auc, 1.0);
        assert_eq!(micro_roc_curve(&s, &y).unwrap().auc, 1.0);

        let c = vec![vec![0.5, 0.5]; 4];
        let y = [0, 1, 1, 0];
        let pr = micro_pr_curve(&c, &y).unwrap();
        assert!(pr.points.iter().all(|p| p.1 == 0.5));
        assert_eq!(pr.auc, 0.5);
        assert_eq!(micro_roc_curve(&c, &y).unwrap().auc, 0.5);
    }

    #[test]
    fn hand_case_matches_oracles() {
        let s = vec![vec![0.7, 0.3], vec![0.4, 0.6], vec![0.55, 0.45]];
        let y = [0, 0, 1];
        let roc = micro_roc_curve(&s, &y).unwrap();
        assert!((roc.auc - pair_auc(&s, &y)).abs() < 1e-12);
        let pr = micro_pr_curve(&s, &y).unwrap();
        assert!((pr.auc - brute_pr_auc(&s, &y)).abs() < 1e-12);
    }

    #[test]
    fn histogram_examples() {
        let h = density_histogram(&[0.1, 0.12, 0.15], 4, (0.0, 1.0)).unwrap();
        assert_eq!(h.densities, vec![4.0, 0.0, 0.0, 0.0]);
        let h = density_histogram(&[1.0, 2.0, -1.0], 2, (0.0, 1.0)).unwrap();
        assert_eq!(h.clipped, 2);
        assert_eq!(h.densities, vec![2.0 / 3.0, 4.0 / 3.0]);
        let grid: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        let h = density_histogram(&grid, 10, (0.0, 1.0)).unwrap();
        assert!(h.densities.iter().all(|d| (d - 1.0).abs() < 1e-9));
        assert!(density_histogram(&[], 10, (0.0, 1.0)).is_err());
        assert!(density_histogram(&[0.5], 10, (1.0, 1.0)).is_err());
    }

    #[test]
    fn histogram_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        density_histogram(&[0.25], 2, (0.0, 1.0)).unwrap().write_csv(&path).unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            "bin_left,bin_right,density\n0,0.5,2\n0.5,1,0\n"
        );
    }

    #[test]
    fn ood_examples() {
        let a = [0.1, 0.2, 0.3];
        assert_eq!(ood_separation(&a, &a).unwrap().auroc, 0.5);
        assert_eq!(ood_separation(&a, &[0.5, 0.9]).unwrap().auroc, 1.0);
        let s = ood_separation(&[0.1, 0.4, 0.35, 0.8], &[0.3, 0.4, 0.9]).unwrap();
        let mut pairs = 0.0;
        for o in [0.3, 0.4, 0.9] {
            for i in [0.1, 0.4, 0.35, 0.8] {
                pairs += if o > i { 1.0 } else if o == i { 0.5 } else { 0.0 };
            }
        }
        assert!((s.auroc - pairs / 12.0).abs() < 1e-12);
        assert_eq!(s.median_in, 0.375);
        assert!(ood_separation(&[], &a).is_err());
    }

    fn score_sets() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
        (1usize..12, 2usize..5).prop_flat_map(|(n, k)| {
            (
                prop::collection::vec(prop::collection::vec(0u8..6, k), n)
                    .prop_map(|rows| rows.into_iter().map(|r| r.into_iter().map(|v| v as f64 / 5.0).collect()).collect()),
                prop::collection::vec(0..k, n),
            )
        })
    }

    proptest! {
        #[test]
        fn roc_matches_pair_count((s, y) in score_sets()) {
            let auc = micro_roc_curve(&s, &y).unwrap().auc;
            prop_assert!((auc - pair_auc(&s, &y)).abs() < 1e-12);
            let inverted: Vec<Vec<f64>> = s.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
            prop_assert!((micro_roc_curve(&inverted, &y).unwrap().auc - (1.0 - auc)).abs() < 1e-12);
            let cubed: Vec<Vec<f64>> = s.iter().map(|r| r.iter().map(|v| v * v * v + v).collect()).collect();
            prop_assert!((micro_roc_curve(&cubed, &y).unwrap().auc - auc).abs() < 1e-12);
        }

        #[test]
        fn pr_matches_brute_force((s, y) in score_sets()) {
            let auc = micro_pr_curve(&s, &y).unwrap().auc;
            prop_assert!((0.0..=1.0).contains(&auc));
            prop_assert!((auc - brute_pr_auc(&s, &y)).abs() < 1e-12);
        }

        #[test]
        fn histogram_area_is_one(v in prop::collection::vec(-2.0f64..3.0, 1..200), bins in 1usize..60) {
            let h = density_histogram(&v, bins, (0.0, 1.0)).unwrap();
            prop_assert!((h.area() - 1.0).abs() < 1e-9);
        }
    }
}
