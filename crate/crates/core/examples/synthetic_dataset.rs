//! Two-modality synthetic data with per-modality class collisions, and how
//! much a nearest-class-mean rule can recover from each modality.

use bayes_fusion::dataset::{generate_synthetic, split, SplitSpec, SynthModality, SynthSpec};
use bayes_fusion::uncertainty::argmax;
use bayes_fusion::Matrix;

fn nearest_mean_accuracy(x: &Matrix, y: &[usize], k: usize) -> f64 {
    let d = x.cols();
    let mut means = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (row, &c) in x.iter_rows().zip(y) {
        counts[c] += 1;
        means[c].iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    for (m, n) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= *n as f64);
    }
    let hits = x
        .iter_rows()
        .zip(y)
        .filter(|(row, &c)| {
            let neg_dist: Vec<f64> = means
                .iter()
                .map(|m| -m.iter().zip(*row).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .collect();
            argmax(&neg_dist) == c
        })
        .count();
    hits as f64 / y.len() as f64
}

fn main() -> bayes_fusion::Result<()> {
    let modality = |name: &str| SynthModality {
        name: name.into(),
        dim: 32,
        separation: 6.0,
        noise: 1.0,
        ambiguous_fraction: 0.25,
    };
    let spec = SynthSpec {
        num_classes: 8,
        samples_per_class: 200,
        modalities: vec![modality("vision"), modality("audio")],
        seed: 7,
    };
    let ds = generate_synthetic(&spec)?;
    for (m, pairs) in spec.ambiguous_pairs().iter().enumerate() {
        println!("{}: colliding class pairs {pairs:?}", spec.modalities[m].name);
    }

    let (train, _, test) = split(
        &ds,
        &SplitSpec { train_frac: 0.6, val_frac: 0.2, test_frac: 0.2, seed: 7, stratified: true },
    )?;
    println!("{} train / {} test samples", train.len(), test.len());
    for info in ds.modalities() {
        let acc = nearest_mean_accuracy(test.features_by_name(&info.name)?, test.labels(), ds.num_classes());
        println!("{:>6}: nearest-class-mean test accuracy {acc:.3}", info.name);
    }
    Ok(())
}
