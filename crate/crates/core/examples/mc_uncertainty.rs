//! Monte Carlo predictive distributions from a variational head: predictive
//! entropy (total) versus BALD (epistemic) on clean, collided and unseen inputs.

mod common;

use bayes_fusion::dataset::generate_synthetic_ood;
use bayes_fusion::uncertainty::{bald, predictive_entropy, PredictiveDistribution};

fn summarize(name: &str, dists: &[PredictiveDistribution]) {
    let n = dists.len() as f64;
    let h = dists.iter().map(predictive_entropy).sum::<f64>() / n;
    let b = dists.iter().map(bald).sum::<f64>() / n;
    let c = dists.iter().map(PredictiveDistribution::confidence).sum::<f64>() / n;
    println!("{name:<28} entropy {h:.4}  BALD {b:.4}  confidence {c:.3}");
}

fn main() -> bayes_fusion::Result<()> {
    let spec = common::spec();
    let s = common::splits(&spec)?;
    let head = common::train_vi(&s, 0)?;
    let test = common::predict(&head, &s.test, 0, 1)?;

    // Classes whose vision mean collides with a partner are aleatorically ambiguous.
    let collided: Vec<usize> = spec.ambiguous_pairs()[0].iter().flat_map(|&(a, b)| [a, b]).collect();
    let (amb, clean): (Vec<_>, Vec<_>) = test
        .dists
        .iter()
        .zip(&test.labels)
        .partition(|(_, y)| collided.contains(y));
    let unzip = |v: Vec<(&PredictiveDistribution, &usize)>| v.into_iter().map(|(d, _)| d.clone()).collect::<Vec<_>>();
    summarize("in-distribution, clean", &unzip(clean));
    summarize("in-distribution, collided", &unzip(amb));

    let ood = generate_synthetic_ood(&spec, 8)?;
    let ood_pred = common::predict(&head, &ood, 0, 2)?;
    summarize("out-of-distribution", &ood_pred.dists);

    let d = &test.dists[0];
    println!("\nsample {} over {} passes: mean {:?}", test.ids[0], d.passes(), d.mean().iter().map(|p| (p * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    Ok(())
}
