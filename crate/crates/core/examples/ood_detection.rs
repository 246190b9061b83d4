//! Out-of-distribution detection: BALD and predictive entropy on held-out
//! classes versus in-distribution test data, for the variational head.

mod common;

use bayes_fusion::dataset::generate_synthetic_ood;
use bayes_fusion::metrics::{density_histogram, ood_separation};
use bayes_fusion::uncertainty::UncertaintyMetric;

fn main() -> bayes_fusion::Result<()> {
    let spec = common::spec();
    let s = common::splits(&spec)?;
    let ood = generate_synthetic_ood(&spec, 8)?;
    for (m, info) in s.train.modalities().iter().enumerate() {
        let head = common::train_vi(&s, m)?;
        let inside = common::predict(&head, &s.test, m, 30 + m as u64)?;
        let outside = common::predict(&head, &ood, m, 40 + m as u64)?;
        for metric in [UncertaintyMetric::Bald, UncertaintyMetric::Entropy] {
            let (u_in, u_out) = (inside.uncertainties(metric), outside.uncertainties(metric));
            let sep = ood_separation(&u_in, &u_out)?;
            println!(
                "{:>6} {metric:<7}  mean in {:.4} / out {:.4}  median in {:.4} / out {:.4}  AUROC {:.3}",
                info.name, sep.mean_in, sep.mean_out, sep.median_in, sep.median_out, sep.auroc
            );
        }
        // Coarse shared-range density histograms of BALD.
        let (u_in, u_out) = (inside.uncertainties(UncertaintyMetric::Bald), outside.uncertainties(UncertaintyMetric::Bald));
        let hi = u_in.iter().chain(&u_out).copied().fold(0.0, f64::max);
        let (h_in, h_out) = (density_histogram(&u_in, 8, (0.0, hi))?, density_histogram(&u_out, 8, (0.0, hi))?);
        for b in 0..8 {
            println!("    [{:.3}, {:.3})  in {:>6.2}  out {:>6.2}", h_in.edges[b], h_in.edges[b + 1], h_in.densities[b], h_out.densities[b]);
        }
    }
    Ok(())
}
