//! Accuracy-versus-uncertainty on validation predictions and the threshold
//! that maximizes it, per modality.

mod common;

use bayes_fusion::fusion::{avu, avu_counts, optimal_threshold};
use bayes_fusion::uncertainty::UncertaintyMetric;

fn main() -> bayes_fusion::Result<()> {
    let s = common::splits(&common::spec())?;
    for (m, info) in s.train.modalities().iter().enumerate() {
        let head = common::train_vi(&s, m)?;
        let val = common::predict(&head, &s.val, m, m as u64)?;
        let (means, u) = (val.means(), val.uncertainties(UncertaintyMetric::Bald));
        let fit = optimal_threshold(&means, &val.labels, &u)?;
        println!("{}: optimal BALD threshold {:.4}, AvU {:.4} ({} candidates)", info.name, fit.threshold, fit.avu, fit.curve.len());
        let c = avu_counts(&means, &val.labels, &u, fit.threshold)?;
        println!("  accurate-certain {}  accurate-uncertain {}  inaccurate-certain {}  inaccurate-uncertain {}", c.n_ac, c.n_au, c.n_ic, c.n_iu);
        let step = (fit.curve.len() / 8).max(1);
        for p in fit.curve.iter().step_by(step) {
            println!("  threshold {:>8.4}  AvU {:.4}", p.threshold, p.avu);
        }
        debug_assert_eq!(avu(&c)?, fit.avu);
    }
    Ok(())
}
