//! Uncertainty-gated fusion of two modalities: average when both are below
//! their AvU-optimal thresholds, otherwise trust the less uncertain one.

mod common;

use bayes_fusion::fusion::{average_sets, fit_fusion_policy, fuse_sets, ComparisonMode, FusionDecision};
use bayes_fusion::metrics::{micro_pr_curve, topk_accuracy};
use bayes_fusion::uncertainty::UncertaintyMetric;

fn main() -> bayes_fusion::Result<()> {
    let s = common::splits(&common::spec())?;
    let names: Vec<String> = s.train.modalities().iter().map(|m| m.name.clone()).collect();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for m in 0..names.len() {
        let head = common::train_vi(&s, m)?;
        val.push(common::predict(&head, &s.val, m, 10 + m as u64)?);
        test.push(common::predict(&head, &s.test, m, 20 + m as u64)?);
    }

    let named: Vec<(&str, _)> = names.iter().map(String::as_str).zip(&val).collect();
    let (policy, _) = fit_fusion_policy(&named, UncertaintyMetric::Bald, ComparisonMode::Raw)?;
    println!("policy: {}", serde_json::to_string(&policy).expect("policy serializes"));

    let labels = &test[0].labels;
    let report = |name: &str, scores: &[Vec<f64>]| -> bayes_fusion::Result<()> {
        let top1 = topk_accuracy(scores, labels, 1)?;
        let pr = micro_pr_curve(scores, labels)?.auc;
        println!("{name:<10} top-1 {top1:.4}  micro PR-AUC {pr:.4}");
        Ok(())
    };
    for (name, set) in names.iter().zip(&test) {
        report(name, &set.means())?;
    }
    let refs: Vec<_> = test.iter().collect();
    report("average", &average_sets(&refs)?)?;
    let fused = fuse_sets(&refs, &policy)?;
    report("gated", &fused.probs())?;

    let averaged = fused.outcomes.iter().filter(|o| o.decision == FusionDecision::Averaged).count();
    println!("gate averaged {averaged} of {} test samples", fused.outcomes.len());
    Ok(())
}
