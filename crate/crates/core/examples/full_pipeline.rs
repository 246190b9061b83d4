//! The whole experiment from the bundled config: data, three heads per
//! modality, MC prediction, AvU thresholds, fusion, OOD analysis and the
//! evaluation tables. Usage: `full_pipeline [OUT_DIR]`.

use bayes_fusion::pipeline::{Experiment, ExperimentConfig};

fn main() -> bayes_fusion::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/example".into());
    let exp = Experiment::new(ExperimentConfig::bundled(), Some(out.clone().into()))?;
    let summary = exp.run_all()?;

    println!("{:<10} {:<8} {:>7} {:>7} {:>7} {:>7}", "model", "source", "top1", "top5", "pr_auc", "roc_auc");
    for r in &summary.eval.table {
        println!("{:<10} {:<8} {:>7.4} {:>7.4} {:>7.4} {:>7.4}", r.model, r.source, r.top1, r.top5, r.pr_auc, r.roc_auc);
    }
    println!();
    for r in summary.eval.confidence.iter().filter(|r| r.source == "pooled") {
        println!("{:<10} confidence correct {:.3} / incorrect {:.3}", r.model, r.mean_conf_correct, r.mean_conf_incorrect);
    }
    for r in &summary.separation {
        println!("{:<10} {:<6} {:<7} OOD AUROC {:.3}", r.model, r.modality, r.metric, r.auroc);
    }
    println!("\nartifacts written to {out}");
    Ok(())
}
