//! Prints one PASS/FAIL line per acceptance criterion and exits nonzero if
//! any criterion fails.

mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use bayes_fusion::fusion::{avu, avu_counts, optimal_threshold, threshold_candidates};
use bayes_fusion::head::{
    init_variational_head, VariationalDenseLayer,
};
use bayes_fusion::pipeline::{Experiment, ExperimentConfig, Model, RunSummary};
use bayes_fusion::tensor::{inverse_softplus, Matrix, RngStream};
use bayes_fusion::train::{elbo_loss, grad_cross_entropy, grad_elbo};
use bayes_fusion::uncertainty::{argmax, bald, predictive_entropy, PredictiveDistribution, UncertaintyMetric};
use common::{files_with_extension, kink_free_head, max_fd_error, random_matrix, random_simplex_rows};

struct Report {
    failures: usize,
}

impl Report {
    fn record(&mut self, n: usize, pass: bool, detail: String) {
        println!("criterion {n:>2}: {}  {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failures += 1;
        }
    }
}

fn gradients(r: &mut Report) {
    let start = Instant::now();
    let mut s = RngStream::new(31, 0);
    let x = random_matrix(&mut s, 5, 3, 1.0);
    let y = [0, 1, 0, 1, 1];

    let mut vhead = init_variational_head(&[3, 4, 4, 2], 7, 0.8).unwrap();
    for l in vhead.layers_mut() {
        l.weight_rho = l.weight_rho.map(|v| v + 2.5);
    }
    let noise = RngStream::new(41, 3);
    let (_, g) = grad_elbo(&vhead, &x, &y, 0.1, &noise).unwrap();
    let e_vi = max_fd_error(&vhead, &g.flatten(), 1e-4, 1e-6, |h| {
        elbo_loss(h, &x, &y, 0.1, &noise).unwrap().loss
    });

    let dhead = kink_free_head(&[3, 4, 4, 2], 8, 0.5);
    let masks = RngStream::new(43, 3);
    let (_, g) = grad_cross_entropy(&dhead, &x, &y, &masks).unwrap();
    let e_ce = max_fd_error(&dhead, &g.flatten(), 1e-4, 1e-6, |h| {
        grad_cross_entropy(h, &x, &y, &masks).unwrap().0
    });
    let secs = start.elapsed().as_secs_f64();
    r.record(
        1,
        e_vi < 1e-4 && e_ce < 1e-4 && secs < 10.0,
        format!("max rel err elbo {e_vi:.2e}, cross-entropy {e_ce:.2e} (< 1e-4), {secs:.2}s (< 10s)"),
    );
}

fn single_weight(mu: f64, sigma: f64, prior_sigma: f64) -> VariationalDenseLayer {
    let mut l = VariationalDenseLayer::init(1, 1, &mut RngStream::new(0, 0), prior_sigma);
    l.weight_mu = Matrix::filled(1, 1, mu);
    l.weight_rho = Matrix::filled(1, 1, inverse_softplus(sigma));
    // Bias sits exactly on the prior so it contributes nothing.
    l.bias_mu = vec![0.0];
    l.bias_rho = vec![inverse_softplus(prior_sigma)];
    l
}

fn log_normal(x: f64, mu: f64, sigma: f64) -> f64 {
    -0.5 * ((x - mu) / sigma).powi(2) - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn kl_oracle(r: &mut Report) {
    let spots = [
        (0.0, 1.0, 0.0),
        (1.0, 1.0, 0.5),
        (0.0, 0.5, std::f64::consts::LN_2 + 0.125 - 0.5),
    ];
    let spot_err = spots
        .iter()
        .map(|&(mu, sigma, want)| (single_weight(mu, sigma, 1.0).kl_to_prior() - want).abs())
        .fold(0.0, f64::max);

    let mut s = RngStream::new(2024, 0);
    let mut worst = 0.0f64;
    for setting in 0..20u64 {
        let mu = 3.0 * (s.uniform() - 0.5);
        let sigma = 0.2 + 1.3 * s.uniform();
        let prior = 0.5 + 1.5 * s.uniform();
        let closed = single_weight(mu, sigma, prior).kl_to_prior();
        let mut draws = RngStream::new(77, setting);
        let n = 1_000_000;
        let mc = (0..n)
            .map(|_| {
                let w = mu + sigma * draws.gaussian();
                log_normal(w, mu, sigma) - log_normal(w, 0.0, prior)
            })
            .sum::<f64>()
            / n as f64;
        worst = worst.max((mc - closed).abs() / closed);
    }
    r.record(
        2,
        spot_err < 1e-9 && worst < 0.01,
        format!("max MC relative error {:.3}% over 20 settings (< 1%), spot error {spot_err:.1e} (< 1e-9)", 100.0 * worst),
    );
}

fn uncertainty_identities(r: &mut Report) {
    let mut s = RngStream::new(5, 5);
    let mut violations = 0;
    for i in 0..10_000 {
        let t = 1 + s.below(40);
        let k = 2 + s.below(12);
        let sharp = [0.0, 0.5, 2.0, 8.0, 40.0][i % 5];
        let p = PredictiveDistribution::new(random_simplex_rows(&mut s, t, k, sharp)).unwrap();
        let (b, h) = (bald(&p), predictive_entropy(&p));
        // Round-off slack only; uniform rows hit ln K exactly.
        if !(b >= 0.0 && b <= h + 1e-12 && h <= (k as f64).ln() + 1e-12) {
            violations += 1;
        }
    }
    let hand = PredictiveDistribution::new(Matrix::from_rows(&[[0.9, 0.1], [0.1, 0.9]]).unwrap()).unwrap();
    let hand_err = (bald(&hand) - 0.36807).abs();
    r.record(
        3,
        violations == 0 && hand_err < 1e-5,
        format!("{violations} violations over 10^4 distributions, hand case error {hand_err:.1e} (< 1e-5)"),
    );
}

fn avu_equivalence(r: &mut Report) {
    let mut s = RngStream::new(8, 8);
    let (mut count_mismatch, mut threshold_mismatch) = (0, 0);
    for _ in 0..1000 {
        let n = 2 + s.below(60);
        let k = 2 + s.below(6);
        let probs = random_simplex_rows(&mut s, n, k, 1.5);
        let means: Vec<Vec<f64>> = probs.iter_rows().map(<[f64]>::to_vec).collect();
        let labels: Vec<usize> = (0..n).map(|_| s.below(k)).collect();
        let u: Vec<f64> = (0..n).map(|_| s.below(12) as f64 / 8.0).collect();
        let th = s.below(14) as f64 / 8.0;

        let mut brute = [0usize; 4];
        for i in 0..n {
            let cell = match (argmax(&means[i]) == labels[i], u[i] <= th) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            brute[cell] += 1;
        }
        let c = avu_counts(&means, &labels, &u, th).unwrap();
        if [c.n_ac, c.n_au, c.n_ic, c.n_iu] != brute
            || avu(&c).unwrap() != (brute[0] + brute[3]) as f64 / n as f64
        {
            count_mismatch += 1;
        }

        // Exhaustive scan: brute-force AvU at every candidate, first maximum wins.
        let (candidates, _) = threshold_candidates(&u);
        let mut best = (f64::NEG_INFINITY, f64::NAN);
        for &cand in &candidates {
            let good = (0..n)
                .filter(|&i| (argmax(&means[i]) == labels[i]) == (u[i] <= cand))
                .count();
            let score = good as f64 / n as f64;
            if score > best.0 {
                best = (score, cand);
            }
        }
        let fit = optimal_threshold(&means, &labels, &u).unwrap();
        if fit.avu != best.0 || fit.threshold != best.1 {
            threshold_mismatch += 1;
        }
    }
    r.record(
        4,
        count_mismatch == 0 && threshold_mismatch == 0,
        format!("10^3 instances: {count_mismatch} count mismatches, {threshold_mismatch} threshold mismatches"),
    );
}

fn flipout_unbiased(r: &mut Report) {
    let mut s = RngStream::new(12, 0);
    let mut layer = VariationalDenseLayer::init(5, 3, &mut s, 1.0);
    layer.weight_rho = layer.weight_rho.map(|_| inverse_softplus(0.4));
    layer.bias_rho = vec![inverse_softplus(0.3); 3];
    let x = random_matrix(&mut s, 1, 5, 1.0);
    let exact = layer.forward_mean(&x).unwrap();
    let n = 10_000;
    let root = RngStream::new(13, 0);
    let outs: Vec<Matrix> = (0..n)
        .map(|t| layer.forward_flipout(&x, &mut root.child(t as u64)).unwrap())
        .collect();
    let mut worst = 0.0f64;
    for j in 0..3 {
        let vals: Vec<f64> = outs.iter().map(|o| o.get(0, j)).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        worst = worst.max((mean - exact.get(0, j)).abs() / se);
    }
    r.record(
        5,
        worst < 3.0,
        format!("max |MC mean - mean forward| = {worst:.2} standard errors over 10^4 passes (< 3)"),
    );
}

fn pipeline(r: &mut Report, out: &Path) -> Option<RunSummary> {
    let start = Instant::now();
    let exp = Experiment::new(ExperimentConfig::bundled(), Some(out.to_path_buf())).unwrap();
    let summary = match exp.run_all() {
        Ok(s) => s,
        Err(e) => {
            for n in 6..=9 {
                r.record(n, false, format!("pipeline failed: {e}"));
            }
            return None;
        }
    };
    let secs = start.elapsed().as_secs_f64();

    let ev = &summary.eval;
    let top1 = |src: &str| ev.metric(Model::Vi, src).unwrap().top1;
    let pr = |m: Model, src: &str| ev.metric(m, src).unwrap().pr_auc;
    let single = top1("vision").max(top1("audio"));
    let top1_gain = top1("gated") - single;
    let pr_gain = pr(Model::Vi, "gated") - pr(Model::Dnn, "average");
    r.record(
        6,
        top1_gain >= 0.03 && pr_gain >= 0.02 && secs < 600.0,
        format!(
            "fused top-1 {:.4} vs best single {single:.4} (+{:.1} pts, need 3); fused PR-AUC {:.4} vs \
             average-pooled DNN {:.4} ({:+.2} pts, need 2) [ungated VI average {:.4}]; pipeline {secs:.1}s",
            top1("gated"),
            100.0 * top1_gain,
            pr(Model::Vi, "gated"),
            pr(Model::Dnn, "average"),
            100.0 * pr_gain,
            pr(Model::Vi, "average"),
        ),
    );

    let vi = ev.confidence(Model::Vi, "pooled").unwrap();
    let dnn = ev.confidence(Model::Dnn, "pooled").unwrap();
    r.record(
        7,
        vi.gap >= 0.15 && dnn.gap < vi.gap,
        format!(
            "VI confidence correct {:.3} / incorrect {:.3} (gap {:.3}, need 0.15); DNN gap {:.3} (must be smaller)",
            vi.mean_conf_correct, vi.mean_conf_incorrect, vi.gap, dnn.gap
        ),
    );

    let mut ok = true;
    let mut parts = Vec::new();
    for m in ["vision", "audio"] {
        let s = summary.separation(Model::Vi, m, UncertaintyMetric::Bald).unwrap();
        ok &= s.mean_out > s.mean_in && s.auroc >= 0.80;
        parts.push(format!("{m}: mean BALD in {:.4} / OOD {:.4}, AUROC {:.3}", s.mean_in, s.mean_out, s.auroc));
    }
    r.record(8, ok, format!("{} (need >= 0.80)", parts.join("; ")));

    let artifacts = [
        "predictions/mcdropout_vision_test.csv",
        "predictions/mcdropout_audio_ood.samples.bin",
        "avu/mcdropout_policy.json",
        "avu/mcdropout_audio_curve.csv",
        "fusion/mcdropout_report.csv",
        "fusion/mcdropout_metrics.csv",
    ];
    let missing: Vec<&str> = artifacts.iter().copied().filter(|a| !out.join(a).exists()).collect();
    let aurocs: Vec<String> = ["vision", "audio"]
        .iter()
        .map(|m| {
            let s = summary.separation(Model::McDropout, m, UncertaintyMetric::Bald).unwrap();
            format!("{m} {:.3}", s.auroc)
        })
        .collect();
    r.record(
        9,
        missing.is_empty() && ev.metric(Model::McDropout, "gated").is_some(),
        format!("MC-dropout artifacts complete (missing: {missing:?}); OOD BALD AUROC {}", aurocs.join(", ")),
    );
    Some(summary)
}

fn determinism(r: &mut Report, first: &Path, second: &Path) {
    // Second run goes through the CLI, one process per stage, single-threaded.
    let cfg = second.with_extension("cfg");
    fs::write(&cfg, bayes_fusion::pipeline::BUNDLED_CONFIG).unwrap();
    for cmd in ["gen-synth", "train", "predict", "avu", "fuse", "ood", "eval"] {
        let status = Command::new(env!("CARGO_BIN_EXE_bayes-fusion"))
            .args([cmd, "--config", cfg.to_str().unwrap(), "--out", second.to_str().unwrap(), "--threads", "1"])
            .output()
            .unwrap()
            .status;
        if !status.success() {
            r.record(10, false, format!("CLI `{cmd}` failed"));
            return;
        }
    }
    let csvs = files_with_extension(first, "csv");
    let differing: Vec<String> = csvs
        .iter()
        .filter(|p| fs::read(first.join(p)).ok() != fs::read(second.join(p)).ok())
        .map(|p| p.display().to_string())
        .collect();
    let same_set = csvs == files_with_extension(second, "csv");
    r.record(
        10,
        differing.is_empty() && same_set && !csvs.is_empty(),
        format!("{} CSVs compared across library and CLI reruns, differing: {differing:?}", csvs.len()),
    );
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters from other targets land here too.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut r = Report { failures: 0 };
    gradients(&mut r);
    kl_oracle(&mut r);
    uncertainty_identities(&mut r);
    avu_equivalence(&mut r);
    flipout_unbiased(&mut r);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("run_a"), dir.path().join("run_b"));
    if pipeline(&mut r, &a).is_some() {
        determinism(&mut r, &a, &b);
    } else {
        r.record(10, false, "pipeline did not complete".into());
    }
    println!("acceptance: {} of 10 criteria passed", 10 - r.failures);
    if r.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
