//! Objectives, exact gradients, SGD with momentum, plateau decay and the
//! training loop for both head kinds.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{
    kl_to_prior, DeterministicHead, DropoutMasks, Gradients, ParamSet, VariationalHead,
};
use crate::tensor::{softmax_rows, Matrix, RngStream};

/// Smallest probability fed to a logarithm in [`cross_entropy_loss`].
pub const PROB_CLAMP: f64 = 1e-12;

/// Minimum absolute drop in validation loss that counts as improvement.
pub const PLATEAU_THRESHOLD: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    /// Fixed KL weight per minibatch; `None` uses 1 / train size, which with a
    /// batch-mean likelihood makes every step an unbiased estimate of the
    /// full-data negative ELBO divided by the train size.
    pub kl_scale: Option<f64>,
    pub mc_train_samples: usize,
    /// MC passes used to score the variational head on validation data.
    pub val_mc_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 30,
            plateau_patience: 3,
            plateau_factor: 0.1,
            kl_scale: None,
            mc_train_samples: 1,
            val_mc_samples: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config(format!(
                "plateau_factor must lie in (0, 1), got {}",
                self.plateau_factor
            )));
        }
        if self.batch_size == 0 || self.plateau_patience == 0 || self.mc_train_samples == 0 || self.val_mc_samples == 0 {
            return Err(Error::Config(
                "batch_size, plateau_patience, mc_train_samples and val_mc_samples must be >= 1".into(),
            ));
        }
        if let Some(s) = self.kl_scale {
            if !(s >= 0.0) {
                return Err(Error::Config(format!("kl_scale must be >= 0, got {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.is_empty() || rows == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    if labels.len() != rows {
        return Err(Error::Shape {
            op: "labels",
            lhs: (rows, classes),
            rhs: (labels.len(), 1),
        });
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Validation(format!("label {y} out of range for {classes} classes")));
    }
    Ok(())
}

/// Mean `-log softmax(logits)[label]` and its gradient w.r.t. the logits.
pub fn nll_from_logits(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    check_labels(labels, logits.rows(), logits.cols())?;
    let b = logits.rows() as f64;
    let mut grad = softmax_rows(logits)?;
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
        let g = grad.row_mut(r);
        g[y] -= 1.0;
        g.iter_mut().for_each(|v| *v /= b);
    }
    Ok((total / b, grad))
}

/// Negative ELBO on one minibatch at one Flipout draw.
pub fn elbo_loss(
    head: &VariationalHead,
    batch_x: &Matrix,
    batch_y: &[usize],
    kl_scale: f64,
    stream: &RngStream,
) -> Result<ElboTerms> {
    check_labels(batch_y, batch_x.rows(), head.num_classes())?;
    let logits = head.forward_flipout(batch_x, stream)?;
    let (nll, _) = nll_from_logits(&logits, batch_y)?;
    let kl = kl_scale * kl_to_prior(head);
    Ok(ElboTerms { loss: nll + kl, nll, kl })
}

/// Exact gradients of [`elbo_loss`] with the Flipout noise drawn from
/// `stream` held fixed.
pub fn grad_elbo(
    head: &VariationalHead,
    batch_x: &Matrix,
    batch_y: &[usize],
    kl_scale: f64,
    stream: &RngStream,
) -> Result<(ElboTerms, Gradients)> {
    check_labels(batch_y, batch_x.rows(), head.num_classes())?;
    let (logits, trace) = head.forward_flipout_traced(batch_x, stream)?;
    let (nll, grad_logits) = nll_from_logits(&logits, batch_y)?;
    let mut grads = head.backward_flipout(&trace, &grad_logits)?;
    grads.add_scaled(&head.kl_gradients(kl_scale), 1.0);
    let kl = kl_scale * kl_to_prior(head);
    Ok((ElboTerms { loss: nll + kl, nll, kl }, grads))
}

/// Likelihood term averaged over `samples` Flipout draws (`stream.child(m)`).
/// With one sample this is exactly [`grad_elbo`] on `stream`.
pub fn grad_elbo_mc(
    head: &VariationalHead,
    batch_x: &Matrix,
    batch_y: &[usize],
    kl_scale: f64,
    stream: &RngStream,
    samples: usize,
) -> Result<(ElboTerms, Gradients)> {
    if samples <= 1 {
        return grad_elbo(head, batch_x, batch_y, kl_scale, stream);
    }
    let mut grads = head.kl_gradients(kl_scale);
    let mut nll = 0.0;
    let w = 1.0 / samples as f64;
    for m in 0..samples {
        let (logits, trace) = head.forward_flipout_traced(batch_x, &stream.child(m as u64))?;
        let (n, g) = nll_from_logits(&logits, batch_y)?;
        nll += w * n;
        grads.add_scaled(&head.backward_flipout(&trace, &g)?, w);
    }
    let kl = kl_scale * kl_to_prior(head);
    Ok((ElboTerms { loss: nll + kl, nll, kl }, grads))
}

/// Mean `-log p[label]` over rows, probabilities clamped at [`PROB_CLAMP`].
pub fn cross_entropy_loss(probs: &Matrix, batch_y: &[usize]) -> Result<f64> {
    check_labels(batch_y, probs.rows(), probs.cols())?;
    let total: f64 = batch_y
        .iter()
        .enumerate()
        .map(|(r, &y)| -probs.get(r, y).max(PROB_CLAMP).ln())
        .sum();
    Ok(total / probs.rows() as f64)
}

/// Cross-entropy and exact gradients for the deterministic head. Dropout
/// masks come from `stream` when the head's dropout is nonzero.
pub fn grad_cross_entropy(
    head: &DeterministicHead,
    batch_x: &Matrix,
    batch_y: &[usize],
    stream: &RngStream,
) -> Result<(f64, Gradients)> {
    check_labels(batch_y, batch_x.rows(), head.num_classes())?;
    let masks = (head.dropout() > 0.0).then(|| DropoutMasks::sample(head, batch_x.rows(), stream));
    let (logits, trace) = head.forward_traced(batch_x, masks)?;
    let (loss, grad_logits) = nll_from_logits(&logits, batch_y)?;
    Ok((loss, head.backward(&trace, &grad_logits)?))
}

/// `v <- momentum * v + g; p <- p - lr * v` on one parameter block.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Shape {
            op: "sgd_momentum_step",
            lhs: (params.len(), 1),
            rhs: (grads.len(), velocity.len()),
        });
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum SGD holding one velocity buffer per parameter block.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub momentum: f64,
    velocity: Gradients,
}

impl SgdMomentum {
    pub fn new<P: ParamSet>(params: &P, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Gradients::zeros_like(params),
        }
    }

    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &Gradients, lr: f64) -> Result<()> {
        let mut blocks = params.blocks_mut();
        if blocks.len() != grads.blocks.len() {
            return Err(Error::Shape {
                op: "SgdMomentum::step",
                lhs: (blocks.len(), 0),
                rhs: (grads.blocks.len(), 0),
            });
        }
        for ((p, g), v) in blocks.iter_mut().zip(&grads.blocks).zip(&mut self.velocity.blocks) {
            sgd_momentum_step(p, g, v, lr, self.momentum)?;
        }
        Ok(())
    }
}

/// Reduce-on-plateau: after `patience` consecutive epochs without an
/// improvement larger than [`PLATEAU_THRESHOLD`], multiply the rate by
/// `factor` and restart the count.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    patience: usize,
    factor: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize, factor: f64) -> Self {
        Self {
            patience: patience.max(1),
            factor,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn step(&mut self, val_loss: f64, lr: f64) -> f64 {
        if val_loss < self.best - PLATEAU_THRESHOLD {
            self.best = val_loss;
            self.bad_epochs = 0;
            return lr;
        }
        self.best = self.best.min(val_loss);
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

/// Rate to use after the last entry of `val_losses`, given the rate `lr`
/// in effect during that epoch.
pub fn plateau_scheduler_step(val_losses: &[f64], patience: usize, factor: f64, lr: f64) -> f64 {
    let mut sched = PlateauScheduler::new(patience, factor);
    let mut decayed = false;
    for &loss in val_losses {
        decayed = sched.step(loss, 1.0) != 1.0;
    }
    if decayed {
        lr * factor
    } else {
        lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub nll: f64,
    pub kl: f64,
    pub val_loss: f64,
    pub val_top1: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best_val_loss(&self) -> f64 {
        self.records
            .iter()
            .find(|r| r.epoch == self.best_epoch)
            .map_or(f64::INFINITY, |r| r.val_loss)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "epoch,train_loss,nll,kl,val_loss,val_top1,lr")?;
        for r in &self.records {
            writeln!(
                f,
                "{},{},{},{},{},{},{}",
                r.epoch, r.train_loss, r.nll, r.kl, r.val_loss, r.val_top1, r.lr
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

const SHUFFLE_STREAM: u64 = 0x5F1E;
const STEP_STREAM: u64 = 0x57E9;
const VAL_STREAM: u64 = 0x7A11;

fn top1(probs: &Matrix, labels: &[usize]) -> f64 {
    let hits = probs
        .iter_rows()
        .zip(labels)
        .filter(|(row, &y)| crate::uncertainty::argmax(row) == y)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// `(nll of the MC predictive mean, top-1)` for a variational head.
fn score_variational(head: &VariationalHead, x: &Matrix, y: &[usize], passes: usize, seed: u64) -> Result<(f64, f64)> {
    let root = RngStream::new(seed, VAL_STREAM);
    let mut mean = Matrix::zeros(x.rows(), head.num_classes());
    for t in 0..passes {
        let p = head.forward_sampled(x, &root.child(t as u64))?;
        for (m, v) in mean.data_mut().iter_mut().zip(p.data()) {
            *m += v / passes as f64;
        }
    }
    Ok((cross_entropy_loss(&mean, y)?, top1(&mean, y)))
}

fn score_deterministic(head: &DeterministicHead, x: &Matrix, y: &[usize]) -> Result<(f64, f64)> {
    let probs = crate::head::forward_deterministic(head, x, false, &RngStream::new(0, 0))?;
    Ok((cross_entropy_loss(&probs, y)?, top1(&probs, y)))
}

fn check_training_data(in_dim: usize, train_x: &Matrix, train_y: &[usize], val_x: &Matrix, val_y: &[usize]) -> Result<()> {
    if train_x.cols() != in_dim || val_x.cols() != in_dim {
        return Err(Error::Config(format!(
            "head expects {in_dim}-dim inputs, train has {} and val has {}",
            train_x.cols(),
            val_x.cols()
        )));
    }
    if train_x.rows() != train_y.len() || val_x.rows() != val_y.len() {
        return Err(Error::Config("feature rows and labels differ in length".into()));
    }
    if train_y.is_empty() || val_y.is_empty() {
        return Err(Error::Config("training and validation sets must be nonempty".into()));
    }
    Ok(())
}

/// Runs epochs of shuffled minibatches and returns the parameters of the
/// epoch with the lowest validation loss.
fn run_epochs<H, F, S>(
    mut head: H,
    train_x: &Matrix,
    train_y: &[usize],
    cfg: &TrainConfig,
    mut step: F,
    mut score: S,
) -> Result<(H, TrainHistory)>
where
    H: ParamSet + Clone,
    F: FnMut(&H, &Matrix, &[usize], f64, &RngStream) -> Result<(ElboTerms, Gradients)>,
    S: FnMut(&H) -> Result<(f64, f64)>,
{
    cfg.validate()?;
    let n = train_y.len();
    let mut optimizer = SgdMomentum::new(&head, cfg.momentum);
    let mut scheduler = PlateauScheduler::new(cfg.plateau_patience, cfg.plateau_factor);
    let mut lr = cfg.learning_rate;
    let mut history = TrainHistory::default();
    let mut best = (f64::INFINITY, head.clone());
    let root = RngStream::new(cfg.seed, STEP_STREAM);

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        RngStream::new(cfg.seed, SHUFFLE_STREAM)
            .child(epoch as u64)
            .shuffle(&mut order);
        let (mut loss, mut nll, mut kl) = (0.0, 0.0, 0.0);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = train_x.select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| train_y[i]).collect();
            let kl_scale = cfg.kl_scale.unwrap_or(1.0 / n as f64);
            let stream = root.derive(&[epoch as u64, b as u64]);
            let (terms, grads) = step(&head, &x, &y, kl_scale, &stream)?;
            let w = idx.len() as f64 / n as f64;
            loss += w * terms.loss;
            nll += w * terms.nll;
            kl += w * terms.kl;
            optimizer.step(&mut head, &grads, lr)?;
        }
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("training loss diverged at epoch {}", epoch + 1)));
        }
        let (val_loss, val_top1) = score(&head)?;
        history.records.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss,
            nll,
            kl,
            val_loss,
            val_top1,
            lr,
        });
        if val_loss < best.0 {
            best = (val_loss, head.clone());
            history.best_epoch = epoch + 1;
        }
        lr = scheduler.step(val_loss, lr);
    }
    Ok((best.1, history))
}

pub fn train_variational(
    head: VariationalHead,
    train_x: &Matrix,
    train_y: &[usize],
    val_x: &Matrix,
    val_y: &[usize],
    cfg: &TrainConfig,
) -> Result<(VariationalHead, TrainHistory)> {
    check_training_data(head.in_dim(), train_x, train_y, val_x, val_y)?;
    let samples = cfg.mc_train_samples;
    run_epochs(
        head,
        train_x,
        train_y,
        cfg,
        |h, x, y, kl_scale, s| grad_elbo_mc(h, x, y, kl_scale, s, samples),
        |h| score_variational(h, val_x, val_y, cfg.val_mc_samples, cfg.seed),
    )
}

pub fn train_deterministic(
    head: DeterministicHead,
    train_x: &Matrix,
    train_y: &[usize],
    val_x: &Matrix,
    val_y: &[usize],
    cfg: &TrainConfig,
) -> Result<(DeterministicHead, TrainHistory)> {
    check_training_data(head.in_dim(), train_x, train_y, val_x, val_y)?;
    run_epochs(
        head,
        train_x,
        train_y,
        cfg,
        |h, x, y, _, s| {
            let (loss, g) = grad_cross_entropy(h, x, y, s)?;
            Ok((ElboTerms { loss, nll: loss, kl: 0.0 }, g))
        },
        |h| score_deterministic(h, val_x, val_y),
    )
}
