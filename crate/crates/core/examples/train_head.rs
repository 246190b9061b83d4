//! Trains a variational head (negative ELBO, Flipout) and a deterministic
//! head (cross-entropy) on one modality and prints their learning curves.

mod common;

use bayes_fusion::head::{init_deterministic_head, init_variational_head};
use bayes_fusion::train::{train_deterministic, train_variational, TrainHistory};

fn show(name: &str, h: &TrainHistory) {
    println!("{name}");
    println!("  epoch  train_loss  val_loss  val_top1  lr");
    for r in &h.records {
        println!("  {:>5}  {:>10.4}  {:>8.4}  {:>8.3}  {:.0e}", r.epoch, r.train_loss, r.val_loss, r.val_top1, r.lr);
    }
    println!("  best epoch {} (val loss {:.4})", h.best_epoch, h.best_val_loss());
}

fn main() -> bayes_fusion::Result<()> {
    let s = common::splits(&common::spec())?;
    let (tx, vx) = (s.train.features(0), s.val.features(0));
    let dims = [tx.cols(), 64, 32, s.train.num_classes()];
    let cfg = common::train_config();

    let vi = init_variational_head(&dims, 1, 1.0)?;
    let (_, h) = train_variational(vi, tx, s.train.labels(), vx, s.val.labels(), &cfg)?;
    show("variational head", &h);

    let dnn = init_deterministic_head(&dims, 1, 0.0)?;
    let (_, h) = train_deterministic(dnn, tx, s.train.labels(), vx, s.val.labels(), &cfg)?;
    show("deterministic head", &h);
    Ok(())
}
