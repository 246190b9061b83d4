#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use bayes_fusion::head::{init_deterministic_head, DeterministicHead, ParamSet};
use bayes_fusion::tensor::{Matrix, RngStream};

/// Sets the `index`-th parameter in flattened block order.
pub fn set_flat<P: ParamSet>(params: &mut P, mut index: usize, value: f64) {
    for block in params.blocks_mut() {
        if index < block.len() {
            block[index] = value;
            return;
        }
        index -= block.len();
    }
    panic!("parameter index out of range");
}

/// Largest relative error between `analytic` and central differences of
/// `loss`, with relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn max_fd_error<P: ParamSet + Clone>(
    params: &P,
    analytic: &[f64],
    step: f64,
    floor: f64,
    loss: impl Fn(&P) -> f64,
) -> f64 {
    let base = params.flatten();
    assert_eq!(base.len(), analytic.len());
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = params.clone();
        set_flat(&mut plus, i, base[i] + step);
        let mut minus = params.clone();
        set_flat(&mut minus, i, base[i] - step);
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * step);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    worst
}

pub fn random_matrix(stream: &mut RngStream, rows: usize, cols: usize, scale: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    stream.fill_gaussian(m.data_mut());
    m.scale(scale)
}

/// Random categorical rows; `sharpness` spreads the logits.
pub fn random_simplex_rows(stream: &mut RngStream, rows: usize, k: usize, sharpness: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, k);
    for r in 0..rows {
        let row = m.row_mut(r);
        for v in row.iter_mut() {
            *v = (sharpness * stream.gaussian()).exp();
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    m
}

/// Relative paths of every file under `root` with the given extension, sorted.
pub fn files_with_extension(root: &Path, ext: &str) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == ext) {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Deterministic head with nonzero biases: with zero biases a fully dropped
/// row puts its pre-activation exactly on the ReLU kink, where central
/// differences see half a slope.
pub fn kink_free_head(dims: &[usize], seed: u64, dropout: f64) -> DeterministicHead {
    let mut head = init_deterministic_head(dims, seed, dropout).unwrap();
    let mut s = RngStream::new(seed, 0xB1A5);
    for l in head.layers_mut() {
        l.bias.iter_mut().for_each(|b| *b = 0.1 + 0.2 * s.uniform());
    }
    head
}
