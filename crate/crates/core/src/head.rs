//! Three-layer classification heads over embeddings.
//!
//! [`VariationalHead`] keeps a mean-field Gaussian `N(mu, softplus(rho)^2)` over
//! every weight and bias. Training runs through Flipout, prediction through
//! directly sampled weights. [`DeterministicHead`] is the point-estimate
//! baseline with inverted dropout in front of every dense layer, which also
//! serves MC dropout at prediction time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    inverse_softplus, sample_gaussian, sample_rademacher, sigmoid, softmax_rows, softplus, Matrix,
    RngStream,
};

/// Number of dense layers in a head.
pub const HEAD_DEPTH: usize = 3;

/// Initial posterior scale as a fraction of the prior scale.
pub const INIT_SIGMA_FRACTION: f64 = 0.05;

/// Flat parameter view shared by heads and their gradients.
pub trait ParamSet {
    /// Parameter blocks in a fixed, documented order.
    fn blocks(&self) -> Vec<&[f64]>;
    fn blocks_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.blocks().concat()
    }
}

/// Gradient blocks laid out like the [`ParamSet::blocks`] of their head.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like<P: ParamSet + ?Sized>(params: &P) -> Self {
        Self {
            blocks: params.blocks().iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.concat()
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.blocks.iter_mut().flatten().for_each(|v| *v *= s);
    }
}

fn relu_in_place(m: &mut Matrix) {
    m.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

fn relu_backward(grad: &mut Matrix, pre: &Matrix) {
    for (g, &z) in grad.data_mut().iter_mut().zip(pre.data()) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
}

fn check_input(x: &Matrix, in_dim: usize, op: &'static str) -> Result<()> {
    if x.cols() != in_dim {
        return Err(Error::Shape {
            op,
            lhs: x.shape(),
            rhs: (in_dim, 0),
        });
    }
    Ok(())
}

fn he_normal(stream: &mut RngStream, in_dim: usize, out_dim: usize) -> Matrix {
    sample_gaussian(stream, in_dim, out_dim).scale((2.0 / in_dim as f64).sqrt())
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() != HEAD_DEPTH + 1 || dims.iter().any(|&d| d == 0) {
        return Err(Error::Config(format!(
            "head dims must be {} positive sizes [in, h1, h2, classes], got {dims:?}",
            HEAD_DEPTH + 1
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariationalDenseLayer {
    pub weight_mu: Matrix,
    pub weight_rho: Matrix,
    pub bias_mu: Vec<f64>,
    pub bias_rho: Vec<f64>,
    pub prior_mean: f64,
    pub prior_sigma: f64,
}

/// Noise held fixed for one Flipout pass through a layer.
#[derive(Clone, Debug)]
pub struct FlipoutNoise {
    /// Shared Gaussian perturbation direction, `in x out`.
    pub weight_eps: Matrix,
    /// Per-example input signs, `batch x in`.
    pub sign_in: Matrix,
    /// Per-example output signs, `batch x out`.
    pub sign_out: Matrix,
    /// Per-example bias noise, `batch x out`.
    pub bias_eps: Matrix,
}

impl FlipoutNoise {
    pub fn sample(stream: &mut RngStream, batch: usize, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight_eps: sample_gaussian(stream, in_dim, out_dim),
            sign_in: sample_rademacher(stream, batch, in_dim),
            sign_out: sample_rademacher(stream, batch, out_dim),
            bias_eps: sample_gaussian(stream, batch, out_dim),
        }
    }
}

/// Per-layer activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct FlipoutCache {
    input: Matrix,
    noise: FlipoutNoise,
    weight_delta: Matrix,
}

impl VariationalDenseLayer {
    pub fn init(
        in_dim: usize,
        out_dim: usize,
        stream: &mut RngStream,
        prior_sigma: f64,
    ) -> Self {
        let rho = inverse_softplus(INIT_SIGMA_FRACTION * prior_sigma);
        Self {
            weight_mu: he_normal(stream, in_dim, out_dim),
            weight_rho: Matrix::filled(in_dim, out_dim, rho),
            bias_mu: vec![0.0; out_dim],
            bias_rho: vec![rho; out_dim],
            prior_mean: 0.0,
            prior_sigma,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight_mu.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight_mu.cols()
    }

    pub fn weight_sigma(&self) -> Matrix {
        self.weight_rho.map(softplus)
    }

    pub fn bias_sigma(&self) -> Vec<f64> {
        self.bias_rho.iter().map(|&r| softplus(r)).collect()
    }

    pub fn set_sigma(&mut self, sigma: f64) {
        let rho = inverse_softplus(sigma);
        self.weight_rho.data_mut().iter_mut().for_each(|v| *v = rho);
        self.bias_rho.iter_mut().for_each(|v| *v = rho);
    }

    pub fn kl_to_prior(&self) -> f64 {
        let mus = self.weight_mu.data().iter().chain(&self.bias_mu);
        let rhos = self.weight_rho.data().iter().chain(&self.bias_rho);
        mus.zip(rhos)
            .map(|(&mu, &rho)| gaussian_kl(mu, softplus(rho), self.prior_mean, self.prior_sigma))
            .sum()
    }

    /// `x W_mu + b_mu`, the posterior-mean layer.
    pub fn forward_mean(&self, x: &Matrix) -> Result<Matrix> {
        check_input(x, self.in_dim(), "variational layer")?;
        let mut y = x.matmul(&self.weight_mu)?;
        y.add_row_broadcast(&self.bias_mu)?;
        Ok(y)
    }

    /// Flipout pass with explicit noise:
    /// `y = x W_mu + b_mu + ((x * s) (sigma * eps)) * r + sigma_b * eps_b`.
    pub fn forward_flipout_with(
        &self,
        x: &Matrix,
        noise: FlipoutNoise,
    ) -> Result<(Matrix, FlipoutCache)> {
        let mut y = self.forward_mean(x)?;
        let weight_delta = self.weight_sigma().hadamard(&noise.weight_eps)?;
        let perturbation = x
            .hadamard(&noise.sign_in)?
            .matmul(&weight_delta)?
            .hadamard(&noise.sign_out)?;
        let bias_sigma = self.bias_sigma();
        for r in 0..y.rows() {
            let p = perturbation.row(r);
            let e = noise.bias_eps.row(r);
            for (c, v) in y.row_mut(r).iter_mut().enumerate() {
                *v += p[c] + bias_sigma[c] * e[c];
            }
        }
        Ok((
            y,
            FlipoutCache {
                input: x.clone(),
                noise,
                weight_delta,
            },
        ))
    }

    pub fn forward_flipout(&self, x: &Matrix, stream: &mut RngStream) -> Result<Matrix> {
        check_input(x, self.in_dim(), "variational layer")?;
        let noise = FlipoutNoise::sample(stream, x.rows(), self.in_dim(), self.out_dim());
        Ok(self.forward_flipout_with(x, noise)?.0)
    }

    /// Draws one full weight matrix and bias, `mu + sigma * eps`.
    pub fn sample_weights(&self, stream: &mut RngStream) -> (Matrix, Vec<f64>) {
        let eps = sample_gaussian(stream, self.in_dim(), self.out_dim());
        let mut w = self.weight_sigma();
        for ((w, &e), &mu) in w.data_mut().iter_mut().zip(eps.data()).zip(self.weight_mu.data()) {
            *w = mu + *w * e;
        }
        let mut eb = vec![0.0; self.out_dim()];
        stream.fill_gaussian(&mut eb);
        let b = self
            .bias_mu
            .iter()
            .zip(&self.bias_rho)
            .zip(&eb)
            .map(|((&mu, &rho), &e)| mu + softplus(rho) * e)
            .collect();
        (w, b)
    }

    /// Pathwise gradients for the likelihood term at the cached noise.
    /// Returns `(d weight_mu, d weight_rho, d bias_mu, d bias_rho, d input)`.
    pub fn backward_flipout(&self, cache: &FlipoutCache, grad_out: &Matrix) -> Result<LayerGrads> {
        let FlipoutCache {
            input,
            noise,
            weight_delta,
        } = cache;
        let weight_mu = input.t_matmul(grad_out)?;
        let bias_mu = grad_out.column_sums();

        let grad_flipped = grad_out.hadamard(&noise.sign_out)?;
        let signed_input = input.hadamard(&noise.sign_in)?;
        let delta_grad = signed_input.t_matmul(&grad_flipped)?;
        let mut weight_rho = delta_grad.hadamard(&noise.weight_eps)?;
        for (g, &rho) in weight_rho.data_mut().iter_mut().zip(self.weight_rho.data()) {
            *g *= sigmoid(rho);
        }
        let bias_rho = grad_out
            .hadamard(&noise.bias_eps)?
            .column_sums()
            .into_iter()
            .zip(&self.bias_rho)
            .map(|(g, &rho)| g * sigmoid(rho))
            .collect();

        let input_grad = grad_out
            .matmul_t(&self.weight_mu)?
            .add(&grad_flipped.matmul_t(weight_delta)?.hadamard(&noise.sign_in)?)?;
        Ok(LayerGrads {
            blocks: vec![weight_mu.into_vec(), weight_rho.into_vec(), bias_mu, bias_rho],
            input: input_grad,
        })
    }

    /// Adds the gradient of `scale * KL` to the four parameter blocks.
    pub fn accumulate_kl_grad(&self, blocks: &mut [Vec<f64>], scale: f64) {
        let var_p = self.prior_sigma * self.prior_sigma;
        let add = |mu_g: &mut [f64], rho_g: &mut [f64], mus: &[f64], rhos: &[f64]| {
            for i in 0..mus.len() {
                let sigma = softplus(rhos[i]);
                mu_g[i] += scale * (mus[i] - self.prior_mean) / var_p;
                rho_g[i] += scale * (sigma / var_p - 1.0 / sigma) * sigmoid(rhos[i]);
            }
        };
        let (w, rest) = blocks.split_at_mut(2);
        let (w_mu, w_rho) = w.split_at_mut(1);
        add(&mut w_mu[0], &mut w_rho[0], self.weight_mu.data(), self.weight_rho.data());
        let (b_mu, b_rho) = rest.split_at_mut(1);
        add(&mut b_mu[0], &mut b_rho[0], &self.bias_mu, &self.bias_rho);
    }
}

/// Parameter-block gradients of one layer plus the gradient w.r.t. its input.
#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub blocks: Vec<Vec<f64>>,
    pub input: Matrix,
}

/// `KL(N(mu, sigma^2) || N(prior_mean, prior_sigma^2))`.
pub fn gaussian_kl(mu: f64, sigma: f64, prior_mean: f64, prior_sigma: f64) -> f64 {
    let d = mu - prior_mean;
    (prior_sigma / sigma).ln() + (sigma * sigma + d * d) / (2.0 * prior_sigma * prior_sigma) - 0.5
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariationalHead {
    layers: Vec<VariationalDenseLayer>,
}

/// Per-layer caches of a Flipout pass through the whole head.
#[derive(Clone, Debug)]
pub struct HeadFlipoutTrace {
    caches: Vec<FlipoutCache>,
    pre_activations: Vec<Matrix>,
}

impl VariationalHead {
    pub fn from_layers(layers: Vec<VariationalDenseLayer>) -> Result<Self> {
        if layers.len() != HEAD_DEPTH {
            return Err(Error::Config(format!(
                "a head has {HEAD_DEPTH} layers, got {}",
                layers.len()
            )));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape {
                    op: "chain variational layers",
                    lhs: pair[0].weight_mu.shape(),
                    rhs: (i + 1, pair[1].in_dim()),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[VariationalDenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [VariationalDenseLayer] {
        &mut self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].in_dim()];
        dims.extend(self.layers.iter().map(|l| l.out_dim()));
        dims
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[HEAD_DEPTH - 1].out_dim()
    }

    pub fn prior(&self) -> (f64, f64) {
        (self.layers[0].prior_mean, self.layers[0].prior_sigma)
    }

    pub fn set_sigma(&mut self, sigma: f64) {
        self.layers.iter_mut().for_each(|l| l.set_sigma(sigma));
    }

    /// Rounds every parameter through `f32`, as a checkpoint would.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        for b in out.blocks_mut() {
            b.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        out
    }

    /// Logits of the posterior-mean network.
    pub fn forward_mean(&self, x: &Matrix) -> Result<Matrix> {
        check_input(x, self.in_dim(), "variational head")?;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward_mean(&h)?;
            if i + 1 < HEAD_DEPTH {
                relu_in_place(&mut h);
            }
        }
        Ok(h)
    }

    /// Flipout pass returning logits and the trace needed for backprop.
    /// Layer `i` draws its noise from `stream.child(i)`.
    pub fn forward_flipout_traced(
        &self,
        batch: &Matrix,
        stream: &RngStream,
    ) -> Result<(Matrix, HeadFlipoutTrace)> {
        check_input(batch, self.in_dim(), "variational head")?;
        let mut caches = Vec::with_capacity(HEAD_DEPTH);
        let mut pre_activations = Vec::with_capacity(HEAD_DEPTH - 1);
        let mut h = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut s = stream.child(i as u64);
            let noise = FlipoutNoise::sample(&mut s, h.rows(), layer.in_dim(), layer.out_dim());
            let (z, cache) = layer.forward_flipout_with(&h, noise)?;
            caches.push(cache);
            h = z;
            if i + 1 < HEAD_DEPTH {
                pre_activations.push(h.clone());
                relu_in_place(&mut h);
            }
        }
        Ok((
            h,
            HeadFlipoutTrace {
                caches,
                pre_activations,
            },
        ))
    }

    pub fn forward_flipout(&self, batch: &Matrix, stream: &RngStream) -> Result<Matrix> {
        Ok(self.forward_flipout_traced(batch, stream)?.0)
    }

    /// Backpropagates `d loss / d logits` through a traced Flipout pass.
    pub fn backward_flipout(&self, trace: &HeadFlipoutTrace, grad_logits: &Matrix) -> Result<Gradients> {
        let mut per_layer: Vec<Vec<Vec<f64>>> = vec![Vec::new(); HEAD_DEPTH];
        let mut grad = grad_logits.clone();
        for i in (0..HEAD_DEPTH).rev() {
            let lg = self.layers[i].backward_flipout(&trace.caches[i], &grad)?;
            per_layer[i] = lg.blocks;
            if i > 0 {
                grad = lg.input;
                relu_backward(&mut grad, &trace.pre_activations[i - 1]);
            }
        }
        Ok(Gradients {
            blocks: per_layer.into_iter().flatten().collect(),
        })
    }

    /// Gradient of `scale * kl_to_prior`, in block order.
    pub fn kl_gradients(&self, scale: f64) -> Gradients {
        let mut g = Gradients::zeros_like(self);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.accumulate_kl_grad(&mut g.blocks[4 * i..4 * i + 4], scale);
        }
        g
    }

    /// One stochastic pass with weights drawn directly from the posterior.
    /// Layer `i` draws from `stream.child(i)`; the same draw is applied to
    /// every row of `x`.
    pub fn forward_sampled(&self, x: &Matrix, stream: &RngStream) -> Result<Matrix> {
        check_input(x, self.in_dim(), "variational head")?;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = layer.sample_weights(&mut stream.child(i as u64));
            h = h.matmul(&w)?;
            h.add_row_broadcast(&b)?;
            if i + 1 < HEAD_DEPTH {
                relu_in_place(&mut h);
            }
        }
        softmax_rows(&h)
    }
}

impl ParamSet for VariationalHead {
    /// Per layer: weight_mu, weight_rho, bias_mu, bias_rho.
    fn blocks(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight_mu.data(),
                    l.weight_rho.data(),
                    l.bias_mu.as_slice(),
                    l.bias_rho.as_slice(),
                ]
            })
            .collect()
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight_mu.data_mut(),
                    l.weight_rho.data_mut(),
                    l.bias_mu.as_mut_slice(),
                    l.bias_rho.as_mut_slice(),
                ]
            })
            .collect()
    }
}

/// He-normal means, posterior scale at `INIT_SIGMA_FRACTION * prior_sigma`,
/// zero bias means, prior `N(0, prior_sigma^2)`.
pub fn init_variational_head(dims: &[usize], init_seed: u64, prior_sigma: f64) -> Result<VariationalHead> {
    check_dims(dims)?;
    if !(prior_sigma > 0.0) {
        return Err(Error::Config(format!("prior_sigma must be > 0, got {prior_sigma}")));
    }
    let root = RngStream::new(init_seed, 0x1417);
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| VariationalDenseLayer::init(w[0], w[1], &mut root.child(i as u64), prior_sigma))
        .collect();
    VariationalHead::from_layers(layers)
}

pub fn kl_to_prior(head: &VariationalHead) -> f64 {
    head.layers.iter().map(|l| l.kl_to_prior()).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        check_input(x, self.in_dim(), "dense layer")?;
        let mut y = x.matmul(&self.weight)?;
        y.add_row_broadcast(&self.bias)?;
        Ok(y)
    }
}

/// Inverted-dropout masks: entries are `0` or `1 / (1 - p)`.
pub fn dropout_mask(stream: &mut RngStream, rows: usize, cols: usize, p: f64) -> Matrix {
    let keep_scale = 1.0 / (1.0 - p);
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = if stream.uniform() < p { 0.0 } else { keep_scale };
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeterministicHead {
    layers: Vec<DenseLayer>,
    dropout: f64,
}

/// Masks for one dropout pass, one per layer input.
#[derive(Clone, Debug)]
pub struct DropoutMasks {
    pub masks: Vec<Matrix>,
}

impl DropoutMasks {
    /// Row `r` of layer `l` draws from `stream.derive(&[l, r])`, so a row's
    /// mask does not depend on the batch size.
    pub fn sample(head: &DeterministicHead, rows: usize, stream: &RngStream) -> Self {
        let masks = head
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let mut m = Matrix::zeros(rows, layer.in_dim());
                for r in 0..rows {
                    let mut s = stream.derive(&[l as u64, r as u64]);
                    let row = dropout_mask(&mut s, 1, layer.in_dim(), head.dropout);
                    m.row_mut(r).copy_from_slice(row.data());
                }
                m
            })
            .collect();
        Self { masks }
    }
}

/// Activations kept for backprop through a deterministic pass.
#[derive(Clone, Debug)]
pub struct DeterministicTrace {
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
    masks: Option<DropoutMasks>,
}

impl DeterministicHead {
    pub fn from_layers(layers: Vec<DenseLayer>, dropout: f64) -> Result<Self> {
        if layers.len() != HEAD_DEPTH {
            return Err(Error::Config(format!(
                "a head has {HEAD_DEPTH} layers, got {}",
                layers.len()
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {dropout}")));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape {
                    op: "chain dense layers",
                    lhs: pair[0].weight.shape(),
                    rhs: (i + 1, pair[1].in_dim()),
                });
            }
        }
        Ok(Self { layers, dropout })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {p}")));
        }
        self.dropout = p;
        Ok(())
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].in_dim()];
        dims.extend(self.layers.iter().map(|l| l.out_dim()));
        dims
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[HEAD_DEPTH - 1].out_dim()
    }

    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        for b in out.blocks_mut() {
            b.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        out
    }

    /// Logits, optionally with fixed dropout masks applied to each layer input.
    pub fn forward_traced(
        &self,
        x: &Matrix,
        masks: Option<DropoutMasks>,
    ) -> Result<(Matrix, DeterministicTrace)> {
        check_input(x, self.in_dim(), "deterministic head")?;
        let mut inputs = Vec::with_capacity(HEAD_DEPTH);
        let mut pre_activations = Vec::with_capacity(HEAD_DEPTH - 1);
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(m) = &masks {
                h = h.hadamard(&m.masks[i])?;
            }
            let z = layer.forward(&h)?;
            inputs.push(h);
            h = z;
            if i + 1 < HEAD_DEPTH {
                pre_activations.push(h.clone());
                relu_in_place(&mut h);
            }
        }
        Ok((
            h,
            DeterministicTrace {
                inputs,
                pre_activations,
                masks,
            },
        ))
    }

    pub fn forward_logits(&self, x: &Matrix, dropout_active: bool, stream: &RngStream) -> Result<Matrix> {
        let masks = (dropout_active && self.dropout > 0.0)
            .then(|| DropoutMasks::sample(self, x.rows(), stream));
        Ok(self.forward_traced(x, masks)?.0)
    }

    pub fn backward(&self, trace: &DeterministicTrace, grad_logits: &Matrix) -> Result<Gradients> {
        let mut per_layer: Vec<Vec<Vec<f64>>> = vec![Vec::new(); HEAD_DEPTH];
        let mut grad = grad_logits.clone();
        for i in (0..HEAD_DEPTH).rev() {
            let input = &trace.inputs[i];
            per_layer[i] = vec![input.t_matmul(&grad)?.into_vec(), grad.column_sums()];
            if i > 0 {
                let mut g = grad.matmul_t(&self.layers[i].weight)?;
                if let Some(m) = &trace.masks {
                    g = g.hadamard(&m.masks[i])?;
                }
                relu_backward(&mut g, &trace.pre_activations[i - 1]);
                grad = g;
            }
        }
        Ok(Gradients {
            blocks: per_layer.into_iter().flatten().collect(),
        })
    }
}

impl ParamSet for DeterministicHead {
    /// Per layer: weight, bias.
    fn blocks(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
            .collect()
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }
}

pub fn init_deterministic_head(dims: &[usize], init_seed: u64, dropout: f64) -> Result<DeterministicHead> {
    check_dims(dims)?;
    let root = RngStream::new(init_seed, 0xD3E7);
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| DenseLayer {
            weight: he_normal(&mut root.child(i as u64), w[0], w[1]),
            bias: vec![0.0; w[1]],
        })
        .collect();
    DeterministicHead::from_layers(layers, dropout)
}

/// Class probabilities of the deterministic head. With `dropout_active` each
/// layer input is masked by inverted dropout drawn from `stream`.
pub fn forward_deterministic(
    head: &DeterministicHead,
    x: &Matrix,
    dropout_active: bool,
    stream: &RngStream,
) -> Result<Matrix> {
    softmax_rows(&head.forward_logits(x, dropout_active, stream)?)
}

pub fn forward_flipout(head: &VariationalHead, batch: &Matrix, stream: &RngStream) -> Result<Matrix> {
    head.forward_flipout(batch, stream)
}

pub fn forward_sampled(head: &VariationalHead, x: &Matrix, stream: &RngStream) -> Result<Matrix> {
    head.forward_sampled(x, stream)
}

/// Either kind of head, as stored in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Variational(VariationalHead),
    Deterministic(DeterministicHead),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Variational,
    Deterministic,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Variational => "variational",
            HeadKind::Deterministic => "deterministic",
        }
    }
}

impl Head {
    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Variational(_) => HeadKind::Variational,
            Head::Deterministic(_) => HeadKind::Deterministic,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match self {
            Head::Variational(h) => h.dims(),
            Head::Deterministic(h) => h.dims(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_layer(in_dim: usize, out_dim: usize, seed: u64) -> VariationalDenseLayer {
        let mut s = RngStream::new(seed, 0);
        let mut l = VariationalDenseLayer::init(in_dim, out_dim, &mut s, 1.0);
        l.bias_mu.iter_mut().enumerate().for_each(|(i, b)| *b = 0.1 * i as f64);
        l.set_sigma(0.3);
        l
    }

    #[test]
    fn init_shapes_sigma_and_determinism() {
        let h = init_variational_head(&[8, 16, 16, 4], 5, 1.0).unwrap();
        assert_eq!(h.dims(), vec![8, 16, 16, 4]);
        assert_eq!(h.layers()[1].weight_mu.shape(), (16, 16));
        for l in h.layers() {
            for s in l.weight_sigma().data().iter().chain(&l.bias_sigma()) {
                assert!((s - 0.05).abs() < 1e-12);
            }
        }
        assert_eq!(h, init_variational_head(&[8, 16, 16, 4], 5, 1.0).unwrap());
        assert_ne!(h, init_variational_head(&[8, 16, 16, 4], 6, 1.0).unwrap());
        assert!(init_variational_head(&[8, 0, 16, 4], 5, 1.0).is_err());
    }

    #[test]
    fn kl_spot_values() {
        assert!(gaussian_kl(0.0, 1.0, 0.0, 1.0).abs() < 1e-12);
        assert!((gaussian_kl(1.0, 1.0, 0.0, 1.0) - 0.5).abs() < 1e-12);
        let expected = 2f64.ln() + 0.125 - 0.5;
        assert!((gaussian_kl(0.0, 0.5, 0.0, 1.0) - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_vanishes_at_the_prior() {
        let mut h = init_variational_head(&[3, 4, 4, 2], 1, 0.7).unwrap();
        for l in h.layers_mut() {
            l.weight_mu.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        h.set_sigma(0.7);
        assert!(kl_to_prior(&h).abs() < 1e-12);
        h.layers_mut()[0].bias_mu[0] = 0.1;
        assert!(kl_to_prior(&h) > 0.0);
    }

    #[test]
    fn flipout_collapses_to_mean_without_variance() {
        let mut h = init_variational_head(&[5, 7, 6, 3], 2, 1.0).unwrap();
        h.set_sigma(1e-12);
        let x = sample_gaussian(&mut RngStream::new(9, 0), 4, 5);
        let flip = h.forward_flipout(&x, &RngStream::new(1, 1)).unwrap();
        assert!(flip.max_abs_diff(&h.forward_mean(&x).unwrap()) < 1e-9);

        let sampled = h.forward_sampled(&x, &RngStream::new(1, 2)).unwrap();
        let mean = softmax_rows(&h.forward_mean(&x).unwrap()).unwrap();
        assert!(sampled.max_abs_diff(&mean) < 1e-9);
    }

    #[test]
    fn flipout_perturbs_identical_rows_differently() {
        let h = init_variational_head(&[4, 8, 8, 3], 3, 1.0).unwrap();
        let row = [0.3, -1.2, 0.8, 2.0];
        let x = Matrix::from_rows(&[row, row]).unwrap();
        let y = h.forward_flipout(&x, &RngStream::new(4, 4)).unwrap();
        assert_ne!(y.row(0), y.row(1));
    }

    #[test]
    fn shape_errors() {
        let h = init_variational_head(&[4, 8, 8, 3], 3, 1.0).unwrap();
        let x = Matrix::zeros(2, 5);
        assert!(matches!(h.forward_flipout(&x, &RngStream::new(0, 0)), Err(Error::Shape { .. })));
        assert!(matches!(h.forward_sampled(&x, &RngStream::new(0, 0)), Err(Error::Shape { .. })));
        let d = init_deterministic_head(&[4, 8, 8, 3], 3, 0.5).unwrap();
        assert!(matches!(
            forward_deterministic(&d, &x, false, &RngStream::new(0, 0)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn sampled_rows_are_distributions_and_reproducible() {
        let h = init_variational_head(&[4, 8, 8, 3], 3, 1.0).unwrap();
        let x = sample_gaussian(&mut RngStream::new(1, 0), 6, 4);
        let s = RngStream::new(8, 8);
        let a = h.forward_sampled(&x, &s).unwrap();
        assert_eq!(a, h.forward_sampled(&x, &s).unwrap());
        for r in a.iter_rows() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    /// Unbiasedness and matching spread: per output unit, Flipout and direct
    /// weight sampling agree on mean and variance for one example.
    #[test]
    fn flipout_matches_direct_sampling_in_distribution() {
        let layer = single_layer(3, 2, 21);
        let x = Matrix::row_vector(&[0.7, -1.1, 0.4]);
        let n = 10_000;
        let mut flip = vec![Vec::with_capacity(n); 2];
        let mut direct = vec![Vec::with_capacity(n); 2];
        for t in 0..n as u64 {
            let y = layer.forward_flipout(&x, &mut RngStream::new(1, t)).unwrap();
            let (w, b) = layer.sample_weights(&mut RngStream::new(2, t));
            let mut z = x.matmul(&w).unwrap();
            z.add_row_broadcast(&b).unwrap();
            for c in 0..2 {
                flip[c].push(y.get(0, c));
                direct[c].push(z.get(0, c));
            }
        }
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            (m, var)
        };
        let analytic = layer.forward_mean(&x).unwrap();
        let sigma2 = 0.3f64 * 0.3;
        let true_var = sigma2 * (x.data().iter().map(|v| v * v).sum::<f64>() + 1.0);
        for c in 0..2 {
            let (mf, vf) = stats(&flip[c]);
            let (md, vd) = stats(&direct[c]);
            let se = (true_var / n as f64).sqrt();
            assert!((mf - analytic.get(0, c)).abs() < 3.0 * se);
            assert!((md - analytic.get(0, c)).abs() < 3.0 * se);
            // Variance of a sample variance for Gaussian data: 2 sigma^4 / (n - 1).
            let var_se = (2.0 * true_var * true_var / (n as f64 - 1.0)).sqrt();
            assert!((vf - true_var).abs() < 4.0 * var_se, "{vf} vs {true_var}");
            assert!((vd - true_var).abs() < 4.0 * var_se, "{vd} vs {true_var}");
        }
    }

    #[test]
    fn dropout_disabled_paths_agree() {
        let mut d = init_deterministic_head(&[4, 8, 8, 3], 3, 0.0).unwrap();
        let x = sample_gaussian(&mut RngStream::new(1, 0), 5, 4);
        let plain = forward_deterministic(&d, &x, false, &RngStream::new(0, 0)).unwrap();
        assert_eq!(plain, forward_deterministic(&d, &x, true, &RngStream::new(0, 1)).unwrap());
        d.set_dropout(0.5).unwrap();
        assert_eq!(plain, forward_deterministic(&d, &x, false, &RngStream::new(0, 2)).unwrap());
        assert_ne!(plain, forward_deterministic(&d, &x, true, &RngStream::new(0, 3)).unwrap());
    }

    #[test]
    fn dropout_masks_are_unbiased_for_a_linear_layer() {
        let mut s = RngStream::new(4, 0);
        let layer = DenseLayer {
            weight: sample_gaussian(&mut s, 6, 3),
            bias: vec![0.1, 0.2, 0.3],
        };
        let x = sample_gaussian(&mut s, 1, 6);
        let exact = layer.forward(&x).unwrap();
        let n = 10_000;
        let mut samples = vec![Vec::with_capacity(n); 3];
        for t in 0..n as u64 {
            let mask = dropout_mask(&mut RngStream::new(5, t), 1, 6, 0.5);
            let y = layer.forward(&x.hadamard(&mask).unwrap()).unwrap();
            for c in 0..3 {
                samples[c].push(y.get(0, c));
            }
        }
        for c in 0..3 {
            let m = samples[c].iter().sum::<f64>() / n as f64;
            let var = samples[c].iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!((m - exact.get(0, c)).abs() < 3.0 * se, "unit {c}: {m} vs {}", exact.get(0, c));
        }
    }
}
