//! Layers, weight initialization, and the Adam optimizer.

use crate::autodiff::{batch_norm, conv2d, conv_transpose2d, Tensor};
use ndarray::{Array1, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::cell::RefCell;
use std::rc::Rc;

/// Shared handle to a non-trainable per-channel buffer (running statistics).
pub type Buffer = Rc<RefCell<Array1<f64>>>;

/// Draws parameters from a zero-mean Gaussian with the given std, in a
/// deterministic order fixed by construction order.
pub struct Initializer {
    rng: ChaCha8Rng,
    std: f64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
            std: 0.02,
        }
    }

    fn normal(&mut self, shape: &[usize]) -> ArrayD<f64> {
        let dist = Normal::new(0.0, self.std).unwrap();
        ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(&mut self.rng))
    }
}

/// Anything with named trainable parameters and (optionally) named buffers.
pub trait Net {
    fn named_parameters(&self) -> Vec<(String, Tensor)>;
    fn named_buffers(&self) -> Vec<(String, Buffer)> {
        Vec::new()
    }

    fn parameter_count(&self) -> usize {
        self.named_parameters()
            .iter()
            .map(|(_, t)| t.data().len())
            .sum()
    }
}

pub(crate) fn prefixed(
    prefix: &str,
    items: Vec<(String, Tensor)>,
) -> impl Iterator<Item = (String, Tensor)> + '_ {
    items
        .into_iter()
        .map(move |(n, t)| (format!("{prefix}.{n}"), t))
}

pub(crate) fn prefixed_buf(
    prefix: &str,
    items: Vec<(String, Buffer)>,
) -> impl Iterator<Item = (String, Buffer)> + '_ {
    items
        .into_iter()
        .map(move |(n, b)| (format!("{prefix}.{n}"), b))
}

pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: &mut Initializer,
    ) -> Self {
        Conv2d {
            weight: Tensor::param(init.normal(&[out_ch, in_ch, kernel, kernel])),
            bias: Tensor::param(ArrayD::zeros(IxDyn(&[out_ch]))),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        conv2d(x, &self.weight, &self.bias, self.stride, self.pad)
    }
}

impl Net for Conv2d {
    fn named_parameters(&self) -> Vec<(String, Tensor)> {
        vec![
            ("weight".into(), self.weight.clone()),
            ("bias".into(), self.bias.clone()),
        ]
    }
}

pub struct ConvTranspose2d {
    pub weight: Tensor, // [in, out, k, k]
    pub bias: Tensor,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        init: &mut Initializer,
    ) -> Self {
        ConvTranspose2d {
            weight: Tensor::param(init.normal(&[in_ch, out_ch, kernel, kernel])),
            bias: Tensor::param(ArrayD::zeros(IxDyn(&[out_ch]))),
            stride,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        conv_transpose2d(x, &self.weight, &self.bias, self.stride)
    }
}

impl Net for ConvTranspose2d {
    fn named_parameters(&self) -> Vec<(String, Tensor)> {
        vec![
            ("weight".into(), self.weight.clone()),
            ("bias".into(), self.bias.clone()),
        ]
    }
}

pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Buffer,
    pub running_var: Buffer,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::param(ArrayD::ones(IxDyn(&[channels]))),
            beta: Tensor::param(ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: Rc::new(RefCell::new(Array1::zeros(channels))),
            running_var: Rc::new(RefCell::new(Array1::ones(channels))),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Tensor {
        batch_norm(
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            training,
            self.momentum,
            self.eps,
        )
    }
}

impl Net for BatchNorm2d {
    fn named_parameters(&self) -> Vec<(String, Tensor)> {
        vec![
            ("gamma".into(), self.gamma.clone()),
            ("beta".into(), self.beta.clone()),
        ]
    }

    fn named_buffers(&self) -> Vec<(String, Buffer)> {
        vec![
            ("running_mean".into(), self.running_mean.clone()),
            ("running_var".into(), self.running_var.clone()),
        ]
    }
}

/// Convolution followed by batch normalization and a rectified-linear
/// activation; normalization can be dropped for output layers.
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: Option<BatchNorm2d>,
}

impl ConvBlock {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: &mut Initializer,
    ) -> Self {
        ConvBlock {
            conv: Conv2d::new(in_ch, out_ch, kernel, stride, pad, init),
            bn: Some(BatchNorm2d::new(out_ch)),
        }
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Tensor {
        self.forward_linear(x, training).relu()
    }

    /// Forward without the activation (used before residual additions).
    pub fn forward_linear(&self, x: &Tensor, training: bool) -> Tensor {
        let mut y = self.conv.forward(x);
        if let Some(bn) = &self.bn {
            y = bn.forward(&y, training);
        }
        y
    }
}

impl Net for ConvBlock {
    fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> =
            prefixed("conv", self.conv.named_parameters()).collect();
        if let Some(bn) = &self.bn {
            out.extend(prefixed("bn", bn.named_parameters()));
        }
        out
    }

    fn named_buffers(&self) -> Vec<(String, Buffer)> {
        match &self.bn {
            Some(bn) => prefixed_buf("bn", bn.named_buffers()).collect(),
            None => Vec::new(),
        }
    }
}

/// Adam with bias correction. State is kept in parameter order, which is
/// fixed by the model's construction order.
pub struct Adam {
    params: Vec<Tensor>,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(params: Vec<Tensor>, lr: f64, betas: (f64, f64)) -> Self {
        let m = params
            .iter()
            .map(|p| ArrayD::zeros(p.data().raw_dim()))
            .collect();
        let v = params
            .iter()
            .map(|p| ArrayD::zeros(p.data().raw_dim()))
            .collect();
        Adam {
            params,
            m,
            v,
            t: 0,
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in self.params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            *m = &*m * self.beta1 + &g * (1.0 - self.beta1);
            *v = &*v * self.beta2 + &(&g * &g) * (1.0 - self.beta2);
            let mut data = p.data().clone();
            ndarray::Zip::from(&mut data)
                .and(&*m)
                .and(&*v)
                .for_each(|w, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
            p.set_data(data);
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// Moment arrays in parameter order, for checkpointing.
    pub fn state(&self) -> (u64, &[ArrayD<f64>], &[ArrayD<f64>]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore_state(&mut self, t: u64, m: Vec<ArrayD<f64>>, v: Vec<ArrayD<f64>>) {
        assert_eq!(m.len(), self.params.len());
        assert_eq!(v.len(), self.params.len());
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initializer_is_deterministic_per_seed() {
        let a = Initializer::new(7).normal(&[3, 3]);
        let b = Initializer::new(7).normal(&[3, 3]);
        let c = Initializer::new(8).normal(&[3, 3]);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let p = Tensor::param(ArrayD::from_elem(IxDyn(&[4]), 3.0));
        let mut opt = Adam::new(vec![p.clone()], 0.1, (0.9, 0.999));
        for _ in 0..200 {
            opt.zero_grad();
            let loss = p.square().sum_all();
            loss.backward();
            opt.step();
        }
        assert!(p.data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn adam_with_zero_lr_leaves_params_unchanged() {
        let p = Tensor::param(ArrayD::from_elem(IxDyn(&[4]), 3.0));
        let before = p.data().clone();
        let mut opt = Adam::new(vec![p.clone()], 0.0, (0.5, 0.999));
        opt.zero_grad();
        p.square().sum_all().backward();
        opt.step();
        assert_eq!(before, *p.data());
    }

    #[test]
    fn conv_block_exposes_nested_names() {
        let mut init = Initializer::new(1);
        let b = ConvBlock::new(2, 4, 3, 1, 1, &mut init);
        let names: Vec<String> = b.named_parameters().into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            vec!["conv.weight", "conv.bias", "bn.gamma", "bn.beta"]
        );
        assert_eq!(b.parameter_count(), 2 * 4 * 9 + 4 + 4 + 4);
    }
}
