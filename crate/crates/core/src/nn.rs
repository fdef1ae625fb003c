//! Minimal dense/conv layers with hand-written backward passes.
//!
//! Every model keeps its parameters in one flat `Vec<f64>`; layers only
//! store offsets into it. Gradients use the same layout, which keeps the
//! optimizer and finite-difference checks layer-agnostic.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    #[default]
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Silu => x * sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative with respect to the pre-activation.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + eˣ)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Hands out consecutive parameter ranges.
#[derive(Debug, Default, Clone)]
pub struct ParamLayout {
    len: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    fn take(&mut self, n: usize) -> usize {
        let off = self.len;
        self.len += n;
        off
    }

    pub fn linear(&mut self, in_dim: usize, out_dim: usize) -> Linear {
        let weight = self.take(in_dim * out_dim);
        let bias = self.take(out_dim);
        Linear {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn conv3x3(&mut self, in_ch: usize, out_ch: usize) -> Conv3x3 {
        let weight = self.take(out_ch * 9 * in_ch);
        let bias = self.take(out_ch);
        Conv3x3 {
            in_ch,
            out_ch,
            weight,
            bias,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// `y = W x + b` with `W` stored row-major as `out × in`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    weight: usize,
    bias: usize,
}

impl Linear {
    /// Uniform fan-in initialisation scaled by `gain`; zero bias.
    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng, gain: f64) {
        let bound = gain * (3.0 / self.in_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        for w in &mut params[self.weight..self.weight + self.in_dim * self.out_dim] {
            *w = dist.sample(rng);
        }
        params[self.bias..self.bias + self.out_dim].fill(0.0);
    }

    pub fn bias_mut<'a>(&self, params: &'a mut [f64]) -> &'a mut [f64] {
        &mut params[self.bias..self.bias + self.out_dim]
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let w = &params[self.weight..self.weight + self.in_dim * self.out_dim];
        let b = &params[self.bias..self.bias + self.out_dim];
        w.chunks_exact(self.in_dim)
            .zip(b)
            .map(|(row, bias)| bias + dot(row, x))
            .collect()
    }

    /// Accumulates parameter gradients and returns `∂L/∂x`.
    pub fn backward(&self, params: &[f64], x: &[f64], dy: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        let w = &params[self.weight..self.weight + self.in_dim * self.out_dim];
        let (gw, rest) = grads[self.weight..].split_at_mut(self.in_dim * self.out_dim);
        let gb_start = self.bias - self.weight - self.in_dim * self.out_dim;
        let gb = &mut rest[gb_start..gb_start + self.out_dim];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            gb[o] += g;
            let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut gw[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }
}

/// Stack of `Linear → activation` blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseStack {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

/// Inputs and pre-activations of each block, kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct DenseCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl DenseStack {
    pub fn new(layout: &mut ParamLayout, in_dim: usize, widths: &[usize], act: Activation) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = in_dim;
        for &w in widths {
            layers.push(layout.linear(prev, w));
            prev = w;
        }
        Self {
            layers,
            activation: act,
        }
    }

    pub fn out_dim(&self, in_dim: usize) -> usize {
        self.layers.last().map_or(in_dim, |l| l.out_dim)
    }

    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        for l in &self.layers {
            l.init(params, rng, 1.0);
        }
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for l in &self.layers {
            h = l.forward(params, &h);
            for v in &mut h {
                *v = self.activation.apply(*v);
            }
        }
        h
    }

    pub fn forward_cached(&self, params: &[f64], x: &[f64]) -> (Vec<f64>, DenseCache) {
        let mut cache = DenseCache::default();
        let mut h = x.to_vec();
        for l in &self.layers {
            let pre = l.forward(params, &h);
            let next = pre.iter().map(|v| self.activation.apply(*v)).collect();
            cache.inputs.push(std::mem::replace(&mut h, next));
            cache.pre.push(pre);
        }
        (h, cache)
    }

    pub fn backward(
        &self,
        params: &[f64],
        cache: &DenseCache,
        dy: &[f64],
        grads: &mut [f64],
    ) -> Vec<f64> {
        let mut g = dy.to_vec();
        for (i, l) in self.layers.iter().enumerate().rev() {
            for (gv, pre) in g.iter_mut().zip(&cache.pre[i]) {
                *gv *= self.activation.derivative(*pre);
            }
            g = l.backward(params, &cache.inputs[i], &g, grads);
        }
        g
    }
}

/// 3×3 convolution, stride 1, zero padding 1, HWC layout.
/// Weights are stored `[out][ky][kx][in]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv3x3 {
    pub in_ch: usize,
    pub out_ch: usize,
    weight: usize,
    bias: usize,
}

impl Conv3x3 {
    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        let fan_in = 9 * self.in_ch;
        let bound = (6.0 / fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        for w in &mut params[self.weight..self.weight + self.out_ch * fan_in] {
            *w = dist.sample(rng);
        }
        params[self.bias..self.bias + self.out_ch].fill(0.0);
    }

    pub fn forward(&self, params: &[f64], input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (ci, co) = (self.in_ch, self.out_ch);
        let weights = &params[self.weight..self.weight + co * 9 * ci];
        let bias = &params[self.bias..self.bias + co];
        let mut out = vec![0.0; h * w * co];
        for y in 0..h {
            for x in 0..w {
                let dst = &mut out[(y * w + x) * co..(y * w + x + 1) * co];
                dst.copy_from_slice(bias);
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src_off = (sy as usize * w + sx as usize) * ci;
                        let src = &input[src_off..src_off + ci];
                        let tap = ky * 3 + kx;
                        for (o, d) in dst.iter_mut().enumerate() {
                            let k = &weights[(o * 9 + tap) * ci..(o * 9 + tap + 1) * ci];
                            *d += dot(k, src);
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(
        &self,
        params: &[f64],
        input: &[f64],
        h: usize,
        w: usize,
        dout: &[f64],
        grads: &mut [f64],
    ) -> Vec<f64> {
        let (ci, co) = (self.in_ch, self.out_ch);
        let weights = &params[self.weight..self.weight + co * 9 * ci];
        let mut din = vec![0.0; h * w * ci];
        for y in 0..h {
            for x in 0..w {
                let g = &dout[(y * w + x) * co..(y * w + x + 1) * co];
                for (o, gv) in g.iter().enumerate() {
                    grads[self.bias + o] += gv;
                }
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src_off = (sy as usize * w + sx as usize) * ci;
                        let tap = ky * 3 + kx;
                        for (o, &gv) in g.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let k_off = (o * 9 + tap) * ci;
                            let gk = &mut grads[self.weight + k_off..self.weight + k_off + ci];
                            let src = &input[src_off..src_off + ci];
                            for i in 0..ci {
                                gk[i] += gv * src[i];
                            }
                            let k = &weights[k_off..k_off + ci];
                            let dsrc = &mut din[src_off..src_off + ci];
                            for i in 0..ci {
                                dsrc[i] += gv * k[i];
                            }
                        }
                    }
                }
            }
        }
        din
    }
}

/// 2×2 average pooling with stride 2 (HWC). Odd trailing rows/columns are dropped.
pub fn avg_pool2(input: &[f64], h: usize, w: usize, c: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow * c];
    for y in 0..oh {
        for x in 0..ow {
            let dst = &mut out[(y * ow + x) * c..(y * ow + x + 1) * c];
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let off = ((2 * y + dy) * w + 2 * x + dx) * c;
                for (d, s) in dst.iter_mut().zip(&input[off..off + c]) {
                    *d += 0.25 * s;
                }
            }
        }
    }
    (out, oh, ow)
}

pub fn avg_pool2_backward(dout: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut din = vec![0.0; h * w * c];
    for y in 0..oh {
        for x in 0..ow {
            let g = &dout[(y * ow + x) * c..(y * ow + x + 1) * c];
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let off = ((2 * y + dy) * w + 2 * x + dx) * c;
                for (d, s) in din[off..off + c].iter_mut().zip(g) {
                    *d += 0.25 * s;
                }
            }
        }
    }
    din
}

/// Adam with coupled L2 weight decay (the decay term is added to the gradient).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(
            params.len(),
            self.m.len(),
            "optimizer/parameter size mismatch"
        );
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i] + self.weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_gradient(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, tiny)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = l2_norm(a).max(l2_norm(b)).max(1e-300);
    diff / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_stack_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut layout = ParamLayout::new();
        let stack = DenseStack::new(&mut layout, 5, &[7, 3], Activation::Silu);
        let mut params = vec![0.0; layout.len()];
        stack.init(&mut params, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target = [0.3, -0.2, 0.9];
        let loss = |p: &[f64]| -> f64 {
            let y = stack.forward(p, &x);
            y.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum()
        };
        let (y, cache) = stack.forward_cached(&params, &x);
        let dy: Vec<f64> = y.iter().zip(target).map(|(a, b)| 2.0 * (a - b)).collect();
        let mut grads = vec![0.0; params.len()];
        stack.backward(&params, &cache, &dy, &mut grads);
        let numeric = numeric_gradient(&params, 1e-6, loss);
        assert!(relative_error(&grads, &numeric) < 1e-6);
    }

    #[test]
    fn conv_and_pool_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut layout = ParamLayout::new();
        let conv = layout.conv3x3(2, 3);
        let mut params = vec![0.0; layout.len()];
        conv.init(&mut params, &mut rng);
        for b in &mut params[conv.bias..conv.bias + 3] {
            *b = rng.random_range(-0.1..0.1);
        }
        let (h, w) = (4, 6);
        let input: Vec<f64> = (0..h * w * 2)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let weights: Vec<f64> = (0..(h / 2) * (w / 2) * 3)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let loss = |p: &[f64], inp: &[f64]| -> f64 {
            let y = conv.forward(p, inp, h, w);
            let (pooled, _, _) = avg_pool2(&y, h, w, 3);
            dot(&pooled, &weights)
        };
        let mut grads = vec![0.0; params.len()];
        let dpool = avg_pool2_backward(&weights, h, w, 3);
        let din = conv.backward(&params, &input, h, w, &dpool, &mut grads);
        let numeric = numeric_gradient(&params, 1e-6, |p| loss(p, &input));
        assert!(relative_error(&grads, &numeric) < 1e-6);
        let numeric_in = numeric_gradient(&input, 1e-6, |x| loss(&params, x));
        assert!(relative_error(&din, &numeric_in) < 1e-6);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1, 0.0);
        for _ in 0..500 {
            let g = vec![2.0 * x[0], 2.0 * x[1]];
            opt.step(&mut x, &g);
        }
        assert!(l2_norm(&x) < 1e-2);
        assert_eq!(opt.steps(), 500);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
