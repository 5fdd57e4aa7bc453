//! Minimal CPU network: 3x3 convolutions via im2col + SGEMM, ReLU, 2x2 max
//! pooling, adaptive average pooling and dense layers, with Adam.
//!
//! Samples are processed one at a time in CHW layout; gradients accumulate
//! into a flat buffer aligned with the flat parameter vector, so a batch is
//! reduced in a fixed order and results are bit-reproducible.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { cout: usize, stride: usize },
    Relu,
    MaxPool,
    AvgPool { out: usize },
    Linear { nout: usize },
}

#[derive(Debug, Clone)]
struct Layer {
    spec: LayerSpec,
    input: Shape,
    output: Shape,
    w_off: usize,
    b_off: usize,
}

const K: usize = 3;
const PAD: usize = 1;

fn conv_out(n: usize, stride: usize) -> usize {
    (n + 2 * PAD - K) / stride + 1
}

/// Adaptive pooling bin `[start, end)` for output index `i` of `out`.
fn bin(i: usize, out: usize, n: usize) -> (usize, usize) {
    (i * n / out, ((i + 1) * n).div_ceil(out))
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    pub input: Shape,
    pub params: Vec<f32>,
}

/// Per-layer values kept from the forward pass for backpropagation.
enum Cache {
    Conv(Vec<f32>),
    Relu(Vec<f32>),
    MaxPool(Vec<u32>),
    AvgPool,
    Linear(Vec<f32>),
}

impl Network {
    pub fn new(input: Shape, specs: &[LayerSpec]) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input;
        let mut n_params = 0;
        for &spec in specs {
            let (output, nw, nb) = match spec {
                LayerSpec::Conv { cout, stride } => {
                    if stride == 0 || cout == 0 {
                        return Err(Error::Config("conv stride and width must be positive".into()));
                    }
                    let o = Shape {
                        c: cout,
                        h: conv_out(shape.h, stride),
                        w: conv_out(shape.w, stride),
                    };
                    (o, cout * shape.c * K * K, cout)
                }
                LayerSpec::Relu => (shape, 0, 0),
                LayerSpec::MaxPool => (
                    Shape {
                        c: shape.c,
                        h: shape.h / 2,
                        w: shape.w / 2,
                    },
                    0,
                    0,
                ),
                LayerSpec::AvgPool { out } => (Shape { c: shape.c, h: out, w: out }, 0, 0),
                LayerSpec::Linear { nout } => (Shape { c: nout, h: 1, w: 1 }, nout * shape.len(), nout),
            };
            if output.is_empty() {
                return Err(Error::Config(format!(
                    "layer {spec:?} on input {shape:?} leaves no spatial extent; use larger tiles or fewer pools"
                )));
            }
            layers.push(Layer {
                spec,
                input: shape,
                output,
                w_off: n_params,
                b_off: n_params + nw,
            });
            n_params += nw + nb;
            shape = output;
        }
        Ok(Network {
            layers,
            input,
            params: vec![0.0; n_params],
        })
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map_or(self.input.len(), |l| l.output.len())
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    /// He-normal weights, zero biases; the final layer is scaled down.
    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        let last = self.layers.iter().rposition(|l| {
            matches!(l.spec, LayerSpec::Linear { .. } | LayerSpec::Conv { .. })
        });
        for (i, l) in self.layers.iter().enumerate() {
            let fan_in = match l.spec {
                LayerSpec::Conv { .. } => l.input.c * K * K,
                LayerSpec::Linear { .. } => l.input.len(),
                _ => continue,
            };
            let gain = if Some(i) == last { 1.0 } else { 2.0 };
            let std = (gain / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for p in &mut self.params[l.w_off..l.b_off] {
                *p = normal.sample(rng) as f32;
            }
            let nb = l.output.c;
            self.params[l.b_off..l.b_off + nb].fill(0.0);
        }
    }

    /// Bias of the last parametrised layer.
    pub fn output_bias_mut(&mut self) -> &mut [f32] {
        let l = self
            .layers
            .iter()
            .rev()
            .find(|l| matches!(l.spec, LayerSpec::Linear { .. } | LayerSpec::Conv { .. }))
            .expect("network has a parametrised layer");
        let (o, n) = (l.b_off, l.output.c);
        &mut self.params[o..o + n]
    }

    fn check_input(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.input.len() {
            return Err(Error::shape(
                format!("{}x{}x{} input", self.input.c, self.input.h, self.input.w),
                format!("{} values", x.len()),
            ));
        }
        Ok(())
    }

    /// Inference forward pass.
    pub fn forward(&self, x: &[f32]) -> Result<Vec<f32>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        for l in &self.layers {
            cur = self.layer_forward(l, &cur, None);
        }
        Ok(cur)
    }

    fn forward_train(&self, x: &[f32], caches: &mut Vec<Cache>) -> Vec<f32> {
        caches.clear();
        let mut cur = x.to_vec();
        for l in &self.layers {
            cur = self.layer_forward(l, &cur, Some(caches));
        }
        cur
    }

    /// Forward pass for one sample, then backpropagates `loss_grad(output)`
    /// and adds parameter gradients into `grads`. Returns the output and the
    /// loss reported by the closure.
    pub fn forward_backward(
        &self,
        x: &[f32],
        grads: &mut [f32],
        loss_grad: impl FnOnce(&[f32]) -> (f64, Vec<f32>),
    ) -> Result<(Vec<f32>, f64)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let out = self.forward_train(x, &mut caches);
        let (loss, mut g) = loss_grad(&out);
        for (i, l) in self.layers.iter().enumerate().rev() {
            let need_dx = i > 0;
            g = self.layer_backward(l, &caches[i], &g, grads, need_dx);
        }
        Ok((out, loss))
    }

    fn layer_forward(&self, l: &Layer, x: &[f32], caches: Option<&mut Vec<Cache>>) -> Vec<f32> {
        let (i, o) = (l.input, l.output);
        match l.spec {
            LayerSpec::Conv { stride, .. } => {
                let kk = i.c * K * K;
                let p = o.h * o.w;
                let col = im2col(x, i, o, stride);
                let mut y = vec![0f32; o.c * p];
                for (co, row) in y.chunks_mut(p).enumerate() {
                    row.fill(self.params[l.b_off + co]);
                }
                // y(oc x p) += W(oc x kk) * col(kk x p)
                unsafe {
                    matrixmultiply::sgemm(
                        o.c,
                        kk,
                        p,
                        1.0,
                        self.params[l.w_off..].as_ptr(),
                        kk as isize,
                        1,
                        col.as_ptr(),
                        p as isize,
                        1,
                        1.0,
                        y.as_mut_ptr(),
                        p as isize,
                        1,
                    );
                }
                if let Some(c) = caches {
                    c.push(Cache::Conv(col));
                }
                y
            }
            LayerSpec::Relu => {
                let y: Vec<f32> = x.iter().map(|&v| v.max(0.0)).collect();
                if let Some(c) = caches {
                    c.push(Cache::Relu(y.clone()));
                }
                y
            }
            LayerSpec::MaxPool => {
                let mut y = vec![0f32; o.len()];
                let mut arg = vec![0u32; o.len()];
                for ch in 0..o.c {
                    let base = ch * i.h * i.w;
                    for oy in 0..o.h {
                        for ox in 0..o.w {
                            let mut best = base + 2 * oy * i.w + 2 * ox;
                            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                let k = base + (2 * oy + dy) * i.w + 2 * ox + dx;
                                if x[k] > x[best] {
                                    best = k;
                                }
                            }
                            let t = (ch * o.h + oy) * o.w + ox;
                            y[t] = x[best];
                            arg[t] = best as u32;
                        }
                    }
                }
                if let Some(c) = caches {
                    c.push(Cache::MaxPool(arg));
                }
                y
            }
            LayerSpec::AvgPool { out } => {
                let mut y = vec![0f32; o.len()];
                for ch in 0..i.c {
                    for oy in 0..out {
                        let (y0, y1) = bin(oy, out, i.h);
                        for ox in 0..out {
                            let (x0, x1) = bin(ox, out, i.w);
                            let mut s = 0f32;
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    s += x[(ch * i.h + yy) * i.w + xx];
                                }
                            }
                            y[(ch * out + oy) * out + ox] = s / ((y1 - y0) * (x1 - x0)) as f32;
                        }
                    }
                }
                if let Some(c) = caches {
                    c.push(Cache::AvgPool);
                }
                y
            }
            LayerSpec::Linear { nout } => {
                let nin = i.len();
                let w = &self.params[l.w_off..l.b_off];
                let y: Vec<f32> = (0..nout)
                    .map(|r| {
                        let row = &w[r * nin..(r + 1) * nin];
                        self.params[l.b_off + r] + dot(row, x)
                    })
                    .collect();
                if let Some(c) = caches {
                    c.push(Cache::Linear(x.to_vec()));
                }
                y
            }
        }
    }

    fn layer_backward(
        &self,
        l: &Layer,
        cache: &Cache,
        dy: &[f32],
        grads: &mut [f32],
        need_dx: bool,
    ) -> Vec<f32> {
        let (i, o) = (l.input, l.output);
        match (l.spec, cache) {
            (LayerSpec::Conv { stride, .. }, Cache::Conv(col)) => {
                let kk = i.c * K * K;
                let p = o.h * o.w;
                // dW(oc x kk) += dy(oc x p) * col^T(p x kk)
                unsafe {
                    matrixmultiply::sgemm(
                        o.c,
                        p,
                        kk,
                        1.0,
                        dy.as_ptr(),
                        p as isize,
                        1,
                        col.as_ptr(),
                        1,
                        p as isize,
                        1.0,
                        grads[l.w_off..].as_mut_ptr(),
                        kk as isize,
                        1,
                    );
                }
                for (co, row) in dy.chunks(p).enumerate() {
                    grads[l.b_off + co] += row.iter().sum::<f32>();
                }
                if !need_dx {
                    return Vec::new();
                }
                let mut dcol = vec![0f32; kk * p];
                // dcol(kk x p) = W^T(kk x oc) * dy(oc x p)
                unsafe {
                    matrixmultiply::sgemm(
                        kk,
                        o.c,
                        p,
                        1.0,
                        self.params[l.w_off..].as_ptr(),
                        1,
                        kk as isize,
                        dy.as_ptr(),
                        p as isize,
                        1,
                        0.0,
                        dcol.as_mut_ptr(),
                        p as isize,
                        1,
                    );
                }
                col2im(&dcol, i, o, stride)
            }
            (LayerSpec::Relu, Cache::Relu(y)) => dy
                .iter()
                .zip(y)
                .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                .collect(),
            (LayerSpec::MaxPool, Cache::MaxPool(arg)) => {
                let mut dx = vec![0f32; i.len()];
                for (&a, &g) in arg.iter().zip(dy) {
                    dx[a as usize] += g;
                }
                dx
            }
            (LayerSpec::AvgPool { out }, Cache::AvgPool) => {
                let mut dx = vec![0f32; i.len()];
                for ch in 0..i.c {
                    for oy in 0..out {
                        let (y0, y1) = bin(oy, out, i.h);
                        for ox in 0..out {
                            let (x0, x1) = bin(ox, out, i.w);
                            let g = dy[(ch * out + oy) * out + ox] / ((y1 - y0) * (x1 - x0)) as f32;
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    dx[(ch * i.h + yy) * i.w + xx] += g;
                                }
                            }
                        }
                    }
                }
                dx
            }
            (LayerSpec::Linear { nout }, Cache::Linear(x)) => {
                let nin = i.len();
                for r in 0..nout {
                    let g = dy[r];
                    grads[l.b_off + r] += g;
                    if g != 0.0 {
                        let row = &mut grads[l.w_off + r * nin..l.w_off + (r + 1) * nin];
                        for (gw, &xv) in row.iter_mut().zip(x) {
                            *gw += g * xv;
                        }
                    }
                }
                if !need_dx {
                    return Vec::new();
                }
                let w = &self.params[l.w_off..l.b_off];
                let mut dx = vec![0f32; nin];
                for r in 0..nout {
                    let g = dy[r];
                    if g != 0.0 {
                        for (d, &wv) in dx.iter_mut().zip(&w[r * nin..(r + 1) * nin]) {
                            *d += g * wv;
                        }
                    }
                }
                dx
            }
            _ => unreachable!("cache does not match layer"),
        }
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn im2col(x: &[f32], i: Shape, o: Shape, stride: usize) -> Vec<f32> {
    let p = o.h * o.w;
    let mut col = vec![0f32; i.c * K * K * p];
    for c in 0..i.c {
        for ky in 0..K {
            for kx in 0..K {
                let row = ((c * K + ky) * K + kx) * p;
                for oy in 0..o.h {
                    let iy = (oy * stride + ky) as isize - PAD as isize;
                    if iy < 0 || iy >= i.h as isize {
                        continue;
                    }
                    let src = (c * i.h + iy as usize) * i.w;
                    let dst = row + oy * o.w;
                    for ox in 0..o.w {
                        let ix = (ox * stride + kx) as isize - PAD as isize;
                        if ix >= 0 && ix < i.w as isize {
                            col[dst + ox] = x[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f32], i: Shape, o: Shape, stride: usize) -> Vec<f32> {
    let p = o.h * o.w;
    let mut x = vec![0f32; i.len()];
    for c in 0..i.c {
        for ky in 0..K {
            for kx in 0..K {
                let row = ((c * K + ky) * K + kx) * p;
                for oy in 0..o.h {
                    let iy = (oy * stride + ky) as isize - PAD as isize;
                    if iy < 0 || iy >= i.h as isize {
                        continue;
                    }
                    let dst = (c * i.h + iy as usize) * i.w;
                    let src = row + oy * o.w;
                    for ox in 0..o.w {
                        let ix = (ox * stride + kx) as isize - PAD as isize;
                        if ix >= 0 && ix < i.w as isize {
                            x[dst + ix as usize] += col[src + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    pub fn new(n: usize, lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        self.t += 1;
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let eps = self.eps as f32;
        let wd = self.weight_decay as f32;
        for k in 0..params.len() {
            let g = grads[k] + wd * params[k];
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g;
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g;
            params[k] -= step * self.m[k] / (self.v[k].sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(specs: &[LayerSpec], input: Shape, seed: u64) -> Network {
        let mut n = Network::new(input, specs).unwrap();
        n.init(&mut ChaCha8Rng::seed_from_u64(seed));
        // non-zero biases so their gradients are exercised
        for (k, p) in n.params.iter_mut().enumerate() {
            *p += 0.01 * ((k % 7) as f32 - 3.0);
        }
        n
    }

    /// Central-difference check of d(sum(w_i * y_i))/dθ.
    fn grad_check(n: &mut Network, x: &[f32]) {
        let weights: Vec<f32> = (0..n.output_len()).map(|k| 1.0 + k as f32 * 0.5).collect();
        let loss = |n: &Network| -> f64 {
            let y = n.forward(x).unwrap();
            y.iter().zip(&weights).map(|(a, b)| (a * b) as f64).sum()
        };
        let mut grads = vec![0f32; n.n_params()];
        let wcl = weights.clone();
        n.forward_backward(x, &mut grads, |y| {
            (y.iter().zip(&wcl).map(|(a, b)| (a * b) as f64).sum(), wcl.clone())
        })
        .unwrap();
        let step = n.n_params().div_ceil(60).max(1);
        for k in (0..n.n_params()).step_by(step) {
            let orig = n.params[k];
            let h = 1e-2f32;
            n.params[k] = orig + h;
            let up = loss(n);
            n.params[k] = orig - h;
            let down = loss(n);
            n.params[k] = orig;
            let num = (up - down) / (2.0 * h as f64);
            let tol = 2e-2 * num.abs().max(grads[k].abs() as f64).max(1.0);
            assert!(
                (num - grads[k] as f64).abs() < tol,
                "param {k}: numeric {num} vs analytic {}",
                grads[k]
            );
        }
    }

    fn input(s: Shape, seed: u64) -> Vec<f32> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..s.len()).map(|_| r.random::<f32>() * 2.0 - 1.0).collect()
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let s = Shape { c: 2, h: 7, w: 6 };
        let mut n = net(
            &[
                LayerSpec::Conv { cout: 3, stride: 2 },
                LayerSpec::Conv { cout: 2, stride: 1 },
                LayerSpec::AvgPool { out: 2 },
                LayerSpec::Linear { nout: 3 },
            ],
            s,
            1,
        );
        grad_check(&mut n, &input(s, 2));
    }

    #[test]
    fn pool_and_relu_gradients_match_finite_differences() {
        let s = Shape { c: 1, h: 9, w: 8 };
        let mut n = net(
            &[
                LayerSpec::Conv { cout: 2, stride: 1 },
                LayerSpec::MaxPool,
                LayerSpec::Linear { nout: 4 },
                LayerSpec::Relu,
                LayerSpec::Linear { nout: 2 },
            ],
            s,
            3,
        );
        grad_check(&mut n, &input(s, 4));
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let s = Shape { c: 2, h: 5, w: 5 };
        let n = net(&[LayerSpec::Conv { cout: 2, stride: 2 }], s, 9);
        let x = input(s, 10);
        let y = n.forward(&x).unwrap();
        let o = 3;
        for co in 0..2 {
            for oy in 0..o {
                for ox in 0..o {
                    let mut acc = n.params[2 * 2 * 9 + co] as f64;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    let w = n.params[((co * 2 + ci) * 3 + ky) * 3 + kx] as f64;
                                    acc += w * x[(ci * 5 + iy as usize) * 5 + ix as usize] as f64;
                                }
                            }
                        }
                    }
                    assert!((acc - y[(co * o + oy) * o + ox] as f64).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn too_small_input_is_rejected_at_build() {
        let s = Shape { c: 3, h: 3, w: 3 };
        let r = Network::new(s, &[LayerSpec::MaxPool, LayerSpec::MaxPool]);
        assert!(r.is_err());
    }

    #[test]
    fn wrong_input_length_is_a_shape_error() {
        let s = Shape { c: 1, h: 4, w: 4 };
        let n = net(&[LayerSpec::Linear { nout: 1 }], s, 0);
        assert!(matches!(n.forward(&[0.0; 3]), Err(Error::Shape { .. })));
    }

    #[test]
    fn adam_with_zero_lr_leaves_parameters() {
        let mut p = vec![1.0f32, -2.0];
        let mut a = Adam::new(2, 0.0, 0.0);
        a.step(&mut p, &[0.5, 0.5]);
        assert_eq!(p, vec![1.0, -2.0]);
    }
}
