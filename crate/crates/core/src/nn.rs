//! Minimal feed-forward layers with hand-written backward passes.
//!
//! Everything runs on single `(C, H, W)` tensors in `f64`. Convolutions lower to
//! one GEMM via im2col. Backward passes return the gradient with respect to the
//! layer input and optionally accumulate parameter gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Shape, Tensor3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Row-major `[out_channels, in_channels * kernel * kernel]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = (3.0 / fan_in as f64).sqrt();
        let weight = (0..out_channels * fan_in)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias: vec![0.0; out_channels],
        }
    }

    pub fn output_shape(&self, input: Shape) -> Shape {
        let [_, h, w] = input;
        let ho = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        [self.out_channels, ho, wo]
    }

    fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, x: &Tensor3) -> (Vec<f64>, Shape) {
        let [c, h, w] = x.shape();
        let out = self.output_shape(x.shape());
        let (ho, wo) = (out[1], out[2]);
        let k = self.kernel;
        let n = ho * wo;
        let mut cols = vec![0.0; c * k * k * n];
        let xd = x.data();
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * n;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = (ci * h + iy as usize) * w;
                        let dst = row + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                cols[dst + ox] = xd[src + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        (cols, out)
    }

    fn col2im(&self, cols: &[f64], input: Shape, out: Shape) -> Tensor3 {
        let [c, h, w] = input;
        let (ho, wo) = (out[1], out[2]);
        let k = self.kernel;
        let n = ho * wo;
        let mut dx = vec![0.0; c * h * w];
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * n;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = (ci * h + iy as usize) * w;
                        let src = row + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dx[dst + ix as usize] += cols[src + ox];
                            }
                        }
                    }
                }
            }
        }
        Tensor3::from_parts(input, dx)
    }

    pub fn forward(&self, x: &Tensor3) -> Tensor3 {
        debug_assert_eq!(x.shape()[0], self.in_channels);
        let (cols, out) = self.im2col(x);
        let n = out[1] * out[2];
        let kk = self.fan_in();
        let mut y = vec![0.0; self.out_channels * n];
        for (o, row) in y.chunks_mut(n).enumerate() {
            row.fill(self.bias[o]);
        }
        gemm(
            self.out_channels,
            kk,
            n,
            (&self.weight, kk as isize, 1),
            (&cols, n as isize, 1),
            1.0,
            &mut y,
        );
        Tensor3::from_parts(out, y)
    }

    /// Returns dL/dx; accumulates dL/dW and dL/db into `grads` when given.
    pub fn backward(
        &self,
        x: &Tensor3,
        grad_out: &Tensor3,
        grads: Option<(&mut [f64], &mut [f64])>,
    ) -> Tensor3 {
        let out = grad_out.shape();
        let n = out[1] * out[2];
        let kk = self.fan_in();
        let go = grad_out.data();
        if let Some((gw, gb)) = grads {
            let (cols, _) = self.im2col(x);
            // dW += dY · colsᵀ
            gemm(
                self.out_channels,
                n,
                kk,
                (go, n as isize, 1),
                (&cols, 1, n as isize),
                1.0,
                gw,
            );
            for (o, row) in go.chunks(n).enumerate() {
                gb[o] += row.iter().sum::<f64>();
            }
        }
        // dcols = Wᵀ · dY
        let mut dcols = vec![0.0; kk * n];
        gemm(
            kk,
            self.out_channels,
            n,
            (&self.weight, 1, kk as isize),
            (go, n as isize, 1),
            0.0,
            &mut dcols,
        );
        self.col2im(&dcols, x.shape(), out)
    }
}

/// `c = a·b + beta·c` for row-major `c` of shape `m × n`; `a` is `m × k`, `b` is `k × n`,
/// each given with explicit (row, column) strides.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    assert!(a.0.len() >= m * k && b.0.len() >= k * n);
    // SAFETY: bounds asserted above; strides describe dense m×k / k×n / m×n views.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv2d(Conv2d),
    Silu,
    Sigmoid,
    Upsample2x,
}

impl Layer {
    pub fn output_shape(&self, input: Shape) -> Shape {
        match self {
            Layer::Conv2d(c) => c.output_shape(input),
            Layer::Silu | Layer::Sigmoid => input,
            Layer::Upsample2x => [input[0], input[1] * 2, input[2] * 2],
        }
    }

    fn forward(&self, x: &Tensor3) -> Tensor3 {
        match self {
            Layer::Conv2d(c) => c.forward(x),
            Layer::Silu => map(x, |v| v * sigmoid(v)),
            Layer::Sigmoid => map(x, sigmoid),
            Layer::Upsample2x => {
                let [c, h, w] = x.shape();
                let xd = x.data();
                let mut y = vec![0.0; c * 4 * h * w];
                for ci in 0..c {
                    for oy in 0..2 * h {
                        let src = (ci * h + oy / 2) * w;
                        let dst = (ci * 2 * h + oy) * 2 * w;
                        for ox in 0..2 * w {
                            y[dst + ox] = xd[src + ox / 2];
                        }
                    }
                }
                Tensor3::from_parts([c, 2 * h, 2 * w], y)
            }
        }
    }

    fn backward(
        &self,
        x: &Tensor3,
        grad_out: &Tensor3,
        grads: Option<(&mut [f64], &mut [f64])>,
    ) -> Tensor3 {
        match self {
            Layer::Conv2d(c) => c.backward(x, grad_out, grads),
            Layer::Silu => zip_map(x, grad_out, |v, g| {
                let s = sigmoid(v);
                g * s * (1.0 + v * (1.0 - s))
            }),
            Layer::Sigmoid => zip_map(x, grad_out, |v, g| {
                let s = sigmoid(v);
                g * s * (1.0 - s)
            }),
            Layer::Upsample2x => {
                let [c, h, w] = x.shape();
                let gd = grad_out.data();
                let mut dx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for oy in 0..2 * h {
                        let dst = (ci * h + oy / 2) * w;
                        let src = (ci * 2 * h + oy) * 2 * w;
                        for ox in 0..2 * w {
                            dx[dst + ox / 2] += gd[src + ox];
                        }
                    }
                }
                Tensor3::from_parts([c, h, w], dx)
            }
        }
    }
}

fn map(x: &Tensor3, f: impl Fn(f64) -> f64) -> Tensor3 {
    Tensor3::from_parts(x.shape(), x.data().iter().map(|&v| f(v)).collect())
}

fn zip_map(x: &Tensor3, g: &Tensor3, f: impl Fn(f64, f64) -> f64) -> Tensor3 {
    Tensor3::from_parts(
        x.shape(),
        x.data()
            .iter()
            .zip(g.data())
            .map(|(&a, &b)| f(a, b))
            .collect(),
    )
}

/// Layer inputs recorded during a forward pass, consumed by [`Sequential::backward`].
pub struct Trace {
    inputs: Vec<Tensor3>,
}

/// Parameter gradients laid out like [`Sequential::params_mut`].
#[derive(Clone, Debug)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn scale(&mut self, s: f64) {
        for g in &mut self.0 {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.0.iter().map(Vec::as_slice).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn output_shape(&self, input: Shape) -> Shape {
        self.layers.iter().fold(input, |s, l| l.output_shape(s))
    }

    pub fn forward(&self, x: &Tensor3) -> Tensor3 {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur);
        }
        cur
    }

    pub fn forward_traced(&self, x: &Tensor3) -> (Tensor3, Trace) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let next = layer.forward(&cur);
            inputs.push(cur);
            cur = next;
        }
        (cur, Trace { inputs })
    }

    /// Backpropagates `grad_out` through the traced pass, returning dL/d(input).
    pub fn backward(
        &self,
        trace: &Trace,
        grad_out: Tensor3,
        mut grads: Option<&mut Gradients>,
    ) -> Tensor3 {
        let mut g = grad_out;
        // Parameter slots are numbered front to back; walk them in reverse.
        let mut slot = self.param_count_slots();
        for (layer, x) in self.layers.iter().zip(&trace.inputs).rev() {
            let pg = match (layer, grads.as_deref_mut()) {
                (Layer::Conv2d(_), Some(gr)) => {
                    slot -= 2;
                    let (head, tail) = gr.0.split_at_mut(slot + 1);
                    Some((head[slot].as_mut_slice(), tail[0].as_mut_slice()))
                }
                _ => None,
            };
            g = layer.backward(x, &g, pg);
        }
        g
    }

    fn param_count_slots(&self) -> usize {
        2 * self
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::Conv2d(_)))
            .count()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            if let Layer::Conv2d(c) = layer {
                out.push(c.weight.as_mut_slice());
                out.push(c.bias.as_mut_slice());
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if let Layer::Conv2d(c) = layer {
                out.push(c.weight.as_slice());
                out.push(c.bias.as_slice());
            }
        }
        out
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients(self.params().iter().map(|p| vec![0.0; p.len()]).collect())
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Multiply-accumulates for one forward pass on an input of `shape`.
    pub fn forward_macs(&self, shape: Shape) -> usize {
        let mut s = shape;
        let mut macs = 0;
        for layer in &self.layers {
            let o = layer.output_shape(s);
            if let Layer::Conv2d(c) = layer {
                macs += o[0] * o[1] * o[2] * c.fan_in();
            }
            s = o;
        }
        macs
    }
}

/// Adam with bias correction over a list of parameter slices.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor3 {
        let n = shape.iter().product();
        Tensor3::from_parts(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn net(rng: &mut ChaCha8Rng) -> Sequential {
        Sequential::new(vec![
            Layer::Conv2d(Conv2d::new(2, 3, 3, 2, 1, rng)),
            Layer::Silu,
            Layer::Upsample2x,
            Layer::Conv2d(Conv2d::new(3, 2, 3, 1, 1, rng)),
            Layer::Sigmoid,
        ])
    }

    // Loss = Σ wᵢ yᵢ with fixed random weights, so dL/dy = w.
    fn probe_loss(net: &Sequential, x: &Tensor3, w: &[f64]) -> f64 {
        net.forward(x).data().iter().zip(w).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::new(2, 3, 3, 2, 1, &mut rng);
        let x = rand_tensor([2, 5, 6], &mut rng);
        let y = conv.forward(&x);
        let [_, ho, wo] = y.shape();
        assert_eq!([ho, wo], [3, 3]);
        for o in 0..3 {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = conv.bias[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= 5 || ix >= 6 {
                                    continue;
                                }
                                s += conv.weight[((o * 2 + c) * 3 + ky) * 3 + kx]
                                    * x.at(c, iy as usize, ix as usize);
                            }
                        }
                    }
                    assert!((s - y.at(o, oy, ox)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn input_and_parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = net(&mut rng);
        let x = rand_tensor([2, 6, 6], &mut rng);
        let out_shape = net.output_shape(x.shape());
        let w: Vec<f64> = (0..out_shape.iter().product::<usize>())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();

        let (_, trace) = net.forward_traced(&x);
        let mut grads = net.zero_grads();
        let dx = net.backward(
            &trace,
            Tensor3::from_parts(out_shape, w.clone()),
            Some(&mut grads),
        );

        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (probe_loss(&net, &xp, &w) - probe_loss(&net, &xm, &w)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-7, "x[{i}]: {fd} vs {}", dx.data()[i]);
        }

        let analytic = grads.0.clone();
        for (slot, grad) in analytic.iter().enumerate() {
            for (j, &g) in grad.iter().enumerate() {
                let orig = net.params()[slot][j];
                net.params_mut()[slot][j] = orig + h;
                let lp = probe_loss(&net, &x, &w);
                net.params_mut()[slot][j] = orig - h;
                let lm = probe_loss(&net, &x, &w);
                net.params_mut()[slot][j] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (fd - g).abs() < 1e-7,
                    "param {slot}/{j}: {fd} vs {g}"
                );
            }
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![1.0, -1.0];
        let mut adam = Adam::new(0.1, [2]);
        adam.step(&mut [p.as_mut_slice()], &[&[3.0, -0.5]]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }
}
