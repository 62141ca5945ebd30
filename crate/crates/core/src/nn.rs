//! One-dimensional convolution stacks with explicit backward passes, and the
//! adaptive-moment optimizer that updates them.
//!
//! Sequences are `T × C` matrices: time along rows, channels along columns.
//! Fully-connected frame-wise layers are kernel-1 convolutions.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::real::Real;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Geometry of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Nearest-neighbour repetition of the input along time before convolving.
    pub upsample: usize,
}

impl ConvSpec {
    pub fn new(in_dim: usize, out_dim: usize, kernel: usize) -> Self {
        ConvSpec { in_dim, out_dim, kernel, stride: 1, upsample: 1 }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn upsample(mut self, factor: usize) -> Self {
        self.upsample = factor;
        self
    }
}

/// Zero-padded 1-D convolution; output length is `ceil(T·upsample / stride)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv1d<R> {
    pub spec: ConvSpec,
    /// `(kernel · in_dim) × out_dim`, row index `j · in_dim + c` for tap `j`.
    pub weight: Array2<R>,
    pub bias: Array1<R>,
}

pub struct ConvCache<R> {
    cols: Array2<R>,
    t_up: usize,
}

impl<R: Real> Conv1d<R> {
    /// Kaiming-uniform initialisation for leaky-rectifier networks; zero bias.
    pub fn init<G: Rng + ?Sized>(spec: ConvSpec, rng: &mut G) -> Self {
        let fan_in = (spec.kernel * spec.in_dim) as f64;
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let bound = gain * (3.0 / fan_in).sqrt();
        let weight =
            Array2::from_shape_fn((spec.kernel * spec.in_dim, spec.out_dim), |_| R::lit(rng.gen_range(-bound..bound)));
        Conv1d { spec, weight, bias: Array1::zeros(spec.out_dim) }
    }

    pub fn zeros(spec: ConvSpec) -> Self {
        Conv1d {
            spec,
            weight: Array2::zeros((spec.kernel * spec.in_dim, spec.out_dim)),
            bias: Array1::zeros(spec.out_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.spec)
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn out_len(&self, t_in: usize) -> usize {
        (t_in * self.spec.upsample).div_ceil(self.spec.stride)
    }

    fn pad_left(&self) -> usize {
        (self.spec.kernel - 1) / 2
    }

    fn im2col(&self, x: ArrayView2<R>) -> (Array2<R>, usize) {
        let ConvSpec { in_dim, kernel, stride, upsample, .. } = self.spec;
        assert_eq!(x.ncols(), in_dim, "conv input width");
        let t_up = x.nrows() * upsample;
        let t_out = t_up.div_ceil(stride);
        let pad = self.pad_left() as isize;
        let mut cols = Array2::<R>::zeros((t_out, kernel * in_dim));
        for (n, mut row) in cols.outer_iter_mut().enumerate() {
            let start = (n * stride) as isize - pad;
            for j in 0..kernel {
                let pos = start + j as isize;
                if pos < 0 || pos >= t_up as isize {
                    continue;
                }
                let src = x.row(pos as usize / upsample);
                row.slice_mut(s![j * in_dim..(j + 1) * in_dim]).assign(&src);
            }
        }
        (cols, t_up)
    }

    pub fn forward(&self, x: ArrayView2<R>) -> (Array2<R>, ConvCache<R>) {
        let (cols, t_up) = self.im2col(x);
        let mut y = cols.dot(&self.weight);
        y += &self.bias;
        (y, ConvCache { cols, t_up })
    }

    /// Accumulates parameter gradients into `grad`; returns the input gradient
    /// when `need_dx` is set.
    pub fn backward(
        &self,
        cache: &ConvCache<R>,
        dy: ArrayView2<R>,
        grad: &mut Conv1d<R>,
        need_dx: bool,
    ) -> Option<Array2<R>> {
        grad.weight += &cache.cols.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
        if !need_dx {
            return None;
        }
        let ConvSpec { in_dim, kernel, stride, upsample, .. } = self.spec;
        let dcols = dy.dot(&self.weight.t());
        let t_in = cache.t_up / upsample;
        let mut dx = Array2::<R>::zeros((t_in, in_dim));
        let pad = self.pad_left() as isize;
        for (n, row) in dcols.outer_iter().enumerate() {
            let start = (n * stride) as isize - pad;
            for j in 0..kernel {
                let pos = start + j as isize;
                if pos < 0 || pos >= cache.t_up as isize {
                    continue;
                }
                let mut dst = dx.row_mut(pos as usize / upsample);
                dst += &row.slice(s![j * in_dim..(j + 1) * in_dim]);
            }
        }
        Some(dx)
    }
}

/// Convolutions with a leaky rectifier after every layer but the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvStack<R> {
    pub layers: Vec<Conv1d<R>>,
}

pub struct StackCache<R> {
    convs: Vec<ConvCache<R>>,
    pre: Vec<Array2<R>>,
}

fn leaky<R: Real>(v: R) -> R {
    if v > R::zero() {
        v
    } else {
        v * R::lit(LEAKY_SLOPE)
    }
}

impl<R: Real> ConvStack<R> {
    pub fn init<G: Rng + ?Sized>(specs: &[ConvSpec], rng: &mut G) -> Self {
        for pair in specs.windows(2) {
            assert_eq!(pair[0].out_dim, pair[1].in_dim, "stack widths must chain");
        }
        ConvStack { layers: specs.iter().map(|s| Conv1d::init(*s, rng)).collect() }
    }

    pub fn zeros_like(&self) -> Self {
        ConvStack { layers: self.layers.iter().map(Conv1d::zeros_like).collect() }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.spec.out_dim).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Conv1d::num_params).sum()
    }

    pub fn out_len(&self, t_in: usize) -> usize {
        self.layers.iter().fold(t_in, |t, l| l.out_len(t))
    }

    pub fn forward(&self, x: ArrayView2<R>) -> (Array2<R>, StackCache<R>) {
        let mut convs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len().saturating_sub(1));
        let (mut h, first) = self.layers[0].forward(x);
        convs.push(first);
        for layer in &self.layers[1..] {
            let act = h.mapv(leaky);
            pre.push(h);
            let (y, cache) = layer.forward(act.view());
            convs.push(cache);
            h = y;
        }
        (h, StackCache { convs, pre })
    }

    /// Forward pass that keeps no backward state.
    pub fn infer(&self, x: ArrayView2<R>) -> Array2<R> {
        self.forward(x).0
    }

    pub fn backward(
        &self,
        cache: &StackCache<R>,
        dy: ArrayView2<R>,
        grad: &mut ConvStack<R>,
        need_dx: bool,
    ) -> Option<Array2<R>> {
        let slope = R::lit(LEAKY_SLOPE);
        let mut upstream = dy.to_owned();
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                Zip::from(&mut upstream).and(&cache.pre[i]).for_each(|g, &p| {
                    if p <= R::zero() {
                        *g *= slope;
                    }
                });
            }
            let want_dx = i > 0 || need_dx;
            {
                let dx = self.layers[i].backward(&cache.convs[i], upstream.view(), &mut grad.layers[i], want_dx)?;
                upstream = dx
            }
        }
        Some(upstream)
    }

    pub fn flat_params(&self) -> Vec<R> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[R]) {
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|w| *w = it.next().expect("flat length"));
            l.bias.iter_mut().for_each(|b| *b = it.next().expect("flat length"));
        }
        assert!(it.next().is_none(), "flat length");
    }

    pub fn add_assign(&mut self, other: &ConvStack<R>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, k: R) {
        for l in &mut self.layers {
            l.weight.mapv_inplace(|v| v * k);
            l.bias.mapv_inplace(|v| v * k);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| *v == R::zero()))
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates for one parameter stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamMoments<R> {
    pub m: ConvStack<R>,
    pub v: ConvStack<R>,
    pub t: u64,
}

impl<R: Real> AdamMoments<R> {
    pub fn for_stack(stack: &ConvStack<R>) -> Self {
        AdamMoments { m: stack.zeros_like(), v: stack.zeros_like(), t: 0 }
    }

    pub fn step(&mut self, params: &mut ConvStack<R>, grad: &ConvStack<R>, cfg: &AdamConfig) {
        self.t += 1;
        let b1 = R::lit(cfg.beta1);
        let b2 = R::lit(cfg.beta2);
        let one = R::one();
        let c1 = R::lit(1.0 - cfg.beta1.powi(self.t as i32));
        let c2 = R::lit(1.0 - cfg.beta2.powi(self.t as i32));
        let lr = R::lit(cfg.lr);
        let eps = R::lit(cfg.eps);
        let update = |p: &mut R, g: &R, m: &mut R, v: &mut R| {
            *m = b1 * *m + (one - b1) * *g;
            *v = b2 * *v + (one - b2) * *g * *g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + eps);
        };
        for (((p, g), m), v) in
            params.layers.iter_mut().zip(&grad.layers).zip(&mut self.m.layers).zip(&mut self.v.layers)
        {
            Zip::from(&mut p.weight).and(&g.weight).and(&mut m.weight).and(&mut v.weight).for_each(update);
            Zip::from(&mut p.bias).and(&g.bias).and(&mut m.bias).and(&mut v.bias).for_each(update);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct convolution sum, independent of the im2col path.
    fn direct_conv(layer: &Conv1d<f64>, x: &Array2<f64>) -> Array2<f64> {
        let ConvSpec { in_dim, out_dim, kernel, stride, upsample } = layer.spec;
        let t_up = x.nrows() * upsample;
        let t_out = t_up.div_ceil(stride);
        let pad = (kernel as isize - 1) / 2;
        let mut y = Array2::zeros((t_out, out_dim));
        for n in 0..t_out {
            for o in 0..out_dim {
                let mut acc = layer.bias[o];
                for j in 0..kernel {
                    let pos = (n * stride) as isize - pad + j as isize;
                    if pos < 0 || pos >= t_up as isize {
                        continue;
                    }
                    for c in 0..in_dim {
                        acc += layer.weight[[j * in_dim + c, o]] * x[[pos as usize / upsample, c]];
                    }
                }
                y[[n, o]] = acc;
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for spec in [
            ConvSpec::new(3, 4, 5),
            ConvSpec::new(3, 2, 5).stride(2),
            ConvSpec::new(2, 3, 3).upsample(2),
            ConvSpec::new(4, 4, 1),
        ] {
            let layer = Conv1d::<f64>::init(spec, &mut rng);
            let x = rand_mat(&mut rng, 9, spec.in_dim);
            let (y, _) = layer.forward(x.view());
            let expect = direct_conv(&layer, &x);
            assert_eq!(y.dim(), expect.dim());
            for (a, b) in y.iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stack_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let specs = [
            ConvSpec::new(3, 5, 3),
            ConvSpec::new(5, 4, 3).stride(2),
            ConvSpec::new(4, 3, 3).upsample(2),
            ConvSpec::new(3, 2, 1),
        ];
        let stack = ConvStack::<f64>::init(&specs, &mut rng);
        let x = rand_mat(&mut rng, 8, 3);
        let (y, cache) = stack.forward(x.view());
        let weights = rand_mat(&mut rng, y.nrows(), y.ncols());
        let loss = |st: &ConvStack<f64>, xi: &Array2<f64>| (st.infer(xi.view()) * &weights).sum();

        let mut grad = stack.zeros_like();
        let dx = stack.backward(&cache, weights.view(), &mut grad, true).unwrap();

        let h = 1e-6;
        let base = stack.flat_params();
        let analytic = grad.flat_params();
        for k in (0..base.len()).step_by(7) {
            let mut p = base.clone();
            p[k] += h;
            let mut plus = stack.clone();
            plus.set_flat_params(&p);
            p[k] -= 2.0 * h;
            let mut minus = stack.clone();
            minus.set_flat_params(&p);
            let fd = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * h);
            assert!((fd - analytic[k]).abs() < 1e-6 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", analytic[k]);
        }
        for idx in [(0, 0), (3, 1), (7, 2)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&stack, &xp) - loss(&stack, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut stack = ConvStack::<f64>::init(&[ConvSpec::new(2, 2, 1)], &mut rng);
        let before = stack.flat_params();
        let mut grad = stack.zeros_like();
        grad.set_flat_params(&[1.0, -2.0, 0.5, 3.0, -1.0, 0.0]);
        let mut moments = AdamMoments::for_stack(&stack);
        let cfg = AdamConfig::default();
        moments.step(&mut stack, &grad, &cfg);
        let after = stack.flat_params();
        let g = grad.flat_params();
        for i in 0..before.len() {
            let expect = if g[i] == 0.0 { 0.0 } else { -cfg.lr * g[i].signum() };
            assert!((after[i] - before[i] - expect).abs() < 1e-9);
        }
        assert_eq!(moments.t, 1);
    }
}
