//! Layer implementations with hand-written backward passes.

use super::tensor::{gemm, Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Conv<T> {
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    /// `[top, bottom, left, right]`
    pub padding: [usize; 4],
    /// `cout x (cin * kh * kw)`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub grad_weight: Vec<T>,
    pub grad_bias: Vec<T>,
    input: Option<Tensor<T>>,
}

impl<T: Real> Conv<T> {
    pub fn new(cin: usize, cout: usize, kernel: [usize; 2], stride: [usize; 2], padding: [usize; 4]) -> Self {
        let k = cin * kernel[0] * kernel[1];
        Self {
            cin,
            cout,
            kernel,
            stride,
            padding,
            weight: vec![T::ZERO; cout * k],
            bias: vec![T::ZERO; cout],
            grad_weight: vec![T::ZERO; cout * k],
            grad_bias: vec![T::ZERO; cout],
            input: None,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.kernel[0] * self.kernel[1]
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let [kh, kw] = self.kernel;
        let [pt, pb, pl, pr] = self.padding;
        (
            (h + pt + pb - kh) / self.stride[0] + 1,
            (w + pl + pr - kw) / self.stride[1] + 1,
        )
    }

    /// Unfolds one `[cin, h, w]` item into `[(cin*kh*kw) x (oh*ow)]` columns.
    fn im2col(&self, x: &[T], h: usize, w: usize, cols: &mut [T]) {
        let [kh, kw] = self.kernel;
        let [sh, sw] = self.stride;
        let (pt, pl) = (self.padding[0] as isize, self.padding[2] as isize);
        let (oh, ow) = self.out_hw(h, w);
        let p = oh * ow;
        for c in 0..self.cin {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for i in 0..kh {
                for j in 0..kw {
                    let row = ((c * kh + i) * kw + j) * p;
                    for oy in 0..oh {
                        let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                        let iy = (oy * sh) as isize + i as isize - pt;
                        if iy < 0 || iy >= h as isize {
                            dst.fill(T::ZERO);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let offset = j as isize - pl;
                        if sw == 1 {
                            // contiguous run with zero fill at the borders
                            let lo = (-offset).clamp(0, ow as isize) as usize;
                            let hi = (w as isize - offset).clamp(0, ow as isize) as usize;
                            dst[..lo].fill(T::ZERO);
                            if hi > lo {
                                let start = (lo as isize + offset) as usize;
                                dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                            }
                            dst[hi.max(lo)..].fill(T::ZERO);
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * sw) as isize + offset;
                                *d = if ix < 0 || ix >= w as isize {
                                    T::ZERO
                                } else {
                                    src[ix as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adds the columns back into a `[cin, h, w]` gradient.
    fn col2im(&self, cols: &[T], h: usize, w: usize, dx: &mut [T]) {
        let [kh, kw] = self.kernel;
        let [sh, sw] = self.stride;
        let (pt, pl) = (self.padding[0] as isize, self.padding[2] as isize);
        let (oh, ow) = self.out_hw(h, w);
        let p = oh * ow;
        for c in 0..self.cin {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for i in 0..kh {
                for j in 0..kw {
                    let row = ((c * kh + i) * kw + j) * p;
                    for oy in 0..oh {
                        let iy = (oy * sh) as isize + i as isize - pt;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                        for (ox, &g) in src.iter().enumerate() {
                            let ix = (ox * sw) as isize + j as isize - pl;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape;
        debug_assert_eq!(c, self.cin);
        let (oh, ow) = self.out_hw(h, w);
        let (p, k) = (oh * ow, self.fan_in());
        let mut cols = vec![T::ZERO; k * p];
        let mut out = Tensor::zeros([n, self.cout, oh, ow]);
        for b in 0..n {
            self.im2col(x.item(b), h, w, &mut cols);
            let y = out.item_mut(b);
            for (o, chunk) in y.chunks_mut(p).enumerate() {
                chunk.fill(self.bias[o]);
            }
            gemm(false, false, self.cout, p, k, T::ONE, &self.weight, &cols, T::ONE, y);
        }
        out
    }

    pub fn forward_train(&mut self, x: Tensor<T>) -> Tensor<T> {
        let out = self.forward(&x);
        self.input = Some(x);
        out
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, grad: &Tensor<T>, want_input_grad: bool) -> Option<Tensor<T>> {
        let x = self.input.take().expect("conv backward without forward");
        let [n, _, h, w] = x.shape;
        let (oh, ow) = self.out_hw(h, w);
        let (p, k) = (oh * ow, self.fan_in());
        let mut cols = vec![T::ZERO; k * p];
        let mut dcols = if want_input_grad { vec![T::ZERO; k * p] } else { Vec::new() };
        let mut dx = if want_input_grad { Some(Tensor::zeros(x.shape)) } else { None };
        for b in 0..n {
            let g = grad.item(b);
            self.im2col(x.item(b), h, w, &mut cols);
            gemm(false, true, self.cout, k, p, T::ONE, g, &cols, T::ONE, &mut self.grad_weight);
            for (o, chunk) in g.chunks(p).enumerate() {
                let mut s = T::ZERO;
                for &v in chunk {
                    s += v;
                }
                self.grad_bias[o] += s;
            }
            if let Some(dx) = dx.as_mut() {
                gemm(true, false, k, p, self.cout, T::ONE, &self.weight, g, T::ZERO, &mut dcols);
                self.col2im(&dcols, h, w, dx.item_mut(b));
            }
        }
        dx
    }
}

/// Per-channel batch normalization over `(n, h, w)`.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub grad_gamma: Vec<T>,
    pub grad_beta: Vec<T>,
    normalized: Option<Tensor<T>>,
    inv_std: Vec<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: vec![T::ONE; channels],
            beta: vec![T::ZERO; channels],
            running_mean: vec![T::ZERO; channels],
            running_var: vec![T::ONE; channels],
            grad_gamma: vec![T::ZERO; channels],
            grad_beta: vec![T::ZERO; channels],
            normalized: None,
            inv_std: vec![T::ONE; channels],
        }
    }

    fn planes(shape: [usize; 4]) -> (usize, usize, usize) {
        (shape[0], shape[1], shape[2] * shape[3])
    }

    /// Inference mode: population statistics.
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, hw) = Self::planes(x.shape);
        let eps = T::from_f64(BN_EPS);
        let mut out = x.clone();
        for ch in 0..c {
            let scale = self.gamma[ch] / (self.running_var[ch] + eps).sqrt();
            let shift = self.beta[ch] - self.running_mean[ch] * scale;
            for b in 0..n {
                let start = (b * c + ch) * hw;
                for v in &mut out.data[start..start + hw] {
                    *v = *v * scale + shift;
                }
            }
        }
        out
    }

    /// Training mode: batch statistics, updates the running averages.
    pub fn forward_train(&mut self, x: Tensor<T>) -> Tensor<T> {
        let (n, c, hw) = Self::planes(x.shape);
        let count = (n * hw) as f64;
        let mut xhat = x;
        let mut out = Tensor::zeros(xhat.shape);
        for ch in 0..c {
            let planes = |b: usize| (b * c + ch) * hw..(b * c + ch + 1) * hw;
            let mean = (0..n).map(|b| lane_sum(&xhat.data[planes(b)], |v| v)).sum::<f64>() / count;
            let m = T::from_f64(mean);
            let var = (0..n)
                .map(|b| lane_sum(&xhat.data[planes(b)], |v| (v - m) * (v - m)))
                .sum::<f64>()
                / count;
            let s = T::from_f64(1.0 / (var + BN_EPS).sqrt());
            let (g, bt) = (self.gamma[ch], self.beta[ch]);
            for b in 0..n {
                let range = planes(b);
                for (xv, o) in xhat.data[range.clone()].iter_mut().zip(&mut out.data[range]) {
                    let nv = (*xv - m) * s;
                    *xv = nv;
                    *o = g * nv + bt;
                }
            }
            self.inv_std[ch] = s;
            let mom = T::from_f64(BN_MOMENTUM);
            self.running_mean[ch] = (T::ONE - mom) * self.running_mean[ch] + mom * m;
            self.running_var[ch] = (T::ONE - mom) * self.running_var[ch] + mom * T::from_f64(var);
        }
        self.normalized = Some(xhat);
        out
    }

    /// Consumes the output gradient and returns the input gradient.
    pub fn backward(&mut self, grad: Tensor<T>) -> Tensor<T> {
        let xhat = self.normalized.take().expect("batchnorm backward without forward");
        let (n, c, hw) = Self::planes(xhat.shape);
        let count = n * hw;
        let mut dx = grad;
        for ch in 0..c {
            let planes = |b: usize| (b * c + ch) * hw..(b * c + ch + 1) * hw;
            let (mut sum_g, mut sum_gx) = (0.0, 0.0);
            for b in 0..n {
                let range = planes(b);
                sum_g += lane_sum(&dx.data[range.clone()], |v| v);
                sum_gx += lane_dot(&dx.data[range.clone()], &xhat.data[range]);
            }
            self.grad_beta[ch] += T::from_f64(sum_g);
            self.grad_gamma[ch] += T::from_f64(sum_gx);
            let k = T::from_f64(self.gamma[ch].to_f64() * self.inv_std[ch].to_f64() / count as f64);
            let (cnt, sg, sgx) = (T::from_f64(count as f64), T::from_f64(sum_g), T::from_f64(sum_gx));
            for b in 0..n {
                let range = planes(b);
                for (d, &xv) in dx.data[range.clone()].iter_mut().zip(&xhat.data[range]) {
                    *d = k * (cnt * *d - sg - xv * sgx);
                }
            }
        }
        dx
    }
}

const LANES: usize = 8;

/// Sum of `f(x)` with independent partial sums, finished in `f64`.
fn lane_sum<T: Real>(xs: &[T], f: impl Fn(T) -> T) -> f64 {
    let mut acc = [T::ZERO; LANES];
    let chunks = xs.chunks_exact(LANES);
    let rest = chunks.remainder();
    for chunk in chunks {
        for (a, &v) in acc.iter_mut().zip(chunk) {
            *a += f(v);
        }
    }
    acc.iter().map(|a| a.to_f64()).sum::<f64>() + rest.iter().map(|&v| f(v).to_f64()).sum::<f64>()
}

fn lane_dot<T: Real>(xs: &[T], ys: &[T]) -> f64 {
    let mut acc = [T::ZERO; LANES];
    let (cx, cy) = (xs.chunks_exact(LANES), ys.chunks_exact(LANES));
    let rest: f64 = cx
        .remainder()
        .iter()
        .zip(cy.remainder())
        .map(|(&a, &b)| (a * b).to_f64())
        .sum();
    for (a, b) in cx.zip(cy) {
        for l in 0..LANES {
            acc[l] += a[l] * b[l];
        }
    }
    acc.iter().map(|a| a.to_f64()).sum::<f64>() + rest
}

#[derive(Debug, Clone, Default)]
pub struct Relu<T> {
    active: Vec<bool>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Real> Relu<T> {
    pub fn forward(x: &Tensor<T>) -> Tensor<T> {
        let mut out = x.clone();
        Self::apply(&mut out.data);
        out
    }

    fn apply(data: &mut [T]) {
        // NaN passes through so divergence stays visible
        for v in data {
            if *v < T::ZERO {
                *v = T::ZERO
            }
        }
    }

    pub fn forward_train(&mut self, mut x: Tensor<T>) -> Tensor<T> {
        Self::apply(&mut x.data);
        self.active.clear();
        self.active.extend(x.data.iter().map(|&v| v > T::ZERO));
        x
    }

    pub fn backward(&mut self, mut grad: Tensor<T>) -> Tensor<T> {
        assert_eq!(self.active.len(), grad.data.len(), "relu backward without forward");
        for (d, &on) in grad.data.iter_mut().zip(&self.active) {
            if !on {
                *d = T::ZERO;
            }
        }
        self.active.clear();
        grad
    }
}

#[derive(Debug, Clone)]
pub struct MaxPool {
    pub size: [usize; 2],
    pub stride: [usize; 2],
    /// Winning index within each input plane.
    argmax: Vec<u32>,
    input_shape: [usize; 4],
}

impl MaxPool {
    pub fn new(size: [usize; 2], stride: [usize; 2]) -> Self {
        Self {
            size,
            stride,
            argmax: Vec::new(),
            input_shape: [0; 4],
        }
    }

    fn run<T: Real>(&self, x: &Tensor<T>, mut record: Option<&mut Vec<u32>>) -> Tensor<T> {
        let [n, c, h, w] = x.shape;
        let [kh, kw] = self.size;
        let [sh, sw] = self.stride;
        let (oh, ow) = ((h - kh) / sh + 1, (w - kw) / sw + 1);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        if let Some(r) = record.as_deref_mut() {
            r.clear();
            r.resize(out.data.len(), 0);
        }
        for plane in 0..n * c {
            let input = &x.data[plane * h * w..(plane + 1) * h * w];
            let out_plane = &mut out.data[plane * oh * ow..(plane + 1) * oh * ow];
            let mut argmax = record.as_deref_mut().map(|r| &mut r[plane * oh * ow..(plane + 1) * oh * ow]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = oy * sh * w + ox * sw;
                    let mut best_v = input[best];
                    for i in 0..kh {
                        let row = (oy * sh + i) * w + ox * sw;
                        for (j, &v) in input[row..row + kw].iter().enumerate() {
                            // first maximum wins
                            if v > best_v {
                                best_v = v;
                                best = row + j;
                            }
                        }
                    }
                    out_plane[oy * ow + ox] = best_v;
                    if let Some(a) = argmax.as_deref_mut() {
                        a[oy * ow + ox] = best as u32;
                    }
                }
            }
        }
        out
    }

    pub fn forward<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x, None)
    }

    pub fn forward_train<T: Real>(&mut self, x: Tensor<T>) -> Tensor<T> {
        let mut argmax = std::mem::take(&mut self.argmax);
        let out = self.run(&x, Some(&mut argmax));
        self.argmax = argmax;
        self.input_shape = x.shape;
        out
    }

    pub fn backward<T: Real>(&mut self, grad: Tensor<T>) -> Tensor<T> {
        let [_, _, h, w] = self.input_shape;
        let mut dx = Tensor::zeros(self.input_shape);
        let per_plane = grad.data.len() / (self.input_shape[0] * self.input_shape[1]).max(1);
        for (o, (&idx, &g)) in self.argmax.iter().zip(&grad.data).enumerate() {
            let plane = o / per_plane;
            dx.data[plane * h * w + idx as usize] += g;
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub inputs: usize,
    pub units: usize,
    /// `units x inputs`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub grad_weight: Vec<T>,
    pub grad_bias: Vec<T>,
    input: Option<Tensor<T>>,
}

impl<T: Real> Dense<T> {
    pub fn new(inputs: usize, units: usize) -> Self {
        Self {
            inputs,
            units,
            weight: vec![T::ZERO; units * inputs],
            bias: vec![T::ZERO; units],
            grad_weight: vec![T::ZERO; units * inputs],
            grad_bias: vec![T::ZERO; units],
            input: None,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let n = x.batch();
        debug_assert_eq!(x.item_len(), self.inputs);
        let mut out = Tensor::zeros([n, self.units, 1, 1]);
        for row in out.data.chunks_mut(self.units) {
            row.copy_from_slice(&self.bias);
        }
        gemm(false, true, n, self.units, self.inputs, T::ONE, &x.data, &self.weight, T::ONE, &mut out.data);
        out
    }

    pub fn forward_train(&mut self, x: Tensor<T>) -> Tensor<T> {
        let out = self.forward(&x);
        self.input = Some(x);
        out
    }

    pub fn backward(&mut self, grad: &Tensor<T>, want_input_grad: bool) -> Option<Tensor<T>> {
        let x = self.input.take().expect("dense backward without forward");
        let n = x.batch();
        gemm(true, false, self.units, self.inputs, n, T::ONE, &grad.data, &x.data, T::ONE, &mut self.grad_weight);
        for row in grad.data.chunks(self.units) {
            for (gb, &g) in self.grad_bias.iter_mut().zip(row) {
                *gb += g;
            }
        }
        want_input_grad.then(|| {
            let mut dx = Tensor::zeros(x.shape);
            gemm(false, false, n, self.inputs, self.units, T::ONE, &grad.data, &self.weight, T::ZERO, &mut dx.data);
            dx
        })
    }
}
