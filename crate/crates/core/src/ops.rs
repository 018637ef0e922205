//! Forward and backward passes for the layer vocabulary of the model.
//!
//! Every op sums in a fixed order per output element, independent of batch size
//! and of how the batch is chunked. The same sample therefore produces the same
//! bits whether it is evaluated alone or inside a batch, which the intervention
//! identities rely on.
//!
//! Conventions: convolution is cross-correlation with zero padding, the ReLU
//! subgradient at exactly 0 is 0, and max-pool ties route to the first maximum in
//! row-major window order.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Target number of im2col columns processed per chunk.
const COLS_PER_CHUNK: usize = 2048;

/// Output extent of a sliding window, or an error when the window does not tile evenly.
pub fn window_output(extent: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidGeometry("stride must be positive".into()));
    }
    let padded = extent + 2 * pad;
    if kernel == 0 || padded < kernel {
        return Err(Error::InvalidGeometry(format!(
            "window {kernel} larger than padded extent {padded}"
        )));
    }
    if (padded - kernel) % stride != 0 {
        return Err(Error::InvalidGeometry(format!(
            "({extent} + 2*{pad} - {kernel}) is not divisible by stride {stride}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

fn dims4<T: Real>(t: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    match t.shape() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        s => Err(Error::InvalidShape(format!("{what} must be 4-D, got {s:?}"))),
    }
}

fn dims2<T: Real>(t: &Tensor<T>, what: &str) -> Result<[usize; 2]> {
    match t.shape() {
        &[a, b] => Ok([a, b]),
        s => Err(Error::InvalidShape(format!("{what} must be 2-D, got {s:?}"))),
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    hi: usize,
    wi: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new<T: Real>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let [batch, cin, hi, wi] = dims4(input, "conv input")?;
        let [cout, kcin, kh, kw] = dims4(kernel, "conv kernel")?;
        if cin != kcin {
            return Err(Error::InvalidShape(format!(
                "input has {cin} channels, kernel expects {kcin}"
            )));
        }
        let ho = window_output(hi, kh, stride, pad)?;
        let wo = window_output(wi, kw, stride, pad)?;
        Ok(Self {
            batch,
            cin,
            hi,
            wi,
            cout,
            kh,
            kw,
            ho,
            wo,
            stride,
            pad,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn chunk(&self) -> usize {
        (COLS_PER_CHUNK / self.p()).clamp(1, self.batch)
    }

    /// Fills `col` (K rows of `n*P` columns) for batch items `b0..b0+n`.
    fn im2col<T: Real>(&self, input: &[T], b0: usize, n: usize, col: &mut [T]) {
        let (p, width) = (self.p(), n * self.p());
        let item = self.cin * self.hi * self.wi;
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let k = (ci * self.kh + ky) * self.kw + kx;
                    let row = &mut col[k * width..(k + 1) * width];
                    for bi in 0..n {
                        let plane = &input[(b0 + bi) * item + ci * self.hi * self.wi..];
                        let dst = &mut row[bi * p..(bi + 1) * p];
                        for oy in 0..self.ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            let out_row = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                            if iy < 0 || iy >= self.hi as isize {
                                out_row.fill(T::zero());
                                continue;
                            }
                            let src = &plane[iy as usize * self.wi..(iy as usize + 1) * self.wi];
                            for (ox, o) in out_row.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                *o = if ix < 0 || ix >= self.wi as isize {
                                    T::zero()
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

    /// Scatter-adds `gcol` back onto the input gradient for batch items `b0..b0+n`.
    fn col2im<T: Real>(&self, gcol: &[T], b0: usize, n: usize, grad_input: &mut [T]) {
        let (p, width) = (self.p(), n * self.p());
        let item = self.cin * self.hi * self.wi;
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let k = (ci * self.kh + ky) * self.kw + kx;
                    let row = &gcol[k * width..(k + 1) * width];
                    for bi in 0..n {
                        let base = (b0 + bi) * item + ci * self.hi * self.wi;
                        let src = &row[bi * p..(bi + 1) * p];
                        for oy in 0..self.ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.hi as isize {
                                continue;
                            }
                            for ox in 0..self.wo {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= self.wi as isize {
                                    continue;
                                }
                                let g = &mut grad_input[base + iy as usize * self.wi + ix as usize];
                                *g = *g + src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

const TILE_ROWS: usize = 4;
const TILE_COLS: usize = 16;

/// Register tile: `TILE_ROWS` output channels by `TILE_COLS` columns starting at `j`,
/// summed over k in order from zero.
#[inline(always)]
fn conv_tile<T: Real>(w_rows: &[T], k: usize, col: &[T], width: usize, j: usize, acc: &mut [T]) {
    let mut t = [[T::zero(); TILE_COLS]; TILE_ROWS];
    for kk in 0..k {
        let c: &[T; TILE_COLS] = col[kk * width + j..kk * width + j + TILE_COLS].try_into().unwrap();
        for (r, row) in t.iter_mut().enumerate() {
            let wk = w_rows[r * k + kk];
            for (a, &cv) in row.iter_mut().zip(c) {
                *a = *a + wk * cv;
            }
        }
    }
    for (r, row) in t.iter().enumerate() {
        acc[r * width + j..r * width + j + TILE_COLS].copy_from_slice(row);
    }
}

/// 2-D cross-correlation: `input[B,Cin,Hi,Wi] * kernel[Cout,Cin,Kh,Kw] + bias[Cout]`.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, kernel, stride, pad)?;
    if bias.shape() != [g.cout] {
        return Err(Error::InvalidShape(format!(
            "bias {:?} does not match {} output channels",
            bias.shape(),
            g.cout
        )));
    }
    let (k, p, chunk) = (g.k(), g.p(), g.chunk());
    let mut out = Tensor::zeros(&[g.batch, g.cout, g.ho, g.wo]);
    let mut col = vec![T::zero(); k * chunk * p];
    let mut acc = vec![T::zero(); TILE_ROWS * chunk * p];
    let w = kernel.data();
    let (x, b) = (input.data(), bias.data());
    let out_data = out.data_mut();

    let mut b0 = 0;
    while b0 < g.batch {
        let n = chunk.min(g.batch - b0);
        let width = n * p;
        g.im2col(x, b0, n, &mut col[..k * width]);
        let col = &col[..k * width];
        for co0 in (0..g.cout).step_by(TILE_ROWS) {
            let rows = (g.cout - co0).min(TILE_ROWS);
            let w_rows = &w[co0 * k..(co0 + rows) * k];
            let acc = &mut acc[..rows * width];
            let mut j = 0;
            if rows == TILE_ROWS {
                while j + TILE_COLS <= width {
                    conv_tile(w_rows, k, col, width, j, acc);
                    j += TILE_COLS;
                }
            }
            for r in 0..rows {
                let w_row = &w_rows[r * k..(r + 1) * k];
                for jj in j..width {
                    let mut a = T::zero();
                    for (kk, &wk) in w_row.iter().enumerate() {
                        a = a + wk * col[kk * width + jj];
                    }
                    acc[r * width + jj] = a;
                }
                let co = co0 + r;
                for bi in 0..n {
                    let dst = &mut out_data[((b0 + bi) * g.cout + co) * p..][..p];
                    let src = &acc[r * width + bi * p..r * width + (bi + 1) * p];
                    for (d, &a) in dst.iter_mut().zip(src) {
                        *d = a + b[co];
                    }
                }
            }
        }
        b0 += n;
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`].
#[derive(Debug, Clone)]
pub struct Conv2dGrads<T: Real> {
    pub grad_input: Option<Tensor<T>>,
    pub grad_kernel: Option<Tensor<T>>,
    pub grad_bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = conv2d_backward_with(input, kernel, grad_out, stride, pad, true, true)?;
    Ok((
        g.grad_input.expect("requested"),
        g.grad_kernel.expect("requested"),
        g.grad_bias.expect("requested"),
    ))
}

/// Backward pass computing only the requested gradients.
pub fn conv2d_backward_with<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_input: bool,
    need_params: bool,
) -> Result<Conv2dGrads<T>> {
    let g = ConvGeom::new(input, kernel, stride, pad)?;
    if grad_out.shape() != [g.batch, g.cout, g.ho, g.wo] {
        return Err(Error::InvalidShape(format!(
            "grad_out {:?} does not match forward output {:?}",
            grad_out.shape(),
            [g.batch, g.cout, g.ho, g.wo]
        )));
    }
    let (k, p, chunk) = (g.k(), g.p(), g.chunk());
    let w = kernel.data();
    let gout = grad_out.data();

    let mut grad_input = need_input.then(|| Tensor::zeros(input.shape()));
    let mut grad_kernel = need_params.then(|| Tensor::zeros(kernel.shape()));
    let grad_bias = need_params.then(|| {
        Tensor::from_fn(&[g.cout], |co| {
            let mut s = T::zero();
            for b in 0..g.batch {
                for &v in &gout[(b * g.cout + co) * p..][..p] {
                    s = s + v;
                }
            }
            s
        })
    });

    let mut col = vec![T::zero(); if need_params { k * chunk * p } else { 0 }];
    let mut gcol = vec![T::zero(); if need_input { k * chunk * p } else { 0 }];
    let mut gt = vec![T::zero(); g.cout * chunk * p];

    let mut b0 = 0;
    while b0 < g.batch {
        let n = chunk.min(g.batch - b0);
        let width = n * p;
        // grad_out transposed to [Cout][n*P]
        for co in 0..g.cout {
            for bi in 0..n {
                gt[co * width + bi * p..][..p]
                    .copy_from_slice(&gout[((b0 + bi) * g.cout + co) * p..][..p]);
            }
        }
        if let Some(gk) = grad_kernel.as_mut() {
            g.im2col(input.data(), b0, n, &mut col[..k * width]);
            let gk = gk.data_mut();
            for co in 0..g.cout {
                let grow = &gt[co * width..(co + 1) * width];
                for kk in 0..k {
                    let crow = &col[kk * width..(kk + 1) * width];
                    let mut s = T::zero();
                    for (&a, &c) in grow.iter().zip(crow) {
                        s = s + a * c;
                    }
                    gk[co * k + kk] = gk[co * k + kk] + s;
                }
            }
        }
        if let Some(gi) = grad_input.as_mut() {
            let gcol = &mut gcol[..k * width];
            gcol.fill(T::zero());
            for co in 0..g.cout {
                let grow = &gt[co * width..(co + 1) * width];
                for kk in 0..k {
                    let wk = w[co * k + kk];
                    for (d, &a) in gcol[kk * width..(kk + 1) * width].iter_mut().zip(grow) {
                        *d = *d + wk * a;
                    }
                }
            }
            g.col2im(gcol, b0, n, gi.data_mut());
        }
        b0 += n;
    }
    Ok(Conv2dGrads {
        grad_input,
        grad_kernel,
        grad_bias,
    })
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `grad_out` where the forward input was strictly positive.
pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    input.zip_map(grad_out, |x, g| if x > T::zero() { g } else { T::zero() })
}

/// `input[B,F] · weight[O,F]ᵀ + bias[O]`.
pub fn dense<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let [batch, f] = dims2(input, "dense input")?;
    let [o, wf] = dims2(weight, "dense weight")?;
    if f != wf || bias.shape() != [o] {
        return Err(Error::InvalidShape(format!(
            "dense input {:?}, weight {:?}, bias {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let (x, w, b) = (input.data(), weight.data(), bias.data());
    Ok(Tensor::from_fn(&[batch, o], |i| {
        let (bi, oi) = (i / o, i % o);
        let mut s = T::zero();
        for (&a, &c) in x[bi * f..(bi + 1) * f].iter().zip(&w[oi * f..(oi + 1) * f]) {
            s = s + a * c;
        }
        s + b[oi]
    }))
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn dense_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [batch, f] = dims2(input, "dense input")?;
    let [o, wf] = dims2(weight, "dense weight")?;
    if f != wf || grad_out.shape() != [batch, o] {
        return Err(Error::InvalidShape(format!(
            "dense backward input {:?}, weight {:?}, grad {:?}",
            input.shape(),
            weight.shape(),
            grad_out.shape()
        )));
    }
    let (x, w, g) = (input.data(), weight.data(), grad_out.data());
    let grad_input = Tensor::from_fn(&[batch, f], |i| {
        let (bi, fi) = (i / f, i % f);
        let mut s = T::zero();
        for oi in 0..o {
            s = s + g[bi * o + oi] * w[oi * f + fi];
        }
        s
    });
    let grad_weight = Tensor::from_fn(&[o, f], |i| {
        let (oi, fi) = (i / f, i % f);
        let mut s = T::zero();
        for bi in 0..batch {
            s = s + g[bi * o + oi] * x[bi * f + fi];
        }
        s
    });
    let grad_bias = Tensor::from_fn(&[o], |oi| {
        let mut s = T::zero();
        for bi in 0..batch {
            s = s + g[bi * o + oi];
        }
        s
    });
    Ok((grad_input, grad_weight, grad_bias))
}

/// Max-pool output plus the flat input index each output was taken from.
#[derive(Debug, Clone)]
pub struct MaxPool<T: Real> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
}

pub fn maxpool2d<T: Real>(input: &Tensor<T>, window: usize, stride: usize) -> Result<MaxPool<T>> {
    let [batch, c, h, w] = dims4(input, "maxpool input")?;
    let ho = window_output(h, window, stride, 0)?;
    let wo = window_output(w, window, stride, 0)?;
    let x = input.data();
    let mut argmax = Vec::with_capacity(batch * c * ho * wo);
    let mut out = Vec::with_capacity(batch * c * ho * wo);
    for plane in 0..batch * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..window {
                    for kx in 0..window {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                argmax.push(best);
                out.push(x[best]);
            }
        }
    }
    Ok(MaxPool {
        output: Tensor::new(vec![batch, c, ho, wo], out)?,
        argmax,
    })
}

/// Routes each output gradient to the input position recorded in `argmax`.
pub fn maxpool2d_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::InvalidShape(format!(
            "{} pooled positions vs grad of {} elements",
            argmax.len(),
            grad_out.len()
        )));
    }
    let mut grad = Tensor::zeros(input_shape);
    let gd = grad.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        gd[i] = gd[i] + g;
    }
    Ok(grad)
}

/// Per-sample cross-entropy losses and the gradient of their sum w.r.t. the logits.
pub fn cross_entropy_per_sample<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(Vec<T>, Tensor<T>)> {
    let [batch, classes] = dims2(logits, "logits")?;
    if labels.len() != batch {
        return Err(Error::InvalidShape(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    let mut losses = Vec::with_capacity(batch);
    let mut grad = Tensor::zeros(logits.shape());
    for (b, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        let z = logits.item(b);
        let top = crate::tensor::argmax(z);
        let m = z[top];
        // mass of every class but the top one, relative to the top one
        let mut rest = T::zero();
        for (k, &v) in z.iter().enumerate() {
            if k != top {
                rest = rest + (v - m).exp();
            }
        }
        let denom = T::one() + rest;
        losses.push((m - z[y]) + rest.ln_1p());
        let g = grad.item_mut(b);
        for (gi, &v) in g.iter_mut().zip(z) {
            *gi = (v - m).exp() / denom;
        }
        g[top] = T::one() / denom;
        g[y] = if y == top { -rest / denom } else { g[y] - T::one() };
    }
    Ok((losses, grad))
}

/// Mean cross-entropy over the batch; gradient is `(softmax - onehot) / B`.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (losses, grad) = cross_entropy_per_sample(logits, labels)?;
    let n = T::from_f64(labels.len() as f64);
    let mean = losses.into_iter().fold(T::zero(), |a, l| a + l) / n;
    Ok((mean, grad.map(|g| g / n)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_all_ones() {
        let x = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &k, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::<f32>::from_fn(&[1, 1, 3, 3], |i| i as f32 - 4.0);
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d_forward(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            conv2d_forward(&x, &k, &Tensor::zeros(&[1]), 1, 0),
            Err(Error::InvalidShape(_))
        ));
        let k = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(matches!(
            conv2d_forward(&x, &k, &Tensor::zeros(&[1]), 2, 0),
            Err(Error::InvalidGeometry(_))
        ));
        let g = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(matches!(
            conv2d_backward(&x, &k, &g, 1, 0),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn conv_backward_zero_grad() {
        let x = Tensor::<f64>::from_fn(&[2, 2, 4, 4], |i| (i as f64).sin());
        let k = Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f64).cos());
        let g = Tensor::zeros(&[2, 3, 2, 2]);
        let (gi, gk, gb) = conv2d_backward(&x, &k, &g, 1, 0).unwrap();
        assert!(gi.data().iter().chain(gk.data()).chain(gb.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn conv_backward_scalar_kernel() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 2, 3], |i| i as f64 + 1.0);
        let k = Tensor::full(&[1, 1, 1, 1], 2.5);
        let g = Tensor::from_fn(&[1, 1, 2, 3], |i| 0.5 - i as f64);
        let (gi, gk, gb) = conv2d_backward(&x, &k, &g, 1, 0).unwrap();
        for (a, b) in gi.data().iter().zip(g.data()) {
            assert_eq!(*a, 2.5 * b);
        }
        let expect: f64 = x.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        assert!((gk.data()[0] - expect).abs() < 1e-12);
        assert!((gb.data()[0] - g.data().iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn relu_values() {
        let x = Tensor::<f32>::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = Tensor::full(&[3], 1.0);
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 0.0, 1.0]);
        let pos = Tensor::<f32>::new(vec![2], vec![0.5, 3.0]).unwrap();
        assert_eq!(relu(&pos), pos);
        assert_eq!(relu_backward(&pos, &pos).unwrap(), pos);
    }

    #[test]
    fn dense_identity_and_zero() {
        let x = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0);
        let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        assert_eq!(dense(&x, &eye, &Tensor::zeros(&[3])).unwrap(), x);
        let bias = Tensor::new(vec![2], vec![0.25, -4.0]).unwrap();
        let y = dense(&x, &Tensor::zeros(&[2, 3]), &bias).unwrap();
        assert_eq!(y.data(), &[0.25, -4.0, 0.25, -4.0]);
        assert!(dense(&x, &Tensor::zeros(&[2, 4]), &bias).is_err());
    }

    #[test]
    fn maxpool_basic_and_ties() {
        let x = Tensor::<f32>::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(p.output.data(), &[4.0]);

        let c = Tensor::<f32>::full(&[1, 1, 4, 4], 7.0);
        let p = maxpool2d(&c, 2, 2).unwrap();
        assert!(p.output.data().iter().all(|&v| v == 7.0));
        assert_eq!(p.argmax, vec![0, 2, 8, 10]);
        let g = maxpool2d_backward(c.shape(), &p.argmax, &Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
        let expect: Vec<f32> = (0..16)
            .map(|i| if [0, 2, 8, 10].contains(&i) { 1.0 } else { 0.0 })
            .collect();
        assert_eq!(g.data(), expect.as_slice());
        assert!(matches!(maxpool2d(&c, 3, 2), Err(Error::InvalidGeometry(_))));
    }

    #[test]
    fn cross_entropy_cases() {
        let z = Tensor::<f64>::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let (l, _) = softmax_cross_entropy(&z, &[0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);

        let z = Tensor::<f32>::new(vec![1, 2], vec![1000.0, 0.0]).unwrap();
        let (l, g) = softmax_cross_entropy(&z, &[0]).unwrap();
        assert!(l.is_finite() && l.abs() < 1e-6);
        assert!(g.data().iter().all(|v| v.is_finite()));

        // confident predictions keep full relative precision in 32-bit
        let z = Tensor::<f32>::new(vec![1, 2], vec![20.0, 0.0]).unwrap();
        let (l, g) = cross_entropy_per_sample(&z, &[0]).unwrap();
        let tiny = (-20.0f64).exp().ln_1p();
        assert!((l[0] as f64 - tiny).abs() < 1e-6 * tiny);
        assert!((g.data()[0] as f64 + tiny).abs() < 1e-6 * tiny);
        assert!((g.data()[0] + g.data()[1]).abs() < 1e-12);

        assert!(matches!(
            softmax_cross_entropy(&z, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }
}
