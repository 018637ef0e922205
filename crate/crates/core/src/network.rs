//! Sequential CNN with a split point after a target convolution.
//!
//! The model is `g = g_B ∘ g_A`, where `g_A` runs layers `0..=split` and `g_B` runs
//! the rest. With `split_after_activation` set, a ReLU directly following the
//! target convolution is moved into `g_A`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{argmax, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    #[serde(rename = "maxpool2d")]
    MaxPool2d { window: usize, stride: usize },
    Flatten,
    Dense {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn dense(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Dense {
            in_features,
            out_features,
        }
    }

    /// `(weight shape, bias shape)` for parameterized layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((vec![out_channels, in_channels, kernel, kernel], vec![out_channels])),
            LayerSpec::Dense {
                in_features,
                out_features,
            } => Some((vec![out_features, in_features], vec![out_features])),
            _ => None,
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match (*self, input) {
            (
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                },
                &[c, h, w],
            ) => {
                if c != in_channels {
                    return Err(Error::InvalidShape(format!(
                        "conv expects {in_channels} channels, gets {c}"
                    )));
                }
                Ok(vec![
                    out_channels,
                    ops::window_output(h, kernel, stride, pad)?,
                    ops::window_output(w, kernel, stride, pad)?,
                ])
            }
            (LayerSpec::MaxPool2d { window, stride }, &[c, h, w]) => Ok(vec![
                c,
                ops::window_output(h, window, stride, 0)?,
                ops::window_output(w, window, stride, 0)?,
            ]),
            (LayerSpec::Relu, s) => Ok(s.to_vec()),
            (LayerSpec::Flatten, s) => Ok(vec![s.iter().product()]),
            (
                LayerSpec::Dense {
                    in_features,
                    out_features,
                },
                &[f],
            ) if f == in_features => Ok(vec![out_features]),
            (layer, s) => Err(Error::InvalidShape(format!(
                "layer {layer:?} cannot take input of shape {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Per-sample input shape `[channels, height, width]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// Index of the target convolution (inclusive in `g_A`).
    pub split_index: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub split_after_activation: bool,
}

impl NetworkSpec {
    /// The MNIST-37 fixture: four convolutions and one dense layer, 16 channels at the split.
    pub fn mnist37() -> Self {
        NetworkSpec {
            input_shape: vec![1, 28, 28],
            layers: vec![
                LayerSpec::conv(1, 16, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::conv(16, 16, 2, 2, 0),
                LayerSpec::Relu,
                LayerSpec::conv(16, 32, 2, 2, 0),
                LayerSpec::Relu,
                LayerSpec::conv(32, 32, 3, 2, 0),
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::dense(32 * 3 * 3, 2),
            ],
            split_index: 0,
            num_classes: 2,
            split_after_activation: false,
        }
    }

    /// Checks layer compatibility and returns the per-sample output shape of every layer.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        if self.split_index >= self.layers.len() {
            return Err(Error::Config(format!(
                "split index {} out of range for {} layers",
                self.split_index,
                self.layers.len()
            )));
        }
        if !matches!(self.layers[self.split_index], LayerSpec::Conv2d { .. }) {
            return Err(Error::Config(format!(
                "layer {} is not a convolution",
                self.split_index
            )));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape.clone();
        for layer in &self.layers {
            cur = layer.output_shape(&cur)?;
            shapes.push(cur.clone());
        }
        if cur != [self.num_classes] {
            return Err(Error::InvalidShape(format!(
                "network outputs {cur:?}, expected [{}]",
                self.num_classes
            )));
        }
        Ok(shapes)
    }

    /// Index of the last layer in `g_A`.
    pub fn split_point(&self) -> usize {
        let next = self.split_index + 1;
        if self.split_after_activation && matches!(self.layers.get(next), Some(LayerSpec::Relu)) {
            next
        } else {
            self.split_index
        }
    }

    /// Per-sample shape of `h = g_A(x)`, `[channels, height, width]`.
    pub fn split_shape(&self) -> Result<Vec<usize>> {
        Ok(self.layer_shapes()?.swap_remove(self.split_point()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitModel<T: Real = f32> {
    spec: NetworkSpec,
    params: Vec<Option<LayerParams<T>>>,
}

/// Forward activations kept for the backward pass.
struct Trace<T: Real> {
    inputs: Vec<Tensor<T>>,
    pool_argmax: Vec<Option<Vec<usize>>>,
}

impl<T: Real> SplitModel<T> {
    /// All weights and biases zero.
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        spec.layer_shapes()?;
        let params = spec
            .layers
            .iter()
            .map(|l| {
                l.param_shapes().map(|(w, b)| LayerParams {
                    weight: Tensor::zeros(&w),
                    bias: Tensor::zeros(&b),
                })
            })
            .collect();
        Ok(Self { spec, params })
    }

    /// He-uniform weights `U(-√(6/fan_in), √(6/fan_in))`, zero biases.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in model.params.iter_mut().flatten() {
            let fan_in: usize = p.weight.shape()[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            for w in p.weight.data_mut() {
                *w = T::from_f64(rng.random_range(-bound..bound));
            }
        }
        Ok(model)
    }

    /// Builds a model from explicit parameters, one entry per layer.
    pub fn from_params(spec: NetworkSpec, params: Vec<Option<LayerParams<T>>>) -> Result<Self> {
        spec.layer_shapes()?;
        if params.len() != spec.layers.len() {
            return Err(Error::Config(format!(
                "{} parameter groups for {} layers",
                params.len(),
                spec.layers.len()
            )));
        }
        for (i, (layer, p)) in spec.layers.iter().zip(&params).enumerate() {
            match (layer.param_shapes(), p) {
                (None, None) => {}
                (Some((w, b)), Some(p)) => {
                    if p.weight.shape() != w.as_slice() {
                        return Err(Error::ShapeMismatch {
                            name: format!("layer{i}.weight"),
                            expected: w,
                            found: p.weight.shape().to_vec(),
                        });
                    }
                    if p.bias.shape() != b.as_slice() {
                        return Err(Error::ShapeMismatch {
                            name: format!("layer{i}.bias"),
                            expected: b,
                            found: p.bias.shape().to_vec(),
                        });
                    }
                }
                _ => return Err(Error::Config(format!("layer {i}: parameter presence mismatch"))),
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Option<LayerParams<T>>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<LayerParams<T>>] {
        &mut self.params
    }

    /// Copy of the model in another precision.
    pub fn cast<U: Real>(&self) -> SplitModel<U> {
        SplitModel {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| LayerParams {
                        weight: p.weight.cast(),
                        bias: p.bias.cast(),
                    })
                })
                .collect(),
        }
    }

    fn check_batch(&self, x: &Tensor<T>, expected: &[usize], what: &str) -> Result<()> {
        if x.ndim() != expected.len() + 1 || &x.shape()[1..] != expected {
            return Err(Error::InvalidShape(format!(
                "{what} has shape {:?}, expected [B, {}]",
                x.shape(),
                expected
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            )));
        }
        Ok(())
    }

    fn apply(&self, i: usize, x: &Tensor<T>) -> Result<(Tensor<T>, Option<Vec<usize>>)> {
        match self.spec.layers[i] {
            LayerSpec::Conv2d { stride, pad, .. } => {
                let p = self.params[i].as_ref().expect("conv params");
                Ok((ops::conv2d_forward(x, &p.weight, &p.bias, stride, pad)?, None))
            }
            LayerSpec::Relu => Ok((ops::relu(x), None)),
            LayerSpec::MaxPool2d { window, stride } => {
                let pool = ops::maxpool2d(x, window, stride)?;
                Ok((pool.output, Some(pool.argmax)))
            }
            LayerSpec::Flatten => {
                let b = x.batch();
                Ok((x.clone().reshape(&[b, x.item_len()])?, None))
            }
            LayerSpec::Dense { .. } => {
                let p = self.params[i].as_ref().expect("dense params");
                Ok((ops::dense(x, &p.weight, &p.bias)?, None))
            }
        }
    }

    fn run(&self, mut layers: std::ops::Range<usize>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let Some(first) = layers.next() else {
            return Ok(x.clone());
        };
        let mut cur = self.apply(first, x)?.0;
        for i in layers {
            cur = self.apply(i, &cur)?.0;
        }
        Ok(cur)
    }

    /// Logits `z = g(x)` for a batch `x[B, C, H, W]`.
    pub fn forward_full(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_batch(x, &self.spec.input_shape, "input")?;
        self.run(0..self.spec.layers.len(), x)
    }

    /// `h = g_A(x)`, shape `[B, H_channels, H_height, H_width]`.
    pub fn forward_to_split(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_batch(x, &self.spec.input_shape, "input")?;
        self.run(0..self.spec.split_point() + 1, x)
    }

    /// `z = g_B(h)`.
    pub fn forward_from_split(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_batch(h, &self.spec.split_shape()?, "split activation")?;
        self.run(self.spec.split_point() + 1..self.spec.layers.len(), h)
    }

    /// Predicted class per sample; ties go to the lowest index.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let z = self.forward_full(x)?;
        Ok((0..z.batch()).map(|b| argmax(z.item(b))).collect())
    }

    fn trace(&self, x: &Tensor<T>) -> Result<(Trace<T>, Tensor<T>)> {
        self.check_batch(x, &self.spec.input_shape, "input")?;
        let n = self.spec.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pool_argmax = Vec::with_capacity(n);
        let mut cur = x.clone();
        for i in 0..n {
            let (next, am) = self.apply(i, &cur)?;
            inputs.push(std::mem::replace(&mut cur, next));
            pool_argmax.push(am);
        }
        Ok((
            Trace {
                inputs,
                pool_argmax,
            },
            cur,
        ))
    }

    /// Backpropagates `grad_logits`; returns the input gradient (when requested) and,
    /// when requested, one gradient group per layer.
    fn backward(
        &self,
        trace: &Trace<T>,
        grad_logits: Tensor<T>,
        need_params: bool,
        need_input: bool,
    ) -> Result<(Option<Tensor<T>>, Vec<Option<LayerParams<T>>>)> {
        let n = self.spec.layers.len();
        let mut grads: Vec<Option<LayerParams<T>>> = vec![None; n];
        let mut g = grad_logits;
        let mut reached_input = true;
        for i in (0..n).rev() {
            let input = &trace.inputs[i];
            g = match self.spec.layers[i] {
                LayerSpec::Conv2d { stride, pad, .. } => {
                    let p = self.params[i].as_ref().expect("conv params");
                    let want_input = i > 0 || need_input;
                    let r = ops::conv2d_backward_with(input, &p.weight, &g, stride, pad, want_input, need_params)?;
                    if need_params {
                        grads[i] = Some(LayerParams {
                            weight: r.grad_kernel.expect("requested"),
                            bias: r.grad_bias.expect("requested"),
                        });
                    }
                    match r.grad_input {
                        Some(gi) => gi,
                        None => {
                            reached_input = false;
                            break;
                        }
                    }
                }
                LayerSpec::Relu => ops::relu_backward(input, &g)?,
                LayerSpec::MaxPool2d { .. } => ops::maxpool2d_backward(
                    input.shape(),
                    trace.pool_argmax[i].as_deref().expect("pool argmax"),
                    &g,
                )?,
                LayerSpec::Flatten => g.reshape(input.shape())?,
                LayerSpec::Dense { .. } => {
                    let p = self.params[i].as_ref().expect("dense params");
                    let (gi, gw, gb) = ops::dense_backward(input, &p.weight, &g)?;
                    if need_params {
                        grads[i] = Some(LayerParams { weight: gw, bias: gb });
                    }
                    gi
                }
            };
        }
        Ok((reached_input.then_some(g), grads))
    }

    /// Gradient w.r.t. `x` of each sample's own cross-entropy loss (the gradient of
    /// the summed loss). For a single sample this is the usual loss gradient.
    pub fn input_gradient(&self, x: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
        Ok(self.loss_and_input_gradient(x, labels)?.2)
    }

    /// `(logits, per-sample losses, input gradient)` in one forward/backward pass.
    pub fn loss_and_input_gradient(
        &self,
        x: &Tensor<T>,
        labels: &[usize],
    ) -> Result<(Tensor<T>, Vec<T>, Tensor<T>)> {
        let (trace, logits) = self.trace(x)?;
        let (losses, grad_logits) = ops::cross_entropy_per_sample(&logits, labels)?;
        let (gx, _) = self.backward(&trace, grad_logits, false, true)?;
        Ok((logits, losses, gx.expect("input gradient requested")))
    }

    /// Input gradient of an arbitrary function of the logits whose logit gradient
    /// is supplied by `grad_of_logits`.
    pub fn input_gradient_with(
        &self,
        x: &Tensor<T>,
        grad_of_logits: impl FnOnce(&Tensor<T>) -> Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (trace, logits) = self.trace(x)?;
        let gl = grad_of_logits(&logits);
        logits.expect_same_shape(&gl)?;
        let (gx, _) = self.backward(&trace, gl, false, true)?;
        Ok((logits, gx.expect("input gradient requested")))
    }

    /// Mean cross-entropy loss and its parameter gradients.
    pub fn loss_and_param_gradients(
        &self,
        x: &Tensor<T>,
        labels: &[usize],
    ) -> Result<(T, Tensor<T>, Vec<Option<LayerParams<T>>>)> {
        let (trace, logits) = self.trace(x)?;
        let (loss, grad_logits) = ops::softmax_cross_entropy(&logits, labels)?;
        let (_, grads) = self.backward(&trace, grad_logits, true, false)?;
        Ok((loss, logits, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec {
            input_shape: vec![1, 6, 6],
            layers: vec![
                LayerSpec::conv(1, 3, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { window: 2, stride: 2 },
                LayerSpec::conv(3, 4, 3, 1, 0),
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::dense(4, 3),
            ],
            split_index: 0,
            num_classes: 3,
            split_after_activation: false,
        }
    }

    #[test]
    fn fixture_spec_is_valid() {
        let spec = NetworkSpec::mnist37();
        let shapes = spec.layer_shapes().unwrap();
        assert_eq!(shapes[0], vec![16, 28, 28]);
        assert_eq!(spec.split_shape().unwrap(), vec![16, 28, 28]);
        assert_eq!(shapes.last().unwrap(), &vec![2]);
    }

    #[test]
    fn spec_validation() {
        let mut s = tiny_spec();
        s.split_index = 1;
        assert!(matches!(s.layer_shapes(), Err(Error::Config(_))));
        let mut s = tiny_spec();
        s.num_classes = 2;
        assert!(s.layer_shapes().is_err());
        let mut s = tiny_spec();
        s.layers[3] = LayerSpec::conv(5, 4, 3, 1, 0);
        assert!(s.layer_shapes().is_err());
    }

    #[test]
    fn zero_model_outputs_zero() {
        let m = SplitModel::<f32>::zeros(NetworkSpec::mnist37()).unwrap();
        let x = Tensor::from_fn(&[2, 1, 28, 28], |i| (i % 7) as f32 / 7.0);
        assert!(m.forward_full(&x).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(m.forward_to_split(&Tensor::zeros(&[1, 1, 28, 28])).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(m.input_gradient(&x, &[0, 1]).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_h_gives_downstream_bias() {
        let mut m = SplitModel::<f32>::zeros(tiny_spec()).unwrap();
        m.params_mut()[6].as_mut().unwrap().bias = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let z = m.forward_from_split(&Tensor::zeros(&[2, 3, 6, 6])).unwrap();
        assert_eq!(z.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn split_identity_and_manual_replay() {
        let m = SplitModel::<f32>::init(tiny_spec(), 3).unwrap();
        let x = Tensor::from_fn(&[4, 1, 6, 6], |i| ((i * 37) % 11) as f32 / 11.0);
        let h = m.forward_to_split(&x).unwrap();
        let p = m.params()[0].as_ref().unwrap();
        let manual = ops::conv2d_forward(&x, &p.weight, &p.bias, 1, 1).unwrap();
        assert_eq!(h, manual);
        assert_eq!(m.forward_from_split(&h).unwrap(), m.forward_full(&x).unwrap());
    }

    #[test]
    fn split_after_activation_moves_relu() {
        let mut s = tiny_spec();
        s.split_after_activation = true;
        assert_eq!(s.split_point(), 1);
        let m = SplitModel::<f32>::init(s, 1).unwrap();
        let x = Tensor::from_fn(&[2, 1, 6, 6], |i| (i as f32 * 0.37).sin());
        let h = m.forward_to_split(&x).unwrap();
        assert!(h.data().iter().all(|&v| v >= 0.0));
        assert_eq!(m.forward_from_split(&h).unwrap(), m.forward_full(&x).unwrap());
    }

    #[test]
    fn shape_errors() {
        let m = SplitModel::<f32>::zeros(tiny_spec()).unwrap();
        assert!(matches!(m.forward_full(&Tensor::zeros(&[1, 1, 5, 6])), Err(Error::InvalidShape(_))));
        assert!(matches!(m.forward_from_split(&Tensor::zeros(&[1, 2, 6, 6])), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn predict_ties_low() {
        let mut m = SplitModel::<f32>::zeros(tiny_spec()).unwrap();
        let x = Tensor::zeros(&[1, 1, 6, 6]);
        assert_eq!(m.predict(&x).unwrap(), vec![0]);
        m.params_mut()[6].as_mut().unwrap().bias = Tensor::new(vec![3], vec![0.1, 0.9, 0.9]).unwrap();
        assert_eq!(m.predict(&x).unwrap(), vec![1]);
    }

    #[test]
    fn dense_only_input_gradient_closed_form() {
        let spec = NetworkSpec {
            input_shape: vec![1, 2, 2],
            layers: vec![LayerSpec::conv(1, 1, 1, 1, 0), LayerSpec::Flatten, LayerSpec::dense(4, 3)],
            split_index: 0,
            num_classes: 3,
            split_after_activation: false,
        };
        let mut m = SplitModel::<f64>::init(spec, 9).unwrap();
        // identity 1x1 conv so the network is a single dense map
        m.params_mut()[0].as_mut().unwrap().weight = Tensor::full(&[1, 1, 1, 1], 1.0);
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.2, -0.4, 0.9, 0.1]).unwrap();
        let y = 2;
        let g = m.input_gradient(&x, &[y]).unwrap();

        let p = m.params()[2].as_ref().unwrap();
        let w = p.weight.data();
        let z: Vec<f64> = (0..3)
            .map(|o| (0..4).map(|f| w[o * 4 + f] * x.data()[f]).sum::<f64>() + p.bias.data()[o])
            .collect();
        let zmax = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
        let s: f64 = e.iter().sum();
        for f in 0..4 {
            let expect: f64 = (0..3)
                .map(|o| (e[o] / s - if o == y { 1.0 } else { 0.0 }) * w[o * 4 + f])
                .sum();
            assert!((g.data()[f] - expect).abs() < 1e-6);
        }
    }
}
