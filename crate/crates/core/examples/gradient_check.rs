//! Compares the analytic input gradient of a small network against central
//! finite differences in 64-bit precision.
//!
//! `cargo run --release --example gradient_check`

use advint::{LayerSpec, NetworkSpec, SplitModel, Tensor};

fn main() -> advint::Result<()> {
    let spec = NetworkSpec {
        input_shape: vec![2, 6, 6],
        layers: vec![
            LayerSpec::conv(2, 3, 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { window: 2, stride: 2 },
            LayerSpec::conv(3, 4, 2, 1, 0),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::dense(4 * 2 * 2, 3),
        ],
        split_index: 0,
        num_classes: 3,
        split_after_activation: false,
    };
    let model: SplitModel<f64> = SplitModel::<f32>::init(spec, 3)?.cast();
    let x = Tensor::from_fn(&[1, 2, 6, 6], |i| ((i * 37 % 101) as f64) / 101.0);
    let labels = [1];
    let grad = model.input_gradient(&x, &labels)?;

    let loss = |x: &Tensor<f64>| -> advint::Result<f64> { Ok(model.loss_and_input_gradient(x, &labels)?.1[0]) };
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let (mut up, mut down) = (x.clone(), x.clone());
        up.data_mut()[i] += h;
        down.data_mut()[i] -= h;
        let numeric = (loss(&up)? - loss(&down)?) / (2.0 * h);
        let analytic = grad.data()[i];
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    println!("checked {} input coordinates, worst relative error {worst:.2e}", x.len());
    Ok(())
}
