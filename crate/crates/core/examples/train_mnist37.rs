//! Trains the MNIST 3-vs-7 network and saves its weights.
//!
//! `cargo run --release --example train_mnist37 -- [data/mnist] [model.netw]`

use std::time::Instant;

use advint::data::{accuracy, filter_classes, load_idx};
use advint::train::{train_sgd_logged, TrainConfig};
use advint::weights::{model_hash, save_weights};
use advint::NetworkSpec;

fn main() -> advint::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "data/mnist".into());
    let out = args.next().unwrap_or_else(|| "model.netw".into());
    let split = |kind: &str| {
        load_idx(
            format!("{dir}/{kind}-images-idx3-ubyte.gz"),
            format!("{dir}/{kind}-labels-idx1-ubyte.gz"),
        )
        .and_then(|d| filter_classes(&d, &[3, 7]))
    };
    let (train, test) = (split("train")?, split("t10k")?);
    println!("train {} / test {} samples", train.len(), test.len());

    let start = Instant::now();
    let model = train_sgd_logged(NetworkSpec::mnist37(), &train, &TrainConfig::default(), |e| {
        println!(
            "epoch {}: loss {:.4}, train accuracy {:.4} ({:.0}s)",
            e.epoch,
            e.loss,
            e.train_accuracy,
            start.elapsed().as_secs_f64()
        )
    })?;
    println!("test accuracy {:.4}", accuracy(&model, &test)?);
    save_weights(&model, &out)?;
    println!("saved {out} ({})", model_hash(&model));
    Ok(())
}
