//! End-to-end on synthetic data: train a tiny network, attack it, swap channels.
//!
//! `cargo run --release --example quickstart`

use advint::attacks::AttackConfig;
use advint::cache::build_attack_cache;
use advint::data::{accuracy, filter_correct, synth_generate};
use advint::intervention::{run_intervention, sweep, ChannelSet, SweepConfig};
use advint::stats::{ael_phi, marginals};
use advint::train::{train_sgd, TrainConfig};
use advint::{LayerSpec, NetworkSpec};

fn main() -> advint::Result<()> {
    // Three classes: bright left half, bright right half, bright centre.
    let center = |f: fn(usize, usize) -> bool| -> Vec<f32> {
        (0..64).map(|i| if f(i / 8, i % 8) { 0.8 } else { 0.2 }).collect()
    };
    let centers = vec![
        center(|_, c| c < 4),
        center(|_, c| c >= 4),
        center(|r, c| (2..6).contains(&r) && (2..6).contains(&c)),
    ];
    let data = synth_generate(7, 200, &[1, 8, 8], &centers, 0.25)?;

    let spec = NetworkSpec {
        input_shape: vec![1, 8, 8],
        layers: vec![
            LayerSpec::conv(1, 6, 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::conv(6, 8, 2, 2, 0),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::dense(8 * 4 * 4, 3),
        ],
        split_index: 0,
        num_classes: 3,
        split_after_activation: false,
    };
    let config = TrainConfig { epochs: 5, lr: 0.02, ..TrainConfig::default() };
    let model = train_sgd(spec, &data, &config)?;
    println!("clean accuracy {:.3}", accuracy(&model, &data)?);

    let correct = filter_correct(&model, &data)?.take(100);
    let cache = build_attack_cache(&model, &correct, &AttackConfig::pgd(0.4, 20, 1, 7))?;
    println!("pgd success rate {:.3} on {} samples", cache.success_rate(), cache.len());

    // Swapping no channel keeps the clean logits; swapping all yields the adversarial ones.
    let rows: Vec<usize> = (0..cache.len()).collect();
    let channels = cache.h.shape()[1];
    for (name, phi) in [("none", ChannelSet::empty()), ("all", ChannelSet::all(channels))] {
        let recs = run_intervention(&model, &cache, &phi, &rows)?;
        let ael = ael_phi(recs.iter().map(|r| (r.z.as_slice(), r.z_phi.as_slice())))?;
        println!("swap {name:>4}: AEL {ael:.4}");
    }

    let table = sweep(&model, &cache, &SweepConfig { gammas: (1..=channels).collect(), ..Default::default() })?;
    for g in 1..channels {
        let ranks: Vec<usize> = marginals(&table, g)?.iter().map(|m| m.rank).collect();
        println!("gamma {g}: channel ranks {ranks:?}");
    }
    Ok(())
}
