//! Runs every attack on the same correctly classified MNIST 3-vs-7 samples and
//! compares success rate and perturbation size.
//!
//! `cargo run --release --example attack_comparison -- model.netw [data/mnist] [samples]`

use std::time::Instant;

use advint::attacks::AttackConfig;
use advint::cache::build_attack_cache;
use advint::data::{filter_classes, filter_correct, load_idx};
use advint::weights::load_weights;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn main() -> advint::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let model = load_weights(args.first().map_or("model.netw", String::as_str))?;
    let dir = args.get(1).map_or("data/mnist", String::as_str);
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(50);
    let test = filter_classes(
        &load_idx(format!("{dir}/t10k-images-idx3-ubyte.gz"), format!("{dir}/t10k-labels-idx1-ubyte.gz"))?,
        &[3, 7],
    )?;
    let samples = filter_correct(&model, &test)?.take(n);

    println!("{:<18} {:>8} {:>10} {:>10} {:>8}", "attack", "success", "median l2", "max linf", "seconds");
    for cfg in [
        AttackConfig::fgsm(0.3),
        AttackConfig::pgd(0.3, 40, 3, 0),
        AttackConfig::l2_penalty(10.0, 100, 0.01, 0),
        AttackConfig::decision_boundary(1000, 0),
    ] {
        let start = Instant::now();
        let cache = build_attack_cache(&model, &samples, &cfg)?;
        let l2 = cache.perturbation_norms();
        let linf = cache
            .x
            .data()
            .iter()
            .zip(cache.x_adv.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        println!(
            "{:<18} {:>8.3} {:>10.3} {:>10.3} {:>8.1}",
            cfg.kind.to_string(),
            cache.success_rate(),
            median(l2),
            linf,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
