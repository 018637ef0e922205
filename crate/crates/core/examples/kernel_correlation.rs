//! Correlates per-kernel weight statistics of the target layer with how
//! vulnerable each channel ranks under channel swaps.
//!
//! Rank 1 is the most vulnerable channel, so a negative `r` means larger values of
//! the descriptor go with more vulnerable channels.
//!
//! `cargo run --release --example kernel_correlation -- model.netw [data/mnist] [samples]`

use advint::attacks::AttackConfig;
use advint::cache::build_attack_cache;
use advint::data::{filter_classes, filter_correct, load_idx};
use advint::intervention::{sweep, SweepConfig};
use advint::stats::{kernel_descriptors, marginals, pearson_least_squares};
use advint::weights::load_weights;

fn main() -> advint::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let model = load_weights(args.first().map_or("model.netw", String::as_str))?;
    let dir = args.get(1).map_or("data/mnist", String::as_str);
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(100);
    let test = filter_classes(
        &load_idx(format!("{dir}/t10k-images-idx3-ubyte.gz"), format!("{dir}/t10k-labels-idx1-ubyte.gz"))?,
        &[3, 7],
    )?;
    let samples = filter_correct(&model, &test)?.take(n);
    let cache = build_attack_cache(&model, &samples, &AttackConfig::pgd(0.3, 40, 3, 0))?;
    let channels = cache.h.shape()[1];
    let gammas: Vec<usize> = (1..=4).collect();
    let table = sweep(&model, &cache, &SweepConfig { gammas: gammas.clone(), ..Default::default() })?;

    let mut mean_rank = vec![0.0; channels];
    for &g in &gammas {
        for m in marginals(&table, g)? {
            mean_rank[m.channel] += m.rank as f64 / gammas.len() as f64;
        }
    }
    let kernels = kernel_descriptors(&model, model.spec().split_index)?;
    println!("channel  l2 norm    std   mean rank");
    for k in &kernels {
        println!("{:>7} {:>8.4} {:>6.4} {:>11.2}", k.channel, k.l2_norm, k.std, mean_rank[k.channel]);
    }
    for (name, x) in [
        ("l2_norm", kernels.iter().map(|k| k.l2_norm).collect::<Vec<_>>()),
        ("std", kernels.iter().map(|k| k.std).collect()),
        ("max_abs", kernels.iter().map(|k| k.max_abs).collect()),
    ] {
        let r = pearson_least_squares(&x, &mean_rank)?;
        println!("{name:>8}: r = {:+.3}, rank = {:.2} * x + {:.2}", r.r, r.slope, r.intercept);
    }
    Ok(())
}
