//! Sweeps channel swaps over every gamma level for a PGD cache and prints the
//! effect distribution and channel ranking per level.
//!
//! `cargo run --release --example channel_sweep -- model.netw [data/mnist] [samples] [cap]`

use advint::attacks::AttackConfig;
use advint::cache::build_attack_cache;
use advint::data::{filter_classes, filter_correct, load_idx};
use advint::intervention::{sweep, SweepConfig};
use advint::stats::{marginals, spearman};
use advint::weights::load_weights;

fn main() -> advint::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let model = load_weights(args.first().map_or("model.netw", String::as_str))?;
    let dir = args.get(1).map_or("data/mnist", String::as_str);
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(100);
    let cap: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(300);
    let test = filter_classes(
        &load_idx(format!("{dir}/t10k-images-idx3-ubyte.gz"), format!("{dir}/t10k-labels-idx1-ubyte.gz"))?,
        &[3, 7],
    )?;
    let samples = filter_correct(&model, &test)?.take(n);
    let cache = build_attack_cache(&model, &samples, &AttackConfig::pgd(0.3, 40, 3, 0))?;

    let table = sweep(&model, &cache, &SweepConfig { sample_cap: cap, ..Default::default() })?;
    let first: Vec<usize> = marginals(&table, 1)?.iter().map(|m| m.rank).collect();
    println!("gamma  sets  sampled  mean AEA  median AEA  max AEA  rho vs gamma 1");
    for g in table.gammas() {
        let mut aea: Vec<f64> = table.level(g).iter().map(|r| r.aea).collect();
        aea.sort_by(f64::total_cmp);
        let mean = aea.iter().sum::<f64>() / aea.len() as f64;
        let ranks: Vec<usize> = marginals(&table, g)?.iter().map(|m| m.rank).collect();
        println!(
            "{g:>5} {:>5} {:>8} {mean:>9.4} {:>11.4} {:>8.4} {:>15.3}",
            aea.len(),
            table.is_sampled(g),
            aea[aea.len() / 2],
            aea[aea.len() - 1],
            spearman(&first, &ranks)?
        );
    }
    Ok(())
}
