//! Sweeps the same channel sets under a PGD and an L2-penalty attack and
//! correlates the logit effects set by set.
//!
//! `cargo run --release --example cross_attack -- model.netw [data/mnist] [samples]`

use advint::attacks::AttackConfig;
use advint::cache::build_attack_cache;
use advint::data::{filter_classes, filter_correct, load_idx};
use advint::intervention::{sweep, SweepConfig};
use advint::report::pair_effects;
use advint::stats::pearson_least_squares;
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
    let sweep_cfg = SweepConfig { gammas: vec![1, 3], ..Default::default() };

    let pgd = build_attack_cache(&model, &samples, &AttackConfig::pgd(0.3, 40, 3, 0))?;
    let l2 = build_attack_cache(&model, &samples, &AttackConfig::l2_penalty(10.0, 100, 0.01, 0))?;
    let (tp, tl) = (sweep(&model, &pgd, &sweep_cfg)?, sweep(&model, &l2, &sweep_cfg)?);
    for g in [1, 3] {
        let pairs = pair_effects(&tp, &tl, g)?;
        let x: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.2).collect();
        let r = pearson_least_squares(&x, &y)?;
        println!("gamma {g}: {} sets, R = {:.3}, AEL(l2) = {:.3} * AEL(pgd) + {:.3}", r.n, r.r, r.slope, r.intercept);
    }
    Ok(())
}
