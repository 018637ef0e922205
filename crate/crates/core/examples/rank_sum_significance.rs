//! Wilcoxon rank-sum tests between channels using the sets that contain one
//! channel but not the other.
//!
//! `cargo run --release --example rank_sum_significance`

use advint::intervention::{enumerate_combinations, ChannelSet};
use advint::stats::{exclusive_sets, p_matrix, wilcoxon_rank_sum, EffectRecord, EffectTable, WrstMode};

fn main() -> advint::Result<()> {
    let r = wilcoxon_rank_sum(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], WrstMode::Auto)?;
    println!("{{1,2,3}} vs {{4,5,6}}: W = {}, p = {} (exact: {})", r.statistic, r.p, r.exact);

    let a: Vec<f64> = (0..20).map(|i| i as f64 * 0.9).collect();
    let b: Vec<f64> = (0..20).map(|i| i as f64 * 1.1 + 3.0).collect();
    let normal = wilcoxon_rank_sum(&a, &b, WrstMode::Normal)?;
    println!("n = m = 20, normal approximation: p = {:.6}", normal.p);

    // A toy table over 7 channels where each channel contributes its index to AEL.
    let channels = 7;
    let records = (1..=channels)
        .flat_map(|g| enumerate_combinations(channels, g).unwrap())
        .map(|phi: ChannelSet| EffectRecord {
            gamma: phi.gamma(),
            ael: phi.indices().iter().map(|&j| j as f64 + 1.0).sum::<f64>(),
            aea: 0.0,
            n_samples: 1,
            phi,
        })
        .collect();
    let table = EffectTable::new(channels, records, (1..=channels).map(|g| (g, false)).collect())?;

    let (with_0, with_6) = exclusive_sets(&table, 0, 6, 3)?;
    println!("gamma 3, channel 0 vs 6: {} and {} exclusive sets", with_0.len(), with_6.len());
    let pm = p_matrix(&table, 3, WrstMode::Auto)?;
    println!("clipped p-values at gamma 3:");
    for row in &pm.clipped {
        let cells: Vec<String> = row.iter().map(|p| p.map_or("   -  ".into(), |p| format!("{p:.4}"))).collect();
        println!("  {}", cells.join("  "));
    }
    Ok(())
}
