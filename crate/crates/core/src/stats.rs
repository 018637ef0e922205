//! Intervention metrics and their statistical analysis.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::intervention::{binomial, ChannelSet};
use crate::network::{LayerSpec, SplitModel};

/// `AEL_Φ` and `AEA_Φ` of one channel set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRecord {
    pub gamma: usize,
    pub phi: ChannelSet,
    pub n_samples: usize,
    pub ael: f64,
    pub aea: f64,
}

/// Effect records sorted by (γ, Φ), with a flag per γ telling whether Φ was sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectTable {
    pub channels: usize,
    pub records: Vec<EffectRecord>,
    pub sampled: Vec<(usize, bool)>,
}

impl EffectTable {
    pub fn new(channels: usize, mut records: Vec<EffectRecord>, mut sampled: Vec<(usize, bool)>) -> Result<Self> {
        for r in &records {
            if r.phi.gamma() != r.gamma {
                return Err(Error::OutOfRange(format!("set {} filed under gamma {}", r.phi, r.gamma)));
            }
            r.phi.check_range(channels)?;
        }
        records.sort_by(|a, b| (a.gamma, &a.phi).cmp(&(b.gamma, &b.phi)));
        if records.windows(2).any(|w| w[0].gamma == w[1].gamma && w[0].phi == w[1].phi) {
            return Err(Error::OutOfRange("duplicate channel set in effect table".into()));
        }
        sampled.sort_unstable();
        sampled.dedup();
        Ok(Self {
            channels,
            records,
            sampled,
        })
    }

    /// Levels present in the table, ascending.
    pub fn gammas(&self) -> Vec<usize> {
        let mut g: Vec<usize> = self.records.iter().map(|r| r.gamma).collect();
        g.dedup();
        g
    }

    pub fn level(&self, gamma: usize) -> &[EffectRecord] {
        let start = self.records.partition_point(|r| r.gamma < gamma);
        let end = self.records.partition_point(|r| r.gamma <= gamma);
        &self.records[start..end]
    }

    pub fn is_sampled(&self, gamma: usize) -> bool {
        self.sampled.iter().any(|&(g, s)| g == gamma && s)
    }
}

pub fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&p, &q)| {
            let d = p as f64 - q as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Mean `‖z − z^Φ‖₂` over samples.
pub fn ael_phi<'a>(pairs: impl IntoIterator<Item = (&'a [f32], &'a [f32])>) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (z, zp) in pairs {
        sum += l2_distance(z, zp);
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyInput("ael needs at least one sample"));
    }
    Ok(sum / n as f64)
}

/// Fraction of `(y, ŷ^Φ)` pairs that disagree.
pub fn aea_phi(pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<f64> {
    let (mut flips, mut n) = (0usize, 0usize);
    for (y, yp) in pairs {
        flips += usize::from(y != yp);
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyInput("aea needs at least one sample"));
    }
    Ok(flips as f64 / n as f64)
}

/// Unweighted means of `AEL_Φ` and `AEA_Φ` over the level-γ sets containing `j`.
pub fn channel_marginal(table: &EffectTable, j: usize, gamma: usize) -> Result<(f64, f64)> {
    let (mut ael, mut aea, mut n) = (0.0, 0.0, 0usize);
    for r in table.level(gamma).iter().filter(|r| r.phi.contains(j)) {
        ael += r.ael;
        aea += r.aea;
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoCoveringRecords { channel: j, gamma });
    }
    Ok((ael / n as f64, aea / n as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMarginal {
    pub gamma: usize,
    pub channel: usize,
    pub ael: f64,
    pub aea: f64,
    /// 1 = largest `ael`.
    pub rank: usize,
    pub sampled: bool,
}

/// Ranks from values: 1 for the largest, ties broken by the lower index.
pub fn rank_channels(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; values.len()];
    for (pos, &c) in order.iter().enumerate() {
        ranks[c] = pos + 1;
    }
    ranks
}

/// Marginals of every channel at level γ, ranked by `ael`.
pub fn marginals(table: &EffectTable, gamma: usize) -> Result<Vec<ChannelMarginal>> {
    let pairs = (0..table.channels)
        .map(|j| channel_marginal(table, j, gamma))
        .collect::<Result<Vec<_>>>()?;
    let ael: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ranks = rank_channels(&ael);
    let sampled = table.is_sampled(gamma);
    Ok(pairs
        .into_iter()
        .enumerate()
        .map(|(j, (ael, aea))| ChannelMarginal {
            gamma,
            channel: j,
            ael,
            aea,
            rank: ranks[j],
            sampled,
        })
        .collect())
}

/// `AEL_Φ` values of the level-γ sets holding `j` but not `k`, and vice versa.
pub fn exclusive_sets(table: &EffectTable, j: usize, k: usize, gamma: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if j == k {
        return Err(Error::OutOfRange(format!("exclusive sets need two channels, got {j} twice")));
    }
    let level = table.level(gamma);
    let only = |a: usize, b: usize| -> Vec<f64> {
        level
            .iter()
            .filter(|r| r.phi.contains(a) && !r.phi.contains(b))
            .map(|r| r.ael)
            .collect()
    };
    Ok((only(j, k), only(k, j)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WrstMode {
    Exact,
    Normal,
    /// Exact when the pooled sample has at most 16 values and no ties.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WrstResult {
    /// Rank sum of the first sample.
    pub statistic: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub exact: bool,
    /// Exact mode was requested but ties forced the normal approximation.
    pub fallback: bool,
}

pub const EXACT_LIMIT: usize = 16;

/// Midranks (1-based) of the pooled sample and the tie-group sizes.
fn midranks(pooled: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut e = i + 1;
        while e < order.len() && pooled[order[e]] == pooled[order[i]] {
            e += 1;
        }
        let r = (i + 1 + e) as f64 / 2.0;
        for &o in &order[i..e] {
            ranks[o] = r;
        }
        if e - i > 1 {
            ties.push(e - i);
        }
        i = e;
    }
    (ranks, ties)
}

/// Number of `n`-subsets of `1..=total` by rank sum.
fn rank_sum_counts(n: usize, total: usize) -> Vec<f64> {
    let max_sum = total * (total + 1) / 2;
    // f[k][s]: subsets of size k with sum s over the ranks seen so far
    let mut f = vec![vec![0.0f64; max_sum + 1]; n + 1];
    f[0][0] = 1.0;
    for r in 1..=total {
        for k in (1..=n.min(r)).rev() {
            for s in (r..=max_sum).rev() {
                f[k][s] += f[k - 1][s - r];
            }
        }
    }
    f.swap_remove(n)
}

/// Two-sided Wilcoxon rank-sum (Mann-Whitney) test of `a` against `b`.
pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64], mode: WrstMode) -> Result<WrstResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("rank-sum test needs two non-empty samples"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::DegenerateInput("rank-sum test input contains NaN"));
    }
    let (n, m) = (a.len(), b.len());
    let total = n + m;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let w: f64 = ranks[..n].iter().sum();
    let want_exact = match mode {
        WrstMode::Exact => true,
        WrstMode::Normal => false,
        WrstMode::Auto => total <= EXACT_LIMIT,
    };
    if want_exact && ties.is_empty() {
        let counts = rank_sum_counts(n, total);
        let all: f64 = counts.iter().sum();
        // without ties w is an integer
        let w_int = w.round() as usize;
        let lower: f64 = counts[..=w_int].iter().sum();
        let upper: f64 = counts[w_int..].iter().sum();
        let p = (2.0 * lower.min(upper) / all).min(1.0);
        return Ok(WrstResult {
            statistic: w,
            p,
            exact: true,
            fallback: false,
        });
    }
    let (nf, mf, tf) = (n as f64, m as f64, total as f64);
    let mean = nf * (tf + 1.0) / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum();
    let var = nf * mf / 12.0 * ((tf + 1.0) - tie_term / (tf * (tf - 1.0)));
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
        erfc(z / std::f64::consts::SQRT_2).min(1.0)
    };
    Ok(WrstResult {
        statistic: w,
        p,
        exact: false,
        fallback: want_exact,
    })
}

pub const P_CLIP: f64 = 0.10;

/// Pairwise two-sided p-values between exclusive sets. The diagonal, and pairs whose
/// exclusive sets are empty in a sampled table, are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PMatrix {
    pub gamma: usize,
    pub raw: Vec<Vec<Option<f64>>>,
    pub clipped: Vec<Vec<Option<f64>>>,
    pub sampled: bool,
    /// Pairs tested with the normal approximation although exact was wanted.
    pub fallbacks: usize,
}

pub fn p_matrix(table: &EffectTable, gamma: usize, mode: WrstMode) -> Result<PMatrix> {
    let h = table.channels;
    let mut raw = vec![vec![None; h]; h];
    let mut fallbacks = 0;
    for j in 0..h {
        for k in j + 1..h {
            let (a, b) = exclusive_sets(table, j, k, gamma)?;
            if a.is_empty() || b.is_empty() {
                continue;
            }
            let r = wilcoxon_rank_sum(&a, &b, mode)?;
            fallbacks += usize::from(r.fallback);
            raw[j][k] = Some(r.p);
            raw[k][j] = Some(r.p);
        }
    }
    let clipped = raw
        .iter()
        .map(|row| row.iter().map(|p| p.map(|v| v.min(P_CLIP))).collect())
        .collect();
    Ok(PMatrix {
        gamma,
        raw,
        clipped,
        sampled: table.is_sampled(gamma),
        fallbacks,
    })
}

/// Weight statistics of one output channel's kernel (bias excluded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelDescriptor {
    pub channel: usize,
    pub l2_norm: f64,
    /// Population standard deviation.
    pub std: f64,
    pub mean: f64,
    pub max_abs: f64,
}

pub fn kernel_descriptors(model: &SplitModel, layer: usize) -> Result<Vec<KernelDescriptor>> {
    match model.spec().layers.get(layer) {
        Some(LayerSpec::Conv2d { .. }) => {}
        _ => return Err(Error::NotConv { layer }),
    }
    let w = &model.params()[layer].as_ref().expect("conv params").weight;
    Ok((0..w.batch())
        .map(|c| {
            let v = w.item(c);
            let n = v.len() as f64;
            let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
            let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
            KernelDescriptor {
                channel: c,
                l2_norm: v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt(),
                std: var.sqrt(),
                mean,
                max_abs: v.iter().fold(0.0f64, |m, &x| m.max((x as f64).abs())),
            }
        })
        .collect())
}

/// Pearson correlation with the least-squares line `y ≈ slope·x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub r: f64,
    pub slope: f64,
    pub intercept: f64,
    pub n: usize,
}

pub fn pearson_least_squares(x: &[f64], y: &[f64]) -> Result<Regression> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(format!("{} x values, {} y values", x.len(), y.len())));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::DegenerateInput("regression needs at least two points"));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::DegenerateInput("regression input has zero variance"));
    }
    let slope = sxy / sxx;
    Ok(Regression {
        r: (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0),
        slope,
        intercept: my - slope * mx,
        n,
    })
}

/// Spearman ρ between two rankings (Pearson R of the ranks).
pub fn spearman(rank_a: &[usize], rank_b: &[usize]) -> Result<f64> {
    if rank_a.len() != rank_b.len() {
        return Err(Error::LengthMismatch(format!(
            "rankings of {} and {} channels",
            rank_a.len(),
            rank_b.len()
        )));
    }
    for ranks in [rank_a, rank_b] {
        let mut sorted = ranks.to_vec();
        sorted.sort_unstable();
        if sorted.iter().enumerate().any(|(i, &r)| r != i + 1) {
            return Err(Error::OutOfRange(format!("{ranks:?} is not a ranking")));
        }
    }
    let fa: Vec<f64> = rank_a.iter().map(|&r| r as f64).collect();
    let fb: Vec<f64> = rank_b.iter().map(|&r| r as f64).collect();
    Ok(pearson_least_squares(&fa, &fb)?.r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` uniform edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Uniform bins over `[min, max]`; every bin is half-open except the last, which is
/// closed. A constant input uses the range `[v, v + 1]`.
pub fn histogram(values: &[f64], bins: usize) -> Result<Histogram> {
    if values.is_empty() {
        return Err(Error::EmptyInput("histogram needs values"));
    }
    if bins == 0 {
        return Err(Error::OutOfRange("histogram needs at least one bin".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::DegenerateInput("histogram input is not finite"));
    }
    if hi == lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 })
        .collect();
    let mut counts = vec![0; bins];
    for &v in values {
        // edges[i] <= v < edges[i+1]; exact edge comparison guards against rounding
        let mut b = (((v - lo) / width) as usize).min(bins - 1);
        while b > 0 && v < edges[b] {
            b -= 1;
        }
        while b + 1 < bins && v >= edges[b + 1] {
            b += 1;
        }
        counts[b] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Number of level-γ sets that contain a given channel under full enumeration.
pub fn sets_per_channel(channels: usize, gamma: usize) -> u128 {
    if gamma == 0 || channels == 0 {
        return 0;
    }
    binomial(channels - 1, gamma - 1).unwrap_or(u128::MAX)
}
