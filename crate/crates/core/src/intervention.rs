//! Adversarial intervention: swap a set Φ of channels of the clean split activation
//! `h` for the adversarial `h′` and evaluate the back half of the model.
//!
//! `h^Φ = h·m + h′·m̄` with `m_i = 0` exactly for `i ∈ Φ`.

use std::fmt;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::AttackCache;
use crate::error::{Error, Result};
use crate::network::SplitModel;
use crate::stats::{l2_distance, EffectRecord, EffectTable};
use crate::tensor::{argmax, Tensor};

/// Strictly ascending channel indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ChannelSet(Vec<usize>);

impl ChannelSet {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::OutOfRange(format!(
                "channel set {indices:?} is not strictly ascending"
            )));
        }
        Ok(Self(indices))
    }

    /// Like [`ChannelSet::new`], also requiring every index `< channels`.
    pub fn within(indices: Vec<usize>, channels: usize) -> Result<Self> {
        let set = Self::new(indices)?;
        set.check_range(channels)?;
        Ok(set)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn all(channels: usize) -> Self {
        Self((0..channels).collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn gamma(&self) -> usize {
        self.0.len()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.0.binary_search(&j).is_ok()
    }

    pub fn complement(&self, channels: usize) -> Self {
        Self((0..channels).filter(|&c| !self.contains(c)).collect())
    }

    pub fn check_range(&self, channels: usize) -> Result<()> {
        match self.0.last() {
            Some(&last) if last >= channels => Err(Error::OutOfRange(format!(
                "channel {last} outside 0..{channels}"
            ))),
            _ => Ok(()),
        }
    }

    /// Parses the `a;b;c` form; the empty string is the empty set.
    pub fn parse(s: &str) -> Result<Self> {
        if s.is_empty() {
            return Ok(Self::empty());
        }
        let idx = s
            .split(';')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::OutOfRange(format!("bad channel `{p}` in `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(idx)
    }
}

impl fmt::Display for ChannelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl TryFrom<Vec<usize>> for ChannelSet {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ChannelSet> for Vec<usize> {
    fn from(s: ChannelSet) -> Self {
        s.0
    }
}

/// Per-channel keep mask `m` and its complement `m̄ = 1 − m`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    pub m: Vec<f32>,
    pub m_bar: Vec<f32>,
}

impl MaskPair {
    pub fn new(phi: &ChannelSet, channels: usize) -> Result<Self> {
        phi.check_range(channels)?;
        let m: Vec<f32> = (0..channels)
            .map(|c| if phi.contains(c) { 0.0 } else { 1.0 })
            .collect();
        let m_bar = m.iter().map(|v| 1.0 - v).collect();
        Ok(Self { m, m_bar })
    }
}

/// Binomial coefficient, `None` on `u128` overflow.
pub fn binomial(n: usize, k: usize) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        // r·(n−i) is divisible by (i+1) after the multiplication
        r = r.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(r)
}

fn check_gamma(channels: usize, gamma: usize) -> Result<()> {
    if gamma > channels {
        return Err(Error::OutOfRange(format!(
            "gamma {gamma} exceeds {channels} channels"
        )));
    }
    Ok(())
}

/// Lexicographic stream of all `gamma`-subsets of `0..channels`.
#[derive(Debug, Clone)]
pub struct Combinations {
    n: usize,
    cur: Vec<usize>,
    done: bool,
}

impl Iterator for Combinations {
    type Item = ChannelSet;

    fn next(&mut self) -> Option<ChannelSet> {
        if self.done {
            return None;
        }
        let out = ChannelSet(self.cur.clone());
        let k = self.cur.len();
        // advance the rightmost index that still has room
        match (0..k).rev().find(|&i| self.cur[i] < self.n - k + i) {
            Some(i) => {
                self.cur[i] += 1;
                for t in i + 1..k {
                    self.cur[t] = self.cur[t - 1] + 1;
                }
            }
            None => self.done = true,
        }
        Some(out)
    }
}

pub fn enumerate_combinations(channels: usize, gamma: usize) -> Result<Combinations> {
    check_gamma(channels, gamma)?;
    Ok(Combinations {
        n: channels,
        cur: (0..gamma).collect(),
        done: false,
    })
}

/// Lexicographic stream of the `gamma`-subsets that contain `j`.
pub fn combinations_including(
    channels: usize,
    gamma: usize,
    j: usize,
) -> Result<impl Iterator<Item = ChannelSet>> {
    if j >= channels {
        return Err(Error::OutOfRange(format!("channel {j} outside 0..{channels}")));
    }
    if gamma == 0 {
        return Err(Error::OutOfRange("gamma must be at least 1".into()));
    }
    check_gamma(channels, gamma)?;
    Ok(enumerate_combinations(channels - 1, gamma - 1)?.map(move |rest| {
        let mut v: Vec<usize> = rest.0.into_iter().map(|c| if c >= j { c + 1 } else { c }).collect();
        let pos = v.partition_point(|&c| c < j);
        v.insert(pos, j);
        ChannelSet(v)
    }))
}

/// The `rank`-th `gamma`-subset of `0..channels` in lexicographic order.
pub fn unrank_combination(channels: usize, gamma: usize, mut rank: u128) -> Result<ChannelSet> {
    check_gamma(channels, gamma)?;
    let total = binomial(channels, gamma).ok_or_else(|| Error::OutOfRange("count overflows".into()))?;
    if rank >= total {
        return Err(Error::OutOfRange(format!("rank {rank} of {total} combinations")));
    }
    let mut out = Vec::with_capacity(gamma);
    let mut c = 0;
    for slot in 0..gamma {
        loop {
            // subsets whose next element is c
            let with_c = binomial(channels - c - 1, gamma - slot - 1).expect("smaller than total");
            if rank < with_c {
                out.push(c);
                c += 1;
                break;
            }
            rank -= with_c;
            c += 1;
        }
    }
    Ok(ChannelSet(out))
}

/// `k` distinct `gamma`-subsets drawn uniformly without replacement, in
/// lexicographic order.
pub fn sample_combinations(channels: usize, gamma: usize, k: usize, seed: u64) -> Result<Vec<ChannelSet>> {
    check_gamma(channels, gamma)?;
    let total = binomial(channels, gamma)
        .and_then(|t| usize::try_from(t).ok())
        .ok_or_else(|| Error::OutOfRange(format!("C({channels}, {gamma}) does not fit in usize")))?;
    if k > total {
        return Err(Error::OutOfRange(format!(
            "cannot draw {k} of {total} combinations"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ranks = index::sample(&mut rng, total, k).into_vec();
    ranks.sort_unstable();
    ranks
        .into_iter()
        .map(|r| unrank_combination(channels, gamma, r as u128))
        .collect()
}

fn check_pair(h: &Tensor, h_adv: &Tensor) -> Result<usize> {
    h.expect_same_shape(h_adv)?;
    if h.ndim() != 4 {
        return Err(Error::InvalidShape(format!(
            "split activation must be [B, C, H, W], got {:?}",
            h.shape()
        )));
    }
    Ok(h.shape()[1])
}

/// `h^Φ` by copying the channels in Φ from `h_adv`.
pub fn swap_channels(h: &Tensor, h_adv: &Tensor, phi: &ChannelSet) -> Result<Tensor> {
    let channels = check_pair(h, h_adv)?;
    phi.check_range(channels)?;
    let plane = h.item_len() / channels;
    let mut out = h.clone();
    for b in 0..h.batch() {
        let src = h_adv.item(b);
        let dst = out.item_mut(b);
        for &c in phi.indices() {
            dst[c * plane..(c + 1) * plane].copy_from_slice(&src[c * plane..(c + 1) * plane]);
        }
    }
    Ok(out)
}

/// `h^Φ = h·m + h′·m̄` evaluated elementwise. Equals [`swap_channels`] bit for bit on
/// finite inputs free of negative zeros.
pub fn swap_channels_masked(h: &Tensor, h_adv: &Tensor, phi: &ChannelSet) -> Result<Tensor> {
    let channels = check_pair(h, h_adv)?;
    let mask = MaskPair::new(phi, channels)?;
    let plane = h.item_len() / channels;
    let mut out = Tensor::zeros(h.shape());
    for b in 0..h.batch() {
        let (hb, ab) = (h.item(b), h_adv.item(b));
        let ob = out.item_mut(b);
        for (i, o) in ob.iter_mut().enumerate() {
            let c = i / plane;
            *o = hb[i] * mask.m[c] + ab[i] * mask.m_bar[c];
        }
    }
    Ok(out)
}

/// Outcome of one intervention on one cached sample.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionRecord {
    pub row: usize,
    pub z: Vec<f32>,
    pub z_phi: Vec<f32>,
    pub y: usize,
    pub y_hat_phi: usize,
}

/// Samples evaluated per forward pass.
const EVAL_BATCH: usize = 64;

/// Gathers `h^Φ` for cache rows `rows`.
fn blended_batch(cache: &AttackCache, rows: &[usize], phi: &ChannelSet) -> Result<Tensor> {
    let mut shape = cache.h.shape().to_vec();
    shape[0] = rows.len();
    let channels = shape[1];
    let plane = cache.h.item_len() / channels;
    let mut data = Vec::with_capacity(cache.h.item_len() * rows.len());
    for &r in rows {
        let (h, a) = (cache.h.item(r), cache.h_adv.item(r));
        let mut from = 0;
        for &c in phi.indices() {
            data.extend_from_slice(&h[from * plane..c * plane]);
            data.extend_from_slice(&a[c * plane..(c + 1) * plane]);
            from = c + 1;
        }
        data.extend_from_slice(&h[from * plane..]);
    }
    Tensor::new(shape, data)
}

/// `z^Φ = g_B(h^Φ)` for the given cache rows.
pub fn run_intervention(
    model: &SplitModel,
    cache: &AttackCache,
    phi: &ChannelSet,
    rows: &[usize],
) -> Result<Vec<InterventionRecord>> {
    cache.check_model(model)?;
    phi.check_range(cache.h.shape()[1])?;
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(EVAL_BATCH) {
        let z_phi = model.forward_from_split(&blended_batch(cache, chunk, phi)?)?;
        for (i, &r) in chunk.iter().enumerate() {
            let zp = z_phi.item(i);
            out.push(InterventionRecord {
                row: r,
                z: cache.z.item(r).to_vec(),
                z_phi: zp.to_vec(),
                y: cache.labels[r],
                y_hat_phi: argmax(zp),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub gammas: Vec<usize>,
    /// Above this many combinations a γ level is sampled instead of enumerated.
    pub sample_cap: usize,
    pub sample_seed: u64,
    pub include_failed_attacks: bool,
    /// Use only the first `max_samples` admitted cache rows.
    pub max_samples: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            gammas: (1..=16).collect(),
            sample_cap: 2_000_000,
            sample_seed: 0,
            include_failed_attacks: false,
            max_samples: None,
        }
    }
}

impl SweepConfig {
    /// Cache rows entering the sweep.
    pub fn rows(&self, cache: &AttackCache) -> Vec<usize> {
        let mut rows = cache.admitted(self.include_failed_attacks);
        if let Some(n) = self.max_samples {
            rows.truncate(n);
        }
        rows
    }

    /// Channel sets for level γ and whether they are a sample.
    pub fn sets(&self, channels: usize, gamma: usize) -> Result<(Vec<ChannelSet>, bool)> {
        check_gamma(channels, gamma)?;
        let total = binomial(channels, gamma).unwrap_or(u128::MAX);
        if total > self.sample_cap as u128 {
            let seed = self.sample_seed ^ (gamma as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            Ok((sample_combinations(channels, gamma, self.sample_cap, seed)?, true))
        } else {
            Ok((enumerate_combinations(channels, gamma)?.collect(), false))
        }
    }
}

/// `AEL_Φ` and `AEA_Φ` over `rows` for one Φ.
fn effect(model: &SplitModel, cache: &AttackCache, rows: &[usize], phi: &ChannelSet) -> Result<(f64, f64)> {
    let (mut dist, mut flips) = (0.0f64, 0usize);
    for chunk in rows.chunks(EVAL_BATCH) {
        let z_phi = model.forward_from_split(&blended_batch(cache, chunk, phi)?)?;
        for (i, &r) in chunk.iter().enumerate() {
            dist += l2_distance(cache.z.item(r), z_phi.item(i));
            flips += usize::from(argmax(z_phi.item(i)) != cache.labels[r]);
        }
    }
    let n = rows.len() as f64;
    Ok((dist / n, flips as f64 / n))
}

/// Evaluates every configured Φ; records come out sorted by (γ, Φ) regardless of
/// scheduling.
pub fn sweep(model: &SplitModel, cache: &AttackCache, config: &SweepConfig) -> Result<EffectTable> {
    cache.check_model(model)?;
    let channels = cache.h.shape()[1];
    let rows = config.rows(cache);
    if rows.is_empty() {
        return Err(Error::EmptyInput("no admitted cache rows"));
    }
    let mut gammas = config.gammas.clone();
    gammas.sort_unstable();
    gammas.dedup();
    let mut tasks = Vec::new();
    let mut sampled = Vec::new();
    for &g in &gammas {
        let (sets, is_sampled) = config.sets(channels, g)?;
        sampled.push((g, is_sampled));
        tasks.extend(sets.into_iter().map(|s| (g, s)));
    }
    let records = tasks
        .into_par_iter()
        .map(|(gamma, phi)| {
            let (ael, aea) = effect(model, cache, &rows, &phi)?;
            Ok(EffectRecord {
                gamma,
                phi,
                n_samples: rows.len(),
                ael,
                aea,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EffectTable::new(channels, records, sampled)
}
