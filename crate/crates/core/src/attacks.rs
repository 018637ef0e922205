//! Adversarial example generation.
//!
//! Four attack families:
//!
//! * [`fgsm`]: one signed-gradient step of size ε.
//! * [`pgd_linf`]: multi-restart projected gradient ascent on the cross-entropy
//!   inside the ℓ∞ ball, halving the step after five non-improving steps. The best
//!   post-step iterate by loss over all restarts is returned.
//! * [`l2_penalty_attack`]: gradient descent on `c·max(z_y − max_{k≠y} z_k, −κ) + ‖η‖²`,
//!   keeping the successful iterate of smallest ‖η‖₂.
//! * [`decision_boundary_attack`]: label-only. Bisects from a misclassified anchor to
//!   the decision boundary, estimates a descent direction from Monte-Carlo sign
//!   queries, steps and re-bisects.
//!
//! All functions work on a batch `x[B, C, H, W]`. Per-sample randomness comes from
//! `(config.seed, sample id)`, so results do not depend on batch composition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::SplitModel;
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    PgdLinf,
    L2Penalty,
    DecisionBoundary,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::PgdLinf => "pgd_linf",
            AttackKind::L2Penalty => "l2_penalty",
            AttackKind::DecisionBoundary => "decision_boundary",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd_linf" => Ok(AttackKind::PgdLinf),
            "l2_penalty" => Ok(AttackKind::L2Penalty),
            "decision_boundary" => Ok(AttackKind::DecisionBoundary),
            other => Err(Error::Config(format!("unknown attack kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// ℓ∞ budget (fgsm, pgd_linf).
    pub epsilon: f32,
    /// Iterations (pgd_linf, l2_penalty).
    pub steps: usize,
    /// PGD step, or the learning rate of the penalty attack.
    pub step_size: f32,
    pub restarts: usize,
    pub random_start: bool,
    /// Weight `c` of the margin term (l2_penalty).
    pub penalty: f32,
    /// Margin confidence κ (l2_penalty).
    pub kappa: f32,
    /// Label queries per sample (decision_boundary).
    pub query_budget: usize,
    /// Bisection stops once the bracket is shorter than this in ℓ2 (decision_boundary).
    pub boundary_tol: f32,
    /// Random probes per direction estimate (decision_boundary).
    pub directions: usize,
    /// Uniform-noise draws tried when no anchor candidate is adversarial.
    pub anchor_tries: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::pgd(0.3, 40, 3, 0)
    }
}

impl AttackConfig {
    pub fn fgsm(epsilon: f32) -> Self {
        Self {
            kind: AttackKind::Fgsm,
            epsilon,
            steps: 1,
            step_size: epsilon,
            restarts: 1,
            random_start: false,
            penalty: 0.0,
            kappa: 0.0,
            query_budget: 0,
            boundary_tol: 0.0,
            directions: 0,
            anchor_tries: 0,
            seed: 0,
        }
    }

    /// PGD with step `ε/4` and random starts.
    pub fn pgd(epsilon: f32, steps: usize, restarts: usize, seed: u64) -> Self {
        Self {
            kind: AttackKind::PgdLinf,
            steps,
            step_size: epsilon / 4.0,
            restarts,
            random_start: true,
            seed,
            ..Self::fgsm(epsilon)
        }
    }

    pub fn l2_penalty(penalty: f32, steps: usize, step_size: f32, seed: u64) -> Self {
        Self {
            kind: AttackKind::L2Penalty,
            epsilon: 0.0,
            steps,
            step_size,
            penalty,
            seed,
            ..Self::fgsm(0.0)
        }
    }

    pub fn decision_boundary(query_budget: usize, seed: u64) -> Self {
        Self {
            kind: AttackKind::DecisionBoundary,
            epsilon: 0.0,
            query_budget,
            boundary_tol: 1e-3,
            directions: 50,
            anchor_tries: 100,
            seed,
            ..Self::fgsm(0.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("{}: {m}", self.kind)));
        match self.kind {
            AttackKind::Fgsm if self.epsilon < 0.0 => bad("epsilon must be non-negative"),
            AttackKind::PgdLinf if self.epsilon < 0.0 => bad("epsilon must be non-negative"),
            AttackKind::PgdLinf if self.steps == 0 || self.restarts == 0 => {
                bad("steps and restarts must be at least 1")
            }
            AttackKind::L2Penalty if self.steps == 0 => bad("steps must be at least 1"),
            AttackKind::DecisionBoundary if self.boundary_tol <= 0.0 => {
                bad("boundary_tol must be positive")
            }
            _ => Ok(()),
        }
    }
}

/// Attack output for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub x_adv: Tensor,
    /// `x_adv − x`.
    pub eta: Tensor,
    /// `predict(x_adv) ≠ predict(x)` per sample.
    pub success: Vec<bool>,
    /// Gradient iterations or label queries used per sample.
    pub work: Vec<usize>,
}

/// Label-only access to a model.
pub trait Classifier: Sync {
    /// Per-sample input shape.
    fn input_shape(&self) -> &[usize];
    fn classify(&self, x: &Tensor) -> Result<Vec<usize>>;
}

impl Classifier for SplitModel {
    fn input_shape(&self) -> &[usize] {
        &self.spec().input_shape
    }

    fn classify(&self, x: &Tensor) -> Result<Vec<usize>> {
        self.predict(x)
    }
}

/// Stream seed for one sample; mixes with SplitMix64 so neighbouring ids decorrelate.
pub fn sample_seed(seed: u64, sample_id: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(sample_id.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn finish(model: &dyn Classifier, x: &Tensor, x_adv: Tensor, work: Vec<usize>) -> Result<AttackResult> {
    let clean = model.classify(x)?;
    let adv = model.classify(&x_adv)?;
    let eta = x_adv.zip_map(x, |a, b| a - b)?;
    Ok(AttackResult {
        success: clean.iter().zip(&adv).map(|(a, b)| a != b).collect(),
        x_adv,
        eta,
        work,
    })
}

fn check_labels(x: &Tensor, y: &[usize], ids: Option<&[u64]>) -> Result<()> {
    if x.batch() != y.len() || ids.is_some_and(|ids| ids.len() != y.len()) {
        return Err(Error::InvalidShape(format!(
            "batch of {} with {} labels",
            x.batch(),
            y.len()
        )));
    }
    Ok(())
}

/// `x_adv = clip(x + ε·sign(∇ₓ loss), 0, 1)`.
pub fn fgsm(model: &SplitModel, x: &Tensor, y: &[usize], epsilon: f32) -> Result<AttackResult> {
    check_labels(x, y, None)?;
    let grad = model.input_gradient(x, y)?;
    let x_adv = x.zip_map(&grad, |v, g| (v + epsilon * sign(g)).clamp(0.0, 1.0))?;
    finish(model, x, x_adv, vec![1; y.len()])
}

/// Projects `cand` onto `[x − ε, x + ε] ∩ [0, 1]` elementwise.
fn project_linf(cand: &mut [f32], x: &[f32], epsilon: f32) {
    for (c, &v) in cand.iter_mut().zip(x) {
        *c = c.clamp(v - epsilon, v + epsilon).clamp(0.0, 1.0);
    }
}

pub fn pgd_linf(
    model: &SplitModel,
    x: &Tensor,
    y: &[usize],
    config: &AttackConfig,
    sample_ids: &[u64],
) -> Result<AttackResult> {
    check_labels(x, y, Some(sample_ids))?;
    config.validate()?;
    let (b, eps) = (y.len(), config.epsilon);
    let mut best = x.clone();
    let mut best_loss = vec![f32::NEG_INFINITY; b];

    for restart in 0..config.restarts {
        let mut cur = x.clone();
        if config.random_start {
            for (i, &id) in sample_ids.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, id, restart as u64));
                let xi = x.item(i);
                let ci = cur.item_mut(i);
                for (c, &v) in ci.iter_mut().zip(xi) {
                    *c = (v + rng.random_range(-1.0f32..=1.0) * eps).clamp(0.0, 1.0);
                }
            }
        }
        let mut step = vec![config.step_size; b];
        let mut restart_best = vec![f32::NEG_INFINITY; b];
        let mut stale = vec![0usize; b];
        for s in 0..=config.steps {
            let (_, losses, grad) = model.loss_and_input_gradient(&cur, y)?;
            if s > 0 {
                for i in 0..b {
                    let l = losses[i];
                    if l > best_loss[i] {
                        best_loss[i] = l;
                        best.item_mut(i).copy_from_slice(cur.item(i));
                    }
                    if l > restart_best[i] {
                        restart_best[i] = l;
                        stale[i] = 0;
                    } else {
                        stale[i] += 1;
                        if stale[i] >= 5 {
                            step[i] *= 0.5;
                            stale[i] = 0;
                        }
                    }
                }
            }
            if s == config.steps {
                break;
            }
            for i in 0..b {
                let g = grad.item(i).to_vec();
                let ci = cur.item_mut(i);
                for (c, gv) in ci.iter_mut().zip(g) {
                    *c += step[i] * sign(gv);
                }
                project_linf(ci, x.item(i), eps);
            }
        }
    }
    finish(model, x, best, vec![config.steps * config.restarts; b])
}

/// Gradient of `max(z_y − max_{k≠y} z_k, −κ)` w.r.t. the logits, per sample.
fn margin_grad(z: &Tensor, y: &[usize], kappa: f32) -> Tensor {
    let mut g = Tensor::zeros(z.shape());
    for (i, &yi) in y.iter().enumerate() {
        let zi = z.item(i);
        let other = (0..zi.len())
            .filter(|&k| k != yi)
            .max_by(|&a, &c| zi[a].total_cmp(&zi[c]).then(c.cmp(&a)))
            .expect("at least two classes");
        if zi[yi] - zi[other] > -kappa {
            let gi = g.item_mut(i);
            gi[yi] = 1.0;
            gi[other] = -1.0;
        }
    }
    g
}

pub fn l2_penalty_attack(
    model: &SplitModel,
    x: &Tensor,
    y: &[usize],
    config: &AttackConfig,
) -> Result<AttackResult> {
    check_labels(x, y, None)?;
    config.validate()?;
    let b = y.len();
    let mut cur = x.clone();
    let mut best: Vec<Option<(f64, Vec<f32>)>> = vec![None; b];
    let mut iters = vec![config.steps; b];
    let mut done = vec![false; b];

    for s in 0..=config.steps {
        let (z, gx) = model.input_gradient_with(&cur, |z| margin_grad(z, y, config.kappa))?;
        for i in 0..b {
            if done[i] {
                continue;
            }
            if argmax(z.item(i)) != y[i] {
                if s == 0 {
                    // misclassified before any perturbation
                    best[i] = Some((0.0, x.item(i).to_vec()));
                    iters[i] = 0;
                    done[i] = true;
                    continue;
                }
                let norm = l2_dist(cur.item(i), x.item(i));
                if best[i].as_ref().is_none_or(|(n, _)| norm < *n) {
                    best[i] = Some((norm, cur.item(i).to_vec()));
                }
            }
        }
        if s == config.steps {
            break;
        }
        for i in 0..b {
            if done[i] {
                continue;
            }
            let (xi, gi) = (x.item(i).to_vec(), gx.item(i).to_vec());
            let ci = cur.item_mut(i);
            for ((c, &v), g) in ci.iter_mut().zip(&xi).zip(gi) {
                let eta = *c - v;
                let grad = config.penalty * g + 2.0 * eta;
                *c = (v + eta - config.step_size * grad).clamp(0.0, 1.0);
            }
        }
    }
    let mut out = cur;
    for (i, bst) in best.into_iter().enumerate() {
        if let Some((_, v)) = bst {
            out.item_mut(i).copy_from_slice(&v);
        }
    }
    finish(model, x, out, iters)
}

fn l2_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&p, &q)| {
            let d = (p - q) as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Counts label queries against the per-sample budget.
struct Oracle<'a> {
    model: &'a dyn Classifier,
    shape: Vec<usize>,
    label: usize,
    queries: usize,
}

impl Oracle<'_> {
    /// Whether each candidate is classified away from the true label.
    fn adversarial(&mut self, candidates: &[Vec<f32>]) -> Result<Vec<bool>> {
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        let refs: Vec<&[f32]> = candidates.iter().map(|c| c.as_slice()).collect();
        let batch = Tensor::stack(&refs, &self.shape)?;
        self.queries += candidates.len();
        Ok(self
            .model
            .classify(&batch)?
            .into_iter()
            .map(|p| p != self.label)
            .collect())
    }

    fn is_adversarial(&mut self, c: &[f32]) -> Result<bool> {
        Ok(self.adversarial(&[c.to_vec()])?[0])
    }
}

fn lerp(x: &[f32], a: &[f32], t: f32) -> Vec<f32> {
    x.iter().zip(a).map(|(&p, &q)| p + t * (q - p)).collect()
}

/// Bisects the segment `x → adv` (with `adv` adversarial) down to `tol` in ℓ2 and
/// returns the adversarial end of the final bracket.
fn bisect(oracle: &mut Oracle<'_>, x: &[f32], adv: &[f32], tol: f32, budget: usize) -> Result<Vec<f32>> {
    let dist = l2_dist(x, adv) as f32;
    let (mut lo, mut hi) = (0.0f32, 1.0f32);
    while (hi - lo) * dist > tol && oracle.queries < budget {
        let mid = 0.5 * (lo + hi);
        if oracle.is_adversarial(&lerp(x, adv, mid))? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(lerp(x, adv, hi))
}

/// Decision-based attack using only `classify` calls.
///
/// `anchors` are candidate starting points (typically samples of other classes);
/// the closest adversarial one is used, else uniform noise is tried.
pub fn decision_boundary_attack(
    model: &dyn Classifier,
    x: &Tensor,
    y: &[usize],
    config: &AttackConfig,
    sample_ids: &[u64],
    anchors: &[&[f32]],
) -> Result<AttackResult> {
    check_labels(x, y, Some(sample_ids))?;
    config.validate()?;
    let mut x_adv = x.clone();
    let mut work = Vec::with_capacity(y.len());
    for (i, (&label, &id)) in y.iter().zip(sample_ids).enumerate() {
        let (adv, queries) = decision_single(model, x.item(i), label, config, id, anchors)?;
        x_adv.item_mut(i).copy_from_slice(&adv);
        work.push(queries);
    }
    finish(model, x, x_adv, work)
}

fn decision_single(
    model: &dyn Classifier,
    x: &[f32],
    label: usize,
    config: &AttackConfig,
    sample_id: u64,
    anchors: &[&[f32]],
) -> Result<(Vec<f32>, usize)> {
    let mut oracle = Oracle {
        model,
        shape: model.input_shape().to_vec(),
        label,
        queries: 0,
    };
    let budget = config.query_budget;
    if oracle.is_adversarial(x)? {
        return Ok((x.to_vec(), oracle.queries));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, sample_id, 0));

    let mut anchor: Option<Vec<f32>> = None;
    let mut best_dist = f64::INFINITY;
    for chunk in anchors.chunks(64) {
        let cands: Vec<Vec<f32>> = chunk.iter().map(|a| a.to_vec()).collect();
        for (c, adv) in cands.iter().zip(oracle.adversarial(&cands)?) {
            let d = l2_dist(c, x);
            if adv && d < best_dist {
                best_dist = d;
                anchor = Some(c.clone());
            }
        }
    }
    let mut tries = 0;
    while anchor.is_none() && tries < config.anchor_tries {
        let noise: Vec<f32> = (0..x.len()).map(|_| rng.random_range(0.0f32..=1.0)).collect();
        if oracle.is_adversarial(&noise)? {
            anchor = Some(noise);
        }
        tries += 1;
    }
    let anchor = anchor.ok_or(Error::AnchorSearchFailed {
        tries: anchors.len() + tries,
    })?;
    let budget = budget.max(oracle.queries + 1);

    let mut best = bisect(&mut oracle, x, &anchor, config.boundary_tol, budget)?;
    let mut dist = l2_dist(&best, x);
    let mut iteration = 1usize;
    while oracle.queries < budget && dist > config.boundary_tol as f64 {
        let remaining = budget - oracle.queries;
        let n_dirs = config.directions.min(remaining).max(1);
        let delta = (dist * 0.05).max(1e-4) as f32;
        let dirs: Vec<Vec<f32>> = (0..n_dirs)
            .map(|_| {
                let mut u: Vec<f32> = (0..x.len()).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
                let n = u.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
                u.iter_mut().for_each(|v| *v /= n);
                u
            })
            .collect();
        let probes: Vec<Vec<f32>> = dirs
            .iter()
            .map(|u| best.iter().zip(u).map(|(&b, &d)| (b + delta * d).clamp(0.0, 1.0)).collect())
            .collect();
        let signs: Vec<f32> = oracle
            .adversarial(&probes)?
            .into_iter()
            .map(|a| if a { 1.0 } else { -1.0 })
            .collect();
        let mean = signs.iter().sum::<f32>() / signs.len() as f32;
        let centered = mean.abs() < 1.0;
        let mut v = vec![0.0f32; x.len()];
        for (u, s) in dirs.iter().zip(&signs) {
            let w = if centered { s - mean } else { *s };
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi += w * ui;
            }
        }
        let vn = v.iter().map(|a| a * a).sum::<f32>().sqrt();
        if vn == 0.0 {
            iteration += 1;
            continue;
        }
        v.iter_mut().for_each(|a| *a /= vn);

        // geometric search along the estimated direction
        let mut xi = (dist / (iteration as f64).sqrt()) as f32;
        let mut candidate = None;
        for _ in 0..12 {
            if oracle.queries >= budget {
                break;
            }
            let c: Vec<f32> = best.iter().zip(&v).map(|(&b, &d)| (b + xi * d).clamp(0.0, 1.0)).collect();
            if oracle.is_adversarial(&c)? {
                candidate = Some(c);
                break;
            }
            xi *= 0.5;
        }
        if let Some(c) = candidate {
            let refined = bisect(&mut oracle, x, &c, config.boundary_tol, budget)?;
            let d = l2_dist(&refined, x);
            if d < dist {
                best = refined;
                dist = d;
            }
        }
        iteration += 1;
    }
    Ok((best, oracle.queries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerSpec, NetworkSpec};

    /// `z = W·x` on a 4-pixel input through an identity 1×1 conv.
    fn linear_model(w: [[f32; 4]; 2]) -> SplitModel {
        let spec = NetworkSpec {
            input_shape: vec![1, 2, 2],
            layers: vec![LayerSpec::conv(1, 1, 1, 1, 0), LayerSpec::Flatten, LayerSpec::dense(4, 2)],
            split_index: 0,
            num_classes: 2,
            split_after_activation: false,
        };
        let mut m = SplitModel::zeros(spec).unwrap();
        m.params_mut()[0].as_mut().unwrap().weight = Tensor::full(&[1, 1, 1, 1], 1.0);
        m.params_mut()[2].as_mut().unwrap().weight =
            Tensor::new(vec![2, 4], w.iter().flatten().copied().collect()).unwrap();
        m
    }

    fn ce_loss(m: &SplitModel, x: &Tensor, y: usize) -> f32 {
        let z = m.forward_full(x).unwrap();
        crate::ops::cross_entropy_per_sample(&z, &[y]).unwrap().0[0]
    }

    /// Best loss over the corners of the feasible box around `x`.
    fn corner_optimum(m: &SplitModel, x: &[f32], y: usize, eps: f32) -> f32 {
        (0..16u32)
            .map(|mask| {
                let c: Vec<f32> = x
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| if mask >> i & 1 == 1 { (v + eps).min(1.0) } else { (v - eps).max(0.0) })
                    .collect();
                ce_loss(m, &Tensor::new(vec![1, 1, 2, 2], c).unwrap(), y)
            })
            .fold(f32::MIN, f32::max)
    }

    const W: [[f32; 4]; 2] = [[1.0, -2.0, 0.5, 0.3], [-0.5, 1.0, -1.5, 0.2]];

    #[test]
    fn fgsm_zero_epsilon_is_identity() {
        let m = linear_model(W);
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.9, 0.1, 0.8, 0.5]).unwrap();
        let y = m.predict(&x).unwrap();
        let r = fgsm(&m, &x, &y, 0.0).unwrap();
        assert_eq!(r.x_adv, x);
        assert_eq!(r.success, vec![false]);
    }

    #[test]
    fn fgsm_is_optimal_for_linear_models() {
        let m = linear_model(W);
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.9, 0.1, 0.8, 0.05]).unwrap();
        let eps = 0.2;
        let r = fgsm(&m, &x, &[0], eps).unwrap();
        let opt = corner_optimum(&m, x.data(), 0, eps);
        assert!((ce_loss(&m, &r.x_adv, 0) - opt).abs() < 1e-6);
    }

    #[test]
    fn pgd_single_step_reduces_to_fgsm() {
        let m = linear_model(W);
        let x = Tensor::new(vec![2, 1, 2, 2], vec![0.9, 0.1, 0.8, 0.05, 0.2, 0.6, 0.3, 0.9]).unwrap();
        let y = [0, 1];
        let cfg = AttackConfig {
            steps: 1,
            restarts: 1,
            random_start: false,
            step_size: 0.25,
            ..AttackConfig::pgd(0.25, 1, 1, 0)
        };
        let p = pgd_linf(&m, &x, &y, &cfg, &[0, 1]).unwrap();
        let f = fgsm(&m, &x, &y, 0.25).unwrap();
        assert_eq!(p.x_adv, f.x_adv);
    }

    #[test]
    fn pgd_reaches_linear_optimum_within_budget() {
        let m = linear_model(W);
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.5, 0.4, 0.6, 0.3]).unwrap();
        let eps = 0.15;
        let r = pgd_linf(&m, &x, &[0], &AttackConfig::pgd(eps, 20, 2, 3), &[7]).unwrap();
        assert!(r.eta.max_abs() <= eps + 1e-6);
        assert!(r.x_adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let opt = corner_optimum(&m, x.data(), 0, eps);
        assert!((ce_loss(&m, &r.x_adv, 0) - opt).abs() < 1e-6);
    }

    #[test]
    fn l2_already_misclassified_is_free() {
        let m = linear_model(W);
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.9, 0.1, 0.8, 0.05]).unwrap();
        let wrong = 1 - m.predict(&x).unwrap()[0];
        let r = l2_penalty_attack(&m, &x, &[wrong], &AttackConfig::l2_penalty(5.0, 50, 0.01, 0)).unwrap();
        assert!(r.eta.data().iter().all(|&v| v == 0.0));
        // the model still predicts the clean class, which differs from the label
        assert_eq!(m.predict(&r.x_adv).unwrap()[0], 1 - wrong);
    }

    #[test]
    fn l2_zero_penalty_never_moves() {
        let m = linear_model(W);
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.9, 0.1, 0.8, 0.05]).unwrap();
        let y = m.predict(&x).unwrap();
        let r = l2_penalty_attack(&m, &x, &y, &AttackConfig::l2_penalty(0.0, 30, 0.05, 0)).unwrap();
        assert!(r.eta.data().iter().all(|&v| v == 0.0));
        assert_eq!(r.success, vec![false]);
    }

    #[test]
    fn l2_matches_hyperplane_distance() {
        let m = linear_model(W);
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.6, 0.4, 0.55, 0.45]).unwrap();
        let y = m.predict(&x).unwrap();
        assert_eq!(y, vec![0]);
        // boundary: (w0 − w1)·x = 0, far enough from the box faces to be reached inside it
        let d: Vec<f32> = (0..4).map(|i| W[0][i] - W[1][i]).collect();
        let margin: f32 = d.iter().zip(x.data()).map(|(a, b)| a * b).sum();
        let exact = margin / d.iter().map(|v| v * v).sum::<f32>().sqrt();
        let r = l2_penalty_attack(&m, &x, &y, &AttackConfig::l2_penalty(10.0, 400, 0.002, 0)).unwrap();
        assert_eq!(r.success, vec![true]);
        let got = r.eta.l2_norm() as f32;
        assert!((got - exact).abs() <= 0.1 * exact, "got {got}, exact {exact}");
    }

    struct Threshold;

    impl Classifier for Threshold {
        fn input_shape(&self) -> &[usize] {
            &[1, 1, 1]
        }
        fn classify(&self, x: &Tensor) -> Result<Vec<usize>> {
            Ok(x.data().iter().map(|&v| usize::from(v > 0.5)).collect())
        }
    }

    #[test]
    fn decision_bisection_on_threshold() {
        let x = Tensor::new(vec![1, 1, 1, 1], vec![0.2]).unwrap();
        let anchor = [0.9f32];
        let cfg = AttackConfig {
            boundary_tol: 1e-4,
            ..AttackConfig::decision_boundary(200, 1)
        };
        let r = decision_boundary_attack(&Threshold, &x, &[0], &cfg, &[0], &[&anchor]).unwrap();
        let v = r.x_adv.data()[0];
        assert!(v > 0.5 && (v - 0.5).abs() <= 1e-4, "{v}");
        assert_eq!(r.success, vec![true]);
    }

    #[test]
    fn decision_returns_misclassified_input() {
        let x = Tensor::new(vec![1, 1, 1, 1], vec![0.7]).unwrap();
        let r = decision_boundary_attack(&Threshold, &x, &[0], &AttackConfig::decision_boundary(10, 0), &[0], &[])
            .unwrap();
        assert_eq!(r.x_adv, x);
        assert!(r.eta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decision_without_anchor_fails() {
        struct Constant;
        impl Classifier for Constant {
            fn input_shape(&self) -> &[usize] {
                &[1, 1, 1]
            }
            fn classify(&self, x: &Tensor) -> Result<Vec<usize>> {
                Ok(vec![0; x.batch()])
            }
        }
        let x = Tensor::new(vec![1, 1, 1, 1], vec![0.2]).unwrap();
        let cfg = AttackConfig {
            anchor_tries: 5,
            ..AttackConfig::decision_boundary(100, 0)
        };
        assert!(matches!(
            decision_boundary_attack(&Constant, &x, &[0], &cfg, &[0], &[]),
            Err(Error::AnchorSearchFailed { .. })
        ));
    }
}
