//! Pipeline stages and the report bundle.
//!
//! Every stage reads its inputs from and writes its outputs to the run directory:
//!
//! | stage     | writes |
//! |-----------|--------|
//! | train     | `model.netw`, `train_log.jsonl` |
//! | attack    | `cache_<kind>.aich` |
//! | intervene | `effects_<kind>.csv`, `effects_<kind>.jsonl` |
//! | analyze   | `effects.csv`, `marginals.csv`, `rankings.csv`, `pvalues_raw.csv`, `pvalues_clipped.csv`, `kernel_stats.csv`, `kernel_regression.csv`, `top_bottom.csv`, `cross_attack.csv`, `cross_attack_r.csv`, `histograms.json` |
//! | report    | `plot_data.json`, `manifest.json` |
//!
//! Outputs contain no timestamps or timings, and all files are written atomically.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::AttackKind;
use crate::cache::{build_attack_cache, load_cache, save_cache};
use crate::config::RunConfig;
use crate::data::{accuracy, filter_classes, filter_correct, load_idx, Dataset};
use crate::error::{Error, Result};
use crate::intervention::{binomial, sweep, ChannelSet};
use crate::io::{read_file, write_atomic};
use crate::network::SplitModel;
use crate::stats::{
    histogram, kernel_descriptors, marginals, p_matrix, pearson_least_squares, spearman, EffectRecord, EffectTable,
};
use crate::train::{train_sgd_logged, EpochLog};
use crate::weights::{load_weights, model_hash, save_weights};

pub const MODEL_FILE: &str = "model.netw";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PLOT_DATA_FILE: &str = "plot_data.json";

/// Files `analyze` must have produced before `report` accepts the bundle.
pub const ANALYSIS_FILES: [&str; 11] = [
    "effects.csv",
    "marginals.csv",
    "rankings.csv",
    "pvalues_raw.csv",
    "pvalues_clipped.csv",
    "kernel_stats.csv",
    "kernel_regression.csv",
    "top_bottom.csv",
    "cross_attack.csv",
    "cross_attack_r.csv",
    "histograms.json",
];

pub fn cache_file(kind: AttackKind) -> String {
    format!("cache_{kind}.aich")
}

pub fn effects_file(kind: AttackKind) -> String {
    format!("effects_{kind}.csv")
}

fn effects_jsonl_file(kind: AttackKind) -> String {
    format!("effects_{kind}.jsonl")
}

/// Runs `f` on a pool with `cfg.workers` threads (0 = runtime default).
fn with_pool<T: Send>(cfg: &RunConfig, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(f)
}

fn load_split(cfg: &RunConfig, images: &Path, labels: &Path) -> Result<Dataset> {
    let ds = load_idx(cfg.resolve(images), cfg.resolve(labels))?;
    filter_classes(&ds, &cfg.data.classes)
}

/// Loads the run's weights and checks they match the configured architecture.
pub fn load_model(cfg: &RunConfig) -> Result<SplitModel> {
    let model = load_weights(cfg.out_path(MODEL_FILE))?;
    if model.spec() != &cfg.model.spec()? {
        return Err(Error::Config(
            "weights were trained for a different model configuration".into(),
        ));
    }
    Ok(model)
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub model_hash: String,
    pub train_samples: usize,
    pub test_samples: usize,
    pub test_accuracy: f64,
    pub epochs: Vec<EpochLog>,
}

#[derive(Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum TrainEvent<'a> {
    Epoch(&'a EpochLog),
    Evaluation { test_samples: usize, test_accuracy: f64 },
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    with_pool(cfg, || {
        let spec = cfg.model.spec()?;
        let train = load_split(cfg, &cfg.data.train_images, &cfg.data.train_labels)?;
        let test = load_split(cfg, &cfg.data.test_images, &cfg.data.test_labels)?;
        let mut epochs = Vec::new();
        let model = train_sgd_logged(spec, &train, &cfg.train, |log| {
            eprintln!(
                "epoch {}: loss {:.4}, train accuracy {:.4}",
                log.epoch, log.loss, log.train_accuracy
            );
            epochs.push(log.clone());
        })?;
        let test_accuracy = accuracy(&model, &test)?;
        eprintln!("test accuracy {test_accuracy:.4} on {} samples", test.len());
        save_weights(&model, cfg.out_path(MODEL_FILE))?;

        let mut log = String::new();
        for e in &epochs {
            log.push_str(&serde_json::to_string(&TrainEvent::Epoch(e))?);
            log.push('\n');
        }
        log.push_str(&serde_json::to_string(&TrainEvent::Evaluation {
            test_samples: test.len(),
            test_accuracy,
        })?);
        log.push('\n');
        write_atomic(&cfg.out_path(TRAIN_LOG_FILE), log.as_bytes())?;
        Ok(TrainOutcome {
            model_hash: model_hash(&model),
            train_samples: train.len(),
            test_samples: test.len(),
            test_accuracy,
            epochs,
        })
    })
}

// ---------------------------------------------------------------- attack

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub kind: AttackKind,
    pub samples: usize,
    pub success_rate: f64,
    pub failures: usize,
}

fn selected(cfg: &RunConfig, kinds: &[AttackKind]) -> Result<Vec<AttackKind>> {
    if kinds.is_empty() {
        return Ok(cfg.attacks.iter().map(|a| a.kind).collect());
    }
    for &k in kinds {
        cfg.attack(k)?;
    }
    Ok(kinds.to_vec())
}

/// Attacks the correctly classified test samples; `kinds` empty means every
/// configured attack.
pub fn cmd_attack(cfg: &RunConfig, kinds: &[AttackKind]) -> Result<Vec<AttackOutcome>> {
    with_pool(cfg, || {
        let model = load_model(cfg)?;
        let test = load_split(cfg, &cfg.data.test_images, &cfg.data.test_labels)?;
        let mut correct = filter_correct(&model, &test)?;
        if let Some(n) = cfg.data.max_attack_samples {
            correct = correct.take(n);
        }
        let mut out = Vec::new();
        for kind in selected(cfg, kinds)? {
            let cache = build_attack_cache(&model, &correct, cfg.attack(kind)?)?;
            for f in &cache.failures {
                eprintln!("{kind}: sample {} failed: {}", f.index, f.error);
            }
            eprintln!(
                "{kind}: success rate {:.4} on {} samples",
                cache.success_rate(),
                cache.len()
            );
            save_cache(&cache, cfg.out_path(&cache_file(kind)))?;
            out.push(AttackOutcome {
                kind,
                samples: cache.len(),
                success_rate: cache.success_rate(),
                failures: cache.failures.len(),
            });
        }
        Ok(out)
    })
}

// ---------------------------------------------------------------- intervene

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EffectRow {
    gamma: usize,
    phi: String,
    n_samples: usize,
    ael: f64,
    aea: f64,
}

const EFFECT_HEADER: [&str; 5] = ["gamma", "phi", "n_samples", "ael", "aea"];

impl From<&EffectRecord> for EffectRow {
    fn from(r: &EffectRecord) -> Self {
        Self {
            gamma: r.gamma,
            phi: r.phi.to_string(),
            n_samples: r.n_samples,
            ael: r.ael,
            aea: r.aea,
        }
    }
}

fn csv_bytes<S: Serialize>(header: &[&str], rows: &[S]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))
}

fn write_csv<S: Serialize>(path: &Path, header: &[&str], rows: &[S]) -> Result<()> {
    write_atomic(path, &csv_bytes(header, rows)?)
}

fn read_csv<D: DeserializeOwned>(path: &Path) -> Result<Vec<D>> {
    let bytes = read_file(path)?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn write_effects(path: &Path, table: &EffectTable) -> Result<()> {
    let rows: Vec<EffectRow> = table.records.iter().map(EffectRow::from).collect();
    write_csv(path, &EFFECT_HEADER, &rows)
}

/// Reads an effects CSV; a level counts as sampled when it holds fewer than
/// `C(channels, γ)` sets.
pub fn read_effects(path: &Path, channels: usize) -> Result<EffectTable> {
    let rows: Vec<EffectRow> = read_csv(path)?;
    let records = rows
        .into_iter()
        .map(|r| {
            Ok(EffectRecord {
                gamma: r.gamma,
                phi: ChannelSet::parse(&r.phi)?,
                n_samples: r.n_samples,
                ael: r.ael,
                aea: r.aea,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut counts: BTreeMap<usize, u128> = BTreeMap::new();
    for r in &records {
        *counts.entry(r.gamma).or_default() += 1;
    }
    let sampled = counts
        .into_iter()
        .map(|(g, n)| (g, binomial(channels, g).is_none_or(|c| n < c)))
        .collect();
    EffectTable::new(channels, records, sampled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterveneOutcome {
    pub kind: AttackKind,
    pub rows: usize,
    pub samples: usize,
    pub sampled_gammas: Vec<usize>,
}

pub fn cmd_intervene(cfg: &RunConfig, kinds: &[AttackKind]) -> Result<Vec<InterveneOutcome>> {
    with_pool(cfg, || {
        let model = load_model(cfg)?;
        let channels = model.spec().split_shape()?[0];
        let mut out = Vec::new();
        for kind in selected(cfg, kinds)? {
            let cache = load_cache(cfg.out_path(&cache_file(kind)))?;
            cache.check_model(&model)?;
            let table = sweep(&model, &cache, &cfg.intervention)?;
            let sampled_gammas: Vec<usize> = table.sampled.iter().filter(|s| s.1).map(|s| s.0).collect();
            for &g in &sampled_gammas {
                eprintln!(
                    "{kind}: gamma {g} has {} combinations, above the cap of {}; sampled",
                    binomial(channels, g).map_or("too many".into(), |c| c.to_string()),
                    cfg.intervention.sample_cap
                );
            }
            write_effects(&cfg.out_path(&effects_file(kind)), &table)?;
            let mut jsonl = String::new();
            for r in &table.records {
                jsonl.push_str(&serde_json::to_string(&EffectRow::from(r))?);
                jsonl.push('\n');
            }
            write_atomic(&cfg.out_path(&effects_jsonl_file(kind)), jsonl.as_bytes())?;
            eprintln!("{kind}: {} effect records", table.records.len());
            out.push(InterveneOutcome {
                kind,
                rows: table.records.len(),
                samples: cfg.intervention.rows(&cache).len(),
                sampled_gammas,
            });
        }
        Ok(out)
    })
}

// ---------------------------------------------------------------- analyze

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalRow {
    pub gamma: usize,
    pub channel: usize,
    pub ael: f64,
    pub aea: f64,
    pub rank: usize,
    pub sampled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValueRow {
    pub gamma: usize,
    pub j: usize,
    pub k: usize,
    pub p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRow {
    pub channel: usize,
    pub l2_norm: f64,
    pub std: f64,
    pub mean: f64,
    pub max_abs: f64,
    pub mean_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionRow {
    pub descriptor: String,
    pub n: usize,
    pub r: Option<f64>,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopBottomRow {
    pub gamma: usize,
    pub group: String,
    pub position: usize,
    pub phi: String,
    pub ael: f64,
    pub aea: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossRow {
    pub attack_a: AttackKind,
    pub attack_b: AttackKind,
    pub gamma: usize,
    pub phi: String,
    pub ael_a: f64,
    pub ael_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSummaryRow {
    pub attack_a: AttackKind,
    pub attack_b: AttackKind,
    pub gamma: usize,
    pub n: usize,
    pub r: Option<f64>,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramEntry {
    pub gamma: usize,
    pub sampled: bool,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub const DESCRIPTORS: [&str; 4] = ["l2_norm", "std", "mean", "max_abs"];

/// Levels with informative rankings: 1 ≤ γ < H (at γ = H all marginals coincide).
fn ranked_levels(table: &EffectTable) -> Vec<usize> {
    table
        .gammas()
        .into_iter()
        .filter(|&g| g >= 1 && g < table.channels)
        .collect()
}

/// Pairs `AEL_Φ` of two tables at level γ; both must hold exactly the same sets.
pub fn pair_effects(a: &EffectTable, b: &EffectTable, gamma: usize) -> Result<Vec<(ChannelSet, f64, f64)>> {
    let la = a.level(gamma);
    let lb: BTreeMap<&ChannelSet, f64> = b.level(gamma).iter().map(|r| (&r.phi, r.ael)).collect();
    let mut missing: Vec<String> = la
        .iter()
        .filter(|r| !lb.contains_key(&r.phi))
        .map(|r| format!("{{{}}}", r.phi))
        .collect();
    let in_a: std::collections::BTreeSet<&ChannelSet> = la.iter().map(|r| &r.phi).collect();
    missing.extend(lb.keys().filter(|p| !in_a.contains(*p)).map(|p| format!("{{{p}}}")));
    if !missing.is_empty() || la.is_empty() {
        return Err(Error::Coverage {
            missing: missing.len(),
            example: missing.first().cloned().unwrap_or_else(|| format!("no sets at gamma {gamma}")),
        });
    }
    Ok(la.iter().map(|r| (r.phi.clone(), r.ael, lb[&r.phi])).collect())
}

fn regression_row(descriptor: &str, x: &[f64], y: &[f64]) -> Result<RegressionRow> {
    match pearson_least_squares(x, y) {
        Ok(r) => Ok(RegressionRow {
            descriptor: descriptor.into(),
            n: r.n,
            r: Some(r.r),
            slope: Some(r.slope),
            intercept: Some(r.intercept),
        }),
        Err(Error::DegenerateInput(_)) => Ok(RegressionRow {
            descriptor: descriptor.into(),
            n: x.len(),
            r: None,
            slope: None,
            intercept: None,
        }),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOutcome {
    pub primary_attack: AttackKind,
    pub levels: Vec<usize>,
    pub kernel_regression: Vec<RegressionRow>,
    pub cross_attack: Vec<CrossSummaryRow>,
}

pub fn cmd_analyze(cfg: &RunConfig) -> Result<AnalysisOutcome> {
    with_pool(cfg, || {
        let model = load_model(cfg)?;
        let channels = model.spec().split_shape()?[0];
        let primary = cfg.primary_attack();
        let table = read_effects(&cfg.out_path(&effects_file(primary)), channels)?;
        write_effects(&cfg.out_path("effects.csv"), &table)?;
        let levels: Vec<usize> = table.gammas().into_iter().filter(|&g| g >= 1).collect();

        let mut marginal_rows = Vec::new();
        let mut ranks_by_level: Vec<(usize, Vec<usize>)> = Vec::new();
        for &g in &levels {
            let m = marginals(&table, g)?;
            ranks_by_level.push((g, m.iter().map(|c| c.rank).collect()));
            marginal_rows.extend(m.into_iter().map(|c| MarginalRow {
                gamma: c.gamma,
                channel: c.channel,
                ael: c.ael,
                aea: c.aea,
                rank: c.rank,
                sampled: c.sampled,
            }));
        }
        write_csv(
            &cfg.out_path("marginals.csv"),
            &["gamma", "channel", "ael", "aea", "rank", "sampled"],
            &marginal_rows,
        )?;

        let mut header = vec!["gamma".to_string(), "sampled".into(), "spearman_vs_first".into()];
        header.extend((0..channels).map(|c| format!("rank_ch{c}")));
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let mut ranking_rows: Vec<Vec<String>> = Vec::new();
        for (g, ranks) in &ranks_by_level {
            let rho = spearman(&ranks_by_level[0].1, ranks)?;
            let mut row = vec![g.to_string(), table.is_sampled(*g).to_string(), rho.to_string()];
            row.extend(ranks.iter().map(|r| r.to_string()));
            ranking_rows.push(row);
        }
        write_csv(&cfg.out_path("rankings.csv"), &header_refs, &ranking_rows)?;

        let (mut raw_rows, mut clipped_rows) = (Vec::new(), Vec::new());
        for g in ranked_levels(&table) {
            let pm = p_matrix(&table, g, cfg.analysis.wrst_mode)?;
            for j in 0..channels {
                for k in 0..channels {
                    raw_rows.push(PValueRow { gamma: g, j, k, p: pm.raw[j][k] });
                    clipped_rows.push(PValueRow { gamma: g, j, k, p: pm.clipped[j][k] });
                }
            }
        }
        write_csv(&cfg.out_path("pvalues_raw.csv"), &["gamma", "j", "k", "p"], &raw_rows)?;
        write_csv(&cfg.out_path("pvalues_clipped.csv"), &["gamma", "j", "k", "p"], &clipped_rows)?;

        let ranked: Vec<&(usize, Vec<usize>)> = ranks_by_level
            .iter()
            .filter(|(g, _)| *g < channels)
            .collect();
        let ranked = if ranked.is_empty() { ranks_by_level.iter().collect() } else { ranked };
        let mean_rank: Vec<f64> = (0..channels)
            .map(|c| ranked.iter().map(|(_, r)| r[c] as f64).sum::<f64>() / ranked.len().max(1) as f64)
            .collect();
        let kernels = kernel_descriptors(&model, model.spec().split_index)?;
        let kernel_rows: Vec<KernelRow> = kernels
            .iter()
            .map(|k| KernelRow {
                channel: k.channel,
                l2_norm: k.l2_norm,
                std: k.std,
                mean: k.mean,
                max_abs: k.max_abs,
                mean_rank: mean_rank[k.channel],
            })
            .collect();
        write_csv(
            &cfg.out_path("kernel_stats.csv"),
            &["channel", "l2_norm", "std", "mean", "max_abs", "mean_rank"],
            &kernel_rows,
        )?;
        let columns: [Vec<f64>; 4] = [
            kernels.iter().map(|k| k.l2_norm).collect(),
            kernels.iter().map(|k| k.std).collect(),
            kernels.iter().map(|k| k.mean).collect(),
            kernels.iter().map(|k| k.max_abs).collect(),
        ];
        let kernel_regression = DESCRIPTORS
            .iter()
            .zip(&columns)
            .map(|(name, x)| regression_row(name, x, &mean_rank))
            .collect::<Result<Vec<_>>>()?;
        write_csv(
            &cfg.out_path("kernel_regression.csv"),
            &["descriptor", "n", "r", "slope", "intercept"],
            &kernel_regression,
        )?;

        let mut tb_rows = Vec::new();
        for &g in &levels {
            let mut sorted: Vec<&EffectRecord> = table.level(g).iter().collect();
            sorted.sort_by(|a, b| b.ael.total_cmp(&a.ael).then_with(|| a.phi.cmp(&b.phi)));
            let k = cfg.analysis.top_k.min(sorted.len());
            let push = |rows: &mut Vec<TopBottomRow>, group: &str, pos: usize, r: &EffectRecord| {
                rows.push(TopBottomRow {
                    gamma: g,
                    group: group.into(),
                    position: pos + 1,
                    phi: r.phi.to_string(),
                    ael: r.ael,
                    aea: r.aea,
                })
            };
            for (i, r) in sorted.iter().take(k).enumerate() {
                push(&mut tb_rows, "top", i, r);
            }
            for (i, r) in sorted.iter().rev().take(k).enumerate() {
                push(&mut tb_rows, "bottom", i, r);
            }
        }
        write_csv(
            &cfg.out_path("top_bottom.csv"),
            &["gamma", "group", "position", "phi", "ael", "aea"],
            &tb_rows,
        )?;

        let histograms = levels
            .iter()
            .map(|&g| {
                let values: Vec<f64> = table.level(g).iter().map(|r| r.aea).collect();
                let h = histogram(&values, cfg.analysis.histogram_bins)?;
                Ok(HistogramEntry {
                    gamma: g,
                    sampled: table.is_sampled(g),
                    edges: h.edges,
                    counts: h.counts,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_atomic(
            &cfg.out_path("histograms.json"),
            &serde_json::to_vec_pretty(&histograms)?,
        )?;

        let mut tables: Vec<(AttackKind, EffectTable)> = Vec::new();
        for a in &cfg.attacks {
            let path = cfg.out_path(&effects_file(a.kind));
            if a.kind == primary {
                tables.push((a.kind, table.clone()));
            } else if path.exists() {
                tables.push((a.kind, read_effects(&path, channels)?));
            } else {
                eprintln!("{}: no effects file, skipped in cross-attack comparison", a.kind);
            }
        }
        let (mut cross_rows, mut cross_summary) = (Vec::new(), Vec::new());
        for i in 0..tables.len() {
            for j in i + 1..tables.len() {
                let (ka, ta) = &tables[i];
                let (kb, tb) = &tables[j];
                for &g in &cfg.analysis.cross_attack_gammas {
                    if ta.level(g).is_empty() && tb.level(g).is_empty() {
                        continue;
                    }
                    let pairs = pair_effects(ta, tb, g)?;
                    let x: Vec<f64> = pairs.iter().map(|p| p.1).collect();
                    let y: Vec<f64> = pairs.iter().map(|p| p.2).collect();
                    let reg = regression_row("ael", &x, &y)?;
                    cross_summary.push(CrossSummaryRow {
                        attack_a: *ka,
                        attack_b: *kb,
                        gamma: g,
                        n: pairs.len(),
                        r: reg.r,
                        slope: reg.slope,
                        intercept: reg.intercept,
                    });
                    cross_rows.extend(pairs.into_iter().map(|(phi, a, b)| CrossRow {
                        attack_a: *ka,
                        attack_b: *kb,
                        gamma: g,
                        phi: phi.to_string(),
                        ael_a: a,
                        ael_b: b,
                    }));
                }
            }
        }
        write_csv(
            &cfg.out_path("cross_attack.csv"),
            &["attack_a", "attack_b", "gamma", "phi", "ael_a", "ael_b"],
            &cross_rows,
        )?;
        write_csv(
            &cfg.out_path("cross_attack_r.csv"),
            &["attack_a", "attack_b", "gamma", "n", "r", "slope", "intercept"],
            &cross_summary,
        )?;
        Ok(AnalysisOutcome {
            primary_attack: primary,
            levels,
            kernel_regression,
            cross_attack: cross_summary,
        })
    })
}

// ---------------------------------------------------------------- report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub rows: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub model_hash: String,
    pub primary_attack: AttackKind,
    pub config: serde_json::Value,
    pub files: Vec<FileEntry>,
}

/// Data rows of a bundle file: CSV records, or top-level JSON entries.
fn count_rows(name: &str, bytes: &[u8]) -> Result<usize> {
    if name.ends_with(".csv") {
        let mut r = csv::Reader::from_reader(bytes);
        let mut n = 0;
        for rec in r.records() {
            rec?;
            n += 1;
        }
        Ok(n)
    } else {
        let v: serde_json::Value = serde_json::from_slice(bytes)?;
        Ok(match v {
            serde_json::Value::Array(a) => a.len(),
            serde_json::Value::Object(o) => o.len(),
            _ => 1,
        })
    }
}

fn file_entry(dir: &Path, name: &str) -> Result<FileEntry> {
    let bytes = read_file(&dir.join(name))?;
    Ok(FileEntry {
        name: name.into(),
        rows: count_rows(name, &bytes)?,
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

/// Expected effect rows per level under the configured cap.
fn expected_effect_rows(cfg: &RunConfig, channels: usize) -> usize {
    cfg.intervention
        .gammas
        .iter()
        .map(|&g| {
            let c = binomial(channels, g).unwrap_or(u128::MAX);
            c.min(cfg.intervention.sample_cap as u128) as usize
        })
        .sum()
}

#[derive(Serialize)]
struct LevelPlot {
    gamma: usize,
    sampled: bool,
    top: Vec<TopBottomRow>,
    bottom: Vec<TopBottomRow>,
    channels: Vec<MarginalRow>,
    histogram: Option<HistogramEntry>,
    heatmap: Vec<Vec<Option<f64>>>,
}

#[derive(Serialize)]
struct ScatterPoint {
    channel: usize,
    gamma: usize,
    value: f64,
    rank: usize,
}

#[derive(Serialize)]
struct KernelScatter {
    descriptor: String,
    points: Vec<ScatterPoint>,
    regression: Option<RegressionRow>,
}

#[derive(Serialize)]
struct CrossScatter {
    attack_a: AttackKind,
    attack_b: AttackKind,
    gamma: usize,
    points: Vec<[f64; 2]>,
    r: Option<f64>,
}

#[derive(Serialize)]
struct PlotData {
    attack: AttackKind,
    levels: Vec<LevelPlot>,
    rank_lines: Vec<BTreeMap<String, serde_json::Value>>,
    kernel_scatter: Vec<KernelScatter>,
    cross_attack: Vec<CrossScatter>,
}

fn plot_data(cfg: &RunConfig, channels: usize) -> Result<PlotData> {
    let p = |n: &str| cfg.out_path(n);
    let marg: Vec<MarginalRow> = read_csv(&p("marginals.csv"))?;
    let tb: Vec<TopBottomRow> = read_csv(&p("top_bottom.csv"))?;
    let clipped: Vec<PValueRow> = read_csv(&p("pvalues_clipped.csv"))?;
    let kernels: Vec<KernelRow> = read_csv(&p("kernel_stats.csv"))?;
    let regs: Vec<RegressionRow> = read_csv(&p("kernel_regression.csv"))?;
    let cross: Vec<CrossRow> = read_csv(&p("cross_attack.csv"))?;
    let cross_r: Vec<CrossSummaryRow> = read_csv(&p("cross_attack_r.csv"))?;
    let hists: Vec<HistogramEntry> = serde_json::from_slice(&read_file(&p("histograms.json"))?)?;

    let mut gammas: Vec<usize> = marg.iter().map(|m| m.gamma).collect();
    gammas.dedup();
    let levels = gammas
        .iter()
        .map(|&g| {
            let mut heatmap = vec![vec![None; channels]; channels];
            let mut any = false;
            for r in clipped.iter().filter(|r| r.gamma == g) {
                heatmap[r.j][r.k] = r.p;
                any = true;
            }
            LevelPlot {
                gamma: g,
                sampled: marg.iter().any(|m| m.gamma == g && m.sampled),
                top: tb.iter().filter(|r| r.gamma == g && r.group == "top").cloned().collect(),
                bottom: tb.iter().filter(|r| r.gamma == g && r.group == "bottom").cloned().collect(),
                channels: marg.iter().filter(|m| m.gamma == g).cloned().collect(),
                histogram: hists.iter().find(|h| h.gamma == g).cloned(),
                heatmap: if any { heatmap } else { Vec::new() },
            }
        })
        .collect();

    let rank_lines = (0..channels)
        .map(|c| {
            let pts: Vec<[usize; 2]> = marg.iter().filter(|m| m.channel == c).map(|m| [m.gamma, m.rank]).collect();
            BTreeMap::from([
                ("channel".to_string(), serde_json::json!(c)),
                ("ranks".to_string(), serde_json::json!(pts)),
            ])
        })
        .collect();

    let kernel_scatter = DESCRIPTORS
        .iter()
        .map(|&d| {
            let value = |k: &KernelRow| match d {
                "l2_norm" => k.l2_norm,
                "std" => k.std,
                "mean" => k.mean,
                _ => k.max_abs,
            };
            let points = marg
                .iter()
                .filter(|m| m.gamma < channels)
                .filter_map(|m| {
                    kernels.iter().find(|k| k.channel == m.channel).map(|k| ScatterPoint {
                        channel: m.channel,
                        gamma: m.gamma,
                        value: value(k),
                        rank: m.rank,
                    })
                })
                .collect();
            KernelScatter {
                descriptor: d.into(),
                points,
                regression: regs.iter().find(|r| r.descriptor == d).cloned(),
            }
        })
        .collect();

    let cross_attack = cross_r
        .iter()
        .map(|s| CrossScatter {
            attack_a: s.attack_a,
            attack_b: s.attack_b,
            gamma: s.gamma,
            points: cross
                .iter()
                .filter(|c| c.attack_a == s.attack_a && c.attack_b == s.attack_b && c.gamma == s.gamma)
                .map(|c| [c.ael_a, c.ael_b])
                .collect(),
            r: s.r,
        })
        .collect();

    Ok(PlotData {
        attack: cfg.primary_attack(),
        levels,
        rank_lines,
        kernel_scatter,
        cross_attack,
    })
}

/// Validates the analysis outputs, writes `plot_data.json` and `manifest.json`.
pub fn cmd_report(cfg: &RunConfig) -> Result<Manifest> {
    let dir = cfg.resolve(&cfg.out_dir);
    let missing: Vec<&str> = ANALYSIS_FILES
        .iter()
        .copied()
        .filter(|f| !dir.join(f).is_file())
        .collect();
    if !missing.is_empty() {
        return Err(Error::IncompleteBundle(format!("missing {}", missing.join(", "))));
    }
    let model = load_model(cfg)?;
    let channels = model.spec().split_shape()?[0];

    let effects = file_entry(&dir, "effects.csv")?;
    let expected = expected_effect_rows(cfg, channels);
    if effects.rows != expected {
        return Err(Error::IncompleteBundle(format!(
            "effects.csv has {} rows, the configured sweep yields {expected}",
            effects.rows
        )));
    }
    let marg = file_entry(&dir, "marginals.csv")?;
    let levels = cfg.intervention.gammas.iter().filter(|&&g| g >= 1).count();
    if marg.rows != levels * channels {
        return Err(Error::IncompleteBundle(format!(
            "marginals.csv has {} rows, expected {}",
            marg.rows,
            levels * channels
        )));
    }

    write_atomic(&dir.join(PLOT_DATA_FILE), &serde_json::to_vec_pretty(&plot_data(cfg, channels)?)?)?;
    let mut files = ANALYSIS_FILES
        .iter()
        .map(|f| file_entry(&dir, f))
        .collect::<Result<Vec<_>>>()?;
    files.push(file_entry(&dir, PLOT_DATA_FILE)?);
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.hash(),
        model_hash: model_hash(&model),
        primary_attack: cfg.primary_attack(),
        config: cfg.recorded(),
        files,
    };
    write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Re-reads `manifest.json` in `dir` and checks every declared file exists with the
/// recorded row count and digest.
pub fn validate_bundle(dir: &Path) -> Result<Manifest> {
    let manifest: Manifest = serde_json::from_slice(&read_file(&dir.join(MANIFEST_FILE))?)?;
    for f in &manifest.files {
        let path = dir.join(&f.name);
        if !path.is_file() {
            return Err(Error::IncompleteBundle(format!("missing {}", f.name)));
        }
        let now = file_entry(dir, &f.name)?;
        if now.rows != f.rows || now.sha256 != f.sha256 {
            return Err(Error::IncompleteBundle(format!(
                "{} changed: {} rows recorded, {} found",
                f.name, f.rows, now.rows
            )));
        }
    }
    Ok(manifest)
}

/// train → attack → intervene → analyze → report.
pub fn run_pipeline(cfg: &RunConfig) -> Result<Manifest> {
    cmd_train(cfg)?;
    cmd_attack(cfg, &[])?;
    cmd_intervene(cfg, &[])?;
    cmd_analyze(cfg)?;
    cmd_report(cfg)
}
