//! Stage commands, the report bundle and the `advint` binary on small synthetic data.

mod common;

use std::path::Path;
use std::process::Command;

use advint::attacks::{AttackConfig, AttackKind};
use advint::cache::load_cache;
use advint::config::RunConfig;
use advint::error::Error;
use advint::report::{
    cache_file, cmd_analyze, cmd_attack, cmd_intervene, cmd_report, cmd_train, effects_file, pair_effects,
    read_effects, run_pipeline, validate_bundle, MODEL_FILE,
};
use advint::stats::pearson_least_squares;

fn config(dir: &Path) -> RunConfig {
    RunConfig::from_toml(&common::synthetic_config_toml(dir), dir).unwrap()
}

fn bundle_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| !n.starts_with('.'))
        .collect();
    names.sort();
    names.into_iter().map(|n| (n.clone(), std::fs::read(dir.join(&n)).unwrap())).collect()
}

#[test]
fn pipeline_is_byte_identical_across_reruns_and_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    let mut bundles = Vec::new();
    for (i, workers) in [1, 2, 1].into_iter().enumerate() {
        cfg.out_dir = format!("run{i}").into();
        cfg.workers = workers;
        let manifest = run_pipeline(&cfg).unwrap();
        let dir = cfg.resolve(&cfg.out_dir);
        assert_eq!(validate_bundle(&dir).unwrap(), manifest);
        bundles.push(bundle_bytes(&dir));
    }
    assert!(!bundles[0].is_empty());
    for b in &bundles[1..] {
        assert_eq!(b.len(), bundles[0].len());
        for ((na, a), (nb, b)) in bundles[0].iter().zip(b) {
            assert_eq!(na, nb);
            assert!(a == b, "{na} differs between runs");
        }
    }
}

#[test]
fn bundle_contents_are_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    let manifest = run_pipeline(&cfg).unwrap();
    let dir = cfg.resolve(&cfg.out_dir);

    let effects = read_effects(&dir.join("effects.csv"), 16).unwrap();
    assert_eq!(effects.records.len(), 16 + 40 + 40 + 16 + 1);
    assert_eq!(effects.gammas(), vec![1, 2, 3, 15, 16]);
    assert!(effects.is_sampled(2) && effects.is_sampled(3) && !effects.is_sampled(15));
    let rows = |name: &str| manifest.files.iter().find(|f| f.name == name).unwrap().rows;
    assert_eq!(rows("marginals.csv"), 5 * 16);

    let mut reader = csv::Reader::from_path(dir.join("rankings.csv")).unwrap();
    for rec in reader.records() {
        let rec = rec.unwrap();
        let mut ranks: Vec<usize> = rec.iter().skip(3).map(|v| v.parse().unwrap()).collect();
        ranks.sort_unstable();
        assert_eq!(ranks, (1..=16).collect::<Vec<_>>());
    }
    let mut reader = csv::Reader::from_path(dir.join("pvalues_clipped.csv")).unwrap();
    for rec in reader.records() {
        let rec = rec.unwrap();
        if !rec[3].is_empty() {
            let p: f64 = rec[3].parse().unwrap();
            assert!((0.0..=0.10).contains(&p));
        }
    }
    let text = std::fs::read_to_string(dir.join("effects.csv")).unwrap();
    assert!(text.starts_with("gamma,phi,n_samples,ael,aea\n"));
    assert!(!text.contains('\r'));
    let plot: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("plot_data.json")).unwrap()).unwrap();
    assert_eq!(plot["levels"].as_array().unwrap().len(), 5);
    assert_eq!(plot["rank_lines"].as_array().unwrap().len(), 16);
}

#[test]
fn report_rejects_incomplete_or_modified_bundles() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    run_pipeline(&cfg).unwrap();
    let dir = cfg.resolve(&cfg.out_dir);

    std::fs::write(dir.join("top_bottom.csv"), "gamma,group,position,phi,ael,aea\n").unwrap();
    assert!(matches!(validate_bundle(&dir), Err(Error::IncompleteBundle(_))));

    std::fs::remove_file(dir.join("marginals.csv")).unwrap();
    match cmd_report(&cfg) {
        Err(Error::IncompleteBundle(msg)) => assert!(msg.contains("marginals.csv"), "{msg}"),
        other => panic!("expected an incomplete bundle, got {other:?}"),
    }
}

#[test]
fn stage_level_behaviour() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());

    let first = cmd_train(&cfg).unwrap();
    let weights = std::fs::read(cfg.out_path(MODEL_FILE)).unwrap();
    let second = cmd_train(&cfg).unwrap();
    assert_eq!(first.model_hash, second.model_hash);
    assert_eq!(weights, std::fs::read(cfg.out_path(MODEL_FILE)).unwrap());
    let log = std::fs::read_to_string(cfg.out_path("train_log.jsonl")).unwrap();
    assert!(log.lines().last().unwrap().contains("\"event\":\"evaluation\""));

    // ε = 0 leaves every activation untouched and flips nothing
    cfg.attacks.push(AttackConfig::fgsm(0.0));
    let out = cmd_attack(&cfg, &[AttackKind::Fgsm]).unwrap();
    assert_eq!(out[0].success_rate, 0.0);
    let cache = load_cache(cfg.out_path(&cache_file(AttackKind::Fgsm))).unwrap();
    assert_eq!(cache.h, cache.h_adv);

    cmd_attack(&cfg, &[AttackKind::PgdLinf]).unwrap();
    let bytes = std::fs::read(cfg.out_path(&cache_file(AttackKind::PgdLinf))).unwrap();
    cmd_attack(&cfg, &[AttackKind::PgdLinf]).unwrap();
    assert_eq!(bytes, std::fs::read(cfg.out_path(&cache_file(AttackKind::PgdLinf))).unwrap());

    let effects = |cfg: &RunConfig| read_effects(&cfg.out_path(&effects_file(AttackKind::PgdLinf)), 16).unwrap();
    cfg.intervention.gammas = vec![1];
    cmd_intervene(&cfg, &[AttackKind::PgdLinf]).unwrap();
    assert_eq!(effects(&cfg).records.len(), 16);
    cfg.intervention.gammas = vec![0];
    cmd_intervene(&cfg, &[AttackKind::PgdLinf]).unwrap();
    let t = effects(&cfg);
    assert_eq!(t.records.len(), 1);
    assert_eq!((t.records[0].ael, t.records[0].aea), (0.0, 0.0));
    cfg.intervention.gammas = (1..=16).collect();
    cfg.intervention.sample_cap = 2_000_000;
    cfg.intervention.max_samples = Some(2);
    cmd_intervene(&cfg, &[AttackKind::PgdLinf]).unwrap();
    assert_eq!(effects(&cfg).records.len(), 65535);

    // weights retrained under another seed make the cache stale
    cfg.seed = 99;
    cfg.train.seed = 99;
    cmd_train(&cfg).unwrap();
    assert!(matches!(cmd_intervene(&cfg, &[AttackKind::PgdLinf]), Err(Error::StaleCache { .. })));
}

#[test]
fn cross_attack_pairing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    run_pipeline(&cfg).unwrap();
    let pgd = read_effects(&cfg.out_path(&effects_file(AttackKind::PgdLinf)), 16).unwrap();
    let pairs = pair_effects(&pgd, &pgd, 3).unwrap();
    let x: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    assert!((pearson_least_squares(&x, &x).unwrap().r - 1.0).abs() < 1e-12);

    let mut other = pgd.clone();
    let dropped = other.records.iter().position(|r| r.gamma == 3).unwrap();
    other.records.remove(dropped);
    match pair_effects(&pgd, &other, 3) {
        Err(Error::Coverage { missing, .. }) => assert_eq!(missing, 1),
        other => panic!("expected a coverage error, got {other:?}"),
    }
    cmd_analyze(&cfg).unwrap();
}

#[test]
fn missing_dataset_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.data.train_images = tmp.path().join("nowhere.idx");
    match cmd_train(&cfg) {
        Err(Error::Io { path, .. }) => assert!(path.ends_with("nowhere.idx")),
        other => panic!("expected an IO error, got {other:?}"),
    }
}

#[test]
fn binary_runs_stages_and_reports_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("run.toml");
    std::fs::write(&cfg_path, common::synthetic_config_toml(tmp.path())).unwrap();
    let bin = env!("CARGO_BIN_EXE_advint");
    let run = |args: &[&str]| Command::new(bin).args(args).output().unwrap();
    let cfg = cfg_path.to_str().unwrap();

    for stage in ["train", "attack", "intervene", "analyze", "report"] {
        let out = run(&[stage, "--config", cfg, "--workers", "1"]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(validate_bundle(&tmp.path().join("run")).is_ok());

    let out = run(&["intervene", "--config", cfg, "--gamma", "1", "--attack-kind", "l2_penalty"]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(tmp.path().join("run").join(effects_file(AttackKind::L2Penalty))).unwrap();
    assert_eq!(text.lines().count(), 17);

    let out = run(&["train", "--config", tmp.path().join("absent.toml").to_str().unwrap()]);
    assert!(!out.status.success());
    let line: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(line["error"], "io");
    assert!(line["message"].as_str().unwrap().contains("absent.toml"));

    let out = run(&["attack", "--config", cfg, "--attack-kind", "fgsm"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("\"error\":\"config\""), "{stderr}");
}
