//! Runs train, attack, intervene, analyze and report from a configuration file
//! and checks the resulting bundle against its manifest.
//!
//! `cargo run --release --example full_pipeline -- configs/quick.toml`

use advint::config::RunConfig;
use advint::report::{run_pipeline, validate_bundle};

fn main() -> advint::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "configs/quick.toml".into());
    let cfg = RunConfig::load(&path)?;
    let manifest = run_pipeline(&cfg)?;
    let dir = cfg.resolve(&cfg.out_dir);
    validate_bundle(&dir)?;
    println!("bundle in {} (config {}, model {})", dir.display(), &manifest.config_hash[..12], &manifest.model_hash[..12]);
    for f in &manifest.files {
        println!("  {:<24} {:>6} rows  {}", f.name, f.rows, &f.sha256[..16]);
    }
    Ok(())
}
