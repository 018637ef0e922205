//! Run configuration for the train → attack → intervene → analyze → report pipeline.
//!
//! Written in TOML. Relative paths are resolved against the directory holding the
//! configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackConfig, AttackKind};
use crate::error::{Error, Result};
use crate::intervention::SweepConfig;
use crate::io::read_file;
use crate::network::NetworkSpec;
use crate::stats::WrstMode;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    #[serde(default = "default_classes")]
    pub classes: Vec<usize>,
    /// Attack only the first this-many correctly classified test samples.
    #[serde(default)]
    pub max_attack_samples: Option<usize>,
}

fn default_classes() -> Vec<usize> {
    vec![3, 7]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: String,
    /// Index of the target convolution inside the layer list.
    pub split_index: usize,
    pub split_after_activation: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: "mnist37".into(),
            split_index: 0,
            split_after_activation: false,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self) -> Result<NetworkSpec> {
        let mut spec = match self.architecture.as_str() {
            "mnist37" => NetworkSpec::mnist37(),
            other => return Err(Error::Config(format!("unknown architecture `{other}`"))),
        };
        spec.split_index = self.split_index;
        spec.split_after_activation = self.split_after_activation;
        spec.layer_shapes()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Attack whose effects feed the single-attack tables; the first configured one
    /// when unset.
    pub primary_attack: Option<AttackKind>,
    pub histogram_bins: usize,
    pub top_k: usize,
    pub cross_attack_gammas: Vec<usize>,
    pub wrst_mode: WrstMode,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            primary_attack: None,
            histogram_bins: 20,
            top_k: 10,
            cross_attack_gammas: vec![1, 3, 7],
            wrst_mode: WrstMode::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds training, every attack and combination sampling.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads; 0 lets the runtime decide.
    #[serde(default)]
    pub workers: usize,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub attacks: Vec<AttackConfig>,
    #[serde(default)]
    pub intervention: SweepConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Command-line overrides applied on top of a loaded file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub gammas: Option<Vec<usize>>,
    pub attack_kind: Option<AttackKind>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = String::from_utf8(read_file(path)?).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, base)
    }

    /// Pushes the run seed into every stage.
    fn normalize(&mut self) {
        self.train.seed = self.seed;
        for a in &mut self.attacks {
            a.seed = self.seed;
        }
        self.intervention.sample_seed = self.seed;
        self.intervention.gammas.sort_unstable();
        self.intervention.gammas.dedup();
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(g) = &o.gammas {
            self.intervention.gammas = g.clone();
        }
        if let Some(k) = o.attack_kind {
            if !self.attacks.iter().any(|a| a.kind == k) {
                return Err(Error::Config(format!("attack `{k}` is not configured")));
            }
            self.analysis.primary_attack = Some(k);
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        self.normalize();
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.attacks.is_empty() {
            return Err(Error::Config("at least one attack must be configured".into()));
        }
        let mut kinds: Vec<AttackKind> = self.attacks.iter().map(|a| a.kind).collect();
        kinds.sort_unstable();
        if kinds.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("each attack kind may appear once".into()));
        }
        for a in &self.attacks {
            a.validate()?;
        }
        if let Some(p) = self.analysis.primary_attack {
            if !kinds.contains(&p) {
                return Err(Error::Config(format!("primary attack `{p}` is not configured")));
            }
        }
        if self.intervention.gammas.is_empty() {
            return Err(Error::Config("gamma list is empty".into()));
        }
        if self.intervention.sample_cap == 0 {
            return Err(Error::Config("sample_cap must be positive".into()));
        }
        if self.analysis.histogram_bins == 0 {
            return Err(Error::Config("histogram_bins must be positive".into()));
        }
        let channels = self.model.spec()?.split_shape()?[0];
        if let Some(&g) = self.intervention.gammas.iter().find(|&&g| g > channels) {
            return Err(Error::Config(format!("gamma {g} exceeds {channels} channels")));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.resolve(&self.out_dir).join(name)
    }

    pub fn attack(&self, kind: AttackKind) -> Result<&AttackConfig> {
        self.attacks
            .iter()
            .find(|a| a.kind == kind)
            .ok_or_else(|| Error::Config(format!("attack `{kind}` is not configured")))
    }

    pub fn primary_attack(&self) -> AttackKind {
        self.analysis.primary_attack.unwrap_or(self.attacks[0].kind)
    }

    /// The resolved configuration minus execution-only settings (`out_dir`,
    /// `workers`), as recorded in report manifests.
    pub fn recorded(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("out_dir");
            o.remove("workers");
        }
        v
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.recorded()).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Parses `1,3,5-7` into `[1, 3, 5, 6, 7]`.
pub fn parse_gamma_list(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("bad gamma list `{s}`"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}
