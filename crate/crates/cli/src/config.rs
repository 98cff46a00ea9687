//! Run configuration: built-in defaults, an optional TOML/JSON file, and
//! command-line overrides, resolved into one fully explicit [`RunConfig`].

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use collab_ff::baselines::ClassicConfig;
use collab_ff::data::{DatasetName, NUM_LABELS};
use collab_ff::ff::{FfConfig, GammaMode, LossKind, Schedule};
use collab_ff::nn::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ff,
    CollabFf,
    EntropyFf,
    BpPairwise,
    BpClassic,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Ff,
        Method::CollabFf,
        Method::EntropyFf,
        Method::BpPairwise,
        Method::BpClassic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ff => "ff",
            Method::CollabFf => "collab_ff",
            Method::EntropyFf => "entropy_ff",
            Method::BpPairwise => "bp_pairwise",
            Method::BpClassic => "bp_classic",
        }
    }

    /// Whether the model consumes label-linked inputs.
    pub fn is_linked(self) -> bool {
        self != Method::BpClassic
    }

    fn default_gamma(self) -> GammaMode {
        match self {
            Method::CollabFf => GammaMode::AllOtherLayers,
            _ => GammaMode::None,
        }
    }

    fn default_schedule(self) -> Schedule {
        match self {
            Method::CollabFf | Method::BpPairwise | Method::BpClassic => Schedule::Alternating,
            Method::Ff | Method::EntropyFf => Schedule::Layerwise,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .with_context(|| {
                let valid: Vec<&str> = Method::ALL.iter().map(|m| m.as_str()).collect();
                format!("unknown method '{s}', expected one of: {}", valid.join(", "))
            })
    }
}

/// A fully resolved run. Persisted next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetName,
    /// Directory holding one sub-directory per dataset.
    pub data_dir: PathBuf,
    pub method: Method,
    pub gamma_mode: GammaMode,
    pub schedule: Schedule,
    pub theta: f64,
    /// Per layer for the layer-wise schedule, otherwise for the network.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Input width first. Classic models end with the label head.
    pub layer_dims: Vec<usize>,
    pub output_dir: PathBuf,
    pub entropy_eval_n: usize,
    /// Epochs between entropy and error snapshots; 0 disables them.
    pub eval_every: usize,
    /// Train on a random subset of this many samples.
    pub train_subset: Option<usize>,
    pub negatives_per_positive: usize,
    /// One-based voting layers for linked models.
    pub inference_layers: Vec<usize>,
    /// Whether the classic model normalizes between hidden layers.
    pub classic_normalize: bool,
}

/// Optional overrides, as read from a config file or the command line.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub dataset: Option<DatasetName>,
    pub data_dir: Option<PathBuf>,
    pub method: Option<Method>,
    pub gamma_mode: Option<GammaMode>,
    pub schedule: Option<Schedule>,
    pub theta: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub seed: Option<u64>,
    pub layer_dims: Option<Vec<usize>>,
    pub output_dir: Option<PathBuf>,
    pub entropy_eval_n: Option<usize>,
    pub eval_every: Option<usize>,
    pub train_subset: Option<usize>,
    pub negatives_per_positive: Option<usize>,
    pub inference_layers: Option<Vec<usize>>,
    pub classic_normalize: Option<bool>,
}

macro_rules! merge_fields {
    ($dst:ident, $src:ident, $($field:ident),+) => {
        $(if $src.$field.is_some() { $dst.$field = $src.$field.clone(); })+
    };
}

impl ConfigOverrides {
    /// Fields set in `other` win.
    pub fn merged_with(mut self, other: &ConfigOverrides) -> Self {
        merge_fields!(
            self, other, dataset, data_dir, method, gamma_mode, schedule, theta, epochs, batch_size,
            learning_rate, seed, layer_dims, output_dir, entropy_eval_n, eval_every, train_subset,
            negatives_per_positive, inference_layers, classic_normalize
        );
        self
    }

    /// Reads a `.toml` or `.json` file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let parsed = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(anyhow::Error::from),
            Some("toml") => toml::from_str(&text).map_err(anyhow::Error::from),
            _ => bail!("config file {} must end in .toml or .json", path.display()),
        };
        parsed.with_context(|| format!("parsing config {}", path.display()))
    }

    /// Fills every unset field with the built-in defaults for the chosen
    /// method and dataset.
    pub fn resolve(&self) -> Result<RunConfig> {
        let dataset = self.dataset.unwrap_or(DatasetName::Mnist);
        let method = self.method.unwrap_or(Method::Ff);
        let layer_dims = self.layer_dims.clone().unwrap_or_else(|| default_layer_dims(method, dataset));
        let hidden_layers = if method.is_linked() {
            layer_dims.len().saturating_sub(1)
        } else {
            layer_dims.len().saturating_sub(2)
        };
        let cfg = RunConfig {
            dataset,
            data_dir: self.data_dir.clone().unwrap_or_else(|| PathBuf::from("data")),
            method,
            gamma_mode: self.gamma_mode.unwrap_or(method.default_gamma()),
            schedule: self.schedule.unwrap_or(method.default_schedule()),
            theta: self.theta.unwrap_or(10.0),
            epochs: self.epochs.unwrap_or(150),
            batch_size: self.batch_size.unwrap_or(200),
            learning_rate: self.learning_rate.unwrap_or(1e-3),
            seed: self.seed.unwrap_or(0),
            layer_dims,
            output_dir: self
                .output_dir
                .clone()
                .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}_{}", dataset, method))),
            entropy_eval_n: self.entropy_eval_n.unwrap_or(2000),
            eval_every: self.eval_every.unwrap_or(10),
            train_subset: self.train_subset,
            negatives_per_positive: self.negatives_per_positive.unwrap_or(1),
            inference_layers: self.inference_layers.clone().unwrap_or_else(|| match method {
                Method::BpPairwise => vec![hidden_layers],
                _ => (1..=hidden_layers).collect(),
            }),
            classic_normalize: self.classic_normalize.unwrap_or(false),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Three hidden layers of 500 units, fed the linked input (or the raw input
/// plus a label head for the classic model).
pub fn default_layer_dims(method: Method, dataset: DatasetName) -> Vec<usize> {
    let d = dataset.dim();
    if method.is_linked() {
        vec![d + NUM_LABELS, 500, 500, 500]
    } else {
        vec![d, 500, 500, 500, NUM_LABELS]
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.dataset.dim();
        let dims = &self.layer_dims;
        if dims.contains(&0) {
            bail!("layer_dims: all widths must be positive, got {dims:?}");
        }
        if self.method.is_linked() {
            if dims.len() < 2 || dims[0] != d + NUM_LABELS {
                bail!(
                    "layer_dims: {} expects [{}, hidden..] for {}, got {dims:?}",
                    self.method,
                    d + NUM_LABELS,
                    self.dataset
                );
            }
            let depth = dims.len() - 1;
            if self.inference_layers.is_empty() || self.inference_layers.iter().any(|&l| l == 0 || l > depth) {
                bail!(
                    "inference_layers: expected one-based layers in 1..={depth}, got {:?}",
                    self.inference_layers
                );
            }
        } else if dims.len() < 3 || dims[0] != d || dims[dims.len() - 1] != NUM_LABELS {
            bail!(
                "layer_dims: bp_classic expects [{d}, hidden.., {NUM_LABELS}] for {}, got {dims:?}",
                self.dataset
            );
        }
        match self.method {
            Method::BpPairwise | Method::BpClassic if self.gamma_mode != GammaMode::None => {
                bail!("gamma_mode: {} trains end to end and takes none, got {}", self.method, self.gamma_mode)
            }
            Method::Ff if self.gamma_mode != GammaMode::None => {
                bail!("gamma_mode: ff uses none (use collab_ff for {})", self.gamma_mode)
            }
            Method::CollabFf if self.gamma_mode == GammaMode::None => {
                bail!("gamma_mode: collab_ff needs all_other_layers or predecessors_only")
            }
            _ => {}
        }
        if !self.theta.is_finite() {
            bail!("theta: must be finite, got {}", self.theta);
        }
        if self.epochs == 0 {
            bail!("epochs: must be at least 1");
        }
        if self.batch_size == 0 {
            bail!("batch_size: must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bail!("learning_rate: must be positive, got {}", self.learning_rate);
        }
        if self.negatives_per_positive == 0 {
            bail!("negatives_per_positive: must be at least 1");
        }
        if self.method == Method::EntropyFf && self.batch_size < 2 {
            bail!("batch_size: entropy_ff needs at least 2 samples per batch");
        }
        if self.train_subset == Some(0) {
            bail!("train_subset: must be positive when set");
        }
        Ok(())
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.data_dir.join(self.dataset.as_str())
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.method {
            Method::EntropyFf => LossKind::Entropy,
            _ => LossKind::SigmoidGoodness,
        }
    }

    pub fn inference_mask(&self) -> Vec<usize> {
        self.inference_layers.iter().map(|l| l - 1).collect()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    pub fn ff_config(&self) -> FfConfig {
        FfConfig {
            theta: self.theta,
            gamma_mode: self.gamma_mode,
            schedule: self.schedule,
            loss_kind: self.loss_kind(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            negatives_per_positive: self.negatives_per_positive,
            seed: self.seed,
            inference_layer_mask: self.inference_mask(),
            adam: self.adam(),
        }
    }

    pub fn classic_config(&self) -> ClassicConfig {
        ClassicConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            adam: self.adam(),
        }
    }

    /// SHA-256 of the canonical JSON form, excluding where files go.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        canonical.data_dir = PathBuf::new();
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_setup() {
        let cfg = ConfigOverrides::default().resolve().unwrap();
        assert_eq!(cfg.layer_dims, vec![794, 500, 500, 500]);
        assert_eq!((cfg.learning_rate, cfg.batch_size, cfg.epochs), (1e-3, 200, 150));
        assert_eq!(cfg.inference_layers, vec![1, 2, 3]);
        let classic = ConfigOverrides { method: Some(Method::BpClassic), ..Default::default() }
            .resolve()
            .unwrap();
        assert_eq!(classic.layer_dims, vec![784, 500, 500, 500, 10]);
        let pairwise = ConfigOverrides { method: Some(Method::BpPairwise), ..Default::default() }
            .resolve()
            .unwrap();
        assert_eq!(pairwise.inference_layers, vec![3]);
        let collab = ConfigOverrides { method: Some(Method::CollabFf), ..Default::default() }
            .resolve()
            .unwrap();
        assert_eq!((collab.gamma_mode, collab.schedule), (GammaMode::AllOtherLayers, Schedule::Alternating));
    }

    #[test]
    fn later_sources_win() {
        let file = ConfigOverrides { theta: Some(5.0), epochs: Some(3), ..Default::default() };
        let flags = ConfigOverrides { theta: Some(1.0), ..Default::default() };
        let cfg = file.merged_with(&flags).resolve().unwrap();
        assert_eq!((cfg.theta, cfg.epochs), (1.0, 3));
    }

    #[test]
    fn validation_names_the_field() {
        let bad = ConfigOverrides { layer_dims: Some(vec![10, 5]), ..Default::default() };
        assert!(bad.resolve().unwrap_err().to_string().starts_with("layer_dims"));
        let bad = ConfigOverrides { method: Some(Method::CollabFf), gamma_mode: Some(GammaMode::None), ..Default::default() };
        assert!(bad.resolve().unwrap_err().to_string().starts_with("gamma_mode"));
        let bad = ConfigOverrides { inference_layers: Some(vec![4]), ..Default::default() };
        assert!(bad.resolve().unwrap_err().to_string().starts_with("inference_layers"));
    }

    #[test]
    fn unknown_method_lists_valid_values() {
        let err = "sgd".parse::<Method>().unwrap_err().to_string();
        assert!(err.contains("ff, collab_ff, entropy_ff, bp_pairwise, bp_classic"), "{err}");
    }

    #[test]
    fn file_round_trip_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ConfigOverrides::default().resolve().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
        let back = ConfigOverrides::from_file(&path).unwrap().resolve().unwrap();
        assert_eq!(back, cfg);
        let toml_path = dir.path().join("c.toml");
        std::fs::write(&toml_path, "theta = 5.0\nmethod = \"collab_ff\"\n").unwrap();
        let t = ConfigOverrides::from_file(&toml_path).unwrap().resolve().unwrap();
        assert_eq!((t.theta, t.method), (5.0, Method::CollabFf));
        assert_ne!(t.hash(), cfg.hash());
        let mut moved = cfg.clone();
        moved.output_dir = PathBuf::from("elsewhere");
        assert_eq!(moved.hash(), cfg.hash());
        std::fs::write(&toml_path, "thetaa = 5.0\n").unwrap();
        assert!(ConfigOverrides::from_file(&toml_path).is_err());
    }
}
