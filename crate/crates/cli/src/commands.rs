//! The `train`, `eval` and `sweep` verbs.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use log::info;
use serde::{Deserialize, Serialize};

use collab_ff::analysis::{self, GoodnessCache, LayerSet, SubsetEvalReport};
use collab_ff::baselines::{self, ClassicModel};
use collab_ff::checkpoint::{self, Model, ModelKind};
use collab_ff::data::{self, Dataset, DatasetName, Split};
use collab_ff::entropy::{EntropyProbe, EntropyReport};
use collab_ff::ff::{self, EpochEnd};
use collab_ff::nn::{init_network, MlpNetwork};
use collab_ff::report::{self, EntropySnapshot};
use collab_ff::Rng;

use crate::config::{Method, RunConfig};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "model.ffck";
pub const HISTORY_FILE: &str = "history.csv";
pub const ENTROPY_FILE: &str = "entropy.csv";
pub const ERROR_FILE: &str = "test_error.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Entropy of the final model on the probe set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropySummary {
    pub positive: EntropyReport,
    pub negative: EntropyReport,
    pub pooled: EntropyReport,
}

impl From<[EntropyReport; 3]> for EntropySummary {
    fn from([positive, negative, pooled]: [EntropyReport; 3]) -> Self {
        EntropySummary { positive, negative, pooled }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub final_test_error: f64,
    pub config: RunConfig,
    pub config_hash: String,
    pub wall_time_secs: f64,
    pub git_describe: Option<String>,
    /// Linked models only.
    pub entropy: Option<EntropySummary>,
}

#[derive(Debug, Clone, Serialize)]
struct ErrorRow {
    epoch: usize,
    test_error: f64,
}

pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    let dir = cfg.dataset_dir();
    data::load_dir(cfg.dataset, split, &dir)
        .with_context(|| format!("loading {} {split} from {} (run `ffbench fetch` first?)", cfg.dataset, dir.display()))
}

/// Test error of a linked network voting with `mask`.
pub fn linked_error(net: &MlpNetwork, test: &Dataset, mask: &[usize]) -> Result<f64> {
    Ok(GoodnessCache::build(net, &test.images, test.num_labels())?.error_rate(mask, &test.labels))
}

fn git_describe() -> Option<String> {
    let out = Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
}

/// Runs one training job end to end and writes every output into
/// `cfg.output_dir`.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let start = Instant::now();
    let out = &cfg.output_dir;
    report::write_json(&out.join(CONFIG_FILE), cfg)?;
    let full_train = load_split(cfg, Split::Train)?;
    let test = load_split(cfg, Split::Test)?;
    let train = match cfg.train_subset {
        Some(n) if n < full_train.len() => full_train.random_subset(n, &mut Rng::stream(cfg.seed, ff::SUBSET_STREAM)),
        _ => full_train,
    };
    info!(
        "training {} on {} samples of {} ({} test samples)",
        cfg.method,
        train.len(),
        cfg.dataset,
        test.len()
    );
    let hash = cfg.hash();
    let mut init_rng = Rng::stream(cfg.seed, ff::INIT_STREAM);
    let mut errors: Vec<ErrorRow> = Vec::new();
    let (final_error, entropy) = if cfg.method.is_linked() {
        let mut net = init_network(&cfg.layer_dims, &mut init_rng)?;
        let ff_cfg = cfg.ff_config();
        let mask = cfg.inference_mask();
        let probe = EntropyProbe::new(&test, cfg.entropy_eval_n, &mut Rng::stream(cfg.seed, ff::PROBE_STREAM));
        let mut snapshots: Vec<EntropySnapshot> = Vec::new();
        let mut snapshot = |epoch: usize, net: &MlpNetwork| -> collab_ff::Result<()> {
            if !probe.is_empty() {
                snapshots.extend(probe.measure(net)?.into_iter().map(|report| EntropySnapshot { epoch, report }));
            }
            let error = GoodnessCache::build(net, &test.images, test.num_labels())?.error_rate(&mask, &test.labels);
            info!("epoch {epoch}: test error {:.4}", error);
            errors.push(ErrorRow { epoch, test_error: error });
            Ok(())
        };
        if cfg.eval_every > 0 {
            snapshot(0, &net)?;
        }
        let every = cfg.eval_every;
        let mut observer = |end: &EpochEnd, net: &MlpNetwork| -> collab_ff::Result<()> {
            if every > 0 && end.global_epoch % every == 0 {
                snapshot(end.global_epoch, net)?;
            }
            Ok(())
        };
        let history = match cfg.method {
            Method::BpPairwise => baselines::train_pairwise_observed(&mut net, &train, &ff_cfg, &mut observer)?,
            _ => ff::train_observed(&mut net, &train, &ff_cfg, &mut observer)?,
        };
        drop(observer);
        report::write_history(&out.join(HISTORY_FILE), &history)?;
        report::write_entropy_trajectory(&out.join(ENTROPY_FILE), &snapshots)?;
        let final_error = linked_error(&net, &test, &mask)?;
        let entropy = if probe.is_empty() { None } else { Some(probe.measure(&net)?.into()) };
        checkpoint::save(&out.join(CHECKPOINT_FILE), &Model::Linked(net), &hash, Some(&mask))?;
        (final_error, entropy)
    } else {
        let mut model = ClassicModel::init(&cfg.layer_dims, cfg.classic_normalize, &mut init_rng)?;
        let history = baselines::train_classic(&mut model, &train, &cfg.classic_config())?;
        report::write_history(&out.join(HISTORY_FILE), &history)?;
        let final_error = model.error_rate(&test)?;
        checkpoint::save(&out.join(CHECKPOINT_FILE), &Model::Classic(model), &hash, None)?;
        (final_error, None)
    };
    let last_epoch = errors.last().map(|r| r.epoch);
    let total_epochs = match (cfg.method, cfg.schedule) {
        (Method::BpPairwise | Method::BpClassic, _) => cfg.epochs,
        (_, ff::Schedule::Layerwise) => cfg.epochs * (cfg.layer_dims.len() - 1),
        (_, ff::Schedule::Alternating) => cfg.epochs,
    };
    if last_epoch != Some(total_epochs) {
        errors.push(ErrorRow { epoch: total_epochs, test_error: final_error });
    }
    report::write_csv(&out.join(ERROR_FILE), &errors)?;
    let summary = TrainSummary {
        final_test_error: final_error,
        config: cfg.clone(),
        config_hash: hash,
        wall_time_secs: start.elapsed().as_secs_f64(),
        git_describe: git_describe(),
        entropy,
    };
    report::write_json(&out.join(SUMMARY_FILE), &summary)?;
    info!("{}: final test error {:.4}", cfg.method, final_error);
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedStat {
    pub seed: u64,
    pub final_test_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedSummary {
    pub runs: Vec<SeedStat>,
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
}

/// Repeats `train` once per seed in `<output_dir>/seed_<s>`.
pub fn train_seeds(base: &RunConfig, seeds: &[u64]) -> Result<MultiSeedSummary> {
    if seeds.is_empty() {
        bail!("seeds: at least one seed is required");
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.output_dir = base.output_dir.join(format!("seed_{seed}"));
        let s = train(&cfg)?;
        runs.push(SeedStat { seed, final_test_error: s.final_test_error });
    }
    let n = runs.len() as f64;
    let mean = runs.iter().map(|r| r.final_test_error).sum::<f64>() / n;
    let std = if runs.len() > 1 {
        (runs.iter().map(|r| (r.final_test_error - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let summary = MultiSeedSummary { runs, mean, std };
    report::write_json(&base.output_dir.join("seeds_summary.json"), &summary)?;
    Ok(summary)
}

/// What to evaluate and where to put it.
#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub checkpoint: PathBuf,
    /// Taken from the run's `config.json` next to the checkpoint when unset.
    pub dataset: Option<DatasetName>,
    pub data_dir: Option<PathBuf>,
    /// `None` evaluates the default family.
    pub subsets: Option<Vec<LayerSet>>,
    pub output_dir: PathBuf,
    pub entropy_eval_n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub model_kind: ModelKind,
    pub dataset: DatasetName,
    pub test_error: f64,
    pub sample_count: usize,
    /// One-based voting layers behind `test_error`.
    pub inference_layers: Option<Vec<usize>>,
    pub subsets: Option<SubsetEvalReport>,
    pub entropy: Option<EntropySummary>,
}

fn run_config_near(checkpoint: &Path) -> Option<RunConfig> {
    let path = checkpoint.parent()?.join(CONFIG_FILE);
    serde_json::from_str(&std::fs::read_to_string(path).ok()?).ok()
}

/// Scores a checkpoint on the test split and writes `eval.json`, plus
/// `subsets.csv`, `marginals.csv` and `eval_entropy.csv` for linked models.
pub fn eval(req: &EvalRequest) -> Result<EvalSummary> {
    let (header, model) = checkpoint::load(&req.checkpoint)?;
    let near = run_config_near(&req.checkpoint);
    let dataset = match (req.dataset, &near) {
        (Some(d), _) => d,
        (None, Some(c)) => c.dataset,
        (None, None) => bail!("dataset: not given and no {CONFIG_FILE} next to the checkpoint"),
    };
    let data_dir = req
        .data_dir
        .clone()
        .or_else(|| near.as_ref().map(|c| c.data_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("data"));
    let dir = data_dir.join(dataset.as_str());
    let test = data::load_dir(dataset, Split::Test, &dir)
        .with_context(|| format!("loading {dataset} test from {}", dir.display()))?;
    let out = &req.output_dir;
    let summary = match model {
        Model::Classic(m) => {
            if req.subsets.is_some() {
                bail!("subsets: layer subsets are undefined for a classic checkpoint");
            }
            if m.input_dim() != test.dim() || m.num_labels() != test.num_labels() {
                bail!(
                    "checkpoint expects {} inputs and {} labels, {dataset} has {} and {}",
                    m.input_dim(),
                    m.num_labels(),
                    test.dim(),
                    test.num_labels()
                );
            }
            EvalSummary {
                model_kind: ModelKind::Classic,
                dataset,
                test_error: m.error_rate(&test)?,
                sample_count: test.len(),
                inference_layers: None,
                subsets: None,
                entropy: None,
            }
        }
        Model::Linked(net) => {
            let expected = test.dim() + test.num_labels();
            if net.input_dim() != expected {
                bail!(
                    "checkpoint expects {} inputs, {dataset} links to {expected}",
                    net.input_dim()
                );
            }
            let mask = header.inference_mask.unwrap_or_else(|| (0..net.depth()).collect());
            let cache = GoodnessCache::build(&net, &test.images, test.num_labels())?;
            let subsets = req.subsets.clone().unwrap_or_else(|| analysis::default_subsets(net.depth()));
            let report = analysis::evaluate_cached(&cache, &test.labels, &subsets)?;
            analysis::write_report(&report, &out.join("subsets.csv"), &out.join("marginals.csv"))?;
            let probe = EntropyProbe::new(&test, req.entropy_eval_n, &mut Rng::stream(req.seed, ff::PROBE_STREAM));
            let entropy = if probe.is_empty() {
                None
            } else {
                let reports = probe.measure(&net)?;
                let snapshots: Vec<EntropySnapshot> = reports
                    .iter()
                    .cloned()
                    .map(|report| EntropySnapshot { epoch: 0, report })
                    .collect();
                report::write_entropy_trajectory(&out.join("eval_entropy.csv"), &snapshots)?;
                Some(reports.into())
            };
            EvalSummary {
                model_kind: ModelKind::LinkedMlp,
                dataset,
                test_error: cache.error_rate(&mask, &test.labels),
                sample_count: test.len(),
                inference_layers: Some(mask.iter().map(|l| l + 1).collect()),
                subsets: Some(report),
                entropy,
            }
        }
    };
    report::write_json(&out.join("eval.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub theta: f64,
    pub final_test_error: f64,
}

/// How sweep runs are executed.
#[derive(Debug, Clone)]
pub enum SweepMode {
    InProcess,
    /// Child `train` processes of this executable, at most `jobs` at a time.
    Processes { exe: PathBuf, jobs: usize },
}

pub fn sweep_run_dir(base: &Path, method: Method, theta: f64) -> PathBuf {
    base.join(format!("{method}_theta_{theta}"))
}

/// One run per (method, θ) pair, sequentially unless processes are asked
/// for; writes `sweep.csv` with one row per run.
pub fn sweep(base: &RunConfig, methods: &[Method], thetas: &[f64], mode: &SweepMode) -> Result<Vec<SweepRow>> {
    if thetas.is_empty() {
        bail!("thetas: at least one value is required");
    }
    if methods.is_empty() {
        bail!("methods: at least one method is required");
    }
    let mut configs = Vec::new();
    for &method in methods {
        for &theta in thetas {
            let mut cfg = base.clone();
            cfg.method = method;
            cfg.theta = theta;
            cfg.output_dir = sweep_run_dir(&base.output_dir, method, theta);
            if method != base.method {
                let same_kind = method.is_linked() == base.method.is_linked();
                let defaults = crate::config::ConfigOverrides {
                    method: Some(method),
                    dataset: Some(base.dataset),
                    layer_dims: same_kind.then(|| base.layer_dims.clone()),
                    ..Default::default()
                }
                .resolve()?;
                cfg.gamma_mode = defaults.gamma_mode;
                cfg.schedule = defaults.schedule;
                cfg.inference_layers = defaults.inference_layers;
                cfg.layer_dims = defaults.layer_dims;
            }
            cfg.validate().with_context(|| format!("sweep run {method} theta {theta}"))?;
            configs.push(cfg);
        }
    }
    let errors: Vec<f64> = match mode {
        SweepMode::InProcess => configs
            .iter()
            .map(|c| train(c).map(|s| s.final_test_error))
            .collect::<Result<_>>()?,
        SweepMode::Processes { exe, jobs } => run_children(exe, &configs, (*jobs).max(1))?,
    };
    let rows: Vec<SweepRow> = configs
        .iter()
        .zip(errors)
        .map(|(c, final_test_error)| SweepRow { method: c.method, theta: c.theta, final_test_error })
        .collect();
    report::write_csv(&base.output_dir.join("sweep.csv"), &rows)?;
    Ok(rows)
}

fn run_children(exe: &Path, configs: &[RunConfig], jobs: usize) -> Result<Vec<f64>> {
    for chunk in configs.chunks(jobs) {
        let mut children = Vec::new();
        for cfg in chunk {
            let path = cfg.output_dir.join(CONFIG_FILE);
            report::write_json(&path, cfg)?;
            let child = Command::new(exe)
                .arg("train")
                .arg("--config")
                .arg(&path)
                .spawn()
                .with_context(|| format!("starting {}", exe.display()))?;
            children.push((cfg, child));
        }
        for (cfg, mut child) in children {
            let status = child.wait()?;
            if !status.success() {
                bail!("run in {} failed with {status}", cfg.output_dir.display());
            }
        }
    }
    configs
        .iter()
        .map(|c| {
            let path = c.output_dir.join(SUMMARY_FILE);
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            Ok(serde_json::from_str::<TrainSummary>(&text)?.final_test_error)
        })
        .collect()
}
