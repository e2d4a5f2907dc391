//! Experiment runner: config parsing, per-seed pipelines, result files and
//! run comparison.
//!
//! A config is plain text with `[section]` headers and `key = value` lines;
//! `#` and `;` start comments. Every key is optional except `data.source`.
//!
//! ```text
//! [run]
//! name = usps-cae-mle
//! pipeline = cae_mle          # pretrain | cae_mle | deep_ifl
//! seeds = 0, 1, 2, 3, 4
//!
//! [data]
//! source = usps               # mnist | usps | idx | blobs
//! path = data/usps.txt
//!
//! [cluster]
//! clusters = 10
//! gamma = 0.1
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cae::{write_loss_history, CaeConfig, CaeModel, ConvStage, PretrainConfig};
use crate::clustering::{self, CentroidInit, ClusterConfig};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::ifl::{self, IflConfig};
use crate::metrics;
use crate::nn::OptimizerKind;
use crate::ward::DistancePolicy;

/// Output root used when a config has no `run.output` key.
pub const OUTPUT_ENV: &str = "CAECLUSTER_OUTPUT";

/// Version of the `results.json` layout.
pub const RESULTS_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Pretrain,
    CaeMle,
    DeepIfl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// Directory holding the four standard IDX files.
    Mnist { dir: PathBuf },
    Usps { path: PathBuf },
    Idx { images: PathBuf, labels: Option<PathBuf> },
    /// Synthetic blobs; `seed: None` draws new templates for every run seed.
    Blobs {
        classes: usize,
        per_class: usize,
        image_size: usize,
        sigma: f64,
        seed: Option<u64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub pipeline: Pipeline,
    pub data: DataSource,
    /// Uniform subsample drawn per run seed.
    pub subsample: Option<usize>,
    pub embedding_dim: usize,
    /// Encoder stages; `None` keeps the default three-stage stack.
    pub stages: Option<Vec<ConvStage>>,
    pub pretrain: PretrainConfig,
    pub cluster: ClusterConfig,
    pub folds: usize,
    pub round_budget: f64,
    pub parallel_rounds: bool,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    pub parallel_seeds: bool,
    pub checkpoints: bool,
}

struct Entry {
    value: String,
    used: bool,
}

/// Parsed `section.key → value` pairs, tracking which keys were read.
struct Sections {
    entries: BTreeMap<String, Entry>,
}

impl Sections {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::config(format!("line {}", no + 1), "unterminated section header"))?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", no + 1), "expected `key = value`"))?;
            let key = format!("{section}.{}", k.trim());
            let entry = Entry {
                value: v.trim().to_string(),
                used: false,
            };
            if entries.insert(key.clone(), entry).is_some() {
                return Err(Error::config(key, "given twice"));
            }
        }
        Ok(Sections { entries })
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        self.entries.get_mut(key).map(|e| {
            e.used = true;
            e.value.clone()
        })
    }

    fn get<T: std::str::FromStr>(&mut self, key: &str, what: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::config(key, format!("`{v}` is not {what}"))),
        }
    }

    fn or<T: std::str::FromStr>(&mut self, key: &str, what: &str, default: T) -> Result<T> {
        Ok(self.get(key, what)?.unwrap_or(default))
    }

    fn list<T: std::str::FromStr>(&mut self, key: &str, what: &str) -> Result<Option<Vec<T>>> {
        let Some(v) = self.raw(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(|t| {
                t.trim()
                    .parse()
                    .map_err(|_| Error::config(key, format!("`{}` is not {what}", t.trim())))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    fn bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key).as_deref() {
            None => Ok(default),
            Some("true" | "yes" | "on" | "1") => Ok(true),
            Some("false" | "no" | "off" | "0") => Ok(false),
            Some(v) => Err(Error::config(key, format!("`{v}` is not a boolean"))),
        }
    }

    fn finish(self) -> Result<()> {
        match self.entries.iter().find(|(_, e)| !e.used) {
            Some((k, _)) => Err(Error::config(k.clone(), "unknown key")),
            None => Ok(()),
        }
    }
}

fn positive(key: &str, v: usize) -> Result<usize> {
    if v == 0 {
        Err(Error::config(key, "must be at least 1"))
    } else {
        Ok(v)
    }
}

fn in_range(key: &str, v: f64, lo: f64, hi: f64) -> Result<f64> {
    if v.is_finite() && (lo..=hi).contains(&v) {
        Ok(v)
    } else {
        Err(Error::config(key, format!("{v} is outside [{lo}, {hi}]")))
    }
}

fn optimizer(s: &mut Sections, key: &str) -> Result<OptimizerKind> {
    match s.raw(key).as_deref() {
        None | Some("adam") => Ok(OptimizerKind::ADAM),
        Some("sgd") => Ok(OptimizerKind::Sgd),
        Some(v) => Err(Error::config(key, format!("`{v}` is not adam or sgd"))),
    }
}

impl ExperimentConfig {
    /// Parses config text. Relative data paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut s = Sections::parse(text)?;
        let resolve = |p: String| -> PathBuf {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };

        let name = s.raw("run.name").unwrap_or_else(|| "experiment".into());
        if name.is_empty() || name.contains(['/', '\\']) {
            return Err(Error::config("run.name", "must be a non-empty file name"));
        }
        let pipeline = match s.raw("run.pipeline").as_deref() {
            None | Some("cae_mle") => Pipeline::CaeMle,
            Some("pretrain") => Pipeline::Pretrain,
            Some("deep_ifl") => Pipeline::DeepIfl,
            Some(v) => return Err(Error::config("run.pipeline", format!("`{v}` is not pretrain, cae_mle or deep_ifl"))),
        };
        let seeds: Vec<u64> = s.list("run.seeds", "a seed")?.unwrap_or_else(|| vec![0]);
        if seeds.is_empty() {
            return Err(Error::config("run.seeds", "needs at least one seed"));
        }
        let output = match s.raw("run.output") {
            Some(p) => PathBuf::from(p),
            None => std::env::var_os(OUTPUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"))
                .join(&name),
        };
        let parallel_seeds = s.bool("run.parallel_seeds", false)?;
        let checkpoints = s.bool("run.checkpoints", true)?;

        let data = match s.raw("data.source").as_deref() {
            Some("mnist") => DataSource::Mnist {
                dir: resolve(s.raw("data.path").ok_or_else(|| Error::config("data.path", "required for mnist"))?),
            },
            Some("usps") => DataSource::Usps {
                path: resolve(s.raw("data.path").ok_or_else(|| Error::config("data.path", "required for usps"))?),
            },
            Some("idx") => DataSource::Idx {
                images: resolve(s.raw("data.path").ok_or_else(|| Error::config("data.path", "required for idx"))?),
                labels: s.raw("data.labels").map(resolve),
            },
            Some("blobs") => DataSource::Blobs {
                classes: positive("data.classes", s.or("data.classes", "a count", 3)?)?,
                per_class: positive("data.per_class", s.or("data.per_class", "a count", 60)?)?,
                image_size: positive("data.image_size", s.or("data.image_size", "a size", 12)?)?,
                sigma: in_range("data.sigma", s.or("data.sigma", "a number", 0.1)?, 0.0, f64::MAX)?,
                seed: s.get("data.seed", "a seed")?,
            },
            Some(v) => return Err(Error::config("data.source", format!("`{v}` is not mnist, usps, idx or blobs"))),
            None => return Err(Error::config("data.source", "required")),
        };
        let subsample = s.get::<usize>("data.subsample", "a count")?;
        if let Some(m) = subsample {
            positive("data.subsample", m)?;
        }

        let embedding_dim = positive("model.embedding_dim", s.or("model.embedding_dim", "a dimension", 10)?)?;
        let filters: Option<Vec<usize>> = s.list("model.filters", "a filter count")?;
        let kernels: Option<Vec<usize>> = s.list("model.kernels", "a kernel size")?;
        let strides: Option<Vec<usize>> = s.list("model.strides", "a stride")?;
        let stages = match (filters, kernels, strides) {
            (None, None, None) => None,
            (f, k, st) => {
                let default = CaeConfig::dcec([1, 1, 1]).stages;
                let len = f.as_ref().or(k.as_ref()).or(st.as_ref()).map_or(0, Vec::len);
                let pick = |v: &Option<Vec<usize>>, key: &str, get: fn(&ConvStage) -> usize| -> Result<Vec<usize>> {
                    match v {
                        Some(v) if v.len() == len => Ok(v.clone()),
                        Some(_) => Err(Error::config(key, format!("needs {len} entries like the other stage lists"))),
                        None if len == default.len() => Ok(default.iter().map(get).collect()),
                        None => Err(Error::config(key, format!("needs {len} entries like the other stage lists"))),
                    }
                };
                let f = pick(&f, "model.filters", |c| c.filters)?;
                let k = pick(&k, "model.kernels", |c| c.kernel)?;
                let st = pick(&st, "model.strides", |c| c.stride)?;
                Some(
                    (0..len)
                        .map(|i| ConvStage {
                            filters: f[i],
                            kernel: k[i],
                            stride: st[i],
                        })
                        .collect(),
                )
            }
        };

        let pretrain = PretrainConfig {
            epochs: s.or("pretrain.epochs", "an epoch count", 200)?,
            batch_size: positive("pretrain.batch_size", s.or("pretrain.batch_size", "a batch size", 256)?)?,
            optimizer: optimizer(&mut s, "pretrain.optimizer")?,
            learning_rate: in_range("pretrain.learning_rate", s.or("pretrain.learning_rate", "a number", 1e-3)?, f64::MIN_POSITIVE, 10.0)?,
            target_loss: s.get("pretrain.target_loss", "a number")?,
            seed: 0,
        };

        let defaults = ClusterConfig::default();
        let clusters = s.or("cluster.clusters", "a cluster count", defaults.clusters)?;
        if clusters < 2 {
            return Err(Error::config("cluster.clusters", "needs at least 2 clusters"));
        }
        let ac_refresh = match s.raw("cluster.ac_refresh").as_deref() {
            None => defaults.ac_refresh,
            Some("off" | "none" | "0") => None,
            Some(v) => Some(
                v.parse()
                    .map_err(|_| Error::config("cluster.ac_refresh", format!("`{v}` is not a refresh count or `off`")))?,
            ),
        };
        let mut init = match s.raw("cluster.init").as_deref() {
            None | Some("ward") => CentroidInit::Ward,
            Some("kmeans") => CentroidInit::KMeans,
            Some(v) => return Err(Error::config("cluster.init", format!("`{v}` is not ward or kmeans"))),
        };
        if s.bool("cluster.baseline", false)? {
            init = CentroidInit::KMeans;
        }
        let policy = match s.raw("cluster.distance").as_deref() {
            None | Some("auto") => DistancePolicy::Auto,
            Some("cached") => DistancePolicy::Cached,
            Some("on_the_fly") => DistancePolicy::OnTheFly,
            Some(v) => return Err(Error::config("cluster.distance", format!("`{v}` is not auto, cached or on_the_fly"))),
        };
        let mut cluster = ClusterConfig {
            clusters,
            gamma: in_range("cluster.gamma", s.or("cluster.gamma", "a number", defaults.gamma)?, 0.0, 1e6)?,
            update_interval: positive("cluster.update_interval", s.or("cluster.update_interval", "an iteration count", defaults.update_interval)?)?,
            tol: in_range("cluster.tol", s.or("cluster.tol", "a number", defaults.tol)?, -1.0, 1.0)?,
            max_iter: s.or("cluster.max_iter", "an iteration count", defaults.max_iter)?,
            batch_size: positive("cluster.batch_size", s.or("cluster.batch_size", "a batch size", defaults.batch_size)?)?,
            optimizer: optimizer(&mut s, "cluster.optimizer")?,
            learning_rate: in_range("cluster.learning_rate", s.or("cluster.learning_rate", "a number", defaults.learning_rate)?, f64::MIN_POSITIVE, 10.0)?,
            ac_refresh,
            init,
            ..defaults
        };
        cluster.agglomerate.policy = policy;
        cluster.agglomerate.subsample = s.get("cluster.ward_subsample", "a count")?;

        let folds = s.or("ifl.folds", "a fold count", 10)?;
        if folds < 2 {
            return Err(Error::config("ifl.folds", "needs at least 2 folds"));
        }
        let round_budget = in_range("ifl.round_budget", s.or("ifl.round_budget", "a number", 0.5)?, 1e-6, 1.0)?;
        let parallel_rounds = s.bool("ifl.parallel", false)?;

        s.finish()?;
        Ok(ExperimentConfig {
            name,
            pipeline,
            data,
            subsample,
            embedding_dim,
            stages,
            pretrain,
            cluster,
            folds,
            round_budget,
            parallel_rounds,
            seeds,
            output,
            parallel_seeds,
            checkpoints,
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Loads the dataset a run seed sees: blob templates and the optional
    /// subsample depend on `seed`.
    pub fn load_data(&self, seed: u64) -> Result<Dataset> {
        let full = match &self.data {
            DataSource::Mnist { dir } => data::load_mnist(dir)?,
            DataSource::Usps { path } => data::load_usps(path)?,
            DataSource::Idx { images, labels } => data::load_idx(images, labels.as_deref())?,
            DataSource::Blobs {
                classes,
                per_class,
                image_size,
                sigma,
                seed: fixed,
            } => data::make_synthetic_blobs(*classes, *per_class, *image_size, *sigma, fixed.unwrap_or(seed))?,
        };
        match self.subsample {
            Some(m) if m < full.len() => full.subsample(m, seed),
            _ => Ok(full),
        }
    }

    pub fn cae_config(&self, input: [usize; 3], seed: u64) -> CaeConfig {
        let mut cfg = CaeConfig::dcec(input).with_seed(seed);
        cfg.embedding_dim = self.embedding_dim;
        if let Some(st) = &self.stages {
            cfg.stages = st.clone();
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub instances: usize,
    pub shape: [usize; 3],
    pub classes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// `None` when the seed ran to completion.
    pub error: Option<String>,
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
    /// Last pretraining epoch loss.
    pub pretrain_loss: Option<f64>,
    /// Last recorded clustering-stage losses.
    pub reconstruction_loss: Option<f64>,
    pub clustering_loss: Option<f64>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    pub reanchors: Option<usize>,
    pub seconds: f64,
    pub dataset: Option<DatasetInfo>,
    /// Files written for this seed, relative to the run directory.
    pub artifacts: Vec<String>,
}

impl SeedResult {
    fn failed(seed: u64, err: &Error, seconds: f64) -> Self {
        SeedResult {
            seed,
            error: Some(err.to_string()),
            acc: None,
            nmi: None,
            pretrain_loss: None,
            reconstruction_loss: None,
            clustering_loss: None,
            iterations: None,
            converged: None,
            reanchors: None,
            seconds,
            dataset: None,
            artifacts: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Stat {
            mean,
            std,
            count: values.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub acc: Option<Stat>,
    pub nmi: Option<Stat>,
    pub seconds: f64,
}

impl Aggregate {
    pub fn from_seeds(seeds: &[SeedResult]) -> Self {
        let acc: Vec<f64> = seeds.iter().filter_map(|s| s.acc).collect();
        let nmi: Vec<f64> = seeds.iter().filter_map(|s| s.nmi).collect();
        Aggregate {
            acc: Stat::of(&acc),
            nmi: Stat::of(&nmi),
            seconds: seeds.iter().map(|s| s.seconds).sum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub schema: u32,
    pub name: String,
    pub pipeline: Pipeline,
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedResult>,
    pub aggregate: Aggregate,
    /// Absolute run directory; per-seed artifact paths are relative to it.
    pub output: PathBuf,
}

impl RunResult {
    pub fn failures(&self) -> usize {
        self.seeds.iter().filter(|s| s.error.is_some()).count()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Per-seed rows followed by `mean ± std`.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut out = format!("{:<8} {:>8} {:>8} {:>10}\n", "seed", "ACC", "NMI", "seconds");
        for s in &self.seeds {
            match &s.error {
                None => {
                    let _ = writeln!(out, "{:<8} {:>8} {:>8} {:>10.1}", s.seed, fmt(s.acc), fmt(s.nmi), s.seconds);
                }
                Some(e) => {
                    let _ = writeln!(out, "{:<8} failed: {e}", s.seed);
                }
            }
        }
        let stat = |s: Option<Stat>| s.map_or("-".to_string(), |s| format!("{:.4} ± {:.4}", s.mean, s.std));
        let _ = writeln!(out, "ACC {}  NMI {}", stat(self.aggregate.acc), stat(self.aggregate.nmi));
        out
    }
}

fn write_labels_csv(path: &Path, clusters: &[usize], truth: Option<&[usize]>) -> Result<()> {
    let mut out = String::from(if truth.is_some() { "instance,cluster,label\n" } else { "instance,cluster\n" });
    for (i, &c) in clusters.iter().enumerate() {
        match truth {
            Some(y) => {
                let _ = writeln!(out, "{i},{c},{}", y[i]);
            }
            None => {
                let _ = writeln!(out, "{i},{c}");
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Runs one seed, writing its artifacts under `run_dir/seed-<seed>/`.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, run_dir: &Path) -> Result<SeedResult> {
    let start = Instant::now();
    let data = cfg.load_data(seed)?;
    let info = DatasetInfo {
        name: data.name.clone(),
        instances: data.len(),
        shape: data.image_shape(),
        classes: data.classes(),
    };
    let rel_dir = format!("seed-{seed}");
    let dir = run_dir.join(&rel_dir);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut artifacts = Vec::new();
    let mut record = |name: &str| -> PathBuf {
        artifacts.push(format!("{rel_dir}/{name}"));
        dir.join(name)
    };

    let cae = cfg.cae_config(data.image_shape(), seed);
    let pretrain = PretrainConfig {
        seed,
        ..cfg.pretrain.clone()
    };
    let cluster = ClusterConfig {
        seed,
        ..cfg.cluster.clone()
    };
    log::info!("seed {seed}: {:?} on {} ({} instances)", cfg.pipeline, info.name, info.instances);

    let (model, outcome) = match cfg.pipeline {
        Pipeline::Pretrain | Pipeline::CaeMle => {
            let mut model = CaeModel::build(&cae)?;
            model.pretrain(&data.images, &pretrain)?;
            let outcome = if cfg.pipeline == Pipeline::CaeMle {
                Some(clustering::train_cae_mle(&mut model, &data.images, &cluster)?)
            } else {
                None
            };
            (model, outcome)
        }
        Pipeline::DeepIfl => {
            let ifl_cfg = IflConfig {
                folds: cfg.folds,
                round_budget: cfg.round_budget,
                parallel: cfg.parallel_rounds,
                ..IflConfig::new(cae, pretrain, cluster)
            };
            let out = ifl::deep_ifl(&data.images, &ifl_cfg)?;
            ifl::write_features_csv(&record("features.csv"), &out.features.folding, &out.features.raw)?;
            (out.model, Some(out.clustering))
        }
    };

    write_loss_history(&record("pretrain_loss.csv"), model.history())?;
    if cfg.checkpoints {
        model.save(&record("model.json"))?;
    }
    let mut result = SeedResult {
        seed,
        error: None,
        acc: None,
        nmi: None,
        pretrain_loss: model.history().last().copied(),
        reconstruction_loss: None,
        clustering_loss: None,
        iterations: None,
        converged: None,
        reanchors: None,
        seconds: 0.0,
        dataset: Some(info),
        artifacts: Vec::new(),
    };
    if let Some(out) = outcome {
        clustering::write_history(&record("history.csv"), &out.history)?;
        write_labels_csv(&record("labels.csv"), &out.labels, data.labels.as_deref())?;
        if let Some(y) = &data.labels {
            result.acc = Some(metrics::acc(y, &out.labels)?);
            result.nmi = Some(metrics::nmi(y, &out.labels)?);
        }
        let last = out.history.last();
        result.reconstruction_loss = last.map(|h| h.reconstruction);
        result.clustering_loss = last.map(|h| h.clustering);
        result.iterations = Some(out.iterations);
        result.converged = Some(out.converged);
        result.reanchors = Some(out.reanchors);
    }
    result.artifacts = artifacts;
    result.seconds = start.elapsed().as_secs_f64();
    Ok(result)
}

/// Runs every seed, then writes `results.json` and `summary.csv` into the
/// run directory. A failing seed is recorded and the others still run.
pub fn run(cfg: &ExperimentConfig) -> Result<RunResult> {
    fs::create_dir_all(&cfg.output).map_err(|e| Error::io(&cfg.output, e))?;
    let run_dir = fs::canonicalize(&cfg.output).map_err(|e| Error::io(&cfg.output, e))?;
    let one = |&seed: &u64| {
        let start = Instant::now();
        run_seed(cfg, seed, &run_dir).unwrap_or_else(|e| {
            log::error!("seed {seed} failed: {e}");
            SeedResult::failed(seed, &e, start.elapsed().as_secs_f64())
        })
    };
    let seeds: Vec<SeedResult> = if cfg.parallel_seeds {
        cfg.seeds.par_iter().map(one).collect()
    } else {
        cfg.seeds.iter().map(one).collect()
    };
    let result = RunResult {
        schema: RESULTS_SCHEMA,
        name: cfg.name.clone(),
        pipeline: cfg.pipeline,
        config: cfg.clone(),
        aggregate: Aggregate::from_seeds(&seeds),
        seeds,
        output: run_dir.clone(),
    };
    let json = run_dir.join("results.json");
    fs::write(&json, serde_json::to_string_pretty(&result)?).map_err(|e| Error::io(&json, e))?;
    write_summary_csv(&run_dir.join("summary.csv"), &result)?;
    Ok(result)
}

fn write_summary_csv(path: &Path, result: &RunResult) -> Result<()> {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let mut out = String::from("seed,status,acc,nmi,iterations,converged,seconds\n");
    for s in &result.seeds {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.seed,
            if s.error.is_some() { "failed" } else { "ok" },
            opt(s.acc),
            opt(s.nmi),
            s.iterations.map_or(String::new(), |v| v.to_string()),
            s.converged.map_or(String::new(), |v| v.to_string()),
            s.seconds
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedDelta {
    pub seed: u64,
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
}

/// `candidate − baseline` on every metric both runs report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub candidate: String,
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
    pub per_seed: Vec<SeedDelta>,
}

impl Comparison {
    pub fn render(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:+.4}"));
        let mut out = format!("{} → {}\n", self.baseline, self.candidate);
        for d in &self.per_seed {
            let _ = writeln!(out, "seed {:<6} ACC {:>8}  NMI {:>8}", d.seed, fmt(d.acc), fmt(d.nmi));
        }
        let _ = writeln!(out, "mean        ACC {:>8}  NMI {:>8}", fmt(self.acc), fmt(self.nmi));
        out
    }
}

fn dataset_of(r: &RunResult) -> Option<(&str, usize)> {
    r.seeds
        .iter()
        .find_map(|s| s.dataset.as_ref())
        .map(|d| (d.name.as_str(), d.instances))
}

pub fn compare(baseline: &RunResult, candidate: &RunResult) -> Result<Comparison> {
    if dataset_of(baseline) != dataset_of(candidate) {
        return Err(Error::InvalidArgument(format!(
            "runs used different data: {:?} vs {:?}",
            dataset_of(baseline),
            dataset_of(candidate)
        )));
    }
    let seeds_of = |r: &RunResult| r.seeds.iter().map(|s| s.seed).collect::<Vec<_>>();
    let (mut a, mut b) = (seeds_of(baseline), seeds_of(candidate));
    a.sort_unstable();
    b.sort_unstable();
    if a != b {
        return Err(Error::InvalidArgument(format!("seed lists differ: {a:?} vs {b:?}")));
    }
    let delta = |x: Option<f64>, y: Option<f64>| Some(y? - x?);
    let per_seed = baseline
        .seeds
        .iter()
        .map(|bs| {
            let cs = candidate.seeds.iter().find(|c| c.seed == bs.seed).expect("same seed sets");
            SeedDelta {
                seed: bs.seed,
                acc: delta(bs.acc, cs.acc),
                nmi: delta(bs.nmi, cs.nmi),
            }
        })
        .collect();
    let mean = |s: Option<Stat>| s.map(|s| s.mean);
    Ok(Comparison {
        baseline: baseline.name.clone(),
        candidate: candidate.name.clone(),
        acc: delta(mean(baseline.aggregate.acc), mean(candidate.aggregate.acc)),
        nmi: delta(mean(baseline.aggregate.nmi), mean(candidate.aggregate.nmi)),
        per_seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub instances: usize,
    pub acc: f64,
    pub nmi: f64,
}

/// Scores a CSV holding ground truth and cluster ids. The header must name
/// a `label` (or `y`) column and a `cluster` (or `c`) column; other columns
/// are ignored.
pub fn metrics_from_csv(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |offset: usize, reason: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').map(str::trim).collect();
    let find = |names: [&str; 2]| header.iter().position(|h| names.contains(h));
    let (Some(yi), Some(ci)) = (find(["label", "y"]), find(["cluster", "c"])) else {
        return Err(bad(0, "header needs `label` and `cluster` columns".into()));
    };
    let mut offset = header.join(",").len() + 1;
    let (mut y, mut c) = (Vec::new(), Vec::new());
    for (row, line) in lines.enumerate() {
        if !line.trim().is_empty() {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            let cell = |i: usize| -> Result<usize> {
                cells
                    .get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(offset, format!("row {}: column {} is not a class id", row + 1, i + 1)))
            };
            y.push(cell(yi)?);
            c.push(cell(ci)?);
        }
        offset += line.len() + 1;
    }
    Ok(MetricsReport {
        instances: y.len(),
        acc: metrics::acc(&y, &c)?,
        nmi: metrics::nmi(&y, &c)?,
    })
}
