//! Deep inverse feature learning on top of CAE-MLE.
//!
//! The data is split into `r` inner folds. For each fold a fresh model is
//! trained (pretraining plus CAE-MLE) on the other `r - 1` folds only, and
//! the held-out fold is embedded with that model. Every held-out instance is
//! then described by how it relates to the clusters found without it.
//! Cluster ids are aligned across rounds (see [`align_rounds`]) so that
//! column `w_j` refers to the same group for every instance:
//!
//! * `confidence`: size fraction of its closest cluster,
//! * `weight_j`: Euclidean distance from its embedding to centroid `j`,
//! * `weight_closest`: the smallest of those distances.
//!
//! The resulting `n × (s + 2)` block is min-max scaled onto `[-2.5, 2.5]`
//! per column. The final stage trains CAE-MLE on the full images with the
//! scaled block concatenated onto the embedding ahead of the clustering
//! layer.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cae::{CaeConfig, CaeModel, PretrainConfig};
use crate::clustering::{self, ClusterConfig, ClusterOutcome};
use crate::error::{Error, Result};
use crate::metrics::hungarian;
use crate::tensor::{sq_dist, Tensor};

/// Half-width of the interval IFL features are scaled onto.
pub const FEATURE_RANGE: f64 = 2.5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InnerFolding {
    pub r: usize,
    pub seed: u64,
    /// Fold of every instance.
    pub assignment: Vec<usize>,
}

impl InnerFolding {
    /// Instances held out in `fold`, ascending.
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == fold).collect()
    }

    /// Instances used for training in `fold`, ascending.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] != fold).collect()
    }
}

/// Balanced seeded partition of `0..n` into `r` folds.
pub fn inner_folds(n: usize, r: usize, seed: u64) -> Result<InnerFolding> {
    if r < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {r}")));
    }
    if n < r {
        return Err(Error::InvalidArgument(format!("{n} instances cannot fill {r} folds")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        assignment[i] = pos % r;
    }
    Ok(InnerFolding { r, seed, assignment })
}

/// Error-representation features of one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorFeatures {
    pub confidence: f64,
    pub weights: Vec<f64>,
    pub closest: usize,
    pub weight_closest: f64,
}

impl ErrorFeatures {
    /// `[confidence, w_1, ..., w_s, w_closest]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.weights.len() + 2);
        v.push(self.confidence);
        v.extend_from_slice(&self.weights);
        v.push(self.weight_closest);
        v
    }
}

pub fn extract_error_features(z: &[f64], sizes: &[usize], mu: &Tensor) -> Result<ErrorFeatures> {
    if mu.shape().len() != 2 || mu.row_len() != z.len() || mu.rows() != sizes.len() || sizes.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "embedding of length {}, centroids {:?}, {} cluster sizes",
            z.len(),
            mu.shape(),
            sizes.len()
        )));
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("clusters have no members".into()));
    }
    let weights: Vec<f64> = mu.iter_rows().map(|m| sq_dist(z, m).sqrt()).collect();
    let mut closest = 0;
    for (j, &w) in weights.iter().enumerate() {
        if w < weights[closest] {
            closest = j;
        }
    }
    Ok(ErrorFeatures {
        confidence: sizes[closest] as f64 / total as f64,
        weight_closest: weights[closest],
        weights,
        closest,
    })
}

/// Per-column min-max map onto `[-2.5, 2.5]`; constant columns map to 0.
/// Returns the scaled matrix and each column's `(min, max)`.
pub fn normalize_features(block: &Tensor) -> (Tensor, Vec<(f64, f64)>) {
    let w = block.row_len();
    let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); w];
    for row in block.iter_rows() {
        for (r, &v) in ranges.iter_mut().zip(row) {
            r.0 = r.0.min(v);
            r.1 = r.1.max(v);
        }
    }
    let mut out = block.clone();
    for row in out.data_mut().chunks_mut(w) {
        for (v, &(lo, hi)) in row.iter_mut().zip(&ranges) {
            *v = if hi > lo {
                -FEATURE_RANGE + (*v - lo) * (2.0 * FEATURE_RANGE) / (hi - lo)
            } else {
                0.0
            };
        }
    }
    (out, ranges)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IflConfig {
    pub folds: usize,
    pub cae: CaeConfig,
    pub pretrain: PretrainConfig,
    pub cluster: ClusterConfig,
    /// Fraction of the pretraining epochs and clustering iterations given to
    /// each inner round.
    pub round_budget: f64,
    /// Run the inner rounds on the rayon pool.
    pub parallel: bool,
    /// Master seed; per-round seeds and the fold assignment derive from it.
    pub seed: u64,
}

impl IflConfig {
    pub fn new(cae: CaeConfig, pretrain: PretrainConfig, cluster: ClusterConfig) -> Self {
        IflConfig {
            folds: 10,
            seed: cae.seed,
            cae,
            pretrain,
            cluster,
            round_budget: 0.5,
            parallel: false,
        }
    }

    /// Seed for inner round `fold`, independent of execution order.
    pub fn round_seed(&self, fold: usize) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fold as u64 + 1);
        rng.next_u64()
    }

    fn scaled(&self, count: usize) -> usize {
        ((count as f64 * self.round_budget).ceil() as usize).max(1)
    }
}

/// What one inner round produces.
#[derive(Clone, Debug)]
pub struct RoundOutput {
    pub model: CaeModel,
    /// Inner-train cluster labels.
    pub labels: Vec<usize>,
    pub sizes: Vec<usize>,
    pub mu: Tensor,
    /// Embeddings of the inner-test instances.
    pub z_test: Tensor,
}

/// Trains on `train` only, then embeds `test`.
pub fn run_inner_round(train: &Tensor, test: &Tensor, cfg: &IflConfig, seed: u64) -> Result<RoundOutput> {
    let mut model = CaeModel::build(&cfg.cae.clone().with_seed(seed))?;
    let pretrain = PretrainConfig {
        epochs: cfg.scaled(cfg.pretrain.epochs),
        seed,
        ..cfg.pretrain.clone()
    };
    model.pretrain(train, &pretrain)?;
    let cluster = ClusterConfig {
        max_iter: cfg.scaled(cfg.cluster.max_iter),
        seed,
        ..cfg.cluster.clone()
    };
    let outcome = clustering::train_cae_mle(&mut model, train, &cluster)?;
    let mut sizes = vec![0usize; cluster.clusters];
    for &l in &outcome.labels {
        sizes[l] += 1;
    }
    let z_test = model.encode(test)?;
    Ok(RoundOutput {
        model,
        labels: outcome.labels,
        sizes,
        mu: outcome.state.mu,
        z_test,
    })
}

#[derive(Clone, Debug)]
pub struct IflFeatureBlock {
    pub folding: InnerFolding,
    /// `n × (s + 2)` before scaling.
    pub raw: Tensor,
    pub normalized: Tensor,
    /// Column `(min, max)` used for scaling.
    pub ranges: Vec<(f64, f64)>,
    /// Closest inner-train cluster of every instance.
    pub closest: Vec<usize>,
}

impl IflFeatureBlock {
    pub fn width(&self) -> usize {
        self.raw.row_len()
    }
}

/// Runs all inner rounds and assembles the feature block.
pub fn compute_ifl_features(images: &Tensor, cfg: &IflConfig) -> Result<IflFeatureBlock> {
    let n = images.rows();
    let folding = inner_folds(n, cfg.folds, cfg.seed)?;
    let round = |fold: usize| -> Result<RoundOutput> {
        let train = images.select_rows(&folding.train_indices(fold));
        let test = images.select_rows(&folding.test_indices(fold));
        let out = run_inner_round(&train, &test, cfg, cfg.round_seed(fold)).map_err(|e| Error::Fold {
            fold,
            source: Box::new(e),
        })?;
        log::info!("inner fold {fold}: {} held-out instances embedded", out.z_test.rows());
        Ok(out)
    };
    let mut rounds: Vec<RoundOutput> = if cfg.parallel {
        (0..cfg.folds).into_par_iter().map(round).collect::<Result<_>>()?
    } else {
        (0..cfg.folds).map(round).collect::<Result<_>>()?
    };
    align_rounds(&folding, &mut rounds);

    let width = cfg.cluster.clusters + 2;
    let mut raw = Tensor::zeros(&[n, width]);
    let mut closest = vec![0; n];
    for (fold, out) in rounds.iter().enumerate() {
        for (i, z) in folding.test_indices(fold).into_iter().zip(out.z_test.iter_rows()) {
            let f = extract_error_features(z, &out.sizes, &out.mu).map_err(|e| Error::Fold {
                fold,
                source: Box::new(e),
            })?;
            raw.row_mut(i).copy_from_slice(&f.to_vec());
            closest[i] = f.closest;
        }
    }
    let (normalized, ranges) = normalize_features(&raw);
    Ok(IflFeatureBlock {
        folding,
        raw,
        normalized,
        ranges,
        closest,
    })
}

/// Renumbers the clusters of rounds `1..r` so that cluster `j` means the
/// same group in every round. Two rounds share all training instances
/// outside their two held-out folds; each round's labels are matched to
/// round 0's on those shared instances by maximum overlap.
pub fn align_rounds(folding: &InnerFolding, rounds: &mut [RoundOutput]) {
    let Some((first, rest)) = rounds.split_first_mut() else {
        return;
    };
    let n = folding.assignment.len();
    let mut reference = vec![None; n];
    for (&i, &l) in folding.train_indices(0).iter().zip(&first.labels) {
        reference[i] = Some(l);
    }
    let s = first.sizes.len();
    for (k, out) in rest.iter_mut().enumerate() {
        let mut overlap = vec![vec![0.0; s]; s];
        for (&i, &l) in folding.train_indices(k + 1).iter().zip(&out.labels) {
            if let Some(r) = reference[i] {
                overlap[l][r] -= 1.0;
            }
        }
        // new_of_old[l] is the reference id for this round's cluster l
        let new_of_old = hungarian(&overlap);
        let mut old_of_new = vec![0; s];
        for (l, &r) in new_of_old.iter().enumerate() {
            old_of_new[r] = l;
        }
        out.mu = out.mu.select_rows(&old_of_new);
        out.sizes = old_of_new.iter().map(|&l| out.sizes[l]).collect();
        for l in &mut out.labels {
            *l = new_of_old[*l];
        }
    }
}

#[derive(Clone, Debug)]
pub struct IflOutcome {
    pub features: IflFeatureBlock,
    pub model: CaeModel,
    pub clustering: ClusterOutcome,
}

impl IflOutcome {
    pub fn labels(&self) -> &[usize] {
        &self.clustering.labels
    }
}

/// Inner rounds, feature block, then CAE-MLE on the images with the scaled
/// block appended to the embedding.
pub fn deep_ifl(images: &Tensor, cfg: &IflConfig) -> Result<IflOutcome> {
    let features = compute_ifl_features(images, cfg)?;
    let mut model = CaeModel::build(&cfg.cae)?;
    model.pretrain(images, &cfg.pretrain)?;
    let clustering = clustering::train_cae_mle_with_side(&mut model, images, Some(&features.normalized), &cfg.cluster)?;
    Ok(IflOutcome {
        features,
        model,
        clustering,
    })
}

/// Writes `instance,fold,confidence,w_1..w_s,w_closest` rows.
pub fn write_features_csv(path: &Path, folding: &InnerFolding, block: &Tensor) -> Result<()> {
    let s = block.row_len().saturating_sub(2);
    let mut out = String::from("instance,fold,confidence");
    for j in 1..=s {
        let _ = write!(out, ",w_{j}");
    }
    out.push_str(",w_closest\n");
    for (i, row) in block.iter_rows().enumerate() {
        let _ = write!(out, "{i},{}", folding.assignment[i]);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
