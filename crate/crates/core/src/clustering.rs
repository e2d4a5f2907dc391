//! Embedded clustering: Student-t soft assignment, the sharpened target
//! distribution, the KL clustering loss, and the joint trainer that
//! optimizes `L = L_r + γ L_c` with Ward-initialized centroids.
//!
//! Per mini-batch of `B` images, `L_r` is the batch-mean reconstruction
//! error and `L_c` the batch-mean of the per-instance KL terms, so both parts
//! scale the same way with `B`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cae::CaeModel;
use crate::error::{Error, Result};
use crate::metrics::hungarian;
use crate::nn::{mse_loss, Optimizer, OptimizerKind};
use crate::tensor::{sq_dist, Tensor};
use crate::ward::{self, AgglomerateOptions, FlatClustering};

fn check_pair(z: &Tensor, mu: &Tensor) -> Result<()> {
    if z.shape().len() != 2 || mu.shape().len() != 2 || z.shape()[1] != mu.shape()[1] {
        return Err(Error::DimensionMismatch(format!(
            "embeddings {:?} vs centroids {:?}",
            z.shape(),
            mu.shape()
        )));
    }
    Ok(())
}

/// `q_ij = (1 + ||z_i - μ_j||²)⁻¹` normalized over clusters `j`.
pub fn soft_assign(z: &Tensor, mu: &Tensor) -> Result<Tensor> {
    check_pair(z, mu)?;
    let s = mu.rows();
    let mut q = Tensor::zeros(&[z.rows(), s]);
    for (zi, row) in z.iter_rows().zip(q.data_mut().chunks_mut(s)) {
        for (j, v) in row.iter_mut().enumerate() {
            *v = 1.0 / (1.0 + sq_dist(zi, mu.row(j)));
        }
        let total: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(q)
}

/// `p_ij ∝ q_ij² / f_j` with column mass `f_j = Σ_i q_ij`, rows normalized.
pub fn target_distribution(q: &Tensor) -> Result<Tensor> {
    if q.shape().len() != 2 {
        return Err(Error::InvalidShape {
            shape: q.shape().to_vec(),
            reason: "Q must be n × s".into(),
        });
    }
    let s = q.row_len();
    let mut f = vec![0.0; s];
    for row in q.iter_rows() {
        for (acc, v) in f.iter_mut().zip(row) {
            *acc += v;
        }
    }
    if let Some(j) = f.iter().position(|&m| !(m > 0.0)) {
        return Err(Error::Invariant(format!("column {j} of Q has no mass")));
    }
    let mut p = q.clone();
    for row in p.data_mut().chunks_mut(s) {
        for (v, fj) in row.iter_mut().zip(&f) {
            *v = *v * *v / fj;
        }
        let total: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(p)
}

/// `Σ_i Σ_j p_ij log(p_ij / q_ij)` with `0 log 0 = 0`.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::DimensionMismatch(format!("P {:?} vs Q {:?}", p.shape(), q.shape())));
    }
    Ok(p
        .data()
        .iter()
        .zip(q.data())
        .filter(|(pv, _)| **pv > 0.0)
        .map(|(pv, qv)| pv * (pv / qv).ln())
        .sum())
}

#[derive(Clone, Debug)]
pub struct KlLoss {
    /// Summed over instances.
    pub loss: f64,
    pub q: Tensor,
    pub grad_z: Tensor,
    pub grad_mu: Tensor,
}

/// KL(P ‖ Q(z, μ)) with P held constant, and its gradients
///
/// `∂L/∂z_i = 2 Σ_j (1 + d_ij)⁻¹ (p_ij - q_ij)(z_i - μ_j)` and
/// `∂L/∂μ_j = -2 Σ_i (1 + d_ij)⁻¹ (p_ij - q_ij)(z_i - μ_j)`,
///
/// which assume every row of P sums to one.
pub fn kl_loss(p: &Tensor, z: &Tensor, mu: &Tensor) -> Result<KlLoss> {
    let q = soft_assign(z, mu)?;
    let loss = kl_divergence(p, &q)?;
    let (s, d) = (mu.rows(), mu.row_len());
    let mut grad_z = Tensor::zeros(z.shape());
    let mut grad_mu = Tensor::zeros(mu.shape());
    for i in 0..z.rows() {
        let zi = z.row(i);
        for j in 0..s {
            let mj = mu.row(j);
            let k = 1.0 / (1.0 + sq_dist(zi, mj));
            let c = 2.0 * k * (p.data()[i * s + j] - q.data()[i * s + j]);
            for t in 0..d {
                let g = c * (zi[t] - mj[t]);
                grad_z.data_mut()[i * d + t] += g;
                grad_mu.data_mut()[j * d + t] -= g;
            }
        }
    }
    Ok(KlLoss {
        loss,
        q,
        grad_z,
        grad_mu,
    })
}

/// Row-wise argmax, ties to the lowest index.
pub fn hard_labels(q: &Tensor) -> Vec<usize> {
    q.iter_rows()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Checks that every row of `m` sums to one within `1e-9` and that entries
/// lie in `[0, 1]` (`(0, 1]` when `strict`).
pub fn check_row_stochastic(name: &str, m: &Tensor, strict: bool) -> Result<()> {
    for (i, row) in m.iter_rows().enumerate() {
        let total: f64 = row.iter().sum();
        let bad_entry = row
            .iter()
            .any(|&v| !(v <= 1.0) || if strict { !(v > 0.0) } else { !(v >= 0.0) });
        if (total - 1.0).abs() > 1e-9 || bad_entry {
            return Err(Error::Invariant(format!("row {i} of {name} is not a distribution (sum {total})")));
        }
    }
    Ok(())
}

/// Concatenates optional side features onto the embedding.
fn augment(z: Tensor, side: Option<&Tensor>) -> Result<Tensor> {
    match side {
        None => Ok(z),
        Some(s) => Tensor::hstack(&z, s),
    }
}

/// Losses of one evaluation of the joint objective on a mini-batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointLoss {
    pub reconstruction: f64,
    pub clustering: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct JointGradients {
    pub loss: JointLoss,
    /// Encoder parameters followed by decoder parameters.
    pub params: Vec<Tensor>,
    pub mu: Tensor,
}

/// `L = L_r + γ L_c` on batch `x` against targets `p`, without gradients.
pub fn joint_loss(model: &CaeModel, mu: &Tensor, x: &Tensor, p: &Tensor, gamma: f64, side: Option<&Tensor>) -> Result<JointLoss> {
    let z = model.encoder().apply(x)?;
    let x_rec = model.decoder().apply(&z)?;
    let (l_r, _) = mse_loss(x, &x_rec)?;
    let q = soft_assign(&augment(z, side)?, mu)?;
    let l_c = kl_divergence(p, &q)? / x.rows() as f64;
    Ok(JointLoss {
        reconstruction: l_r,
        clustering: l_c,
        total: l_r + gamma * l_c,
    })
}

/// Gradients of [`joint_loss`] with respect to every network parameter and
/// the centroids. Side features only enter the clustering term and receive
/// no gradient.
pub fn joint_gradients(
    model: &CaeModel,
    mu: &Tensor,
    x: &Tensor,
    p: &Tensor,
    gamma: f64,
    side: Option<&Tensor>,
) -> Result<JointGradients> {
    let b = x.rows() as f64;
    let d = model.embedding_dim();
    let (z, enc_ctx) = model.encoder().forward(x)?;
    let (x_rec, dec_ctx) = model.decoder().forward(&z)?;
    let (l_r, g_rec) = mse_loss(x, &x_rec)?;
    let (mut g_z, dec_grads) = model.decoder().backward(&g_rec, &dec_ctx)?;
    let kl = kl_loss(p, &augment(z, side)?, mu)?;
    let width = kl.grad_z.row_len();
    for (i, row) in g_z.data_mut().chunks_mut(d).enumerate() {
        for (g, k) in row.iter_mut().zip(&kl.grad_z.data()[i * width..i * width + d]) {
            *g += gamma / b * k;
        }
    }
    let (_, mut params) = model.encoder().backward(&g_z, &enc_ctx)?;
    params.extend(dec_grads);
    let mut grad_mu = kl.grad_mu;
    grad_mu.scale(gamma / b);
    let l_c = kl.loss / b;
    Ok(JointGradients {
        loss: JointLoss {
            reconstruction: l_r,
            clustering: l_c,
            total: l_r + gamma * l_c,
        },
        params,
        mu: grad_mu,
    })
}

/// How the centroids are first placed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentroidInit {
    /// Ward agglomerative clustering of the embedding.
    #[default]
    Ward,
    /// k-means on the embedding, the DCEC baseline.
    KMeans,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub clusters: usize,
    pub gamma: f64,
    /// Mini-batch iterations between target refreshes.
    pub update_interval: usize,
    /// Stop once fewer than this fraction of labels change between refreshes.
    pub tol: f64,
    pub max_iter: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Re-anchor μ to fresh Ward centroids every this many refreshes.
    pub ac_refresh: Option<usize>,
    pub init: CentroidInit,
    pub agglomerate: AgglomerateOptions,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            clusters: 10,
            gamma: 0.1,
            update_interval: 140,
            tol: 0.001,
            max_iter: 20_000,
            batch_size: 256,
            optimizer: OptimizerKind::ADAM,
            learning_rate: 1e-3,
            ac_refresh: Some(5),
            init: CentroidInit::Ward,
            agglomerate: AgglomerateOptions::default(),
            seed: 0,
        }
    }
}

/// Trainable clustering head plus the latest full-data assignments.
#[derive(Clone, Debug)]
pub struct ClusteringState {
    /// `s × (d + side width)`.
    pub mu: Tensor,
    pub gamma: f64,
    pub q: Tensor,
    pub p: Tensor,
    pub labels: Vec<usize>,
    pub refreshes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    /// Mean batch reconstruction loss since the previous refresh (full-data
    /// loss on the first row).
    pub reconstruction: f64,
    /// Full-data mean KL at this refresh.
    pub clustering: f64,
    pub total: f64,
    pub label_change: f64,
}

#[derive(Clone, Debug)]
pub struct ClusterOutcome {
    pub labels: Vec<usize>,
    pub state: ClusteringState,
    /// Centroids right after initialization.
    pub initial_mu: Tensor,
    pub history: Vec<HistoryRow>,
    pub iterations: usize,
    pub converged: bool,
    pub reanchors: usize,
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut out = String::from("iteration,L_r,L_c,L,label_change\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.iteration, r.reconstruction, r.clustering, r.total, r.label_change
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Lloyd's algorithm from k-means++ seeds, best inertia over `restarts`.
pub fn kmeans(points: &Tensor, s: usize, restarts: usize, seed: u64) -> Result<FlatClustering> {
    let n = points.rows();
    if s == 0 || s > n {
        return Err(Error::InvalidArgument(format!("cannot split {n} points into {s} clusters")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts.max(1) {
        // k-means++ seeding
        let mut centers = vec![points.row(rng.random_range(0..n)).to_vec()];
        let mut d2: Vec<f64> = points.iter_rows().map(|r| sq_dist(r, &centers[0])).collect();
        while centers.len() < s {
            let total: f64 = d2.iter().sum();
            let next = if total > 0.0 {
                let mut t = rng.random_range(0.0..total);
                let mut pick = n - 1;
                for (i, &w) in d2.iter().enumerate() {
                    if t < w {
                        pick = i;
                        break;
                    }
                    t -= w;
                }
                pick
            } else {
                rng.random_range(0..n)
            };
            centers.push(points.row(next).to_vec());
            for (i, r) in points.iter_rows().enumerate() {
                d2[i] = d2[i].min(sq_dist(r, centers.last().expect("non-empty")));
            }
        }
        let mut mu = Tensor::from_rows(&centers)?;
        let mut labels = vec![usize::MAX; n];
        for _ in 0..300 {
            let mut changed = false;
            for (i, r) in points.iter_rows().enumerate() {
                let l = ward::nearest_row(&mu, r);
                if labels[i] != l {
                    labels[i] = l;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            // an emptied cluster takes the point farthest from its center
            let mut sizes = vec![0usize; s];
            for &l in &labels {
                sizes[l] += 1;
            }
            for j in 0..s {
                if sizes[j] == 0 {
                    let far = (0..n)
                        .filter(|&i| sizes[labels[i]] > 1)
                        .max_by(|&a, &b| {
                            sq_dist(points.row(a), mu.row(labels[a])).total_cmp(&sq_dist(points.row(b), mu.row(labels[b])))
                        })
                        .expect("more points than clusters");
                    sizes[labels[far]] -= 1;
                    labels[far] = j;
                    sizes[j] = 1;
                }
            }
            mu = ward::centroids(points, &labels)?.0;
        }
        let inertia: f64 = points.iter_rows().zip(&labels).map(|(r, &l)| sq_dist(r, mu.row(l))).sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, labels));
        }
    }
    FlatClustering::from_labels(points, best.expect("at least one restart").1)
}

fn initial_clustering(z: &Tensor, cfg: &ClusterConfig) -> Result<FlatClustering> {
    match cfg.init {
        CentroidInit::Ward => Ok(ward::agglomerate_with(z, cfg.clusters, &cfg.agglomerate)?.clustering),
        CentroidInit::KMeans => kmeans(z, cfg.clusters, 10, cfg.seed),
    }
}

/// Fresh Ward centroids on `z`, reordered so that each lands on the slot of
/// the closest current centroid (optimal one-to-one matching).
fn reanchor(z: &Tensor, mu: &Tensor, cfg: &ClusterConfig) -> Result<Tensor> {
    let fresh = ward::agglomerate_with(z, cfg.clusters, &cfg.agglomerate)?.clustering.centroids;
    let cost: Vec<Vec<f64>> = (0..mu.rows())
        .map(|old| (0..fresh.rows()).map(|new| sq_dist(mu.row(old), fresh.row(new))).collect())
        .collect();
    let assignment = hungarian(&cost);
    Ok(fresh.select_rows(&assignment))
}

/// Trains `model` and the clustering head on `images`.
pub fn train_cae_mle(model: &mut CaeModel, images: &Tensor, cfg: &ClusterConfig) -> Result<ClusterOutcome> {
    train_cae_mle_with_side(model, images, None, cfg)
}

/// As [`train_cae_mle`], with extra per-instance features concatenated onto
/// the embedding before the clustering layer (and before initialization).
pub fn train_cae_mle_with_side(
    model: &mut CaeModel,
    images: &Tensor,
    side: Option<&Tensor>,
    cfg: &ClusterConfig,
) -> Result<ClusterOutcome> {
    let n = images.rows();
    if cfg.clusters < 2 {
        return Err(Error::InvalidArgument("training needs at least 2 clusters".into()));
    }
    if cfg.clusters > n {
        return Err(Error::InvalidArgument(format!("{} clusters for {n} instances", cfg.clusters)));
    }
    if cfg.batch_size == 0 || cfg.update_interval == 0 || !(cfg.gamma >= 0.0) {
        return Err(Error::InvalidArgument(
            "batch size and update interval must be positive and gamma non-negative".into(),
        ));
    }
    if let Some(s) = side {
        if s.shape().len() != 2 || s.rows() != n {
            return Err(Error::DimensionMismatch(format!("side features {:?} for {n} instances", s.shape())));
        }
        if !s.is_finite() {
            return Err(Error::NonFinite("side features".into()));
        }
    }
    let embed = |model: &CaeModel| -> Result<Tensor> { augment(model.encode(images)?, side) };

    let z = embed(model)?;
    let init = initial_clustering(&z, cfg)?;
    let initial_mu = init.centroids.clone();
    let mut mu = init.centroids;
    let mut prev_labels = init.labels;
    let mut state_p = Tensor::zeros(&[n, cfg.clusters]);

    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mu_slot = model.params_mut().len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut history = Vec::new();
    let mut refreshes = 0;
    let mut empty_streak = 0;
    let mut reanchors = 0;
    let mut batch_lr = (0.0, 0usize);
    let mut converged = false;
    let mut iteration = 0;

    while iteration < cfg.max_iter {
        if iteration % cfg.update_interval == 0 {
            let z = embed(model)?;
            let mut q = soft_assign(&z, &mu)?;
            check_row_stochastic("Q", &q, true)?;
            let mut labels = hard_labels(&q);
            let change = labels.iter().zip(&prev_labels).filter(|(a, b)| a != b).count() as f64 / n as f64;
            refreshes += 1;

            let mut sizes = vec![0usize; cfg.clusters];
            for &l in &labels {
                sizes[l] += 1;
            }
            empty_streak = if sizes.contains(&0) { empty_streak + 1 } else { 0 };
            let collapse = empty_streak >= 2;
            if collapse {
                log::warn!("iteration {iteration}: a cluster stayed empty for two refreshes; re-anchoring");
            }
            let periodic = cfg.ac_refresh.is_some_and(|k| k > 0 && refreshes % k == 0);
            if iteration > 0 && (collapse || periodic) {
                mu = reanchor(&z, &mu, cfg)?;
                opt.reset_moments(mu_slot);
                q = soft_assign(&z, &mu)?;
                labels = hard_labels(&q);
                empty_streak = 0;
                reanchors += 1;
            }
            let p = target_distribution(&q)?;
            check_row_stochastic("P", &p, false)?;
            let l_c = kl_divergence(&p, &q)? / n as f64;
            let l_r = if batch_lr.1 > 0 {
                batch_lr.0 / batch_lr.1 as f64
            } else {
                // no batch yet: score the whole set once
                let rec = model.decode(&model.encode(images)?)?;
                crate::nn::mse_loss(images, &rec)?.0
            };
            history.push(HistoryRow {
                iteration,
                reconstruction: l_r,
                clustering: l_c,
                total: l_r + cfg.gamma * l_c,
                label_change: change,
            });
            log::debug!("iteration {iteration}: L_r {l_r:.5} L_c {l_c:.5} changed {change:.4}");
            batch_lr = (0.0, 0);
            prev_labels = labels;
            state_p = p;
            if iteration > 0 && change < cfg.tol {
                converged = true;
                break;
            }
        }

        if cursor >= n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..(cursor + cfg.batch_size).min(n)];
        cursor += idx.len();
        let x = images.select_rows(idx);
        let p_b = state_p.select_rows(idx);
        let side_b = side.map(|s| s.select_rows(idx));
        let g = joint_gradients(model, &mu, &x, &p_b, cfg.gamma, side_b.as_ref())?;
        if !g.loss.total.is_finite() {
            return Err(Error::Diverged {
                phase: "clustering",
                iteration,
                loss: g.loss.total,
            });
        }
        batch_lr.0 += g.loss.reconstruction;
        batch_lr.1 += 1;
        let mut params = model.params_mut();
        params.push(&mut mu);
        let mut grads = g.params;
        grads.push(g.mu);
        opt.step(params, &grads)?;
        iteration += 1;
    }

    let z = embed(model)?;
    let q = soft_assign(&z, &mu)?;
    check_row_stochastic("Q", &q, true)?;
    let labels = hard_labels(&q);
    let p = target_distribution(&q).unwrap_or(state_p);
    Ok(ClusterOutcome {
        labels: labels.clone(),
        state: ClusteringState {
            mu,
            gamma: cfg.gamma,
            q,
            p,
            labels,
            refreshes,
        },
        initial_mu,
        history,
        iterations: iteration,
        converged,
        reanchors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn soft_assign_examples() {
        let q = soft_assign(&t(&[vec![0.3, 0.1]]), &t(&[vec![1.0, 1.0]])).unwrap();
        assert_eq!(q.data(), &[1.0]);
        let q = soft_assign(&t(&[vec![0.0]]), &t(&[vec![-1.0], vec![1.0]])).unwrap();
        assert_eq!(q.data(), &[0.5, 0.5]);
        let q = soft_assign(&t(&[vec![0.0, 0.0]]), &t(&[vec![0.0, 0.0], vec![1.0, 0.0]])).unwrap();
        assert!((q.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((q.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(soft_assign(&t(&[vec![0.0]]), &t(&[vec![0.0, 1.0]])).is_err());
    }

    #[test]
    fn target_examples() {
        let p = target_distribution(&t(&[vec![0.8, 0.2], vec![0.2, 0.8]])).unwrap();
        assert!((p.data()[0] - 0.64 / 0.68).abs() < 1e-12);
        assert!((p.data()[1] - 0.04 / 0.68).abs() < 1e-12);
        let u = target_distribution(&t(&[vec![0.25; 4], vec![0.25; 4]])).unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(target_distribution(&t(&[vec![1.0, 0.0]])).is_err());
    }

    #[test]
    fn kl_examples() {
        let q = t(&[vec![0.3, 0.7]]);
        assert_eq!(kl_divergence(&q, &q).unwrap(), 0.0);
        let v = kl_divergence(&t(&[vec![1.0, 0.0]]), &t(&[vec![0.5, 0.5]])).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn hard_label_examples() {
        assert_eq!(hard_labels(&t(&[vec![0.0, 1.0], vec![1.0, 0.0]])), vec![1, 0]);
        assert_eq!(hard_labels(&t(&[vec![0.25; 4]])), vec![0]);
    }

    #[test]
    fn kmeans_separates_obvious_groups() {
        let pts = t(&[vec![0.0], vec![0.1], vec![10.0], vec![10.2], vec![-0.1]]);
        let c = kmeans(&pts, 2, 3, 0).unwrap();
        assert_eq!(c.labels[0], c.labels[1]);
        assert_eq!(c.labels[0], c.labels[4]);
        assert_eq!(c.labels[2], c.labels[3]);
        assert_ne!(c.labels[0], c.labels[2]);
    }
}
