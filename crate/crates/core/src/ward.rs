//! Ward-linkage agglomerative clustering.
//!
//! Merges are found with the nearest-neighbor chain algorithm, which is valid
//! for Ward because the linkage is reducible. The chain emits merges out of
//! cost order, so the dendrogram sorts them (stably) by cost and relabels the
//! clusters by replaying them through a union-find; cutting after `n - s`
//! merges of that sorted list gives the same partition as greedily merging
//! the cheapest pair each step.
//!
//! Two distance policies are available:
//!
//! * `Cached` keeps the condensed `n(n-1)/2` matrix of Ward costs and updates
//!   it with the Lance–Williams recurrence
//!   `Δ(k, a∪b) = [(n_k+n_a)Δ(k,a) + (n_k+n_b)Δ(k,b) - n_k Δ(a,b)] / (n_k+n_a+n_b)`.
//! * `OnTheFly` keeps only the running centroids and sizes (`O(n d)` memory)
//!   and evaluates `Δ` from them when needed.
//!
//! `Auto` picks `Cached` up to [`CACHE_LIMIT`] points.
//!
//! Tie rule for the nearest-neighbor search: the previous chain element wins
//! a tie (this is what guarantees the chain terminates), otherwise the lowest
//! cluster slot. A slot is the smallest leaf index in its cluster.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sq_dist, Tensor};

/// Largest point count for which `DistancePolicy::Auto` caches the
/// condensed distance matrix (about 67 MB of `f64`).
pub const CACHE_LIMIT: usize = 4096;

/// `n_a n_b / (n_a + n_b) * ||μ_a - μ_b||²`.
pub fn ward_delta(size_a: usize, centroid_a: &[f64], size_b: usize, centroid_b: &[f64]) -> Result<f64> {
    if centroid_a.len() != centroid_b.len() {
        return Err(Error::DimensionMismatch(format!(
            "centroids of dimension {} and {}",
            centroid_a.len(),
            centroid_b.len()
        )));
    }
    if size_a == 0 || size_b == 0 {
        return Err(Error::InvalidArgument("cluster sizes must be at least 1".into()));
    }
    Ok(delta(size_a as f64, size_b as f64, sq_dist(centroid_a, centroid_b)))
}

fn delta(na: f64, nb: f64, dist: f64) -> f64 {
    na * nb / (na + nb) * dist
}

/// One merge of the dendrogram. Leaves are ids `0..n`; merge `i` (in sorted
/// order) creates id `n + i`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub cost: f64,
    pub id: usize,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    leaves: usize,
    merges: Vec<Merge>,
}

impl Dendrogram {
    /// Validates a merge list: `n - 1` merges, ids assigned in order, every
    /// child an existing and not yet consumed id, sizes consistent.
    pub fn from_merges(leaves: usize, merges: Vec<Merge>) -> Result<Self> {
        if leaves == 0 || merges.len() + 1 != leaves {
            return Err(Error::InvalidArgument(format!(
                "{leaves} leaves need {} merges, got {}",
                leaves.saturating_sub(1),
                merges.len()
            )));
        }
        let mut size = vec![1usize; leaves];
        let mut consumed = vec![false; 2 * leaves - 1];
        for (i, m) in merges.iter().enumerate() {
            let id = leaves + i;
            let ok = m.id == id
                && m.a < id
                && m.b < id
                && m.a != m.b
                && !consumed[m.a]
                && !consumed[m.b]
                && m.size == size[m.a] + size[m.b]
                && m.cost.is_finite()
                && m.cost >= 0.0;
            if !ok {
                return Err(Error::InvalidArgument(format!("merge {i} is inconsistent: {m:?}")));
            }
            consumed[m.a] = true;
            consumed[m.b] = true;
            size.push(m.size);
        }
        Ok(Dendrogram { leaves, merges })
    }

    pub fn leaves(&self) -> usize {
        self.leaves
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    /// Flat labels after the first `n - s` merges, numbered by first
    /// appearance in leaf order.
    pub fn cut(&self, s: usize) -> Result<Vec<usize>> {
        let n = self.leaves;
        if s == 0 || s > n {
            return Err(Error::InvalidArgument(format!("cannot cut {n} leaves into {s} clusters")));
        }
        let mut uf = UnionFind::new(n);
        let mut rep: Vec<usize> = (0..n).collect();
        for m in &self.merges[..n - s] {
            let (ra, rb) = (rep[m.a], rep[m.b]);
            uf.union(ra, rb);
            rep.push(ra);
        }
        let roots: Vec<usize> = (0..n).map(|i| uf.find(i)).collect();
        Ok(relabel(&roots))
    }

    /// Writes `a,b,cost,size` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("a,b,cost,size\n");
        for m in &self.merges {
            let _ = writeln!(out, "{},{},{},{}", m.a, m.b, m.cost, m.size);
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// A flat partition with its cluster means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatClustering {
    pub labels: Vec<usize>,
    /// `s × d`.
    pub centroids: Tensor,
    pub sizes: Vec<usize>,
}

impl FlatClustering {
    pub fn from_labels(points: &Tensor, labels: Vec<usize>) -> Result<Self> {
        let (centroids, sizes) = centroids(points, &labels)?;
        Ok(FlatClustering { labels, centroids, sizes })
    }

    pub fn clusters(&self) -> usize {
        self.sizes.len()
    }
}

/// Per-cluster means and sizes for labels dense in `[0, s)`.
pub fn centroids(points: &Tensor, labels: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    check_points(points)?;
    if labels.len() != points.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} points",
            labels.len(),
            points.rows()
        )));
    }
    let s = labels.iter().max().map_or(0, |m| m + 1);
    let d = points.row_len();
    let mut sums = vec![0.0; s * d];
    let mut sizes = vec![0usize; s];
    for (row, &l) in points.iter_rows().zip(labels) {
        sizes[l] += 1;
        for (acc, v) in sums[l * d..(l + 1) * d].iter_mut().zip(row) {
            *acc += v;
        }
    }
    if let Some(empty) = sizes.iter().position(|&c| c == 0) {
        return Err(Error::InvalidArgument(format!("cluster {empty} has no members")));
    }
    for (l, &c) in sizes.iter().enumerate() {
        for v in &mut sums[l * d..(l + 1) * d] {
            *v /= c as f64;
        }
    }
    Ok((Tensor::new(vec![s, d], sums)?, sizes))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistancePolicy {
    #[default]
    Auto,
    Cached,
    OnTheFly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgglomerateOptions {
    pub policy: DistancePolicy,
    /// Cluster a uniform sample of this many points and assign the rest to
    /// the nearest resulting centroid.
    pub subsample: Option<usize>,
    /// Seed for drawing the sample.
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Agglomeration {
    pub clustering: FlatClustering,
    /// Leaves are positions in `sample` when subsampling, points otherwise.
    pub dendrogram: Dendrogram,
    /// Sorted indices of the clustered sample, if any.
    pub sample: Option<Vec<usize>>,
}

/// Ward clustering of the rows of `points` into `s` clusters.
pub fn agglomerate(points: &Tensor, s: usize) -> Result<(FlatClustering, Dendrogram)> {
    let a = agglomerate_with(points, s, &AgglomerateOptions::default())?;
    Ok((a.clustering, a.dendrogram))
}

pub fn agglomerate_with(points: &Tensor, s: usize, opts: &AgglomerateOptions) -> Result<Agglomeration> {
    check_points(points)?;
    let n = points.rows();
    if s == 0 || s > n {
        return Err(Error::InvalidArgument(format!("cannot split {n} points into {s} clusters")));
    }
    let sample = match opts.subsample {
        Some(m) if m < n => {
            if m < s {
                return Err(Error::InvalidArgument(format!("subsample of {m} is smaller than s = {s}")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut idx = rand::seq::index::sample(&mut rng, n, m).into_vec();
            idx.sort_unstable();
            Some(idx)
        }
        _ => None,
    };
    let clustered = match &sample {
        Some(idx) => points.select_rows(idx),
        None => points.clone(),
    };
    let cached = match opts.policy {
        DistancePolicy::Auto => clustered.rows() <= CACHE_LIMIT,
        DistancePolicy::Cached => true,
        DistancePolicy::OnTheFly => false,
    };
    let dendrogram = if cached {
        nn_chain(&mut CachedDistances::new(&clustered))
    } else {
        nn_chain(&mut LiveCentroids::new(&clustered))
    };
    let sub_labels = dendrogram.cut(s)?;
    let labels = match &sample {
        None => sub_labels,
        Some(idx) => {
            let (mu, _) = centroids(&clustered, &sub_labels)?;
            let mut labels = vec![usize::MAX; n];
            for (&i, &l) in idx.iter().zip(&sub_labels) {
                labels[i] = l;
            }
            for (i, l) in labels.iter_mut().enumerate() {
                if *l == usize::MAX {
                    *l = nearest_row(&mu, points.row(i));
                }
            }
            labels
        }
    };
    Ok(Agglomeration {
        clustering: FlatClustering::from_labels(points, labels)?,
        dendrogram,
        sample,
    })
}

/// Index of the row of `rows` closest to `x`, ties to the lowest index.
pub fn nearest_row(rows: &Tensor, x: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (j, r) in rows.iter_rows().enumerate() {
        let d = sq_dist(r, x);
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

fn check_points(points: &Tensor) -> Result<()> {
    if points.shape().len() != 2 {
        return Err(Error::InvalidShape {
            shape: points.shape().to_vec(),
            reason: "points must be an n × d matrix".into(),
        });
    }
    if !points.is_finite() {
        return Err(Error::NonFinite("points passed to agglomerate".into()));
    }
    Ok(())
}

trait Linkage {
    fn len(&self) -> usize;
    fn dist(&self, i: usize, j: usize) -> f64;
    /// Merge cluster `gone` into `keep`; `gone` becomes inactive.
    fn merge(&mut self, keep: usize, gone: usize, active: &[bool]);
}

struct CachedDistances {
    n: usize,
    size: Vec<f64>,
    d: Vec<f64>,
}

impl CachedDistances {
    fn new(points: &Tensor) -> Self {
        let n = points.rows();
        let d: Vec<f64> = (0..n)
            .into_par_iter()
            .flat_map_iter(|i| {
                let pi = points.row(i);
                (i + 1..n).map(move |j| delta(1.0, 1.0, sq_dist(pi, points.row(j))))
            })
            .collect();
        CachedDistances {
            n,
            size: vec![1.0; n],
            d,
        }
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        self.n * i - i * (i + 1) / 2 + j - i - 1
    }
}

impl Linkage for CachedDistances {
    fn len(&self) -> usize {
        self.n
    }

    fn dist(&self, i: usize, j: usize) -> f64 {
        self.d[self.idx(i, j)]
    }

    fn merge(&mut self, keep: usize, gone: usize, active: &[bool]) {
        let (na, nb) = (self.size[keep], self.size[gone]);
        let dab = self.dist(keep, gone);
        for k in 0..self.n {
            if !active[k] || k == keep || k == gone {
                continue;
            }
            let nk = self.size[k];
            let updated = ((nk + na) * self.dist(k, keep) + (nk + nb) * self.dist(k, gone) - nk * dab) / (nk + na + nb);
            let at = self.idx(k, keep);
            self.d[at] = updated;
        }
        self.size[keep] = na + nb;
    }
}

struct LiveCentroids {
    dim: usize,
    size: Vec<f64>,
    mean: Vec<f64>,
}

impl LiveCentroids {
    fn new(points: &Tensor) -> Self {
        LiveCentroids {
            dim: points.row_len(),
            size: vec![1.0; points.rows()],
            mean: points.data().to_vec(),
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.mean[i * self.dim..(i + 1) * self.dim]
    }
}

impl Linkage for LiveCentroids {
    fn len(&self) -> usize {
        self.size.len()
    }

    fn dist(&self, i: usize, j: usize) -> f64 {
        delta(self.size[i], self.size[j], sq_dist(self.row(i), self.row(j)))
    }

    fn merge(&mut self, keep: usize, gone: usize, _active: &[bool]) {
        let (na, nb) = (self.size[keep], self.size[gone]);
        let total = na + nb;
        for t in 0..self.dim {
            let merged = (na * self.mean[keep * self.dim + t] + nb * self.mean[gone * self.dim + t]) / total;
            self.mean[keep * self.dim + t] = merged;
        }
        self.size[keep] = total;
    }
}

fn nn_chain(link: &mut impl Linkage) -> Dendrogram {
    let n = link.len();
    let mut active = vec![true; n];
    let mut raw: Vec<(usize, usize, f64)> = Vec::with_capacity(n.saturating_sub(1));
    let mut chain: Vec<usize> = Vec::new();
    let mut first_active = 0;
    for _ in 1..n {
        if chain.is_empty() {
            while !active[first_active] {
                first_active += 1;
            }
            chain.push(first_active);
        }
        let (a, b, cost) = loop {
            let a = *chain.last().expect("chain is non-empty");
            let prev = chain.len().checked_sub(2).map(|i| chain[i]);
            let mut best = prev.map(|p| (link.dist(a, p), p));
            for k in 0..n {
                if !active[k] || k == a || Some(k) == prev {
                    continue;
                }
                let dk = link.dist(a, k);
                if best.is_none_or(|(bd, _)| dk < bd) {
                    best = Some((dk, k));
                }
            }
            let (cost, b) = best.expect("at least two active clusters");
            if Some(b) == prev {
                break (a, b, cost);
            }
            chain.push(b);
        };
        chain.truncate(chain.len() - 2);
        let (keep, gone) = (a.min(b), a.max(b));
        link.merge(keep, gone, &active);
        active[gone] = false;
        raw.push((keep, gone, cost));
    }
    raw.sort_by(|x, y| x.2.total_cmp(&y.2));

    // replay to assign dendrogram ids
    let mut uf = UnionFind::new(n);
    let mut id_of_root: Vec<usize> = (0..n).collect();
    let mut size = vec![1usize; n];
    let mut merges = Vec::with_capacity(raw.len());
    for (i, &(x, y, cost)) in raw.iter().enumerate() {
        let (rx, ry) = (uf.find(x), uf.find(y));
        let (ia, ib) = (id_of_root[rx], id_of_root[ry]);
        let merged = size[rx] + size[ry];
        let root = uf.union(rx, ry);
        size[root] = merged;
        id_of_root[root] = n + i;
        merges.push(Merge {
            a: ia.min(ib),
            b: ia.max(ib),
            cost,
            id: n + i,
            size: merged,
        });
    }
    Dendrogram { leaves: n, merges }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Joins the sets of `a` and `b`; the smaller root survives.
    fn union(&mut self, a: usize, b: usize) -> usize {
        let (ra, rb) = (self.find(a), self.find(b));
        let (keep, gone) = (ra.min(rb), ra.max(rb));
        self.parent[gone] = keep;
        keep
    }
}

/// Renumbers arbitrary ids densely by first appearance.
pub fn relabel(ids: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    ids.iter()
        .map(|id| {
            let next = map.len();
            *map.entry(*id).or_insert(next)
        })
        .collect()
}
