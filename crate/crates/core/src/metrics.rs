//! Clustering accuracy under the best one-to-one cluster-to-class mapping,
//! and normalized mutual information.

use crate::error::{Error, Result};

/// Counts `table[c][y]` of instances with cluster `c` and class `y`.
pub fn contingency(y: &[usize], c: &[usize]) -> Result<Vec<Vec<u64>>> {
    if y.len() != c.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} ground-truth labels vs {} cluster ids",
            y.len(),
            c.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::InvalidArgument("no instances to score".into()));
    }
    let k = y.iter().max().expect("non-empty") + 1;
    let s = c.iter().max().expect("non-empty") + 1;
    if k > 10_000 || s > 10_000 {
        return Err(Error::InvalidArgument(format!(
            "{s} clusters / {k} classes exceeds the 10^4 limit"
        )));
    }
    let mut table = vec![vec![0u64; k]; s];
    for (&yy, &cc) in y.iter().zip(c) {
        table[cc][yy] += 1;
    }
    Ok(table)
}

/// Minimum-cost perfect matching on a square matrix (Kuhn–Munkres with
/// potentials, `O(n³)`). Returns `assignment[row] = column`. Integer-valued
/// costs below 2^53 are solved exactly.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; column 0 is a virtual start
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}

/// Best cluster-to-class mapping: `mapping[c]` is the class assigned to
/// cluster `c`, or `None` when the cluster is matched to a padding column.
pub fn best_mapping(y: &[usize], c: &[usize]) -> Result<Vec<Option<usize>>> {
    let table = contingency(y, c)?;
    let (s, k) = (table.len(), table[0].len());
    let m = s.max(k);
    let cost: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            (0..m)
                .map(|j| if i < s && j < k { -(table[i][j] as f64) } else { 0.0 })
                .collect()
        })
        .collect();
    let assignment = hungarian(&cost);
    Ok(assignment[..s].iter().map(|&j| (j < k).then_some(j)).collect())
}

/// Unsupervised clustering accuracy.
pub fn acc(y: &[usize], c: &[usize]) -> Result<f64> {
    let table = contingency(y, c)?;
    let mapping = best_mapping(y, c)?;
    let hits: u64 = mapping
        .iter()
        .enumerate()
        .filter_map(|(ci, m)| m.map(|yi| table[ci][yi]))
        .sum();
    Ok(hits as f64 / y.len() as f64)
}

/// `I(Y, C) / ((H(Y) + H(C)) / 2)` with natural logs; `0` when both
/// entropies vanish.
pub fn nmi(y: &[usize], c: &[usize]) -> Result<f64> {
    let table = contingency(y, c)?;
    let n = y.len() as f64;
    let row: Vec<f64> = table.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let col: Vec<f64> = (0..table[0].len())
        .map(|j| table.iter().map(|r| r[j]).sum::<u64>() as f64)
        .collect();
    let entropy = |counts: &[f64]| -> f64 {
        counts
            .iter()
            .filter(|&&m| m > 0.0)
            .map(|&m| -(m / n) * (m / n).ln())
            .sum()
    };
    let mut mi = 0.0;
    for (i, r) in table.iter().enumerate() {
        for (j, &count) in r.iter().enumerate() {
            if count > 0 {
                let pij = count as f64 / n;
                mi += pij * (count as f64 * n / (row[i] * col[j])).ln();
            }
        }
    }
    let denom = 0.5 * (entropy(&row) + entropy(&col));
    if denom <= 0.0 {
        return Ok(0.0);
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}
