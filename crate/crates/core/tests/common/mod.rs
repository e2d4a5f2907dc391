//! Test-only oracles. Nothing here calls into the code paths it checks.
#![allow(dead_code)]

use cae_cluster::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Central finite differences of a scalar function with respect to every
/// entry of `x`.
pub fn numeric_gradient(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_EPS;
        let up = f(&probe);
        probe.data_mut()[i] = orig - FD_EPS;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * FD_EPS);
    }
    grad
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`; zero when both vanish.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.dot(analytic).sqrt().max(numeric.dot(numeric).sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Direct six-loop convolution of one batch, weight `(out, in, k, k)`.
pub fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for s in 0..n {
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[oc];
                    for ic in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((s * cin + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * cin + ic) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((s * cout + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out).unwrap()
}

/// Direct scatter form of the transposed convolution, weight `(in, out, k, k)`.
pub fn naive_deconv(
    y: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Tensor {
    let (n, cin, h, wd) = (y.shape()[0], y.shape()[1], y.shape()[2], y.shape()[3]);
    let (cout, k) = (w.shape()[1], w.shape()[2]);
    let mut out = vec![0.0; n * cout * out_h * out_w];
    for s in 0..n {
        for oc in 0..cout {
            for v in &mut out[(s * cout + oc) * out_h * out_w..(s * cout + oc + 1) * out_h * out_w] {
                *v = b.data()[oc];
            }
        }
        for ic in 0..cin {
            for iy in 0..h {
                for ix in 0..wd {
                    let yv = y.data()[((s * cin + ic) * h + iy) * wd + ix];
                    for oc in 0..cout {
                        for ky in 0..k {
                            for kx in 0..k {
                                let oy = (iy * stride + ky) as isize - pad as isize;
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if oy < 0 || ox < 0 || oy >= out_h as isize || ox >= out_w as isize {
                                    continue;
                                }
                                out[((s * cout + oc) * out_h + oy as usize) * out_w + ox as usize] +=
                                    yv * w.data()[((ic * cout + oc) * k + ky) * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, cout, out_h, out_w], out).unwrap()
}

/// Exhaustive ACC: best agreement over every injective map from cluster ids
/// to class ids (clusters left unmapped when there are more of them).
pub fn brute_force_acc(y: &[usize], c: &[usize]) -> f64 {
    let k = y.iter().max().map_or(0, |m| m + 1);
    let s = c.iter().max().map_or(0, |m| m + 1);
    let mut best = 0usize;
    let mut map = vec![usize::MAX; s];
    let mut used = vec![false; k];
    fn rec(
        i: usize,
        s: usize,
        k: usize,
        map: &mut Vec<usize>,
        used: &mut Vec<bool>,
        y: &[usize],
        c: &[usize],
        best: &mut usize,
    ) {
        if i == s {
            let hits = y
                .iter()
                .zip(c)
                .filter(|(yy, cc)| map[**cc] == **yy)
                .count();
            *best = (*best).max(hits);
            return;
        }
        // cluster i unmapped
        map[i] = usize::MAX;
        rec(i + 1, s, k, map, used, y, c, best);
        for cls in 0..k {
            if !used[cls] {
                used[cls] = true;
                map[i] = cls;
                rec(i + 1, s, k, map, used, y, c, best);
                used[cls] = false;
            }
        }
        map[i] = usize::MAX;
    }
    rec(0, s, k, &mut map, &mut used, y, c, &mut best);
    best as f64 / y.len() as f64
}

/// NMI straight from label counts with natural logs, written independently
/// of the library's contingency code.
pub fn count_nmi(y: &[usize], c: &[usize]) -> f64 {
    let n = y.len() as f64;
    let mut joint = std::collections::BTreeMap::<(usize, usize), f64>::new();
    let mut py = std::collections::BTreeMap::<usize, f64>::new();
    let mut pc = std::collections::BTreeMap::<usize, f64>::new();
    for (&a, &b) in y.iter().zip(c) {
        *joint.entry((a, b)).or_default() += 1.0;
        *py.entry(a).or_default() += 1.0;
        *pc.entry(b).or_default() += 1.0;
    }
    let entropy = |m: &std::collections::BTreeMap<usize, f64>| -> f64 {
        m.values().map(|&v| -(v / n) * (v / n).ln()).sum()
    };
    let mut mi = 0.0;
    for (&(a, b), &v) in &joint {
        let pxy = v / n;
        mi += pxy * (pxy / ((py[&a] / n) * (pc[&b] / n))).ln();
    }
    let denom = 0.5 * (entropy(&py) + entropy(&pc));
    if denom == 0.0 {
        0.0
    } else {
        mi / denom
    }
}

/// True when two labelings are identical up to relabeling.
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    use std::collections::HashMap;
    if a.len() != b.len() {
        return false;
    }
    let mut fwd = HashMap::new();
    let mut back = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        if *fwd.entry(x).or_insert(y) != y || *back.entry(y).or_insert(x) != x {
            return false;
        }
    }
    true
}

/// Within-cluster sum of squared deviations.
pub fn ess(points: &[Vec<f64>]) -> f64 {
    let d = points[0].len();
    let n = points.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n).collect();
    points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(a, m)| (a - m) * (a - m)).sum::<f64>())
        .sum()
}

/// Ward agglomeration that recomputes every cluster mean from the raw
/// points before every merge and scans all pairs (cubic time). Returns flat
/// labels for each cut level `s` in `1..=n`, indexed by `s`.
pub fn naive_ward_partitions(points: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let n = points.len();
    let d = points[0].len();
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut by_s = vec![Vec::new(); n + 1];
    let labels_of = |clusters: &Vec<Vec<usize>>| {
        let mut l = vec![0; n];
        for (ci, members) in clusters.iter().enumerate() {
            for &m in members {
                l[m] = ci;
            }
        }
        l
    };
    by_s[n] = labels_of(&clusters);
    while clusters.len() > 1 {
        let means: Vec<Vec<f64>> = clusters
            .iter()
            .map(|m| {
                (0..d)
                    .map(|j| m.iter().map(|&i| points[i][j]).sum::<f64>() / m.len() as f64)
                    .collect()
            })
            .collect();
        let mut best = (f64::INFINITY, 0, 0);
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let (na, nb) = (clusters[a].len() as f64, clusters[b].len() as f64);
                let dist: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y) * (x - y)).sum();
                let cost = na * nb / (na + nb) * dist;
                if cost < best.0 {
                    best = (cost, a, b);
                }
            }
        }
        let (_, a, b) = best;
        let moved = clusters.remove(b);
        clusters[a].extend(moved);
        by_s[clusters.len()] = labels_of(&clusters);
    }
    by_s
}
