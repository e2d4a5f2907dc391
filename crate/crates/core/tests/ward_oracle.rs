mod common;

use cae_cluster::ward::{self, AgglomerateOptions, DistancePolicy};
use cae_cluster::Tensor;
use common::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn random_points(n: usize, d: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-5.0..5.0)).collect()).collect()
}

#[test]
fn nn_chain_matches_naive_ward_at_every_cut() {
    let mut rng = rng(20);
    for case in 0..12 {
        let n = rng.random_range(2..=60);
        let d = rng.random_range(1..=10);
        let pts = random_points(n, d, &mut rng);
        let naive = naive_ward_partitions(&pts);
        let t = Tensor::from_rows(&pts).unwrap();
        for policy in [DistancePolicy::Cached, DistancePolicy::OnTheFly] {
            let opts = AgglomerateOptions { policy, ..Default::default() };
            let a = ward::agglomerate_with(&t, 1, &opts).unwrap();
            for s in 1..=n {
                let labels = a.dendrogram.cut(s).unwrap();
                assert!(same_partition(&labels, &naive[s]), "case {case} {policy:?} s={s}");
            }
        }
    }
}

#[test]
fn delta_is_the_ess_increase() {
    let mut rng = rng(21);
    for _ in 0..200 {
        let d = rng.random_range(1..=6);
        let a = random_points(rng.random_range(1..8), d, &mut rng);
        let b = random_points(rng.random_range(1..8), d, &mut rng);
        let (mu_a, _) = ward::centroids(&Tensor::from_rows(&a).unwrap(), &vec![0; a.len()]).unwrap();
        let (mu_b, _) = ward::centroids(&Tensor::from_rows(&b).unwrap(), &vec![0; b.len()]).unwrap();
        let delta = ward::ward_delta(a.len(), mu_a.data(), b.len(), mu_b.data()).unwrap();
        let union: Vec<Vec<f64>> = a.iter().chain(&b).cloned().collect();
        let expected = ess(&union) - ess(&a) - ess(&b);
        assert!((delta - expected).abs() <= 1e-9 * expected.abs().max(1.0), "{delta} vs {expected}");
    }
}

#[test]
fn separated_blobs_split_cleanly() {
    let mut rng = rng(22);
    let mut pts = Vec::new();
    let mut truth = Vec::new();
    for (label, cx) in [(0, 0.0), (1, 10.0)] {
        for _ in 0..40 {
            let gauss = |r: &mut rand_chacha::ChaCha8Rng| {
                // Box-Muller
                let (u1, u2): (f64, f64) = (r.random_range(1e-12..1.0), r.random());
                0.1 * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            };
            pts.push(vec![cx + gauss(&mut rng), gauss(&mut rng)]);
            truth.push(label);
        }
    }
    let (flat, _) = ward::agglomerate(&Tensor::from_rows(&pts).unwrap(), 2).unwrap();
    assert!(same_partition(&flat.labels, &truth));
    assert_eq!(flat.sizes, vec![40, 40]);
}

#[test]
fn point_order_does_not_change_the_partition() {
    let mut rng = rng(23);
    for _ in 0..5 {
        let pts = random_points(80, 4, &mut rng);
        let mut perm: Vec<usize> = (0..pts.len()).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| pts[i].clone()).collect();
        let (a, _) = ward::agglomerate(&Tensor::from_rows(&pts).unwrap(), 6).unwrap();
        let (b, _) = ward::agglomerate(&Tensor::from_rows(&shuffled).unwrap(), 6).unwrap();
        let b_in_original_order: Vec<usize> = {
            let mut v = vec![0; pts.len()];
            for (pos, &i) in perm.iter().enumerate() {
                v[i] = b.labels[pos];
            }
            v
        };
        assert!(same_partition(&a.labels, &b_in_original_order));
    }
}

#[test]
fn flat_clustering_invariants() {
    let mut rng = rng(24);
    let pts = random_points(150, 3, &mut rng);
    let t = Tensor::from_rows(&pts).unwrap();
    let (flat, dendro) = ward::agglomerate(&t, 7).unwrap();
    assert_eq!(dendro.merges().len(), 149);
    assert_eq!(flat.sizes.iter().sum::<usize>(), 150);
    assert!(flat.sizes.iter().all(|&c| c > 0));
    for j in 0..7 {
        for t_ in 0..3 {
            let members: Vec<f64> = (0..150).filter(|&i| flat.labels[i] == j).map(|i| pts[i][t_]).collect();
            let mean = members.iter().sum::<f64>() / members.len() as f64;
            assert!((flat.centroids.row(j)[t_] - mean).abs() < 1e-9);
        }
    }
    // every id consumed at most once, ids in order
    let rebuilt = ward::Dendrogram::from_merges(150, dendro.merges().to_vec()).unwrap();
    assert_eq!(rebuilt.cut(7).unwrap(), flat.labels);
}

#[test]
fn subsample_keeps_sampled_labels() {
    let mut rng = rng(25);
    let pts = random_points(300, 2, &mut rng);
    let t = Tensor::from_rows(&pts).unwrap();
    let opts = AgglomerateOptions {
        subsample: Some(100),
        seed: 3,
        ..Default::default()
    };
    let a = ward::agglomerate_with(&t, 4, &opts).unwrap();
    let sample = a.sample.clone().unwrap();
    assert_eq!(sample.len(), 100);
    let sub_labels = a.dendrogram.cut(4).unwrap();
    let at_sample: Vec<usize> = sample.iter().map(|&i| a.clustering.labels[i]).collect();
    assert!(same_partition(&sub_labels, &at_sample));
    assert_eq!(a.clustering.clusters(), 4);
    let again = ward::agglomerate_with(&t, 4, &opts).unwrap();
    assert_eq!(again.clustering.labels, a.clustering.labels);
}

#[test]
fn dendrogram_csv_has_one_row_per_merge() {
    let mut rng = rng(26);
    let t = Tensor::from_rows(&random_points(10, 2, &mut rng)).unwrap();
    let (_, d) = ward::agglomerate(&t, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tree.csv");
    d.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 10);
    assert_eq!(text.lines().next(), Some("a,b,cost,size"));
}

#[test]
fn ten_thousand_points_within_a_minute() {
    let mut rng = rng(27);
    let pts = Tensor::new(vec![10_000, 10], (0..100_000).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let start = std::time::Instant::now();
    let (flat, _) = ward::agglomerate(&pts, 10).unwrap();
    assert_eq!(flat.clusters(), 10);
    assert!(start.elapsed().as_secs() < 60, "{:?}", start.elapsed());
}
