mod common;

use cae_cluster::cae::{CaeConfig, ConvStage, PretrainConfig};
use cae_cluster::clustering::ClusterConfig;
use cae_cluster::data::make_synthetic_blobs;
use cae_cluster::ifl::*;
use cae_cluster::metrics::acc;
use cae_cluster::Tensor;

fn small_cfg(clusters: usize, folds: usize, seed: u64) -> IflConfig {
    let cae = CaeConfig {
        input: [1, 12, 12],
        embedding_dim: 4,
        stages: vec![
            ConvStage { filters: 4, kernel: 5, stride: 2 },
            ConvStage { filters: 8, kernel: 5, stride: 2 },
            ConvStage { filters: 8, kernel: 3, stride: 2 },
        ],
        seed,
    };
    let pretrain = PretrainConfig {
        epochs: 6,
        batch_size: 16,
        seed,
        ..Default::default()
    };
    let cluster = ClusterConfig {
        clusters,
        batch_size: 16,
        update_interval: 5,
        max_iter: 20,
        seed,
        ..Default::default()
    };
    IflConfig {
        folds,
        ..IflConfig::new(cae, pretrain, cluster)
    }
}

#[test]
fn folds_partition_exactly() {
    for (n, r, seed) in [(100, 10, 0), (101, 10, 1), (7, 2, 2), (57, 5, 3), (30, 30, 4)] {
        let f = inner_folds(n, r, seed).unwrap();
        let mut seen = vec![0; n];
        let mut sizes = Vec::new();
        for k in 0..r {
            let test = f.test_indices(k);
            let train = f.train_indices(k);
            assert_eq!(test.len() + train.len(), n);
            assert!(test.iter().all(|i| !train.contains(i)));
            for &i in &test {
                seen[i] += 1;
            }
            sizes.push(test.len());
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert_eq!(f, inner_folds(n, r, seed).unwrap());
    }
    let f = inner_folds(101, 10, 9).unwrap();
    let mut sizes: Vec<usize> = (0..10).map(|k| f.test_indices(k).len()).collect();
    sizes.sort();
    assert_eq!(sizes, [10, 10, 10, 10, 10, 10, 10, 10, 10, 11]);
    assert!(inner_folds(5, 10, 0).is_err());
    assert!(inner_folds(5, 1, 0).is_err());
}

#[test]
fn feature_fixtures() {
    let mu = Tensor::from_rows(&[vec![3.0, 4.0], vec![0.0, 1.0]]).unwrap();
    let f = extract_error_features(&[0.0, 0.0], &[6, 4], &mu).unwrap();
    assert_eq!(f.weights, [5.0, 1.0]);
    assert_eq!((f.closest, f.weight_closest, f.confidence), (1, 1.0, 0.4));
    assert_eq!(f.to_vec(), [0.4, 5.0, 1.0, 1.0]);

    let f = extract_error_features(&[3.0, 4.0], &[7, 3], &mu).unwrap();
    assert_eq!((f.weight_closest, f.confidence), (0.0, 0.7));

    let mu = Tensor::from_rows(&[vec![0.0], vec![10.0]]).unwrap();
    assert_eq!(extract_error_features(&[9.0], &[7, 3], &mu).unwrap().confidence, 0.3);
    // tie goes to the lower index
    assert_eq!(extract_error_features(&[5.0], &[7, 3], &mu).unwrap().closest, 0);
    assert!(extract_error_features(&[1.0, 2.0], &[7, 3], &mu).is_err());
}

#[test]
fn normalization_fixtures() {
    let block = Tensor::from_rows(&[vec![0.0, 4.0, 2.0], vec![0.5, 4.0, 0.0], vec![1.0, 4.0, 1.0]]).unwrap();
    let (out, ranges) = normalize_features(&block);
    assert_eq!(out.data(), &[-2.5, 0.0, 2.5, 0.0, 0.0, -2.5, 2.5, 0.0, 0.0]);
    assert_eq!(ranges, [(0.0, 1.0), (4.0, 4.0), (0.0, 2.0)]);
}

#[test]
fn rounds_do_not_see_their_test_fold() {
    let data = make_synthetic_blobs(3, 10, 12, 0.1, 5).unwrap();
    let cfg = small_cfg(3, 3, 5);
    let folding = inner_folds(30, 3, 5).unwrap();
    let train = data.images.select_rows(&folding.train_indices(1));
    let test = data.images.select_rows(&folding.test_indices(1));
    let mut poisoned = test.clone();
    for v in poisoned.data_mut() {
        *v = -*v * 7.0 + 0.3;
    }
    let a = run_inner_round(&train, &test, &cfg, 11).unwrap();
    let b = run_inner_round(&train, &poisoned, &cfg, 11).unwrap();
    let pa: Vec<Tensor> = a.model.clone().params_mut().into_iter().map(|t| t.clone()).collect();
    let pb: Vec<Tensor> = b.model.clone().params_mut().into_iter().map(|t| t.clone()).collect();
    assert_eq!(pa, pb);
    assert_eq!(a.mu, b.mu);
    assert_eq!(a.labels, b.labels);
    assert_ne!(a.z_test, b.z_test);
    assert_eq!(a.z_test.rows(), test.rows());
    assert_eq!(a.sizes.iter().sum::<usize>(), train.rows());
}

#[test]
fn feature_block_structure_on_random_configs() {
    let mut positive = 0;
    for (case, (clusters, folds)) in [(2, 2), (3, 3), (4, 5), (3, 4)].into_iter().enumerate() {
        let seed = 20 + case as u64;
        let data = make_synthetic_blobs(3, 12, 12, 0.1, seed).unwrap();
        let n = data.len();
        let cfg = small_cfg(clusters, folds, seed);
        let block = compute_ifl_features(&data.images, &cfg).unwrap();
        assert_eq!(block.width(), clusters + 2);
        assert_eq!(block.raw.shape(), &[n, clusters + 2]);
        assert_eq!(block.normalized.shape(), block.raw.shape());
        assert!(block.normalized.data().iter().all(|v| v.abs() <= FEATURE_RANGE + 1e-12));

        for fold in 0..folds {
            let train_len = block.folding.train_indices(fold).len();
            let mut by_cluster = vec![None; clusters];
            for i in block.folding.test_indices(fold) {
                let row = block.raw.row(i);
                let (conf, w, wc) = (row[0], &row[1..=clusters], row[clusters + 1]);
                // zero only when the closest centroid lost all its members
                assert!((0.0..=1.0).contains(&conf));
                assert!(w.iter().all(|&v| v >= 0.0));
                let min = w.iter().cloned().fold(f64::INFINITY, f64::min);
                assert_eq!(wc, min);
                let b = block.closest[i];
                assert_eq!(w[b], min);
                assert!(w[..b].iter().all(|&v| v > min));
                // confidence is a count over this round's inner-train set
                positive += usize::from(conf > 0.0);
                let count = conf * train_len as f64;
                assert!((count - count.round()).abs() < 1e-9);
                match by_cluster[b] {
                    None => by_cluster[b] = Some(conf),
                    Some(c) => assert_eq!(c, conf),
                }
            }
        }
    }
    assert!(positive > 0);
}

#[test]
fn confidence_is_the_closest_cluster_size_fraction() {
    let data = make_synthetic_blobs(3, 10, 12, 0.1, 7).unwrap();
    let cfg = small_cfg(3, 3, 7);
    let folding = inner_folds(30, 3, 7).unwrap();
    let train = data.images.select_rows(&folding.train_indices(0));
    let test = data.images.select_rows(&folding.test_indices(0));
    let out = run_inner_round(&train, &test, &cfg, 3).unwrap();
    let total: usize = out.sizes.iter().sum();
    for z in out.z_test.iter_rows() {
        // independent argmin over squared distances
        let d: Vec<f64> = out
            .mu
            .iter_rows()
            .map(|m| m.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect();
        let b = (0..d.len()).min_by(|&x, &y| d[x].total_cmp(&d[y])).unwrap();
        let f = extract_error_features(z, &out.sizes, &out.mu).unwrap();
        assert_eq!(f.closest, b);
        assert_eq!(f.confidence, out.sizes[b] as f64 / total as f64);
    }
}

#[test]
fn parallel_rounds_match_sequential_bytes() {
    let data = make_synthetic_blobs(3, 10, 12, 0.1, 8).unwrap();
    let seq = compute_ifl_features(&data.images, &small_cfg(3, 3, 8)).unwrap();
    let par = compute_ifl_features(
        &data.images,
        &IflConfig {
            parallel: true,
            ..small_cfg(3, 3, 8)
        },
    )
    .unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&seq.raw), bits(&par.raw));
    assert_eq!(bits(&seq.normalized), bits(&par.normalized));
}

#[test]
fn round_seeds_are_distinct_and_stable() {
    let cfg = small_cfg(3, 10, 1);
    let seeds: Vec<u64> = (0..10).map(|k| cfg.round_seed(k)).collect();
    let mut unique = seeds.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), 10);
    assert_eq!(seeds, (0..10).map(|k| cfg.round_seed(k)).collect::<Vec<_>>());
}

#[test]
fn features_csv_layout() {
    let data = make_synthetic_blobs(3, 4, 12, 0.1, 9).unwrap();
    let block = compute_ifl_features(&data.images, &small_cfg(2, 2, 9)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("features.csv");
    write_features_csv(&path, &block.folding, &block.raw).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "instance,fold,confidence,w_1,w_2,w_closest");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 12);
    for (i, line) in rows.iter().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[0].parse::<usize>().unwrap(), i);
        assert_eq!(cells[1].parse::<usize>().unwrap(), block.folding.assignment[i]);
        let back: Vec<f64> = cells[2..].iter().map(|c| c.parse().unwrap()).collect();
        assert_eq!(back, block.raw.row(i));
    }
}

#[test]
fn deep_ifl_end_to_end_shapes() {
    let data = make_synthetic_blobs(3, 12, 12, 0.1, 10).unwrap();
    let out = deep_ifl(&data.images, &small_cfg(3, 3, 10)).unwrap();
    assert_eq!(out.labels().len(), 36);
    assert_eq!(out.clustering.state.mu.row_len(), 4 + 3 + 2);
    let score = acc(data.labels.as_ref().unwrap(), out.labels()).unwrap();
    assert!(score > 1.0 / 3.0);
}
