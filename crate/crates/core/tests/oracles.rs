//! Independent brute-force references and hand-computed values.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tpm_core::autodiff::{Graph, ParamStore, Tensor};
use tpm_core::geometry::{farthest_point_sample_from, knn_group, normalize, PointCloud};
use tpm_core::loss::{chamfer, loss_weights, loss_weights_with, tpm_total_loss, LambdaMode, LossWeights};
use tpm_core::masking::{derive_mask_triple, masked_count, MaskSpec};
use tpm_core::probe::{evaluate_svm, train_linear_svm, SvmOptions};
use tpm_core::probe::{select_weights, ProbeRow};

#[test]
fn fps_matches_brute_force_on_1200_clouds() {
    assert_eq!(common::fps_mismatches(1200, 11), Vec::<usize>::new());
}

#[test]
fn knn_matches_exhaustive_sort_on_1200_clouds() {
    assert_eq!(common::knn_mismatches(1200, 12), Vec::<usize>::new());
}

#[test]
fn chamfer_matches_pairwise_reference_on_1200_pairs() {
    let dev = common::chamfer_max_deviation(1200, 13);
    assert!(dev <= 1e-6, "{dev}");
}

#[test]
fn fps_square_example() {
    let cloud = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]], None).unwrap();
    assert_eq!(farthest_point_sample_from(&cloud, 2, 0).unwrap(), vec![0, 3]);
}

#[test]
fn knn_colinear_example() {
    let cloud = PointCloud::new((0..4).map(|i| [i as f32, 0.0, 0.0]).collect(), None).unwrap();
    let set = knn_group(&cloud, &[0], 2).unwrap();
    assert_eq!(set.patch(0), &[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
}

#[test]
fn normalize_two_points() {
    let cloud = PointCloud::new(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]], None).unwrap();
    let n = normalize(&cloud).unwrap();
    assert_eq!(n.points, vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
}

#[test]
fn chamfer_unit_offset_is_two() {
    assert_eq!(chamfer(&[[0.0, 0.0, 0.0]], &[[1.0, 0.0, 0.0]]).unwrap(), 2.0);
}

#[test]
fn masked_counts_round_half_away() {
    assert_eq!(masked_count(32, 0.6), 19);
    assert_eq!(masked_count(32, 0.4), 13);
    assert_eq!(masked_count(64, 0.6), 38);
}

#[test]
fn hand_computed_loss_weights() {
    let close = |w: &LossWeights, want: [f64; 3]| {
        for (g, x) in w.lambdas.iter().zip(want) {
            assert!((g - x).abs() < 1e-12, "{:?} vs {want:?}", w.lambdas);
        }
    };
    close(&loss_weights(&MaskSpec::new(vec![0.6, 0.5, 0.4]).unwrap()), [0.4, 1.0 / 3.0, 4.0 / 15.0]);
    close(&loss_weights(&MaskSpec::new(vec![0.8, 0.5, 0.2]).unwrap()), [8.0 / 15.0, 1.0 / 3.0, 2.0 / 15.0]);
    let uniform = loss_weights_with(&MaskSpec::new(vec![0.6, 0.5, 0.4]).unwrap(), LambdaMode::Uniform);
    assert_eq!(uniform.lambdas, vec![1.0, 1.0, 1.0]);
}

#[test]
fn weighted_total_of_three_zero_zero() {
    let mut g = Graph::<f64>::new();
    let ls: Vec<_> = [3.0, 0.0, 0.0]
        .iter()
        .map(|&v| g.input(Tensor::scalar(v)).unwrap())
        .collect();
    let w = loss_weights(&MaskSpec::new(vec![0.6, 0.5, 0.4]).unwrap());
    let t = tpm_total_loss(&mut g, &ls, &w).unwrap();
    assert!((g.value(t).item() - 1.2).abs() < 1e-12);
}

#[test]
fn sum_of_squares_gradient() {
    let mut store = ParamStore::new();
    store.insert("p", Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap()).unwrap();
    let mut g = Graph::new();
    let h = store.attach(&mut g).unwrap();
    let p = h.get("p").unwrap();
    let sq = g.mul(p, p).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get("p").unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn table_one_triples() {
    assert_eq!(derive_mask_triple(0.6).unwrap().ratios(), &[0.6, 0.5, 0.4]);
    assert_eq!(derive_mask_triple(0.7).unwrap().ratios(), &[0.7, 0.5, 0.3]);
}

#[test]
fn separable_blobs_are_fit_and_scored_perfectly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..200 {
        let c = (i % 2) as u32;
        let cx = if c == 0 { -2.0 } else { 2.0 };
        x.push(vec![cx + rng.random_range(-0.9..0.9), rng.random_range(-3.0..3.0)]);
        y.push(c);
    }
    let m = train_linear_svm(&x, &y, &SvmOptions::default(), 0).unwrap();
    assert_eq!(evaluate_svm(&m, &x, &y).unwrap(), 1.0);
}

#[test]
fn uniform_random_labels_score_one_over_k() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let k = 4;
    let train_x: Vec<Vec<f64>> = (0..400).map(|i| vec![(i % k) as f64]).collect();
    let train_y: Vec<u32> = (0..400).map(|i| (i % k) as u32).collect();
    let m = train_linear_svm(&train_x, &train_y, &SvmOptions::default(), 0).unwrap();
    // Features carry no information about the random labels.
    let x: Vec<Vec<f64>> = (0..10_000).map(|_| vec![rng.random_range(0..k) as f64]).collect();
    let y: Vec<u32> = (0..10_000).map(|_| rng.random_range(0..k) as u32).collect();
    let acc = evaluate_svm(&m, &x, &y).unwrap();
    assert!((acc - 1.0 / k as f64).abs() < 0.05, "{acc}");
}

#[test]
fn earliest_argmax_and_mask_zero_final() {
    let mut rows = Vec::new();
    for (e, a) in [0.70, 0.85, 0.85, 0.80].iter().enumerate() {
        rows.push(ProbeRow {
            epoch: e + 1,
            mask_index: 0,
            svm_accuracy: *a,
        });
        for mask_index in [1, 2] {
            rows.push(ProbeRow {
                epoch: e + 1,
                mask_index,
                svm_accuracy: 0.99,
            });
        }
    }
    let s = select_weights(&rows).unwrap();
    assert_eq!((s.selected_epoch, s.selected_mask_index, s.selected_accuracy), (2, 0, 0.85));
}
