use proptest::prelude::*;
use rand::SeedableRng;
use uniembed::model_io::{model_from_json, model_to_json};
use uniembed::rng::Rng;
use uniembed::synth::{dataset_from_csv, dataset_to_csv};
use uniembed::*;

fn matrix(rows: std::ops::RangeInclusive<usize>, cols: usize) -> impl Strategy<Value = Matrix> {
    rows.prop_flat_map(move |r| {
        prop::collection::vec(-5.0f64..5.0, r * cols).prop_map(move |d| Matrix::from_vec(r, cols, d).unwrap())
    })
}

fn small_spec() -> impl Strategy<Value = GenSpec> {
    (1usize..4, 2usize..5, 2usize..5, 1usize..6, any::<u64>()).prop_map(|(v, p, i, d, seed)| GenSpec {
        verticals: v,
        products_per_vertical: p,
        items_per_product: i,
        input_dim: d,
        seed,
        ..GenSpec::default()
    })
}

fn small_net() -> impl Strategy<Value = NetConfig> {
    (
        1usize..6,
        prop::collection::vec(1usize..6, 0..3),
        2usize..5,
        any::<bool>(),
        any::<bool>(),
        any::<u64>(),
    )
        .prop_map(
            |(input_dim, hidden_dims, embedding_dim, activate_output, normalize_output, seed)| NetConfig {
                input_dim,
                hidden_dims,
                embedding_dim,
                activation: Activation::Relu,
                activate_output,
                normalize_output,
                seed,
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn triplet_gradients_sum_to_zero(a in prop::array::uniform4(-1.0f64..1.0),
                                     p in prop::array::uniform4(-1.0f64..1.0),
                                     n in prop::array::uniform4(-1.0f64..1.0),
                                     alpha in 0.0f64..2.0) {
        let t = triplet_loss(&a, &p, &n, alpha).unwrap();
        prop_assert!(t.loss >= 0.0);
        for c in 0..4 {
            let s = t.grad_anchor[c] + t.grad_positive[c] + t.grad_negative[c];
            prop_assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_outputs_have_unit_norm(cfg in small_net(), seed in any::<u64>()) {
        let cfg = NetConfig { normalize_output: true, ..cfg };
        let net = EmbeddingNet::new(cfg.clone()).unwrap();
        let mut rng = Rng::seed_from_u64(seed);
        let x = Matrix::from_vec(6, cfg.input_dim,
            (0..6 * cfg.input_dim).map(|_| rand::Rng::random_range(&mut rng, -3.0..3.0)).collect()).unwrap();
        let out = net.embed_rows(&x).unwrap();
        for row in out.row_iter() {
            let n = uniembed::linalg::l2_norm(row);
            prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn model_json_round_trip_is_exact(cfg in small_net()) {
        let net = EmbeddingNet::new(cfg).unwrap();
        prop_assert_eq!(model_from_json(&model_to_json(&net)).unwrap(), net);
    }

    #[test]
    fn dataset_csv_round_trip_is_exact(spec in small_spec()) {
        let ds = generate(&spec).unwrap();
        let back = dataset_from_csv(&dataset_to_csv(&ds)).unwrap();
        prop_assert_eq!(back.items(), ds.items());
        prop_assert!(ds.queries_covered());
    }

    #[test]
    fn label_noise_keeps_vertical_split_features(spec in small_spec(), rate in 0.0f64..=1.0, seed in any::<u64>()) {
        let spec = GenSpec { products_per_vertical: spec.products_per_vertical.max(2), ..spec };
        let ds = generate(&spec).unwrap();
        let noisy = add_label_noise(&ds, rate, &mut Rng::seed_from_u64(seed)).unwrap();
        for (a, b) in ds.items().iter().zip(noisy.items()) {
            prop_assert_eq!(&a.vertical, &b.vertical);
            prop_assert_eq!(a.split, b.split);
            prop_assert_eq!(&a.features, &b.features);
            prop_assert!(b.product_id.starts_with(&a.vertical));
        }
    }

    #[test]
    fn mined_triplets_respect_labels(emb in matrix(2..=24, 3), labels in prop::collection::vec((0usize..5, 0usize..2), 24)) {
        let n = emb.rows();
        let products: Vec<usize> = labels[..n].iter().map(|l| l.0 * 2 + l.1).collect();
        let verticals: Vec<usize> = labels[..n].iter().map(|l| l.1).collect();
        for t in mine_semi_hard(&emb, &products, &verticals, 0.2).unwrap() {
            prop_assert!(t.anchor != t.positive);
            prop_assert_eq!(products[t.anchor], products[t.positive]);
            prop_assert!(products[t.anchor] != products[t.negative]);
            prop_assert_eq!(verticals[t.anchor], verticals[t.negative]);
        }
    }

    #[test]
    fn knn_ignores_index_order_and_scale(pts in matrix(1..=30, 2), q in prop::array::uniform2(-5.0f64..5.0),
                                         k in 1usize..40, c in 0.01f64..100.0, rot in 0usize..30) {
        let snapped: Vec<Vec<f64>> = pts.row_iter().map(|r| r.iter().map(|v| v.round()).collect()).collect();
        let index: Vec<(usize, &[f64])> = snapped.iter().enumerate().map(|(i, r)| (i, r.as_slice())).collect();
        let base = knn(&q, &index, k).unwrap();

        let mut shuffled = index.clone();
        shuffled.rotate_left(rot % index.len());
        shuffled.reverse();
        prop_assert_eq!(&knn(&q, &shuffled, k).unwrap(), &base);

        // Powers of two keep scaling exact, so ties survive.
        let c = 2f64.powi(c.log2().round() as i32);
        let scaled: Vec<Vec<f64>> = snapped.iter().map(|r| r.iter().map(|v| v * c).collect()).collect();
        let scaled_index: Vec<(usize, &[f64])> = scaled.iter().enumerate().map(|(i, r)| (i, r.as_slice())).collect();
        let sq = [q[0] * c, q[1] * c];
        prop_assert_eq!(knn(&sq, &scaled_index, k).unwrap(), base);
    }

    #[test]
    fn accuracy_is_monotone_in_k(spec in small_spec(), net_seed in any::<u64>()) {
        let ds = generate(&spec).unwrap();
        let split = EvalSplit::from_dataset(&ds).unwrap();
        let net = EmbeddingNet::new(NetConfig { input_dim: spec.input_dim, hidden_dims: vec![4], embedding_dim: 2,
                                                seed: net_seed, ..NetConfig::default() }).unwrap();
        let report = top_k_accuracy(&net, &ds, &split, &[1, 5, 20]).unwrap();
        for acc in report.verticals.values() {
            prop_assert!(acc.n_queries > 0);
            for w in acc.accuracy.windows(2) {
                prop_assert!(w[0].accuracy <= w[1].accuracy);
            }
        }
        let reversed = EvalSplit::new(split.queries().iter().rev().copied().collect(),
                                      split.index().iter().rev().copied().collect()).unwrap();
        prop_assert_eq!(top_k_accuracy(&net, &ds, &reversed, &[1, 5, 20]).unwrap(), report);
    }

    #[test]
    fn pca_ignores_row_order_and_translation(m in matrix(2..=20, 4), rot in 0usize..20,
                                              shift in prop::array::uniform4(-10.0f64..10.0)) {
        let base = pca_project(&m, 2).unwrap();
        let mut order: Vec<usize> = (0..m.rows()).collect();
        order.rotate_left(rot % m.rows());
        let permuted = pca_project(&m.select_rows(&order), 2).unwrap();
        prop_assert_eq!(&permuted.explained_variance, &base.explained_variance);
        prop_assert_eq!(&permuted.components, &base.components);
        for (new_row, &old_row) in order.iter().enumerate() {
            prop_assert_eq!(permuted.coordinates.row(new_row), base.coordinates.row(old_row));
        }
        prop_assert!(base.explained_variance.iter().sum::<f64>() <= base.total_variance * (1.0 + 1e-12) + 1e-12);

        let mut moved = m.clone();
        for r in 0..moved.rows() {
            moved.row_mut(r).iter_mut().zip(shift).for_each(|(v, s)| *v += s);
        }
        let translated = pca_project(&moved, 2).unwrap();
        for (a, b) in translated.coordinates.as_slice().iter().zip(base.coordinates.as_slice()) {
            prop_assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn occupancy_matrix_symmetric_and_silhouette_bounded(a in matrix(2..=15, 3), b in matrix(2..=15, 3)) {
        let r = occupancy(&[("a".to_string(), a), ("b".to_string(), b)]).unwrap();
        for i in 0..2 {
            prop_assert_eq!(r.inter_centroid_distance[i][i], 0.0);
            for j in 0..2 {
                prop_assert_eq!(r.inter_centroid_distance[i][j], r.inter_centroid_distance[j][i]);
            }
        }
        prop_assert!((-1.0..=1.0).contains(&r.mean_silhouette));
    }
}
