//! Randomized invariants over the tensor primitives and graph builders.

use proptest::prelude::*;

use rrnet_core::build::{build_topk_inter, DistanceMetric};
use rrnet_core::tensor::{Tape, Tensor};

fn small_matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-10.0..10.0f64, r * c).prop_map(move |data| (r, c, data))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn concat_then_split_recovers_both_inputs((r, ca, da) in small_matrix(6, 5), cb in 1..5usize) {
        let a = Tensor::new(r, ca, da.clone(), false).unwrap();
        let db: Vec<f64> = (0..r * cb).map(|i| i as f64 * 0.5 - 3.0).collect();
        let b = Tensor::new(r, cb, db.clone(), false).unwrap();
        let tape = Tape::new();
        let c = tape.concat_cols(&a, &b).unwrap();
        let cv = c.to_vec();
        let total = ca + cb;
        for i in 0..r {
            prop_assert_eq!(&cv[i * total..i * total + ca], &da[i * ca..i * ca + ca]);
            prop_assert_eq!(&cv[i * total + ca..(i + 1) * total], &db[i * cb..i * cb + cb]);
        }
    }

    #[test]
    fn activations_respect_their_ranges((r, c, data) in small_matrix(6, 6)) {
        let x = Tensor::new(r, c, data, false).unwrap();
        let tape = Tape::new();
        prop_assert!(tape.relu(&x).to_vec().iter().all(|&v| v >= 0.0));
        prop_assert!(tape.sigmoid(&x).to_vec().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn scatter_mean_inverts_permutation_gather((r, c, data) in small_matrix(6, 4), seed in 0..1000u64) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let x = Tensor::new(r, c, data, false).unwrap();
        let mut perm: Vec<usize> = (0..r).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let tape = Tape::new();
        let g = tape.gather_rows(&x, &perm).unwrap();
        let back = tape.scatter_mean(&g, &perm, r).unwrap();
        prop_assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn bce_of_uniform_half_is_k_ln2(k in 1..40usize, seed in 0..1000u64) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let p = Tensor::new(k, 1, vec![0.5; k], false).unwrap();
        let y = Tensor::new(k, 1, (0..k).map(|_| f64::from(rng.gen_bool(0.5))).collect(), false).unwrap();
        let tape = Tape::new();
        let loss = tape.bce_loss(&p, &y).unwrap();
        prop_assert!((loss.item() - k as f64 * std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn topk_gives_every_query_exactly_k_partners((n1, n2, data) in small_matrix(6, 7), k in 1..=3usize) {
        prop_assume!(k <= n2);
        let confidence = Tensor::new(n1, n2, data, false).unwrap();
        let edges = build_topk_inter(&confidence, k).unwrap();
        prop_assert_eq!(edges.len(), n1 * k);
        for q in 0..n1 {
            let partners: Vec<usize> = edges.iter().filter(|(s, _)| *s == q).map(|&(_, j)| j).collect();
            prop_assert_eq!(partners.len(), k);
            let distinct: std::collections::HashSet<_> = partners.iter().collect();
            prop_assert_eq!(distinct.len(), k);
        }
    }

    #[test]
    fn knn_never_self_loops_and_has_right_degree(n in 3..8usize, k in 1..3usize, seed in 0..500u64) {
        prop_assume!(k < n);
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let f = Tensor::uniform(n, 3, -1.0, 1.0, &mut rng);
        let edges = rrnet_core::build::build_knn_intra(&f, k, DistanceMetric::Euclidean).unwrap();
        prop_assert_eq!(edges.len(), n * k);
        prop_assert!(edges.iter().all(|&(s, r)| s != r));
        let distinct: std::collections::HashSet<_> = edges.iter().collect();
        prop_assert_eq!(distinct.len(), edges.len());
    }
}
