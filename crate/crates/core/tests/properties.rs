use kernel_attention::attention::{
    attend_graph, attend_sequence, AttentionConfig, AttentionLayer, GraphMask, Mode, Spectra,
    Variant,
};
use kernel_attention::autodiff::ParamStore;
use kernel_attention::decomposition::{decompose_dot, decompose_gat};
use kernel_attention::numerics::p_norm;
use kernel_attention::{Matrix, Rng};
use proptest::prelude::*;

fn vec_of(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, d)
}

fn sequence_layer(variant: Variant, seed: u64) -> (AttentionLayer, ParamStore) {
    let mut store = ParamStore::new();
    let mut cfg = AttentionConfig::new(variant, 2, 3);
    cfg.r = 8;
    if !variant.requires_l2() {
        cfg.p = 1.0;
    }
    let layer = AttentionLayer::new(&mut store, "att", 4, cfg, &Rng::new(seed)).unwrap();
    (layer, store)
}

fn assert_row_stochastic(w: &Matrix) {
    for i in 0..w.rows() {
        assert!(w.row(i).iter().all(|&x| x >= 0.0 && x.is_finite()));
        let s: f64 = w.row(i).iter().sum();
        assert!((s - 1.0).abs() < 1e-9, "row {i} sums to {s}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dot_identity_holds((d, q, k) in (1usize..12).prop_flat_map(|d| (Just(d), vec_of(d), vec_of(d)))) {
        let w = decompose_dot(&q, &k, d, 2.0).unwrap();
        let direct = (q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()).exp();
        prop_assert!((w.unnormalized - direct).abs() <= 1e-12 * direct);
    }

    #[test]
    fn gat_identity_holds(hi in vec_of(3), hj in vec_of(3), a in vec_of(4), wv in vec_of(6), c in 0.05f64..1.0) {
        let w = Matrix::new(2, 3, wv).unwrap();
        let dw = decompose_gat(&hi, &hj, &w, &a, c).unwrap();
        let z: Vec<f64> = (0..2).map(|r| (0..3).map(|j| w[(r, j)] * hi[j]).sum()).chain((0..2).map(|r| (0..3).map(|j| w[(r, j)] * hj[j]).sum())).collect();
        let pre: f64 = a.iter().zip(&z).map(|(x, y)| x * y).sum();
        let direct = (if pre >= 0.0 { pre } else { c * pre }).exp();
        prop_assert!((dw.unnormalized - direct).abs() <= 1e-10 * direct);
    }

    #[test]
    fn p_norm_is_absolutely_homogeneous(x in vec_of(5), s in -4.0f64..4.0, p in 0.1f64..4.0) {
        let sx: Vec<f64> = x.iter().map(|v| v * s).collect();
        let lhs = p_norm(&sx, p).unwrap();
        let rhs = s.abs() * p_norm(&x, p).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.max(1.0));
    }

    #[test]
    fn sequence_weights_are_row_stochastic(seed in 0u64..1000, t in 1usize..7, vi in 0usize..Variant::ALL.len()) {
        let variant = Variant::ALL[vi];
        let (layer, store) = sequence_layer(variant, seed);
        let h = Matrix::randn(t, 4, 1.0, &mut Rng::new(seed + 1));
        let out = attend_sequence(&h, &layer, &store, Spectra::Sampled(&Rng::new(seed + 2))).unwrap();
        for w in &out.weights {
            assert_row_stochastic(w);
        }
    }

    #[test]
    fn graph_weights_vanish_off_neighbourhood(seed in 0u64..1000, vi in 0usize..Variant::ALL.len()) {
        let variant = Variant::ALL[vi];
        prop_assume!(!matches!(variant, Variant::Expsin | Variant::Linear));
        let n = 7;
        let edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 2) % n)).collect();
        let mask = GraphMask::from_edges(n, &edges).unwrap();
        let mut store = ParamStore::new();
        let mut cfg = AttentionConfig::new(variant, 2, 3);
        cfg.mode = Mode::Graph;
        cfg.r = 8;
        let layer = AttentionLayer::new(&mut store, "gat", 4, cfg, &Rng::new(seed)).unwrap();
        let h = Matrix::randn(n, 4, 1.0, &mut Rng::new(seed + 1));
        let out = attend_graph(&h, &layer, &store, &mask, Spectra::Sampled(&Rng::new(seed + 2))).unwrap();
        for w in &out.weights {
            assert_row_stochastic(w);
            for i in 0..n {
                for j in 0..n {
                    if !mask.neighbors(i).contains(&j) {
                        prop_assert_eq!(w[(i, j)], 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn sequence_attention_is_deterministic_per_seed() {
    for variant in Variant::ALL {
        let (layer, store) = sequence_layer(variant, 3);
        let h = Matrix::randn(5, 4, 1.0, &mut Rng::new(4));
        let a = attend_sequence(&h, &layer, &store, Spectra::Sampled(&Rng::new(5))).unwrap();
        let b = attend_sequence(&h, &layer, &store, Spectra::Sampled(&Rng::new(5))).unwrap();
        assert_eq!(a.weights, b.weights, "{variant}");
    }
}
