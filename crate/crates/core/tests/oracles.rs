//! Library results against independent references: nalgebra linear algebra,
//! closed-form kernels and direct softmax evaluation.

use kernel_attention::attention::{
    attend_graph, attend_sequence, AttentionConfig, AttentionLayer, GraphMask, Mode, Spectra,
    Variant,
};
use kernel_attention::autodiff::ParamStore;
use kernel_attention::decomposition::{decompose_dot, decompose_gat};
use kernel_attention::numerics::cholesky;
use kernel_attention::rff::{kernel_squared, kernel_stationary, rbf_closed_form};
use kernel_attention::spectral::sample_gaussian;
use kernel_attention::{Matrix, Rng};
use nalgebra::{DMatrix, DVector};

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn leaky(x: f64, c: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        c * x
    }
}

fn softmax_rows(s: &DMatrix<f64>, allowed: impl Fn(usize, usize) -> bool) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(s.nrows(), s.ncols());
    for i in 0..s.nrows() {
        let m = (0..s.ncols())
            .filter(|&j| allowed(i, j))
            .map(|j| s[(i, j)])
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..s.ncols())
            .filter(|&j| allowed(i, j))
            .map(|j| (s[(i, j)] - m).exp())
            .sum();
        for j in (0..s.ncols()).filter(|&j| allowed(i, j)) {
            w[(i, j)] = (s[(i, j)] - m).exp() / z;
        }
    }
    w
}

#[test]
fn dot_decomposition_matches_direct_exponential() {
    let mut rng = Rng::new(11);
    for d in [1, 3, 16] {
        for _ in 0..200 {
            let q: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let k: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let qv = DVector::from_vec(q.clone());
            let kv = DVector::from_vec(k.clone());
            let direct = (qv.dot(&kv) / (d as f64).sqrt()).exp();
            let w = decompose_dot(&q, &k, d, 2.0).unwrap();
            assert!(rel(w.unnormalized, direct) < 1e-12);
            assert!(w.similarity <= 1.0 && w.magnitude >= 1.0);
        }
    }
}

#[test]
fn gat_decomposition_matches_nalgebra_pre_activation() {
    let mut rng = Rng::new(12);
    let (din, dout, c) = (5, 3, 0.2);
    for t in 0..300 {
        let w = Matrix::randn(dout, din, 1.0, &mut rng);
        let a: Vec<f64> = (0..2 * dout).map(|_| rng.normal()).collect();
        let hi: Vec<f64> = (0..din).map(|_| rng.normal()).collect();
        let hj: Vec<f64> = (0..din).map(|_| rng.normal()).collect();
        let wn = to_na(&w);
        let z = (&wn * DVector::from_vec(hi.clone()))
            .iter()
            .chain((&wn * DVector::from_vec(hj.clone())).iter())
            .copied()
            .collect::<Vec<_>>();
        // alternate the LeakyReLU branch
        let pre: f64 = a.iter().zip(&z).map(|(x, y)| x * y).sum();
        let flip = if (pre >= 0.0) == (t % 2 == 0) {
            1.0
        } else {
            -1.0
        };
        let a: Vec<f64> = a.iter().map(|x| x * flip).collect();
        let pre: f64 = a.iter().zip(&z).map(|(x, y)| x * y).sum();
        let direct = leaky(pre, c).exp();
        let dw = decompose_gat(&hi, &hj, &w, &a, c).unwrap();
        assert!(rel(dw.unnormalized, direct) < 1e-10, "pre {pre}");
    }
}

#[test]
fn rbf_random_features_approach_closed_form() {
    let mut rng = Rng::new(13);
    let d = 3;
    let sample = sample_gaussian(d, 200_000, 1.0, &mut rng).unwrap();
    let q = [0.3, -0.2, 0.5];
    let k = [-0.1, 0.4, 0.2];
    let sq: f64 = q.iter().zip(&k).map(|(a, b)| (a - b) * (a - b)).sum();
    let f = kernel_stationary(&q, &k, &sample).unwrap();
    assert!((f - (-sq / 4.0).exp()).abs() < 0.01);
    let f2 = kernel_squared(&q, &k, &sample).unwrap();
    assert!((f2 - rbf_closed_form(&q, &k, 1.0).unwrap()).abs() < 0.02);
}

#[test]
fn cholesky_agrees_with_nalgebra() {
    let mut rng = Rng::new(14);
    let b = Matrix::randn(6, 6, 1.0, &mut rng);
    let bn = to_na(&b);
    let spd = &bn * bn.transpose() + DMatrix::identity(6, 6);
    let ours = cholesky(&Matrix::new(6, 6, spd.transpose().as_slice().to_vec()).unwrap()).unwrap();
    let theirs = spd.cholesky().unwrap().l();
    assert!((to_na(&ours) - theirs).abs().max() < 1e-12);
}

#[test]
fn dot_sequence_attention_matches_direct_softmax() {
    let mut store = ParamStore::new();
    let (t, dm, dk) = (6, 5, 4);
    let cfg = AttentionConfig::new(Variant::Dot, 2, dk);
    let layer = AttentionLayer::new(&mut store, "att", dm, cfg, &Rng::new(15)).unwrap();
    let h = Matrix::randn(t, dm, 1.0, &mut Rng::new(16));
    let out = attend_sequence(&h, &layer, &store, Spectra::Sampled(&Rng::new(17))).unwrap();
    let hn = to_na(&h);
    for (m, head) in layer.heads.iter().enumerate() {
        let q = &hn * to_na(store.get(head.wq));
        let k = &hn * to_na(store.get(head.wk));
        let v = &hn * to_na(store.get(head.wv));
        let s = &q * k.transpose() / (dk as f64).sqrt();
        let w = softmax_rows(&s, |_, _| true);
        assert!((to_na(&out.weights[m]) - &w).abs().max() < 1e-12);
        assert!((to_na(&out.context[m]) - &w * v).abs().max() < 1e-12);
    }
}

#[test]
fn dot_graph_attention_matches_direct_leaky_softmax() {
    let n = 10;
    let mut rng = Rng::new(18);
    let mut edges = Vec::new();
    for i in 0..n {
        edges.push((i, (i + 1) % n));
        let j = rng.index(n);
        if j != i {
            edges.push((i, j));
        }
    }
    let mask = GraphMask::from_edges(n, &edges).unwrap();
    let mut store = ParamStore::new();
    let mut cfg = AttentionConfig::new(Variant::Dot, 2, 3);
    cfg.mode = Mode::Graph;
    let layer = AttentionLayer::new(&mut store, "gat", 4, cfg, &Rng::new(19)).unwrap();
    let h = Matrix::randn(n, 4, 1.0, &mut rng);
    let out = attend_graph(&h, &layer, &store, &mask, Spectra::Sampled(&Rng::new(20))).unwrap();
    let allowed = mask.allowed();
    for (m, head) in layer.heads.iter().enumerate() {
        let z = to_na(&h) * to_na(store.get(head.wq));
        let a = store.get(head.a.unwrap());
        let s = DMatrix::from_fn(n, n, |i, j| {
            let pre: f64 = (0..3)
                .map(|d| a[(0, d)] * z[(i, d)] + a[(0, 3 + d)] * z[(j, d)])
                .sum();
            leaky(pre, 0.2)
        });
        let w = softmax_rows(&s, |i, j| allowed[(i, j)] != 0.0);
        assert!((to_na(&out.weights[m]) - w).abs().max() < 1e-10);
    }
}
