//! Exact similarity x magnitude factorizations of attention scores.
//!
//! For scaled dot-product attention the unnormalized score splits as
//!
//! ```text
//! exp(q.k / sqrt(d_k)) = exp(-|q - k|^2 / (2 sqrt(d_k)))          similarity (RBF)
//!                      * exp((|q|_p^2 + |k|_p^2) / (2 sqrt(d_k)))  magnitude
//! ```
//!
//! which is an identity at `p = 2`; other `p` give the L^p magnitude family.
//! GAT scores split the same way once the LeakyReLU slope of the active branch
//! is folded into the shared attention vector.
//!
//! All quantities are carried in log space as well, because the magnitude term
//! overflows quickly for small `p`.

use crate::error::{Error, Result};
use crate::numerics::{dot, entropy, log_p_norm_sq, log_sum_exp, sq_dist, Matrix};

/// One query/key score split into its two factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecomposedWeight {
    pub similarity: f64,
    pub magnitude: f64,
    /// `similarity * magnitude`. May be `+inf` when the magnitude overflows; the
    /// log fields stay finite.
    pub unnormalized: f64,
    pub log_similarity: f64,
    pub log_magnitude: f64,
    pub pair: (usize, usize),
}

impl DecomposedWeight {
    fn from_logs(log_similarity: f64, log_magnitude: f64) -> Self {
        let similarity = log_similarity.exp();
        let magnitude = log_magnitude.exp();
        Self {
            similarity,
            magnitude,
            unnormalized: similarity * magnitude,
            log_similarity,
            log_magnitude,
            pair: (0, 0),
        }
    }

    pub fn with_pair(mut self, i: usize, j: usize) -> Self {
        self.pair = (i, j);
        self
    }

    #[inline]
    pub fn log_unnormalized(&self) -> f64 {
        self.log_similarity + self.log_magnitude
    }
}

fn check_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            op,
            left: (a.len(), 1),
            right: (b.len(), 1),
        });
    }
    Ok(())
}

/// Magnitude exponent `(|q|_p^2 + |k|_p^2) / (2 sqrt(d_k))` in log space.
pub fn log_magnitude(q: &[f64], k: &[f64], d_k: usize, p: f64) -> Result<f64> {
    let scale = 2.0 * (d_k as f64).sqrt();
    Ok((p_norm_sq(q, p)? + p_norm_sq(k, p)?) / scale)
}

/// `|x|_p^2`, exact sum of squares at `p = 2`.
pub fn p_norm_sq(x: &[f64], p: f64) -> Result<f64> {
    if p == 2.0 {
        return Ok(dot(x, x));
    }
    Ok(log_p_norm_sq(x, p)?.exp())
}

/// Splits `exp(q.k / sqrt(d_k))` into an RBF similarity and an L^p magnitude.
pub fn decompose_dot(q: &[f64], k: &[f64], d_k: usize, p: f64) -> Result<DecomposedWeight> {
    check_len("decompose_dot", q, k)?;
    if d_k == 0 {
        return Err(crate::error::invalid("d_k must be at least 1"));
    }
    let scale = 2.0 * (d_k as f64).sqrt();
    let log_sim = -sq_dist(q, k) / scale;
    let log_mag = log_magnitude(q, k, d_k, p)?;
    Ok(DecomposedWeight::from_logs(log_sim, log_mag))
}

/// The query/key embedding of a GAT score.
#[derive(Debug, Clone, PartialEq)]
pub struct GatPair {
    /// `[W h_i || 0]`
    pub q_i: Vec<f64>,
    /// `[0 || W h_j]`
    pub k_j: Vec<f64>,
    pub a: Vec<f64>,
    /// Slope of the LeakyReLU branch this pair falls in: 1 or `c`.
    pub c_eff: f64,
}

impl GatPair {
    /// `w` maps input features to `w.rows()` outputs; `a` has length `2 * w.rows()`.
    pub fn new(h_i: &[f64], h_j: &[f64], w: &Matrix, a: &[f64], c: f64) -> Result<Self> {
        if !(c > 0.0 && c <= 1.0) {
            return Err(crate::error::invalid(format!(
                "LeakyReLU slope must lie in (0, 1], got {c}"
            )));
        }
        let out = w.rows();
        if a.len() != 2 * out {
            return Err(Error::DimensionMismatch {
                op: "decompose_gat (attention vector)",
                left: (a.len(), 1),
                right: (2 * out, 1),
            });
        }
        let project = |h: &[f64]| -> Result<Vec<f64>> {
            if h.len() != w.cols() {
                return Err(Error::DimensionMismatch {
                    op: "decompose_gat (projection)",
                    left: w.shape(),
                    right: (h.len(), 1),
                });
            }
            Ok((0..out).map(|r| dot(w.row(r), h)).collect())
        };
        let wh_i = project(h_i)?;
        let wh_j = project(h_j)?;

        let mut q_i = wh_i;
        q_i.resize(2 * out, 0.0);
        let mut k_j = vec![0.0; out];
        k_j.extend_from_slice(&wh_j);

        let pre: f64 = a
            .iter()
            .zip(q_i.iter().zip(&k_j))
            .map(|(ai, (x, y))| ai * (x + y))
            .sum();
        let c_eff = if pre >= 0.0 { 1.0 } else { c };
        Ok(Self {
            q_i,
            k_j,
            a: a.to_vec(),
            c_eff,
        })
    }

    /// `a^T [W h_i || W h_j]`.
    pub fn pre_activation(&self) -> f64 {
        self.a
            .iter()
            .zip(self.q_i.iter().zip(&self.k_j))
            .map(|(ai, (x, y))| ai * (x + y))
            .sum()
    }

    /// Splits the pair's score into two similarity factors (through the scaled
    /// attention vector) and one magnitude factor.
    pub fn decompose(&self) -> DecomposedWeight {
        let ca: Vec<f64> = self.a.iter().map(|v| self.c_eff * v).collect();
        let log_sim = -0.5 * sq_dist(&self.q_i, &ca) - 0.5 * sq_dist(&ca, &self.k_j);
        let log_mag =
            0.5 * (2.0 * dot(&ca, &ca) + dot(&self.q_i, &self.q_i) + dot(&self.k_j, &self.k_j));
        DecomposedWeight::from_logs(log_sim, log_mag)
    }
}

/// Splits a GAT score `exp(LeakyReLU(a^T [W h_i || W h_j]))`.
pub fn decompose_gat(
    h_i: &[f64],
    h_j: &[f64],
    w: &Matrix,
    a: &[f64],
    c: f64,
) -> Result<DecomposedWeight> {
    Ok(GatPair::new(h_i, h_j, w, a, c)?.decompose())
}

/// `LeakyReLU` with slope 1 on the non-negative side.
#[inline]
pub fn leaky_relu(x: f64, c: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        c * x
    }
}

/// Normalizes a row of unnormalized weights. Works from the log fields, so
/// rows whose magnitudes overflow are still handled.
pub fn attention_row(weights: &[DecomposedWeight]) -> Result<Vec<f64>> {
    let logs: Vec<f64> = weights
        .iter()
        .map(DecomposedWeight::log_unnormalized)
        .collect();
    attention_row_from_logs(&logs)
}

/// Normalizes `exp(logs)` to sum to one.
pub fn attention_row_from_logs(logs: &[f64]) -> Result<Vec<f64>> {
    if logs.is_empty() {
        return Err(Error::EmptyRow);
    }
    if logs.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
        return Err(Error::NonFinite {
            context: "attention row log-weights".into(),
        });
    }
    let lse = log_sum_exp(logs);
    if !lse.is_finite() {
        return Err(Error::InvalidParameter(
            "attention row has no positive weight".into(),
        ));
    }
    let mut row: Vec<f64> = logs.iter().map(|l| (l - lse).exp()).collect();
    let s: f64 = row.iter().sum();
    for v in &mut row {
        *v /= s;
    }
    Ok(row)
}

/// Tolerance under which two top log-weights count as tied.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// One row of a sparsity sweep at one exponent.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityRow {
    pub p: f64,
    pub row: usize,
    pub max_weight: f64,
    pub entropy: f64,
    pub argmax: usize,
    /// `1 - |k|_p(second) / |k|_p(first)` over the keys, at this `p`.
    pub key_norm_gap: f64,
}

/// Output of [`sparsity_limit_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityReport {
    pub entries: Vec<SparsityRow>,
    /// Rows whose top two weights tie at `p = 2` (or at the largest `p` swept).
    pub tied_rows: Vec<usize>,
    /// Share of untied rows whose entropy never increases along the sweep.
    pub monotone_entropy_fraction: f64,
    /// Untied rows whose max weight at the smallest `p` is below `1 - 1e-2`.
    pub not_one_hot: Vec<usize>,
}

impl SparsityReport {
    pub fn at(&self, p: f64) -> impl Iterator<Item = &SparsityRow> {
        self.entries.iter().filter(move |e| e.p == p)
    }
}

fn key_norm_gap(keys: &Matrix, p: f64) -> Result<f64> {
    let mut logs = Vec::with_capacity(keys.rows());
    for j in 0..keys.rows() {
        logs.push(log_p_norm_sq(keys.row(j), p)?);
    }
    if logs.len() < 2 {
        return Ok(1.0);
    }
    logs.sort_by(|a, b| b.total_cmp(a));
    // log of squared norms: ratio of norms = exp((l2 - l1) / 2)
    Ok(1.0 - (0.5 * (logs[1] - logs[0])).exp())
}

/// Sweeps the magnitude exponent `p` over `p_grid` (strictly descending) and
/// records how concentrated each attention row becomes.
pub fn sparsity_limit_check(
    queries: &Matrix,
    keys: &Matrix,
    d_k: usize,
    p_grid: &[f64],
) -> Result<SparsityReport> {
    if queries.cols() != keys.cols() {
        return Err(Error::DimensionMismatch {
            op: "sparsity_limit_check",
            left: queries.shape(),
            right: keys.shape(),
        });
    }
    if keys.rows() == 0 {
        return Err(Error::EmptyRow);
    }
    if p_grid.is_empty() || p_grid.iter().any(|&p| !(p > 0.0)) {
        return Err(crate::error::invalid(
            "p grid must be non-empty and positive",
        ));
    }
    if p_grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(crate::error::invalid("p grid must be strictly descending"));
    }

    let tie_p = if p_grid.contains(&2.0) {
        2.0
    } else {
        p_grid[0]
    };
    let mut entries = Vec::with_capacity(p_grid.len() * queries.rows());
    let mut tied_rows = Vec::new();

    for &p in p_grid {
        let gap = key_norm_gap(keys, p)?;
        for i in 0..queries.rows() {
            let mut logs = Vec::with_capacity(keys.rows());
            for j in 0..keys.rows() {
                logs.push(decompose_dot(queries.row(i), keys.row(j), d_k, p)?.log_unnormalized());
            }
            if p == tie_p && keys.rows() > 1 {
                let mut sorted = logs.clone();
                sorted.sort_by(|a, b| b.total_cmp(a));
                if sorted[0] - sorted[1] <= TIE_TOLERANCE * sorted[0].abs().max(1.0) {
                    tied_rows.push(i);
                }
            }
            let row = attention_row_from_logs(&logs)?;
            let (argmax, &max_weight) = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .expect("row is non-empty");
            entries.push(SparsityRow {
                p,
                row: i,
                max_weight,
                entropy: entropy(&row),
                argmax,
                key_norm_gap: gap,
            });
        }
    }

    let n_rows = queries.rows();
    let untied: Vec<usize> = (0..n_rows).filter(|i| !tied_rows.contains(i)).collect();
    let row_series = |i: usize| entries.iter().filter(move |e| e.row == i);
    let monotone = untied
        .iter()
        .filter(|&&i| {
            let ent: Vec<f64> = row_series(i).map(|e| e.entropy).collect();
            ent.windows(2).all(|w| w[1] <= w[0] + 1e-12)
        })
        .count();
    let p_min = *p_grid.last().expect("non-empty grid");
    let not_one_hot = untied
        .iter()
        .copied()
        .filter(|&i| {
            row_series(i)
                .find(|e| e.p == p_min)
                .is_some_and(|e| e.max_weight < 1.0 - 1e-2)
        })
        .collect();

    Ok(SparsityReport {
        entries,
        tied_rows,
        monotone_entropy_fraction: if untied.is_empty() {
            1.0
        } else {
            monotone as f64 / untied.len() as f64
        },
        not_one_hot,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{stable_softmax, Rng};

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn dot_examples() {
        let w = decompose_dot(&[1.0, 0.0], &[0.0, 1.0], 2, 2.0).unwrap();
        // exp(-2 / (2 sqrt 2)) and exp(2 / (2 sqrt 2)), evaluated independently.
        let sim = (-1.0 / 2f64.sqrt()).exp();
        let mag = (1.0 / 2f64.sqrt()).exp();
        assert!(rel(w.similarity, sim) < 1e-14);
        assert!(rel(w.magnitude, mag) < 1e-14);
        assert!((w.similarity - 0.49307).abs() < 1e-5);
        assert!((w.magnitude - 2.02812).abs() < 1e-5);
        assert!((w.unnormalized - 1.0).abs() < 1e-14);

        for d_k in [1, 3, 16] {
            let z = decompose_dot(&[0.0; 4], &[0.0; 4], d_k, 2.0).unwrap();
            assert_eq!((z.similarity, z.magnitude, z.unnormalized), (1.0, 1.0, 1.0));
        }
        assert!(decompose_dot(&[1.0], &[1.0, 2.0], 1, 2.0).is_err());
    }

    #[test]
    fn dot_identity_random_batch() {
        let mut rng = Rng::new(5);
        let mut worst = 0.0_f64;
        for _ in 0..1000 {
            let q: Vec<f64> = (0..8).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
            let k: Vec<f64> = (0..8).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
            let w = decompose_dot(&q, &k, 8, 2.0).unwrap();
            worst = worst.max(rel(w.unnormalized, (dot(&q, &k) / 8f64.sqrt()).exp()));
        }
        assert!(worst <= 1e-12, "worst {worst:e}");
    }

    #[test]
    fn gat_zero_features() {
        let mut rng = Rng::new(3);
        let w = Matrix::randn(3, 4, 1.0, &mut rng);
        let a = rng.normal_vec(6);
        let d = decompose_gat(&[0.0; 4], &[0.0; 4], &w, &a, 0.2).unwrap();
        assert!((d.unnormalized - 1.0).abs() < 1e-12);
        assert!(rel(d.similarity * d.magnitude, 1.0) < 1e-12);
    }

    #[test]
    fn gat_both_branches() {
        let mut rng = Rng::new(8);
        let (mut seen_pos, mut seen_neg) = (false, false);
        for _ in 0..200 {
            let w = Matrix::randn(3, 5, 1.0, &mut rng);
            let a = rng.normal_vec(6);
            let hi = rng.normal_vec(5);
            let hj = rng.normal_vec(5);
            let pair = GatPair::new(&hi, &hj, &w, &a, 0.2).unwrap();
            let pre = pair.pre_activation();
            let want = if pre > 0.0 {
                seen_pos = true;
                pre.exp()
            } else {
                seen_neg = true;
                (0.2 * pre).exp()
            };
            let d = pair.decompose();
            assert!(rel(d.unnormalized, want) <= 1e-10);
            assert!(pair.c_eff == 1.0 || pair.c_eff == 0.2);
            // disjoint support
            assert!(pair.q_i[3..].iter().all(|&v| v == 0.0));
            assert!(pair.k_j[..3].iter().all(|&v| v == 0.0));
        }
        assert!(seen_pos && seen_neg);
    }

    #[test]
    fn gat_shape_errors() {
        let w = Matrix::zeros(2, 3);
        assert!(decompose_gat(&[0.0; 3], &[0.0; 3], &w, &[0.0; 3], 0.2).is_err());
        assert!(decompose_gat(&[0.0; 2], &[0.0; 3], &w, &[0.0; 4], 0.2).is_err());
        assert!(decompose_gat(&[0.0; 3], &[0.0; 3], &w, &[0.0; 4], 0.0).is_err());
    }

    #[test]
    fn row_examples() {
        let mk = |u: f64| DecomposedWeight::from_logs(u.ln(), 0.0);
        let row = attention_row(&[mk(2.0), mk(2.0), mk(2.0), mk(2.0)]).unwrap();
        assert!(row.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let row = attention_row(&[mk(1.0), mk(3.0)]).unwrap();
        assert!((row[0] - 0.25).abs() < 1e-15 && (row[1] - 0.75).abs() < 1e-15);
        assert_eq!(attention_row(&[]), Err(Error::EmptyRow));

        let mut rng = Rng::new(1);
        let vals: Vec<f64> = (0..9).map(|_| rng.uniform_range(0.01, 50.0)).collect();
        let ws: Vec<_> = vals.iter().map(|&v| mk(v)).collect();
        let logs: Vec<f64> = vals.iter().map(|v| v.ln()).collect();
        let oracle = stable_softmax(&logs, None).unwrap();
        for (a, b) in attention_row(&ws).unwrap().iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn sparsity_single_key_is_one() {
        let q = Matrix::from_rows(&[vec![0.3, -0.2], vec![1.0, 2.0]]).unwrap();
        let k = Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let rep = sparsity_limit_check(&q, &k, 2, &[2.0, 1.0, 0.5, 0.1, 0.05]).unwrap();
        assert!(rep.entries.iter().all(|e| e.max_weight == 1.0));
    }

    #[test]
    fn sparsity_sweep_concentrates() {
        let mut rng = Rng::new(21);
        let q = Matrix::from_fn(40, 8, |_, _| rng.uniform_range(-1.0, 1.0));
        let k = Matrix::from_fn(10, 8, |_, _| rng.uniform_range(-1.0, 1.0));
        let grid = [2.0, 1.0, 0.5, 0.1, 0.05];
        let rep = sparsity_limit_check(&q, &k, 8, &grid).unwrap();
        assert!(rep.tied_rows.is_empty());
        assert!(rep.not_one_hot.is_empty());
        for e in rep.at(0.05) {
            assert!(e.max_weight >= 0.99);
        }
        assert!(rep.monotone_entropy_fraction >= 0.95);
        assert!(sparsity_limit_check(&q, &k, 8, &[0.5, 1.0]).is_err());
        assert!(sparsity_limit_check(&q, &k, 8, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn sparsity_flags_ties() {
        // Two identical keys always tie.
        let q = Matrix::from_rows(&[vec![0.1, 0.2]]).unwrap();
        let k = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let rep = sparsity_limit_check(&q, &k, 2, &[2.0, 0.1]).unwrap();
        assert_eq!(rep.tied_rows, vec![0]);
        assert!(rep.not_one_hot.is_empty());
        assert!(rep.at(0.1).all(|e| (e.max_weight - 0.5).abs() < 1e-12));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vec8() -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-3.0..3.0_f64, 8)
        }

        proptest! {
            #[test]
            fn dot_identity(q in vec8(), k in vec8(), d_k in 1usize..64) {
                let w = decompose_dot(&q, &k, d_k, 2.0).unwrap();
                let want = (dot(&q, &k) / (d_k as f64).sqrt()).exp();
                prop_assert!(rel(w.unnormalized, want) <= 1e-12);
                prop_assert!(w.similarity > 0.0 && w.similarity <= 1.0);
            }

            #[test]
            fn row_scale_invariance(
                logs in proptest::collection::vec(-10.0..10.0_f64, 1..16),
                c in -30.0..30.0_f64,
            ) {
                let a = attention_row_from_logs(&logs).unwrap();
                let shifted: Vec<f64> = logs.iter().map(|l| l + c).collect();
                let b = attention_row_from_logs(&shifted).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() <= 1e-14);
                }
                prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }

            #[test]
            fn magnitude_scales_quadratically(q in vec8(), k in vec8(), t in 1.0..4.0_f64) {
                prop_assume!(dot(&q, &q) + dot(&k, &k) > 1e-3);
                let base = decompose_dot(&q, &k, 8, 2.0).unwrap();
                let tq: Vec<f64> = q.iter().map(|v| t * v).collect();
                let tk: Vec<f64> = k.iter().map(|v| t * v).collect();
                let scaled = decompose_dot(&tq, &tk, 8, 2.0).unwrap();
                prop_assert!(rel(scaled.log_magnitude, t * t * base.log_magnitude) <= 1e-10);
            }

            #[test]
            fn gat_identity(
                seed in 0u64..1_000_000,
                c in 0.05..1.0_f64,
            ) {
                let mut rng = crate::numerics::Rng::new(seed);
                let w = Matrix::randn(4, 3, 1.0, &mut rng);
                let a = rng.normal_vec(8);
                let hi = rng.normal_vec(3);
                let hj = rng.normal_vec(3);
                let pair = GatPair::new(&hi, &hj, &w, &a, c).unwrap();
                let want = leaky_relu(pair.pre_activation(), c).exp();
                prop_assert!(rel(pair.decompose().unnormalized, want) <= 1e-10);
            }
        }
    }
}
