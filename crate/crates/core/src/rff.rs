//! Random Fourier feature kernels.
//!
//! With frequencies `w_r`, the stationary estimate is
//! `f(q, k) = (1/R) sum_r cos(w_r . (q - k))`, the real part of the Monte Carlo
//! Bochner integral. A non-stationary kernel uses two frequency sets and the
//! summed features `cos(w1 . x) + cos(w2 . x)`, `sin(w1 . x) + sin(w2 . x)`.
//!
//! ```
//! use kernel_attention::rff::{kernel_squared, rbf_closed_form};
//! use kernel_attention::spectral::sample_gaussian;
//! use kernel_attention::Rng;
//!
//! let sample = sample_gaussian(2, 20_000, 1.0, &mut Rng::new(0)).unwrap();
//! let (q, k) = ([0.3, -0.2], [-0.1, 0.4]);
//! let approx = kernel_squared(&q, &k, &sample).unwrap();
//! let exact = rbf_closed_form(&q, &k, 1.0).unwrap();
//! assert!((approx - exact).abs() < 0.05);
//! ```

use crate::autodiff::{Phase, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::numerics::{dot, sq_dist};
use crate::spectral::{SpectralKind, SpectralSample};

fn check_dim(op: &'static str, x: &[f64], sample: &SpectralSample) -> Result<()> {
    if x.len() != sample.dim() {
        return Err(Error::DimensionMismatch {
            op,
            left: (x.len(), 1),
            right: (sample.dim(), 1),
        });
    }
    Ok(())
}

/// `[cos(w_1.x), sin(w_1.x), ..., cos(w_R.x), sin(w_R.x)]`.
pub fn features_stationary(x: &[f64], sample: &SpectralSample) -> Result<Vec<f64>> {
    if sample.kind() != SpectralKind::Stationary {
        return Err(invalid("features_stationary needs a stationary sample"));
    }
    check_dim("features_stationary", x, sample)?;
    let mut out = Vec::with_capacity(2 * sample.count());
    for r in 0..sample.count() {
        let a = dot(sample.points.row(r), x);
        out.push(a.cos());
        out.push(a.sin());
    }
    Ok(out)
}

/// Summed features of a non-stationary pair, same layout as
/// [`features_stationary`].
pub fn features_nonstationary(x: &[f64], sample: &SpectralSample) -> Result<Vec<f64>> {
    let second = sample
        .second
        .as_ref()
        .ok_or_else(|| invalid("features_nonstationary needs a sample pair"))?;
    check_dim("features_nonstationary", x, sample)?;
    let mut out = Vec::with_capacity(2 * sample.count());
    for r in 0..sample.count() {
        let a = dot(sample.points.row(r), x);
        let b = dot(second.row(r), x);
        out.push(a.cos() + b.cos());
        out.push(a.sin() + b.sin());
    }
    Ok(out)
}

/// `(1/R) sum_r cos(w_r . (q - k))`.
pub fn kernel_stationary(q: &[f64], k: &[f64], sample: &SpectralSample) -> Result<f64> {
    if sample.kind() != SpectralKind::Stationary {
        return Err(invalid("kernel_stationary needs a stationary sample"));
    }
    check_dim("kernel_stationary", q, sample)?;
    check_dim("kernel_stationary", k, sample)?;
    let delta: Vec<f64> = q.iter().zip(k).map(|(a, b)| a - b).collect();
    let r = sample.count();
    let s: f64 = (0..r)
        .map(|i| dot(sample.points.row(i), &delta).cos())
        .sum();
    Ok(s / r as f64)
}

/// `(1/4R) sum_r [C_r(q) C_r(k) + S_r(q) S_r(k)]` with summed cos/sin features.
pub fn kernel_nonstationary(q: &[f64], k: &[f64], sample: &SpectralSample) -> Result<f64> {
    let fq = features_nonstationary(q, sample)?;
    let fk = features_nonstationary(k, sample)?;
    Ok(dot(&fq, &fk) / (4 * sample.count()) as f64)
}

/// The kernel estimate for whichever kind `sample` is.
pub fn kernel(q: &[f64], k: &[f64], sample: &SpectralSample) -> Result<f64> {
    match sample.kind() {
        SpectralKind::Stationary => kernel_stationary(q, k, sample),
        SpectralKind::NonstationaryPair => kernel_nonstationary(q, k, sample),
    }
}

/// `f(q, k)^2`, non-negative by construction.
pub fn kernel_squared(q: &[f64], k: &[f64], sample: &SpectralSample) -> Result<f64> {
    let f = kernel(q, k, sample)?;
    Ok(f * f)
}

/// `exp(-|q - k|^2 / (2 l^2))`.
pub fn rbf_closed_form(q: &[f64], k: &[f64], lengthscale: f64) -> Result<f64> {
    if !(lengthscale > 0.0) {
        return Err(invalid(format!(
            "lengthscale must be positive, got {lengthscale}"
        )));
    }
    if q.len() != k.len() {
        return Err(Error::DimensionMismatch {
            op: "rbf_closed_form",
            left: (q.len(), 1),
            right: (k.len(), 1),
        });
    }
    Ok((-sq_dist(q, k) / (2.0 * lengthscale * lengthscale)).exp())
}

/// Inputs to the uniform error bound for the non-stationary estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorBoundInputs {
    /// Diameter of the compact input domain.
    pub diameter: f64,
    /// `E[w1 . w1]`.
    pub sigma1_sq: f64,
    /// `E[w2 . w2]`.
    pub sigma2_sq: f64,
    pub r: usize,
    pub d: usize,
    pub epsilon: f64,
}

impl ErrorBoundInputs {
    fn validate(&self) -> Result<()> {
        let pos = [self.diameter, self.sigma1_sq, self.sigma2_sq, self.epsilon];
        if pos.iter().any(|v| !(*v > 0.0 && v.is_finite())) || self.d == 0 {
            return Err(invalid(format!(
                "error bound inputs must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    fn log_prefactor(&self) -> f64 {
        let ratio = self.diameter * (self.sigma1_sq + self.sigma2_sq).sqrt() / self.epsilon;
        256f64.ln() + 2.0 * ratio.ln()
    }

    /// `2^8 (D sqrt(s1 + s2) / eps)^2 exp(-R eps^2 / (2 (d + 1)))`, an upper
    /// bound on the probability that the sup error reaches `eps`.
    pub fn bound(&self) -> Result<f64> {
        self.validate()?;
        if self.r == 0 {
            return Err(invalid("R must be at least 1"));
        }
        let rate = self.r as f64 * self.epsilon * self.epsilon / (2.0 * (self.d as f64 + 1.0));
        Ok((self.log_prefactor() - rate).exp())
    }

    /// Smallest `R` whose bound is at most `delta`. Ignores `self.r`.
    pub fn min_samples(&self, delta: f64) -> Result<usize> {
        self.validate()?;
        if !(delta > 0.0 && delta < 1.0) {
            return Err(invalid(format!("delta must lie in (0, 1), got {delta}")));
        }
        let need = 2.0 * (self.d as f64 + 1.0) / (self.epsilon * self.epsilon)
            * (self.log_prefactor() - delta.ln());
        Ok(need.ceil().max(1.0) as usize)
    }
}

/// Free-function form of [`ErrorBoundInputs::bound`].
pub fn error_bound(inputs: &ErrorBoundInputs) -> Result<f64> {
    inputs.bound()
}

/// Frequencies for [`gram`]: one set (stationary) or two (non-stationary).
#[derive(Debug, Clone, Copy)]
pub struct KernelPoints {
    pub first: Var,
    pub second: Option<Var>,
}

/// `[cos(X W^T), sin(X W^T)]`, summed over the pair for non-stationary points.
pub fn feature_map(tape: &mut Tape, x: Var, points: KernelPoints) -> Var {
    let trig = |tape: &mut Tape, w: Var| {
        let a = tape.matmul_nt(x, w);
        (tape.cos(a), tape.sin(a))
    };
    let (mut c, mut s) = trig(tape, points.first);
    if let Some(w2) = points.second {
        let (c2, s2) = trig(tape, w2);
        c = tape.add(c, c2);
        s = tape.add(s, s2);
    }
    tape.concat_cols(&[c, s])
}

/// Kernel estimates between feature rows, normalized by `R` (or `4R`).
///
/// Counts the feature products under [`Phase::Pairwise`].
pub fn gram_from_features(tape: &mut Tape, fx: Var, fy: Var, points: &KernelPoints) -> Var {
    let r = tape.value(points.first).rows() as f64;
    let norm = if points.second.is_some() { 4.0 * r } else { r };
    let prev = tape.set_phase(Phase::Pairwise);
    let g = tape.matmul_nt(fx, fy);
    let g = tape.scale(g, 1.0 / norm);
    tape.set_phase(prev);
    g
}

/// `K[i, j] = f(x_i, y_j)`; features are counted under [`Phase::Features`].
pub fn gram(tape: &mut Tape, x: Var, y: Var, points: KernelPoints) -> Var {
    let prev = tape.set_phase(Phase::Features);
    let fx = feature_map(tape, x, points);
    let fy = feature_map(tape, y, points);
    tape.set_phase(prev);
    gram_from_features(tape, fx, fy, &points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Matrix, Rng};
    use crate::spectral::sample_gaussian;

    fn one_point(w: &[f64]) -> SpectralSample {
        SpectralSample::stationary(Matrix::row_vector(w), 0).unwrap()
    }

    #[test]
    fn feature_examples() {
        let s = sample_gaussian(3, 4, 1.0, &mut Rng::new(1)).unwrap();
        assert_eq!(
            features_stationary(&[0.0; 3], &s).unwrap(),
            vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]
        );
        let f = features_stationary(&[1.0, 0.0], &one_point(&[std::f64::consts::PI, 0.0])).unwrap();
        assert_eq!(f[0], -1.0);
        assert!(f[1].abs() < 1e-15);
        let x = [0.7, -3.0, 12.0];
        assert!(features_stationary(&x, &s)
            .unwrap()
            .iter()
            .all(|v| v.abs() <= 1.0));
        assert!(features_stationary(&[1.0], &s).is_err());
    }

    #[test]
    fn stationary_kernel_examples() {
        let s = sample_gaussian(3, 50, 1.0, &mut Rng::new(2)).unwrap();
        let q = [0.2, -0.4, 1.1];
        assert_eq!(kernel_stationary(&q, &q, &s).unwrap(), 1.0);
        let orth = one_point(&[1.0, -1.0, 0.0]);
        assert_eq!(
            kernel_stationary(&[1.0, 1.0, 0.0], &[0.0, 0.0, 0.0], &orth).unwrap(),
            1.0
        );
        assert!(kernel_stationary(&q, &[1.0], &s).is_err());
    }

    #[test]
    fn stationary_kernel_converges_to_half_exponent() {
        let s = sample_gaussian(3, 100_000, 1.0, &mut Rng::new(3)).unwrap();
        let mut rng = Rng::new(4);
        for _ in 0..20 {
            let q: Vec<f64> = (0..3).map(|_| rng.uniform_range(-0.6, 0.6)).collect();
            let k: Vec<f64> = (0..3).map(|_| rng.uniform_range(-0.6, 0.6)).collect();
            let want = (-sq_dist(&q, &k) / 4.0).exp();
            assert!((kernel_stationary(&q, &k, &s).unwrap() - want).abs() < 0.02);
        }
    }

    #[test]
    fn nonstationary_collapses_on_equal_samples() {
        let s = sample_gaussian(2, 64, 1.0, &mut Rng::new(5)).unwrap();
        let pair = SpectralSample::pair(s.points.clone(), s.points.clone(), 0).unwrap();
        let mut rng = Rng::new(6);
        for _ in 0..50 {
            let q = [rng.normal(), rng.normal()];
            let k = [rng.normal(), rng.normal()];
            let a = kernel_nonstationary(&q, &k, &pair).unwrap();
            let b = kernel_stationary(&q, &k, &s).unwrap();
            assert!((a - b).abs() <= 1e-14);
        }
        assert!(
            (kernel_nonstationary(&[0.3, 0.1], &[0.3, 0.1], &pair).unwrap() - 1.0).abs() < 1e-14
        );
    }

    #[test]
    fn nonstationary_is_not_translation_invariant() {
        let mut rng = Rng::new(7);
        let w1 = Matrix::from_fn(10_000, 2, |_, _| 2.0 + rng.normal());
        let w2 = Matrix::from_fn(10_000, 2, |_, _| -2.0 + rng.normal());
        let pair = SpectralSample::pair(w1, w2, 0).unwrap();
        let (q, k, t) = ([0.1, 0.2], [0.3, -0.1], [0.4, 0.4]);
        let qt = [q[0] + t[0], q[1] + t[1]];
        let kt = [k[0] + t[0], k[1] + t[1]];
        let a = kernel_nonstationary(&q, &k, &pair).unwrap();
        let b = kernel_nonstationary(&qt, &kt, &pair).unwrap();
        assert!((a - b).abs() > 1e-3, "{a} vs {b}");
        assert_eq!(a, kernel_nonstationary(&k, &q, &pair).unwrap());
    }

    #[test]
    fn rbf_examples() {
        assert_eq!(rbf_closed_form(&[1.0, 2.0], &[1.0, 2.0], 0.7).unwrap(), 1.0);
        let l = 1.3;
        let k = rbf_closed_form(&[l * std::f64::consts::SQRT_2, 0.0], &[0.0, 0.0], l).unwrap();
        assert!((k - (-1f64).exp()).abs() < 1e-15);
        let l = 2f64.sqrt().sqrt();
        let k = rbf_closed_form(&[1.0, 0.0], &[0.0, 1.0], l).unwrap();
        assert!((k - 0.49307).abs() < 5e-6);
        assert!(rbf_closed_form(&[1.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn bound_examples() {
        let inp = ErrorBoundInputs {
            diameter: 2.0,
            sigma1_sq: 0.5,
            sigma2_sq: 0.5,
            r: 1000,
            d: 1,
            epsilon: 0.5,
        };
        let b = error_bound(&inp).unwrap();
        let hand = 256.0 * 16.0 * (-62.5f64).exp();
        assert!((b - hand).abs() / hand < 1e-12);
        assert_eq!(format!("{b:.2e}"), "2.94e-24");
        assert_eq!(format!("{b:.1e}"), "2.9e-24");
        let more = ErrorBoundInputs { r: 2000, ..inp };
        assert!(more.bound().unwrap() < b);
        let wider = ErrorBoundInputs {
            diameter: 3.0,
            ..inp
        };
        assert!(wider.bound().unwrap() > b);
        let r = inp.min_samples(0.05).unwrap();
        assert!(ErrorBoundInputs { r, ..inp }.bound().unwrap() <= 0.05);
        assert!(ErrorBoundInputs { r: r - 1, ..inp }.bound().unwrap() > 0.05);
        assert!(ErrorBoundInputs {
            epsilon: 0.0,
            ..inp
        }
        .bound()
        .is_err());
    }

    #[test]
    fn tape_gram_matches_scalar_kernels() {
        let mut rng = Rng::new(8);
        let s = sample_gaussian(3, 40, 1.0, &mut rng).unwrap();
        let w2 = Matrix::randn(40, 3, 0.8, &mut rng);
        let x = Matrix::randn(4, 3, 1.0, &mut rng);
        let y = Matrix::randn(5, 3, 1.0, &mut rng);
        let pair = SpectralSample::pair(s.points.clone(), w2.clone(), 0).unwrap();

        let mut tape = Tape::new();
        let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
        let w1v = tape.constant(s.points.clone());
        let w2v = tape.constant(w2);
        let st = gram(
            &mut tape,
            xv,
            yv,
            KernelPoints {
                first: w1v,
                second: None,
            },
        );
        let ns = gram(
            &mut tape,
            xv,
            yv,
            KernelPoints {
                first: w1v,
                second: Some(w2v),
            },
        );
        for i in 0..4 {
            for j in 0..5 {
                let a = kernel_stationary(x.row(i), y.row(j), &s).unwrap();
                let b = kernel_nonstationary(x.row(i), y.row(j), &pair).unwrap();
                assert!((tape.value(st)[(i, j)] - a).abs() < 1e-13);
                assert!((tape.value(ns)[(i, j)] - b).abs() < 1e-13);
            }
        }
    }
}
