//! Operation-count check of attention cost in sequence length.
//!
//! A layer forward pass is recorded for each length `T` and its
//! multiply-accumulates are read from the tape, per phase. The counts of the
//! projection, feature, pairwise, normalization and copula phases are fitted
//! by non-negative least squares to the asymptotic form of the variant:
//!
//! | variant | basis |
//! |---|---|
//! | `dot` | `T^2 d`, `T d^2` |
//! | `ika-s`, `ika-ns`, `ikan`, `ikan-direct` | `T^2 R`, `T d^2`, `T d R` |
//! | `mikan` | the above plus `d M^3` |
//!
//! The spectral sampler and the value/context products are left out of the
//! fit. The pairwise and normalization phases hold exactly the `T^2` terms, so
//! their count must grow by exactly 4 when `T` doubles.

use serde::Serialize;

use crate::attention::{AttentionConfig, AttentionLayer, Spectra, Variant};
use crate::autodiff::{OpCounter, ParamStore, Phase, Tape};
use crate::error::{invalid, Result};
use crate::numerics::{cholesky, solve_lower, Matrix, Rng};

use super::config::ComplexityConfig;
use super::output::num;

/// Phases whose counts are fitted.
pub const FITTED: [Phase; 5] = [
    Phase::Projection,
    Phase::Features,
    Phase::Pairwise,
    Phase::Normalization,
    Phase::Copula,
];

/// Phases that carry the `T^2` terms.
pub const QUADRATIC: [Phase; 2] = [Phase::Pairwise, Phase::Normalization];

/// Variants covered by the check.
pub const COMPLEXITY_VARIANTS: [Variant; 6] = [
    Variant::Dot,
    Variant::IkaS,
    Variant::IkaNs,
    Variant::Ikan,
    Variant::IkanDirect,
    Variant::Mikan,
];

/// Counts of one forward pass at length `t`.
pub fn count_ops(
    variant: Variant,
    t: usize,
    d: usize,
    r: usize,
    heads: usize,
    seed: u64,
) -> Result<OpCounter> {
    let mut att = AttentionConfig::new(variant, heads, d);
    att.r = r;
    let rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let layer = AttentionLayer::new(&mut store, "att", d, att, &rng)?;
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let h = tape.constant(Matrix::randn(t, d, 1.0, &mut rng.named("input")));
    layer.forward(
        &mut tape,
        &b,
        h,
        h,
        None,
        Spectra::Sampled(&rng.named("noise")),
    )?;
    Ok(tape.counter().clone())
}

/// Basis column names and values at `t`.
pub fn basis(variant: Variant, t: f64, d: f64, r: f64, m: f64) -> Vec<(&'static str, f64)> {
    let mut cols = match variant {
        Variant::Dot | Variant::RbfOnly | Variant::Expsin | Variant::Linear => {
            vec![("T^2 d", t * t * d), ("T d^2", t * d * d)]
        }
        _ => vec![
            ("T^2 R", t * t * r),
            ("T d^2", t * d * d),
            ("T d R", t * d * r),
        ],
    };
    if variant == Variant::Mikan {
        cols.push(("d M^3", d * m * m * m));
    }
    cols
}

/// Non-negative least squares by enumerating column subsets; subsets with a
/// singular normal matrix are skipped. Returns coefficients (zero outside the
/// chosen subset) and the residual norm.
pub fn nnls(a: &Matrix, y: &[f64]) -> Result<(Vec<f64>, f64)> {
    let k = a.cols();
    if k == 0 || k > 16 || a.rows() != y.len() {
        return Err(invalid("nnls needs 1..=16 columns and one target per row"));
    }
    let resid = |x: &[f64]| -> f64 {
        (0..a.rows())
            .map(|i| {
                let p: f64 = (0..k).map(|j| a[(i, j)] * x[j]).sum();
                (p - y[i]).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    };
    let mut best = (vec![0.0; k], resid(&vec![0.0; k]));
    for mask in 1u32..(1 << k) {
        let cols: Vec<usize> = (0..k).filter(|j| mask & (1 << j) != 0).collect();
        let n = cols.len();
        let ata = Matrix::from_fn(n, n, |p, q| {
            (0..a.rows())
                .map(|i| a[(i, cols[p])] * a[(i, cols[q])])
                .sum()
        });
        let aty: Vec<f64> = cols
            .iter()
            .map(|&c| (0..a.rows()).map(|i| a[(i, c)] * y[i]).sum())
            .collect();
        let Ok(l) = cholesky(&ata) else { continue };
        // reject near-singular systems
        let diag_ratio = (0..n).map(|i| l[(i, i)]).fold(f64::INFINITY, f64::min)
            / (0..n).map(|i| l[(i, i)]).fold(0.0, f64::max);
        if !(diag_ratio > 1e-7) {
            continue;
        }
        let z = solve_lower(&l, &aty);
        let sol = back_substitute(&l, &z);
        if sol.iter().any(|&c| c < 0.0) {
            continue;
        }
        let mut x = vec![0.0; k];
        for (c, v) in cols.iter().zip(sol) {
            x[*c] = v;
        }
        let r = resid(&x);
        if r < best.1 {
            best = (x, r);
        }
    }
    Ok(best)
}

/// Solves `L^T x = z`.
fn back_substitute(l: &Matrix, z: &[f64]) -> Vec<f64> {
    let n = z.len();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| l[(j, i)] * x[j]).sum();
        x[i] = (z[i] - s) / l[(i, i)];
    }
    x
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityRow {
    pub t: usize,
    pub fitted_total: u64,
    pub quadratic: u64,
    pub per_phase: Vec<(String, u64)>,
    pub prediction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantComplexity {
    pub variant: Variant,
    pub rows: Vec<ComplexityRow>,
    pub basis: Vec<String>,
    pub coefficients: Vec<f64>,
    /// Residual norm over the norm of the counts.
    pub relative_residual: f64,
    /// `quadratic(2T) / quadratic(T)` for each doubling.
    pub doubling_ratios: Vec<f64>,
    /// Every doubling multiplies the quadratic count by exactly 4.
    pub exact_quadratic_scaling: bool,
    /// Count of the copula phase, constant in `T`.
    pub copula_ops: u64,
}

impl VariantComplexity {
    pub fn pass(&self) -> bool {
        self.relative_residual <= 0.01 && self.exact_quadratic_scaling
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub d: usize,
    pub r: usize,
    pub heads: usize,
    pub variants: Vec<VariantComplexity>,
}

impl ComplexityReport {
    pub fn pass(&self) -> bool {
        self.variants.iter().all(VariantComplexity::pass)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,T,fitted_total,quadratic,prediction");
        for p in FITTED {
            s.push_str(&format!(",{}", p.name()));
        }
        s.push('\n');
        for v in &self.variants {
            for r in &v.rows {
                s.push_str(&format!(
                    "{},{},{},{},{}",
                    v.variant,
                    r.t,
                    r.fitted_total,
                    r.quadratic,
                    num(r.prediction)
                ));
                for (_, c) in &r.per_phase {
                    s.push_str(&format!(",{c}"));
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn fits_csv(&self) -> String {
        let mut s = String::from(
            "variant,term,coefficient,relative_residual,exact_quadratic_scaling,pass\n",
        );
        for v in &self.variants {
            for (b, c) in v.basis.iter().zip(&v.coefficients) {
                s.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    v.variant,
                    b,
                    num(*c),
                    num(v.relative_residual),
                    v.exact_quadratic_scaling,
                    v.pass()
                ));
            }
        }
        s
    }
}

/// Counts and fits for each variant over `cfg.t_grid`.
pub fn verify_complexity(
    cfg: &ComplexityConfig,
    variants: &[Variant],
    seed: u64,
) -> Result<ComplexityReport> {
    if cfg.t_grid.len() < 4 || cfg.t_grid.windows(2).any(|w| w[1] != 2 * w[0]) {
        return Err(invalid("T grid needs at least three successive doublings"));
    }
    let (d, r, m) = (cfg.d, cfg.r, cfg.heads);
    let mut out = Vec::new();
    for &v in variants {
        let counters = cfg
            .t_grid
            .iter()
            .map(|&t| count_ops(v, t, d, r, m, seed))
            .collect::<Result<Vec<_>>>()?;
        let totals: Vec<f64> = counters
            .iter()
            .map(|c| c.total_of(&FITTED) as f64)
            .collect();
        let names: Vec<String> = basis(v, 1.0, 1.0, 1.0, 1.0)
            .iter()
            .map(|(n, _)| n.to_string())
            .collect();
        let a = Matrix::from_fn(cfg.t_grid.len(), names.len(), |i, j| {
            basis(v, cfg.t_grid[i] as f64, d as f64, r as f64, m as f64)[j].1
        });
        let (coef, res) = nnls(&a, &totals)?;
        let norm = totals.iter().map(|x| x * x).sum::<f64>().sqrt();
        let quad: Vec<u64> = counters.iter().map(|c| c.total_of(&QUADRATIC)).collect();
        let ratios: Vec<f64> = quad.windows(2).map(|w| w[1] as f64 / w[0] as f64).collect();
        let exact = quad.windows(2).all(|w| w[1] == 4 * w[0]);
        let rows = cfg
            .t_grid
            .iter()
            .zip(&counters)
            .enumerate()
            .map(|(i, (&t, c))| ComplexityRow {
                t,
                fitted_total: c.total_of(&FITTED),
                quadratic: c.total_of(&QUADRATIC),
                per_phase: FITTED
                    .iter()
                    .map(|p| (p.name().to_string(), c.get(*p)))
                    .collect(),
                prediction: (0..names.len()).map(|j| a[(i, j)] * coef[j]).sum(),
            })
            .collect();
        out.push(VariantComplexity {
            variant: v,
            rows,
            basis: names,
            coefficients: coef,
            relative_residual: res / norm,
            doubling_ratios: ratios,
            exact_quadratic_scaling: exact,
            copula_ops: counters[0].get(Phase::Copula),
        });
    }
    Ok(ComplexityReport {
        d,
        r,
        heads: m,
        variants: out,
    })
}
