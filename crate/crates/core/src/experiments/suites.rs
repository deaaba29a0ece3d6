//! Property suites and task runs.

use serde::Serialize;

use crate::attention::{diagnostics, Variant};
use crate::autodiff::Tape;
use crate::decomposition::{attention_row_from_logs, decompose_dot, leaky_relu, GatPair};
use crate::error::{invalid, Result};
use crate::numerics::{dot, entropy, matmul_nt, p_norm, Matrix, Rng};
use crate::rff::{features_nonstationary, kernel_stationary, ErrorBoundInputs};
use crate::spectral::{sample_gaussian, SpectralSample};
use crate::train::{gradcheck, train, GradcheckReport, Model, TrainLog};

use super::config::{ConvergenceConfig, ExperimentConfig, SeqTaskConfig, SparsityConfig};
use super::models::{GraphModel, RegressionModel, SeqModel, TaskKind};
use super::output::num;
use super::tasks::{SyntheticGraphTask, SyntheticSeqTask, ToyRegressionTask};

/// Tolerance of the dot-product split on ordinary inputs.
pub const DOT_TOLERANCE: f64 = 1e-12;
/// Tolerance of the GAT split and of large-norm inputs.
pub const GAT_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecompositionRow {
    pub case: String,
    pub d: usize,
    pub trials: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl DecompositionRow {
    pub fn pass(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecompositionReport {
    pub rows: Vec<DecompositionRow>,
    /// GAT trials that fell on each LeakyReLU branch.
    pub gat_positive: usize,
    pub gat_negative: usize,
}

impl DecompositionReport {
    pub fn pass(&self) -> bool {
        self.rows.iter().all(DecompositionRow::pass)
            && self.gat_positive > 0
            && self.gat_negative > 0
    }

    pub fn max_error(&self, case: &str) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.case == case)
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("case,d,trials,max_rel_error,tolerance,pass\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.case,
                r.d,
                r.trials,
                num(r.max_rel_error),
                num(r.tolerance),
                r.pass()
            ));
        }
        s
    }
}

/// Checks the similarity x magnitude identities.
///
/// * `dot`: `similarity * magnitude` against `exp(q.k / sqrt(d))` for
///   standard-normal `q`, `k`.
/// * `dot-large-norm`: `|q| = |k| = large_norm`, compared in log space.
/// * `gat`: the GAT score split against `exp(LeakyReLU(.))` with `c = 0.2`;
///   half of the trials flip the attention vector so both branches occur.
pub fn run_decomposition_suite(
    rng: &Rng,
    trials: usize,
    dims: &[usize],
    large_norm: f64,
) -> Result<DecompositionReport> {
    if trials == 0 {
        return Err(invalid("trials must be positive"));
    }
    let mut rows = Vec::new();
    for &d in dims {
        let mut r = rng.named("dot").substream(d as u64);
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let q = r.normal_vec(d);
            let k = r.normal_vec(d);
            let w = decompose_dot(&q, &k, d, 2.0)?;
            let direct = (dot(&q, &k) / (d as f64).sqrt()).exp();
            worst = worst.max((w.similarity * w.magnitude - direct).abs() / direct);
        }
        rows.push(DecompositionRow {
            case: "dot".into(),
            d,
            trials,
            max_rel_error: worst,
            tolerance: DOT_TOLERANCE,
        });

        let mut r = rng.named("dot-large").substream(d as u64);
        let mut worst = 0.0f64;
        let scaled = |v: Vec<f64>| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter()
                .map(|x| x * large_norm / n)
                .collect::<Vec<f64>>()
        };
        for _ in 0..trials {
            let q = scaled(r.normal_vec(d));
            let k = scaled(r.normal_vec(d));
            let w = decompose_dot(&q, &k, d, 2.0)?;
            let direct = dot(&q, &k) / (d as f64).sqrt();
            worst = worst.max((w.log_unnormalized() - direct).exp_m1().abs());
        }
        rows.push(DecompositionRow {
            case: "dot-large-norm".into(),
            d,
            trials,
            max_rel_error: worst,
            tolerance: GAT_TOLERANCE,
        });
    }

    let (mut pos, mut neg) = (0, 0);
    for &d in dims {
        let mut r = rng.named("gat").substream(d as u64);
        let d_in = d + 1;
        let mut worst = 0.0f64;
        for t in 0..trials {
            let w = Matrix::randn(d, d_in, 1.0, &mut r);
            let mut a = r.normal_vec(2 * d);
            let hi = r.normal_vec(d_in);
            let hj = r.normal_vec(d_in);
            let pair = GatPair::new(&hi, &hj, &w, &a, 0.2)?;
            if (pair.pre_activation() >= 0.0) != (t % 2 == 0) {
                a.iter_mut().for_each(|x| *x = -*x);
            }
            let pair = GatPair::new(&hi, &hj, &w, &a, 0.2)?;
            let e = pair.pre_activation();
            if e >= 0.0 {
                pos += 1;
            } else {
                neg += 1;
            }
            let dw = pair.decompose();
            let direct = leaky_relu(e, 0.2);
            worst = worst.max((dw.log_unnormalized() - direct).exp_m1().abs());
        }
        rows.push(DecompositionRow {
            case: "gat".into(),
            d,
            trials,
            max_rel_error: worst,
            tolerance: GAT_TOLERANCE,
        });
    }
    Ok(DecompositionReport {
        rows,
        gat_positive: pos,
        gat_negative: neg,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub kind: String,
    pub r: usize,
    pub median: f64,
    pub q05: f64,
    pub q25: f64,
    pub q75: f64,
    pub q95: f64,
    /// Share of pairs with error at most the configured tolerance.
    pub within_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExceedanceReport {
    pub epsilon: f64,
    pub r: usize,
    pub bound: f64,
    pub trials: usize,
    pub exceedances: usize,
    pub frequency: f64,
    /// `bound + 1.96 sqrt(bound (1 - bound) / trials)`.
    pub limit: f64,
    pub max_sup_error: f64,
}

impl ExceedanceReport {
    pub fn pass(&self) -> bool {
        self.frequency <= self.limit
    }
}

/// Required share of pairs within tolerance at the largest `R`.
pub const WITHIN_TOLERANCE_SHARE: f64 = 0.95;
/// Monte Carlo rate and the allowed deviation of the fitted slope.
pub const MC_SLOPE: f64 = -0.5;
pub const MC_SLOPE_TOLERANCE: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceStudy {
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slope of log median error against log R (stationary).
    pub slope: f64,
    pub slope_nonstationary: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    #[serde(flatten)]
    pub study: ConvergenceStudy,
    pub exceedance: ExceedanceReport,
}

impl ConvergenceReport {
    pub fn pass(&self) -> bool {
        self.study.pass() && self.exceedance.pass()
    }
}

impl ConvergenceStudy {
    pub fn slope_pass(&self) -> bool {
        (self.slope - MC_SLOPE).abs() <= MC_SLOPE_TOLERANCE
    }

    pub fn accuracy_pass(&self) -> bool {
        self.stationary_at_max_r().within_tolerance >= WITHIN_TOLERANCE_SHARE
    }

    pub fn pass(&self) -> bool {
        self.slope_pass() && self.accuracy_pass()
    }

    pub fn stationary_at_max_r(&self) -> &ConvergenceRow {
        self.rows
            .iter()
            .filter(|r| r.kind == "stationary")
            .max_by_key(|r| r.r)
            .expect("non-empty grid")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,R,median,q05,q25,q75,q95,within_tolerance\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.kind,
                r.r,
                num(r.median),
                num(r.q05),
                num(r.q25),
                num(r.q75),
                num(r.q95),
                num(r.within_tolerance)
            ));
        }
        s
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn summarize(kind: &str, r: usize, mut errs: Vec<f64>, tol: f64) -> ConvergenceRow {
    errs.sort_by(f64::total_cmp);
    let within = errs.iter().filter(|&&e| e <= tol).count() as f64 / errs.len() as f64;
    ConvergenceRow {
        kind: kind.into(),
        r,
        median: quantile(&errs, 0.5),
        q05: quantile(&errs, 0.05),
        q25: quantile(&errs, 0.25),
        q75: quantile(&errs, 0.75),
        q95: quantile(&errs, 0.95),
        within_tolerance: within,
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Two Gaussian frequency sets `N(m1, s^2 I)` and `N(m2, s^2 I)`.
pub fn sample_gaussian_pair(
    m1: &[f64],
    m2: &[f64],
    s: f64,
    r: usize,
    rng: &mut Rng,
) -> Result<SpectralSample> {
    let d = m1.len();
    let a = Matrix::from_fn(r, d, |_, j| m1[j] + s * rng.normal());
    let b = Matrix::from_fn(r, d, |_, j| m2[j] + s * rng.normal());
    SpectralSample::pair(a, b, 0)
}

/// Expected value of the non-stationary estimate for Gaussian frequency sets:
/// `(1/4) sum_{a,b} E cos(w_a . x - w_b . y)`.
pub fn nonstationary_gaussian_kernel(x: &[f64], y: &[f64], m: [&[f64]; 2], s: f64) -> f64 {
    let s2 = s * s;
    let nx: f64 = x.iter().map(|v| v * v).sum();
    let ny: f64 = y.iter().map(|v| v * v).sum();
    let dxy: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    let mut total = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            let phase = dot(m[a], x) - dot(m[b], y);
            let damp = if a == b {
                (-0.5 * s2 * dxy).exp()
            } else {
                (-0.5 * s2 * (nx + ny)).exp()
            };
            total += phase.cos() * damp;
        }
    }
    total / 4.0
}

/// Convergence of kernel estimates in the number of frequencies, and the
/// uniform error bound of the non-stationary estimate.
///
/// Stationary: `f^2` with `w ~ N(0, I / (2 l^2))`, `l^2 = sqrt(d_k)`, against
/// `exp(-|q - k|^2 / (2 sqrt(d_k)))`. Non-stationary: the estimate with
/// `w_1 ~ N(+m, s^2 I)`, `w_2 ~ N(-m, s^2 I)` against its closed-form mean.
/// Inputs are uniform in `[-1, 1]^d_k`.
pub fn run_kernel_convergence(cfg: &ConvergenceConfig, rng: &Rng) -> Result<ConvergenceReport> {
    Ok(ConvergenceReport {
        study: run_convergence_study(cfg, rng)?,
        exceedance: run_exceedance(cfg, rng)?,
    })
}

/// The error-against-`R` part of [`run_kernel_convergence`].
pub fn run_convergence_study(cfg: &ConvergenceConfig, rng: &Rng) -> Result<ConvergenceStudy> {
    let d = cfg.d_k;
    let l = (d as f64).powf(0.25);
    let mut pr = rng.named("pairs");
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.pairs)
        .map(|_| {
            let mut u = || {
                (0..d)
                    .map(|_| pr.uniform_range(-1.0, 1.0))
                    .collect::<Vec<f64>>()
            };
            (u(), u())
        })
        .collect();
    let m1: Vec<f64> = vec![0.5 / (d as f64).sqrt(); d];
    let m2: Vec<f64> = m1.iter().map(|v| -v).collect();
    let s = 0.5;

    let mut rows = Vec::new();
    for &r in &cfg.r_grid {
        let mut st = Vec::with_capacity(cfg.pairs * cfg.repeats);
        let mut ns = Vec::with_capacity(cfg.pairs * cfg.repeats);
        for rep in 0..cfg.repeats {
            let mut sr = rng.named("stationary").substream((r * 1000 + rep) as u64);
            let sample = sample_gaussian(d, r, l, &mut sr)?;
            let mut nr = rng
                .named("nonstationary")
                .substream((r * 1000 + rep) as u64);
            let pair = sample_gaussian_pair(&m1, &m2, s, r, &mut nr)?;
            for (q, k) in &pairs {
                let f = kernel_stationary(q, k, &sample)?;
                let exact = (-crate::numerics::sq_dist(q, k) / (2.0 * l * l)).exp();
                st.push((f * f - exact).abs());
                let fq = features_nonstationary(q, &pair)?;
                let fk = features_nonstationary(k, &pair)?;
                let est = dot(&fq, &fk) / (4 * r) as f64;
                ns.push((est - nonstationary_gaussian_kernel(q, k, [&m1, &m2], s)).abs());
            }
        }
        rows.push(summarize("stationary", r, st, cfg.tolerance));
        rows.push(summarize("nonstationary", r, ns, cfg.tolerance));
    }
    let rs: Vec<f64> = cfg.r_grid.iter().map(|&r| r as f64).collect();
    let med = |kind: &str| -> Vec<f64> {
        rows.iter()
            .filter(|r| r.kind == kind)
            .map(|r| r.median)
            .collect()
    };
    let slope = log_log_slope(&rs, &med("stationary"));
    let slope_nonstationary = log_log_slope(&rs, &med("nonstationary"));
    Ok(ConvergenceStudy {
        rows,
        slope,
        slope_nonstationary,
    })
}

/// Monte Carlo check of the uniform bound in one dimension: `w_1 ~ N(0.5,
/// 0.25)`, `w_2 ~ N(-0.5, 0.25)` on `[-1, 1]`, so `D = 2` and
/// `E w_i^2 = 0.5`. `R` is the smallest count whose bound is
/// `bound_target`; each trial records whether the sup error over the grid
/// reaches `bound_epsilon`.
pub fn run_exceedance(cfg: &ConvergenceConfig, rng: &Rng) -> Result<ExceedanceReport> {
    let mut inputs = ErrorBoundInputs {
        diameter: 2.0,
        sigma1_sq: 0.5,
        sigma2_sq: 0.5,
        r: 1,
        d: 1,
        epsilon: cfg.bound_epsilon,
    };
    let r = inputs.min_samples(cfg.bound_target)?;
    inputs.r = r;
    let bound = inputs.bound()?;
    let g = cfg.bound_grid;
    let grid: Vec<f64> = (0..g)
        .map(|i| -1.0 + 2.0 * i as f64 / (g - 1) as f64)
        .collect();
    let (m1, m2, s) = ([0.5], [-0.5], 0.5);
    let exact = Matrix::from_fn(g, g, |i, j| {
        nonstationary_gaussian_kernel(&[grid[i]], &[grid[j]], [&m1, &m2], s)
    });
    let mut exceed = 0;
    let mut max_sup = 0.0f64;
    for t in 0..cfg.bound_trials {
        let mut tr = rng.named("exceedance").substream(t as u64);
        let pair = sample_gaussian_pair(&m1, &m2, s, r, &mut tr)?;
        let feats: Vec<f64> = grid
            .iter()
            .flat_map(|&x| features_nonstationary(&[x], &pair).expect("dimension 1"))
            .collect();
        let f = Matrix::new(g, 2 * r, feats)?;
        let est = matmul_nt(&f, &f)?.scale(1.0 / (4 * r) as f64);
        let sup = est.sub(&exact)?.max_abs();
        max_sup = max_sup.max(sup);
        if sup >= cfg.bound_epsilon {
            exceed += 1;
        }
    }
    let n = cfg.bound_trials as f64;
    let frequency = exceed as f64 / n;
    Ok(ExceedanceReport {
        epsilon: cfg.bound_epsilon,
        r,
        bound,
        trials: cfg.bound_trials,
        exceedances: exceed,
        frequency,
        limit: bound + 1.96 * (bound * (1.0 - bound) / n).sqrt(),
        max_sup_error: max_sup,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsityRowSummary {
    pub p: f64,
    /// Ten equal-width bins over `[0, 1]`.
    pub histogram: Vec<usize>,
    /// Share of weights in `[0, 0.05]` or `[0.95, 1]`.
    pub extreme_mass: f64,
    pub mean_entropy: f64,
    pub mean_max_weight: f64,
    /// Smallest max weight over rows of key sets with a norm gap of at least 0.1.
    pub min_max_weight_gapped: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsitySweep {
    pub rows: Vec<SparsityRowSummary>,
    /// Key sets whose largest two `p`-norms at the smallest `p` differ by at
    /// least 10%.
    pub gapped_sets: usize,
}

impl SparsitySweep {
    /// At the smallest `p`, rows over gapped key sets are one-hot (max weight
    /// at least 0.99); `p = 0.1` puts at least 90% of the weight mass in
    /// `[0, 0.05] U [0.95, 1]` while `p = 2` does not.
    pub fn pass(&self) -> bool {
        let one_hot = self.gapped_sets > 0
            && self
                .rows
                .last()
                .is_some_and(|r| r.min_max_weight_gapped >= 0.99);
        let mass = |p: f64| self.at(p).map(|r| r.extreme_mass);
        let sharp = mass(0.1).is_none_or(|m| m >= 0.9);
        let dispersed = mass(2.0).is_none_or(|m| m < 0.9);
        one_hot && sharp && dispersed
    }

    pub fn at(&self, p: f64) -> Option<&SparsityRowSummary> {
        self.rows.iter().find(|r| r.p == p)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("p,");
        s.push_str(
            &(0..10)
                .map(|b| format!("bin{b}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        s.push_str(",extreme_mass,mean_entropy,mean_max_weight,min_max_weight_gapped\n");
        for r in &self.rows {
            let bins: Vec<String> = r.histogram.iter().map(|c| c.to_string()).collect();
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                num(r.p),
                bins.join(","),
                num(r.extreme_mass),
                num(r.mean_entropy),
                num(r.mean_max_weight),
                num(r.min_max_weight_gapped)
            ));
        }
        s
    }
}

/// `1 - (second largest |k|_p) / (largest |k|_p)`.
pub fn key_norm_gap(keys: &Matrix, p: f64) -> Result<f64> {
    let mut norms = (0..keys.rows())
        .map(|j| p_norm(keys.row(j), p))
        .collect::<Result<Vec<f64>>>()?;
    norms.sort_by(|a, b| b.total_cmp(a));
    Ok(if norms.len() < 2 || norms[0] == 0.0 {
        1.0
    } else {
        1.0 - norms[1] / norms[0]
    })
}

/// Attention weights with an `L^p` magnitude over random standard-normal
/// queries and keys, for each `p` of the grid.
pub fn run_sparsity_sweep(cfg: &SparsityConfig, rng: &Rng) -> Result<SparsitySweep> {
    let p_min = *cfg.p_grid.last().ok_or_else(|| invalid("empty p grid"))?;
    let sets: Vec<(Matrix, Matrix)> = (0..cfg.sets)
        .map(|s| {
            let mut r = rng.named("sparsity").substream(s as u64);
            let q = Matrix::randn(cfg.queries, cfg.d_k, 1.0, &mut r);
            let k = Matrix::randn(cfg.keys, cfg.d_k, 1.0, &mut r);
            (q, k)
        })
        .collect();
    let gapped: Vec<bool> = sets
        .iter()
        .map(|(_, k)| key_norm_gap(k, p_min).map(|g| g >= 0.1))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for &p in &cfg.p_grid {
        let mut hist = vec![0usize; 10];
        let (mut extreme, mut count, mut ent, mut maxw, mut nrows) =
            (0usize, 0usize, 0.0, 0.0, 0usize);
        let mut min_gapped = f64::INFINITY;
        for ((q, k), &gap) in sets.iter().zip(&gapped) {
            for i in 0..q.rows() {
                let logs = (0..k.rows())
                    .map(|j| {
                        decompose_dot(q.row(i), k.row(j), cfg.d_k, p).map(|w| w.log_unnormalized())
                    })
                    .collect::<Result<Vec<f64>>>()?;
                let row = attention_row_from_logs(&logs)?;
                for &w in &row {
                    hist[((w * 10.0) as usize).min(9)] += 1;
                    if w <= 0.05 || w >= 0.95 {
                        extreme += 1;
                    }
                    count += 1;
                }
                let m = row.iter().copied().fold(0.0, f64::max);
                ent += entropy(&row);
                maxw += m;
                nrows += 1;
                if gap {
                    min_gapped = min_gapped.min(m);
                }
            }
        }
        rows.push(SparsityRowSummary {
            p,
            histogram: hist,
            extreme_mass: extreme as f64 / count as f64,
            mean_entropy: ent / nrows as f64,
            mean_max_weight: maxw / nrows as f64,
            min_max_weight_gapped: min_gapped,
        });
    }
    Ok(SparsitySweep {
        rows,
        gapped_sets: gapped.iter().filter(|&&g| g).count(),
    })
}

/// Variants covered by the gradient check.
pub const GRADCHECK_VARIANTS: [Variant; 6] = [
    Variant::Dot,
    Variant::IkaS,
    Variant::IkaNs,
    Variant::Ikan,
    Variant::IkanDirect,
    Variant::Mikan,
];

/// Finite-difference check of the full training objective (embedding,
/// attention, pooling, classifier and, for latent variants, every ELBO term)
/// on two 4-token sequences. Parameters are jittered away from their
/// initialization so no path has an exactly zero gradient, and `mikan` starts
/// from a correlated copula.
pub fn gradcheck_variant(variant: Variant, seed: u64) -> Result<GradcheckReport> {
    let rng = Rng::new(seed);
    let task_cfg = SeqTaskConfig {
        vocab: 6,
        min_len: 4,
        max_len: 4,
        marker: 2,
        train: 2,
        test: 2,
        d_model: 4,
    };
    let task = SyntheticSeqTask::generate(&task_cfg, &rng.named("task"))?;
    let mut att = crate::attention::AttentionConfig::new(variant, 2, 3);
    att.r = 3;
    att.hidden = 4;
    att.p = if variant.requires_l2() { 2.0 } else { 1.5 };
    if variant == Variant::Mikan {
        att.copula = Some(Matrix::from_rows(&[vec![1.0, 0.4], vec![0.4, 1.0]])?);
    }
    let mut model = SeqModel::new(task, att, 1.0, &rng.named("model"))?;
    let mut jitter = rng.named("jitter");
    for m in model.store.values_mut() {
        for v in m.data_mut() {
            *v += 0.2 * jitter.normal();
        }
    }
    let noise = rng.named("noise");
    let model = &model;
    gradcheck(
        &model.store,
        |tape: &mut Tape, b| Ok(model.objective(tape, b, &[0, 1], &noise)?.loss),
        1e-5,
    )
}

/// Outcome of one (variant, seed) training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub task: String,
    pub variant: Variant,
    pub seed: u64,
    pub diverged: bool,
    pub train_metric: f64,
    pub test_metric: f64,
    /// Sequence task only.
    pub marker_fraction: Option<f64>,
    pub cross_head_std: f64,
    /// Mean over heads of the largest similarity.
    pub max_similarity: f64,
    /// Mean over heads of the average log-magnitude.
    pub mean_log_magnitude: f64,
    #[serde(skip)]
    pub log: TrainLog,
}

/// Per-variant summary of a task run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub runs: usize,
    pub failed: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskReport {
    pub task: String,
    pub metric: String,
    pub runs: Vec<RunResult>,
}

impl TaskReport {
    pub fn runs_of(&self, v: Variant) -> impl Iterator<Item = &RunResult> {
        self.runs.iter().filter(move |r| r.variant == v)
    }

    pub fn summary(&self) -> Vec<VariantSummary> {
        let mut variants: Vec<Variant> = Vec::new();
        for r in &self.runs {
            if !variants.contains(&r.variant) {
                variants.push(r.variant);
            }
        }
        variants
            .into_iter()
            .map(|v| {
                let ok: Vec<f64> = self
                    .runs_of(v)
                    .filter(|r| !r.diverged)
                    .map(|r| r.test_metric)
                    .collect();
                let n = ok.len() as f64;
                let mean = ok.iter().sum::<f64>() / n;
                let std = if ok.len() > 1 {
                    (ok.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                } else {
                    0.0
                };
                VariantSummary {
                    variant: v,
                    runs: self.runs_of(v).count(),
                    failed: self.runs_of(v).filter(|r| r.diverged).count(),
                    mean,
                    std,
                }
            })
            .collect()
    }

    pub fn runs_csv(&self) -> String {
        let mut s = String::from(
            "task,variant,seed,diverged,train_metric,test_metric,marker_fraction,cross_head_std,max_similarity,mean_log_magnitude\n",
        );
        for r in &self.runs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.task,
                r.variant,
                r.seed,
                r.diverged,
                num(r.train_metric),
                num(r.test_metric),
                r.marker_fraction.map(num).unwrap_or_default(),
                num(r.cross_head_std),
                num(r.max_similarity),
                num(r.mean_log_magnitude)
            ));
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = format!("task,variant,runs,failed,{0}_mean,{0}_std\n", self.metric);
        for v in self.summary() {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.task,
                v.variant,
                v.runs,
                v.failed,
                num(v.mean),
                num(v.std)
            ));
        }
        s
    }

    /// Per-epoch logs of every run, prefixed by variant and seed.
    pub fn logs_csv(&self) -> String {
        let mut s = String::from(
            "variant,seed,epoch,loss,log_lik,log_prior,log_q,train_metric,test_metric\n",
        );
        for r in &self.runs {
            for e in &r.log.epochs {
                s.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    r.variant,
                    r.seed,
                    e.epoch,
                    num(e.loss),
                    num(e.log_lik),
                    num(e.log_prior),
                    num(e.log_q),
                    num(e.train_metric),
                    num(e.test_metric)
                ));
            }
        }
        s
    }
}

struct Diag {
    cross_head_std: f64,
    max_similarity: f64,
    mean_log_magnitude: f64,
}

fn summarize_outputs(outs: &[crate::attention::AttentionOutput]) -> Diag {
    let mut d = Diag {
        cross_head_std: 0.0,
        max_similarity: 0.0,
        mean_log_magnitude: 0.0,
    };
    for o in outs {
        let g = diagnostics(o);
        let m = g.heads.len() as f64;
        d.cross_head_std += g.cross_head_std;
        d.max_similarity += g.heads.iter().map(|h| h.max_similarity).sum::<f64>() / m;
        d.mean_log_magnitude += g.heads.iter().map(|h| h.mean_log_magnitude).sum::<f64>() / m;
    }
    let n = outs.len().max(1) as f64;
    d.cross_head_std /= n;
    d.max_similarity /= n;
    d.mean_log_magnitude /= n;
    d
}

/// Trains one variant on one seed. The seed fixes the data, the
/// initialization and the noise.
pub fn run_single(
    kind: TaskKind,
    variant: Variant,
    seed: u64,
    cfg: &ExperimentConfig,
) -> Result<RunResult> {
    let rng = Rng::new(seed);
    let att = cfg.attention.layer_config(variant)?;
    let kl = cfg.train.kl_weight;
    let model_rng = rng.named("model");
    let train_rng = rng.named("train");
    let eval_rng = rng.named("eval");
    let mut result = RunResult {
        task: kind.name().into(),
        variant,
        seed,
        diverged: false,
        train_metric: f64::NAN,
        test_metric: f64::NAN,
        marker_fraction: None,
        cross_head_std: f64::NAN,
        max_similarity: f64::NAN,
        mean_log_magnitude: f64::NAN,
        log: TrainLog::default(),
    };
    let finish = |model: &mut dyn Model, result: &mut RunResult| -> Result<()> {
        match train(model, &cfg.train, &train_rng) {
            Ok(log) => {
                let last = log.last().copied();
                result.log = log;
                if let Some(e) = last {
                    result.train_metric = e.train_metric;
                    result.test_metric = e.test_metric;
                } else {
                    let m = model.metrics(&eval_rng)?;
                    result.train_metric = m.train;
                    result.test_metric = m.test;
                }
                Ok(())
            }
            Err(e @ crate::Error::Diverged { .. }) => {
                eprintln!("warning: {} {} seed {}: {e}", kind.name(), variant, seed);
                result.diverged = true;
                Ok(())
            }
            Err(e) => Err(e),
        }
    };
    match kind {
        TaskKind::Seq => {
            let task = SyntheticSeqTask::generate(&cfg.task.seq, &rng.named("task"))?;
            let mut model = SeqModel::new(task, att, kl, &model_rng)?;
            finish(&mut model, &mut result)?;
            if !result.diverged {
                let eval = rng.named("train").named("eval");
                result.marker_fraction = Some(model.marker_attention_fraction(&eval)?);
                let d = summarize_outputs(&model.test_attention(&eval)?);
                result.cross_head_std = d.cross_head_std;
                result.max_similarity = d.max_similarity;
                result.mean_log_magnitude = d.mean_log_magnitude;
            }
        }
        TaskKind::Graph => {
            let task = SyntheticGraphTask::generate(&cfg.task.graph, &rng.named("task"))?;
            let mut model = GraphModel::new(task, att, kl, &model_rng)?;
            model.weight_decay = cfg.task.graph.weight_decay;
            finish(&mut model, &mut result)?;
            if !result.diverged {
                let eval = rng.named("train").named("eval");
                let d = summarize_outputs(&[model.attention(&eval)?]);
                result.cross_head_std = d.cross_head_std;
                result.max_similarity = d.max_similarity;
                result.mean_log_magnitude = d.mean_log_magnitude;
            }
        }
        TaskKind::Regression => {
            let task = ToyRegressionTask::generate(&cfg.task.regression, &rng.named("task"))?;
            let d_model = cfg.task.regression.d_model;
            let mut model = RegressionModel::new(task, d_model, att, kl, &model_rng)?;
            finish(&mut model, &mut result)?;
        }
    }
    Ok(result)
}

/// Trains every (variant, seed) pair, one thread per pair. Results are ordered
/// by variant (as given) and then seed, independent of scheduling.
pub fn run_task(
    kind: TaskKind,
    variants: &[Variant],
    seeds: &[u64],
    cfg: &ExperimentConfig,
) -> Result<TaskReport> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(invalid("need at least one variant and one seed"));
    }
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| {
            let mut s = seeds.to_vec();
            s.sort_unstable();
            s.into_iter().map(move |seed| (v, seed))
        })
        .collect();
    let results: Vec<Result<RunResult>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(v, seed)| scope.spawn(move || run_single(kind, v, seed, cfg)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    });
    Ok(TaskReport {
        task: kind.name().into(),
        metric: kind.metric_name().into(),
        runs: results.into_iter().collect::<Result<Vec<_>>>()?,
    })
}
