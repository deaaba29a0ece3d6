//! Attention layers built from the similarity x magnitude split.
//!
//! Every variant computes, per head, a similarity between each query and key
//! and a magnitude from their `L^p` norms, then normalizes rows:
//!
//! | variant | similarity | normalization |
//! |---|---|---|
//! | `dot` | `exp(-|q-k|^2 / (2 sqrt(d_k)))` | softmax of log-similarity + log-magnitude |
//! | `rbf-only` | same, magnitude dropped | softmax |
//! | `expsin` | `exp(-2 sin^2(pi |q-k| / period) / ell^2)` | softmax |
//! | `linear` | `max(q.k, 0) + 1e-6` | softmax of the logs |
//! | kernel variants | `f(q, k)^2` from spectral points | row sums |
//!
//! The kernel variants (`ika-s`, `ika-ns`, `ikan`, `ikan-direct`, `mikan`)
//! differ in where their spectral points come from; see [`Variant`].
//!
//! In graph mode a head scores `exp(LeakyReLU(a^T [W h_i || W h_j]))` over each
//! node's neighborhood. The kernel variants there replace the two similarity
//! factors through the scaled attention vector with `f^2` terms.
//!
//! Layers are recorded on a [`Tape`]; [`attend_sequence`] and [`attend_graph`]
//! run the same code and read the values back.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamId, ParamStore, Phase, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::numerics::{entropy, Matrix, Rng};
use crate::rff::{self, KernelPoints};
use crate::spectral::{
    validate_correlation, CopulaSpec, DirectPoints, ImplicitDensity, SpectralSample,
};

/// Attention variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Scaled dot product, assembled from its two factors.
    Dot,
    /// RBF similarity alone.
    RbfOnly,
    /// Periodic kernel similarity times magnitude.
    Expsin,
    /// Linear kernel similarity times magnitude.
    Linear,
    /// Stationary kernel from one implicit density per head.
    IkaS,
    /// Non-stationary kernel from two implicit densities per head.
    IkaNs,
    /// `ika-ns` with an `L^p` magnitude.
    Ikan,
    /// Stationary kernel from stored learnable points, `L^p` magnitude.
    IkanDirect,
    /// `ikan` with heads coupled through a Gaussian copula.
    Mikan,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Dot,
        Variant::RbfOnly,
        Variant::Expsin,
        Variant::Linear,
        Variant::IkaS,
        Variant::IkaNs,
        Variant::Ikan,
        Variant::IkanDirect,
        Variant::Mikan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dot => "dot",
            Variant::RbfOnly => "rbf-only",
            Variant::Expsin => "expsin",
            Variant::Linear => "linear",
            Variant::IkaS => "ika-s",
            Variant::IkaNs => "ika-ns",
            Variant::Ikan => "ikan",
            Variant::IkanDirect => "ikan-direct",
            Variant::Mikan => "mikan",
        }
    }

    /// Uses spectral points and `f^2` similarities.
    pub fn is_kernel(self) -> bool {
        matches!(
            self,
            Variant::IkaS | Variant::IkaNs | Variant::Ikan | Variant::IkanDirect | Variant::Mikan
        )
    }

    /// Draws spectral points from implicit densities, so training has a latent.
    pub fn is_latent(self) -> bool {
        matches!(
            self,
            Variant::IkaS | Variant::IkaNs | Variant::Ikan | Variant::Mikan
        )
    }

    pub fn is_nonstationary(self) -> bool {
        matches!(self, Variant::IkaNs | Variant::Ikan | Variant::Mikan)
    }

    /// Variants whose magnitude is fixed to the `L^2` norm.
    pub fn requires_l2(self) -> bool {
        matches!(
            self,
            Variant::Dot | Variant::RbfOnly | Variant::Expsin | Variant::Linear
        )
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| invalid(format!("unknown variant {s:?}")))
    }
}

/// Transformer-style or GAT-style scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Sequence,
    Graph,
}

/// Shape and hyperparameters of an attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub variant: Variant,
    pub heads: usize,
    /// Spectral draws per density. Implicit densities mirror them to `2R` points.
    pub r: usize,
    pub d_k: usize,
    /// Magnitude norm exponent.
    pub p: f64,
    /// LeakyReLU slope (graph mode).
    pub c: f64,
    pub mode: Mode,
    /// Initial head correlation for `mikan`.
    pub copula: Option<Matrix>,
    /// Hidden width of the density networks.
    pub hidden: usize,
    /// Length-scale the spectral densities start at. Defaults to
    /// `d_k^(1/4)` in sequence mode and 1 in graph mode, the RBF factors of
    /// the dot-product and GAT scores.
    pub lengthscale: Option<f64>,
    pub period: f64,
    pub ell: f64,
}

impl AttentionConfig {
    pub fn new(variant: Variant, heads: usize, d_k: usize) -> Self {
        Self {
            variant,
            heads,
            r: 16,
            d_k,
            p: 2.0,
            c: 0.2,
            mode: Mode::Sequence,
            copula: (variant == Variant::Mikan).then(|| Matrix::identity(heads)),
            hidden: 32,
            lengthscale: None,
            period: 1.0,
            ell: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_k == 0 || self.r == 0 || self.hidden == 0 {
            return Err(invalid("heads, d_k, R and hidden must be positive"));
        }
        if !(self.p > 0.0 && self.p.is_finite()) {
            return Err(invalid(format!("p must be positive, got {}", self.p)));
        }
        if self.variant.requires_l2() && self.p != 2.0 {
            return Err(invalid(format!("variant {} uses p = 2", self.variant)));
        }
        if !(self.c > 0.0 && self.c <= 1.0) {
            return Err(invalid(format!(
                "LeakyReLU slope must lie in (0, 1], got {}",
                self.c
            )));
        }
        if !(self.period > 0.0 && self.ell > 0.0) {
            return Err(invalid("period and ell must be positive"));
        }
        if let Some(l) = self.lengthscale {
            if !(l > 0.0 && l.is_finite()) {
                return Err(invalid(format!("lengthscale must be positive, got {l}")));
            }
        }
        if self.mode == Mode::Graph && matches!(self.variant, Variant::Expsin | Variant::Linear) {
            return Err(invalid(format!(
                "variant {} is sequence-only",
                self.variant
            )));
        }
        match (self.variant, &self.copula) {
            (Variant::Mikan, None) => return Err(invalid("mikan needs a copula")),
            (Variant::Mikan, Some(s)) => {
                if self.heads < 2 {
                    return Err(invalid("mikan needs at least two heads"));
                }
                if s.shape() != (self.heads, self.heads) {
                    return Err(invalid(format!(
                        "copula is {:?}, expected {} x {}",
                        s.shape(),
                        self.heads,
                        self.heads
                    )));
                }
                validate_correlation(s)?;
            }
            (v, Some(_)) => return Err(invalid(format!("variant {v} takes no copula"))),
            _ => {}
        }
        Ok(())
    }

    /// Dimension of the spectral points.
    pub fn spectral_dim(&self) -> usize {
        match self.mode {
            Mode::Sequence => self.d_k,
            Mode::Graph => 2 * self.d_k,
        }
    }

    pub fn effective_lengthscale(&self) -> f64 {
        self.lengthscale.unwrap_or(match self.mode {
            Mode::Sequence => (self.d_k as f64).powf(0.25),
            Mode::Graph => 1.0,
        })
    }
}

/// Neighbor lists of a graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphMask {
    neighbors: Vec<Vec<usize>>,
}

impl GraphMask {
    /// Every node needs at least one neighbor.
    pub fn new(neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = neighbors.len();
        for (i, nb) in neighbors.iter().enumerate() {
            if nb.is_empty() {
                return Err(invalid(format!(
                    "node {i} has no neighbors and no self-loop"
                )));
            }
            if let Some(&j) = nb.iter().find(|&&j| j >= n) {
                return Err(invalid(format!("node {i} lists neighbor {j} of {n}")));
            }
        }
        Ok(Self { neighbors })
    }

    /// Undirected edge list plus a self-loop on every node.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut nb: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(invalid(format!("edge ({a}, {b}) outside {n} nodes")));
            }
            if !nb[a].contains(&b) {
                nb[a].push(b);
            }
            if !nb[b].contains(&a) {
                nb[b].push(a);
            }
        }
        for l in &mut nb {
            l.sort_unstable();
        }
        Self::new(nb)
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// 0/1 matrix with `A[i, j] = 1` iff `j` is a neighbor of `i`.
    pub fn allowed(&self) -> Matrix {
        let n = self.len();
        let mut m = Matrix::zeros(n, n);
        for (i, nb) in self.neighbors.iter().enumerate() {
            for &j in nb {
                m[(i, j)] = 1.0;
            }
        }
        m
    }
}

/// Where a head's spectral points come from.
#[derive(Debug, Clone)]
pub enum HeadSpectral {
    None,
    Implicit(Vec<ImplicitDensity>),
    Direct(DirectPoints),
}

/// Parameters of one head. In graph mode `wq`, `wk` and `wv` are the same
/// shared projection `W`.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    /// GAT attention vector, `1 x 2 d_k`.
    pub a: Option<ParamId>,
    pub spectral: HeadSpectral,
}

/// A multi-head attention layer whose parameters live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub config: AttentionConfig,
    pub d_model: usize,
    pub heads: Vec<HeadParams>,
    pub copula: Option<CopulaSpec>,
}

/// Source of spectral points for a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Spectra<'a> {
    /// The layer's own samplers, with base noise from this stream.
    Sampled(&'a Rng),
    /// Fixed samples, one per head.
    Given(&'a [SpectralSample]),
}

/// One implicit draw, for the variational objective.
#[derive(Debug, Clone, Copy)]
pub struct LatentDraw {
    pub head: usize,
    pub z_tilde: Var,
    pub mu: Var,
    pub log_sigma: Var,
    /// The (possibly copula-coupled) standard-normal base, `R x d`.
    pub base: Var,
}

/// Tape handles of one layer forward pass.
#[derive(Debug, Clone)]
pub struct LayerForward {
    pub weights: Vec<Var>,
    pub context: Vec<Var>,
    /// Log-similarity for softmax variants, `f^2` for kernel variants.
    pub similarity: Vec<Var>,
    pub similarity_is_log: bool,
    pub log_magnitude: Vec<Var>,
    /// Spectral points used by each head: first set, optional second set.
    pub points: Vec<KernelPoints>,
    pub latents: Vec<LatentDraw>,
    /// Copula log-density summed over draws (`mikan`).
    pub copula_term: Option<Var>,
}

const MASKED_LOG: f64 = -1e300;

impl AttentionLayer {
    /// Registers the layer's parameters under `prefix`. Each parameter is
    /// initialized from its own named stream of `rng`, so layers that share
    /// parameter names start from identical values.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        config: AttentionConfig,
        rng: &Rng,
    ) -> Result<Self> {
        config.validate()?;
        if d_model == 0 {
            return Err(invalid("d_model must be positive"));
        }
        let dk = config.d_k;
        let ds = config.spectral_dim();
        let proj_std = (1.0 / d_model as f64).sqrt();
        let sigma0 = 1.0 / (std::f64::consts::SQRT_2 * config.effective_lengthscale());
        let mut heads = Vec::with_capacity(config.heads);
        for m in 0..config.heads {
            let name = |s: &str| format!("{prefix}.h{m}.{s}");
            let mut init = |s: &str, rows: usize, cols: usize, std: f64| {
                let m = Matrix::randn(rows, cols, std, &mut rng.named(&name(s)));
                store.add(name(s), m)
            };
            let (wq, wk, wv, a) = match config.mode {
                Mode::Sequence => (
                    init("wq", d_model, dk, proj_std),
                    init("wk", d_model, dk, proj_std),
                    init("wv", d_model, dk, proj_std),
                    None,
                ),
                Mode::Graph => {
                    let w = init("w", d_model, dk, proj_std);
                    let a = init("a", 1, 2 * dk, (1.0 / dk as f64).sqrt());
                    (w, w, w, Some(a))
                }
            };
            let spectral = match config.variant {
                v if v.is_latent() => {
                    let count = if v.is_nonstationary() { 2 } else { 1 };
                    let dens = (0..count)
                        .map(|i| {
                            let n = name(&format!("density{i}"));
                            ImplicitDensity::new(
                                store,
                                &n,
                                dk,
                                ds,
                                config.hidden,
                                sigma0,
                                &mut rng.named(&n),
                            )
                        })
                        .collect();
                    HeadSpectral::Implicit(dens)
                }
                Variant::IkanDirect => {
                    let n = name("points");
                    let pts = DirectPoints::new(store, &n, config.r, ds, dk, &mut rng.named(&n));
                    if config.mode == Mode::Graph {
                        let scaled = store
                            .get(pts.id)
                            .scale(sigma0 * (2.0 * (dk as f64).sqrt()).sqrt());
                        *store.get_mut(pts.id) = scaled;
                    }
                    HeadSpectral::Direct(pts)
                }
                _ => HeadSpectral::None,
            };
            heads.push(HeadParams {
                wq,
                wk,
                wv,
                a,
                spectral,
            });
        }
        let copula = match &config.copula {
            Some(sigma) => Some(CopulaSpec::from_sigma(
                store,
                &format!("{prefix}.copula"),
                sigma,
            )?),
            None => None,
        };
        Ok(Self {
            config,
            d_model,
            heads,
            copula,
        })
    }

    /// Base noise for density `i` of head `m`.
    pub fn eps(&self, rng: &Rng, head: usize, density: usize) -> Matrix {
        let mut s = rng.named(&format!("eps.h{head}.d{density}"));
        Matrix::randn(self.config.r, self.config.spectral_dim(), 1.0, &mut s)
    }

    fn spectral_points(
        &self,
        tape: &mut Tape,
        b: &Bound,
        keys: &[Var],
        spectra: Spectra<'_>,
    ) -> Result<(Vec<KernelPoints>, Vec<LatentDraw>, Option<Var>)> {
        let cfg = &self.config;
        let heads = cfg.heads;
        let ds = cfg.spectral_dim();
        if let Spectra::Given(samples) = spectra {
            if samples.len() != heads {
                return Err(invalid(format!(
                    "{} samples for {heads} heads",
                    samples.len()
                )));
            }
            let mut pts = Vec::with_capacity(heads);
            for s in samples {
                if s.dim() != ds {
                    return Err(Error::DimensionMismatch {
                        op: "spectral points",
                        left: s.points.shape(),
                        right: (s.count(), ds),
                    });
                }
                let first = tape.constant(s.points.clone());
                let second = s.second.as_ref().map(|w| tape.constant(w.clone()));
                pts.push(KernelPoints { first, second });
            }
            return Ok((pts, Vec::new(), None));
        }
        let Spectra::Sampled(rng) = spectra else {
            unreachable!()
        };
        let mut pts = Vec::with_capacity(heads);
        let mut latents = Vec::new();
        let mut copula_term = None;

        let count = if cfg.variant.is_nonstationary() { 2 } else { 1 };
        let mut bases: Vec<Vec<Var>> = vec![Vec::with_capacity(count); heads];
        if cfg.variant.is_latent() {
            for i in 0..count {
                let eps: Vec<Matrix> = (0..heads).map(|m| self.eps(rng, m, i)).collect();
                match &self.copula {
                    Some(spec) => {
                        let (coupled, l) = spec.couple(tape, b, &eps);
                        let term = CopulaSpec::log_density_term(tape, l, &eps, &coupled);
                        copula_term = Some(match copula_term {
                            None => term,
                            Some(acc) => tape.add(acc, term),
                        });
                        for (m, v) in coupled.into_iter().enumerate() {
                            bases[m].push(v);
                        }
                    }
                    None => {
                        for (m, e) in eps.into_iter().enumerate() {
                            bases[m].push(tape.constant(e));
                        }
                    }
                }
            }
        }

        for (m, head) in self.heads.iter().enumerate() {
            match &head.spectral {
                HeadSpectral::Implicit(dens) => {
                    let prev = tape.set_phase(Phase::Sampler);
                    let summary = tape.col_mean(keys[m]);
                    tape.set_phase(prev);
                    let mut ws = Vec::with_capacity(dens.len());
                    for (i, d) in dens.iter().enumerate() {
                        let base = bases[m][i];
                        let draw = d.draw(tape, b, summary, base);
                        latents.push(LatentDraw {
                            head: m,
                            z_tilde: draw.z_tilde,
                            mu: draw.mu,
                            log_sigma: draw.log_sigma,
                            base,
                        });
                        ws.push(draw.w);
                    }
                    pts.push(KernelPoints {
                        first: ws[0],
                        second: ws.get(1).copied(),
                    });
                }
                HeadSpectral::Direct(p) => pts.push(KernelPoints {
                    first: b[p.id],
                    second: None,
                }),
                HeadSpectral::None => {
                    return Err(invalid(format!(
                        "variant {} has no spectral points",
                        cfg.variant
                    )))
                }
            }
        }
        Ok((pts, latents, copula_term))
    }

    /// Records a forward pass. `hq` holds the query inputs and `hk` the key
    /// inputs (the same node for self-attention). `allowed` is an optional 0/1
    /// mask; graph mode requires one.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        hq: Var,
        hk: Var,
        allowed: Option<&Matrix>,
        spectra: Spectra<'_>,
    ) -> Result<LayerForward> {
        let cfg = &self.config;
        let (tq, dq) = tape.value(hq).shape();
        let (tk, dk_in) = tape.value(hk).shape();
        if dq != self.d_model || dk_in != self.d_model {
            return Err(Error::DimensionMismatch {
                op: "attention input",
                left: (tq, dq),
                right: (tk, self.d_model),
            });
        }
        if tq == 0 || tk == 0 {
            return Err(Error::EmptyRow);
        }
        if let Some(a) = allowed {
            if a.shape() != (tq, tk) {
                return Err(Error::DimensionMismatch {
                    op: "attention mask",
                    left: a.shape(),
                    right: (tq, tk),
                });
            }
            if let Some(i) = (0..tq).find(|&i| a.row(i).iter().all(|&x| x == 0.0)) {
                return Err(invalid(format!("row {i} of the mask allows no key")));
            }
        }
        if cfg.mode == Mode::Graph && (allowed.is_none() || tq != tk) {
            return Err(invalid("graph mode needs a square neighbor mask"));
        }

        let prev = tape.set_phase(Phase::Projection);
        let mut qs = Vec::with_capacity(cfg.heads);
        let mut ks = Vec::with_capacity(cfg.heads);
        for h in &self.heads {
            let q = tape.matmul(hq, b[h.wq]);
            let k = if cfg.mode == Mode::Graph {
                q
            } else {
                tape.matmul(hk, b[h.wk])
            };
            qs.push(q);
            ks.push(k);
        }
        tape.set_phase(prev);

        let (points, latents, copula_term) = if cfg.variant.is_kernel() {
            self.spectral_points(tape, b, &ks, spectra)?
        } else {
            (Vec::new(), Vec::new(), None)
        };

        let mut out = LayerForward {
            weights: Vec::new(),
            context: Vec::new(),
            similarity: Vec::new(),
            similarity_is_log: !cfg.variant.is_kernel(),
            log_magnitude: Vec::new(),
            points: points.clone(),
            latents,
            copula_term,
        };
        for (m, h) in self.heads.iter().enumerate() {
            let pts = points.get(m).copied();
            let (w, sim, logmag) = match cfg.mode {
                Mode::Sequence => self.sequence_head(tape, qs[m], ks[m], allowed, pts),
                Mode::Graph => self.graph_head(tape, b, h, qs[m], allowed.expect("checked"), pts),
            };
            let prev = tape.set_phase(Phase::Other);
            let v = if cfg.mode == Mode::Graph {
                qs[m]
            } else {
                tape.matmul(hk, b[h.wv])
            };
            let ctx = tape.matmul(w, v);
            tape.set_phase(prev);
            out.weights.push(w);
            out.context.push(ctx);
            out.similarity.push(sim);
            out.log_magnitude.push(logmag);
        }
        Ok(out)
    }

    /// Kernel-variant weights: `f2 * exp(logmag - rowmax)`, rows normalized.
    fn kernel_weights(tape: &mut Tape, f2: Var, logmag: Var, allowed: Option<&Matrix>) -> Var {
        let prev = tape.set_phase(Phase::Pairwise);
        let lm = tape.value(logmag);
        let fv = tape.value(f2);
        let keep = |i: usize, j: usize| allowed.is_none_or(|a| a[(i, j)] != 0.0);
        // shift by the largest log unnormalized weight, capped so exp stays finite
        let neg = Matrix::from_fn(lm.rows(), 1, |i, _| {
            let (mut top, mut joint) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for j in (0..lm.cols()).filter(|&j| keep(i, j)) {
                top = top.max(lm[(i, j)]);
                if fv[(i, j)] > 0.0 {
                    joint = joint.max(lm[(i, j)] + fv[(i, j)].ln());
                }
            }
            -joint.max(top - 700.0)
        });
        let neg = tape.constant(neg);
        let mut shifted = tape.add_col(logmag, neg);
        if let Some(a) = allowed {
            let (r, c) = a.shape();
            let floor = tape.constant(Matrix::filled(r, c, MASKED_LOG));
            shifted = tape.select(a.clone(), shifted, floor);
        }
        let mag = tape.exp(shifted);
        let u = tape.mul(f2, mag);
        tape.set_phase(Phase::Normalization);
        let w = tape.row_normalize(u);
        tape.set_phase(prev);
        w
    }

    fn sequence_head(
        &self,
        tape: &mut Tape,
        q: Var,
        k: Var,
        allowed: Option<&Matrix>,
        pts: Option<KernelPoints>,
    ) -> (Var, Var, Var) {
        let cfg = &self.config;
        let scale = 2.0 * (cfg.d_k as f64).sqrt();
        let prev = tape.set_phase(Phase::Features);
        let nq = tape.row_p_norm_sq(q, cfg.p);
        let nk = tape.row_p_norm_sq(k, cfg.p);
        tape.set_phase(Phase::Pairwise);
        let mag = tape.outer_sum(nq, nk);
        let logmag = tape.scale(mag, 1.0 / scale);

        if let Some(pts) = pts {
            tape.set_phase(prev);
            let f = rff::gram(tape, q, k, pts);
            tape.set_phase(Phase::Pairwise);
            let f2 = tape.square(f);
            let w = Self::kernel_weights(tape, f2, logmag, allowed);
            tape.set_phase(prev);
            return (w, f2, logmag);
        }

        let logsim = match cfg.variant {
            Variant::Linear => {
                let s = tape.matmul_nt(q, k);
                let s = tape.relu(s);
                let s = tape.add_scalar(s, 1e-6);
                tape.log(s)
            }
            Variant::Expsin => {
                let d = tape.pairwise_sq_dist(q, k);
                tape.periodic_log_sim(d, cfg.period, cfg.ell)
            }
            _ => {
                let d = tape.pairwise_sq_dist(q, k);
                tape.scale(d, -1.0 / scale)
            }
        };
        let logits = if cfg.variant == Variant::RbfOnly {
            logsim
        } else {
            tape.add(logsim, logmag)
        };
        tape.set_phase(Phase::Normalization);
        let w = tape.row_softmax(logits, allowed.cloned());
        tape.set_phase(prev);
        (w, logsim, logmag)
    }

    fn graph_head(
        &self,
        tape: &mut Tape,
        b: &Bound,
        h: &HeadParams,
        p_var: Var,
        allowed: &Matrix,
        pts: Option<KernelPoints>,
    ) -> (Var, Var, Var) {
        let cfg = &self.config;
        let dk = cfg.d_k;
        let n = tape.value(p_var).rows();
        let c = cfg.c;
        let a = b[h.a.expect("graph heads carry an attention vector")];

        let prev = tape.set_phase(Phase::Features);
        let a1 = tape.slice_cols(a, 0, dk);
        let a2 = tape.slice_cols(a, dk, dk);
        let s = tape.matmul_nt(p_var, a1);
        let t = tape.matmul_nt(p_var, a2);
        tape.set_phase(Phase::Pairwise);
        let e = tape.outer_sum(s, t);
        let pos = tape.value(e).map(|x| if x >= 0.0 { 1.0 } else { 0.0 });

        // magnitude: (|q_i|^2 + |k_j|^2) / 2 + c_eff^2 |a|^2
        tape.set_phase(Phase::Features);
        let nq = tape.row_p_norm_sq(p_var, cfg.p);
        let na = tape.row_p_norm_sq(a, cfg.p);
        let ones = tape.constant(Matrix::filled(n, 1, 1.0));
        let na_col = tape.matmul(ones, na);
        let na_col_c = tape.scale(na_col, c * c);
        tape.set_phase(Phase::Pairwise);
        let base = tape.outer_sum(nq, nq);
        let base = tape.scale(base, 0.5);
        let mag1 = tape.add_col(base, na_col);
        let magc = tape.add_col(base, na_col_c);
        let logmag = tape.select(pos.clone(), mag1, magc);

        if let Some(pts) = pts {
            let zeros = tape.constant(Matrix::zeros(n, dk));
            tape.set_phase(Phase::Features);
            let q2 = tape.concat_cols(&[p_var, zeros]);
            let k2 = tape.concat_cols(&[zeros, p_var]);
            let mut prods = Vec::with_capacity(2);
            for slope in [1.0, c] {
                let ca = tape.scale(a, slope);
                let fq = rff::gram(tape, q2, ca, pts);
                let fk = rff::gram(tape, k2, ca, pts);
                tape.set_phase(Phase::Pairwise);
                let fq2 = tape.square(fq);
                let fk2 = tape.square(fk);
                prods.push(tape.matmul_nt(fq2, fk2));
                tape.set_phase(Phase::Features);
            }
            tape.set_phase(Phase::Pairwise);
            let f2 = tape.select(pos, prods[0], prods[1]);
            let w = Self::kernel_weights(tape, f2, logmag, Some(allowed));
            tape.set_phase(prev);
            return (w, f2, logmag);
        }

        // log-similarity: -(|q_i - c a|^2 + |c a - k_j|^2) / 2 for each slope
        let mut sims = Vec::with_capacity(2);
        for slope in [1.0, c] {
            tape.set_phase(Phase::Features);
            let ca1 = tape.scale(a1, slope);
            let ca2 = tape.scale(a2, slope);
            let di = tape.pairwise_sq_dist(p_var, ca1);
            let dj = tape.pairwise_sq_dist(p_var, ca2);
            let na1 = tape.row_p_norm_sq(ca1, 2.0);
            let na2 = tape.row_p_norm_sq(ca2, 2.0);
            let na1 = tape.matmul(ones, na1);
            let na2 = tape.matmul(ones, na2);
            let di = tape.add(di, na2);
            let dj = tape.add(dj, na1);
            tape.set_phase(Phase::Pairwise);
            let s = tape.outer_sum(di, dj);
            sims.push(tape.scale(s, -0.5));
        }
        let logsim = tape.select(pos.clone(), sims[0], sims[1]);

        let logits = match cfg.variant {
            Variant::RbfOnly => logsim,
            _ => {
                let ce = tape.scale(e, c);
                tape.select(pos, e, ce)
            }
        };
        tape.set_phase(Phase::Normalization);
        let w = tape.row_softmax(logits, Some(allowed.clone()));
        tape.set_phase(prev);
        (w, logsim, logmag)
    }
}

/// Weights, contexts and decomposition factors of a forward pass, per head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub weights: Vec<Matrix>,
    pub context: Vec<Matrix>,
    /// Similarity factor values (not logs).
    pub similarity: Vec<Matrix>,
    pub log_magnitude: Vec<Matrix>,
    /// 0/1 matrix of the entries that take part in each row.
    pub allowed: Option<Matrix>,
}

impl AttentionOutput {
    pub fn from_forward(tape: &Tape, fwd: &LayerForward, allowed: Option<&Matrix>) -> Result<Self> {
        let mut out = AttentionOutput {
            weights: Vec::new(),
            context: Vec::new(),
            similarity: Vec::new(),
            log_magnitude: Vec::new(),
            allowed: allowed.cloned(),
        };
        for m in 0..fwd.weights.len() {
            let w = tape.value(fwd.weights[m]);
            for i in 0..w.rows() {
                if w.row(i).iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        context: format!("attention weights, head {m}, row {i}"),
                    });
                }
            }
            let ctx = tape.value(fwd.context[m]);
            if !ctx.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("attention context, head {m}"),
                });
            }
            let sim = tape.value(fwd.similarity[m]);
            let sim = if fwd.similarity_is_log {
                sim.map(f64::exp)
            } else {
                sim.clone()
            };
            out.weights.push(w.clone());
            out.context.push(ctx.clone());
            out.similarity.push(sim);
            out.log_magnitude
                .push(tape.value(fwd.log_magnitude[m]).clone());
        }
        Ok(out)
    }

    fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed.as_ref().is_none_or(|a| a[(i, j)] != 0.0)
    }

    /// `head,row,col,value` lines for every allowed entry.
    pub fn weights_csv(&self) -> String {
        let mut s = String::from("head,row,col,value\n");
        for (m, w) in self.weights.iter().enumerate() {
            for i in 0..w.rows() {
                for j in 0..w.cols() {
                    if self.is_allowed(i, j) {
                        s.push_str(&format!("{m},{i},{j},{}\n", w[(i, j)]));
                    }
                }
            }
        }
        s
    }
}

/// Self-attention over the rows of `h` (`T x d_model`).
pub fn attend_sequence(
    h: &Matrix,
    layer: &AttentionLayer,
    store: &ParamStore,
    spectra: Spectra<'_>,
) -> Result<AttentionOutput> {
    if layer.config.mode != Mode::Sequence {
        return Err(invalid("attend_sequence needs a sequence-mode layer"));
    }
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let hv = tape.constant(h.clone());
    let fwd = layer.forward(&mut tape, &b, hv, hv, None, spectra)?;
    AttentionOutput::from_forward(&tape, &fwd, None)
}

/// GAT-style attention of each node over its neighbors.
pub fn attend_graph(
    h: &Matrix,
    layer: &AttentionLayer,
    store: &ParamStore,
    mask: &GraphMask,
    spectra: Spectra<'_>,
) -> Result<AttentionOutput> {
    if layer.config.mode != Mode::Graph {
        return Err(invalid("attend_graph needs a graph-mode layer"));
    }
    if mask.len() != h.rows() {
        return Err(invalid(format!(
            "mask has {} nodes, features {}",
            mask.len(),
            h.rows()
        )));
    }
    let allowed = mask.allowed();
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let hv = tape.constant(h.clone());
    let fwd = layer.forward(&mut tape, &b, hv, hv, Some(&allowed), spectra)?;
    AttentionOutput::from_forward(&tape, &fwd, Some(&allowed))
}

/// Per-head summary of an attention output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadDiagnostics {
    pub head: usize,
    /// Largest similarity over all allowed entries.
    pub max_similarity: f64,
    /// Largest similarity per row.
    pub row_max_similarity: Vec<f64>,
    /// Mean of the magnitude factor over allowed entries (may be infinite).
    pub mean_magnitude: f64,
    pub mean_log_magnitude: f64,
    pub row_entropy: Vec<f64>,
}

/// Diagnostics over all heads.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub heads: Vec<HeadDiagnostics>,
    /// Mean over allowed entries of the standard deviation across heads.
    pub cross_head_std: f64,
}

impl Diagnostics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    /// `head,row,max_similarity,entropy` lines.
    pub fn rows_csv(&self) -> String {
        let mut s = String::from("head,row,max_similarity,entropy\n");
        for h in &self.heads {
            for (i, (ms, e)) in h.row_max_similarity.iter().zip(&h.row_entropy).enumerate() {
                s.push_str(&format!("{},{i},{ms},{e}\n", h.head));
            }
        }
        s
    }
}

pub fn diagnostics(output: &AttentionOutput) -> Diagnostics {
    let mut heads = Vec::with_capacity(output.weights.len());
    for (m, w) in output.weights.iter().enumerate() {
        let sim = &output.similarity[m];
        let lm = &output.log_magnitude[m];
        let mut row_max = Vec::with_capacity(w.rows());
        let mut row_ent = Vec::with_capacity(w.rows());
        let (mut mag_sum, mut log_sum, mut count) = (0.0, 0.0, 0usize);
        for i in 0..w.rows() {
            let mut mx = f64::NEG_INFINITY;
            let mut row = Vec::with_capacity(w.cols());
            for j in 0..w.cols() {
                if output.is_allowed(i, j) {
                    mx = mx.max(sim[(i, j)]);
                    mag_sum += lm[(i, j)].exp();
                    log_sum += lm[(i, j)];
                    count += 1;
                    row.push(w[(i, j)]);
                }
            }
            row_max.push(mx);
            row_ent.push(entropy(&row));
        }
        heads.push(HeadDiagnostics {
            head: m,
            max_similarity: row_max.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            row_max_similarity: row_max,
            mean_magnitude: mag_sum / count as f64,
            mean_log_magnitude: log_sum / count as f64,
            row_entropy: row_ent,
        });
    }
    let cross_head_std = cross_head_std(output);
    Diagnostics {
        heads,
        cross_head_std,
    }
}

fn cross_head_std(output: &AttentionOutput) -> f64 {
    let m = output.weights.len();
    if m < 2 {
        return 0.0;
    }
    let (rows, cols) = output.weights[0].shape();
    let (mut acc, mut count) = (0.0, 0usize);
    for i in 0..rows {
        for j in 0..cols {
            if !output.is_allowed(i, j) {
                continue;
            }
            let vals: Vec<f64> = output.weights.iter().map(|w| w[(i, j)]).collect();
            let mean = vals.iter().sum::<f64>() / m as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            acc += var.sqrt();
            count += 1;
        }
    }
    acc / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposition::leaky_relu;
    use crate::numerics::{matmul, stable_softmax};
    use crate::spectral::sample_gaussian;

    fn layer(
        variant: Variant,
        heads: usize,
        d_model: usize,
        d_k: usize,
        seed: u64,
    ) -> (AttentionLayer, ParamStore) {
        let mut store = ParamStore::new();
        let cfg = AttentionConfig::new(variant, heads, d_k);
        let l = AttentionLayer::new(&mut store, "att", d_model, cfg, &Rng::new(seed)).unwrap();
        (l, store)
    }

    fn graph_layer(
        variant: Variant,
        heads: usize,
        d_model: usize,
        d_k: usize,
        seed: u64,
    ) -> (AttentionLayer, ParamStore) {
        let mut store = ParamStore::new();
        let mut cfg = AttentionConfig::new(variant, heads, d_k);
        cfg.mode = Mode::Graph;
        let l = AttentionLayer::new(&mut store, "gat", d_model, cfg, &Rng::new(seed)).unwrap();
        (l, store)
    }

    fn assert_rows_stochastic(out: &AttentionOutput) {
        for w in &out.weights {
            for i in 0..w.rows() {
                let s: f64 = w.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-10, "row {i} sums to {s}");
                assert!(w.row(i).iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn dot_matches_textbook_softmax() {
        let (l, store) = layer(Variant::Dot, 2, 6, 4, 1);
        let h = Matrix::randn(7, 6, 1.0, &mut Rng::new(2));
        let out = attend_sequence(&h, &l, &store, Spectra::Sampled(&Rng::new(0))).unwrap();
        for (m, head) in l.heads.iter().enumerate() {
            let q = matmul(&h, store.get(head.wq)).unwrap();
            let k = matmul(&h, store.get(head.wk)).unwrap();
            for i in 0..7 {
                let logits: Vec<f64> = (0..7)
                    .map(|j| crate::numerics::dot(q.row(i), k.row(j)) / 2.0)
                    .collect();
                let want = stable_softmax(&logits, None).unwrap();
                for j in 0..7 {
                    assert!((out.weights[m][(i, j)] - want[j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rbf_only_drops_the_magnitude() {
        let (l, store) = layer(Variant::RbfOnly, 1, 5, 4, 3);
        let h = Matrix::randn(6, 5, 1.0, &mut Rng::new(4));
        let out = attend_sequence(&h, &l, &store, Spectra::Sampled(&Rng::new(0))).unwrap();
        let q = matmul(&h, store.get(l.heads[0].wq)).unwrap();
        let k = matmul(&h, store.get(l.heads[0].wk)).unwrap();
        for i in 0..6 {
            let logits: Vec<f64> = (0..6)
                .map(|j| -crate::numerics::sq_dist(q.row(i), k.row(j)) / 4.0)
                .collect();
            let want = stable_softmax(&logits, None).unwrap();
            for j in 0..6 {
                assert!((out.weights[0][(i, j)] - want[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn every_variant_is_row_stochastic_and_single_token_is_one() {
        for v in Variant::ALL {
            let (l, store) = layer(v, 2, 5, 3, 7);
            let h = Matrix::randn(6, 5, 1.0, &mut Rng::new(8));
            let out = attend_sequence(&h, &l, &store, Spectra::Sampled(&Rng::new(9))).unwrap();
            assert_rows_stochastic(&out);
            let one = Matrix::randn(1, 5, 1.0, &mut Rng::new(10));
            let out = attend_sequence(&one, &l, &store, Spectra::Sampled(&Rng::new(9))).unwrap();
            for w in &out.weights {
                assert_eq!(w.data(), &[1.0], "{v}");
            }
        }
    }

    #[test]
    fn ika_with_gaussian_points_approaches_dot() {
        let d_k = 4;
        let (dot_l, store) = layer(Variant::Dot, 1, 4, d_k, 11);
        let mut s2 = ParamStore::new();
        let ika = AttentionLayer::new(
            &mut s2,
            "att",
            4,
            AttentionConfig::new(Variant::IkaS, 1, d_k),
            &Rng::new(11),
        )
        .unwrap();
        // same projections
        for id in store.ids() {
            let tgt = s2.id(store.name(id)).unwrap();
            *s2.get_mut(tgt) = store.get(id).clone();
        }
        let h = Matrix::randn(5, 4, 0.5, &mut Rng::new(12));
        let l = (d_k as f64).powf(0.25);
        let sample = sample_gaussian(d_k, 100_000, l, &mut Rng::new(13)).unwrap();
        let a = attend_sequence(&h, &dot_l, &store, Spectra::Sampled(&Rng::new(0))).unwrap();
        let b = attend_sequence(&h, &ika, &s2, Spectra::Given(&[sample])).unwrap();
        let gap = a.weights[0].sub(&b.weights[0]).unwrap().max_abs();
        assert!(gap <= 0.02, "gap {gap}");
    }

    #[test]
    fn permutation_equivariance() {
        for v in [Variant::Dot, Variant::Expsin, Variant::IkanDirect] {
            let (l, store) = layer(v, 1, 4, 3, 14);
            let h = Matrix::randn(5, 4, 1.0, &mut Rng::new(15));
            let perm = [3, 0, 4, 1, 2];
            let hp = Matrix::from_fn(5, 4, |i, j| h[(perm[i], j)]);
            let a = attend_sequence(&h, &l, &store, Spectra::Sampled(&Rng::new(0))).unwrap();
            let b = attend_sequence(&hp, &l, &store, Spectra::Sampled(&Rng::new(0))).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    let d = (b.weights[0][(i, j)] - a.weights[0][(perm[i], perm[j])]).abs();
                    assert!(d < 1e-14, "{v}: {d}");
                }
            }
        }
    }

    #[test]
    fn larger_key_magnitude_gains_weight() {
        // keys 1 and 2 sit at distance 1 from query 0 but |k_2|^2 = 4 > |k_1|^2 = 2
        let (l, mut store) = layer(Variant::Dot, 1, 2, 2, 16);
        let h = &l.heads[0];
        for id in [h.wq, h.wk, h.wv] {
            *store.get_mut(id) = Matrix::identity(2);
        }
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0], vec![2.0, 0.0]]).unwrap();
        let out = attend_sequence(&x, &l, &store, Spectra::Sampled(&Rng::new(0))).unwrap();
        let w = &out.weights[0];
        assert!((out.similarity[0][(0, 1)] - out.similarity[0][(0, 2)]).abs() < 1e-15);
        let ratio = w[(0, 2)] / w[(0, 1)];
        assert!((ratio - (2.0 / (2.0 * 2f64.sqrt())).exp()).abs() < 1e-12);
    }

    #[test]
    fn graph_dot_matches_leaky_relu_softmax() {
        let n = 10;
        let mut rng = Rng::new(17);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.bernoulli(0.3) {
                    edges.push((i, j));
                }
            }
        }
        let mask = GraphMask::from_edges(n, &edges).unwrap();
        let (l, store) = graph_layer(Variant::Dot, 2, 5, 3, 18);
        let h = Matrix::randn(n, 5, 1.0, &mut rng);
        let out = attend_graph(&h, &l, &store, &mask, Spectra::Sampled(&Rng::new(0))).unwrap();
        assert_rows_stochastic(&out);
        for (m, head) in l.heads.iter().enumerate() {
            let p = matmul(&h, store.get(head.wq)).unwrap();
            let a = store.get(head.a.unwrap());
            for i in 0..n {
                let nb = mask.neighbors(i);
                let logits: Vec<f64> = nb
                    .iter()
                    .map(|&j| {
                        let e: f64 = (0..3)
                            .map(|c| a[(0, c)] * p[(i, c)] + a[(0, 3 + c)] * p[(j, c)])
                            .sum();
                        leaky_relu(e, 0.2)
                    })
                    .collect();
                let want = stable_softmax(&logits, None).unwrap();
                for j in 0..n {
                    let got = out.weights[m][(i, j)];
                    match nb.iter().position(|&x| x == j) {
                        Some(k) => assert!((got - want[k]).abs() < 1e-10),
                        None => assert_eq!(got, 0.0),
                    }
                }
            }
        }
    }

    #[test]
    fn graph_decomposition_factors_reproduce_scores() {
        let n = 6;
        let mask =
            GraphMask::from_edges(n, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5)]).unwrap();
        let (l, store) = graph_layer(Variant::Dot, 1, 4, 3, 19);
        let h = Matrix::randn(n, 4, 1.0, &mut Rng::new(20));
        let out = attend_graph(&h, &l, &store, &mask, Spectra::Sampled(&Rng::new(0))).unwrap();
        let (rbf, _) = graph_layer(Variant::RbfOnly, 1, 4, 3, 19);
        let r = attend_graph(&h, &rbf, &store, &mask, Spectra::Sampled(&Rng::new(0))).unwrap();
        // logsim + logmag = LeakyReLU score for every allowed pair
        let head = &l.heads[0];
        let p = matmul(&h, store.get(head.wq)).unwrap();
        let a = store.get(head.a.unwrap());
        for i in 0..n {
            for &j in mask.neighbors(i) {
                let e: f64 = (0..3)
                    .map(|c| a[(0, c)] * p[(i, c)] + a[(0, 3 + c)] * p[(j, c)])
                    .sum();
                let got = out.similarity[0][(i, j)].ln() + out.log_magnitude[0][(i, j)];
                assert!((got - leaky_relu(e, 0.2)).abs() < 1e-10);
                assert_eq!(r.similarity[0][(i, j)], out.similarity[0][(i, j)]);
            }
        }
    }

    #[test]
    fn graph_kernel_variants_respect_the_mask() {
        let n = 8;
        let mask = GraphMask::from_edges(n, &[(0, 1), (1, 2), (2, 3), (5, 6), (6, 7)]).unwrap();
        let allowed = mask.allowed();
        for v in [
            Variant::IkaS,
            Variant::Ikan,
            Variant::IkanDirect,
            Variant::Mikan,
        ] {
            let (l, store) = graph_layer(v, 2, 4, 3, 21);
            let h = Matrix::randn(n, 4, 1.0, &mut Rng::new(22));
            let out = attend_graph(&h, &l, &store, &mask, Spectra::Sampled(&Rng::new(1))).unwrap();
            assert_rows_stochastic(&out);
            for w in &out.weights {
                for i in 0..n {
                    for j in 0..n {
                        if allowed[(i, j)] == 0.0 {
                            assert_eq!(w[(i, j)], 0.0, "{v}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn star_graph_with_identical_features_is_uniform() {
        let n = 5;
        let edges: Vec<(usize, usize)> = (1..n).map(|j| (0, j)).collect();
        let mask = GraphMask::from_edges(n, &edges).unwrap();
        let h = Matrix::from_fn(n, 3, |_, j| 0.3 * (j as f64 + 1.0));
        for v in [Variant::Dot, Variant::IkanDirect] {
            let (l, store) = graph_layer(v, 1, 3, 2, 23);
            let out = attend_graph(&h, &l, &store, &mask, Spectra::Sampled(&Rng::new(0))).unwrap();
            for i in 0..n {
                let nb = mask.neighbors(i);
                for &j in nb {
                    let want = 1.0 / nb.len() as f64;
                    assert!((out.weights[0][(i, j)] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn isolated_nodes_are_rejected() {
        assert!(GraphMask::new(vec![vec![0], vec![]]).is_err());
        assert!(GraphMask::new(vec![vec![0, 2], vec![1]]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = AttentionConfig::new(Variant::Dot, 2, 4);
        c.p = 1.0;
        assert!(c.validate().is_err());
        let mut c = AttentionConfig::new(Variant::Ikan, 2, 4);
        c.p = 0.5;
        assert!(c.validate().is_ok());
        c.copula = Some(Matrix::identity(2));
        assert!(c.validate().is_err());
        let mut c = AttentionConfig::new(Variant::Mikan, 2, 4);
        c.copula = None;
        assert!(c.validate().is_err());
        let mut c = AttentionConfig::new(Variant::Linear, 2, 4);
        c.mode = Mode::Graph;
        assert!(c.validate().is_err());
        assert_eq!(
            "ikan-direct".parse::<Variant>().unwrap(),
            Variant::IkanDirect
        );
        assert!("nope".parse::<Variant>().is_err());
    }

    #[test]
    fn diagnostics_examples() {
        let (l, mut store) = layer(Variant::Dot, 2, 4, 3, 24);
        let (q0, k0, v0) = (l.heads[0].wq, l.heads[0].wk, l.heads[0].wv);
        let (q1, k1, v1) = (l.heads[1].wq, l.heads[1].wk, l.heads[1].wv);
        for (a, b) in [(q0, q1), (k0, k1), (v0, v1)] {
            let m = store.get(a).clone();
            *store.get_mut(b) = m;
        }
        let h = Matrix::randn(5, 4, 1.0, &mut Rng::new(25));
        let out = attend_sequence(&h, &l, &store, Spectra::Sampled(&Rng::new(0))).unwrap();
        let d = diagnostics(&out);
        assert_eq!(d.cross_head_std, 0.0);
        assert!(d
            .heads
            .iter()
            .all(|h| h.max_similarity > 0.0 && h.max_similarity <= 1.0));

        let (l, mut store) = layer(Variant::Dot, 1, 4, 3, 26);
        *store.get_mut(l.heads[0].wq) = Matrix::zeros(4, 3);
        *store.get_mut(l.heads[0].wk) = Matrix::zeros(4, 3);
        let out = attend_sequence(&h, &l, &store, Spectra::Sampled(&Rng::new(0))).unwrap();
        let d = diagnostics(&out);
        for e in &d.heads[0].row_entropy {
            assert!((e - 5f64.ln()).abs() < 1e-12);
        }
        assert!(d.to_json().contains("cross_head_std"));
    }

    #[test]
    fn kernel_similarities_lie_in_unit_interval() {
        for v in [
            Variant::IkaS,
            Variant::IkaNs,
            Variant::Ikan,
            Variant::IkanDirect,
            Variant::Mikan,
        ] {
            let (l, store) = layer(v, 2, 4, 3, 27);
            let h = Matrix::randn(6, 4, 1.0, &mut Rng::new(28));
            let out = attend_sequence(&h, &l, &store, Spectra::Sampled(&Rng::new(2))).unwrap();
            let d = diagnostics(&out);
            for hd in &d.heads {
                assert!(
                    hd.max_similarity > 0.0 && hd.max_similarity <= 1.0 + 1e-12,
                    "{v}"
                );
            }
        }
    }

    #[test]
    fn mikan_with_identity_copula_matches_ikan() {
        let (ik, s_ik) = layer(Variant::Ikan, 2, 4, 3, 29);
        let (mk, s_mk) = layer(Variant::Mikan, 2, 4, 3, 29);
        let h = Matrix::randn(5, 4, 1.0, &mut Rng::new(30));
        let rng = Rng::new(31);
        let a = attend_sequence(&h, &ik, &s_ik, Spectra::Sampled(&rng)).unwrap();
        let b = attend_sequence(&h, &mk, &s_mk, Spectra::Sampled(&rng)).unwrap();
        assert_eq!(a.weights, b.weights);
    }
}
