//! Spectral-point samplers.
//!
//! A stationary kernel is the Fourier transform of a symmetric density over
//! frequencies `w`. The samplers here produce `w` four ways: from a fixed
//! Gaussian (the RBF kernel), as stored learnable points, from an implicit
//! generator network, and jointly across heads through a Gaussian copula.
//!
//! The implicit and copula samplers are written against the [`Tape`] so the
//! same code serves plain sampling and reparameterized training.

use crate::autodiff::{corr_cholesky_value, Bound, ParamId, ParamStore, Phase, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::numerics::{cholesky, gauss_quantile, matmul_nt, solve_lower, Matrix, Rng};

/// Whether a sample defines a stationary or a non-stationary kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectralKind {
    Stationary,
    NonstationaryPair,
}

/// Spectral points for one head. Rows of `points` are frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSample {
    pub points: Matrix,
    /// Second point set of a non-stationary pair, same shape as `points`.
    pub second: Option<Matrix>,
    pub head: usize,
    /// Unmirrored base draws behind implicit samples, one per point set.
    pub base: Vec<Matrix>,
}

impl SpectralSample {
    pub fn stationary(points: Matrix, head: usize) -> Result<Self> {
        if points.rows() == 0 || points.cols() == 0 {
            return Err(invalid(
                "spectral sample needs at least one point of positive dimension",
            ));
        }
        Ok(Self {
            points,
            second: None,
            head,
            base: Vec::new(),
        })
    }

    pub fn pair(first: Matrix, second: Matrix, head: usize) -> Result<Self> {
        if first.shape() != second.shape() {
            return Err(Error::DimensionMismatch {
                op: "spectral pair",
                left: first.shape(),
                right: second.shape(),
            });
        }
        let mut s = Self::stationary(first, head)?;
        s.second = Some(second);
        Ok(s)
    }

    pub fn kind(&self) -> SpectralKind {
        if self.second.is_some() {
            SpectralKind::NonstationaryPair
        } else {
            SpectralKind::Stationary
        }
    }

    /// Number of frequencies per point set.
    pub fn count(&self) -> usize {
        self.points.rows()
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }
}

/// `R` draws from `N(0, I / (2 l^2))`. The kernel estimate `f` then targets
/// `exp(-|x - y|^2 / (4 l^2))`, so `f^2` targets `exp(-|x - y|^2 / (2 l^2))`.
pub fn sample_gaussian(
    d: usize,
    r: usize,
    lengthscale: f64,
    rng: &mut Rng,
) -> Result<SpectralSample> {
    if !(lengthscale > 0.0 && lengthscale.is_finite()) {
        return Err(invalid(format!(
            "lengthscale must be positive, got {lengthscale}"
        )));
    }
    let std = 1.0 / (std::f64::consts::SQRT_2 * lengthscale);
    SpectralSample::stationary(Matrix::randn(r, d, std, rng), 0)
}

/// Two-layer tanh perceptron, optionally with a skip connection.
#[derive(Debug, Clone)]
pub struct Mlp2 {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub residual: bool,
}

impl Mlp2 {
    /// The output layer starts at zero weights with bias `out_bias`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        hidden: usize,
        out_bias: &[f64],
        residual: bool,
        rng: &mut Rng,
    ) -> Self {
        assert!(
            !residual || inputs == out_bias.len(),
            "residual needs in == out"
        );
        let w1 = Matrix::randn(inputs, hidden, (1.0 / inputs as f64).sqrt(), rng);
        Self {
            w1: store.add(format!("{name}.w1"), w1),
            b1: store.add(format!("{name}.b1"), Matrix::zeros(1, hidden)),
            w2: store.add(format!("{name}.w2"), Matrix::zeros(hidden, out_bias.len())),
            b2: store.add(format!("{name}.b2"), Matrix::row_vector(out_bias)),
            residual,
        }
    }

    pub fn apply(&self, tape: &mut Tape, b: &Bound, x: Var) -> Var {
        let h = tape.matmul(x, b[self.w1]);
        let h = tape.add_row(h, b[self.b1]);
        let h = tape.tanh(h);
        let o = tape.matmul(h, b[self.w2]);
        let o = tape.add_row(o, b[self.b2]);
        if self.residual {
            tape.add(o, x)
        } else {
            o
        }
    }
}

/// Implicit spectral density for one head.
///
/// An inference network maps a summary `h` to `(mu, log sigma)`, base draws are
/// `z~ = mu + sigma * eps`, mirrored to `[z~; -z~]`, and a generator network
/// bends their magnitudes: `w = sign(z) * g(|z|)`. Mirroring makes the point
/// set exactly symmetric about zero, so the induced kernel is real.
#[derive(Debug, Clone)]
pub struct ImplicitDensity {
    pub in_dim: usize,
    pub d: usize,
    pub hidden: usize,
    pub inference: Mlp2,
    /// `None` is the identity generator.
    pub generator: Option<Mlp2>,
}

/// Tape handles produced by one implicit draw.
#[derive(Debug, Clone, Copy)]
pub struct ImplicitDraw {
    /// Mirrored points, `2R x d`.
    pub w: Var,
    /// Unmirrored base draws `z~`, `R x d`.
    pub z_tilde: Var,
    pub mu: Var,
    pub log_sigma: Var,
}

impl ImplicitDensity {
    /// The generator is `g(x) = x + mlp(x)` with the MLP output starting at
    /// zero, and `sigma` starts at `init_sigma` for every coordinate. At
    /// initialization the points are therefore `N(0, init_sigma^2)` draws.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        d: usize,
        hidden: usize,
        init_sigma: f64,
        rng: &mut Rng,
    ) -> Self {
        let mut dens =
            Self::with_identity_generator(store, name, in_dim, d, hidden, init_sigma, rng);
        dens.generator = Some(Mlp2::new(
            store,
            &format!("{name}.psi2"),
            d,
            hidden,
            &vec![0.0; d],
            true,
            rng,
        ));
        dens
    }

    /// Same as [`ImplicitDensity::new`] with `g` fixed to the identity.
    pub fn with_identity_generator(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        d: usize,
        hidden: usize,
        init_sigma: f64,
        rng: &mut Rng,
    ) -> Self {
        let mut bias = vec![0.0; 2 * d];
        bias[d..].fill(init_sigma.ln());
        let inference = Mlp2::new(
            store,
            &format!("{name}.psi1"),
            in_dim,
            hidden,
            &bias,
            false,
            rng,
        );
        Self {
            in_dim,
            d,
            hidden,
            inference,
            generator: None,
        }
    }

    /// Records one draw. `h` is `1 x in_dim`; `base` holds standard (or
    /// copula-correlated) normal draws, `R x d`.
    pub fn draw(&self, tape: &mut Tape, b: &Bound, h: Var, base: Var) -> ImplicitDraw {
        assert_eq!(tape.value(h).shape(), (1, self.in_dim), "summary shape");
        assert_eq!(tape.value(base).cols(), self.d, "base width");
        let prev = tape.set_phase(Phase::Sampler);
        let out = self.inference.apply(tape, b, h);
        let mu = tape.slice_cols(out, 0, self.d);
        let log_sigma = tape.slice_cols(out, self.d, self.d);
        let sigma = tape.exp(log_sigma);
        let scaled = tape.mul_row(base, sigma);
        let z_tilde = tape.add_row(scaled, mu);
        let mirrored = tape.neg(z_tilde);
        let z = tape.concat_rows(&[z_tilde, mirrored]);
        let sign = tape.value(z).map(|x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        let sign = tape.constant(sign);
        let magnitude = tape.abs(z);
        let bent = match &self.generator {
            Some(g) => g.apply(tape, b, magnitude),
            None => magnitude,
        };
        let w = tape.mul(bent, sign);
        tape.set_phase(prev);
        ImplicitDraw {
            w,
            z_tilde,
            mu,
            log_sigma,
        }
    }

    /// Draws with caller-supplied standard-normal `eps` (`R x d`).
    pub fn sample_with_eps(
        &self,
        store: &ParamStore,
        h_summary: &[f64],
        eps: &Matrix,
        head: usize,
    ) -> Result<SpectralSample> {
        if h_summary.len() != self.in_dim {
            return Err(Error::DimensionMismatch {
                op: "sample_implicit (summary)",
                left: (h_summary.len(), 1),
                right: (self.in_dim, 1),
            });
        }
        if eps.cols() != self.d || eps.rows() == 0 {
            return Err(Error::DimensionMismatch {
                op: "sample_implicit (base draws)",
                left: eps.shape(),
                right: (eps.rows().max(1), self.d),
            });
        }
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let h = tape.constant(Matrix::row_vector(h_summary));
        let base = tape.constant(eps.clone());
        let draw = self.draw(&mut tape, &b, h, base);
        let mut s = SpectralSample::stationary(tape.value(draw.w).clone(), head)?;
        s.base.push(tape.value(draw.z_tilde).clone());
        Ok(s)
    }
}

/// `R` reparameterized draws from an implicit density, mirrored to `2R` points.
pub fn sample_implicit(
    h_summary: &[f64],
    density: &ImplicitDensity,
    store: &ParamStore,
    r: usize,
    rng: &mut Rng,
) -> Result<SpectralSample> {
    if r == 0 {
        return Err(invalid("R must be at least 1"));
    }
    let eps = Matrix::randn(r, density.d, 1.0, rng);
    density.sample_with_eps(store, h_summary, &eps, 0)
}

/// Learnable spectral points, a mixture of point masses.
#[derive(Debug, Clone, Copy)]
pub struct DirectPoints {
    pub id: ParamId,
}

impl DirectPoints {
    /// Initializes `R x d` points from `N(0, I / (2 sqrt(d_k)))`, the RBF
    /// spectral density with `l^2 = sqrt(d_k)`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        r: usize,
        d: usize,
        d_k: usize,
        rng: &mut Rng,
    ) -> Self {
        let var = 1.0 / (2.0 * (d_k as f64).sqrt());
        Self {
            id: store.add(name, Matrix::randn(r, d, var.sqrt(), rng)),
        }
    }
}

/// The stored points, verbatim.
pub fn direct_points(
    store: &ParamStore,
    points: &DirectPoints,
    head: usize,
) -> Result<SpectralSample> {
    SpectralSample::stationary(store.get(points.id).clone(), head)
}

/// Gaussian copula over heads with a learnable correlation matrix.
///
/// The correlation matrix is `L L^T`, where `L` comes from an unconstrained
/// `M x M` parameter through [`Tape::corr_cholesky`]: strictly-lower entries
/// as-is, exponentiated diagonal, rows scaled to unit norm.
#[derive(Debug, Clone, Copy)]
pub struct CopulaSpec {
    pub raw: ParamId,
    pub heads: usize,
}

/// Checks that `sigma` is a symmetric, unit-diagonal, positive definite matrix.
pub fn validate_correlation(sigma: &Matrix) -> Result<Matrix> {
    let n = sigma.rows();
    if n != sigma.cols() || n == 0 {
        return Err(invalid(format!(
            "correlation matrix must be square, got {:?}",
            sigma.shape()
        )));
    }
    for i in 0..n {
        if (sigma[(i, i)] - 1.0).abs() > 1e-12 {
            return Err(invalid(format!(
                "correlation diagonal entry {i} is {}",
                sigma[(i, i)]
            )));
        }
    }
    cholesky(sigma)
}

impl CopulaSpec {
    /// Independence copula, `Sigma = I`.
    pub fn independent(store: &mut ParamStore, name: &str, heads: usize) -> Result<Self> {
        if heads < 2 {
            return Err(invalid("a copula over heads needs at least two heads"));
        }
        Ok(Self {
            raw: store.add(name, Matrix::zeros(heads, heads)),
            heads,
        })
    }

    /// Copula with a given correlation matrix.
    pub fn from_sigma(store: &mut ParamStore, name: &str, sigma: &Matrix) -> Result<Self> {
        if sigma.rows() < 2 {
            return Err(invalid("a copula over heads needs at least two heads"));
        }
        let l = validate_correlation(sigma)?;
        let raw = Matrix::from_fn(l.rows(), l.cols(), |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => l[(i, j)],
            std::cmp::Ordering::Equal => l[(i, i)].ln(),
            std::cmp::Ordering::Less => 0.0,
        });
        Ok(Self {
            raw: store.add(name, raw),
            heads: sigma.rows(),
        })
    }

    /// Cholesky factor `L`.
    pub fn factor(&self, store: &ParamStore) -> Matrix {
        corr_cholesky_value(store.get(self.raw))
    }

    pub fn sigma(&self, store: &ParamStore) -> Matrix {
        let l = self.factor(store);
        matmul_nt(&l, &l).expect("square")
    }

    /// Couples per-head standard-normal draws `eps[m]` (`R x d` each).
    ///
    /// Coordinate `j` of head `m` becomes `sum_k L[m,k] eps[k][:, j]`, so for
    /// each coordinate the heads are jointly `N(0, Sigma)`. Returns the coupled
    /// draws and `L`.
    pub fn couple(&self, tape: &mut Tape, b: &Bound, eps: &[Matrix]) -> (Vec<Var>, Var) {
        assert_eq!(eps.len(), self.heads, "one draw matrix per head");
        let (r, d) = eps[0].shape();
        let prev = tape.set_phase(Phase::Copula);
        let l = tape.corr_cholesky(b[self.raw]);
        let mut per_coord = Vec::with_capacity(d);
        for j in 0..d {
            let e = Matrix::from_fn(r, self.heads, |i, m| eps[m][(i, j)]);
            let e = tape.constant(e);
            per_coord.push(tape.matmul_nt(e, l));
        }
        let heads = (0..self.heads)
            .map(|m| {
                let cols: Vec<Var> = per_coord
                    .iter()
                    .map(|&v| tape.slice_cols(v, m, 1))
                    .collect();
                tape.concat_cols(&cols)
            })
            .collect();
        tape.set_phase(prev);
        (heads, l)
    }

    /// Sum over all draws of the copula log density, written through the
    /// reparameterization: `-n sum log L[m,m] - (|eps|^2 - |v|^2) / 2` with `n`
    /// draws per head. Exactly zero when `L = I`.
    pub fn log_density_term(tape: &mut Tape, l: Var, eps: &[Matrix], coupled: &[Var]) -> Var {
        let prev = tape.set_phase(Phase::Copula);
        let n = eps[0].data().len() as f64;
        let diag = tape.diag(l);
        let log_diag = tape.log(diag);
        let log_det = tape.sum(log_diag);
        let log_det = tape.scale(log_det, -n);
        let eps_sq: f64 = eps
            .iter()
            .map(|e| e.data().iter().map(|x| x * x).sum::<f64>())
            .sum();
        let mut v_sq = None;
        for &v in coupled {
            let sq = tape.square(v);
            let s = tape.sum(sq);
            v_sq = Some(match v_sq {
                None => s,
                Some(acc) => tape.add(acc, s),
            });
        }
        let v_sq = v_sq.expect("at least one head");
        let eps_sq = tape.constant(Matrix::filled(1, 1, eps_sq));
        let diff = tape.sub(eps_sq, v_sq);
        let quad = tape.scale(diff, -0.5);
        let out = tape.add(log_det, quad);
        tape.set_phase(prev);
        out
    }
}

/// Standard-normal draws for head `m`, from the head's own sub-stream of `rng`.
pub fn head_eps(rng: &Rng, head: usize, r: usize, d: usize) -> Matrix {
    Matrix::randn(r, d, 1.0, &mut rng.substream(head as u64))
}

/// Joint draw across heads through the copula.
///
/// Head `m` reads its base noise from `rng.substream(m)`, the same stream
/// [`sample_implicit`] would use for it, so with `Sigma = I` the result matches
/// independent per-head sampling exactly.
pub fn sample_copula_joint(
    spec: &CopulaSpec,
    store: &ParamStore,
    densities: &[&ImplicitDensity],
    summaries: &[Vec<f64>],
    r: usize,
    rng: &Rng,
) -> Result<Vec<SpectralSample>> {
    if densities.len() != spec.heads || summaries.len() != spec.heads {
        return Err(invalid(format!(
            "copula over {} heads got {} densities and {} summaries",
            spec.heads,
            densities.len(),
            summaries.len()
        )));
    }
    if r == 0 {
        return Err(invalid("R must be at least 1"));
    }
    let d = densities[0].d;
    if densities.iter().any(|dn| dn.d != d) {
        return Err(invalid("copula heads must share the spectral dimension"));
    }
    validate_correlation(&spec.sigma(store))?;
    let eps: Vec<Matrix> = (0..spec.heads).map(|m| head_eps(rng, m, r, d)).collect();
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let (coupled, _) = spec.couple(&mut tape, &b, &eps);
    let mut out = Vec::with_capacity(spec.heads);
    for (m, (dens, h)) in densities.iter().zip(summaries).enumerate() {
        if h.len() != dens.in_dim {
            return Err(Error::DimensionMismatch {
                op: "sample_copula_joint (summary)",
                left: (h.len(), 1),
                right: (dens.in_dim, 1),
            });
        }
        let hv = tape.constant(Matrix::row_vector(h));
        let draw = dens.draw(&mut tape, &b, hv, coupled[m]);
        let mut s = SpectralSample::stationary(tape.value(draw.w).clone(), m)?;
        s.base.push(tape.value(draw.z_tilde).clone());
        out.push(s);
    }
    Ok(out)
}

/// Log density of the Gaussian copula,
/// `-1/2 log det Sigma - 1/2 eta^T (Sigma^-1 - I) eta` with `eta = Phi^-1(u)`.
pub fn gaussian_copula_log_density(u: &[f64], sigma: &Matrix) -> Result<f64> {
    if sigma.rows() != u.len() {
        return Err(Error::DimensionMismatch {
            op: "gaussian_copula_log_density",
            left: (u.len(), 1),
            right: sigma.shape(),
        });
    }
    let l = validate_correlation(sigma)?;
    let eta = u
        .iter()
        .map(|&x| gauss_quantile(x))
        .collect::<Result<Vec<f64>>>()?;
    let y = solve_lower(&l, &eta);
    let quad: f64 = y.iter().map(|v| v * v).sum::<f64>() - eta.iter().map(|v| v * v).sum::<f64>();
    let log_det: f64 = (0..l.rows()).map(|i| 2.0 * l[(i, i)].ln()).sum();
    Ok(-0.5 * log_det - 0.5 * quad)
}
