//! Variational objective, optimizer, training loop and gradient checking.
//!
//! Latent variants draw spectral points `z~ = mu + sigma * v` from an
//! inference network, so training maximizes
//!
//! ```text
//! ELBO = E_q[log p(y | z, h)] + log p(z) - log q(z | h)
//! ```
//!
//! with a standard-normal prior on `z~` and a single reparameterized draw per
//! step. Under `mikan`, `log q` includes the copula log-density of the coupled
//! base draws. Models without latents train on the log-likelihood alone.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::attention::LayerForward;
use crate::autodiff::{Bound, ParamStore, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::numerics::{Matrix, Rng};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Tape handles of the three ELBO terms, each `1 x 1`.
#[derive(Debug, Clone, Copy)]
pub struct ElboVars {
    pub log_lik: Var,
    pub log_prior: Var,
    pub log_q: Var,
}

/// Values of the ELBO terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ElboTerms {
    pub log_lik: f64,
    pub log_prior: f64,
    pub log_q: f64,
}

impl ElboTerms {
    pub fn read(tape: &Tape, v: &ElboVars) -> Self {
        Self {
            log_lik: tape.scalar(v.log_lik),
            log_prior: tape.scalar(v.log_prior),
            log_q: tape.scalar(v.log_q),
        }
    }

    pub fn elbo(&self) -> f64 {
        self.log_lik + self.log_prior - self.log_q
    }

    /// Single-sample estimate of `KL(q || p)`.
    pub fn kl(&self) -> f64 {
        self.log_q - self.log_prior
    }
}

/// `KL(N(mu, sigma^2) || N(0, 1))` summed over coordinates.
pub fn gaussian_kl(mu: &[f64], sigma: &[f64]) -> f64 {
    mu.iter()
        .zip(sigma)
        .map(|(&m, &s)| 0.5 * (m * m + s * s - 1.0) - s.ln())
        .sum()
}

/// `log p(z~)` and `log q(z~ | h)` of every draw in a layer forward pass.
/// Returns zeros for layers without latents.
pub fn latent_log_terms(tape: &mut Tape, fwd: &LayerForward) -> (Var, Var) {
    let zero = || Matrix::zeros(1, 1);
    let mut log_prior = tape.constant(zero());
    let mut log_q = tape.constant(zero());
    for d in &fwd.latents {
        let n = tape.value(d.z_tilde).data().len() as f64;
        let rows = tape.value(d.z_tilde).rows() as f64;

        let z2 = tape.square(d.z_tilde);
        let z2 = tape.sum(z2);
        let lp = tape.scale(z2, -0.5);
        let lp = tape.add_scalar(lp, -n * HALF_LN_2PI);
        log_prior = tape.add(log_prior, lp);

        let v2 = tape.square(d.base);
        let v2 = tape.sum(v2);
        let quad = tape.scale(v2, -0.5);
        let ls = tape.sum(d.log_sigma);
        let ls = tape.scale(ls, -rows);
        let lq = tape.add(quad, ls);
        let lq = tape.add_scalar(lq, -n * HALF_LN_2PI);
        log_q = tape.add(log_q, lq);
    }
    if let Some(c) = fwd.copula_term {
        log_q = tape.add(log_q, c);
    }
    (log_prior, log_q)
}

/// Recorded objective of one batch.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    /// Quantity to minimize.
    pub loss: Var,
    /// Batch means of the ELBO terms.
    pub terms: ElboVars,
}

impl Objective {
    /// `loss = -(log_lik + beta (log_prior - log_q))`, all terms already
    /// averaged over the batch.
    pub fn new(tape: &mut Tape, terms: ElboVars, kl_weight: f64) -> Self {
        let kl = tape.sub(terms.log_q, terms.log_prior);
        let kl = tape.scale(kl, kl_weight);
        let nll = tape.neg(terms.log_lik);
        let loss = tape.add(nll, kl);
        Self { loss, terms }
    }
}

/// Train and test metric of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub train: f64,
    pub test: f64,
}

/// A trainable model over a fixed dataset.
pub trait Model {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Number of training examples.
    fn train_len(&self) -> usize;
    /// Records the objective on the given training examples.
    fn objective(
        &self,
        tape: &mut Tape,
        b: &Bound,
        batch: &[usize],
        rng: &Rng,
    ) -> Result<Objective>;
    /// Accuracy or RMSE on the training and test sets.
    fn metrics(&self, rng: &Rng) -> Result<Metrics>;
}

/// Stochastic gradient descent with optional heavy-ball momentum:
/// `v <- momentum v + g`, `p <- p - lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Matrix>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Matrix]) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        if self.velocity.is_empty() {
            self.velocity = grads
                .iter()
                .map(|g| Matrix::zeros(g.rows(), g.cols()))
                .collect();
        }
        for ((p, v), g) in store
            .values_mut()
            .iter_mut()
            .zip(&mut self.velocity)
            .zip(grads)
        {
            for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + gi;
                *pi -= self.lr * *vi;
            }
        }
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Weight on `log q - log p`.
    pub kl_weight: f64,
    /// Gradients whose global L2 norm exceeds this are rescaled to it before
    /// the optimizer step; 0 disables clipping.
    pub clip_norm: f64,
    /// Written after every epoch with the latest finite parameters.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 16,
            kl_weight: 1e-3,
            clip_norm: 10.0,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(invalid("kl_weight must be finite and non-negative"));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(invalid("clip_norm must be finite and non-negative"));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub log_lik: f64,
    pub log_prior: f64,
    pub log_q: f64,
    pub train_metric: f64,
    pub test_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,log_lik,log_prior,log_q,train_metric,test_metric\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.epoch, e.loss, e.log_lik, e.log_prior, e.log_q, e.train_metric, e.test_metric
            ));
        }
        s
    }
}

fn write_checkpoint(cfg: &TrainConfig, store: &ParamStore) -> Result<()> {
    if let Some(path) = &cfg.checkpoint {
        std::fs::write(path, store.to_text())?;
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm` (0: no-op).
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Minibatch training. Each step draws one set of base noise shared by the
/// batch. On a non-finite loss, gradient or parameter the model is rolled
/// back to the end of the previous epoch, that state is checkpointed, and
/// [`Error::Diverged`] is returned.
pub fn train(model: &mut dyn Model, cfg: &TrainConfig, rng: &Rng) -> Result<TrainLog> {
    cfg.validate()?;
    let n = model.train_len();
    if n == 0 {
        return Err(invalid("empty training set"));
    }
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut log = TrainLog::default();
    let order_rng = rng.named("order");
    let noise_rng = rng.named("noise");
    let eval_rng = rng.named("eval");
    for epoch in 0..cfg.epochs {
        let good = model.params().clone();
        let diverged = |model: &mut dyn Model, cause: String| -> Result<TrainLog> {
            model.params_mut().load_values(&good)?;
            write_checkpoint(cfg, model.params())?;
            Err(Error::Diverged { epoch, cause })
        };
        let mut idx: Vec<usize> = (0..n).collect();
        order_rng.substream(epoch as u64).shuffle(&mut idx);
        let epoch_noise = noise_rng.substream(epoch as u64);
        let mut sums = [0.0; 4];
        let mut steps = 0usize;
        for (k, batch) in idx.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let b = model.params().bind(&mut tape);
            let obj = match model.objective(&mut tape, &b, batch, &epoch_noise.substream(k as u64))
            {
                Ok(o) => o,
                Err(e @ Error::NonFinite { .. }) => return diverged(model, e.to_string()),
                Err(e) => return Err(e),
            };
            let loss = tape.scalar(obj.loss);
            if !loss.is_finite() {
                return diverged(model, "non-finite loss".into());
            }
            let grads = match tape.backward(obj.loss) {
                Ok(g) => g,
                Err(e @ Error::NonFinite { .. }) => return diverged(model, e.to_string()),
                Err(e) => return Err(e),
            };
            let mut grads = model.params().collect_grads(&b, &grads);
            clip_global_norm(&mut grads, cfg.clip_norm);
            opt.step(model.params_mut(), &grads);
            if !model.params().is_finite() {
                return diverged(model, "non-finite parameter after step".into());
            }
            let t = ElboTerms::read(&tape, &obj.terms);
            for (s, v) in sums.iter_mut().zip([loss, t.log_lik, t.log_prior, t.log_q]) {
                *s += v;
            }
            steps += 1;
        }
        let m = match model.metrics(&eval_rng) {
            Ok(m) => m,
            Err(e @ Error::NonFinite { .. }) => return diverged(model, e.to_string()),
            Err(e) => return Err(e),
        };
        let s = steps as f64;
        log.epochs.push(EpochLog {
            epoch,
            loss: sums[0] / s,
            log_lik: sums[1] / s,
            log_prior: sums[2] / s,
            log_q: sums[3] / s,
            train_metric: m.train,
            test_metric: m.test,
        });
        write_checkpoint(cfg, model.params())?;
    }
    Ok(log)
}

/// ELBO terms averaged over `samples` independent draws.
pub fn evaluate_elbo(
    model: &dyn Model,
    batch: &[usize],
    rng: &Rng,
    samples: usize,
) -> Result<ElboTerms> {
    let mut acc = ElboTerms::default();
    for s in 0..samples {
        let mut tape = Tape::new();
        let b = model.params().bind(&mut tape);
        let obj = model.objective(&mut tape, &b, batch, &rng.substream(s as u64))?;
        let t = ElboTerms::read(&tape, &obj.terms);
        acc.log_lik += t.log_lik;
        acc.log_prior += t.log_prior;
        acc.log_q += t.log_q;
    }
    let k = samples as f64;
    Ok(ElboTerms {
        log_lik: acc.log_lik / k,
        log_prior: acc.log_prior / k,
        log_q: acc.log_q / k,
    })
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Parameters left out because some entry exceeds `1e3` in magnitude.
    pub skipped: Vec<String>,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compares reverse-mode gradients of `f` with central differences of step
/// `h` on every parameter entry. Relative error is
/// `|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)`.
pub fn gradcheck(
    store: &ParamStore,
    f: impl Fn(&mut Tape, &Bound) -> Result<Var>,
    h: f64,
) -> Result<GradcheckReport> {
    if !store.is_finite() {
        return Err(Error::NonFinite {
            context: "gradcheck parameters".into(),
        });
    }
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let loss = f(&mut tape, &b)?;
    let grads = tape.backward(loss)?;
    let grads = store.collect_grads(&b, &grads);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let b = s.bind(&mut tape);
        let l = f(&mut tape, &b)?;
        Ok(tape.scalar(l))
    };
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: Vec::new(),
    };
    let mut work = store.clone();
    for (id, g) in store.ids().zip(&grads) {
        if store.get(id).max_abs() > 1e3 {
            report.skipped.push(store.name(id).to_string());
            continue;
        }
        for k in 0..g.data().len() {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + h;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - h;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let ad = g.data()[k];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((store.name(id).to_string(), k));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
