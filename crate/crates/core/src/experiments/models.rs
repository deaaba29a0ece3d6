//! Models for the synthetic tasks.

use std::fmt;
use std::str::FromStr;

use crate::attention::{
    AttentionConfig, AttentionLayer, AttentionOutput, LayerForward, Mode, Spectra,
};
use crate::autodiff::{Bound, ParamId, ParamStore, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::numerics::{Matrix, Rng};
use crate::train::{latent_log_terms, ElboVars, Metrics, Model, Objective};

use super::tasks::{Sequence, SyntheticGraphTask, SyntheticSeqTask, ToyRegressionTask};

/// Which synthetic task to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Seq,
    Graph,
    Regression,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Seq => "seq",
            TaskKind::Graph => "graph",
            TaskKind::Regression => "regression",
        }
    }

    /// Accuracy tasks report a fraction, regression an RMSE.
    pub fn metric_name(self) -> &'static str {
        match self {
            TaskKind::Regression => "rmse",
            _ => "accuracy",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq" => Ok(TaskKind::Seq),
            "graph" => Ok(TaskKind::Graph),
            "regression" => Ok(TaskKind::Regression),
            _ => Err(invalid(format!("unknown task {s:?}"))),
        }
    }
}

fn init(
    store: &mut ParamStore,
    rng: &Rng,
    name: &str,
    rows: usize,
    cols: usize,
    std: f64,
) -> ParamId {
    store.add(name, Matrix::randn(rows, cols, std, &mut rng.named(name)))
}

/// Objective from a summed log-likelihood and the per-example forwards.
fn objective(
    tape: &mut Tape,
    log_lik: Var,
    forwards: &[LayerForward],
    n: usize,
    kl_weight: f64,
) -> Objective {
    let mut lp = tape.constant(Matrix::zeros(1, 1));
    let mut lq = tape.constant(Matrix::zeros(1, 1));
    for f in forwards {
        let (p, q) = latent_log_terms(tape, f);
        lp = tape.add(lp, p);
        lq = tape.add(lq, q);
    }
    let scale = 1.0 / n as f64;
    let terms = ElboVars {
        log_lik,
        log_prior: tape.scale(lp, scale),
        log_q: tape.scale(lq, scale),
    };
    Objective::new(tape, terms, kl_weight)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("non-empty row")
}

/// Embedding, one attention layer, mean pooling and a linear classifier.
#[derive(Debug, Clone)]
pub struct SeqModel {
    pub task: SyntheticSeqTask,
    pub layer: AttentionLayer,
    pub store: ParamStore,
    pub embed: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub kl_weight: f64,
}

impl SeqModel {
    pub fn new(
        task: SyntheticSeqTask,
        att: AttentionConfig,
        kl_weight: f64,
        rng: &Rng,
    ) -> Result<Self> {
        if att.mode != Mode::Sequence {
            return Err(invalid("sequence model needs a sequence-mode layer"));
        }
        let d_model = task.config.d_model;
        let mut store = ParamStore::new();
        let embed = init(&mut store, rng, "embed", task.config.vocab, d_model, 1.0);
        let width = att.heads * att.d_k;
        let layer = AttentionLayer::new(&mut store, "att", d_model, att, rng)?;
        let w_out = init(
            &mut store,
            rng,
            "out.w",
            width,
            2,
            (1.0 / width as f64).sqrt(),
        );
        let b_out = store.add("out.b", Matrix::zeros(1, 2));
        Ok(Self {
            task,
            layer,
            store,
            embed,
            w_out,
            b_out,
            kl_weight,
        })
    }

    /// `1 x 2` logits of one sequence.
    pub fn logits(
        &self,
        tape: &mut Tape,
        b: &Bound,
        s: &Sequence,
        rng: &Rng,
    ) -> Result<(Var, LayerForward)> {
        let h = tape.gather_rows(b[self.embed], &s.tokens);
        let fwd = self
            .layer
            .forward(tape, b, h, h, None, Spectra::Sampled(rng))?;
        let ctx = tape.concat_cols(&fwd.context);
        let pooled = tape.col_mean(ctx);
        let z = tape.matmul(pooled, b[self.w_out]);
        Ok((tape.add(z, b[self.b_out]), fwd))
    }

    pub fn attention(&self, s: &Sequence, rng: &Rng) -> Result<AttentionOutput> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape);
        let (_, fwd) = self.logits(&mut tape, &b, s, rng)?;
        AttentionOutput::from_forward(&tape, &fwd, None)
    }

    fn accuracy(&self, seqs: &[Sequence], rng: &Rng) -> Result<f64> {
        let mut correct = 0usize;
        for s in seqs {
            let mut tape = Tape::new();
            let b = self.store.bind(&mut tape);
            let (l, _) = self.logits(&mut tape, &b, s, rng)?;
            let v = tape.value(l);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "sequence logits".into(),
                });
            }
            correct += usize::from(argmax(v.row(0)) == s.label);
        }
        Ok(correct as f64 / seqs.len() as f64)
    }

    /// Share of positive test sequences whose most-attended column, summed
    /// over rows and averaged over heads, is the marker.
    pub fn marker_attention_fraction(&self, rng: &Rng) -> Result<f64> {
        let mut hits = 0usize;
        let mut total = 0usize;
        for s in &self.task.test {
            let Some(pos) = self.task.marker_position(s) else {
                continue;
            };
            let out = self.attention(s, rng)?;
            let t = s.tokens.len();
            let cols: Vec<f64> = (0..t)
                .map(|j| {
                    out.weights
                        .iter()
                        .map(|w| (0..t).map(|i| w[(i, j)]).sum::<f64>())
                        .sum()
                })
                .collect();
            hits += usize::from(argmax(&cols) == pos);
            total += 1;
        }
        Ok(hits as f64 / total.max(1) as f64)
    }

    /// Test-set attention outputs.
    pub fn test_attention(&self, rng: &Rng) -> Result<Vec<AttentionOutput>> {
        self.task
            .test
            .iter()
            .map(|s| self.attention(s, rng))
            .collect()
    }
}

impl Model for SeqModel {
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn train_len(&self) -> usize {
        self.task.train.len()
    }
    fn objective(
        &self,
        tape: &mut Tape,
        b: &Bound,
        batch: &[usize],
        rng: &Rng,
    ) -> Result<Objective> {
        let mut rows = Vec::with_capacity(batch.len());
        let mut fwds = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for &i in batch {
            let s = &self.task.train[i];
            let (l, f) = self.logits(tape, b, s, rng)?;
            rows.push(l);
            fwds.push(f);
            labels.push(s.label);
        }
        let logits = tape.concat_rows(&rows);
        let ce = tape.cross_entropy(logits, &labels, None);
        let log_lik = tape.neg(ce);
        Ok(objective(tape, log_lik, &fwds, batch.len(), self.kl_weight))
    }
    fn metrics(&self, rng: &Rng) -> Result<Metrics> {
        Ok(Metrics {
            train: self.accuracy(&self.task.train, rng)?,
            test: self.accuracy(&self.task.test, rng)?,
        })
    }
}

/// One GAT-style layer over the whole graph and a linear node classifier.
#[derive(Debug, Clone)]
pub struct GraphModel {
    pub task: SyntheticGraphTask,
    pub layer: AttentionLayer,
    pub store: ParamStore,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub kl_weight: f64,
    /// Squared-parameter penalty on the loss.
    pub weight_decay: f64,
    allowed: Matrix,
}

impl GraphModel {
    pub fn new(
        task: SyntheticGraphTask,
        mut att: AttentionConfig,
        kl_weight: f64,
        rng: &Rng,
    ) -> Result<Self> {
        att.mode = Mode::Graph;
        att.validate()?;
        let d_model = task.features.cols();
        let mut store = ParamStore::new();
        let width = att.heads * att.d_k;
        let layer = AttentionLayer::new(&mut store, "gat", d_model, att, rng)?;
        let w_out = init(
            &mut store,
            rng,
            "out.w",
            width,
            2,
            (1.0 / width as f64).sqrt(),
        );
        let b_out = store.add("out.b", Matrix::zeros(1, 2));
        let allowed = task.mask.allowed();
        Ok(Self {
            task,
            layer,
            store,
            w_out,
            b_out,
            kl_weight,
            weight_decay: 0.0,
            allowed,
        })
    }

    /// `N x 2` logits for every node.
    pub fn logits(&self, tape: &mut Tape, b: &Bound, rng: &Rng) -> Result<(Var, LayerForward)> {
        let h = tape.constant(self.task.features.clone());
        let fwd = self
            .layer
            .forward(tape, b, h, h, Some(&self.allowed), Spectra::Sampled(rng))?;
        let ctx = tape.concat_cols(&fwd.context);
        let z = tape.matmul(ctx, b[self.w_out]);
        Ok((tape.add_row(z, b[self.b_out]), fwd))
    }

    pub fn attention(&self, rng: &Rng) -> Result<AttentionOutput> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape);
        let (_, fwd) = self.logits(&mut tape, &b, rng)?;
        AttentionOutput::from_forward(&tape, &fwd, Some(&self.allowed))
    }
}

impl Model for GraphModel {
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    /// The whole graph is one example.
    fn train_len(&self) -> usize {
        1
    }
    fn objective(
        &self,
        tape: &mut Tape,
        b: &Bound,
        _batch: &[usize],
        rng: &Rng,
    ) -> Result<Objective> {
        let (logits, fwd) = self.logits(tape, b, rng)?;
        let mut w = vec![0.0; self.task.labels.len()];
        for &i in &self.task.train {
            w[i] = 1.0;
        }
        let ce = tape.cross_entropy(logits, &self.task.labels, Some(&w));
        let log_lik = tape.neg(ce);
        let mut obj = objective(tape, log_lik, &[fwd], 1, self.kl_weight);
        if self.weight_decay > 0.0 {
            for id in self.store.ids() {
                let sq = tape.square(b[id]);
                let s = tape.sum(sq);
                let s = tape.scale(s, self.weight_decay);
                obj.loss = tape.add(obj.loss, s);
            }
        }
        Ok(obj)
    }
    fn metrics(&self, rng: &Rng) -> Result<Metrics> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape);
        let (l, _) = self.logits(&mut tape, &b, rng)?;
        let v = tape.value(l);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "node logits".into(),
            });
        }
        let acc = |idx: &[usize]| {
            idx.iter()
                .filter(|&&i| argmax(v.row(i)) == self.task.labels[i])
                .count() as f64
                / idx.len() as f64
        };
        Ok(Metrics {
            train: acc(&self.task.train),
            test: acc(&self.task.test),
        })
    }
}

/// Set attention over the training points: each query's prediction is the
/// head-averaged attention-weighted mean of the training targets plus a bias.
/// Training queries do not attend to themselves.
#[derive(Debug, Clone)]
pub struct RegressionModel {
    pub task: ToyRegressionTask,
    pub layer: AttentionLayer,
    pub store: ParamStore,
    pub w_in: ParamId,
    pub bias: ParamId,
    pub kl_weight: f64,
}

fn inputs(x: &[f64]) -> Matrix {
    Matrix::from_fn(x.len(), 3, |i, j| match j {
        0 => x[i],
        1 => x[i] * x[i] / 3.0,
        _ => 1.0,
    })
}

impl RegressionModel {
    pub fn new(
        task: ToyRegressionTask,
        d_model: usize,
        att: AttentionConfig,
        kl_weight: f64,
        rng: &Rng,
    ) -> Result<Self> {
        if att.mode != Mode::Sequence {
            return Err(invalid("regression model needs a sequence-mode layer"));
        }
        let mut store = ParamStore::new();
        let w_in = init(&mut store, rng, "in.w", 3, d_model, (1.0f64 / 3.0).sqrt());
        let layer = AttentionLayer::new(&mut store, "att", d_model, att, rng)?;
        let bias = store.add("out.b", Matrix::zeros(1, 1));
        Ok(Self {
            task,
            layer,
            store,
            w_in,
            bias,
            kl_weight,
        })
    }

    /// Predictions for `x` (`n x 1`) and the layer forward. `own[i]` is the
    /// training index of query `i`, which it may not attend to.
    fn predict(
        &self,
        tape: &mut Tape,
        b: &Bound,
        x: &[f64],
        own: Option<&[usize]>,
        rng: &Rng,
    ) -> Result<(Var, LayerForward)> {
        let xq = tape.constant(inputs(x));
        let xk = tape.constant(inputs(&self.task.x_train));
        let hq = tape.matmul(xq, b[self.w_in]);
        let hk = tape.matmul(xk, b[self.w_in]);
        let n = self.task.x_train.len();
        let mask =
            own.map(|own| Matrix::from_fn(x.len(), n, |i, j| if own[i] == j { 0.0 } else { 1.0 }));
        let fwd = self
            .layer
            .forward(tape, b, hq, hk, mask.as_ref(), Spectra::Sampled(rng))?;
        let y = tape.constant(Matrix::col_vector(&self.task.y_train));
        let mut acc: Option<Var> = None;
        for &w in &fwd.weights {
            let p = tape.matmul(w, y);
            acc = Some(match acc {
                None => p,
                Some(a) => tape.add(a, p),
            });
        }
        let mean = tape.scale(
            acc.expect("at least one head"),
            1.0 / fwd.weights.len() as f64,
        );
        Ok((tape.add_row(mean, b[self.bias]), fwd))
    }

    /// Predictions at `x` and the attention over the training points.
    pub fn predictions(&self, x: &[f64], rng: &Rng) -> Result<(Vec<f64>, AttentionOutput)> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape);
        let (p, fwd) = self.predict(&mut tape, &b, x, None, rng)?;
        let out = AttentionOutput::from_forward(&tape, &fwd, None)?;
        Ok((tape.value(p).data().to_vec(), out))
    }

    fn rmse(&self, x: &[f64], y: &[f64], own: Option<&[usize]>, rng: &Rng) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape);
        let (p, _) = self.predict(&mut tape, &b, x, own, rng)?;
        let p = tape.value(p);
        let mse = p
            .data()
            .iter()
            .zip(y)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / y.len() as f64;
        if !mse.is_finite() {
            return Err(Error::NonFinite {
                context: "regression predictions".into(),
            });
        }
        Ok(mse.sqrt())
    }
}

impl Model for RegressionModel {
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn train_len(&self) -> usize {
        self.task.x_train.len()
    }
    /// Gaussian log-likelihood with unit variance, up to a constant, over the
    /// batch queries; keys are all training points except the query itself.
    fn objective(
        &self,
        tape: &mut Tape,
        b: &Bound,
        batch: &[usize],
        rng: &Rng,
    ) -> Result<Objective> {
        let x: Vec<f64> = batch.iter().map(|&i| self.task.x_train[i]).collect();
        let y: Vec<f64> = batch.iter().map(|&i| self.task.y_train[i]).collect();
        let (p, fwd) = self.predict(tape, b, &x, Some(batch), rng)?;
        let y = tape.constant(Matrix::col_vector(&y));
        let r = tape.sub(p, y);
        let r = tape.square(r);
        let s = tape.sum(r);
        let log_lik = tape.scale(s, -0.5 / batch.len() as f64);
        Ok(objective(tape, log_lik, &[fwd], 1, self.kl_weight))
    }
    fn metrics(&self, rng: &Rng) -> Result<Metrics> {
        let all: Vec<usize> = (0..self.task.x_train.len()).collect();
        Ok(Metrics {
            train: self.rmse(&self.task.x_train, &self.task.y_train, Some(&all), rng)?,
            test: self.rmse(&self.task.x_test, &self.task.y_test, None, rng)?,
        })
    }
}
