//! Synthetic datasets.

use crate::attention::GraphMask;
use crate::error::{invalid, Result};
use crate::numerics::{Matrix, Rng};

use super::config::{GraphTaskConfig, RegressionTaskConfig, SeqTaskConfig};

/// A token sequence with a binary label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub tokens: Vec<usize>,
    pub label: usize,
}

/// Label 1 iff the marker token occurs. Positive sequences hold exactly one
/// marker at a uniform position; classes are balanced exactly (up to one
/// example for odd sizes).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSeqTask {
    pub config: SeqTaskConfig,
    pub train: Vec<Sequence>,
    pub test: Vec<Sequence>,
}

impl SyntheticSeqTask {
    pub fn generate(config: &SeqTaskConfig, rng: &Rng) -> Result<Self> {
        if config.marker >= config.vocab || config.vocab < 2 {
            return Err(invalid("marker must be a token other than the only one"));
        }
        if config.min_len == 0 || config.min_len > config.max_len {
            return Err(invalid("need 0 < min_len <= max_len"));
        }
        let split = |n: usize, rng: &mut Rng| {
            let mut out: Vec<Sequence> =
                (0..n).map(|i| Self::sequence(config, i % 2, rng)).collect();
            rng.shuffle(&mut out);
            out
        };
        Ok(Self {
            config: config.clone(),
            train: split(config.train, &mut rng.named("seq.train")),
            test: split(config.test, &mut rng.named("seq.test")),
        })
    }

    fn sequence(c: &SeqTaskConfig, label: usize, rng: &mut Rng) -> Sequence {
        let len = c.min_len + rng.index(c.max_len - c.min_len + 1);
        let mut tokens: Vec<usize> = (0..len)
            .map(|_| {
                let t = rng.index(c.vocab - 1);
                if t >= c.marker {
                    t + 1
                } else {
                    t
                }
            })
            .collect();
        if label == 1 {
            let at = rng.index(len);
            tokens[at] = c.marker;
        }
        Sequence { tokens, label }
    }

    pub fn marker_position(&self, s: &Sequence) -> Option<usize> {
        s.tokens.iter().position(|&t| t == self.config.marker)
    }
}

/// Two-community stochastic block model with Gaussian node features.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticGraphTask {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub mask: GraphMask,
    pub edges: Vec<(usize, usize)>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl SyntheticGraphTask {
    /// Resamples the edges until the graph is connected (at most 1000 tries).
    pub fn generate(config: &GraphTaskConfig, rng: &Rng) -> Result<Self> {
        let n = config.nodes;
        let labels: Vec<usize> = (0..n).map(|i| usize::from(i >= n / 2)).collect();
        let edges = (0..1000)
            .map(|attempt| {
                let mut r = rng.named("graph.edges").substream(attempt);
                let mut edges = Vec::new();
                for i in 0..n {
                    for j in i + 1..n {
                        let p = if labels[i] == labels[j] {
                            config.p_in
                        } else {
                            config.p_out
                        };
                        if r.bernoulli(p) {
                            edges.push((i, j));
                        }
                    }
                }
                edges
            })
            .find(|e| connected(n, e))
            .ok_or_else(|| invalid("no connected graph in 1000 draws"))?;
        let mut fr = rng.named("graph.features");
        let features = Matrix::from_fn(n, config.features, |i, _| {
            let mean = if labels[i] == 0 {
                config.separation
            } else {
                -config.separation
            };
            mean + config.noise * fr.normal()
        });
        let mut order: Vec<usize> = (0..n).collect();
        rng.named("graph.split").shuffle(&mut order);
        let n_train = ((n as f64) * config.train_fraction).round() as usize;
        let n_train = n_train.clamp(1, n - 1);
        let mut train = order[..n_train].to_vec();
        let mut test = order[n_train..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok(Self {
            features,
            labels,
            mask: GraphMask::from_edges(n, &edges)?,
            edges,
            train,
            test,
        })
    }
}

fn connected(n: usize, edges: &[(usize, usize)]) -> bool {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// `y = sin(2x) / (2x) + noise` on `[-3, 3]`. Train and test points alternate
/// along one grid, so the sets are disjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyRegressionTask {
    pub x_train: Vec<f64>,
    pub y_train: Vec<f64>,
    pub x_test: Vec<f64>,
    pub y_test: Vec<f64>,
}

pub fn sinc_target(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (2.0 * x).sin() / (2.0 * x)
    }
}

impl ToyRegressionTask {
    pub fn generate(config: &RegressionTaskConfig, rng: &Rng) -> Result<Self> {
        let n = config.train + config.test;
        if config.train == 0 || config.test == 0 {
            return Err(invalid("regression needs train and test points"));
        }
        let grid: Vec<f64> = (0..n)
            .map(|i| -3.0 + 6.0 * i as f64 / (n - 1) as f64)
            .collect();
        // spread test points evenly through the grid
        let mut is_test = vec![false; n];
        for k in 0..config.test {
            is_test[((2 * k + 1) * n) / (2 * config.test)] = true;
        }
        let mut noise = rng.named("regression.noise");
        let mut task = Self {
            x_train: Vec::new(),
            y_train: Vec::new(),
            x_test: Vec::new(),
            y_test: Vec::new(),
        };
        for (i, &x) in grid.iter().enumerate() {
            let y = sinc_target(x) + config.noise * noise.normal();
            if is_test[i] {
                task.x_test.push(x);
                task.y_test.push(y);
            } else {
                task.x_train.push(x);
                task.y_train.push(y);
            }
        }
        Ok(task)
    }
}
