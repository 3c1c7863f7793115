//! Adaptive graph learning.
//!
//! Node time series are embedded once per disjoint node partition; cross
//! products between partitions form candidate adjacencies, one per
//! partition. Every node pair then has one candidate score per partition,
//! which are mixed with a Gumbel-softmax relaxation. The top `k_edges`
//! mixed scores of each row form the learned directed graph.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{normal, Bound, ParamId, ParamSet};

/// Bounds applied to the trainable saturation and regularization scalars.
pub const SCALAR_CLAMP: (f64, f64) = (0.01, 2.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AglConfig {
    /// Number of graph nodes.
    pub nodes: usize,
    /// Maximum input length per node (rows of each embedding map).
    pub input_len: usize,
    pub embed_dim: usize,
    pub partitions: usize,
    pub k_edges: usize,
    pub omega: f64,
    pub lambda: f64,
    pub tau: f64,
}

impl AglConfig {
    pub fn validate(&self) -> Result<()> {
        if self.partitions < 2 {
            return Err(Error::Param(format!(
                "adaptive graph learning needs at least 2 partitions, got {}",
                self.partitions
            )));
        }
        if self.partitions > self.nodes {
            return Err(Error::Param(format!(
                "{} partitions cannot be filled by {} nodes",
                self.partitions, self.nodes
            )));
        }
        if self.k_edges == 0 || self.k_edges > self.nodes {
            return Err(Error::Param(format!(
                "k_edges must lie in 1..={}, got {}",
                self.nodes, self.k_edges
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Param(format!("temperature must be positive, got {}", self.tau)));
        }
        if self.embed_dim == 0 || self.input_len == 0 {
            return Err(Error::Param("embedding width and input length must be positive".into()));
        }
        Ok(())
    }
}

/// Gumbel perturbation of the candidate scores, `[nodes, nodes, partitions]`.
#[derive(Clone, Debug, PartialEq)]
pub enum GumbelNoise {
    /// Noise-free relaxation, used at inference.
    Off,
    Fixed(Tensor),
}

impl GumbelNoise {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, nodes: usize, partitions: usize) -> Self {
        let g = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
        let data = (0..nodes * nodes * partitions).map(|_| g.sample(rng)).collect();
        GumbelNoise::Fixed(Tensor::new(vec![nodes, nodes, partitions], data).expect("shape"))
    }
}

#[derive(Clone, Debug)]
pub struct AglLayer {
    cfg: AglConfig,
    thetas: Vec<ParamId>,
    phi_weight: ParamId,
    phi_bias: ParamId,
    omega: ParamId,
    lambda: ParamId,
    /// Partition index of every node.
    partition_of: Vec<usize>,
}

/// Recorded outputs of one graph-learning pass.
pub struct GraphVars<'t> {
    /// `[nodes, nodes, partitions]` relaxed mixing weights.
    pub weights: Var<'t>,
    /// Mixed continuous edge scores.
    pub scores: Var<'t>,
    /// Binary top-k selection.
    pub mask: Var<'t>,
    /// `scores ⊙ mask`.
    pub adjacency: Var<'t>,
}

impl AglLayer {
    pub fn new<R: Rng + ?Sized>(cfg: AglConfig, params: &mut ParamSet, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut order: Vec<usize> = (0..cfg.nodes).collect();
        order.shuffle(rng);
        let mut partition_of = vec![0; cfg.nodes];
        for (slot, node) in order.into_iter().enumerate() {
            partition_of[node] = slot % cfg.partitions;
        }
        Self::with_partition(cfg, params, rng, partition_of)
    }

    /// Construction with an explicit node-to-partition assignment.
    pub fn with_partition<R: Rng + ?Sized>(
        cfg: AglConfig,
        params: &mut ParamSet,
        rng: &mut R,
        partition_of: Vec<usize>,
    ) -> Result<Self> {
        cfg.validate()?;
        if partition_of.len() != cfg.nodes || partition_of.iter().any(|&p| p >= cfg.partitions) {
            return Err(Error::Param("partition assignment does not match the configuration".into()));
        }
        let std = 1.0 / (cfg.input_len as f64).sqrt();
        // All partitions start from one draw so that the cross products
        // X_i X_jᵀ begin as a positive semi-definite similarity.
        let theta0 = normal(rng, &[cfg.input_len, cfg.embed_dim], std);
        let thetas = (0..cfg.partitions)
            .map(|i| params.add(format!("agl.theta{i}"), theta0.clone()))
            .collect();
        let phi_weight = params.add("agl.phi.weight", Tensor::eye(cfg.nodes));
        let phi_bias = params.add("agl.phi.bias", Tensor::zeros(&[cfg.nodes]));
        let omega = params.add("agl.omega", Tensor::scalar(cfg.omega));
        let lambda = params.add("agl.lambda", Tensor::scalar(cfg.lambda));
        Ok(AglLayer {
            cfg,
            thetas,
            phi_weight,
            phi_bias,
            omega,
            lambda,
            partition_of,
        })
    }

    pub fn config(&self) -> &AglConfig {
        &self.cfg
    }

    pub fn partition_of(&self) -> &[usize] {
        &self.partition_of
    }

    /// Trainable scalars that must stay inside [`SCALAR_CLAMP`].
    pub fn clamped_params(&self) -> [ParamId; 2] {
        [self.omega, self.lambda]
    }

    pub fn theta(&self, i: usize) -> ParamId {
        self.thetas[i]
    }

    pub fn phi(&self) -> (ParamId, ParamId) {
        (self.phi_weight, self.phi_bias)
    }

    /// `X_i = tanh(ω · N · θ_i)` with rows of nodes outside partition `i`
    /// zeroed. `n` is `[nodes, T]` with `T <= input_len`; missing trailing
    /// columns behave as zero padding.
    pub fn sparse_features<'t>(&self, b: &Bound<'t>, n: &Var<'t>, i: usize) -> Result<Var<'t>> {
        if i >= self.cfg.partitions {
            return Err(Error::Param(format!("partition {i} out of range")));
        }
        let shape = n.shape();
        if shape.len() != 2 || shape[0] != self.cfg.nodes || shape[1] > self.cfg.input_len {
            return Err(Error::shape("agl input", &shape, &[self.cfg.nodes, self.cfg.input_len]));
        }
        let theta = b[self.thetas[i]];
        let theta = if shape[1] == self.cfg.input_len {
            theta
        } else {
            theta.slice(0, 0, shape[1])?
        };
        let x = n.matmul(&theta)?.mul(&b[self.omega])?.tanh();
        let d = self.cfg.embed_dim;
        let mut keep = vec![0.0; self.cfg.nodes * d];
        for (node, &part) in self.partition_of.iter().enumerate() {
            if part == i {
                keep[node * d..(node + 1) * d].iter_mut().for_each(|v| *v = 1.0);
            }
        }
        let keep = n.tape().constant(Tensor::new(vec![self.cfg.nodes, d], keep)?);
        x.mul(&keep)
    }

    /// `M_i = ReLU(φ(tanh(Σ_{j≠i} X_i X_jᵀ − λ Σ_j X_j X_jᵀ)))`.
    pub fn candidate_adjacency<'t>(&self, b: &Bound<'t>, xs: &[Var<'t>], i: usize) -> Result<Var<'t>> {
        if xs.len() < 2 {
            return Err(Error::Param("candidate adjacency needs at least 2 partitions".into()));
        }
        let mut others: Option<Var<'t>> = None;
        for (j, x) in xs.iter().enumerate() {
            if j != i {
                others = Some(match others {
                    None => *x,
                    Some(acc) => acc.add(x)?,
                });
            }
        }
        let cross = xs[i].matmul(&others.expect("at least one other partition").t()?)?;
        let gram = gram_sum(xs)?;
        let a = cross.sub(&gram.mul(&b[self.lambda])?)?.tanh();
        Ok(a.matmul(&b[self.phi_weight])?.add_row_bias(&b[self.phi_bias])?.relu())
    }

    /// Relaxed mixing of the per-partition candidates followed by top-k
    /// selection per row.
    pub fn select_edges<'t>(&self, candidates: &[Var<'t>], noise: &GumbelNoise) -> Result<GraphVars<'t>> {
        let tape = candidates
            .first()
            .ok_or_else(|| Error::Param("no candidate adjacencies".into()))?
            .tape();
        let stacked = tape.stack(candidates)?;
        let perturbed = match noise {
            GumbelNoise::Off => stacked,
            GumbelNoise::Fixed(q) => {
                if q.shape() != stacked.shape().as_slice() {
                    return Err(Error::shape("gumbel noise", q.shape(), &stacked.shape()));
                }
                stacked.add(&tape.constant(q.clone()))?
            }
        };
        let weights = perturbed.scale(1.0 / self.cfg.tau).softmax(2)?;
        let scores = weights.mul(&stacked)?.sum(Some(2))?;
        let mask = scores.topk_mask(self.cfg.k_edges)?;
        // The product with the detached mask hands every selected score its
        // upstream gradient unchanged and nothing to the rest.
        let adjacency = scores.mul(&mask.detach())?;
        Ok(GraphVars {
            weights,
            scores,
            mask,
            adjacency,
        })
    }

    pub fn forward<'t>(&self, b: &Bound<'t>, n: &Var<'t>, noise: &GumbelNoise) -> Result<GraphVars<'t>> {
        let xs = (0..self.cfg.partitions)
            .map(|i| self.sparse_features(b, n, i))
            .collect::<Result<Vec<_>>>()?;
        let candidates = (0..self.cfg.partitions)
            .map(|i| self.candidate_adjacency(b, &xs, i))
            .collect::<Result<Vec<_>>>()?;
        self.select_edges(&candidates, noise)
    }

    /// Pre-tanh regularized sum `Σ_{j≠i} X_i X_jᵀ − λ Σ_j X_j X_jᵀ`, summed
    /// over `i`, evaluated without recording. Used to inspect self-loop
    /// suppression.
    pub fn pre_activation_sum(&self, params: &ParamSet, n: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let b = params.bind_frozen(&tape);
        let nv = tape.constant(n.clone());
        let xs = (0..self.cfg.partitions)
            .map(|i| self.sparse_features(&b, &nv, i))
            .collect::<Result<Vec<_>>>()?;
        let gram = gram_sum(&xs)?.mul(&b[self.lambda])?;
        let mut total: Option<Var<'_>> = None;
        for i in 0..xs.len() {
            let others = xs
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .try_fold(None::<Var<'_>>, |acc, (_, x)| -> Result<_> {
                    Ok(Some(match acc {
                        None => *x,
                        Some(a) => a.add(x)?,
                    }))
                })?
                .expect("two or more partitions");
            let term = xs[i].matmul(&others.t()?)?.sub(&gram)?;
            total = Some(match total {
                None => term,
                Some(t) => t.add(&term)?,
            });
        }
        Ok(total.expect("two or more partitions").value())
    }
}

fn gram_sum<'t>(xs: &[Var<'t>]) -> Result<Var<'t>> {
    let mut gram: Option<Var<'t>> = None;
    for x in xs {
        let g = x.matmul(&x.t()?)?;
        gram = Some(match gram {
            None => g,
            Some(acc) => acc.add(&g)?,
        });
    }
    gram.ok_or_else(|| Error::Param("no partitions".into()))
}

/// Plain-data snapshot of a learned graph.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedGraph {
    pub k_edges: usize,
    pub scores: Tensor,
    pub mask: Tensor,
    pub adjacency: Tensor,
}

impl LearnedGraph {
    pub fn from_vars(vars: &GraphVars<'_>, k_edges: usize) -> Self {
        LearnedGraph {
            k_edges,
            scores: vars.scores.value(),
            mask: vars.mask.value(),
            adjacency: vars.adjacency.value(),
        }
    }

    pub fn nodes(&self) -> usize {
        self.mask.shape()[0]
    }

    /// Selected directed edges `(src, dst, score)` in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let p = self.nodes();
        let mut out = Vec::new();
        for i in 0..p {
            for j in 0..p {
                if self.mask.at(i, j) != 0.0 {
                    out.push((i, j, self.scores.at(i, j)));
                }
            }
        }
        out
    }

    pub fn stats(&self) -> GraphStats {
        undirected_stats(&self.mask)
    }

    pub fn to_document(&self) -> GraphDocument {
        let stats = self.stats();
        GraphDocument {
            p: self.nodes(),
            k_edges: self.k_edges,
            edges: self.edges(),
            avg_node_degree: stats.avg_node_degree,
            total_edges: stats.total_edges,
        }
    }
}

/// JSON form of a learned graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub p: usize,
    pub k_edges: usize,
    pub edges: Vec<(usize, usize, f64)>,
    pub avg_node_degree: f64,
    pub total_edges: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GraphStats {
    pub avg_node_degree: f64,
    pub total_edges: usize,
}

/// Degree statistics of the undirected graph `mask ∪ maskᵀ`, self-loops
/// excluded.
pub fn undirected_stats(mask: &Tensor) -> GraphStats {
    let p = mask.shape()[0];
    let mut edges = 0;
    for i in 0..p {
        for j in i + 1..p {
            if mask.at(i, j) != 0.0 || mask.at(j, i) != 0.0 {
                edges += 1;
            }
        }
    }
    GraphStats {
        avg_node_degree: if p == 0 { 0.0 } else { 2.0 * edges as f64 / p as f64 },
        total_edges: edges,
    }
}
