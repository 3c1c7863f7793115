//! End-to-end classifier: graph learning, interleaved graph and temporal
//! convolution blocks, masked temporal pooling and a dense head.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agl::{AglConfig, AglLayer, GraphVars, GumbelNoise, LearnedGraph, SCALAR_CLAMP};
use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gconv::{normalize_adjacency, Activation, DnGcn, DnGcnConfig, LayerNorm};
use crate::params::{glorot, Bound, ParamId, ParamSet};
use crate::preprocess::{BandSequence, DEFAULT_MAX_LEN, NUM_BANDS};
use crate::tconv::{branch_channels, doubling_schedule, receptive_field, DiTcn, DiTcnConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
const PROB_CLAMP: f64 = 1e-7;

/// How feature rows map to graph nodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeLayout {
    /// Every electrode-band row is a node with one input channel.
    #[default]
    ElectrodeBand,
    /// Every electrode is a node whose eight band rows are input channels.
    Electrode,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// One logit squashed by the logistic function.
    #[default]
    SingleLogistic,
    /// Two logits normalized by softmax; the second is the TSR class.
    TwoLogitSoftmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DilationSchedule {
    /// `r = 2^block`.
    Doubling,
    Explicit(Vec<usize>),
}

impl Default for DilationSchedule {
    fn default() -> Self {
        DilationSchedule::Doubling
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature rows per session.
    pub p: usize,
    pub max_len: usize,
    pub node_layout: NodeLayout,
    pub embed_dim: usize,
    pub partitions: usize,
    pub k_edges: usize,
    pub omega: f64,
    pub lambda: f64,
    pub tau: f64,
    /// Depth coefficients; their count is the aggregation depth.
    pub betas: Vec<f64>,
    /// Optional per-depth node gates.
    pub selectors: Vec<Vec<bool>>,
    pub gcn_activation: Activation,
    /// Widest temporal filter.
    pub max_width: usize,
    pub dilation_schedule: DilationSchedule,
    pub num_blocks: usize,
    pub gcn_channels: usize,
    pub tcn_channels: usize,
    pub head_widths: Vec<usize>,
    pub head_mode: HeadMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            p: 16,
            max_len: DEFAULT_MAX_LEN,
            node_layout: NodeLayout::ElectrodeBand,
            embed_dim: 40,
            partitions: 2,
            k_edges: 4,
            omega: 0.5,
            lambda: 0.5,
            tau: 0.5,
            betas: vec![0.5, 0.6],
            selectors: Vec::new(),
            gcn_activation: Activation::Relu,
            max_width: 7,
            dilation_schedule: DilationSchedule::Doubling,
            num_blocks: 2,
            gcn_channels: 16,
            tcn_channels: 16,
            head_widths: vec![32, 16],
            head_mode: HeadMode::SingleLogistic,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Graph node count under the configured layout.
    pub fn nodes(&self) -> usize {
        match self.node_layout {
            NodeLayout::ElectrodeBand => self.p,
            NodeLayout::Electrode => self.p / NUM_BANDS,
        }
    }

    pub fn input_channels(&self) -> usize {
        match self.node_layout {
            NodeLayout::ElectrodeBand => 1,
            NodeLayout::Electrode => NUM_BANDS,
        }
    }

    pub fn dilations(&self) -> Vec<usize> {
        match &self.dilation_schedule {
            DilationSchedule::Doubling => doubling_schedule(self.num_blocks),
            DilationSchedule::Explicit(r) => r.clone(),
        }
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(self.max_width, &self.dilations())
    }

    fn agl(&self) -> AglConfig {
        AglConfig {
            nodes: self.nodes(),
            input_len: self.max_len * self.input_channels(),
            embed_dim: self.embed_dim,
            partitions: self.partitions,
            k_edges: self.k_edges,
            omega: self.omega,
            lambda: self.lambda,
            tau: self.tau,
        }
    }

    fn gcn(&self, block: usize) -> DnGcnConfig {
        DnGcnConfig {
            in_channels: if block == 0 { self.input_channels() } else { self.tcn_channels },
            out_channels: self.gcn_channels,
            betas: self.betas.clone(),
            selectors: self.selectors.clone(),
            activation: self.gcn_activation,
        }
    }

    fn tcn(&self, block: usize) -> DiTcnConfig {
        DiTcnConfig {
            in_channels: self.gcn_channels,
            out_channels: self.tcn_channels,
            max_width: self.max_width,
            dilation: self.dilations()[block],
        }
    }

    fn head_outputs(&self) -> usize {
        match self.head_mode {
            HeadMode::SingleLogistic => 1,
            HeadMode::TwoLogitSoftmax => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::Param("p must be positive".into()));
        }
        if self.node_layout == NodeLayout::Electrode && self.p % NUM_BANDS != 0 {
            return Err(Error::Param(format!(
                "electrode layout needs p divisible by {NUM_BANDS}, got {}",
                self.p
            )));
        }
        if self.num_blocks == 0 {
            return Err(Error::Param("at least one block is required".into()));
        }
        if let DilationSchedule::Explicit(r) = &self.dilation_schedule {
            if r.len() != self.num_blocks {
                return Err(Error::Param(format!(
                    "dilation schedule lists {} factors for {} blocks",
                    r.len(),
                    self.num_blocks
                )));
            }
        }
        if self.head_widths.contains(&0) {
            return Err(Error::Param("head widths must be positive".into()));
        }
        self.agl().validate()?;
        for block in 0..self.num_blocks {
            self.gcn(block).validate(self.nodes())?;
            self.tcn(block).validate()?;
        }
        if self.gcn_channels < 2 {
            return Err(Error::Param("layer norm needs at least 2 graph channels".into()));
        }
        if self.receptive_field() > self.max_len {
            return Err(Error::Param(format!(
                "receptive field {} exceeds max_len {}",
                self.receptive_field(),
                self.max_len
            )));
        }
        Ok(())
    }

    /// Non-fatal oddities worth surfacing to the user.
    pub fn warnings(&self) -> Vec<String> {
        self.gcn(0).warnings()
    }

    /// Trainable scalar count derived from the configuration alone.
    pub fn parameter_count(&self) -> usize {
        let nodes = self.nodes();
        let agl = self.partitions * self.max_len * self.input_channels() * self.embed_dim + nodes * nodes + nodes + 2;
        let blocks: usize = (0..self.num_blocks)
            .map(|b| {
                let gcn = self.gcn(b);
                let weights = gcn.in_channels * gcn.out_channels + (gcn.depth() - 1) * gcn.out_channels * gcn.out_channels;
                let norm = 2 * self.gcn_channels;
                let filters: usize = branch_channels(self.max_width, self.tcn_channels)
                    .iter()
                    .enumerate()
                    .map(|(i, c_b)| c_b * self.gcn_channels * (i + 2))
                    .sum();
                weights + norm + filters
            })
            .sum();
        let mut fan_in = nodes * self.tcn_channels;
        let mut head = 0;
        for &w in self.head_widths.iter().chain(std::iter::once(&self.head_outputs())) {
            head += fan_in * w + w;
            fan_in = w;
        }
        agl + blocks + head
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub prob_tsr: f64,
    pub label: u8,
}

impl Prediction {
    pub fn from_prob(prob_tsr: f64) -> Self {
        Prediction {
            prob_tsr,
            label: u8::from(prob_tsr >= 0.5),
        }
    }
}

/// Stochastic inputs of one training forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub noise: GumbelNoise,
    /// Inverted-dropout multipliers for each hidden head layer; empty for
    /// none.
    pub dropout: Vec<Tensor>,
}

impl Perturbation {
    pub fn none() -> Self {
        Perturbation {
            noise: GumbelNoise::Off,
            dropout: Vec::new(),
        }
    }
}

pub struct Forward<'t> {
    /// Scalar TSR probability.
    pub prob: Var<'t>,
    pub graph: GraphVars<'t>,
}

#[derive(Clone, Debug)]
struct Block {
    gcn: DnGcn,
    norm: LayerNorm,
    tcn: DiTcn,
}

#[derive(Clone, Debug)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamSet,
    agl: AglLayer,
    blocks: Vec<Block>,
    head: Vec<Dense>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config: ModelConfig,
    partition: Vec<usize>,
    params: ParamSet,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let agl = AglLayer::new(cfg.agl(), &mut params, &mut rng)?;
        Self::assemble(cfg, params, agl, &mut rng)
    }

    fn assemble(cfg: ModelConfig, mut params: ParamSet, agl: AglLayer, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for b in 0..cfg.num_blocks {
            let gcn = DnGcn::new(cfg.gcn(b), cfg.nodes(), &format!("block{b}.gcn"), &mut params, rng)?;
            let norm = LayerNorm::new(cfg.gcn_channels, &format!("block{b}.norm"), &mut params)?;
            let tcn = DiTcn::new(cfg.tcn(b), &format!("block{b}.tcn"), &mut params, rng)?;
            blocks.push(Block { gcn, norm, tcn });
        }
        let mut head = Vec::new();
        let mut fan_in = cfg.nodes() * cfg.tcn_channels;
        let widths: Vec<usize> = cfg.head_widths.iter().copied().chain([cfg.head_outputs()]).collect();
        for (i, w) in widths.into_iter().enumerate() {
            head.push(Dense {
                weight: params.add(format!("head{i}.weight"), glorot(rng, fan_in, w)),
                bias: params.add(format!("head{i}.bias"), Tensor::zeros(&[w])),
            });
            fan_in = w;
        }
        Ok(Model {
            cfg,
            params,
            agl,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn agl(&self) -> &AglLayer {
        &self.agl
    }

    pub fn receptive_field(&self) -> usize {
        self.cfg.receptive_field()
    }

    /// Pulls the graph-learning scalars back into their admissible range.
    pub fn clamp_scalars(&mut self) {
        for id in self.agl.clamped_params() {
            for v in self.params.get_mut(id).data_mut() {
                *v = v.clamp(SCALAR_CLAMP.0, SCALAR_CLAMP.1);
            }
        }
    }

    /// Gumbel noise and head dropout multipliers drawn from `rng`.
    pub fn sample_perturbation<R: Rng + ?Sized>(&self, rng: &mut R, dropout: f64) -> Perturbation {
        let noise = GumbelNoise::sample(rng, self.cfg.nodes(), self.cfg.partitions);
        let dropout = if dropout > 0.0 {
            self.cfg
                .head_widths
                .iter()
                .map(|&w| {
                    let keep = 1.0 / (1.0 - dropout);
                    let data = (0..w)
                        .map(|_| if rng.random::<f64>() < dropout { 0.0 } else { keep })
                        .collect();
                    Tensor::new(vec![1, w], data).expect("shape")
                })
                .collect()
        } else {
            Vec::new()
        };
        Perturbation { noise, dropout }
    }

    /// Node-major `[nodes, T, C]` states and the `[nodes, T·C]` graph input.
    fn node_inputs(&self, seq: &BandSequence) -> Result<(Tensor, Tensor)> {
        let (p, t) = (seq.nodes(), seq.len());
        if p != self.cfg.p {
            return Err(Error::shape("model input", &[p, t], &[self.cfg.p, self.cfg.max_len]));
        }
        if t > self.cfg.max_len {
            return Err(Error::Overflow {
                len: t,
                max: self.cfg.max_len,
            });
        }
        let nodes = self.cfg.nodes();
        let c = self.cfg.input_channels();
        let src = seq.features.data();
        let mut data = vec![0.0; p * t];
        for node in 0..nodes {
            for step in 0..t {
                for ch in 0..c {
                    data[(node * t + step) * c + ch] = src[(node * c + ch) * t + step];
                }
            }
        }
        let graph_input = Tensor::new(vec![nodes, t * c], data.clone())?;
        Ok((Tensor::new(vec![nodes, t, c], data)?, graph_input))
    }

    /// Records one forward pass on `tape` using parameters bound in `b`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        b: &Bound<'t>,
        seq: &BandSequence,
        perturbation: &Perturbation,
    ) -> Result<Forward<'t>> {
        let valid = seq.valid_len()?;
        let rf = self.receptive_field();
        if valid < rf {
            return Err(Error::Length { len: valid, required: rf });
        }
        let (state, graph_input) = self.node_inputs(seq)?;
        let graph = self.agl.forward(b, &tape.constant(graph_input), &perturbation.noise)?;
        let a_hat = normalize_adjacency(&graph.adjacency)?;

        let mut h = tape.constant(state);
        for block in &self.blocks {
            h = block.gcn.forward(b, &h, &a_hat)?;
            h = block.norm.forward(b, &h)?;
            h = block.tcn.forward(b, &h)?;
        }
        // Output step t' summarizes inputs t'..t'+rf-1, so only the first
        // valid − (rf − 1) steps are free of padding.
        let pooled = h.slice(1, 0, valid - (rf - 1))?.mean(Some(1))?;
        let features = pooled.reshape(&[1, self.head_input_width()])?;
        let prob = self.head(b, &features, &perturbation.dropout)?;
        Ok(Forward { prob, graph })
    }

    /// Width of the flattened pooled features fed to the head.
    pub fn head_input_width(&self) -> usize {
        self.cfg.nodes() * self.cfg.tcn_channels
    }

    /// Dense head from `[1, head_input_width]` features to the scalar TSR
    /// probability; `dropout[i]` multiplies the output of hidden layer `i`.
    pub fn head<'t>(&self, b: &Bound<'t>, features: &Var<'t>, dropout: &[Tensor]) -> Result<Var<'t>> {
        let mut x = *features;
        let last = self.head.len() - 1;
        for (i, dense) in self.head.iter().enumerate() {
            x = x.matmul(&b[dense.weight])?.add_row_bias(&b[dense.bias])?;
            if i < last {
                x = x.relu();
                if let Some(mask) = dropout.get(i) {
                    x = x.mul(&features.tape().constant(mask.clone()))?;
                }
            }
        }
        match self.cfg.head_mode {
            HeadMode::SingleLogistic => x.sigmoid().reshape(&[]),
            HeadMode::TwoLogitSoftmax => x.softmax(1)?.slice(1, 1, 1)?.reshape(&[]),
        }
    }

    /// Deterministic inference with Gumbel noise and dropout disabled.
    pub fn predict(&self, seq: &BandSequence) -> Result<(Prediction, LearnedGraph)> {
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        let out = self.forward(&tape, &b, seq, &Perturbation::none())?;
        let prob = out.prob.item();
        if !prob.is_finite() {
            return Err(Error::NonFinite("predicted probability".into()));
        }
        Ok((Prediction::from_prob(prob), LearnedGraph::from_vars(&out.graph, self.cfg.k_edges)))
    }

    pub fn to_json(&self) -> Result<String> {
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            partition: self.agl.partition_of().to_vec(),
            params: self.params.clone(),
        };
        Ok(serde_json::to_string(&ckpt)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                location: "checkpoint version".into(),
                message: format!("unsupported version {}", ckpt.version),
            });
        }
        ckpt.config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(ckpt.config.seed);
        let mut params = ParamSet::new();
        let agl = AglLayer::with_partition(ckpt.config.agl(), &mut params, &mut rng, ckpt.partition)?;
        let mut model = Self::assemble(ckpt.config, params, agl, &mut rng)?;
        if model.params.len() != ckpt.params.len() {
            return Err(Error::Parse {
                location: "checkpoint params".into(),
                message: format!("expected {} tensors, found {}", model.params.len(), ckpt.params.len()),
            });
        }
        for (i, (name, tensor)) in ckpt.params.iter().enumerate() {
            let id = ParamId(i);
            if model.params.name(id) != name || model.params.get(id).shape() != tensor.shape() {
                return Err(Error::Parse {
                    location: format!("checkpoint param {name}"),
                    message: format!("shape {:?} does not match the configuration", tensor.shape()),
                });
            }
            *model.params.get_mut(id) = tensor.clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Mean binary cross-entropy of TSR probabilities against 0/1 labels, with
/// probabilities clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_loss<'t>(probs: &[Var<'t>], labels: &[u8]) -> Result<Var<'t>> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::shape("bce_loss", &[probs.len()], &[labels.len()]));
    }
    let mut total: Option<Var<'t>> = None;
    for (p, &y) in probs.iter().zip(labels) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let term = match y {
            1 => p.ln(),
            0 => p.affine(-1.0, 1.0).ln(),
            other => return Err(Error::Param(format!("label must be 0 or 1, got {other}"))),
        };
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    Ok(total.expect("non-empty").scale(-1.0 / probs.len() as f64))
}
