//! Deep-neighborhood graph convolution.
//!
//! Node states are `[nodes, channels]` or `[nodes, time, channels]`; graph
//! propagation mixes nodes independently at every timestep.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{glorot, Bound, ParamId, ParamSet};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }
}

/// `D^{-1/2} (S + I) D^{-1/2}` with `S = max(A, Aᵀ)` and `D` the row sums of
/// `S + I`.
pub fn normalize_adjacency<'t>(a: &Var<'t>) -> Result<Var<'t>> {
    let shape = a.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape("normalize_adjacency", &shape, &[]));
    }
    let p = shape[0];
    let tape = a.tape();
    let sym = a.maximum(&a.t()?)?;
    let with_loops = sym.add(&tape.constant(Tensor::eye(p)))?;
    let inv_sqrt = with_loops.sum(Some(1))?.powf(-0.5).reshape(&[p, 1])?;
    let outer = inv_sqrt.matmul(&inv_sqrt.t()?)?;
    with_loops.mul(&outer)
}

/// `Â · H · W` for `H` of shape `[p, c]` or `[p, T, c]`.
fn propagate<'t>(h: &Var<'t>, a_hat: &Var<'t>, w: &Var<'t>) -> Result<Var<'t>> {
    let shape = h.shape();
    let (p, t, c) = match shape.as_slice() {
        &[p, c] => (p, 1, c),
        &[p, t, c] => (p, t, c),
        _ => return Err(Error::shape("graph propagation", &shape, &a_hat.shape())),
    };
    let w_shape = w.shape();
    if a_hat.shape() != [p, p] || w_shape.len() != 2 || w_shape[0] != c {
        return Err(Error::shape("graph propagation", &shape, &w_shape));
    }
    let c_out = w_shape[1];
    let mixed = a_hat.matmul(&h.reshape(&[p, t * c])?)?;
    let out = mixed.reshape(&[p * t, c])?.matmul(w)?;
    if shape.len() == 2 {
        Ok(out)
    } else {
        out.reshape(&[p, t, c_out])
    }
}

/// `σ(Â · H · W)` with σ = ReLU.
pub fn vanilla_gcn<'t>(h: &Var<'t>, a_hat: &Var<'t>, w: &Var<'t>) -> Result<Var<'t>> {
    Ok(propagate(h, a_hat, w)?.relu())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DnGcnConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Depth-regularization coefficients, one per depth.
    pub betas: Vec<f64>,
    /// Per-depth node gates; an empty list means every node is enabled at
    /// every depth.
    pub selectors: Vec<Vec<bool>>,
    pub activation: Activation,
}

impl DnGcnConfig {
    pub fn depth(&self) -> usize {
        self.betas.len()
    }

    /// Hard errors; a β sum different from one is reported by
    /// [`DnGcnConfig::warnings`] instead.
    pub fn validate(&self, nodes: usize) -> Result<()> {
        if self.betas.is_empty() {
            return Err(Error::Param("aggregation depth must be at least 1".into()));
        }
        if self.betas.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
            return Err(Error::Param(format!("depth coefficients must be non-negative, got {:?}", self.betas)));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Param("graph convolution channels must be positive".into()));
        }
        if !self.selectors.is_empty() {
            if self.selectors.len() != self.depth() {
                return Err(Error::Param(format!(
                    "expected {} selector masks, got {}",
                    self.depth(),
                    self.selectors.len()
                )));
            }
            if let Some(bad) = self.selectors.iter().find(|s| s.len() != nodes) {
                return Err(Error::Param(format!("selector mask has {} entries for {nodes} nodes", bad.len())));
            }
            if !self.selectors[self.depth() - 1].iter().any(|v| *v) {
                return Err(Error::Param("the deepest selector must keep at least one node".into()));
            }
        }
        Ok(())
    }

    pub fn warnings(&self) -> Vec<String> {
        let sum: f64 = self.betas.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            vec![format!("depth coefficients sum to {sum}, not 1")]
        } else {
            Vec::new()
        }
    }
}

#[derive(Clone, Debug)]
pub struct DnGcn {
    cfg: DnGcnConfig,
    weights: Vec<ParamId>,
}

impl DnGcn {
    pub fn new<R: Rng + ?Sized>(
        cfg: DnGcnConfig,
        nodes: usize,
        prefix: &str,
        params: &mut ParamSet,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(nodes)?;
        let weights = (0..cfg.depth())
            .map(|l| {
                let fan_in = if l == 0 { cfg.in_channels } else { cfg.out_channels };
                params.add(format!("{prefix}.w{}", l + 1), glorot(rng, fan_in, cfg.out_channels))
            })
            .collect();
        Ok(DnGcn { cfg, weights })
    }

    pub fn config(&self) -> &DnGcnConfig {
        &self.cfg
    }

    pub fn weight(&self, depth: usize) -> ParamId {
        self.weights[depth]
    }

    /// `σ(Σ_l β_l · S^l · H^{l+1})` where `H^{l+1} = Â · H^l · W^l` and
    /// `H^1` is the input.
    pub fn forward<'t>(&self, b: &Bound<'t>, h: &Var<'t>, a_hat: &Var<'t>) -> Result<Var<'t>> {
        let tape = h.tape();
        let mut state = *h;
        let mut total: Option<Var<'t>> = None;
        for (l, &beta) in self.cfg.betas.iter().enumerate() {
            state = propagate(&state, a_hat, &b[self.weights[l]])?;
            let mut contrib = state.scale(beta);
            if let Some(sel) = self.cfg.selectors.get(l) {
                if sel.iter().any(|v| !*v) {
                    let shape = state.shape();
                    let per_node: usize = shape[1..].iter().product();
                    let gate: Vec<f64> = sel
                        .iter()
                        .flat_map(|&on| std::iter::repeat_n(if on { 1.0 } else { 0.0 }, per_node))
                        .collect();
                    contrib = contrib.mul(&tape.constant(Tensor::new(shape, gate)?))?;
                }
            }
            total = Some(match total {
                None => contrib,
                Some(acc) => acc.add(&contrib)?,
            });
        }
        Ok(self.cfg.activation.apply(total.expect("depth >= 1")))
    }
}

/// Per-row normalization across channels with learnable gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(channels: usize, prefix: &str, params: &mut ParamSet) -> Result<Self> {
        if channels < 2 {
            return Err(Error::Param(format!("layer norm needs at least 2 channels, got {channels}")));
        }
        Ok(LayerNorm {
            gain: params.add(format!("{prefix}.gain"), Tensor::full(&[channels], 1.0)),
            bias: params.add(format!("{prefix}.bias"), Tensor::zeros(&[channels])),
        })
    }

    /// Normalizes the trailing axis of a tensor of any rank ≥ 2.
    pub fn forward<'t>(&self, b: &Bound<'t>, h: &Var<'t>) -> Result<Var<'t>> {
        let shape = h.shape();
        let c = *shape.last().ok_or_else(|| Error::shape("layer_norm", &shape, &[]))?;
        let rows = h.reshape(&[shape.iter().product::<usize>() / c.max(1), c])?;
        rows.layer_norm(&b[self.gain], &b[self.bias], LAYER_NORM_EPS)?.reshape(&shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tape;
    use crate::params::normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn norm(a: &Tensor) -> Tensor {
        let t = Tape::new();
        normalize_adjacency(&t.constant(a.clone())).unwrap().value()
    }

    fn cfg(cin: usize, cout: usize, betas: Vec<f64>) -> DnGcnConfig {
        DnGcnConfig {
            in_channels: cin,
            out_channels: cout,
            betas,
            selectors: Vec::new(),
            activation: Activation::Relu,
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(norm(&Tensor::zeros(&[3, 3])), Tensor::eye(3));
        let two = norm(&m(&[&[0.0, 1.0], &[1.0, 0.0]]));
        for v in two.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
        // path 0-1-2: degrees (with loops) 2, 3, 2
        let path = norm(&m(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 1.0], &[0.0, 1.0, 0.0]]));
        let expect = m(&[
            &[0.5, 1.0 / 6f64.sqrt(), 0.0],
            &[1.0 / 6f64.sqrt(), 1.0 / 3.0, 1.0 / 6f64.sqrt()],
            &[0.0, 1.0 / 6f64.sqrt(), 0.5],
        ]);
        assert!(path.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn directed_input_is_symmetrized_by_max() {
        let directed = norm(&m(&[&[0.0, 0.8], &[0.0, 0.0]]));
        let sym = norm(&m(&[&[0.0, 0.8], &[0.8, 0.0]]));
        assert_eq!(directed, sym);
    }

    #[test]
    fn normalized_is_symmetric_with_bounded_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let r = normal(&mut rng, &[6, 6], 1.0).map(f64::abs);
            let a = norm(&r);
            assert!(a.max_abs_diff(&a.transposed()) < 1e-12);
            // power iteration on Â
            let mut v = Tensor::new(vec![6, 1], vec![1.0, 0.3, -0.2, 0.5, 0.9, -0.7]).unwrap();
            let mut lambda = 0.0;
            for _ in 0..500 {
                let w = a.matmul(&v).unwrap();
                lambda = w.data().iter().map(|x| x * x).sum::<f64>().sqrt();
                v = w.map(|x| x / lambda);
            }
            assert!(lambda <= 1.0 + 1e-9, "{lambda}");
        }
    }

    #[test]
    fn vanilla_examples() {
        let t = Tape::new();
        let h = t.constant(m(&[&[1.0, 2.0], &[0.0, 3.0]]));
        let eye = t.constant(Tensor::eye(2));
        assert_eq!(vanilla_gcn(&h, &eye, &eye).unwrap().value(), h.value());

        let a_hat = t.constant(m(&[&[0.5, 0.5], &[0.5, 0.5]]));
        let h = t.constant(m(&[&[1.0], &[3.0]]));
        let w = t.constant(m(&[&[1.0]]));
        assert_eq!(vanilla_gcn(&h, &a_hat, &w).unwrap().value().data(), &[2.0, 2.0]);

        let zero = t.constant(Tensor::zeros(&[2, 1]));
        assert_eq!(vanilla_gcn(&zero, &a_hat, &w).unwrap().value(), Tensor::zeros(&[2, 1]));
        assert!(vanilla_gcn(&zero, &a_hat, &eye).is_err());
    }

    #[test]
    fn depth_one_reduces_to_vanilla() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let mut ps = ParamSet::new();
            let layer = DnGcn::new(cfg(3, 4, vec![1.0]), 5, "g", &mut ps, &mut rng).unwrap();
            let a = norm(&normal(&mut rng, &[5, 5], 1.0).map(f64::abs));
            let h = normal(&mut rng, &[5, 3], 1.0);
            let t = Tape::new();
            let b = ps.bind_frozen(&t);
            let (hv, av) = (t.constant(h), t.constant(a));
            let dn = layer.forward(&b, &hv, &av).unwrap().value();
            let van = vanilla_gcn(&hv, &av, &b[layer.weight(0)]).unwrap().value();
            assert!(dn.max_abs_diff(&van) < 1e-12);
        }
    }

    #[test]
    fn two_hop_only_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut c = cfg(2, 2, vec![0.7, 1.0]);
        c.selectors = vec![vec![false; 3], vec![true; 3]];
        let mut ps = ParamSet::new();
        let layer = DnGcn::new(c, 3, "g", &mut ps, &mut rng).unwrap();
        let a = norm(&m(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 1.0], &[0.0, 1.0, 0.0]]));
        let h = normal(&mut rng, &[3, 2], 1.0);
        let t = Tape::new();
        let b = ps.bind_frozen(&t);
        let out = layer.forward(&b, &t.constant(h.clone()), &t.constant(a.clone())).unwrap().value();

        let (w1, w2) = (ps.get(layer.weight(0)), ps.get(layer.weight(1)));
        let hop1 = a.matmul(&h).unwrap().matmul(w1).unwrap();
        let expect = a.matmul(&hop1).unwrap().matmul(w2).unwrap().map(|v| v.max(0.0));
        assert!(out.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn zero_betas_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamSet::new();
        let layer = DnGcn::new(cfg(2, 3, vec![0.0, 0.0]), 4, "g", &mut ps, &mut rng).unwrap();
        let t = Tape::new();
        let b = ps.bind_frozen(&t);
        let out = layer
            .forward(&b, &t.constant(normal(&mut rng, &[4, 2], 1.0)), &t.constant(Tensor::eye(4)))
            .unwrap();
        assert_eq!(out.value(), Tensor::zeros(&[4, 3]));
    }

    #[test]
    fn config_checks() {
        assert!(cfg(2, 2, vec![]).validate(3).is_err());
        assert!(cfg(2, 2, vec![-0.1]).validate(3).is_err());
        let mut c = cfg(2, 2, vec![0.5, 0.6]);
        assert!(c.validate(3).is_ok());
        assert_eq!(c.warnings().len(), 1);
        c.selectors = vec![vec![true; 3], vec![false; 3]];
        assert!(c.validate(3).is_err());
        c.selectors = vec![vec![true; 3]];
        assert!(c.validate(3).is_err());
        assert!(cfg(2, 2, vec![0.4, 0.6]).warnings().is_empty());
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut ps = ParamSet::new();
        let layer = DnGcn::new(cfg(2, 3, vec![0.5, 0.6]), 5, "g", &mut ps, &mut rng).unwrap();
        let a = normal(&mut rng, &[5, 5], 1.0).map(f64::abs);
        let h = normal(&mut rng, &[5, 2], 1.0);
        let perm = [3, 0, 4, 1, 2];
        let mut pm = Tensor::zeros(&[5, 5]);
        for (i, &j) in perm.iter().enumerate() {
            pm.data_mut()[i * 5 + j] = 1.0;
        }
        let run = |a: &Tensor, h: &Tensor| {
            let t = Tape::new();
            let b = ps.bind_frozen(&t);
            let a_hat = normalize_adjacency(&t.constant(a.clone())).unwrap();
            layer.forward(&b, &t.constant(h.clone()), &a_hat).unwrap().value()
        };
        let base = run(&a, &h);
        let pa = pm.matmul(&a).unwrap().matmul(&pm.transposed()).unwrap();
        let ph = pm.matmul(&h).unwrap();
        let permuted = run(&pa, &ph);
        assert!(permuted.max_abs_diff(&pm.matmul(&base).unwrap()) < 1e-10);
    }

    #[test]
    fn temporal_states_propagate_per_timestep() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamSet::new();
        let layer = DnGcn::new(cfg(2, 3, vec![0.5, 0.6]), 4, "g", &mut ps, &mut rng).unwrap();
        let a = norm(&normal(&mut rng, &[4, 4], 1.0).map(f64::abs));
        let h = normal(&mut rng, &[4, 5, 2], 1.0);
        let t = Tape::new();
        let b = ps.bind_frozen(&t);
        let av = t.constant(a);
        let full = layer.forward(&b, &t.constant(h.clone()), &av).unwrap().value();
        assert_eq!(full.shape(), &[4, 5, 3]);
        for step in 0..5 {
            let slice: Vec<f64> = (0..4).flat_map(|n| h.data()[(n * 5 + step) * 2..(n * 5 + step) * 2 + 2].to_vec()).collect();
            let hs = t.constant(Tensor::new(vec![4, 2], slice).unwrap());
            let one = layer.forward(&b, &hs, &av).unwrap().value();
            for n in 0..4 {
                for c in 0..3 {
                    let got = full.data()[(n * 5 + step) * 3 + c];
                    assert!((got - one.at(n, c)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn layer_norm_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ps = ParamSet::new();
        let ln = LayerNorm::new(6, "ln", &mut ps).unwrap();
        assert!(LayerNorm::new(1, "ln1", &mut ps).is_err());
        let t = Tape::new();
        let b = ps.bind_frozen(&t);
        let xt = normal(&mut rng, &[3, 4, 6], 2.0);
        let y = ln.forward(&b, &t.constant(xt.clone())).unwrap().value();
        let moments = |row: &[f64]| {
            let mean = row.iter().sum::<f64>() / 6.0;
            (mean, row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0)
        };
        for (row, src) in y.data().chunks(6).zip(xt.data().chunks(6)) {
            let (mean, var) = moments(row);
            let (_, src_var) = moments(src);
            assert!(mean.abs() < 1e-10);
            assert!((var - src_var / (src_var + LAYER_NORM_EPS)).abs() < 1e-10, "{var}");
        }
    }
}
