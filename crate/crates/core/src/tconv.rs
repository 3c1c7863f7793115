//! Dilated inception temporal convolution.
//!
//! Branches of filter widths `2..=D` run in parallel over `[nodes, T, C]`
//! states, sharing one filter bank across nodes. Each branch is cut to the
//! trailing `T − (D−1)·r` steps so the concatenation is aligned on the
//! widest branch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{normal, Bound, ParamId, ParamSet};

/// Splits `total` channels over the branch widths `2..=max_width`; the
/// remainder goes to the smallest widths.
pub fn branch_channels(max_width: usize, total: usize) -> Vec<usize> {
    let branches = max_width.saturating_sub(1);
    if branches == 0 {
        return Vec::new();
    }
    let (base, extra) = (total / branches, total % branches);
    (0..branches).map(|i| base + usize::from(i < extra)).collect()
}

/// Dilation `2^b` for block `b`.
pub fn doubling_schedule(num_blocks: usize) -> Vec<usize> {
    (0..num_blocks).map(|b| 1usize << b).collect()
}

/// `1 + Σ (D−1)·r` over the blocks' dilations.
pub fn receptive_field(max_width: usize, dilations: &[usize]) -> usize {
    1 + dilations
        .iter()
        .map(|r| max_width.saturating_sub(1) * r)
        .sum::<usize>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiTcnConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Widest filter `D`; branches use widths `2..=D`.
    pub max_width: usize,
    pub dilation: usize,
}

impl DiTcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_width < 2 {
            return Err(Error::Param(format!("widest temporal filter must be at least 2, got {}", self.max_width)));
        }
        if self.dilation == 0 {
            return Err(Error::Param("dilation must be positive".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Param("temporal convolution needs input channels".into()));
        }
        if self.out_channels < self.max_width - 1 {
            return Err(Error::Param(format!(
                "{} output channels cannot feed {} branches",
                self.out_channels,
                self.max_width - 1
            )));
        }
        Ok(())
    }

    pub fn min_len(&self) -> usize {
        (self.max_width - 1) * self.dilation + 1
    }
}

#[derive(Clone, Debug)]
pub struct DiTcn {
    cfg: DiTcnConfig,
    /// One `[c_b, C_in, d]` filter bank per width `d`.
    filters: Vec<ParamId>,
}

impl DiTcn {
    pub fn new<R: Rng + ?Sized>(cfg: DiTcnConfig, prefix: &str, params: &mut ParamSet, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let filters = branch_channels(cfg.max_width, cfg.out_channels)
            .into_iter()
            .enumerate()
            .map(|(i, c_b)| {
                let width = i + 2;
                let std = (2.0 / (cfg.in_channels * width + c_b) as f64).sqrt();
                params.add(format!("{prefix}.f{width}"), normal(rng, &[c_b, cfg.in_channels, width], std))
            })
            .collect();
        Ok(DiTcn { cfg, filters })
    }

    pub fn config(&self) -> &DiTcnConfig {
        &self.cfg
    }

    /// Filter bank of width `d`.
    pub fn filters(&self, width: usize) -> ParamId {
        self.filters[width - 2]
    }

    /// `[nodes, T, C_in] → [nodes, T − (D−1)·r, C_out]`.
    pub fn forward<'t>(&self, b: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.cfg.in_channels {
            return Err(Error::shape("di_tcn", &shape, &[0, 0, self.cfg.in_channels]));
        }
        let t = shape[1];
        let required = self.cfg.min_len();
        if t < required {
            return Err(Error::Length { len: t, required });
        }
        let r = self.cfg.dilation;
        let out_len = t - (self.cfg.max_width - 1) * r;
        let branches = self
            .filters
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                let y = x.conv1d(&b[f], r)?;
                let len = y.shape()[1];
                let trimmed = y.slice(1, len - out_len, out_len)?;
                debug_assert_eq!(trimmed.shape()[1], out_len, "branch {} misaligned", i + 2);
                Ok(trimmed)
            })
            .collect::<Result<Vec<_>>>()?;
        x.tape().concat(&branches, 2)
    }
}

/// Convenience for a single stream: `x` is `[C_in, T]`, output `[C_out, T']`.
pub fn di_tcn<'t>(layer: &DiTcn, b: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(Error::shape("di_tcn", &shape, &[layer.cfg.in_channels, 0]));
    }
    let y = layer.forward(b, &x.t()?.reshape(&[1, shape[1], shape[0]])?)?;
    let ys = y.shape();
    y.reshape(&[ys[1], ys[2]])?.t()
}

/// Zero filters of the configured layout, for building hand-set layers.
pub fn zero_filters(cfg: &DiTcnConfig) -> Vec<Tensor> {
    branch_channels(cfg.max_width, cfg.out_channels)
        .into_iter()
        .enumerate()
        .map(|(i, c_b)| Tensor::zeros(&[c_b, cfg.in_channels, i + 2]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(cfg: DiTcnConfig, seed: u64) -> (DiTcn, ParamSet) {
        let mut ps = ParamSet::new();
        let l = DiTcn::new(cfg, "t", &mut ps, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (l, ps)
    }

    fn cfg(cin: usize, cout: usize, d: usize, r: usize) -> DiTcnConfig {
        DiTcnConfig {
            in_channels: cin,
            out_channels: cout,
            max_width: d,
            dilation: r,
        }
    }

    #[test]
    fn channel_split() {
        assert_eq!(branch_channels(7, 16), vec![3, 3, 3, 3, 2, 2]);
        assert_eq!(branch_channels(2, 16), vec![16]);
        assert_eq!(branch_channels(3, 5), vec![3, 2]);
        for d in 2..=7 {
            assert_eq!(branch_channels(d, 16).iter().sum::<usize>(), 16);
        }
    }

    #[test]
    fn receptive_field_examples() {
        assert_eq!(receptive_field(7, &[1]), 7);
        assert_eq!(receptive_field(7, &doubling_schedule(2)), 19);
        assert_eq!(receptive_field(7, &[]), 1);
        for blocks in 0..5 {
            for d in 2..7 {
                let rf = receptive_field(d, &doubling_schedule(blocks));
                assert!(receptive_field(d, &doubling_schedule(blocks + 1)) > rf);
                assert!(receptive_field(d + 1, &doubling_schedule(blocks + 1)) > receptive_field(d, &doubling_schedule(blocks + 1)));
            }
        }
    }

    #[test]
    fn unit_filter_sum() {
        let (l, mut ps) = layer(cfg(1, 1, 2, 1), 0);
        *ps.get_mut(l.filters(2)) = Tensor::full(&[1, 1, 2], 1.0);
        let t = Tape::new();
        let b = ps.bind_frozen(&t);
        let x = t.constant(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(di_tcn(&l, &b, &x).unwrap().value().data(), &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn zero_filters_and_shapes() {
        let c = cfg(2, 5, 3, 1);
        let (l, mut ps) = layer(c.clone(), 1);
        for (w, z) in [2, 3].into_iter().zip(zero_filters(&c)) {
            *ps.get_mut(l.filters(w)) = z;
        }
        let t = Tape::new();
        let b = ps.bind_frozen(&t);
        let x = t.constant(normal(&mut ChaCha8Rng::seed_from_u64(2), &[4, 10, 2], 1.0));
        let y = l.forward(&b, &x).unwrap().value();
        assert_eq!(y.shape(), &[4, 8, 5]);
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn too_short_reports_minimum() {
        let (l, ps) = layer(cfg(1, 4, 3, 2), 3);
        let t = Tape::new();
        let b = ps.bind_frozen(&t);
        let x = t.constant(Tensor::zeros(&[2, 4, 1]));
        match l.forward(&b, &x) {
            Err(Error::Length { len: 4, required: 5 }) => {}
            other => panic!("{other:?}"),
        }
    }

    // With a unit tap on the newest input of each branch, output t' reads
    // input t' + (D−1)·r, so an impulse at j lands at j − (D−1)·r.
    #[test]
    fn impulse_alignment() {
        for (d, r) in [(3, 1), (4, 2), (7, 1)] {
            let c = cfg(1, d - 1, d, r);
            let (l, mut ps) = layer(c, 4);
            for w in 2..=d {
                let mut f = Tensor::zeros(&[1, 1, w]);
                f.data_mut()[w - 1] = 1.0;
                *ps.get_mut(l.filters(w)) = f;
            }
            let t_len = 20;
            let j = 15;
            let mut x = Tensor::zeros(&[1, t_len, 1]);
            x.data_mut()[j] = 1.0;
            let t = Tape::new();
            let b = ps.bind_frozen(&t);
            let y = l.forward(&b, &t.constant(x)).unwrap().value();
            let out_len = t_len - (d - 1) * r;
            assert_eq!(y.shape(), &[1, out_len, d - 1]);
            for branch in 0..d - 1 {
                for step in 0..out_len {
                    let expect = if step == j - (d - 1) * r { 1.0 } else { 0.0 };
                    assert_eq!(y.data()[step * (d - 1) + branch], expect, "d={d} r={r} branch={branch}");
                }
            }
        }
    }

    #[test]
    fn nodes_share_filters() {
        let (l, ps) = layer(cfg(2, 4, 3, 2), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = normal(&mut rng, &[3, 9, 2], 1.0);
        let t = Tape::new();
        let b = ps.bind_frozen(&t);
        let all = l.forward(&b, &t.constant(x.clone())).unwrap().value();
        for node in 0..3 {
            let one = Tensor::new(vec![1, 9, 2], x.data()[node * 18..(node + 1) * 18].to_vec()).unwrap();
            let y = l.forward(&b, &t.constant(one)).unwrap().value();
            let per = y.numel();
            assert_eq!(&all.data()[node * per..(node + 1) * per], y.data());
        }
    }

}
