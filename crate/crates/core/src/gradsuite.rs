//! Finite-difference gradient checks for every layer and for a tiny
//! end-to-end model, on fixed seeds.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::agl::{AglConfig, AglLayer, GumbelNoise};
use crate::diff::{check_gradients, GradCheckReport, Tensor};
use crate::error::{Error, Result};
use crate::gconv::{normalize_adjacency, Activation, DnGcn, DnGcnConfig, LayerNorm};
use crate::model::{bce_loss, Model, ModelConfig, Perturbation};
use crate::params::{normal, Bound, ParamSet};
use crate::preprocess::BandSequence;
use crate::tconv::{DiTcn, DiTcnConfig};

pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradModule {
    Agl,
    Gconv,
    Tconv,
    Head,
    Model,
}

impl GradModule {
    pub const ALL: [GradModule; 5] = [
        GradModule::Agl,
        GradModule::Gconv,
        GradModule::Tconv,
        GradModule::Head,
        GradModule::Model,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradModule::Agl => "agl",
            GradModule::Gconv => "gconv",
            GradModule::Tconv => "tconv",
            GradModule::Head => "head",
            GradModule::Model => "model",
        }
    }
}

impl fmt::Display for GradModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradModule::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradient-check module {s:?}")))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub module: GradModule,
    pub check: &'static str,
    pub report: GradCheckReport,
}

/// Runs every check belonging to `modules`, in order.
pub fn run(modules: &[GradModule]) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for &module in modules {
        let checks: Vec<(&'static str, fn() -> Result<GradCheckReport>)> = match module {
            GradModule::Agl => vec![("agl layer", agl_layer)],
            GradModule::Gconv => vec![("dn-gcn", dn_gcn), ("layer norm", layer_norm)],
            GradModule::Tconv => vec![("di-tcn", di_tcn)],
            GradModule::Head => vec![("dense head", head)],
            GradModule::Model => vec![("end to end", end_to_end)],
        };
        for (check, f) in checks {
            out.push(SuiteEntry {
                module,
                check,
                report: f()?,
            });
        }
    }
    Ok(out)
}

fn jittered(t: &Tensor, rng: &mut ChaCha8Rng, std: f64) -> Tensor {
    let noise = normal(rng, t.shape(), std);
    let data = t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

/// p=6, n=5, d_e=3, two partitions, Gumbel noise frozen to one draw.
pub fn agl_layer() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ps = ParamSet::new();
    let cfg = AglConfig {
        nodes: 6,
        input_len: 5,
        embed_dim: 3,
        partitions: 2,
        k_edges: 3,
        omega: 0.5,
        lambda: 0.5,
        tau: 0.5,
    };
    let layer = AglLayer::new(cfg, &mut ps, &mut rng)?;
    // The identity φ puts many pre-activations exactly on the ReLU kink.
    let (w, bias) = layer.phi();
    *ps.get_mut(w) = jittered(ps.get(w), &mut rng, 0.1);
    *ps.get_mut(bias) = normal(&mut rng, &[6], 0.1);
    let n = normal(&mut rng, &[6, 5], 1.0);
    let noise = GumbelNoise::sample(&mut rng, 6, 2);
    let weights = normal(&mut rng, &[6, 6], 1.0);
    let mut inputs = vec![n];
    inputs.extend(ps.tensors().iter().cloned());
    check_gradients(
        |tape, v| {
            let b = Bound::from_vars(v[1..].to_vec());
            let g = layer.forward(&b, &v[0], &noise)?;
            g.adjacency.mul(&tape.constant(weights.clone()))?.sum(None)
        },
        &inputs,
        1e-5,
        LAYER_TOLERANCE,
    )
}

/// p=4, c=3, K=2 with the adjacency itself as an input.
pub fn dn_gcn() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ps = ParamSet::new();
    let cfg = DnGcnConfig {
        in_channels: 3,
        out_channels: 3,
        betas: vec![0.5, 0.6],
        selectors: Vec::new(),
        activation: Activation::Relu,
    };
    let layer = DnGcn::new(cfg, 4, "g", &mut ps, &mut rng)?;
    let a = normal(&mut rng, &[4, 4], 1.0).map(f64::abs);
    let h = normal(&mut rng, &[4, 3], 1.0);
    let w = normal(&mut rng, &[4, 3], 1.0);
    let mut inputs = vec![h, a];
    inputs.extend(ps.tensors().iter().cloned());
    check_gradients(
        |t, v| {
            let b = Bound::from_vars(v[2..].to_vec());
            let a_hat = normalize_adjacency(&v[1])?;
            layer.forward(&b, &v[0], &a_hat)?.mul(&t.constant(w.clone()))?.sum(None)
        },
        &inputs,
        1e-5,
        LAYER_TOLERANCE,
    )
}

pub fn layer_norm() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ps = ParamSet::new();
    let ln = LayerNorm::new(4, "ln", &mut ps)?;
    for t in ps.tensors_mut() {
        *t = jittered(t, &mut rng, 0.3);
    }
    let x = normal(&mut rng, &[3, 2, 4], 1.0);
    let w = normal(&mut rng, &[3, 2, 4], 1.0);
    let mut inputs = vec![x];
    inputs.extend(ps.tensors().iter().cloned());
    check_gradients(
        |t, v| {
            let b = Bound::from_vars(v[1..].to_vec());
            ln.forward(&b, &v[0])?.mul(&t.constant(w.clone()))?.sum(None)
        },
        &inputs,
        1e-5,
        LAYER_TOLERANCE,
    )
}

/// C_in=2, T=12, D=3.
pub fn di_tcn() -> Result<GradCheckReport> {
    let mut ps = ParamSet::new();
    let cfg = DiTcnConfig {
        in_channels: 2,
        out_channels: 4,
        max_width: 3,
        dilation: 1,
    };
    let layer = DiTcn::new(cfg, "t", &mut ps, &mut ChaCha8Rng::seed_from_u64(7))?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = normal(&mut rng, &[1, 12, 2], 1.0);
    let w = normal(&mut rng, &[1, 10, 4], 1.0);
    let mut inputs = vec![x];
    inputs.extend(ps.tensors().iter().cloned());
    check_gradients(
        |t, v| {
            let b = Bound::from_vars(v[1..].to_vec());
            layer.forward(&b, &v[0])?.tanh().mul(&t.constant(w.clone()))?.sum(None)
        },
        &inputs,
        1e-5,
        LAYER_TOLERANCE,
    )
}

/// p=6, n=10, d_e=3, K=2, D=3, one block, head 4/3.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        p: 6,
        max_len: 10,
        embed_dim: 3,
        k_edges: 2,
        max_width: 3,
        num_blocks: 1,
        gcn_channels: 4,
        tcn_channels: 4,
        head_widths: vec![4, 3],
        ..ModelConfig::default()
    }
}

/// Head alone on random features, with a fixed dropout draw.
pub fn head() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = Model::new(tiny_config())?;
    let features = normal(&mut rng, &[1, model.head_input_width()], 1.0);
    let dropout = model.sample_perturbation(&mut rng, 0.3).dropout;
    let mut inputs = vec![features];
    inputs.extend(model.params().tensors().iter().cloned());
    check_gradients(
        |_, v| {
            let b = Bound::from_vars(v[1..].to_vec());
            let prob = model.head(&b, &v[0], &dropout)?;
            bce_loss(&[prob], &[1])
        },
        &inputs,
        1e-5,
        LAYER_TOLERANCE,
    )
}

/// Every parameter of the tiny model through the cross-entropy loss.
pub fn end_to_end() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut model = Model::new(tiny_config())?;
    // The identity φ puts many graph pre-activations exactly on the ReLU
    // kink; check at a generic point instead.
    let (w, bias) = model.agl().phi();
    for id in [w, bias] {
        let moved = jittered(model.params().get(id), &mut rng, 0.1);
        *model.params_mut().get_mut(id) = moved;
    }
    let seq = BandSequence::new(normal(&mut rng, &[6, 10], 1.0))?;
    let perturbation = Perturbation {
        noise: GumbelNoise::sample(&mut rng, 6, 2),
        dropout: Vec::new(),
    };
    check_gradients(
        |t, v| {
            let b = Bound::from_vars(v.to_vec());
            let out = model.forward(t, &b, &seq, &perturbation)?;
            bce_loss(&[out.prob], &[1])
        },
        model.params().tensors(),
        1e-6,
        MODEL_TOLERANCE,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let entries = run(&GradModule::ALL).unwrap();
        assert_eq!(entries.len(), 6);
        for e in &entries {
            assert!(e.report.passed, "{} {}: {:?}", e.module, e.check, e.report);
            assert!(e.report.checked > 0);
        }
    }

    #[test]
    fn module_names_round_trip() {
        for m in GradModule::ALL {
            assert_eq!(m.name().parse::<GradModule>().unwrap(), m);
        }
        assert!("all".parse::<GradModule>().is_err());
    }
}
