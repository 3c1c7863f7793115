//! Synthetic sessions with a planted graph.
//!
//! Class 0 is stationary AR(1) noise on every node. Class 1 adds spike events
//! on seed nodes; each spike decays over a short kernel and reaches the seed's
//! planted neighbors one step later, attenuated. Every participant scales its
//! sessions by a fixed gain.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::SessionSample;
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::preprocess::BandSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalParams {
    pub noise_sigma: f64,
    pub ar_coeff: f64,
    pub spike_amplitude: f64,
    /// Fraction of a seed spike that reaches each neighbor.
    pub attenuation: f64,
    /// Chance that a spike reaches each planted neighbor.
    pub propagation_prob: f64,
    pub kernel_decay: f64,
    pub kernel_len: usize,
    pub events_per_session: usize,
    /// Participant gains are uniform in `1 ± gain_spread`.
    pub gain_spread: f64,
    pub len_min: usize,
    pub len_max: usize,
}

impl Default for SignalParams {
    fn default() -> Self {
        SignalParams {
            noise_sigma: 1.0,
            ar_coeff: 0.7,
            spike_amplitude: 8.0,
            attenuation: 0.6,
            propagation_prob: 1.0,
            kernel_decay: 0.6,
            kernel_len: 4,
            events_per_session: 6,
            gain_spread: 0.2,
            len_min: 24,
            len_max: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedWorld {
    /// Symmetric 0/1 matrix with an empty diagonal.
    pub adjacency: Tensor,
    pub signal: SignalParams,
}

impl PlantedWorld {
    /// Uniformly random graph with `round(density · p(p−1)/2)` undirected
    /// edges.
    pub fn random<R: Rng + ?Sized>(p: usize, density: f64, signal: SignalParams, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&density) {
            return Err(Error::Param(format!("edge density must lie in [0, 1], got {density}")));
        }
        if signal.len_min < 2 || signal.len_max < signal.len_min {
            return Err(Error::Param(format!(
                "session lengths {}..={} are invalid",
                signal.len_min, signal.len_max
            )));
        }
        if !(0.0..1.0).contains(&signal.ar_coeff.abs()) || !(0.0..1.0).contains(&signal.gain_spread) {
            return Err(Error::Param("AR coefficient and gain spread must lie in [0, 1)".into()));
        }
        let mut pairs: Vec<(usize, usize)> = (0..p).flat_map(|i| (i + 1..p).map(move |j| (i, j))).collect();
        let edges = (density * pairs.len() as f64).round() as usize;
        pairs.shuffle(rng);
        let mut adjacency = Tensor::zeros(&[p, p]);
        for &(i, j) in &pairs[..edges] {
            adjacency.data_mut()[i * p + j] = 1.0;
            adjacency.data_mut()[j * p + i] = 1.0;
        }
        Ok(PlantedWorld { adjacency, signal })
    }

    pub fn nodes(&self) -> usize {
        self.adjacency.shape()[0]
    }

    pub fn neighbors(&self, node: usize) -> Vec<usize> {
        (0..self.nodes()).filter(|&j| self.adjacency.at(node, j) != 0.0).collect()
    }

    /// Nodes with at least one planted edge.
    pub fn seed_nodes(&self) -> Vec<usize> {
        (0..self.nodes()).filter(|&i| !self.neighbors(i).is_empty()).collect()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.data().iter().filter(|v| **v != 0.0).count() / 2
    }

    /// Fraction of node pairs joined by a planted edge.
    pub fn density(&self) -> f64 {
        let p = self.nodes();
        if p < 2 {
            return 0.0;
        }
        self.edge_count() as f64 / (p * (p - 1) / 2) as f64
    }

    fn session<R: Rng + ?Sized>(&self, label: u8, gain: f64, rng: &mut R) -> Tensor {
        let s = &self.signal;
        let p = self.nodes();
        let n = rng.random_range(s.len_min..=s.len_max);
        let mut x = vec![0.0; p * n];
        let innovation = s.noise_sigma * (1.0 - s.ar_coeff * s.ar_coeff).sqrt();
        for node in 0..p {
            let row = &mut x[node * n..(node + 1) * n];
            let z0: f64 = StandardNormal.sample(rng);
            let mut prev = s.noise_sigma * z0;
            for v in row.iter_mut() {
                *v = prev;
                let z: f64 = StandardNormal.sample(rng);
                prev = s.ar_coeff * prev + innovation * z;
            }
        }
        let seeds = self.seed_nodes();
        if label == 1 && !seeds.is_empty() {
            for _ in 0..s.events_per_session {
                let seed = *seeds.choose(rng).expect("non-empty");
                let onset = rng.random_range(0..n - 1);
                let reached: Vec<usize> = self
                    .neighbors(seed)
                    .into_iter()
                    .filter(|_| rng.random::<f64>() < s.propagation_prob)
                    .collect();
                for k in 0..s.kernel_len {
                    let amp = s.spike_amplitude * s.kernel_decay.powi(k as i32);
                    if onset + k < n {
                        x[seed * n + onset + k] += amp;
                    }
                    if onset + k + 1 < n {
                        for &j in &reached {
                            x[j * n + onset + k + 1] += s.attenuation * amp;
                        }
                    }
                }
            }
        }
        x.iter_mut().for_each(|v| *v *= gain);
        Tensor::new(vec![p, n], x).expect("shape")
    }
}

/// `n_sessions` sessions spread round-robin over `n_participants`, with
/// `⌊n/2⌋` TSR labels placed at random.
pub fn generate_synthetic<R: Rng + ?Sized>(
    world: &PlantedWorld,
    n_sessions: usize,
    n_participants: usize,
    rng: &mut R,
) -> Result<Vec<SessionSample>> {
    if n_participants < 3 {
        return Err(Error::Config(format!("need at least 3 participants, got {n_participants}")));
    }
    let spread = world.signal.gain_spread;
    let gains: Vec<f64> = (0..n_participants)
        .map(|_| 1.0 + rng.random_range(-spread..=spread))
        .collect();
    let mut labels: Vec<u8> = (0..n_sessions).map(|i| u8::from(i < n_sessions / 2)).collect();
    labels.shuffle(rng);
    let width = (n_participants - 1).to_string().len().max(2);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let participant = i % n_participants;
            Ok(SessionSample {
                sequence: BandSequence::new(world.session(label, gains[participant], rng))?,
                label,
                participant_id: format!("p{participant:0width$}"),
                session_id: format!("s{i:05}"),
            })
        })
        .collect()
}

/// A planted world together with the sessions drawn from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub nodes: usize,
    pub density: f64,
    pub sessions: usize,
    pub participants: usize,
    pub signal: SignalParams,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            nodes: 16,
            density: 0.2,
            sessions: 400,
            participants: 8,
            signal: SignalParams::default(),
        }
    }
}

impl SyntheticConfig {
    /// The graph and the sessions both come from one stream seeded by `seed`.
    pub fn generate(&self, seed: u64) -> Result<(PlantedWorld, Vec<SessionSample>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let world = PlantedWorld::random(self.nodes, self.density, self.signal.clone(), &mut rng)?;
        let samples = generate_synthetic(&world, self.sessions, self.participants, &mut rng)?;
        Ok((world, samples))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ThresholdOracle {
    pub threshold: f64,
    pub accuracy: f64,
}

impl ThresholdOracle {
    /// Largest absolute feature value over the valid steps.
    pub fn statistic(sample: &SessionSample) -> f64 {
        let seq = &sample.sequence;
        let n = seq.len();
        let valid = seq.valid.iter().filter(|v| **v).count();
        seq.features
            .data()
            .chunks(n.max(1))
            .flat_map(|row| row[..valid].iter())
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    pub fn predict(&self, sample: &SessionSample) -> u8 {
        u8::from(Self::statistic(sample) > self.threshold)
    }
}

/// Best single threshold on the max-magnitude statistic for `samples`,
/// predicting TSR above it.
pub fn threshold_oracle(samples: &[SessionSample]) -> ThresholdOracle {
    let mut stats: Vec<(f64, u8)> = samples.iter().map(|s| (ThresholdOracle::statistic(s), s.label)).collect();
    stats.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total = stats.len().max(1) as f64;
    let positives = stats.iter().filter(|s| s.1 == 1).count();
    // Threshold below everything: every sample predicted TSR.
    let mut best = ThresholdOracle {
        threshold: stats.first().map_or(0.0, |s| s.0 - 1.0),
        accuracy: positives as f64 / total,
    };
    let mut correct = positives;
    for (i, &(value, label)) in stats.iter().enumerate() {
        if label == 1 {
            correct -= 1;
        } else {
            correct += 1;
        }
        let next = stats.get(i + 1).map_or(value + 1.0, |s| s.0);
        if next > value && correct as f64 / total > best.accuracy {
            best = ThresholdOracle {
                threshold: 0.5 * (value + next),
                accuracy: correct as f64 / total,
            };
        }
    }
    best
}
