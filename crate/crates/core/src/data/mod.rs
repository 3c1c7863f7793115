//! Session datasets: on-disk formats, the synthetic planted world and
//! participant-level splits.

mod format;
mod synth;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::BandSequence;

pub use format::{load_dataset, read_agt1, read_json, save_dataset, write_agt1, write_json, FORMAT_VERSION, MAGIC};
pub use synth::{generate_synthetic, threshold_oracle, PlantedWorld, SignalParams, SyntheticConfig, ThresholdOracle};

#[derive(Clone, Debug, PartialEq)]
pub struct SessionSample {
    pub sequence: BandSequence,
    /// 0 for natural reading, 1 for task-specific reading.
    pub label: u8,
    pub participant_id: String,
    pub session_id: String,
}

impl SessionSample {
    pub fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(Error::Param(format!("label must be 0 or 1, got {}", self.label)));
        }
        if self.participant_id.is_empty() {
            return Err(Error::Param("participant id must not be empty".into()));
        }
        if !self.sequence.features.is_finite() {
            return Err(Error::NonFinite(format!("features of session {}", self.session_id)));
        }
        Ok(())
    }
}

/// Relative participant shares of the train, validation and test parts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 12,
            val: 2,
            test: 4,
        }
    }
}

impl SplitRatios {
    /// Participant counts `(train, val, test)` for `m` participants; every
    /// part gets at least one.
    pub fn counts(&self, m: usize) -> Result<(usize, usize, usize)> {
        let total = self.train + self.val + self.test;
        if total == 0 || self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(Error::Config(format!("split ratios must all be positive, got {self:?}")));
        }
        if m < 3 {
            return Err(Error::Config(format!("{m} participants cannot fill train, validation and test")));
        }
        let share = |part: usize| ((m * part) as f64 / total as f64).round().max(1.0) as usize;
        let (val, test) = (share(self.val), share(self.test));
        if val + test >= m {
            return Err(Error::Config(format!("{m} participants leave none for training")));
        }
        Ok((m - val - test, val, test))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, Default)]
pub struct Split {
    pub spec: SplitSpec,
    pub train: Vec<SessionSample>,
    pub val: Vec<SessionSample>,
    pub test: Vec<SessionSample>,
}

pub fn participants(samples: &[SessionSample]) -> Vec<String> {
    samples
        .iter()
        .map(|s| s.participant_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Shuffles the sorted participant list with `seed` and cuts it by `ratios`.
pub fn split_by_participant(samples: &[SessionSample], ratios: SplitRatios, seed: u64) -> Result<Split> {
    let mut ids = participants(samples);
    let (n_train, n_val, _) = ratios.counts(ids.len())?;
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let spec = SplitSpec {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    };
    apply_split(samples, &spec)
}

/// Partitions samples by an explicit participant assignment.
pub fn apply_split(samples: &[SessionSample], spec: &SplitSpec) -> Result<Split> {
    let mut part_of = BTreeMap::new();
    for (part, ids) in [&spec.train, &spec.val, &spec.test].into_iter().enumerate() {
        for id in ids {
            if part_of.insert(id.as_str(), part).is_some() {
                return Err(Error::Config(format!("participant {id} is assigned to more than one split")));
            }
        }
    }
    let mut split = Split {
        spec: spec.clone(),
        ..Split::default()
    };
    for s in samples {
        let part = part_of
            .get(s.participant_id.as_str())
            .ok_or_else(|| Error::Config(format!("participant {} is not assigned to a split", s.participant_id)))?;
        match part {
            0 => split.train.push(s.clone()),
            1 => split.val.push(s.clone()),
            _ => split.test.push(s.clone()),
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tensor;
    use proptest::prelude::*;

    fn sample(participant: &str, i: usize) -> SessionSample {
        SessionSample {
            sequence: BandSequence::new(Tensor::zeros(&[2, 3])).unwrap(),
            label: (i % 2) as u8,
            participant_id: participant.into(),
            session_id: format!("s{i}"),
        }
    }

    fn world(m: usize, per: usize) -> Vec<SessionSample> {
        (0..m * per).map(|i| sample(&format!("p{}", i % m), i)).collect()
    }

    #[test]
    fn default_counts() {
        let r = SplitRatios::default();
        assert_eq!(r.counts(18).unwrap(), (12, 2, 4));
        assert_eq!(r.counts(3).unwrap(), (1, 1, 1));
        assert_eq!(r.counts(8).unwrap(), (5, 1, 2));
        assert!(matches!(r.counts(2), Err(Error::Config(_))));
    }

    #[test]
    fn explicit_split_checks() {
        let samples = world(3, 2);
        let spec = SplitSpec {
            train: vec!["p0".into()],
            val: vec!["p1".into()],
            test: vec!["p2".into()],
        };
        let split = apply_split(&samples, &spec).unwrap();
        assert_eq!((split.train.len(), split.val.len(), split.test.len()), (2, 2, 2));
        let overlap = SplitSpec {
            test: vec!["p2".into(), "p0".into()],
            ..spec.clone()
        };
        assert!(apply_split(&samples, &overlap).is_err());
        let missing = SplitSpec {
            test: vec![],
            ..spec
        };
        assert!(apply_split(&samples, &missing).is_err());
    }

    #[test]
    fn validation_rules() {
        let mut s = sample("p0", 0);
        assert!(s.validate().is_ok());
        s.label = 2;
        assert!(s.validate().is_err());
        let mut s = sample("", 0);
        assert!(s.validate().is_err());
        s.participant_id = "p".into();
        s.sequence.features.data_mut()[0] = f64::NAN;
        assert!(s.validate().is_err());
    }

    proptest! {
        #[test]
        fn no_participant_leakage(m in 3usize..20, per in 1usize..4, seed in any::<u64>()) {
            let samples = world(m, per);
            let split = split_by_participant(&samples, SplitRatios::default(), seed).unwrap();
            let ids = |v: &[SessionSample]| v.iter().map(|s| s.participant_id.clone()).collect::<BTreeSet<_>>();
            let (a, b, c) = (ids(&split.train), ids(&split.val), ids(&split.test));
            prop_assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
            prop_assert_eq!(a.len() + b.len() + c.len(), m);
            prop_assert!(!a.is_empty() && !b.is_empty() && !c.is_empty());
            prop_assert_eq!(split.train.len() + split.val.len() + split.test.len(), samples.len());
        }
    }
}
