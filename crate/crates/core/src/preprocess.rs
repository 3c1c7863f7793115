//! Fixation segmentation and band-feature extraction.
//!
//! A session becomes a `p × n` matrix: one column per first fixation on a
//! word (in visit order), one row per electrode/band pair holding the mean
//! band-limited signal over that fixation window.

use std::collections::HashSet;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};

/// Default padded sequence length.
pub const DEFAULT_MAX_LEN: usize = 168;

pub const NUM_BANDS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FrequencyBand {
    pub name: &'static str,
    pub low_hz: f64,
    pub high_hz: f64,
}

/// θ1, θ2, α1, α2, β1, β2, γ1, γ2. γ1 and γ2 share the 40 Hz edge, which
/// belongs to γ2.
pub const FREQUENCY_BANDS: [FrequencyBand; NUM_BANDS] = [
    FrequencyBand { name: "theta1", low_hz: 4.0, high_hz: 6.0 },
    FrequencyBand { name: "theta2", low_hz: 6.5, high_hz: 8.0 },
    FrequencyBand { name: "alpha1", low_hz: 8.5, high_hz: 10.0 },
    FrequencyBand { name: "alpha2", low_hz: 10.5, high_hz: 13.0 },
    FrequencyBand { name: "beta1", low_hz: 13.5, high_hz: 18.0 },
    FrequencyBand { name: "beta2", low_hz: 18.5, high_hz: 30.0 },
    FrequencyBand { name: "gamma1", low_hz: 30.5, high_hz: 40.0 },
    FrequencyBand { name: "gamma2", low_hz: 40.0, high_hz: 49.5 },
];

/// Band index owning frequency `hz`, if any.
pub fn band_of(hz: f64) -> Option<usize> {
    let hz = hz.abs();
    // scanned from the top so a shared edge goes to the upper band
    (0..NUM_BANDS)
        .rev()
        .find(|&b| hz >= FREQUENCY_BANDS[b].low_hz && hz <= FREQUENCY_BANDS[b].high_hz)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandStatistic {
    #[default]
    MeanMagnitude,
    MeanPower,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixationEvent {
    /// Position of the fixated word in reading order.
    pub word_index: usize,
    pub onset_ms: f64,
    pub duration_ms: f64,
    pub gaze_x: f64,
}

/// Time window of the first fixation on a word.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixationWindow {
    pub word_index: usize,
    pub onset_ms: f64,
    pub duration_ms: f64,
}

/// Raw EEG recorded during one fixation, `electrodes × samples`.
#[derive(Clone, Debug)]
pub struct RawEegSegment {
    pub samples: Tensor,
    pub sample_rate_hz: f64,
}

impl RawEegSegment {
    pub fn electrodes(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-session feature matrix with column validity flags.
#[derive(Clone, Debug, PartialEq)]
pub struct BandSequence {
    /// `p × n` features, one column per fixation step.
    pub features: Tensor,
    /// One flag per column; padded columns are `false`.
    pub valid: Vec<bool>,
}

impl BandSequence {
    /// Unpadded sequence with every column valid.
    pub fn new(features: Tensor) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::shape("band_sequence", features.shape(), &[]));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("band features contain NaN or Inf".into()));
        }
        let n = features.shape()[1];
        Ok(BandSequence {
            features,
            valid: vec![true; n],
        })
    }

    pub fn nodes(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of leading valid columns. Validity must be a prefix.
    pub fn valid_len(&self) -> Result<usize> {
        let n = self.valid.iter().take_while(|v| **v).count();
        if self.valid[n..].iter().any(|v| *v) {
            return Err(Error::Param("valid columns must form a prefix".into()));
        }
        Ok(n)
    }

    /// Copy containing only the valid prefix.
    pub fn trimmed(&self) -> Result<BandSequence> {
        let n = self.valid_len()?;
        let (p, len) = (self.nodes(), self.len());
        let mut data = Vec::with_capacity(p * n);
        for row in self.features.data().chunks(len) {
            data.extend_from_slice(&row[..n]);
        }
        Ok(BandSequence {
            features: Tensor::new(vec![p, n], data)?,
            valid: vec![true; n],
        })
    }

    /// Zero-pads to `max_len` columns, marking the padding invalid.
    pub fn padded(&self, max_len: usize) -> Result<BandSequence> {
        let trimmed = self.trimmed()?;
        let columns: Vec<Vec<f64>> = (0..trimmed.len())
            .map(|c| (0..trimmed.nodes()).map(|r| trimmed.features.at(r, c)).collect())
            .collect();
        assemble_session(&columns, trimmed.nodes(), max_len)
    }
}

/// Keeps only the first fixation on each word, in visit order.
pub fn segment_ffd(fixations: &[FixationEvent]) -> Result<Vec<FixationWindow>> {
    if fixations.is_empty() {
        return Err(Error::EmptySession);
    }
    let mut seen = HashSet::new();
    let mut last_onset = f64::NEG_INFINITY;
    let mut windows = Vec::new();
    for f in fixations {
        if f.onset_ms < last_onset {
            return Err(Error::Param(format!(
                "fixation onsets must be non-decreasing ({} after {last_onset})",
                f.onset_ms
            )));
        }
        if f.duration_ms.is_nan() || f.duration_ms <= 0.0 {
            return Err(Error::Param(format!("fixation duration must be positive, got {}", f.duration_ms)));
        }
        last_onset = f.onset_ms;
        if seen.insert(f.word_index) {
            windows.push(FixationWindow {
                word_index: f.word_index,
                onset_ms: f.onset_ms,
                duration_ms: f.duration_ms,
            });
        }
    }
    Ok(windows)
}

/// Mean band-limited statistic per electrode and band, electrode-major.
///
/// Each electrode trace is transformed, every bin outside the band is
/// zeroed (both signs of frequency), and the inverse transform is averaged
/// as magnitude or power over the window.
pub fn band_features(segment: &RawEegSegment, statistic: BandStatistic) -> Result<Vec<f64>> {
    let min_rate = 2.0 * FREQUENCY_BANDS[NUM_BANDS - 1].high_hz;
    if segment.sample_rate_hz < min_rate {
        return Err(Error::Param(format!(
            "sample rate {} Hz is below the {min_rate} Hz needed for the top band",
            segment.sample_rate_hz
        )));
    }
    let n = segment.len();
    if n < 2 {
        return Err(Error::DegenerateWindow { samples: n });
    }
    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(n);
    let inverse = planner.plan_fft_inverse(n);
    let bin_hz = segment.sample_rate_hz / n as f64;

    // signed frequency of every bin
    let bin_band: Vec<Option<usize>> = (0..n)
        .map(|k| {
            let signed = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
            band_of(signed * bin_hz)
        })
        .collect();

    let mut out = Vec::with_capacity(segment.electrodes() * NUM_BANDS);
    for trace in segment.samples.data().chunks(n) {
        let mut spectrum: Vec<Complex<f64>> = trace.iter().map(|&v| Complex::new(v, 0.0)).collect();
        forward.process(&mut spectrum);
        for band in 0..NUM_BANDS {
            let mut filtered: Vec<Complex<f64>> = spectrum
                .iter()
                .zip(&bin_band)
                .map(|(c, b)| if *b == Some(band) { *c } else { Complex::new(0.0, 0.0) })
                .collect();
            inverse.process(&mut filtered);
            let scale = 1.0 / n as f64;
            let stat = filtered
                .iter()
                .map(|c| {
                    let v = c.re * scale;
                    match statistic {
                        BandStatistic::MeanMagnitude => v.abs(),
                        BandStatistic::MeanPower => v * v,
                    }
                })
                .sum::<f64>()
                / n as f64;
            out.push(stat);
        }
    }
    Ok(out)
}

/// Places per-fixation feature vectors as columns of a `p × max_len`
/// matrix, zero-filling and invalidating the remainder.
pub fn assemble_session(columns: &[Vec<f64>], p: usize, max_len: usize) -> Result<BandSequence> {
    let n = columns.len();
    if n > max_len {
        return Err(Error::Overflow { len: n, max: max_len });
    }
    let mut data = vec![0.0; p * max_len];
    for (c, col) in columns.iter().enumerate() {
        if col.len() != p {
            return Err(Error::shape("assemble_session", &[p], &[col.len()]));
        }
        for (r, v) in col.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("feature ({r}, {c})")));
            }
            data[r * max_len + c] = *v;
        }
    }
    let mut valid = vec![false; max_len];
    valid[..n].iter_mut().for_each(|v| *v = true);
    Ok(BandSequence {
        features: Tensor::new(vec![p, max_len], data)?,
        valid,
    })
}

/// Segments a session and extracts band features for every first fixation.
///
/// `segments[i]` holds the raw EEG for `fixations[i]`.
pub fn session_features(
    fixations: &[FixationEvent],
    segments: &[RawEegSegment],
    statistic: BandStatistic,
    max_len: usize,
) -> Result<BandSequence> {
    if fixations.len() != segments.len() {
        return Err(Error::shape("session_features", &[fixations.len()], &[segments.len()]));
    }
    let windows = segment_ffd(fixations)?;
    let mut columns = Vec::with_capacity(windows.len());
    let mut p = None;
    for w in &windows {
        let i = fixations
            .iter()
            .position(|f| f.word_index == w.word_index)
            .expect("window comes from fixations");
        let col = band_features(&segments[i], statistic)?;
        if *p.get_or_insert(col.len()) != col.len() {
            return Err(Error::shape("session_features", &[p.unwrap_or(0)], &[col.len()]));
        }
        columns.push(col);
    }
    assemble_session(&columns, p.unwrap_or(0), max_len)
}
