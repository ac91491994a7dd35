//! Audio frontend: turns raw mono audio into the three time-frequency
//! representations the models consume (log mel-spectrogram, log STFT
//! magnitude, stacked MFCCs with first and second derivatives).
//!
//! All entry points are pure functions: the same clip and config always
//! produce bit-identical features, so batch preprocessing can fan out
//! across workers freely.

use std::fmt;

mod feature;
mod mel;
mod mfcc;
mod resample;
mod stft;
mod wav;

pub use feature::{read_feature, read_feature_header, write_feature, FeatureFileError};
pub use mel::{mel_bins_per_khz, mel_filterbank, melspectrogram_log, MelFilterbank};
pub use mfcc::mfcc_stack;
pub use resample::resample;
pub use stft::stft_log;
pub use wav::{read_wav, write_wav_pcm16, WavError};

/// Raw mono audio: amplitude samples (nominal range [-1, 1]) and their rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, AudioError> {
        if samples.is_empty() {
            return Err(AudioError::EmptyInput);
        }
        if sample_rate == 0 {
            return Err(AudioError::InvalidConfig("sample rate must be positive".to_string()));
        }
        Ok(AudioClip { samples, sample_rate })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Frontend parameters. Defaults pin the whole pipeline: 12 kHz audio,
/// 256-point FFT with hop 256, 1366 frames, 96 mel bands, 30 cepstra.
#[derive(Clone, Debug, PartialEq)]
pub struct FrontendConfig {
    pub target_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_frames: usize,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            target_rate: 12_000,
            n_fft: 256,
            hop: 256,
            n_frames: 1366,
            n_mels: 96,
            n_mfcc: 30,
            fmin: 0.0,
            fmax: 6_000.0,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<(), AudioError> {
        if self.target_rate == 0 || self.n_fft == 0 || self.hop == 0 || self.n_frames == 0 {
            return Err(AudioError::InvalidConfig(
                "rate, fft size, hop, and frame count must be positive".to_string(),
            ));
        }
        if self.hop > self.n_fft {
            return Err(AudioError::InvalidConfig(format!(
                "hop {} exceeds fft size {}",
                self.hop, self.n_fft
            )));
        }
        if self.n_mels == 0 || self.n_mels > self.n_fft / 2 + 1 {
            return Err(AudioError::InvalidConfig(format!(
                "{} mel bands do not fit {} spectrum bins",
                self.n_mels,
                self.n_fft / 2 + 1
            )));
        }
        if self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return Err(AudioError::InvalidConfig(format!(
                "{} cepstral coefficients exceed {} mel bands",
                self.n_mfcc, self.n_mels
            )));
        }
        let nyquist = self.target_rate as f64 / 2.0;
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= nyquist) {
            return Err(AudioError::InvalidConfig(format!(
                "frequency range [{}, {}] invalid for Nyquist {}",
                self.fmin, self.fmax, nyquist
            )));
        }
        Ok(())
    }

    /// Number of STFT bands: n_fft/2 + 1.
    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Fixed sample count every clip is padded or truncated to.
    pub fn expected_samples(&self) -> usize {
        self.n_frames * self.hop
    }

    /// 64-bit FNV-1a digest over the canonical field encoding; stored in
    /// feature files so stale caches are detectable.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(&self.target_rate.to_le_bytes());
        eat(&(self.n_fft as u32).to_le_bytes());
        eat(&(self.hop as u32).to_le_bytes());
        eat(&(self.n_frames as u32).to_le_bytes());
        eat(&(self.n_mels as u32).to_le_bytes());
        eat(&(self.n_mfcc as u32).to_le_bytes());
        eat(&self.fmin.to_bits().to_le_bytes());
        eat(&self.fmax.to_bits().to_le_bytes());
        h
    }
}

/// Which representation a [`FeatureMatrix`] holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    LogMel,
    LogStft,
    MfccStack,
}

impl FeatureKind {
    pub fn band_count(&self, cfg: &FrontendConfig) -> usize {
        match self {
            FeatureKind::LogMel => cfg.n_mels,
            FeatureKind::LogStft => cfg.n_bins(),
            FeatureKind::MfccStack => 3 * cfg.n_mfcc,
        }
    }

    pub(crate) fn code(&self) -> u8 {
        match self {
            FeatureKind::LogMel => 0,
            FeatureKind::LogStft => 1,
            FeatureKind::MfccStack => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FeatureKind::LogMel),
            1 => Some(FeatureKind::LogStft),
            2 => Some(FeatureKind::MfccStack),
            _ => None,
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "mel" => Some(FeatureKind::LogMel),
            "stft" => Some(FeatureKind::LogStft),
            "mfcc" => Some(FeatureKind::MfccStack),
            _ => None,
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            FeatureKind::LogMel => "mel",
            FeatureKind::LogStft => "stft",
            FeatureKind::MfccStack => "mfcc",
        };
        f.write_str(name)
    }
}

/// A bands-by-frames feature image, stored band-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub kind: FeatureKind,
    pub band_count: usize,
    pub frame_count: usize,
    pub config_hash: u64,
    /// `data[band * frame_count + frame]`
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn at(&self, band: usize, frame: usize) -> f32 {
        self.data[band * self.frame_count + frame]
    }

    pub fn band(&self, band: usize) -> &[f32] {
        &self.data[band * self.frame_count..(band + 1) * self.frame_count]
    }
}

/// Log floor added before every logarithm so silence maps to a finite value.
pub const LOG_EPS: f64 = 1e-10;

#[derive(Debug)]
pub enum AudioError {
    EmptyInput,
    /// Resampling only goes downward; the source rate was below the target.
    UpsampleUnsupported {
        from: u32,
        to: u32,
    },
    /// The clip's sample rate does not match the configured target rate.
    RateMismatch {
        expected: u32,
        got: u32,
    },
    /// The clip length does not match n_frames * hop; run pad_or_trim first.
    LengthMismatch {
        expected: usize,
        got: usize,
    },
    InvalidConfig(String),
}

impl fmt::Display for AudioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AudioError::EmptyInput => write!(f, "audio clip has no samples"),
            AudioError::UpsampleUnsupported { from, to } => {
                write!(f, "cannot resample upward from {from} Hz to {to} Hz")
            }
            AudioError::RateMismatch { expected, got } => {
                write!(f, "expected {expected} Hz audio, got {got} Hz")
            }
            AudioError::LengthMismatch { expected, got } => {
                write!(f, "expected exactly {expected} samples, got {got}")
            }
            AudioError::InvalidConfig(msg) => write!(f, "invalid frontend config: {msg}"),
        }
    }
}

impl std::error::Error for AudioError {}

/// Forces the clip to exactly `n_frames * hop` samples: shorter clips are
/// zero-padded at the end, longer ones truncated at the end. The clip must
/// already be at the configured target rate.
pub fn pad_or_trim(clip: &AudioClip, cfg: &FrontendConfig) -> AudioClip {
    debug_assert_eq!(clip.sample_rate, cfg.target_rate, "resample before pad_or_trim");
    let want = cfg.expected_samples();
    let mut samples = clip.samples.clone();
    samples.resize(want, 0.0);
    AudioClip { samples, sample_rate: clip.sample_rate }
}

/// The whole frontend in one call: resample to the target rate, fix the
/// length, and compute the requested representation.
pub fn extract_features(
    clip: &AudioClip,
    cfg: &FrontendConfig,
    kind: FeatureKind,
) -> Result<FeatureMatrix, AudioError> {
    cfg.validate()?;
    let at_rate = if clip.sample_rate == cfg.target_rate {
        clip.clone()
    } else {
        resample(clip, cfg.target_rate)?
    };
    let fixed = pad_or_trim(&at_rate, cfg);
    match kind {
        FeatureKind::LogMel => melspectrogram_log(&fixed, cfg),
        FeatureKind::LogStft => stft_log(&fixed, cfg),
        FeatureKind::MfccStack => mfcc_stack(&fixed, cfg),
    }
}
